// Deterministic PRNG utilities. All exporter randomness flows through
// named substreams so re-exports are byte-identical.

export type Rng = () => number;

function fnv1a(text: string): number {
    let h = 0x811c9dc5;
    for (let i = 0; i < text.length; i++) {
        h ^= text.charCodeAt(i);
        h = Math.imul(h, 0x01000193);
    }
    return h >>> 0;
}

/** sfc32 generator seeded from a numeric seed plus a stream name. */
export function substream(seed: number, name: string): Rng {
    let a = seed >>> 0;
    let b = fnv1a(name);
    let c = 0x9e3779b9 ^ a;
    let d = 0x85ebca6b ^ b;
    const gen = () => {
        a >>>= 0; b >>>= 0; c >>>= 0; d >>>= 0;
        let t = (a + b) | 0;
        a = b ^ (b >>> 9);
        b = (c + (c << 3)) | 0;
        c = (c << 21) | (c >>> 11);
        d = (d + 1) | 0;
        t = (t + d) | 0;
        c = (c + t) | 0;
        return (t >>> 0) / 4294967296;
    };
    // warm up to decorrelate nearby seeds
    for (let i = 0; i < 12; i++) gen();
    return gen;
}

/** Standard normal draw via Box-Muller. */
export function gaussian(rng: Rng): number {
    let u = 0;
    while (u === 0) u = rng();
    const v = rng();
    return Math.sqrt(-2.0 * Math.log(u)) * Math.cos(2.0 * Math.PI * v);
}

export function gaussianArray(rng: Rng, n: number): Float64Array {
    const out = new Float64Array(n);
    for (let i = 0; i < n; i++) out[i] = gaussian(rng);
    return out;
}

export function promptSeed(prompt: string): number {
    return fnv1a(prompt);
}
