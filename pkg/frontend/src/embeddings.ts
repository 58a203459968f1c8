// Deterministic stand-in text encoder: each prompt maps to a reproducible
// pseudo-embedding derived from its content hash. A real deployment swaps
// this for an actual encoder; the bundle format is identical either way.

import { Mat, zeros } from "./referenceNet.js";
import { gaussianArray, promptSeed, substream } from "./prng.js";

export function embedPrompt(prompt: string, dim: number): Float64Array {
    const vec = gaussianArray(substream(promptSeed(prompt), "embedding"), dim);
    let norm = 0;
    for (let i = 0; i < dim; i++) norm += vec[i] * vec[i];
    norm = Math.sqrt(norm) || 1;
    for (let i = 0; i < dim; i++) vec[i] /= norm;
    return vec;
}

/** Per-prompt token matrix feeding the cross-attention text side. */
export function promptTokens(prompt: string, tokens: number, dim: number): Mat {
    const out = zeros(tokens, dim);
    const rng = substream(promptSeed(prompt), "tokens");
    const base = embedPrompt(prompt, dim);
    const noise = gaussianArray(rng, tokens * dim);
    for (let t = 0; t < tokens; t++) {
        for (let j = 0; j < dim; j++) {
            out.data[t * dim + j] = base[j] + 0.3 * noise[t * dim + j];
        }
    }
    return out;
}
