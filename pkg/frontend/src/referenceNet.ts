// Small seeded reference transformer used as the export source: a chain of
// pre-norm blocks alternating self- and cross-attention, each followed by a
// gated feed-forward, with residual connections. Forward evaluation taps
// exactly the activation streams the analysis library calibrates on.

import { gaussianArray, substream } from "./prng.js";

export interface Mat {
    rows: number;
    cols: number;
    data: Float64Array; // row-major
}

export function zeros(rows: number, cols: number): Mat {
    return { rows, cols, data: new Float64Array(rows * cols) };
}

export function matmul(a: Mat, b: Mat): Mat {
    if (a.cols !== b.rows) throw new Error("matmul shape mismatch");
    const out = zeros(a.rows, b.cols);
    for (let i = 0; i < a.rows; i++) {
        for (let k = 0; k < a.cols; k++) {
            const aik = a.data[i * a.cols + k];
            if (aik === 0) continue;
            for (let j = 0; j < b.cols; j++) {
                out.data[i * b.cols + j] += aik * b.data[k * b.cols + j];
            }
        }
    }
    return out;
}

export function slice_cols(a: Mat, start: number, end: number): Mat {
    const out = zeros(a.rows, end - start);
    for (let i = 0; i < a.rows; i++) {
        for (let j = start; j < end; j++) {
            out.data[i * out.cols + (j - start)] = a.data[i * a.cols + j];
        }
    }
    return out;
}

export function slice_rows(a: Mat, start: number, end: number): Mat {
    const out = zeros(end - start, a.cols);
    out.data.set(a.data.subarray(start * a.cols, end * a.cols));
    return out;
}

function addInto(target: Mat, src: Mat): void {
    for (let i = 0; i < target.data.length; i++) target.data[i] += src.data[i];
}

export function rmsNorm(a: Mat, eps = 1e-6): Mat {
    const out = zeros(a.rows, a.cols);
    for (let i = 0; i < a.rows; i++) {
        let ss = 0;
        for (let j = 0; j < a.cols; j++) {
            const v = a.data[i * a.cols + j];
            ss += v * v;
        }
        const scale = 1.0 / Math.sqrt(ss / a.cols + eps);
        for (let j = 0; j < a.cols; j++) {
            out.data[i * a.cols + j] = a.data[i * a.cols + j] * scale;
        }
    }
    return out;
}

// Abramowitz–Stegun 7.1.26 rational approximation, |error| < 1.5e-7
function erf(x: number): number {
    const sign = x < 0 ? -1 : 1;
    const ax = Math.abs(x);
    const t = 1.0 / (1.0 + 0.3275911 * ax);
    const y =
        1.0 -
        (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t -
            0.284496736) *
            t +
            0.254829592) *
            t *
            Math.exp(-ax * ax);
    return sign * y;
}

export type GateKind = "gelu" | "silu" | "identity";

export function applyGate(x: number, kind: GateKind): number {
    if (kind === "gelu") return 0.5 * x * (1.0 + erf(x / Math.SQRT2));
    if (kind === "silu") return x / (1.0 + Math.exp(-x));
    return x;
}

export interface RefBlock {
    blockId: string;
    attention: "self" | "cross";
    heads: number;
    headDim: number;
    logitScale: number;
    gate: GateKind;
    wq: Mat;
    wk: Mat;
    wv: Mat;
    wo: Mat;
    wx: Mat;
    wg: Mat;
    wd: Mat;
}

export interface RefNet {
    dModel: number;
    dText: number;
    dInt: number;
    blocks: RefBlock[];
}

function seededMat(seed: number, name: string, rows: number, cols: number, scale: number): Mat {
    const data = gaussianArray(substream(seed, name), rows * cols);
    for (let i = 0; i < data.length; i++) data[i] *= scale;
    return { rows, cols, data };
}

export function makeReferenceNet(
    seed: number,
    blocks: number,
    d: number,
    heads: number,
    dInt?: number,
    dText?: number,
    gate: GateKind = "gelu",
): RefNet {
    if (d % heads !== 0) throw new Error("heads must divide d");
    const inner = dInt ?? 4 * d;
    const dT = dText ?? d;
    const scale = 1.0 / Math.sqrt(d);
    const out: RefBlock[] = [];
    for (let i = 0; i < blocks; i++) {
        const attention = i % 2 === 0 ? "self" : "cross";
        const kvIn = attention === "self" ? d : dT;
        out.push({
            blockId: `block${i}`,
            attention,
            heads,
            headDim: d / heads,
            logitScale: 1.0 / Math.sqrt(d / heads),
            gate,
            wq: seededMat(seed, `b${i}.wq`, d, d, scale),
            wk: seededMat(seed, `b${i}.wk`, kvIn, d, scale),
            wv: seededMat(seed, `b${i}.wv`, kvIn, d, scale),
            wo: seededMat(seed, `b${i}.wo`, d, d, scale),
            wx: seededMat(seed, `b${i}.wx`, d, inner, scale),
            wg: seededMat(seed, `b${i}.wg`, d, inner, scale),
            wd: seededMat(seed, `b${i}.wd`, inner, d, 1.0 / Math.sqrt(inner)),
        });
    }
    return { dModel: d, dText: dT, dInt: inner, blocks: out };
}

function softmaxRows(a: Mat): Mat {
    const out = zeros(a.rows, a.cols);
    for (let i = 0; i < a.rows; i++) {
        let max = -Infinity;
        for (let j = 0; j < a.cols; j++) max = Math.max(max, a.data[i * a.cols + j]);
        let sum = 0;
        for (let j = 0; j < a.cols; j++) {
            const e = Math.exp(a.data[i * a.cols + j] - max);
            out.data[i * a.cols + j] = e;
            sum += e;
        }
        for (let j = 0; j < a.cols; j++) out.data[i * a.cols + j] /= sum;
    }
    return out;
}

function transpose(a: Mat): Mat {
    const out = zeros(a.cols, a.rows);
    for (let i = 0; i < a.rows; i++) {
        for (let j = 0; j < a.cols; j++) {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    return out;
}

export type InputKind =
    | "sa_input"
    | "ca_query_input"
    | "text_tokens"
    | "ffn_intermediate";

export interface Tap {
    layerId: string;
    kind: InputKind;
    data: Mat;
}

export function forwardWithTaps(
    net: RefNet,
    latent: Mat,
    text: Mat,
    timestep: number,
): { output: Mat; taps: Tap[] } {
    if (latent.cols !== net.dModel) throw new Error("latent width mismatch");
    if (text.cols !== net.dText) throw new Error("text width mismatch");
    let x = zeros(latent.rows, latent.cols);
    const shift = 0.1 * Math.sin(0.7 * timestep);
    for (let i = 0; i < x.data.length; i++) x.data[i] = latent.data[i] + shift;
    const textN = rmsNorm(text);
    const taps: Tap[] = [{ layerId: "text", kind: "text_tokens", data: textN }];
    for (const block of net.blocks) {
        const h = rmsNorm(x);
        const source = block.attention === "self" ? h : textN;
        taps.push({
            layerId: block.blockId,
            kind: block.attention === "self" ? "sa_input" : "ca_query_input",
            data: h,
        });
        for (let j = 0; j < block.heads; j++) {
            const s = j * block.headDim;
            const e = s + block.headDim;
            const q = matmul(h, slice_cols(block.wq, s, e));
            const k = matmul(source, slice_cols(block.wk, s, e));
            const v = matmul(source, slice_cols(block.wv, s, e));
            const logits = matmul(q, transpose(k));
            for (let i = 0; i < logits.data.length; i++) {
                logits.data[i] *= block.logitScale;
            }
            const headOut = matmul(
                matmul(softmaxRows(logits), v),
                slice_rows(block.wo, s, e),
            );
            addInto(x, headOut);
        }
        const h2 = rmsNorm(x);
        const u = matmul(h2, block.wx);
        const g = matmul(h2, block.wg);
        const z = zeros(u.rows, u.cols);
        for (let i = 0; i < z.data.length; i++) {
            z.data[i] = u.data[i] * applyGate(g.data[i], block.gate);
        }
        taps.push({ layerId: block.blockId, kind: "ffn_intermediate", data: z });
        addInto(x, matmul(z, block.wd));
    }
    return { output: x, taps };
}
