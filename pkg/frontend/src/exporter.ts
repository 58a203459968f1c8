// Bridges a reference network to the analysis library's TensorBundle
// format: weight groups with head layout metadata, tapped activations per
// (layer, timestep, input kind) in bounded chunks, and prompt embeddings.
// The exporter only ever writes bundles; all analysis happens downstream.

import * as fs from "node:fs";
import * as path from "node:path";

import { BundleWriter, stableJson } from "./bundle.js";
import { embedPrompt, promptTokens } from "./embeddings.js";
import { gaussianArray, promptSeed, substream } from "./prng.js";
import {
    forwardWithTaps,
    makeReferenceNet,
    Mat,
    RefNet,
    slice_rows,
    zeros,
} from "./referenceNet.js";

export interface ExportManifest {
    source_model_id: string;
    layer_ids: string[];
    module_kinds: Record<string, string[]>;
    timestep_schedule: number[];
    prompt_ids: string[];
}

function writeManifest(outDir: string, manifest: ExportManifest): void {
    fs.writeFileSync(
        path.join(outDir, "export_manifest.json"),
        stableJson(manifest) + "\n",
    );
}

export function exportWeights(
    net: RefNet,
    outDir: string,
    sourceId = "reference-net",
): ExportManifest {
    const writer = new BundleWriter({
        kind: "model",
        d_model: net.dModel,
        d_text: net.dText,
        block_ids: net.blocks.map((b) => b.blockId),
        source_model_id: sourceId,
    });
    const moduleKinds: Record<string, string[]> = {};
    for (const b of net.blocks) {
        const common = { block: b.blockId, attention: b.attention };
        const qkMeta = { heads: b.heads, head_dim: b.headDim };
        writer.add(`${b.blockId}.w_q`, [b.wq.rows, b.wq.cols], b.wq.data, {
            ...common, role: "w_q", family: "qk", ...qkMeta,
            logit_scale: b.logitScale,
        });
        writer.add(`${b.blockId}.w_k`, [b.wk.rows, b.wk.cols], b.wk.data, {
            ...common, role: "w_k", family: "qk", ...qkMeta,
        });
        writer.add(`${b.blockId}.w_v`, [b.wv.rows, b.wv.cols], b.wv.data, {
            ...common, role: "w_v", family: "vo", ...qkMeta,
        });
        writer.add(`${b.blockId}.w_o`, [b.wo.rows, b.wo.cols], b.wo.data, {
            ...common, role: "w_o", family: "vo", ...qkMeta,
        });
        writer.add(`${b.blockId}.w_x`, [b.wx.rows, b.wx.cols], b.wx.data, {
            ...common, role: "w_x", family: "ffn", gate: b.gate,
        });
        writer.add(`${b.blockId}.w_g`, [b.wg.rows, b.wg.cols], b.wg.data, {
            ...common, role: "w_g", family: "ffn", gate: b.gate,
        });
        writer.add(`${b.blockId}.w_d`, [b.wd.rows, b.wd.cols], b.wd.data, {
            ...common, role: "w_d", family: "ffn",
        });
        moduleKinds[b.blockId] =
            b.attention === "self"
                ? ["sa_input", "ffn_intermediate"]
                : ["ca_query_input", "text_tokens", "ffn_intermediate"];
    }
    writer.write(outDir);
    const manifest: ExportManifest = {
        source_model_id: sourceId,
        layer_ids: net.blocks.map((b) => b.blockId).concat(["text"]),
        module_kinds: moduleKinds,
        timestep_schedule: [],
        prompt_ids: [],
    };
    writeManifest(outDir, manifest);
    return manifest;
}

export interface ActivationOptions {
    tokens?: number; // latent rows per prompt
    textTokens?: number; // text rows per prompt
    chunkTokens?: number; // max rows per record
    scheduleLength?: number; // denoising schedule length T
}

function latentFor(
    net: RefNet,
    seed: number,
    prompt: string,
    timestep: number,
    tokens: number,
    scheduleLength: number,
): Mat {
    // noise-to-signal mixing along the schedule; the signal subspace is a
    // fixed low-rank basis shared across prompts
    const nu = 1.0 - timestep / Math.max(scheduleLength, 1);
    const rank = Math.max(1, Math.floor(net.dModel / 4));
    const basis = gaussianArray(substream(seed, "signal-basis"), net.dModel * rank);
    const rng = substream(seed ^ promptSeed(prompt), `latent-t${timestep}`);
    const noise = gaussianArray(rng, tokens * net.dModel);
    const coef = gaussianArray(rng, tokens * rank);
    const out = zeros(tokens, net.dModel);
    const a = Math.sqrt(nu);
    const b = Math.sqrt(1.0 - nu) / Math.sqrt(rank);
    for (let t = 0; t < tokens; t++) {
        for (let j = 0; j < net.dModel; j++) {
            let s = 0;
            for (let r = 0; r < rank; r++) {
                s += coef[t * rank + r] * basis[j * rank + r];
            }
            out.data[t * net.dModel + j] = a * noise[t * net.dModel + j] + b * s;
        }
    }
    return out;
}

export function exportActivations(
    net: RefNet,
    prompts: string[],
    timesteps: number[],
    outDir: string,
    seed = 0,
    options: ActivationOptions = {},
): ExportManifest {
    if (prompts.length === 0) throw new Error("no prompts given");
    const schedule = options.scheduleLength ?? Math.max(...timesteps) + 1;
    for (const t of timesteps) {
        if (t < 0 || t >= schedule) {
            throw new Error(`timestep ${t} outside schedule [0, ${schedule})`);
        }
    }
    const tokens = options.tokens ?? 16;
    const textTokens = options.textTokens ?? 8;
    const chunk = options.chunkTokens ?? tokens;
    const writer = new BundleWriter({
        kind: "activations",
        source_model_id: "reference-net",
        timesteps: timesteps.length,
        sequences: prompts.length,
    });
    const emit = (
        layerId: string,
        kind: string,
        timestep: number,
        promptIdx: number,
        data: Mat,
    ) => {
        for (let start = 0, c = 0; start < data.rows; start += chunk, c++) {
            const end = Math.min(start + chunk, data.rows);
            const part = slice_rows(data, start, end);
            writer.add(
                `act/${layerId}/${kind}/t${timestep}/p${promptIdx}c${c}`,
                [part.rows, part.cols],
                part.data,
                {
                    layer_id: layerId,
                    timestep,
                    input_kind: kind,
                    samples: part.rows,
                },
            );
        }
    };
    for (const t of timesteps) {
        for (let p = 0; p < prompts.length; p++) {
            const latent = latentFor(net, seed, prompts[p], t, tokens, schedule);
            const text = promptTokens(prompts[p], textTokens, net.dText);
            const { taps } = forwardWithTaps(net, latent, text, t);
            for (const tap of taps) {
                if (tap.kind === "text_tokens") {
                    // time-invariant: exported once per prompt
                    if (t !== timesteps[0]) continue;
                    emit(tap.layerId, tap.kind, -1, p, tap.data);
                } else {
                    emit(tap.layerId, tap.kind, t, p, tap.data);
                }
            }
        }
    }
    writer.write(outDir);
    const manifest: ExportManifest = {
        source_model_id: "reference-net",
        layer_ids: net.blocks.map((b) => b.blockId).concat(["text"]),
        module_kinds: {},
        timestep_schedule: [...timesteps],
        prompt_ids: prompts.map((_, i) => `prompt-${String(i).padStart(5, "0")}`),
    };
    writeManifest(outDir, manifest);
    return manifest;
}

export function exportEmbeddings(
    prompts: string[],
    outDir: string,
    dim = 32,
): ExportManifest {
    if (prompts.length === 0) throw new Error("no prompts given");
    const ids = prompts.map((_, i) => `prompt-${String(i).padStart(5, "0")}`);
    const flat = new Float64Array(prompts.length * dim);
    prompts.forEach((prompt, i) => {
        flat.set(embedPrompt(prompt, dim), i * dim);
    });
    const writer = new BundleWriter({ kind: "embeddings", ids });
    writer.add("embeddings", [prompts.length, dim], flat);
    writer.write(outDir);
    const manifest: ExportManifest = {
        source_model_id: "text-encoder-stub",
        layer_ids: [],
        module_kinds: {},
        timestep_schedule: [],
        prompt_ids: ids,
    };
    writeManifest(outDir, manifest);
    return manifest;
}

export { makeReferenceNet };
