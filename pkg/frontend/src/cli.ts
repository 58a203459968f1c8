#!/usr/bin/env node
// slimkit-export: export-weights | export-activations | export-embeddings

import * as fs from "node:fs";

import {
    exportActivations,
    exportEmbeddings,
    exportWeights,
} from "./exporter.js";
import { GateKind, makeReferenceNet } from "./referenceNet.js";

interface Flags {
    [key: string]: string;
}

function parseFlags(argv: string[]): Flags {
    const flags: Flags = {};
    for (let i = 0; i < argv.length; i++) {
        const arg = argv[i];
        if (!arg.startsWith("--")) throw new Error(`unexpected argument ${arg}`);
        const key = arg.slice(2);
        const value = argv[i + 1];
        if (value === undefined || value.startsWith("--")) {
            throw new Error(`flag --${key} needs a value`);
        }
        flags[key] = value;
        i++;
    }
    return flags;
}

function intFlag(flags: Flags, name: string, fallback: number): number {
    const raw = flags[name];
    if (raw === undefined) return fallback;
    const value = Number.parseInt(raw, 10);
    if (Number.isNaN(value)) throw new Error(`--${name} must be an integer`);
    return value;
}

function requireFlag(flags: Flags, name: string): string {
    const value = flags[name];
    if (value === undefined) throw new Error(`missing required --${name}`);
    return value;
}

function netFromFlags(flags: Flags) {
    return makeReferenceNet(
        intFlag(flags, "seed", 0),
        intFlag(flags, "blocks", 2),
        intFlag(flags, "d", 16),
        intFlag(flags, "heads", 2),
        flags["d-int"] ? intFlag(flags, "d-int", 0) : undefined,
        flags["d-text"] ? intFlag(flags, "d-text", 0) : undefined,
        (flags["gate"] ?? "gelu") as GateKind,
    );
}

function readPrompts(path: string): string[] {
    return fs
        .readFileSync(path, "utf-8")
        .split("\n")
        .map((line) => line.trim())
        .filter((line) => line.length > 0);
}

function scheduleFromFlags(flags: Flags): number[] {
    if (flags["timesteps"]) {
        return flags["timesteps"].split(",").map((s) => {
            const t = Number.parseInt(s.trim(), 10);
            if (Number.isNaN(t)) throw new Error(`bad timestep ${s}`);
            return t;
        });
    }
    // default: tap every schedule step, optionally strided
    const schedule = intFlag(flags, "schedule", 5);
    const stride = intFlag(flags, "stride", 1);
    const out: number[] = [];
    for (let t = 0; t < schedule; t += stride) out.push(t);
    return out;
}

export function main(argv: string[]): number {
    const [command, ...rest] = argv;
    try {
        const flags = parseFlags(rest);
        if (command === "export-weights") {
            const net = netFromFlags(flags);
            const manifest = exportWeights(
                net,
                requireFlag(flags, "out"),
                flags["model-id"] ?? "reference-net",
            );
            console.log(
                `exported ${manifest.layer_ids.length - 1} blocks -> ${flags["out"]}`,
            );
            return 0;
        }
        if (command === "export-activations") {
            const net = netFromFlags(flags);
            const prompts = readPrompts(requireFlag(flags, "prompts"));
            const timesteps = scheduleFromFlags(flags);
            exportActivations(net, prompts, timesteps, requireFlag(flags, "out"),
                intFlag(flags, "seed", 0), {
                    tokens: intFlag(flags, "tokens", 16),
                    textTokens: intFlag(flags, "text-tokens", 8),
                    chunkTokens: intFlag(flags, "chunk-tokens", 16),
                    scheduleLength: flags["schedule"]
                        ? intFlag(flags, "schedule", 5)
                        : undefined,
                });
            console.log(
                `exported activations for ${prompts.length} prompts x ` +
                    `${timesteps.length} timesteps -> ${flags["out"]}`,
            );
            return 0;
        }
        if (command === "export-embeddings") {
            const prompts = readPrompts(requireFlag(flags, "prompts"));
            exportEmbeddings(prompts, requireFlag(flags, "out"),
                intFlag(flags, "dim", 32));
            console.log(`exported ${prompts.length} embeddings -> ${flags["out"]}`);
            return 0;
        }
        console.error(
            "usage: slimkit-export <export-weights|export-activations|export-embeddings> [flags]",
        );
        return 2;
    } catch (err) {
        console.error(`error: ${err instanceof Error ? err.message : err}`);
        return 2;
    }
}

const invokedDirectly =
    process.argv[1] !== undefined &&
    import.meta.url.endsWith(process.argv[1].split("/").pop() ?? "");
if (invokedDirectly) {
    process.exit(main(process.argv.slice(2)));
}
