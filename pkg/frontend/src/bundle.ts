// TensorBundle writer matching the analysis library's on-disk format:
// manifest.json (format_version 1) plus raw little-endian f32 files under
// tensors/, one per record, row-major, no padding.

import * as fs from "node:fs";
import * as path from "node:path";

export const FORMAT_VERSION = 1;

export interface TensorEntry {
    name: string;
    shape: number[];
    data: Float64Array | Float32Array | number[];
    metadata?: Record<string, unknown>;
}

/** JSON.stringify with recursively sorted object keys (stable output). */
export function stableJson(value: unknown, indent = 2): string {
    const sort = (v: unknown): unknown => {
        if (Array.isArray(v)) return v.map(sort);
        if (v !== null && typeof v === "object") {
            const out: Record<string, unknown> = {};
            for (const key of Object.keys(v as object).sort()) {
                out[key] = sort((v as Record<string, unknown>)[key]);
            }
            return out;
        }
        return v;
    };
    return JSON.stringify(sort(value), null, indent);
}

export class BundleWriter {
    metadata: Record<string, unknown>;
    private entries: TensorEntry[] = [];
    private names = new Set<string>();

    constructor(metadata: Record<string, unknown> = {}) {
        this.metadata = metadata;
    }

    add(
        name: string,
        shape: number[],
        data: Float64Array | Float32Array | number[],
        metadata?: Record<string, unknown>,
    ): void {
        if (this.names.has(name)) {
            throw new Error(`duplicate tensor name ${name}`);
        }
        const count = shape.reduce((a, b) => a * b, 1);
        if (data.length !== count) {
            throw new Error(
                `tensor ${name}: data length ${data.length} != product(shape) ${count}`,
            );
        }
        this.names.add(name);
        this.entries.push({ name, shape: [...shape], data, metadata });
    }

    write(dir: string): void {
        fs.mkdirSync(path.join(dir, "tensors"), { recursive: true });
        const records = this.entries.map((entry, idx) => {
            const rel = `tensors/${String(idx).padStart(5, "0")}.bin`;
            const buf = Buffer.alloc(entry.data.length * 4);
            for (let i = 0; i < entry.data.length; i++) {
                buf.writeFloatLE(Math.fround(entry.data[i] as number), i * 4);
            }
            fs.writeFileSync(path.join(dir, rel), buf);
            const record: Record<string, unknown> = {
                name: entry.name,
                shape: entry.shape,
                dtype: "f32",
                file: rel,
                offset: 0,
            };
            if (entry.metadata && Object.keys(entry.metadata).length > 0) {
                record.metadata = entry.metadata;
            }
            return record;
        });
        const manifest = {
            format_version: FORMAT_VERSION,
            metadata: this.metadata,
            tensors: records,
        };
        fs.writeFileSync(
            path.join(dir, "manifest.json"),
            stableJson(manifest) + "\n",
        );
    }
}
