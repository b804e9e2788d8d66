/**
 * HCTRACE1 trace file writer.
 *
 * Layout, little-endian throughout:
 *
 *   magic         8 bytes, ASCII "HCTRACE1"
 *   manifest_len  unsigned 32-bit
 *   manifest      UTF-8 JSON object
 *   body          (decode_steps + 1) * num_layers * heads_per_layer records,
 *                 step-major then layer then head; each record is trace_topk
 *                 pairs of (uint32 token index, float32 score), padded at the
 *                 tail with (0xFFFFFFFF, 0.0)
 *
 * The writer enforces the same invariants the consumer validates: unique
 * in-range indices, nonnegative nonincreasing scores, pad only as a suffix,
 * and a complete record grid. Emitting a bad file is a bug here, not a
 * downstream parsing problem.
 */

import { mkdtempSync, renameSync, rmSync, writeFileSync } from "node:fs";
import path from "node:path";

export const TRACE_MAGIC = "HCTRACE1";
export const PAD_INDEX = 0xffffffff;

export class TraceWriteError extends Error {}

export interface TraceManifest {
  model_name: string;
  num_layers: number;
  heads_per_layer: number;
  prefill_len: number;
  decode_steps: number;
  trace_topk: number;
  pool_kernel_used: number;
  bytes_per_kv_entry: number;
}

const MANIFEST_KEYS: (keyof TraceManifest)[] = [
  "model_name",
  "num_layers",
  "heads_per_layer",
  "prefill_len",
  "decode_steps",
  "trace_topk",
  "pool_kernel_used",
  "bytes_per_kv_entry",
];

function validateManifest(m: TraceManifest): void {
  for (const key of MANIFEST_KEYS) {
    if (key === "model_name") {
      if (typeof m.model_name !== "string" || m.model_name.length === 0) {
        throw new TraceWriteError("model_name must be a nonempty string");
      }
      continue;
    }
    const v = m[key];
    if (!Number.isInteger(v)) {
      throw new TraceWriteError(`${key} must be an integer, got ${v}`);
    }
  }
  if (m.num_layers < 1 || m.heads_per_layer < 1) {
    throw new TraceWriteError("model dimensions must be positive");
  }
  if (m.prefill_len < 1 || m.decode_steps < 1 || m.trace_topk < 1) {
    throw new TraceWriteError("prefill_len, decode_steps, trace_topk must be positive");
  }
  if (m.pool_kernel_used !== 0 && m.pool_kernel_used % 2 === 0) {
    throw new TraceWriteError("pool_kernel_used must be odd or 0");
  }
  if (m.pool_kernel_used < 0 || m.bytes_per_kv_entry < 1) {
    throw new TraceWriteError("pool_kernel_used/bytes_per_kv_entry out of range");
  }
}

export class TraceWriter {
  readonly manifest: TraceManifest;
  private readonly body: DataView;
  private readonly bodyBytes: Uint8Array;
  private written = 0;
  private readonly totalRecords: number;

  constructor(manifest: TraceManifest) {
    validateManifest(manifest);
    // Copy key by key: fixed serialization order, no stray properties.
    this.manifest = {
      model_name: manifest.model_name,
      num_layers: manifest.num_layers,
      heads_per_layer: manifest.heads_per_layer,
      prefill_len: manifest.prefill_len,
      decode_steps: manifest.decode_steps,
      trace_topk: manifest.trace_topk,
      pool_kernel_used: manifest.pool_kernel_used,
      bytes_per_kv_entry: manifest.bytes_per_kv_entry,
    };
    this.totalRecords =
      (manifest.decode_steps + 1) * manifest.num_layers * manifest.heads_per_layer;
    const bytes = this.totalRecords * manifest.trace_topk * 8;
    this.bodyBytes = new Uint8Array(bytes);
    this.body = new DataView(this.bodyBytes.buffer);
  }

  /** Step (0 = prefill), layer, head implied by append order. */
  get nextRecord(): { step: number; layer: number; head: number } {
    const m = this.manifest;
    const perStep = m.num_layers * m.heads_per_layer;
    const step = Math.floor(this.written / perStep);
    const rem = this.written % perStep;
    return {
      step,
      layer: Math.floor(rem / m.heads_per_layer),
      head: rem % m.heads_per_layer,
    };
  }

  appendRecord(indices: ArrayLike<number>, scores: ArrayLike<number>): void {
    const m = this.manifest;
    if (this.written >= this.totalRecords) {
      throw new TraceWriteError("all records already written");
    }
    if (indices.length !== scores.length) {
      throw new TraceWriteError("indices/scores length mismatch");
    }
    if (indices.length > m.trace_topk) {
      throw new TraceWriteError(
        `record has ${indices.length} entries, trace_topk is ${m.trace_topk}`,
      );
    }
    const { step } = this.nextRecord;
    const maxIndex = m.prefill_len + step; // exclusive
    const seen = new Set<number>();
    let prev = Infinity;
    for (let i = 0; i < indices.length; i++) {
      const idx = indices[i];
      const score = Math.fround(scores[i]);
      if (!Number.isInteger(idx) || idx < 0 || idx >= maxIndex) {
        throw new TraceWriteError(
          `record ${this.written}: index ${idx} out of range for step ${step}`,
        );
      }
      if (seen.has(idx)) {
        throw new TraceWriteError(`record ${this.written}: duplicate index ${idx}`);
      }
      seen.add(idx);
      if (!(score >= 0)) {
        throw new TraceWriteError(`record ${this.written}: negative score ${score}`);
      }
      if (score > prev) {
        throw new TraceWriteError(
          `record ${this.written}: scores increase at entry ${i}`,
        );
      }
      prev = score;
    }
    let off = this.written * m.trace_topk * 8;
    for (let i = 0; i < indices.length; i++) {
      this.body.setUint32(off, indices[i], true);
      this.body.setFloat32(off + 4, Math.fround(scores[i]), true);
      off += 8;
    }
    for (let i = indices.length; i < m.trace_topk; i++) {
      this.body.setUint32(off, PAD_INDEX, true);
      this.body.setFloat32(off + 4, 0, true);
      off += 8;
    }
    this.written += 1;
  }

  /** Serialize the complete file. Throws if any record is missing. */
  toBytes(): Uint8Array {
    if (this.written !== this.totalRecords) {
      throw new TraceWriteError(
        `incomplete trace: ${this.written} of ${this.totalRecords} records written`,
      );
    }
    const manifestJson = Buffer.from(JSON.stringify(this.manifest), "utf8");
    const out = new Uint8Array(8 + 4 + manifestJson.length + this.bodyBytes.length);
    out.set(Buffer.from(TRACE_MAGIC, "ascii"), 0);
    new DataView(out.buffer).setUint32(8, manifestJson.length, true);
    out.set(manifestJson, 12);
    out.set(this.bodyBytes, 12 + manifestJson.length);
    return out;
  }

  /** Write atomically: temp file in the target directory, then rename. */
  writeFile(outPath: string): void {
    const bytes = this.toBytes();
    const dir = path.dirname(path.resolve(outPath));
    const tmpDir = mkdtempSync(path.join(dir, ".trace-"));
    const tmpFile = path.join(tmpDir, "out.trace");
    try {
      writeFileSync(tmpFile, bytes);
      renameSync(tmpFile, outPath);
    } finally {
      rmSync(tmpDir, { recursive: true, force: true });
    }
  }
}
