/**
 * Model bundle loading: manifest.json (architecture, tokenizer, tensor
 * directory) plus weights.bin (concatenated little-endian float32 tensors).
 * The blob is checked against the manifest's length and SHA-256 before any
 * tensor view is handed out.
 */

import { createHash } from "node:crypto";
import { readFileSync } from "node:fs";
import path from "node:path";

import { TokenizerSpec } from "./tokenizer.js";

export class ModelLoadError extends Error {}

export interface ModelArch {
  num_layers: number;
  num_query_heads: number;
  num_kv_heads: number;
  head_dim: number;
  d_model: number;
  d_ff: number;
  rope_dims: number;
  rope_theta: number;
  /** Per-layer attention span; 0 means global (unwindowed). */
  window_sizes: number[];
  norm_eps: number;
  vocab_size: number;
}

export interface TensorSpec {
  name: string;
  shape: number[];
  byte_offset: number;
}

export interface ModelManifest {
  format: string;
  model_name: string;
  arch: ModelArch;
  tokenizer: TokenizerSpec;
  tensors: TensorSpec[];
  weights_bytes: number;
  weights_sha256: string;
}

export interface LoadedModel {
  manifest: ModelManifest;
  tensors: Map<string, Float32Array>;
}

const ARCH_KEYS: (keyof ModelArch)[] = [
  "num_layers",
  "num_query_heads",
  "num_kv_heads",
  "head_dim",
  "d_model",
  "d_ff",
  "rope_dims",
  "rope_theta",
  "norm_eps",
  "vocab_size",
];

function checkLittleEndianHost(): void {
  const probe = new Uint8Array(new Uint32Array([1]).buffer);
  if (probe[0] !== 1) {
    throw new ModelLoadError("big-endian hosts are not supported");
  }
}

function parseManifest(raw: string, file: string): ModelManifest {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch (err) {
    throw new ModelLoadError(`${file}: not valid JSON: ${(err as Error).message}`);
  }
  const m = doc as ModelManifest;
  if (typeof m !== "object" || m === null) {
    throw new ModelLoadError(`${file}: manifest must be a JSON object`);
  }
  if (m.format !== "hcmodel-f32-v1") {
    throw new ModelLoadError(`${file}: unsupported format ${JSON.stringify(m.format)}`);
  }
  for (const key of ARCH_KEYS) {
    const v = m.arch?.[key];
    if (typeof v !== "number" || !Number.isFinite(v)) {
      throw new ModelLoadError(`${file}: arch.${key} missing or not a number`);
    }
  }
  const a = m.arch;
  if (
    !Array.isArray(a.window_sizes) ||
    a.window_sizes.length !== a.num_layers ||
    a.window_sizes.some((w) => !Number.isInteger(w) || w < 0)
  ) {
    throw new ModelLoadError(
      `${file}: arch.window_sizes must list one nonnegative integer per layer`,
    );
  }
  if (a.num_query_heads % a.num_kv_heads !== 0) {
    throw new ModelLoadError(`${file}: query heads (${a.num_query_heads}) must be a multiple of KV heads (${a.num_kv_heads})`);
  }
  if (a.rope_dims % 2 !== 0 || a.rope_dims > a.head_dim) {
    throw new ModelLoadError(`${file}: rope_dims must be even and at most head_dim`);
  }
  if (!Array.isArray(m.tensors) || m.tensors.length === 0) {
    throw new ModelLoadError(`${file}: tensor directory missing`);
  }
  return m;
}

export function loadModel(modelDir: string): LoadedModel {
  checkLittleEndianHost();
  const manifestPath = path.join(modelDir, "manifest.json");
  const weightsPath = path.join(modelDir, "weights.bin");
  let manifestRaw: string;
  let blob: Buffer;
  try {
    manifestRaw = readFileSync(manifestPath, "utf8");
    blob = readFileSync(weightsPath);
  } catch (err) {
    throw new ModelLoadError(`cannot read model bundle in ${modelDir}: ${(err as Error).message}`);
  }
  const manifest = parseManifest(manifestRaw, manifestPath);

  if (blob.length !== manifest.weights_bytes) {
    throw new ModelLoadError(
      `${weightsPath}: expected ${manifest.weights_bytes} bytes, found ${blob.length}`,
    );
  }
  const digest = createHash("sha256").update(blob).digest("hex");
  if (digest !== manifest.weights_sha256) {
    throw new ModelLoadError(`${weightsPath}: SHA-256 mismatch (corrupt or stale weights)`);
  }

  // Copy out of Node's buffer pool so every view is 4-byte aligned.
  const aligned = new ArrayBuffer(blob.length);
  new Uint8Array(aligned).set(blob);

  const tensors = new Map<string, Float32Array>();
  for (const spec of manifest.tensors) {
    const count = spec.shape.reduce((acc, d) => acc * d, 1);
    if (spec.byte_offset % 4 !== 0 || spec.byte_offset + count * 4 > blob.length) {
      throw new ModelLoadError(`tensor ${spec.name}: bad offset/extent`);
    }
    if (tensors.has(spec.name)) {
      throw new ModelLoadError(`tensor ${spec.name}: duplicate entry`);
    }
    tensors.set(spec.name, new Float32Array(aligned, spec.byte_offset, count));
  }
  return { manifest, tensors };
}

export function getTensor(model: LoadedModel, name: string, ...shape: number[]): Float32Array {
  const t = model.tensors.get(name);
  if (t === undefined) {
    throw new ModelLoadError(`tensor ${name} missing from bundle`);
  }
  const expect = shape.reduce((acc, d) => acc * d, 1);
  if (t.length !== expect) {
    throw new ModelLoadError(`tensor ${name}: expected ${expect} floats, found ${t.length}`);
  }
  return t;
}
