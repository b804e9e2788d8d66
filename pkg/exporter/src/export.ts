/**
 * End-to-end trace export: load the model bundle, prefill on the prompt,
 * decode greedily, and record each step's last-query attention per KV head
 * as a top-k (index, score) record.
 *
 * The prefill contributes one record block (the last prompt token's
 * attention over the whole prompt); each decode step contributes the next.
 * When pooling is enabled the stored scores are the pooled values, so the
 * file's nonincreasing-score invariant matches the selection order.
 */

import { readFileSync } from "node:fs";
import path from "node:path";

import { loadModel } from "./manifest.js";
import { AttentionCapture, CharTransformer, argmax } from "./model.js";
import { CharTokenizer } from "./tokenizer.js";
import { pooledScores, selectTopK } from "./pooling.js";
import { TraceManifest, TraceWriter } from "./trace_writer.js";

export class ExportConfigError extends Error {}
export class PromptError extends Error {}

export interface ExportOptions {
  modelDir: string;
  /** Path to a UTF-8 prompt document; "builtin" uses the bundled sample. */
  prompt: string;
  steps: number;
  topk: number;
  /** Odd moving-average kernel over scores; 0 disables pooling. */
  kernel: number;
  /** Prompts longer than this many tokens are truncated. */
  prefillCap: number;
  out: string;
}

export interface ExportSummary {
  out: string;
  model_name: string;
  num_layers: number;
  heads_per_layer: number;
  prefill_len: number;
  decode_steps: number;
  trace_topk: number;
  pool_kernel_used: number;
  decoded_text: string;
}

export const MIN_PROMPT_TOKENS = 32;

function checkOptions(opts: ExportOptions): void {
  if (!Number.isInteger(opts.steps) || opts.steps < 1) {
    throw new ExportConfigError(`steps must be a positive integer, got ${opts.steps}`);
  }
  if (!Number.isInteger(opts.topk) || opts.topk < 1) {
    throw new ExportConfigError(`topk must be a positive integer, got ${opts.topk}`);
  }
  if (!Number.isInteger(opts.kernel) || opts.kernel < 0 || (opts.kernel !== 0 && opts.kernel % 2 === 0)) {
    throw new ExportConfigError(`kernel must be odd or 0, got ${opts.kernel}`);
  }
  if (!Number.isInteger(opts.prefillCap) || opts.prefillCap < MIN_PROMPT_TOKENS) {
    throw new ExportConfigError(
      `prefill cap must be an integer >= ${MIN_PROMPT_TOKENS}, got ${opts.prefillCap}`,
    );
  }
}

function readPrompt(opts: ExportOptions): string {
  const promptPath =
    opts.prompt === "builtin" ? path.join(opts.modelDir, "sample.txt") : opts.prompt;
  try {
    return readFileSync(promptPath, "utf8");
  } catch (err) {
    throw new PromptError(`cannot read prompt ${promptPath}: ${(err as Error).message}`);
  }
}

export function exportTrace(opts: ExportOptions): ExportSummary {
  checkOptions(opts);
  const model = loadModel(opts.modelDir);
  const arch = model.manifest.arch;
  const tokenizer = new CharTokenizer(model.manifest.tokenizer);

  let ids = tokenizer.encode(readPrompt(opts));
  if (ids.length < MIN_PROMPT_TOKENS) {
    throw new PromptError(
      `prompt too short: ${ids.length} tokens, need at least ${MIN_PROMPT_TOKENS}`,
    );
  }
  if (ids.length > opts.prefillCap) {
    ids = ids.slice(0, opts.prefillCap);
  }
  const prefill = ids.length;

  const manifest: TraceManifest = {
    model_name: model.manifest.model_name,
    num_layers: arch.num_layers,
    heads_per_layer: arch.num_kv_heads,
    prefill_len: prefill,
    decode_steps: opts.steps,
    trace_topk: opts.topk,
    pool_kernel_used: opts.kernel,
    // K and V halves of one cached token for one head, at fp16.
    bytes_per_kv_entry: 2 * arch.head_dim * 2,
  };
  const writer = new TraceWriter(manifest);
  const transformer = new CharTransformer(model, prefill + opts.steps);

  const recordStep = (capture: AttentionCapture): void => {
    for (let layer = 0; layer < arch.num_layers; layer++) {
      for (let head = 0; head < arch.num_kv_heads; head++) {
        const raw = capture[layer][head];
        const pooled = pooledScores(raw, opts.kernel);
        const picks = selectTopK(raw, pooled, opts.topk);
        const stored = opts.kernel > 1 ? pooled : raw;
        const scores = new Float32Array(picks.length);
        for (let i = 0; i < picks.length; i++) {
          scores[i] = stored[picks[i]];
        }
        writer.appendRecord(picks, scores);
      }
    }
  };

  const capture: AttentionCapture = [];
  let logits = transformer.forward(ids, capture);
  recordStep(capture);

  const generated: number[] = [];
  for (let step = 1; step <= opts.steps; step++) {
    const next = argmax(logits);
    generated.push(next);
    logits = transformer.forward([next], capture);
    recordStep(capture);
  }

  writer.writeFile(opts.out);
  return {
    out: opts.out,
    model_name: manifest.model_name,
    num_layers: manifest.num_layers,
    heads_per_layer: manifest.heads_per_layer,
    prefill_len: manifest.prefill_len,
    decode_steps: manifest.decode_steps,
    trace_topk: manifest.trace_topk,
    pool_kernel_used: manifest.pool_kernel_used,
    decoded_text: tokenizer.decode(generated),
  };
}
