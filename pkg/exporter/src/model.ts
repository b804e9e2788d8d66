/**
 * Minimal CPU forward pass for the bundled character transformer.
 *
 * Pre-norm blocks, grouped-query attention with partial rotary position
 * embeddings, SiLU MLP. The class owns a KV cache sized up front, so a
 * prefill call followed by single-token decode calls replays exactly what a
 * serving runtime would do. When a capture target is supplied, the last
 * query row's post-softmax attention is recorded per KV head with the query
 * heads of each group averaged, which is the quantity the trace stores.
 */

import { LoadedModel, ModelArch, getTensor } from "./manifest.js";

export class ModelStateError extends Error {}

interface LayerWeights {
  attnNormG: Float32Array;
  wq: Float32Array;
  wk: Float32Array;
  wv: Float32Array;
  wo: Float32Array;
  mlpNormG: Float32Array;
  w1: Float32Array;
  w2: Float32Array;
}

/** capture[layer][kvHead] receives one Float32Array per forward call. */
export type AttentionCapture = Float32Array[][];

function matmulT(
  x: Float32Array,
  rows: number,
  inDim: number,
  w: Float32Array,
  outDim: number,
  out: Float32Array,
): void {
  for (let r = 0; r < rows; r++) {
    const xoff = r * inDim;
    const ooff = r * outDim;
    for (let o = 0; o < outDim; o++) {
      const woff = o * inDim;
      let acc = 0;
      for (let c = 0; c < inDim; c++) {
        acc += x[xoff + c] * w[woff + c];
      }
      out[ooff + o] = acc;
    }
  }
}

function rmsNormRows(
  x: Float32Array,
  rows: number,
  dim: number,
  g: Float32Array,
  eps: number,
  out: Float32Array,
): void {
  for (let r = 0; r < rows; r++) {
    const off = r * dim;
    let ss = 0;
    for (let c = 0; c < dim; c++) {
      const v = x[off + c];
      ss += v * v;
    }
    const scale = 1 / Math.sqrt(ss / dim + eps);
    for (let c = 0; c < dim; c++) {
      out[off + c] = x[off + c] * scale * g[c];
    }
  }
}

export class CharTransformer {
  readonly arch: ModelArch;
  private readonly embed: Float32Array;
  private readonly layers: LayerWeights[];
  private readonly finalNormG: Float32Array;
  private readonly unembed: Float32Array;

  private readonly capacity: number;
  private readonly group: number;
  private readonly ropeCos: Float64Array;
  private readonly ropeSin: Float64Array;
  // Per layer, [kvHead][position][headDim] so score loops walk contiguously.
  private readonly kCache: Float32Array[];
  private readonly vCache: Float32Array[];
  private readonly scores: Float32Array;
  private pos = 0;

  constructor(model: LoadedModel, capacity: number) {
    const a = model.manifest.arch;
    this.arch = a;
    this.capacity = capacity;
    this.group = a.num_query_heads / a.num_kv_heads;
    const d = a.d_model;
    const qd = a.num_query_heads * a.head_dim;
    const kd = a.num_kv_heads * a.head_dim;

    this.embed = getTensor(model, "embed.weight", a.vocab_size, d);
    this.layers = [];
    for (let i = 0; i < a.num_layers; i++) {
      this.layers.push({
        attnNormG: getTensor(model, `layers.${i}.attn_norm.g`, d),
        wq: getTensor(model, `layers.${i}.attn.wq`, qd, d),
        wk: getTensor(model, `layers.${i}.attn.wk`, kd, d),
        wv: getTensor(model, `layers.${i}.attn.wv`, kd, d),
        wo: getTensor(model, `layers.${i}.attn.wo`, d, qd),
        mlpNormG: getTensor(model, `layers.${i}.mlp_norm.g`, d),
        w1: getTensor(model, `layers.${i}.w1`, a.d_ff, d),
        w2: getTensor(model, `layers.${i}.w2`, d, a.d_ff),
      });
    }
    this.finalNormG = getTensor(model, "final_norm.g", d);
    this.unembed = getTensor(model, "unembed.weight", a.vocab_size, d);

    const half = a.rope_dims / 2;
    this.ropeCos = new Float64Array(capacity * half);
    this.ropeSin = new Float64Array(capacity * half);
    for (let p = 0; p < capacity; p++) {
      for (let j = 0; j < half; j++) {
        const angle = p * Math.pow(a.rope_theta, (-2 * j) / a.rope_dims);
        this.ropeCos[p * half + j] = Math.cos(angle);
        this.ropeSin[p * half + j] = Math.sin(angle);
      }
    }
    this.kCache = [];
    this.vCache = [];
    for (let i = 0; i < a.num_layers; i++) {
      this.kCache.push(new Float32Array(a.num_kv_heads * capacity * a.head_dim));
      this.vCache.push(new Float32Array(a.num_kv_heads * capacity * a.head_dim));
    }
    this.scores = new Float32Array(a.num_query_heads * capacity);
  }

  /** Positions consumed so far. */
  get length(): number {
    return this.pos;
  }

  reset(): void {
    this.pos = 0;
  }

  private ropeRow(x: Float32Array, off: number, position: number): void {
    const rd = this.arch.rope_dims;
    const half = rd / 2;
    const base = position * half;
    for (let j = 0; j < half; j++) {
      const c = this.ropeCos[base + j];
      const s = this.ropeSin[base + j];
      const a = x[off + j];
      const b = x[off + half + j];
      x[off + j] = a * c - b * s;
      x[off + half + j] = a * s + b * c;
    }
  }

  /**
   * Feed `ids` after everything fed before, returning the last position's
   * logits. `capture`, when given, is filled with capture[layer][kvHead] =
   * group-averaged attention weights of the final row over all positions.
   */
  forward(ids: ArrayLike<number>, capture?: AttentionCapture): Float32Array {
    const a = this.arch;
    const seq = ids.length;
    if (seq === 0) {
      throw new ModelStateError("empty forward call");
    }
    const pos0 = this.pos;
    if (pos0 + seq > this.capacity) {
      throw new ModelStateError(
        `sequence overflow: ${pos0} + ${seq} exceeds capacity ${this.capacity}`,
      );
    }
    const d = a.d_model;
    const dh = a.head_dim;
    const hq = a.num_query_heads;
    const hkv = a.num_kv_heads;
    const group = this.group;
    const scale = 1 / Math.sqrt(dh);

    const x = new Float32Array(seq * d);
    for (let s = 0; s < seq; s++) {
      const id = ids[s];
      if (!Number.isInteger(id) || id < 0 || id >= a.vocab_size) {
        throw new ModelStateError(`token id ${id} out of range`);
      }
      x.set(this.embed.subarray(id * d, (id + 1) * d), s * d);
    }

    const h = new Float32Array(seq * d);
    const q = new Float32Array(seq * hq * dh);
    const kvNew = new Float32Array(seq * hkv * dh);
    const attnOut = new Float32Array(seq * hq * dh);
    const ffn = new Float32Array(seq * a.d_ff);
    const scores = this.scores;

    for (let li = 0; li < a.num_layers; li++) {
      const lw = this.layers[li];
      const kCache = this.kCache[li];
      const vCache = this.vCache[li];

      rmsNormRows(x, seq, d, lw.attnNormG, a.norm_eps, h);
      matmulT(h, seq, d, lw.wq, hq * dh, q);
      for (let s = 0; s < seq; s++) {
        for (let hh = 0; hh < hq; hh++) {
          this.ropeRow(q, (s * hq + hh) * dh, pos0 + s);
        }
      }
      matmulT(h, seq, d, lw.wk, hkv * dh, kvNew);
      for (let s = 0; s < seq; s++) {
        for (let g = 0; g < hkv; g++) {
          this.ropeRow(kvNew, (s * hkv + g) * dh, pos0 + s);
          kCache.set(
            kvNew.subarray((s * hkv + g) * dh, (s * hkv + g + 1) * dh),
            (g * this.capacity + pos0 + s) * dh,
          );
        }
      }
      matmulT(h, seq, d, lw.wv, hkv * dh, kvNew);
      for (let s = 0; s < seq; s++) {
        for (let g = 0; g < hkv; g++) {
          vCache.set(
            kvNew.subarray((s * hkv + g) * dh, (s * hkv + g + 1) * dh),
            (g * this.capacity + pos0 + s) * dh,
          );
        }
      }

      const window = a.window_sizes[li];
      for (let s = 0; s < seq; s++) {
        const total = pos0 + s + 1;
        const tStart = window > 0 ? Math.max(0, total - window) : 0;
        for (let g = 0; g < hkv; g++) {
          const kBase = g * this.capacity * dh;
          for (let j = 0; j < group; j++) {
            const hh = g * group + j;
            const qOff = (s * hq + hh) * dh;
            const sOff = hh * this.capacity;
            for (let t = tStart; t < total; t++) {
              const kOff = kBase + t * dh;
              let acc = 0;
              for (let c = 0; c < dh; c++) {
                acc += q[qOff + c] * kCache[kOff + c];
              }
              scores[sOff + t] = acc * scale;
            }
            // softmax in place over the visible span
            let max = -Infinity;
            for (let t = tStart; t < total; t++) {
              if (scores[sOff + t] > max) max = scores[sOff + t];
            }
            let sum = 0;
            for (let t = tStart; t < total; t++) {
              const e = Math.exp(scores[sOff + t] - max);
              scores[sOff + t] = e;
              sum += e;
            }
            const inv = 1 / sum;
            const oOff = (s * hq + hh) * dh;
            attnOut.fill(0, oOff, oOff + dh);
            const vBase = g * this.capacity * dh;
            for (let t = tStart; t < total; t++) {
              const w = scores[sOff + t] * inv;
              scores[sOff + t] = w;
              const vOff = vBase + t * dh;
              for (let c = 0; c < dh; c++) {
                attnOut[oOff + c] += w * vCache[vOff + c];
              }
            }
          }
        }
        if (capture !== undefined && s === seq - 1) {
          const rows: Float32Array[] = [];
          for (let g = 0; g < hkv; g++) {
            // Positions the window masked out keep weight 0.
            const mean = new Float32Array(total);
            for (let j = 0; j < group; j++) {
              const sOff = (g * group + j) * this.capacity;
              for (let t = tStart; t < total; t++) {
                mean[t] += scores[sOff + t];
              }
            }
            for (let t = tStart; t < total; t++) {
              mean[t] /= group;
            }
            rows.push(mean);
          }
          capture[li] = rows;
        }
      }

      matmulT(attnOut, seq, hq * dh, lw.wo, d, h);
      for (let i = 0; i < seq * d; i++) {
        x[i] += h[i];
      }

      rmsNormRows(x, seq, d, lw.mlpNormG, a.norm_eps, h);
      matmulT(h, seq, d, lw.w1, a.d_ff, ffn);
      for (let i = 0; i < seq * a.d_ff; i++) {
        const v = ffn[i];
        ffn[i] = v / (1 + Math.exp(-v));
      }
      matmulT(ffn, seq, a.d_ff, lw.w2, d, h);
      for (let i = 0; i < seq * d; i++) {
        x[i] += h[i];
      }
    }

    this.pos = pos0 + seq;
    const lastOff = (seq - 1) * d;
    const xn = new Float32Array(d);
    rmsNormRows(x.subarray(lastOff, lastOff + d), 1, d, this.finalNormG, a.norm_eps, xn);
    const logits = new Float32Array(a.vocab_size);
    matmulT(xn, 1, d, this.unembed, a.vocab_size, logits);
    return logits;
  }
}

/** Greedy pick: highest logit, lowest token id on exact ties. */
export function argmax(logits: Float32Array): number {
  let best = 0;
  for (let i = 1; i < logits.length; i++) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}
