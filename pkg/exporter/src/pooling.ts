/**
 * Score post-processing shared by every record the exporter emits: optional
 * centered moving-average pooling and deterministic top-k selection.
 */

export class PoolingError extends Error {}

/**
 * Zero-padded centered moving average with an odd kernel. Edge positions see
 * fewer live neighbors but divide by the full kernel, so scores near the
 * boundary decay instead of being renormalized. Kernel 0 (or 1) returns the
 * input unchanged.
 */
export function pooledScores(raw: Float32Array, kernel: number): Float32Array {
  if (kernel === 0 || kernel === 1) {
    return raw;
  }
  if (kernel < 0 || kernel % 2 === 0) {
    throw new PoolingError(`pool kernel must be odd or 0, got ${kernel}`);
  }
  const n = raw.length;
  const half = (kernel - 1) / 2;
  const out = new Float32Array(n);
  // Prefix sums in f64 keep the sliding window exact enough for ranking.
  const prefix = new Float64Array(n + 1);
  for (let i = 0; i < n; i++) {
    prefix[i + 1] = prefix[i] + raw[i];
  }
  for (let i = 0; i < n; i++) {
    const lo = Math.max(0, i - half);
    const hi = Math.min(n - 1, i + half);
    out[i] = (prefix[hi + 1] - prefix[lo]) / kernel;
  }
  return out;
}

/**
 * Indices of the k largest scores, ordered for emission: pooled value
 * descending, raw value descending, then position ascending. Returns all
 * positions when k exceeds the vector length.
 */
export function selectTopK(
  raw: Float32Array,
  pooled: Float32Array,
  k: number,
): Uint32Array {
  if (raw.length !== pooled.length) {
    throw new PoolingError("raw and pooled score lengths differ");
  }
  const n = raw.length;
  const order = new Uint32Array(n);
  for (let i = 0; i < n; i++) {
    order[i] = i;
  }
  // Uint32Array.sort takes a comparator and sorts in place.
  order.sort((a, b) => {
    if (pooled[a] !== pooled[b]) return pooled[a] < pooled[b] ? 1 : -1;
    if (raw[a] !== raw[b]) return raw[a] < raw[b] ? 1 : -1;
    return a - b;
  });
  return order.slice(0, Math.min(k, n));
}
