"""Inspect per-head attention behavior of the exported model.

Runs a full prefill over the sample document plus greedy decode, recording
the last query position's post-softmax attention per KV head (query heads
averaged within each group). Reports each head's stability score (median
overlap between per-step top-k sets and the prefill top-k set) and the
layer-by-layer best-peer overlap matrix, the two properties the exporter's
acceptance tests assert through the trace pipeline.

This is a build-time diagnostic for iterating on training runs; it shares
no code with the exporter runtime or with the trace consumer.

Usage: python3 tools/check_heads.py --model-dir model [--prefill 8192]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np


def load_model(model_dir: Path):
    manifest = json.loads((model_dir / "manifest.json").read_text())
    blob = (model_dir / "weights.bin").read_bytes()
    tensors = {}
    for spec in manifest["tensors"]:
        count = int(np.prod(spec["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=spec["byte_offset"])
        tensors[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float32)
    return manifest, tensors


def rms_norm(x, g, eps):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * g


def rope_tables(max_pos, rope_dims, theta):
    half = rope_dims // 2
    freqs = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / rope_dims)
    ang = np.arange(max_pos, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def apply_rope(x, cos, sin, rope_dims):
    # x: [seq, heads, head_dim]; tables indexed by absolute position
    half = rope_dims // 2
    a, b = x[..., :half], x[..., half:rope_dims]
    rest = x[..., rope_dims:]
    c = cos[:, None, :]
    s = sin[:, None, :]
    return np.concatenate((a * c - b * s, a * s + b * c, rest), axis=-1)


class Runner:
    """Forward pass with a KV cache and last-row attention capture."""

    def __init__(self, manifest, tensors):
        self.arch = manifest["arch"]
        self.t = tensors
        self.chars = manifest["tokenizer"]["chars"]
        self.k_cache = [None] * self.arch["num_layers"]
        self.v_cache = [None] * self.arch["num_layers"]

    def _attention(self, li, x, pos0, capture):
        a = self.arch
        hq, hkv, dh = a["num_query_heads"], a["num_kv_heads"], a["head_dim"]
        group = hq // hkv
        window = a.get("window_sizes", [0] * a["num_layers"])[li]
        seq = x.shape[0]
        rd = a.get("rope_dims", dh)
        cos, sin = rope_tables(pos0 + seq, rd, a["rope_theta"])
        cos, sin = cos[pos0:], sin[pos0:]
        q = (x @ self.t[f"layers.{li}.attn.wq"].T).reshape(seq, hq, dh)
        k = (x @ self.t[f"layers.{li}.attn.wk"].T).reshape(seq, hkv, dh)
        v = (x @ self.t[f"layers.{li}.attn.wv"].T).reshape(seq, hkv, dh)
        q = apply_rope(q, cos, sin, rd)
        k = apply_rope(k, cos, sin, rd)
        if self.k_cache[li] is None:
            self.k_cache[li] = k
            self.v_cache[li] = v
        else:
            self.k_cache[li] = np.concatenate((self.k_cache[li], k))
            self.v_cache[li] = np.concatenate((self.v_cache[li], v))
        k_all, v_all = self.k_cache[li], self.v_cache[li]
        total = k_all.shape[0]

        out = np.empty((seq, hq, dh), dtype=np.float32)
        scale = 1.0 / np.sqrt(dh)
        block = 256  # keeps the [rows, hq, total] score buffer modest
        for start in range(0, seq, block):
            stop = min(start + block, seq)
            qb = q[start:stop]
            rows = stop - start
            sc = np.empty((rows, hq, total), dtype=np.float32)
            for g in range(hkv):
                kv = k_all[:, g, :]
                for j in range(group):
                    h = g * group + j
                    sc[:, h, :] = qb[:, h, :] @ kv.T
            sc *= scale
            positions = np.arange(total)[None, None, :]
            limit = (pos0 + start + np.arange(rows))[:, None, None]
            sc = np.where(positions <= limit, sc, -np.inf)
            if window:
                sc = np.where(positions > limit - window, sc, -np.inf)
            sc -= sc.max(axis=-1, keepdims=True)
            np.exp(sc, out=sc)
            sc /= sc.sum(axis=-1, keepdims=True)
            for g in range(hkv):
                vv = v_all[:, g, :]
                for j in range(group):
                    h = g * group + j
                    out[start:stop, h, :] = sc[:, h, :] @ vv
            if capture is not None and stop == seq:
                last = sc[-1]  # [hq, total]
                capture[li] = last.reshape(hkv, group, total).mean(axis=1)
        return out.reshape(seq, hq * dh)

    def forward(self, ids, pos0, capture=None):
        a = self.arch
        x = self.t["embed.weight"][ids]
        for li in range(a["num_layers"]):
            h = rms_norm(x, self.t[f"layers.{li}.attn_norm.g"], a["norm_eps"])
            x = x + (
                self._attention(li, h, pos0, capture)
                @ self.t[f"layers.{li}.attn.wo"].T
            )
            h = rms_norm(x, self.t[f"layers.{li}.mlp_norm.g"], a["norm_eps"])
            h = h @ self.t[f"layers.{li}.w1"].T
            h = h / (1.0 + np.exp(-h)) @ self.t[f"layers.{li}.w2"].T
            x = x + h
        x = rms_norm(x, self.t["final_norm.g"], a["norm_eps"])
        return x[-1] @ self.t["unembed.weight"].T


def top_set(scores, k):
    order = np.argsort(-scores, kind="stable")
    return frozenset(int(i) for i in order[:k])


def overlap(a, b):
    if not a or not b:
        return 0.0
    return len(a & b) / min(len(a), len(b))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--model-dir", type=Path, default=Path("model"))
    parser.add_argument("--prefill", type=int, default=8192)
    parser.add_argument("--steps", type=int, default=100)
    parser.add_argument("--matrix-step", type=int, default=0)
    args = parser.parse_args()

    manifest, tensors = load_model(args.model_dir)
    runner = Runner(manifest, tensors)
    chars = manifest["tokenizer"]["chars"]
    stoi = {c: i for i, c in enumerate(chars)}
    doc = (args.model_dir / "sample.txt").read_text()[: args.prefill]
    ids = [stoi[c] for c in doc]
    arch = manifest["arch"]
    hkv, layers = arch["num_kv_heads"], arch["num_layers"]

    # records[step][layer] = [hkv, positions]
    records = []
    capture = [None] * layers
    logits = runner.forward(np.array(ids), 0, capture)
    records.append([c.copy() for c in capture])
    text = []
    for step in range(args.steps):
        nxt = int(np.argmax(logits))
        text.append(chars[nxt])
        capture = [None] * layers
        logits = runner.forward(np.array([nxt]), len(ids), capture)
        ids.append(nxt)
        records.append([c.copy() for c in capture])
    print("decoded:", repr("".join(text)))

    k = min(1000, -(-args.prefill // 10))
    print(f"profiling top-k = {k}")
    prefill_sets = {}
    stabilities = {}
    for li in range(layers):
        for h in range(hkv):
            prefill_sets[(li, h)] = top_set(records[0][li][h], k)
    for li in range(layers):
        for h in range(hkv):
            overlaps = [
                overlap(top_set(records[t][li][h], k), prefill_sets[(li, h)])
                for t in range(1, args.steps + 1)
            ]
            stabilities[(li, h)] = float(np.median(overlaps))
            print(f"layer {li} head {h}: s_stable {stabilities[(li, h)]:.3f}")

    vals = sorted(stabilities.values())
    print(f"min {vals[0]:.3f} max {vals[-1]:.3f}")
    print("bimodal (>=0.5 and <=0.3):", vals[-1] >= 0.5 and vals[0] <= 0.3)

    t = args.matrix_step
    sets = {
        (li, h): top_set(records[t][li][h], k)
        for li in range(layers)
        for h in range(hkv)
    }
    matrix = np.zeros((layers, layers))
    for i in range(layers):
        for j in range(layers):
            per_head = []
            for h in range(hkv):
                cands = [
                    overlap(sets[(i, h)], sets[(j, hp)])
                    for hp in range(hkv)
                    if not (i == j and hp == h)
                ]
                per_head.append(max(cands) if cands else 0.0)
            matrix[i, j] = float(np.mean(per_head))
    print("layer matrix:\n", np.round(matrix, 3))
    diag = float(np.mean(np.diag(matrix)))
    off = float(
        np.mean(matrix[~np.eye(layers, dtype=bool)]) if layers > 1 else 0.0
    )
    print(f"diag mean {diag:.3f} offdiag mean {off:.3f} redundant: {diag > off}")


if __name__ == "__main__":
    main()
