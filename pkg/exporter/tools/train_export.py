"""Train the bundled character model and export its weights.

The model is a small pre-norm transformer with grouped-query attention
(2 query heads per KV head) and rotary position embeddings, trained as a
next-character predictor on model/corpus.txt. After training, parameters
are written as a flat little-endian float32 blob plus a JSON manifest
describing shapes, offsets, and the tokenizer, which is what the exporter
runtime loads.

Usage: python3 tools/make_corpus.py --out-dir model
       python3 tools/train_export.py --model-dir model

Training is CPU-only and seeded; the checked-in weights are the frozen
output of one run of this script.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ARCH = {
    "num_layers": 2,
    "num_query_heads": 8,
    "num_kv_heads": 4,
    "head_dim": 16,
    "d_model": 128,
    "d_ff": 256,
    # Rotate only half of each head's dims, with a small theta so every
    # rotation phase is covered inside the training context. The unrotated
    # dims carry distance-independent content matches, which is what lets a
    # model trained at a short context attend sensibly over an 8k prefill.
    "rope_dims": 8,
    "rope_theta": 60.0,
    # Per-layer attention span: layer 0 is sliding-window (in-distribution
    # at any sequence length), layer 1 is global. 0 means unwindowed.
    "window_sizes": [256, 0],
    "norm_eps": 1e-5,
}


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.g = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.g


def rope_angles(positions: torch.Tensor, rope_dims: int, theta: float):
    # Pair j rotates (x[j], x[j + rope_dims/2]) by pos / theta^(2j/rope_dims).
    half = rope_dims // 2
    freqs = theta ** (-torch.arange(half, dtype=torch.float32) * 2.0 / rope_dims)
    ang = positions.float()[:, None] * freqs[None, :]
    return torch.cos(ang), torch.sin(ang)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor, rope_dims: int):
    # x: [batch, heads, seq, head_dim]; cos/sin: [seq, rope_dims/2]
    half = rope_dims // 2
    a, b = x[..., :half], x[..., half : rope_dims]
    rest = x[..., rope_dims:]
    return torch.cat((a * cos - b * sin, a * sin + b * cos, rest), dim=-1)


class Attention(nn.Module):
    def __init__(self, window: int):
        super().__init__()
        d, hq, hkv, dh = (
            ARCH["d_model"],
            ARCH["num_query_heads"],
            ARCH["num_kv_heads"],
            ARCH["head_dim"],
        )
        self.hq, self.hkv, self.dh = hq, hkv, dh
        self.group = hq // hkv
        self.window = window
        self.wq = nn.Parameter(torch.empty(hq * dh, d))
        self.wk = nn.Parameter(torch.empty(hkv * dh, d))
        self.wv = nn.Parameter(torch.empty(hkv * dh, d))
        self.wo = nn.Parameter(torch.empty(d, hq * dh))

    def forward(self, x, cos, sin):
        b, t, _ = x.shape
        q = (x @ self.wq.T).view(b, t, self.hq, self.dh).transpose(1, 2)
        k = (x @ self.wk.T).view(b, t, self.hkv, self.dh).transpose(1, 2)
        v = (x @ self.wv.T).view(b, t, self.hkv, self.dh).transpose(1, 2)
        rd = ARCH["rope_dims"]
        q = apply_rope(q, cos, sin, rd)
        k = apply_rope(k, cos, sin, rd)
        k = k.repeat_interleave(self.group, dim=1)
        v = v.repeat_interleave(self.group, dim=1)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dh)
        mask = torch.triu(torch.full((t, t), float("-inf")), diagonal=1)
        if self.window:
            mask = mask + torch.tril(
                torch.full((t, t), float("-inf")), diagonal=-self.window
            )
        attn = torch.softmax(scores + mask, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, self.hq * self.dh)
        return out @ self.wo.T


class Block(nn.Module):
    def __init__(self, window: int):
        super().__init__()
        d, dff, eps = ARCH["d_model"], ARCH["d_ff"], ARCH["norm_eps"]
        self.attn_norm = RMSNorm(d, eps)
        self.attn = Attention(window)
        self.mlp_norm = RMSNorm(d, eps)
        self.w1 = nn.Parameter(torch.empty(dff, d))
        self.w2 = nn.Parameter(torch.empty(d, dff))

    def forward(self, x, cos, sin):
        x = x + self.attn(self.attn_norm(x), cos, sin)
        h = self.mlp_norm(x) @ self.w1.T
        return x + F.silu(h) @ self.w2.T


class CharModel(nn.Module):
    def __init__(self, vocab: int):
        super().__init__()
        d = ARCH["d_model"]
        self.embed = nn.Parameter(torch.empty(vocab, d))
        self.blocks = nn.ModuleList(
            Block(w) for w in ARCH["window_sizes"]
        )
        self.final_norm = RMSNorm(d, ARCH["norm_eps"])
        self.unembed = nn.Parameter(torch.empty(vocab, d))
        self._init()

    def _init(self):
        scale = 1.0 / math.sqrt(2 * ARCH["num_layers"])
        for name, p in self.named_parameters():
            if p.dim() < 2:
                continue
            nn.init.normal_(p, std=0.02)
            if name.endswith((".wo", ".w2")):
                with torch.no_grad():
                    p.mul_(scale)

    def forward(self, ids):
        t = ids.shape[1]
        cos, sin = rope_angles(torch.arange(t), ARCH["rope_dims"], ARCH["rope_theta"])
        x = self.embed[ids]
        for block in self.blocks:
            x = block(x, cos, sin)
        return self.final_norm(x) @ self.unembed.T


def export(model: CharModel, chars: str, model_dir: Path, name: str) -> None:
    tensors = []
    blobs = []
    offset = 0
    order = [("embed.weight", model.embed)]
    for i, blk in enumerate(model.blocks):
        order += [
            (f"layers.{i}.attn_norm.g", blk.attn_norm.g),
            (f"layers.{i}.attn.wq", blk.attn.wq),
            (f"layers.{i}.attn.wk", blk.attn.wk),
            (f"layers.{i}.attn.wv", blk.attn.wv),
            (f"layers.{i}.attn.wo", blk.attn.wo),
            (f"layers.{i}.mlp_norm.g", blk.mlp_norm.g),
            (f"layers.{i}.w1", blk.w1),
            (f"layers.{i}.w2", blk.w2),
        ]
    order += [("final_norm.g", model.final_norm.g), ("unembed.weight", model.unembed)]
    for tname, param in order:
        data = param.detach().numpy().astype("<f4")
        blobs.append(data.tobytes())
        tensors.append(
            {"name": tname, "shape": list(data.shape), "byte_offset": offset}
        )
        offset += data.nbytes
    blob = b"".join(blobs)
    (model_dir / "weights.bin").write_bytes(blob)
    manifest = {
        "format": "hcmodel-f32-v1",
        "model_name": name,
        "arch": {**ARCH, "vocab_size": len(chars)},
        "tokenizer": {"type": "char", "chars": chars},
        "tensors": tensors,
        "weights_bytes": len(blob),
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (model_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"exported {len(blob)} weight bytes, {len(tensors)} tensors")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--model-dir", type=Path, default=Path("model"))
    parser.add_argument("--steps", type=int, default=900)
    parser.add_argument("--batch", type=int, default=1)
    parser.add_argument("--context", type=int, default=2048)
    parser.add_argument("--lr", type=float, default=3e-3)
    parser.add_argument("--seed", type=int, default=1234)
    parser.add_argument("--name", default="fieldnotes-2l8h")
    args = parser.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)

    corpus = (args.model_dir / "corpus.txt").read_text()
    chars = "".join(sorted(set(corpus)))
    stoi = {c: i for i, c in enumerate(chars)}
    data = torch.tensor([stoi[c] for c in corpus], dtype=torch.long)
    print(f"corpus {len(data)} tokens, vocab {len(chars)}")

    model = CharModel(len(chars))
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": 0.1}, {"params": no_decay}],
        lr=args.lr,
        betas=(0.9, 0.95),
    )
    warmup = 50
    for step in range(args.steps):
        if step < warmup:
            lr = args.lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(1, args.steps - warmup)
            lr = 0.1 * args.lr + 0.9 * args.lr * 0.5 * (1 + math.cos(math.pi * frac))
        for group in opt.param_groups:
            group["lr"] = lr
        starts = rng.integers(0, len(data) - args.context - 1, size=args.batch)
        batch = torch.stack([data[s : s + args.context + 1] for s in starts])
        logits = model(batch[:, :-1])
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        if step % 50 == 0 or step == args.steps - 1:
            print(f"step {step:4d} lr {lr:.2e} loss {loss.item():.4f}")

    model.eval()
    with torch.no_grad():
        seed_text = (args.model_dir / "sample.txt").read_text()[:160]
        ids = [stoi[c] for c in seed_text]
        for _ in range(200):
            logits = model(torch.tensor([ids[-min(512, args.context) :]]))
            ids.append(int(logits[0, -1].argmax()))
        print("--- greedy continuation ---")
        print("".join(chars[i] for i in ids[len(seed_text) :]))
        export(model, chars, args.model_dir, args.name)


if __name__ == "__main__":
    main()
