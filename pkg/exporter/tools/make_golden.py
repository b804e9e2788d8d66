"""Produce the forward-pass parity fixture used by the exporter's tests.

Runs the reference forward pass (check_heads.Runner) on a short prompt and
records greedy continuations plus the strongest attention entries per head
at a few steps. The TypeScript runtime must reproduce the token choices
exactly and the attention weights to float tolerance. Regenerate after any
retraining: python3 tools/make_golden.py --model-dir model
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from check_heads import Runner, load_model


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--model-dir", type=Path, default=Path("model"))
    parser.add_argument("--prompt-chars", type=int, default=96)
    parser.add_argument("--steps", type=int, default=6)
    parser.add_argument("--top", type=int, default=8)
    parser.add_argument(
        "--out", type=Path, default=Path("tests/data/golden_forward.json")
    )
    args = parser.parse_args()

    manifest, tensors = load_model(args.model_dir)
    chars = manifest["tokenizer"]["chars"]
    stoi = {c: i for i, c in enumerate(chars)}
    prompt = (args.model_dir / "sample.txt").read_text()[: args.prompt_chars]
    ids = [stoi[c] for c in prompt]

    runner = Runner(manifest, tensors)
    layers = manifest["arch"]["num_layers"]
    hkv = manifest["arch"]["num_kv_heads"]

    steps = []
    capture = [None] * layers
    logits = runner.forward(np.array(ids), 0, capture)

    def snapshot(step_logits, cap):
        heads = []
        for li in range(layers):
            for h in range(hkv):
                row = cap[li][h]
                order = np.argsort(-row.astype(np.float64), kind="stable")[: args.top]
                heads.append(
                    {
                        "layer": li,
                        "head": h,
                        "indices": [int(i) for i in order],
                        "scores": [float(row[i]) for i in order],
                    }
                )
        top_logits = np.argsort(-step_logits.astype(np.float64), kind="stable")[:3]
        return {"heads": heads, "top_logit_ids": [int(i) for i in top_logits]}

    steps.append(snapshot(logits, capture))
    greedy = []
    for _ in range(args.steps):
        nxt = int(np.argmax(logits))
        greedy.append(nxt)
        capture = [None] * layers
        logits = runner.forward(np.array([nxt]), len(ids), capture)
        ids.append(nxt)
        steps.append(snapshot(logits, capture))

    fixture = {
        "comment": "regenerate with: python3 tools/make_golden.py --model-dir model",
        "prompt": prompt,
        "greedy_ids": greedy,
        "greedy_text": "".join(chars[i] for i in greedy),
        "steps": steps,
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(fixture, indent=1) + "\n")
    print(f"{args.out}: {len(steps)} step snapshots, greedy {fixture['greedy_text']!r}")


if __name__ == "__main__":
    main()
