"""Guidance-weight sweep of a trained checkpoint against held-out toy images.

    python scripts/run_sweep.py runs/ablation/seed0/frozen/final.ggpt \
        --data runs/ablation/seed0 --out runs/sweep
"""

import argparse
import json
from pathlib import Path

from greedy_growing.conditioning import build_encoders
from greedy_growing.experiments import SWEEP_WEIGHTS, SweepConfig, run_sweep
from greedy_growing.params import load_tree


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="ablation workdir holding train/ and heldout/")
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--weights", type=float, nargs="+", default=list(SWEEP_WEIGHTS))
    p.add_argument("--prompts", type=int, default=64)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    data = Path(args.data)
    tree = load_tree(args.checkpoint)
    encoders = build_encoders(tree.config.text_encoders, data / "train" / "vocab.txt", seed=args.seed)
    cfg = SweepConfig(args.weights, args.prompts, args.steps, args.seed)
    report = run_sweep(tree, encoders, data / "heldout" / "manifest.jsonl", data / "train" / "manifest.jsonl", cfg,
                       args.out)
    for r in report.rows:
        print(f"w={r.weight:<6g} frechet={r.frechet:.4f} mmd={r.mmd:.5f} alignment={r.alignment:.4f}")
    print(json.dumps({"recommended_range": report.recommended_range, "warnings": report.warnings}))


if __name__ == "__main__":
    main()
