"""Frozen-vs-scratch growing ablation on the toy shapes data.

    python scripts/run_ablation.py --seeds 0 1 2 --workdir runs/ablation
"""

import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from greedy_growing.experiments import AblationConfig, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--workdir", default="runs/ablation")
    p.add_argument("--core-steps", type=int, default=AblationConfig.core_steps)
    p.add_argument("--grown-steps", type=int, default=AblationConfig.grown_steps)
    p.add_argument("--sampler-steps", type=int, default=AblationConfig.sampler_steps)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)

    results = []
    for seed in args.seeds:
        cfg = AblationConfig(seed=seed, core_steps=args.core_steps, grown_steps=args.grown_steps,
                             sampler_steps=args.sampler_steps)
        r = run_ablation(cfg, Path(args.workdir) / f"seed{seed}")
        results.append({"seed": seed, **asdict(r), "frozen_not_worse": r.frozen_not_worse})
        print(json.dumps(results[-1], indent=2))
    held = sum(r["frozen_not_worse"] for r in results)
    print(f"frozen <= scratch on {held}/{len(results)} seeds")


if __name__ == "__main__":
    main()
