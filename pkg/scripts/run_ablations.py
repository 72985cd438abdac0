"""Ablation comparison: baseline vs no-identity-loss vs DETR-style tokens.

Generates a dataset, trains the three variants on one shared seed, and
writes `ablations.csv` plus per-run logs/checkpoints into --out.

Usage: python scripts/run_ablations.py --out runs/ablate [--steps 600]
"""

import argparse
import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from kptpose import harness, synthgen  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--train-count", type=int, default=32)
    ap.add_argument("--eval-count", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = harness.TrainConfig(seed=args.seed, batch_size=8, epochs=10_000,
                              gt_keypoint_warmup_epochs=25, augment=False,
                              lr_transformer=1e-3, lr_backbone=1e-3,
                              checkpoint_every=0)
    train = [synthgen.sample_scene(args.seed + i, cfg.scene_config())
             for i in range(args.train_count)]
    evals = [synthgen.sample_scene(10_000 + args.seed + i, cfg.scene_config())
             for i in range(args.eval_count)]
    os.makedirs(args.out, exist_ok=True)
    rows = harness.run_ablations(cfg, train, evals, args.out, max_steps=args.steps,
                                 progress=lambda r: r["step"] % 100 == 0 and print(
                                     f"  step {r['step']}: total {r['total']:.3f}"))
    for row in rows:
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    print(f"comparison CSV: {args.out}/ablations.csv")


if __name__ == "__main__":
    main()
