#!/usr/bin/env python3
"""Recurrent-unit count ablation at a fixed training budget.

Trains one model per unit count (the first unit always runs at the 2N
scale with width 8; extra units run at N with width 4) and evaluates each
against the angular baseline on held-out synthetic images.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from psrnn import data as D
from psrnn.training import TrainConfig, ablate_units


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--counts", default="1,2,3,4")
    ap.add_argument("--iters", type=int, default=800)
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--qp", type=int, default=32)
    args = ap.parse_args()

    counts = [int(c) for c in args.counts.split(",")]
    images = D.synthetic_corpus(128, seed=7, kinds=("directional", "sinusoid"))
    samples = D.build_training_samples(images, 8, args.samples, seed=7,
                                       availability_mode="three-block")
    eval_images = [D.synthetic_corpus(128, seed=7700 + i, kinds=(k,), per_kind=1)[0]
                   for i, k in enumerate(("directional", "sinusoid", "rings"))]
    cfg = TrainConfig(total_iters=args.iters, batch_size=16, seed=7,
                      val_subset_cap=256, checkpoint_every=max(1, args.iters // 20))
    rows = ablate_units(samples, counts, cfg, eval_images, qp=args.qp)
    print(f"{'units':>5} {'val loss':>10} {'selection %':>12} {'cost red %':>11}")
    for r in rows:
        print(f"{r['units']:>5} {r['final_val_loss']:>10.4f} "
              f"{r['selection_rate_pct']:>12.2f} {r['cost_reduction_pct']:>11.3f}")


if __name__ == "__main__":
    main()
