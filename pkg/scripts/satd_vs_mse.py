#!/usr/bin/env python3
"""Loss-function comparison: SATD-trained vs MSE-trained models.

Per seed, both arms share the initialization and the exact batch sequence;
only the training loss differs. The table reports each arm's validation
SATD and MSE, plus the per-seed SATD gap (positive favors SATD training).
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from psrnn import data as D
from psrnn.training import TrainConfig, compare_losses


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--iters", type=int, default=800)
    ap.add_argument("--samples", type=int, default=10_000)
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    images = D.synthetic_corpus(128, seed=99, kinds=("directional", "sinusoid"))
    samples = D.build_training_samples(images, 8, args.samples, seed=99,
                                       availability_mode="three-block")
    cfg = TrainConfig(total_iters=args.iters, batch_size=16, seed=0,
                      val_subset_cap=256, checkpoint_every=max(1, args.iters // 20))
    out = compare_losses(samples, cfg, seeds)
    print(f"{'seed':>5} {'satd:valSATD':>13} {'satd:valMSE':>12} "
          f"{'mse:valSATD':>12} {'mse:valMSE':>11} {'gap':>8}")
    for r in out["rows"]:
        print(f"{r['seed']:>5} {r['satd_val_satd']:>13.4f} {r['satd_val_mse']:>12.5f} "
              f"{r['mse_val_satd']:>12.4f} {r['mse_val_mse']:>11.5f} {r['satd_gap']:>8.3f}")
    print(f"\nmedian val SATD: satd-trained {out['median_satd_trained']:.4f}, "
          f"mse-trained {out['median_mse_trained']:.4f} "
          f"(median gap {out['median_gap']:.3f})")


if __name__ == "__main__":
    main()
