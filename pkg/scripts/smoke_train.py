#!/usr/bin/env python3
"""Desk-scale reference training run.

Trains the N=8 three-block model on the 50k-sample synthetic corpus with
the scaled step-decay schedule (5000 iterations, milestones at 2500/3750/
4250) and reports the validation-SATD trajectory. Writes the best
checkpoint and the training log under --out.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from psrnn import data as D
from psrnn.model import NetworkConfig, build_network, save_model
from psrnn.training import TrainConfig, train, write_training_log


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--iters", type=int, default=5000)
    ap.add_argument("--samples", type=int, default=50_000)
    ap.add_argument("--availability", default="three-block",
                    choices=["three-block", "four-block"])
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = D.synthetic_corpus(128, seed=args.seed, kinds=("directional", "sinusoid"))
    samples = D.build_training_samples(images, 8, args.samples, seed=args.seed,
                                       availability_mode=args.availability)
    net = build_network(NetworkConfig(pu_size=8, availability_mode=args.availability),
                        seed=args.seed)
    cfg = TrainConfig(total_iters=args.iters, batch_size=32, seed=args.seed,
                      availability_mode=args.availability)
    t0 = time.perf_counter()
    net, rows = train(net, samples, cfg)
    elapsed = time.perf_counter() - t0
    save_model(net, out / "model.psrnn")
    write_training_log(rows, out / "train_log.csv")
    initial, best = rows[0].val_loss, min(r.val_loss for r in rows)
    print(f"val SATD {initial:.3f} -> {best:.3f} "
          f"({100 * (initial - best) / initial:.1f}% reduction) in {elapsed:.0f}s")
    print(f"model -> {out / 'model.psrnn'}")


if __name__ == "__main__":
    main()
