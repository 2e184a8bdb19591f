#!/usr/bin/env python3
"""Pretrain on synthetic stripes, linear-probe, and compare with a random-init probe.

    python scripts/desk_experiment.py --seed 0 --out runs/desk
"""

import argparse
import dataclasses
import logging

from macrl.desk import DeskConfig, run_desk


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.split("\n", 1)[0])
    p.add_argument("--seed", type=int, default=0, help="training seed (init, order, augmentation, masks)")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", help="directory for metrics.csv and final.ckpt of the pretraining run")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = dataclasses.replace(DeskConfig(), seed=args.seed, data_seed=args.data_seed, steps=args.steps)
    res = run_desk(cfg, out_dir=args.out)
    n = len(res.history)
    print(f"pretrain steps        {n}")
    if n >= 200:
        print(f"mean loss 1-20        {res.mean_loss(1, 20):.4f}")
        print(f"mean loss 181-200     {res.mean_loss(181, 200):.4f}")
    print(f"pretrained probe acc  {res.pretrained_acc:.4f}")
    print(f"random-init probe acc {res.random_acc:.4f}")
    print(f"gain (points)         {100 * res.gain:.1f}")
    print(f"wall time (s)         {res.seconds:.1f}")


if __name__ == "__main__":
    main()
