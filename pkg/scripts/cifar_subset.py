#!/usr/bin/env python3
"""Optional CIFAR-10 subset run: 5,000 training images, tiny ViT, 50 pretraining epochs.

Needs the CIFAR-10 binary batches (``data_batch_*.bin`` and ``test_batch.bin``):

    python scripts/cifar_subset.py /path/to/cifar-10-batches-bin

Expect hours on one CPU core; the run is not part of the default test suite.
"""

import argparse
import logging
import time
from dataclasses import dataclass

import numpy as np

from macrl import data as D
from macrl import train as TR
from macrl.model import ModelConfig
from macrl.train import TrainConfig

CIFAR_MODEL = ModelConfig(image_size=32, patch_size=4, enc_depth=4, enc_heads=4, enc_dim=96, dec_dim=48,
                          dec_heads=1, proj_dim=64, num_classes=10)


@dataclass
class SubsetResult:
    pretrained_acc: float
    random_acc: float
    seconds: float

    @property
    def gain(self) -> float:
        return self.pretrained_acc - self.random_acc


def run_cifar_subset(path, n_train=5000, n_test=2000, epochs=50, probe_epochs=20, seed=0, out_dir=None):
    start = time.perf_counter()
    train, test = D.load_cifar_dir(path)
    rng = np.random.default_rng([seed, 10])
    train = train.subset(rng.permutation(len(train))[:n_train])
    if test is None:
        raise FileNotFoundError(f"{path} has no test_batch.bin")
    test = test.subset(slice(0, n_test))
    pre_cfg = TrainConfig.for_stage("pretrain", lr=1e-3, epochs=epochs, warmup_epochs=5, batch_size=128,
                                    bank_size=4096, seed=seed)
    ckpt = TR.pretrain(pre_cfg, CIFAR_MODEL, train, out_dir=out_dir).checkpoint
    probe = TrainConfig.for_stage("linprobe", lr=0.3, epochs=probe_epochs, warmup_epochs=2, batch_size=128,
                                  seed=seed)
    a = TR.linear_probe(probe, ckpt, train, test).accuracies[-1]
    b = TR.linear_probe(probe, TR.untrained_checkpoint(CIFAR_MODEL, seed), train, test).accuracies[-1]
    return SubsetResult(a, b, time.perf_counter() - start)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.split("\n", 1)[0])
    p.add_argument("path", help="directory with the CIFAR-10 .bin batches")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    res = run_cifar_subset(args.path, epochs=args.epochs, seed=args.seed, out_dir=args.out)
    print(f"pretrained probe {res.pretrained_acc:.4f}  random-init probe {res.random_acc:.4f}  "
          f"gain {100 * res.gain:.1f} pts  ({res.seconds / 60:.0f} min)")


if __name__ == "__main__":
    main()
