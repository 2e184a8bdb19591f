"""Desk-scale end-to-end run: pretrain on synthetic stripes, then linear-probe.

The pretrained probe is compared with a probe on a randomly initialised
backbone of the same shape, trained with the same probe settings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import train as TR
from .model import ModelConfig
from .train import TrainConfig

DESK_MODEL = ModelConfig(image_size=16, patch_size=4, enc_depth=2, enc_heads=4, enc_dim=64,
                         dec_dim=32, dec_heads=1, proj_dim=64, num_classes=2)


@dataclass(frozen=True)
class DeskConfig:
    train_n: int = 512
    test_n: int = 256
    noise: float = 0.3
    data_seed: int = 0
    steps: int = 300
    pretrain: dict = field(default_factory=lambda: dict(
        lr=1e-3, batch_size=128, bank_size=256, warmup_epochs=5, alpha=0.1))
    # a 0.08 area crop of a 16 px image is a single patch; 0.5 keeps several stripe periods
    probe: dict = field(default_factory=lambda: dict(
        lr=0.3, batch_size=128, epochs=30, warmup_epochs=2, crop_scale=0.5))
    seed: int = 0

    def pretrain_config(self) -> TrainConfig:
        spe = self.train_n // self.pretrain["batch_size"]
        return TrainConfig.for_stage("pretrain", epochs=-(-self.steps // spe), seed=self.seed, **self.pretrain)

    def probe_config(self) -> TrainConfig:
        return TrainConfig.for_stage("linprobe", seed=self.seed, **self.probe)


@dataclass
class DeskResult:
    pretrained_acc: float
    random_acc: float
    history: list[dict]
    seconds: float

    @property
    def gain(self) -> float:
        return self.pretrained_acc - self.random_acc

    def mean_loss(self, first: int, last: int) -> float:
        """Mean total loss over 1-based steps first..last inclusive."""
        return float(np.mean([r["total_loss"] for r in self.history[first - 1:last]]))


def desk_data(cfg: DeskConfig, size: int = DESK_MODEL.image_size) -> tuple[D.Dataset, D.Dataset]:
    train = D.synth_dataset(cfg.train_n, size, np.random.default_rng([cfg.data_seed, 0]), cfg.noise)
    test = D.synth_dataset(cfg.test_n, size, np.random.default_rng([cfg.data_seed, 1]), cfg.noise)
    return train, test


def run_desk(cfg: DeskConfig = DeskConfig(), model: ModelConfig = DESK_MODEL, out_dir=None) -> DeskResult:
    start = time.perf_counter()
    train, test = desk_data(cfg, model.image_size)
    pre = TR.pretrain(cfg.pretrain_config(), model, train, max_steps=cfg.steps, out_dir=out_dir)
    probe = cfg.probe_config()
    pretrained = TR.linear_probe(probe, pre.checkpoint, train, test).accuracies[-1]
    random = TR.linear_probe(probe, TR.untrained_checkpoint(model, cfg.seed), train, test).accuracies[-1]
    return DeskResult(pretrained, random, pre.history, time.perf_counter() - start)
