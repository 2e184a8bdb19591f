"""Exponential-moving-average tracking of the encoder and projector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

TRACKED_GROUPS = ("encoder", "projector")

Params = dict[str, Tensor]


def tracked(params: Params) -> Params:
    """The online entries the momentum branch mirrors (same Tensor objects)."""
    return {k: v for k, v in params.items() if k.split(".", 1)[0] in TRACKED_GROUPS}


def init_momentum_copy(online: Params) -> Params:
    """Detached value copy; the copies never require gradients."""
    return {k: Tensor(v.data.copy()) for k, v in online.items()}


@dataclass
class MomentumPair:
    online: Params
    target: Params
    m: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.m < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.m}")


def ema_update(pair: MomentumPair) -> None:
    """target <- m * target + (1 - m) * online, parameter by parameter."""
    if not 0.0 <= pair.m < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {pair.m}")
    if pair.online.keys() != pair.target.keys():
        missing = sorted(set(pair.online) ^ set(pair.target))
        raise ValueError(f"online and target parameter paths differ: {missing[:5]}")
    m = pair.m
    for name, t in pair.target.items():
        o = pair.online[name].data
        if o.shape != t.data.shape:
            raise ValueError(f"shape drift at {name}: online {o.shape}, target {t.data.shape}")
        # rebind rather than mutate: old arrays may sit in a finished graph
        t.data = (m * t.data + (1.0 - m) * o).astype(t.data.dtype)
        t.grad = None
