"""Losses, the negative-key memory bank and the symmetric two-view training step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor

UNIT_TOL = 1e-3
RECON_MODES = ("visible", "masked", "all")


@dataclass
class MemoryBank:
    """Fixed-capacity FIFO of unit-norm key embeddings, (capacity, dim)."""

    keys: np.ndarray
    cursor: int = 0

    @classmethod
    def random(cls, capacity: int, dim: int, rng: np.random.Generator, dtype=np.float32) -> "MemoryBank":
        keys = rng.standard_normal((capacity, dim))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        return cls(keys.astype(dtype))

    @property
    def capacity(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys.data if isinstance(keys, Tensor) else keys)
        n = keys.shape[0]
        if n > self.capacity:
            raise ValueError(f"cannot enqueue {n} keys into a bank of capacity {self.capacity}")
        if keys.shape[1:] != (self.dim,):
            raise ValueError(f"key shape {keys.shape[1:]} does not match bank dim {self.dim}")
        _check_unit(keys, "bank keys")
        # copy-on-write: earlier graphs may still reference the old array
        new = self.keys.copy()
        idx = (self.cursor + np.arange(n)) % self.capacity
        new[idx] = keys
        self.keys = new
        self.cursor = int((self.cursor + n) % self.capacity)


def bank_update(bank: MemoryBank, keys) -> MemoryBank:
    bank.enqueue(keys)
    return bank


def _check_unit(x: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(x.reshape(-1, x.shape[-1]), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{what} must be unit-normalised (norms range {norms.min():.4g}..{norms.max():.4g})")


def info_nce(q: Tensor, k_pos, bank, tau: float) -> Tensor:
    """Mean over the batch of -log softmax(q.k+ / tau against q.k_i / tau)[positive].

    ``k_pos`` and the bank keys are constants: no gradient reaches them. The
    positive logit sits in column 0 of a (1 + K)-way log-softmax.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if isinstance(bank, MemoryBank):
        negatives = bank.keys
    else:
        negatives = np.asarray(bank.data if isinstance(bank, Tensor) else bank)
    k_pos = np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos, dtype=q.dtype)
    if q.ndim == 1:
        q = q.reshape(1, -1)
        k_pos = k_pos.reshape(1, -1)
    if k_pos.shape != q.shape:
        raise ValueError(f"info_nce: query shape {q.shape} and positive key shape {k_pos.shape} differ")
    _check_unit(q.data, "queries")
    _check_unit(k_pos, "positive keys")
    pos = (q * Tensor(k_pos)).sum(axis=-1, keepdims=True)
    neg = q @ Tensor(np.ascontiguousarray(negatives.T, dtype=q.dtype))
    logits = T.concat([pos, neg], axis=1) * (1.0 / tau)
    picked = T.log_softmax(logits).mean(axis=0)
    onehot = np.zeros(picked.shape, dtype=q.dtype)
    onehot[0] = 1.0
    return -(picked * Tensor(onehot)).sum()


def reconstruction_loss(pred: Tensor, target, plan: M.MaskPlan, mode: str = "visible") -> Tensor:
    """Mean absolute error over the entries of the selected tokens.

    ``visible`` scores unmasked tokens only, ``masked`` only the hidden ones,
    ``all`` every token. Unselected tokens contribute nothing.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"reconstruction_loss: prediction {pred.shape} and target {target.shape} differ")
    if mode == "visible":
        weight = 1.0 - plan.mask
    elif mode == "masked":
        weight = plan.mask.astype(np.float64)
    elif mode == "all":
        weight = np.ones(plan.mask.shape)
    else:
        raise ValueError(f"unknown reconstruction mode {mode!r}; expected one of {RECON_MODES}")
    count = weight.sum() * pred.shape[-1]
    if count == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    w = Tensor((weight / count)[..., None].astype(pred.dtype))
    return (T.abs_(pred - Tensor(target)) * w).sum()


def combined_loss(cl, mim, alpha: float):
    return alpha * cl + mim


@dataclass
class LossReport:
    cl: float
    mim: float
    total: float
    alpha: float
    cl_terms: tuple[float, float] = (0.0, 0.0)
    mim_terms: tuple[float, float] = (0.0, 0.0)


@dataclass
class StepOutput:
    loss: Tensor
    report: LossReport
    keys: np.ndarray  # (2B, proj_dim): k1 then k2
    plans: tuple[M.MaskPlan, M.MaskPlan] = field(default=None)


def momentum_keys(momentum: M.Params, cfg: M.ModelConfig, images) -> np.ndarray:
    """Unmasked momentum-branch embedding, computed without graph recording."""
    with T.no_grad():
        w, _ = M.encode(momentum, cfg, images, 0.0)
        return M.project(momentum, w).data


def macrl_step(params: M.Params, momentum: M.Params, bank: MemoryBank, x1: np.ndarray, x2: np.ndarray,
               cfg: M.ModelConfig, *, mask_ratio: float, tau: float, alpha: float,
               rng: np.random.Generator | None = None, plans=None, mode: str = "visible",
               enqueue: bool = True) -> StepOutput:
    """One joint masked-modelling + contrastive step on two views of a batch.

    Both views pass the online encoder under fresh random masks and the momentum
    encoder unmasked; each online query is contrasted with the *other* view's
    momentum key. Reconstruction is scored per view against its own pixels.
    When ``enqueue`` is set, both views' keys enter the bank afterwards.
    """
    plan1, plan2 = plans if plans is not None else (None, None)
    k1 = momentum_keys(momentum, cfg, x1)
    k2 = momentum_keys(momentum, cfg, x2)
    z1, plan1 = M.encode(params, cfg, x1, mask_ratio, rng, plan1)
    z2, plan2 = M.encode(params, cfg, x2, mask_ratio, rng, plan2)
    q1, q2 = M.project(params, z1), M.project(params, z2)
    cl1 = info_nce(q1, k2, bank, tau)
    cl2 = info_nce(q2, k1, bank, tau)
    dtype = q1.dtype
    mim1 = reconstruction_loss(M.decode(params, cfg, z1, plan1),
                               M.patchify(np.asarray(x1, dtype=dtype), cfg.patch_size), plan1, mode)
    mim2 = reconstruction_loss(M.decode(params, cfg, z2, plan2),
                               M.patchify(np.asarray(x2, dtype=dtype), cfg.patch_size), plan2, mode)
    cl, mim = cl1 + cl2, mim1 + mim2
    total = combined_loss(cl, mim, alpha)
    report = LossReport(cl.item(), mim.item(), total.item(), alpha,
                        (cl1.item(), cl2.item()), (mim1.item(), mim2.item()))
    keys = np.concatenate([k1, k2], axis=0)
    if enqueue:
        bank.enqueue(keys)
    return StepOutput(total, report, keys, (plan1, plan2))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(T.log_softmax(logits) * Tensor(onehot)).sum(axis=-1).mean()


def info_nce_bound(capacity: int, tau: float) -> float:
    return math.log(capacity + 1) + 2.0 / tau
