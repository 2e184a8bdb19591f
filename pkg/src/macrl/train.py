"""Optimisation: AdamW, warmup-cosine schedule, and the three training pipelines."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import model as M
from . import objectives as O
from . import tensor as T
from .checkpoint import Checkpoint, OptimizerState, backbone_view, save_checkpoint
from .momentum import MomentumPair, ema_update, init_momentum_copy, tracked
from .tensor import Tensor

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "linprobe")
METRICS_HEADER = ("step", "epoch", "lr", "cl_loss", "mim_loss", "total_loss", "accuracy")

_STAGE_DEFAULTS = {
    "pretrain": dict(lr=1.5e-4, weight_decay=0.01, epochs=2000, warmup_epochs=50, crop_scale=0.2),
    "finetune": dict(lr=1.5e-3, weight_decay=0.01, epochs=200, warmup_epochs=5, crop_scale=0.08),
    "linprobe": dict(lr=0.1, weight_decay=0.0, epochs=200, warmup_epochs=10, crop_scale=0.08),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, report: O.LossReport | None, cause: str = ""):
        self.step = step
        self.report = report
        super().__init__(f"non-finite loss at step {step}; last report: {report}; {cause}")


def _check_params(params, step: int, report) -> None:
    bad = [k for k, p in params.items() if not np.isfinite(p.data).all()]
    if bad:
        raise TrainingDiverged(step, report, f"parameters became non-finite: {', '.join(sorted(bad)[:3])}")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    lr: float = 1.5e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 2000
    warmup_epochs: int = 50
    batch_size: int = 2048
    accum_steps: int = 1
    mask_ratio: float = 0.75
    tau: float = 0.2
    alpha: float = 0.1
    momentum_m: float = 0.99
    bank_size: int = 65536
    seed: int = 0
    min_lr_ratio: float = 1e-3
    recon_mode: str = "visible"
    checkpoint_every: int = 0
    dtype: str = "float32"
    solarize_prob: float = 0.2
    crop_scale: float = 0.2  # lower bound of the random-resized-crop area fraction

    def __post_init__(self):
        self.validate()

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        if stage not in STAGES:
            raise M.ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
        return cls(stage=stage, **{**_STAGE_DEFAULTS[stage], **overrides})

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise M.ConfigError(f"stage: unknown stage {self.stage!r}")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise M.ConfigError("batch_size and accum_steps must be positive")
        if self.batch_size % self.accum_steps:
            raise M.ConfigError(f"batch_size {self.batch_size} not divisible by accum_steps {self.accum_steps}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise M.ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.tau <= 0:
            raise M.ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.crop_scale <= 1.0:
            raise M.ConfigError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if not 0.0 <= self.solarize_prob <= 1.0:
            raise M.ConfigError(f"solarize_prob must lie in [0, 1], got {self.solarize_prob}")
        if not 0.0 <= self.momentum_m < 1.0:
            raise M.ConfigError(f"momentum_m must lie in [0, 1), got {self.momentum_m}")
        if self.recon_mode not in O.RECON_MODES:
            raise M.ConfigError(f"recon_mode must be one of {O.RECON_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise M.ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise M.ConfigError("epochs and warmup_epochs must be non-negative")
        if 0 < self.epochs < self.warmup_epochs:
            raise M.ConfigError(f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise M.ConfigError(f"betas must be two values in [0, 1), got {self.betas}")

    @property
    def micro_batch(self) -> int:
        return self.batch_size // self.accum_steps

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


# --- optimiser and schedule --------------------------------------------------------

def decays(name: str) -> bool:
    """Weight decay applies to everything except biases and layer-norm gains."""
    return not name.endswith(("_b", "_g"))


def adamw_step(params: dict[str, Tensor], state: OptimizerState, *, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8, names=None) -> None:
    """Decoupled-weight-decay Adam with bias correction, reading grads from ``.grad``.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in params if names is None else names:
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ValueError(f"optimizer moment shape {m.shape} does not match parameter {name} {p.data.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        wd = weight_decay if decays(name) else 0.0
        p.data = (p.data - lr * update - lr * wd * p.data).astype(p.data.dtype)


def warmup_steps(cfg: TrainConfig, total_steps: int) -> int:
    if cfg.epochs <= 0:
        return 0
    return round(total_steps * cfg.warmup_epochs / cfg.epochs)


def lr_at(step: int, cfg: TrainConfig, total_steps: int, min_lr: float | None = None) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if min_lr is None:
        min_lr = cfg.lr * cfg.min_lr_ratio
    warm = warmup_steps(cfg, total_steps)
    if step < warm:
        return cfg.lr * step / warm
    if total_steps <= warm:
        return cfg.lr
    progress = min(1.0, (step - warm) / (total_steps - warm))
    return min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + math.cos(math.pi * progress))


# --- metrics -------------------------------------------------------------------------

class MetricsWriter:
    """Append-only CSV with a fixed header, written once per file."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        if not os.path.exists(self.path) or os.path.getsize(self.path) == 0:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)

    def write(self, rows) -> None:
        with open(self.path, "a", newline="") as f:
            w = csv.writer(f)
            for row in rows:
                w.writerow([_fmt(row.get(k, "")) for k in METRICS_HEADER])
            f.flush()


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_metrics(rows, path: str | os.PathLike) -> None:
    MetricsWriter(path).write(rows)


# --- helpers ---------------------------------------------------------------------------

def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


# stream ids for the counter-based rng layout
_INIT, _BANK, _EPOCH, _STEP, _HEAD = 0, 1, 2, 3, 4


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return _rng(seed, _EPOCH, epoch).permutation(n)


def _zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.astype(np.float32) for k, v in params.items()}


def _to_tensors(arrays: dict[str, np.ndarray], dtype, requires_grad=True) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=dtype), requires_grad=requires_grad) for k, v in arrays.items()}


@dataclass
class RunResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    dropped_groups: list[str] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class PretrainState:
    params: dict[str, Tensor]
    momentum: dict[str, Tensor]
    bank: O.MemoryBank
    optimizer: OptimizerState
    step: int = 0


def init_pretrain_state(cfg: TrainConfig, model_cfg: M.ModelConfig) -> PretrainState:
    dtype = cfg.np_dtype
    params = M.init_params(model_cfg, _rng(cfg.seed, _INIT), dtype)
    momentum = init_momentum_copy(tracked(params))
    bank = O.MemoryBank.random(cfg.bank_size, model_cfg.proj_dim, _rng(cfg.seed, _BANK), dtype)
    return PretrainState(params, momentum, bank, OptimizerState())


def state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> PretrainState:
    dtype = cfg.np_dtype
    if ckpt.momentum is None or ckpt.bank_keys is None:
        raise M.ConfigError("checkpoint has no momentum branch or memory bank; cannot resume pretraining")
    params = _to_tensors(ckpt.params, dtype)
    if ckpt.model_config.freeze_patch_embed:
        params["encoder.patch_w"].requires_grad = False
        params["encoder.patch_b"].requires_grad = False
    momentum = _to_tensors(ckpt.momentum, dtype, requires_grad=False)
    bank = O.MemoryBank(np.array(ckpt.bank_keys, dtype=dtype), ckpt.bank_cursor)
    opt = ckpt.optimizer or OptimizerState()
    opt = OptimizerState({k: v.astype(dtype) for k, v in opt.m.items()},
                         {k: v.astype(dtype) for k, v in opt.v.items()}, opt.step)
    return PretrainState(params, momentum, bank, opt, ckpt.step)


def pretrain_checkpoint(state: PretrainState, cfg: TrainConfig, model_cfg: M.ModelConfig) -> Checkpoint:
    return Checkpoint(
        model_config=model_cfg,
        params=_to_arrays(state.params),
        stage="pretrain",
        train_config=config_dict(cfg),
        momentum=_to_arrays(state.momentum),
        bank_keys=state.bank.keys.astype(np.float32),
        bank_cursor=state.bank.cursor,
        optimizer=OptimizerState(_to_arrays_np(state.optimizer.m), _to_arrays_np(state.optimizer.v),
                                 state.optimizer.step),
        rng_state={"seed": cfg.seed, "next_step": state.step},
        step=state.step,
    )


def _to_arrays_np(d: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float32) for k, v in d.items()}


def config_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    if "betas" in out:
        out["betas"] = list(out["betas"])
    return out


def pretrain_names(params: dict[str, Tensor]) -> list[str]:
    return [k for k, v in params.items()
            if M.group_of(k) in ("encoder", "decoder", "projector") and v.requires_grad]


# --- pretraining -----------------------------------------------------------------------

def pretrain_step(state: PretrainState, cfg: TrainConfig, model_cfg: M.ModelConfig, images: np.ndarray,
                  step_rng: np.random.Generator, lr: float, policies) -> O.LossReport:
    """One optimizer step: accumulate over micro-batches, AdamW, EMA, then enqueue keys."""
    strong, weak = policies
    B = images.shape[0]
    x1 = D.augment_batch(images, strong, step_rng).astype(cfg.np_dtype)
    x2 = D.augment_batch(images, weak, step_rng).astype(cfg.np_dtype)
    N = model_cfg.num_patches
    plan1 = M.plan_from_noise(step_rng.random((B, N)), cfg.mask_ratio)
    plan2 = M.plan_from_noise(step_rng.random((B, N)), cfg.mask_ratio)

    _zero_grads(state.params)
    mb = B // cfg.accum_steps
    reports, k1s, k2s = [], [], []
    for j in range(cfg.accum_steps):
        sl = slice(j * mb, (j + 1) * mb)
        out = O.macrl_step(state.params, state.momentum, state.bank, x1[sl], x2[sl], model_cfg,
                           mask_ratio=cfg.mask_ratio, tau=cfg.tau, alpha=cfg.alpha,
                           plans=(plan1[sl], plan2[sl]), mode=cfg.recon_mode, enqueue=False)
        T.backward(out.loss * (1.0 / cfg.accum_steps))
        reports.append(out.report)
        k1s.append(out.keys[: out.keys.shape[0] // 2])
        k2s.append(out.keys[out.keys.shape[0] // 2:])

    adamw_step(state.params, state.optimizer, lr=lr, weight_decay=cfg.weight_decay, betas=cfg.betas,
               eps=cfg.eps, names=pretrain_names(state.params))
    ema_update(MomentumPair(tracked(state.params), state.momentum, cfg.momentum_m))
    state.bank.enqueue(np.concatenate(k1s + k2s, axis=0))
    state.step += 1
    n = len(reports)
    return O.LossReport(
        cl=sum(r.cl for r in reports) / n,
        mim=sum(r.mim for r in reports) / n,
        total=sum(r.total for r in reports) / n,
        alpha=cfg.alpha,
        cl_terms=tuple(sum(r.cl_terms[i] for r in reports) / n for i in range(2)),
        mim_terms=tuple(sum(r.mim_terms[i] for r in reports) / n for i in range(2)),
    )


def pretrain(cfg: TrainConfig, model_cfg: M.ModelConfig, dataset: D.Dataset, *, out_dir=None,
             resume: Checkpoint | None = None, max_steps: int | None = None,
             writer: MetricsWriter | None = None) -> RunResult:
    """Masked contrastive pretraining; returns the final checkpoint and per-step metrics.

    Data order, augmentation and masks are drawn from streams keyed on
    (seed, epoch) and (seed, step), so a resumed run replays exactly.
    """
    if len(dataset) == 0:
        raise ValueError("pretraining needs a non-empty dataset")
    spe = len(dataset) // cfg.batch_size
    if spe < 1:
        raise M.ConfigError(f"dataset of {len(dataset)} images is smaller than batch_size {cfg.batch_size}")
    if 2 * cfg.micro_batch > cfg.bank_size:
        raise M.ConfigError(f"bank_size {cfg.bank_size} smaller than the keys enqueued per step")
    total = cfg.epochs * spe
    state = state_from_checkpoint(resume, cfg) if resume is not None else init_pretrain_state(cfg, model_cfg)
    stop = total if max_steps is None else min(total, state.step + max_steps)
    size, lo = model_cfg.image_size, cfg.crop_scale
    policies = (D.make_policy(D.PRETRAIN_STRONG, size, crop_scale=lo).with_probs(solarize=cfg.solarize_prob),
                D.make_policy(D.PRETRAIN_WEAK, size, crop_scale=lo))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = writer or MetricsWriter(os.path.join(out_dir, "metrics.csv"))

    history, pending = [], []
    report = None
    order_epoch, order = -1, None
    while state.step < stop:
        step = state.step
        epoch, pos = divmod(step, spe)
        if epoch != order_epoch:
            order_epoch, order = epoch, _epoch_order(cfg.seed, epoch, len(dataset))
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        lr = lr_at(step, cfg, total)
        try:
            report = pretrain_step(state, cfg, model_cfg, dataset.images[idx], _rng(cfg.seed, _STEP, step),
                                   lr, policies)
        except T.NonFiniteError as e:
            raise TrainingDiverged(step + 1, report, str(e)) from e
        if not math.isfinite(report.total):
            raise TrainingDiverged(step + 1, report)
        _check_params(state.params, step + 1, report)
        row = {"step": step + 1, "epoch": epoch + 1, "lr": lr, "cl_loss": report.cl,
               "mim_loss": report.mim, "total_loss": report.total, "accuracy": ""}
        history.append(row)
        pending.append(row)
        if writer is not None and (pos == spe - 1 or state.step == stop):
            writer.write(pending)
            pending = []
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(pretrain_checkpoint(state, cfg, model_cfg),
                            os.path.join(out_dir, f"step_{state.step}.ckpt"))
        if state.step % max(1, spe) == 0:
            log.info("pretrain step %d epoch %d lr %.3g cl %.4f mim %.4f total %.4f",
                     state.step, epoch + 1, lr, report.cl, report.mim, report.total)

    ckpt = pretrain_checkpoint(state, cfg, model_cfg)
    if out_dir is not None:
        save_checkpoint(ckpt, os.path.join(out_dir, "final.ckpt"))
    return RunResult(ckpt, history, params=state.params)


# --- supervised evaluation pipelines --------------------------------------------------------

def evaluate(params: dict[str, Tensor], model_cfg: M.ModelConfig, dataset: D.Dataset, batch: int = 256) -> float:
    """Top-1 accuracy with no augmentation beyond resizing."""
    correct = 0
    with T.no_grad():
        for start in range(0, len(dataset), batch):
            x = D.eval_batch(dataset.images[start:start + batch], model_cfg.image_size)
            logits = M.classify(params, model_cfg, x.astype(params["head.fc_w"].dtype))
            correct += int((logits.data.argmax(axis=1) == dataset.labels[start:start + batch]).sum())
    return correct / len(dataset)


def untrained_checkpoint(model_cfg: M.ModelConfig, seed: int = 0) -> Checkpoint:
    """Randomly initialised encoder, as a baseline backbone."""
    params = M.init_params(model_cfg, _rng(seed, _INIT))
    return Checkpoint(model_config=model_cfg, params=_to_arrays(params), stage="init")


def _check_labelled(model_cfg: M.ModelConfig, dataset: D.Dataset, what: str) -> None:
    if dataset.labels is None:
        raise M.ConfigError(f"{what} dataset has no labels")
    if dataset.images.shape[-1] != model_cfg.channels:
        raise M.ConfigError(f"{what} images have {dataset.images.shape[-1]} channels, "
                            f"checkpoint expects {model_cfg.channels}")
    if len(dataset) and int(dataset.labels.max()) >= model_cfg.num_classes:
        raise M.ConfigError(f"{what} labels reach {int(dataset.labels.max())}, "
                            f"checkpoint head has {model_cfg.num_classes} classes")


def supervised_params(ckpt: Checkpoint, cfg: TrainConfig) -> tuple[dict[str, Tensor], list[str]]:
    """Encoder from the checkpoint plus its head, or a fresh head if it has none."""
    mcfg = ckpt.model_config
    kept, dropped = backbone_view(ckpt)
    fresh = M.init_params(mcfg, _rng(cfg.seed, _HEAD), cfg.np_dtype)
    params = {k: v for k, v in fresh.items() if M.group_of(k) in ("encoder", "head")}
    for k, arr in kept.items():
        params[k] = Tensor(np.array(arr, dtype=cfg.np_dtype), requires_grad=params[k].requires_grad)
    return params, dropped


def _supervised(cfg: TrainConfig, ckpt: Checkpoint, train: D.Dataset, test: D.Dataset, *, head_only: bool,
                out_dir=None, writer: MetricsWriter | None = None) -> RunResult:
    mcfg = ckpt.model_config
    _check_labelled(mcfg, train, "training")
    _check_labelled(mcfg, test, "test")
    spe = len(train) // cfg.batch_size
    if spe < 1 and cfg.epochs > 0:
        raise M.ConfigError(f"dataset of {len(train)} images is smaller than batch_size {cfg.batch_size}")
    params, dropped = supervised_params(ckpt, cfg)
    if dropped:
        log.info("dropped parameter groups: %s", ", ".join(dropped))
    names = [k for k, v in params.items()
             if v.requires_grad and (M.group_of(k) == "head" or not head_only)]
    backbone_before = {k: v.data.tobytes() for k, v in params.items() if M.group_of(k) == "encoder"}
    policy = D.make_policy(D.LINPROBE if head_only else D.FINETUNE, mcfg.image_size, crop_scale=cfg.crop_scale)
    stage = "linprobe" if head_only else "finetune"
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = writer or MetricsWriter(os.path.join(out_dir, "metrics.csv"))

    total = cfg.epochs * spe
    opt = OptimizerState()
    accuracies = [evaluate(params, mcfg, test)]
    history = []
    mb = cfg.batch_size // cfg.accum_steps
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, len(train))
        rows = []
        for pos in range(spe):
            idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            rng = _rng(cfg.seed, _STEP, step)
            x = D.augment_batch(train.images[idx], policy, rng).astype(cfg.np_dtype)
            y = train.labels[idx]
            _zero_grads(params)
            loss_sum = 0.0
            for j in range(cfg.accum_steps):
                sl = slice(j * mb, (j + 1) * mb)
                try:
                    loss = O.cross_entropy(M.classify(params, mcfg, x[sl], frozen_backbone=head_only), y[sl])
                except T.NonFiniteError as e:
                    raise TrainingDiverged(step + 1, None, str(e)) from e
                T.backward(loss * (1.0 / cfg.accum_steps))
                loss_sum += loss.item()
            lr = lr_at(step, cfg, total)
            adamw_step(params, opt, lr=lr, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps, names=names)
            step += 1
            _check_params(params, step, None)
            rows.append({"step": step, "epoch": epoch + 1, "lr": lr, "cl_loss": "", "mim_loss": "",
                         "total_loss": loss_sum / cfg.accum_steps, "accuracy": ""})
        accuracies.append(evaluate(params, mcfg, test))
        if rows:
            rows[-1]["accuracy"] = accuracies[-1]
        history.extend(rows)
        if writer is not None:
            writer.write(rows)
        log.info("%s epoch %d accuracy %.4f", stage, epoch + 1, accuracies[-1])

    if head_only:
        for k, before in backbone_before.items():
            if params[k].data.tobytes() != before:
                raise RuntimeError(f"frozen backbone parameter {k} changed during linear probing")

    out = Checkpoint(model_config=mcfg, params=_to_arrays(params), stage=stage,
                     train_config=config_dict(cfg), step=step,
                     rng_state={"seed": cfg.seed, "next_step": step})
    if out_dir is not None:
        save_checkpoint(out, os.path.join(out_dir, "final.ckpt"))
    return RunResult(out, history, accuracies, dropped, params)


def finetune(cfg: TrainConfig, ckpt: Checkpoint, train: D.Dataset, test: D.Dataset, **kw) -> RunResult:
    """Train encoder and head end to end with cross-entropy; accuracy per epoch on ``test``."""
    return _supervised(cfg, ckpt, train, test, head_only=False, **kw)


def linear_probe(cfg: TrainConfig, ckpt: Checkpoint, train: D.Dataset, test: D.Dataset, **kw) -> RunResult:
    """Train only the head on frozen features; fails if any backbone bit changes."""
    return _supervised(cfg, ckpt, train, test, head_only=True, **kw)
