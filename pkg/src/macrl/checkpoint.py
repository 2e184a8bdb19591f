"""Versioned binary checkpoints.

Layout, all integers little-endian::

    8 bytes   magic b"MACRLCKP"
    u32       format version
    u32       header length, then that many bytes of UTF-8 JSON
              (model config, train config, stage, step, rng state, bank cursor,
              optimizer step)
    u32       blob count, then per blob:
              u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
              u64 payload length, payload as little-endian float32

Blob names are the parameter paths, prefixed ``momentum.`` for the momentum
copies, ``optim.m.`` / ``optim.v.`` for AdamW moments, plus ``bank.keys``.
Blobs are written in sorted name order so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, param_shapes

MAGIC = b"MACRLCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    stage: str = "pretrain"
    train_config: dict = field(default_factory=dict)
    momentum: dict[str, np.ndarray] | None = None
    bank_keys: np.ndarray | None = None
    bank_cursor: int = 0
    optimizer: OptimizerState | None = None
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    version: int = VERSION

    def groups(self) -> list[str]:
        out = sorted({k.split(".", 1)[0] for k in self.params})
        if self.momentum:
            out.append("momentum")
        if self.bank_keys is not None:
            out.append("bank")
        if self.optimizer is not None:
            out.append("optimizer")
        return out


def _blobs(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    blobs = dict(ckpt.params)
    for k, v in (ckpt.momentum or {}).items():
        blobs[f"momentum.{k}"] = v
    if ckpt.bank_keys is not None:
        blobs["bank.keys"] = ckpt.bank_keys
    if ckpt.optimizer is not None:
        for k, v in ckpt.optimizer.m.items():
            blobs[f"optim.m.{k}"] = v
        for k, v in ckpt.optimizer.v.items():
            blobs[f"optim.v.{k}"] = v
    return blobs


def dumps(ckpt: Checkpoint) -> bytes:
    header = {
        "model_config": dataclasses.asdict(ckpt.model_config),
        "train_config": ckpt.train_config,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "bank_cursor": ckpt.bank_cursor,
        "optimizer_step": None if ckpt.optimizer is None else ckpt.optimizer.step,
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(head)))
    buf.write(head)
    blobs = _blobs(ckpt)
    buf.write(struct.pack("<I", len(blobs)))
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    data = dumps(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at byte offset {self.pos}, "
                                  f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if not MAGIC.startswith(data[:len(MAGIC)]):
        raise CheckpointError("bad magic: not a checkpoint file")
    r.take(len(MAGIC))
    version, head_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(r.take(head_len).decode())
        cfg = ModelConfig(**header["model_config"])
    except CheckpointError:
        raise
    except (ValueError, TypeError, KeyError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None

    (count,) = r.unpack("<I")
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"blob {name}: payload of {nbytes} bytes does not match shape {shape}")
        blobs[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError(f"trailing bytes after last blob at byte offset {r.pos}")

    expected = param_shapes(cfg)
    params, momentum, m, v = {}, {}, {}, {}
    bank = None
    for name, arr in blobs.items():
        if name == "bank.keys":
            bank = arr
            continue
        if name.startswith("momentum."):
            key, dest = name[len("momentum."):], momentum
        elif name.startswith("optim.m."):
            key, dest = name[len("optim.m."):], m
        elif name.startswith("optim.v."):
            key, dest = name[len("optim.v."):], v
        else:
            key, dest = name, params
        if key not in expected:
            raise CheckpointError(f"unknown parameter {name}")
        if arr.shape != expected[key]:
            raise CheckpointError(f"shape mismatch for {name}: expected {expected[key]}, got {arr.shape}")
        dest[key] = arr
    if bank is not None and (bank.ndim != 2 or bank.shape[1] != cfg.proj_dim):
        raise CheckpointError(f"shape mismatch for bank.keys: expected (K, {cfg.proj_dim}), got {bank.shape}")

    optimizer = None
    if header.get("optimizer_step") is not None:
        optimizer = OptimizerState(m, v, int(header["optimizer_step"]))
    return Checkpoint(
        model_config=cfg,
        params=params,
        stage=header["stage"],
        train_config=header.get("train_config", {}),
        momentum=momentum or None,
        bank_keys=bank,
        bank_cursor=int(header.get("bank_cursor", 0)),
        optimizer=optimizer,
        rng_state=header.get("rng_state", {}),
        step=int(header.get("step", 0)),
        version=version,
    )


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        return loads(f.read())


BACKBONE_GROUPS = ("encoder", "head")


def backbone_view(ckpt: Checkpoint) -> tuple[dict[str, np.ndarray], list[str]]:
    """Encoder (and head, if present) parameters, plus the names of dropped groups."""
    kept = {k: v for k, v in ckpt.params.items() if k.split(".", 1)[0] in BACKBONE_GROUPS}
    dropped = [g for g in ckpt.groups() if g not in BACKBONE_GROUPS]
    return kept, dropped
