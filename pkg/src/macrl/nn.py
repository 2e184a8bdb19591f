"""Transformer building blocks over flat, path-keyed parameter maps.

Parameters live in a ``dict[str, Tensor]`` keyed by dotted paths such as
``encoder.blocks.3.attn.q_w``. Weights end in ``_w`` (shape in x out, used as
``x @ w``), biases in ``_b`` and layer-norm gains in ``_g``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]

LN_EPS = 1e-6
MLP_RATIO = 4


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_linear(params: Params, rng, prefix: str, fan_in: int, fan_out: int, dtype=np.float32) -> None:
    params[f"{prefix}_w"] = Tensor(trunc_normal(rng, (fan_in, fan_out), dtype=dtype), requires_grad=True)
    params[f"{prefix}_b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)


def init_norm(params: Params, prefix: str, dim: int, dtype=np.float32) -> None:
    params[f"{prefix}_g"] = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
    params[f"{prefix}_b"] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)


def init_block(params: Params, rng, prefix: str, dim: int, dtype=np.float32) -> None:
    init_norm(params, f"{prefix}.ln1", dim, dtype)
    for name in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{prefix}.attn.{name}", dim, dim, dtype)
    init_norm(params, f"{prefix}.ln2", dim, dtype)
    init_linear(params, rng, f"{prefix}.mlp.fc1", dim, MLP_RATIO * dim, dtype)
    init_linear(params, rng, f"{prefix}.mlp.fc2", MLP_RATIO * dim, dim, dtype)


def block_shapes(prefix: str, dim: int) -> dict[str, tuple[int, ...]]:
    shapes = {f"{prefix}.ln1_g": (dim,), f"{prefix}.ln1_b": (dim,)}
    for name in ("q", "k", "v", "o"):
        shapes[f"{prefix}.attn.{name}_w"] = (dim, dim)
        shapes[f"{prefix}.attn.{name}_b"] = (dim,)
    shapes[f"{prefix}.ln2_g"] = (dim,)
    shapes[f"{prefix}.ln2_b"] = (dim,)
    shapes[f"{prefix}.mlp.fc1_w"] = (dim, MLP_RATIO * dim)
    shapes[f"{prefix}.mlp.fc1_b"] = (MLP_RATIO * dim,)
    shapes[f"{prefix}.mlp.fc2_w"] = (MLP_RATIO * dim, dim)
    shapes[f"{prefix}.mlp.fc2_b"] = (dim,)
    return shapes


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return x @ params[f"{prefix}_w"] + params[f"{prefix}_b"]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps) * gain + bias


def norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}_g"], params[f"{prefix}_b"])


def multi_head_self_attention(
    x: Tensor, params: Params, prefix: str, heads: int, attn_sink: list | None = None
) -> Tensor:
    """Scaled dot-product self-attention over tokens of ``x`` (B, T, D).

    If ``attn_sink`` is a list, the (B, heads, T, T) attention weights are
    appended to it as a numpy array.
    """
    B, n, D = x.shape
    if D % heads:
        raise ValueError(f"embedding dim {D} not divisible by {heads} heads")
    dh = D // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(B, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, params, f"{prefix}.q"))
    k = split(linear(x, params, f"{prefix}.k"))
    v = split(linear(x, params, f"{prefix}.v"))
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores)
    if attn_sink is not None:
        attn_sink.append(attn.data.copy())
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n, D)
    return linear(out, params, f"{prefix}.o")


def feed_forward(x: Tensor, params: Params, prefix: str) -> Tensor:
    return linear(T.gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def transformer_block(
    x: Tensor, params: Params, prefix: str, heads: int, attn_sink: list | None = None
) -> Tensor:
    """Pre-norm residual block: x + attn(ln1(x)), then + mlp(ln2(.))."""
    x = x + multi_head_self_attention(norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", heads, attn_sink)
    return x + feed_forward(norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.mlp")
