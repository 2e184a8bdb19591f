"""The masked contrastive ViT: patchify, per-sample masking, encoder, decoder,
projector and classifier head.

All forward functions take the flat parameter map and the :class:`ModelConfig`.
The same functions serve the momentum branch: its map holds copies of the
``encoder.*`` and ``projector.*`` entries under identical paths.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

Params = nn.Params


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    enc_depth: int = 12
    enc_heads: int = 4
    enc_dim: int = 512
    dec_dim: int = 256
    dec_heads: int = 1
    proj_dim: int = 512
    num_classes: int = 10
    freeze_patch_embed: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.enc_dim % self.enc_heads:
            raise ConfigError(f"enc_dim {self.enc_dim} not divisible by enc_heads {self.enc_heads}")
        if self.dec_dim % self.dec_heads:
            raise ConfigError(f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}")
        # 2-D sin-cos embeddings split the width into four equal bands
        for name in ("enc_dim", "dec_dim"):
            if getattr(self, name) % 4:
                raise ConfigError(f"{name} must be a multiple of 4")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and v < 1:
                raise ConfigError(f"{f.name} must be positive, got {v}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels


# --- parameters --------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every online parameter, keyed by path."""
    e, d = cfg.enc_dim, cfg.dec_dim
    shapes = {"encoder.patch_w": (cfg.patch_dim, e), "encoder.patch_b": (e,)}
    for i in range(cfg.enc_depth):
        shapes.update(nn.block_shapes(f"encoder.blocks.{i}", e))
    shapes.update({"encoder.norm_g": (e,), "encoder.norm_b": (e,)})
    shapes.update({"decoder.embed_w": (e, d), "decoder.embed_b": (d,), "decoder.mask_token": (d,)})
    shapes.update(nn.block_shapes("decoder.block", d))
    shapes.update({
        "decoder.norm_g": (d,), "decoder.norm_b": (d,),
        "decoder.pred_w": (d, cfg.patch_dim), "decoder.pred_b": (cfg.patch_dim,),
        "projector.fc1_w": (e, e), "projector.fc1_b": (e,),
        "projector.ln_g": (e,), "projector.ln_b": (e,),
        "projector.fc2_w": (e, cfg.proj_dim), "projector.fc2_b": (cfg.proj_dim,),
        "head.fc_w": (e, cfg.num_classes), "head.fc_b": (cfg.num_classes,),
    })
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    params: Params = {}
    e, d = cfg.enc_dim, cfg.dec_dim
    nn.init_linear(params, rng, "encoder.patch", cfg.patch_dim, e, dtype)
    for i in range(cfg.enc_depth):
        nn.init_block(params, rng, f"encoder.blocks.{i}", e, dtype)
    nn.init_norm(params, "encoder.norm", e, dtype)
    nn.init_linear(params, rng, "decoder.embed", e, d, dtype)
    params["decoder.mask_token"] = Tensor(nn.trunc_normal(rng, (d,), dtype=dtype), requires_grad=True)
    nn.init_block(params, rng, "decoder.block", d, dtype)
    nn.init_norm(params, "decoder.norm", d, dtype)
    nn.init_linear(params, rng, "decoder.pred", d, cfg.patch_dim, dtype)
    nn.init_linear(params, rng, "projector.fc1", e, e, dtype)
    nn.init_norm(params, "projector.ln", e, dtype)
    nn.init_linear(params, rng, "projector.fc2", e, cfg.proj_dim, dtype)
    nn.init_linear(params, rng, "head.fc", e, cfg.num_classes, dtype)
    if cfg.freeze_patch_embed:
        params["encoder.patch_w"].requires_grad = False
        params["encoder.patch_b"].requires_grad = False
    assert {k: v.shape for k, v in params.items()} == param_shapes(cfg)
    return params


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


def cast_params(params: Params, dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in params.items()}


# --- positional embeddings ---------------------------------------------------

def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


@functools.lru_cache(maxsize=None)
def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine embedding, (grid*grid, dim), row-major over the grid."""
    gh, gw = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    emb = np.concatenate([_sincos_1d(dim // 2, gh), _sincos_1d(dim // 2, gw)], axis=1)
    emb.setflags(write=False)
    return emb


# --- patches and masking -------------------------------------------------------

def patchify(images, patch_size: int):
    """(B, H, W, C) -> (B, N, P*P*C); each token is one row-major P x P x C patch.

    Works on numpy arrays and, differentiably, on tensors. A single (H, W, C)
    image gives (N, P*P*C).
    """
    single = images.ndim == 3
    if single:
        images = images.reshape(1, *images.shape)
    B, H, W, C = images.shape
    p = patch_size
    if H % p or W % p:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {p}")
    h, w = H // p, W // p
    x = images.reshape(B, h, p, w, p, C).transpose((0, 1, 3, 2, 4, 5)).reshape(B, h * w, p * p * C)
    return x.reshape(h * w, p * p * C) if single else x


def unpatchify(tokens: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    B, N, _ = tokens.shape
    g = math.isqrt(N)
    p = patch_size
    x = tokens.reshape(B, g, g, p, p, channels).transpose(0, 1, 3, 2, 4, 5).reshape(B, g * p, g * p, channels)
    return x[0] if single else x


@dataclass
class MaskPlan:
    ids_shuffle: np.ndarray  # (B, N) token order; the first keep_count are visible
    ids_restore: np.ndarray  # (B, N) inverse permutation
    mask: np.ndarray  # (B, N) 1 = masked, 0 = visible
    keep_count: int

    @property
    def ids_keep(self) -> np.ndarray:
        return self.ids_shuffle[:, : self.keep_count]

    def __getitem__(self, sl) -> "MaskPlan":
        return MaskPlan(self.ids_shuffle[sl], self.ids_restore[sl], self.mask[sl], self.keep_count)

    def __len__(self) -> int:
        return self.ids_shuffle.shape[0]


def keep_count(num_tokens: int, ratio: float) -> int:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    # guard against 0.2 * 64 = 12.799999... style rounding
    keep = math.floor(num_tokens * (1.0 - ratio) + 1e-9)
    if keep < 1:
        raise ValueError(f"mask ratio {ratio} leaves no visible token out of {num_tokens}")
    return keep


def plan_from_noise(noise: np.ndarray, ratio: float) -> MaskPlan:
    """Masking plan from per-token noise: ascending noise order is the shuffle."""
    B, N = noise.shape
    keep = keep_count(N, ratio)
    ids_shuffle = np.argsort(noise, axis=1, kind="stable")
    ids_restore = np.argsort(ids_shuffle, axis=1, kind="stable")
    mask = np.ones((B, N), dtype=np.int8)
    mask[:, :keep] = 0
    mask = np.take_along_axis(mask, ids_restore, axis=1)
    return MaskPlan(ids_shuffle, ids_restore, mask, keep)


def random_mask(tokens: Tensor, ratio: float, rng: np.random.Generator | None = None,
                plan: MaskPlan | None = None) -> tuple[Tensor, MaskPlan]:
    """Keep a uniformly random subset of floor(N * (1 - ratio)) tokens per sample."""
    B, N = tokens.shape[:2]
    if plan is None:
        if rng is None:
            raise ValueError("random_mask needs either rng or plan")
        plan = plan_from_noise(rng.random((B, N)), ratio)
    elif plan.ids_shuffle.shape != (B, N):
        raise ValueError(f"mask plan for {plan.ids_shuffle.shape} does not fit tokens {tokens.shape}")
    if plan.keep_count == N:
        # identity gather keeps the graph simple for the unmasked path
        return T.gather_rows(tokens, plan.ids_shuffle), plan
    return T.gather_rows(tokens, plan.ids_keep), plan


# --- forward passes ------------------------------------------------------------

def _images_tensor(images, dtype) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return Tensor(np.asarray(images, dtype=dtype))


def encode(params: Params, cfg: ModelConfig, images, mask_ratio: float = 0.0,
           rng: np.random.Generator | None = None, plan: MaskPlan | None = None,
           attn_sink: list | None = None) -> tuple[Tensor, MaskPlan]:
    """Embed patches, add positions, mask, run the encoder blocks and final norm.

    Returns the latent (B, keep, enc_dim) and the mask plan used. With
    ``mask_ratio=0`` and no plan every token is kept in its original order.
    """
    dtype = params["encoder.patch_w"].dtype
    x = _images_tensor(images, dtype)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ConfigError(f"images of shape {x.shape[1:]} do not match the model config")
    tokens = nn.linear(patchify(x, cfg.patch_size), params, "encoder.patch")
    tokens = tokens + Tensor(sincos_pos_embed(cfg.enc_dim, cfg.grid).astype(dtype))
    if plan is None and mask_ratio == 0.0:
        B, N = tokens.shape[:2]
        ids = np.broadcast_to(np.arange(N), (B, N)).copy()
        plan = MaskPlan(ids, ids.copy(), np.zeros((B, N), dtype=np.int8), N)
    tokens, plan = random_mask(tokens, mask_ratio, rng, plan)
    for i in range(cfg.enc_depth):
        tokens = nn.transformer_block(tokens, params, f"encoder.blocks.{i}", cfg.enc_heads, attn_sink)
    return nn.norm(tokens, params, "encoder.norm"), plan


def decode(params: Params, cfg: ModelConfig, latent: Tensor, plan: MaskPlan,
           attn_sink: list | None = None) -> Tensor:
    """Reconstruct every patch: (B, keep, enc_dim) -> (B, N, P*P*C)."""
    B, keep = latent.shape[:2]
    N = plan.ids_shuffle.shape[1]
    if len(plan) != B or plan.keep_count != keep:
        raise ValueError(f"mask plan (batch {len(plan)}, keep {plan.keep_count}) "
                         f"does not match latent of shape {latent.shape}")
    x = nn.linear(latent, params, "decoder.embed")
    if keep < N:
        filler = Tensor(np.zeros((B, N - keep, cfg.dec_dim), dtype=x.dtype)) + params["decoder.mask_token"]
        x = T.concat([x, filler], axis=1)
    x = T.gather_rows(x, plan.ids_restore)
    x = x + Tensor(sincos_pos_embed(cfg.dec_dim, cfg.grid).astype(x.dtype))
    x = nn.transformer_block(x, params, "decoder.block", cfg.dec_heads, attn_sink)
    x = nn.norm(x, params, "decoder.norm")
    return nn.linear(x, params, "decoder.pred")


def project(params: Params, latent: Tensor) -> Tensor:
    """Token-mean -> linear -> layer norm -> gelu -> linear -> unit norm."""
    h = nn.linear(latent.mean(axis=1), params, "projector.fc1")
    h = T.gelu(nn.norm(h, params, "projector.ln"))
    return T.l2_normalize(nn.linear(h, params, "projector.fc2"))


def features(params: Params, cfg: ModelConfig, images) -> Tensor:
    latent, _ = encode(params, cfg, images, 0.0)
    return latent.mean(axis=1)


def classify(params: Params, cfg: ModelConfig, images, frozen_backbone: bool = False) -> Tensor:
    """Logits (B, num_classes) from the unmasked, token-averaged encoder output."""
    if frozen_backbone:
        with T.no_grad():
            feats = features(params, cfg, images)
    else:
        feats = features(params, cfg, images)
    return nn.linear(feats, params, "head.fc")
