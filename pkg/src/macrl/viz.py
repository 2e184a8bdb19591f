"""Attention rollout maps and PPM export."""

from __future__ import annotations

import os

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint


def rollout(layers: list[np.ndarray]) -> np.ndarray:
    """Compose per-layer attention (H, T, T) into one (T, T) rollout matrix.

    Each layer is head-averaged, mixed with the identity for the residual path
    and row-renormalised; layers compose by matrix product, first layer rightmost.
    """
    if not layers:
        raise ValueError("rollout needs at least one attention layer")
    n = layers[0].shape[-1]
    out = np.eye(n)
    for attn in layers:
        a = np.asarray(attn, dtype=np.float64).mean(axis=0) + np.eye(n)
        a /= a.sum(axis=-1, keepdims=True)
        out = a @ out
    return out


def relevance_map(layers: list[np.ndarray], grid: int) -> np.ndarray:
    """Per-patch relevance (grid, grid): rollout column means, scaled to [0, 1]."""
    rel = rollout(layers).mean(axis=0)
    span = rel.max() - rel.min()
    rel = (rel - rel.min()) / span if span > 0 else np.zeros_like(rel)
    return rel.reshape(grid, grid)


def upsample(grid_map: np.ndarray, patch_size: int) -> np.ndarray:
    return np.kron(grid_map, np.ones((patch_size, patch_size)))


def heat_colors(rel: np.ndarray) -> np.ndarray:
    """Blue (low) to red (high) colour map, (H, W) -> (H, W, 3)."""
    r = np.clip(2 * rel, 0, 1)
    b = np.clip(2 * (1 - rel), 0, 1)
    g = 1 - np.abs(2 * rel - 1)
    return np.stack([r, g, b], axis=-1)


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Binary P6 pixmap from (H, W, C) values in [0, 1]; grey images are replicated."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim == 2:
        px = px[..., None]
    if px.shape[-1] == 1:
        px = np.repeat(px, 3, axis=-1)
    if px.shape[-1] != 3:
        raise ValueError(f"cannot write {px.shape[-1]}-channel image as PPM")
    data = np.round(np.clip(px, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields = raw.split(maxsplit=4)
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    body = fields[4]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / maxval


def attention_maps(params, cfg: M.ModelConfig, images: np.ndarray) -> np.ndarray:
    """Relevance maps (B, H, W) at full image resolution, unmasked encoder."""
    sink: list[np.ndarray] = []
    with T.no_grad():
        M.encode(params, cfg, np.asarray(images, dtype=np.float32), 0.0, attn_sink=sink)
    maps = []
    for b in range(images.shape[0]):
        rel = relevance_map([layer[b] for layer in sink], cfg.grid)
        maps.append(upsample(rel, cfg.patch_size))
    return np.stack(maps)


def attn_viz(ckpt: Checkpoint, images: np.ndarray, output_dir: str | os.PathLike) -> list[str]:
    """Write ``{i:03d}_orig.ppm`` and ``{i:03d}_attn.ppm`` for each image; return the paths."""
    cfg = ckpt.model_config
    params = {k: T.Tensor(v) for k, v in ckpt.params.items() if M.group_of(k) == "encoder"}
    os.makedirs(output_dir, exist_ok=True)
    maps = attention_maps(params, cfg, images)
    written = []
    for i, (img, rel) in enumerate(zip(images, maps)):
        orig = os.path.join(output_dir, f"{i:03d}_orig.ppm")
        heat = os.path.join(output_dir, f"{i:03d}_attn.ppm")
        write_ppm(orig, img)
        write_ppm(heat, 0.5 * heat_colors(rel) + 0.5 * np.asarray(img, dtype=np.float64).mean(-1, keepdims=True))
        written += [orig, heat]
    return written
