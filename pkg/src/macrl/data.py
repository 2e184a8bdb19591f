"""Datasets and augmentation pipelines.

Images are float arrays (H, W, C) in [0, 1]. Every augmentation op is pure given
its ``numpy.random.Generator``, so identical seeds give bit-identical outputs.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SIZE = 32

PRETRAIN_STRONG = "pretrain-strong"
PRETRAIN_WEAK = "pretrain-weak"
FINETUNE = "finetune"
LINPROBE = "linprobe"
POLICY_KINDS = (PRETRAIN_STRONG, PRETRAIN_WEAK, FINETUNE, LINPROBE)


@dataclass
class ImageRecord:
    pixels: np.ndarray
    label: int | None = None


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> ImageRecord:
        label = None if self.labels is None else int(self.labels[i])
        return ImageRecord(self.images[i], label)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx])


# --- dataset sources -----------------------------------------------------------

def load_cifar_binary(path: str | os.PathLike, num_classes: int = 10) -> Dataset:
    """Parse CIFAR-10 style records: 1 label byte + R, G, B planes of 32x32 bytes."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise ValueError(f"{path}: truncated file of {raw.size} bytes; record {whole} "
                         f"at byte offset {whole * CIFAR_RECORD} is incomplete")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{path}: label {labels[i]} >= {num_classes} at byte offset {i * CIFAR_RECORD}")
    planes = recs[:, 1:].reshape(-1, 3, CIFAR_SIZE, CIFAR_SIZE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return Dataset(images, labels)


def load_cifar_dir(path: str | os.PathLike, num_classes: int = 10) -> tuple[Dataset, Dataset | None]:
    """Train split from every ``*.bin`` except ``test_batch.bin``, which is the test split."""
    names = sorted(n for n in os.listdir(path) if n.endswith(".bin"))
    train = [n for n in names if n != "test_batch.bin"]
    if not train:
        raise FileNotFoundError(f"no CIFAR .bin files in {path}")
    parts = [load_cifar_binary(os.path.join(path, n), num_classes) for n in train]
    ds = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    test = None
    if "test_batch.bin" in names:
        test = load_cifar_binary(os.path.join(path, "test_batch.bin"), num_classes)
    return ds, test


def stripe_profile(length: int, period: int) -> np.ndarray:
    t = np.arange(length)
    return 0.5 + 0.5 * np.cos(2 * np.pi * t / period)


def synth_dataset(n: int, size: int, rng: np.random.Generator, noise: float = 0.3,
                  channels: int = 3) -> Dataset:
    """Two balanced classes: horizontal stripes (label 0) and vertical stripes (label 1).

    Each image is a cosine stripe profile, bright at index 0, with a random
    integer period in [2, max(2, size // 4)], tinted by a random colour in
    [0.3, 1]^C, plus uniform noise in [-noise, noise], clipped to [0, 1].
    """
    if n < 2:
        raise ValueError("synthetic dataset needs n >= 2")
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2:] = 1
    labels = labels[rng.permutation(n)]
    periods = rng.integers(2, max(2, size // 4) + 1, size=n)
    tints = rng.uniform(0.3, 1.0, size=(n, channels))
    images = np.empty((n, size, size, channels), dtype=np.float64)
    for i in range(n):
        prof = stripe_profile(size, periods[i])
        plane = np.repeat(prof[:, None], size, axis=1) if labels[i] == 0 else np.repeat(prof[None, :], size, axis=0)
        images[i] = plane[..., None] * tints[i]
    if noise > 0:
        images += rng.uniform(-noise, noise, size=images.shape)
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels)


# --- image primitives --------------------------------------------------------------

def resample(img: np.ndarray, top: float, left: float, height: float, width: float, out: int) -> np.ndarray:
    """Bilinear resample of the box (top, left, height, width) onto an out x out grid."""
    H, W = img.shape[:2]
    if (top, left, height, width) == (0, 0, H, W) and H == W == out:
        return img.copy()
    ys = top + (np.arange(out) + 0.5) * height / out - 0.5
    xs = left + (np.arange(out) + 0.5) * width / out - 0.5
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top_row = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot_row = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def resize(img: np.ndarray, size: int) -> np.ndarray:
    H, W = img.shape[:2]
    return resample(img, 0, 0, H, W, size)


def random_resized_crop(img, rng, size: int, scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    H, W = img.shape[:2]
    area = H * W
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        w = math.sqrt(target * aspect)
        h = math.sqrt(target / aspect)
        if 0 < w <= W and 0 < h <= H:
            top = rng.uniform(0, H - h)
            left = rng.uniform(0, W - w)
            return resample(img, top, left, h, w, size)
    return resample(img, 0, 0, H, W, size)


def to_gray(img: np.ndarray) -> np.ndarray:
    if img.shape[2] != 3:
        return img.mean(axis=2, keepdims=True).repeat(img.shape[2], axis=2)
    g = img @ np.array([0.299, 0.587, 0.114])
    return np.repeat(g[..., None], 3, axis=2)


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def color_jitter(img, rng, brightness=0.4, contrast=0.4, saturation=0.2, hue=0.1) -> np.ndarray:
    img = np.clip(img * rng.uniform(1 - brightness, 1 + brightness), 0, 1)
    m = to_gray(img).mean()
    img = np.clip((img - m) * rng.uniform(1 - contrast, 1 + contrast) + m, 0, 1)
    if img.shape[2] == 3:
        g = to_gray(img)
        img = np.clip((img - g) * rng.uniform(1 - saturation, 1 + saturation) + g, 0, 1)
        theta = 2 * np.pi * rng.uniform(-hue, hue)
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
        img = np.clip(img @ (_YIQ_INV @ rot @ _YIQ).T, 0, 1)
    return img


def gaussian_blur(img, sigma: float, ksize: int) -> np.ndarray:
    r = ksize // 2
    t = np.arange(-r, r + 1)
    k = np.exp(-(t**2) / (2 * sigma**2))
    k /= k.sum()
    padded = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="reflect" if img.shape[0] > r else "edge")
    img = sum(k[i] * padded[i:i + img.shape[0]] for i in range(ksize))
    padded = np.pad(img, ((0, 0), (r, r), (0, 0)), mode="reflect" if img.shape[1] > r else "edge")
    return sum(k[i] * padded[:, i:i + img.shape[1]] for i in range(ksize))


def blur_kernel_size(image_size: int) -> int:
    k = math.ceil(image_size / 10)
    return k if k % 2 else k + 1


def solarize(img, threshold: float = 0.5) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img)


def hflip(img) -> np.ndarray:
    return img[:, ::-1].copy()


def affine(img, matrix: np.ndarray) -> np.ndarray:
    """Bilinear inverse-mapped affine warp about the image centre, zero fill."""
    H, W = img.shape[:2]
    cy, cx = (H - 1) / 2, (W - 1) / 2
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    src = np.linalg.inv(matrix) @ np.stack([yy.ravel(), xx.ravel(), np.ones(H * W)])
    sy, sx = src[0] + cy, src[1] + cx
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    out = np.zeros((H * W, img.shape[2]))
    for dy in (0, 1):
        for dx in (0, 1):
            yi, xi = y0 + dy, x0 + dx
            w = (1 - abs(sy - yi)) * (1 - abs(sx - xi))
            ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            out[ok] += w[ok, None] * img[yi[ok], xi[ok]]
    return out.reshape(img.shape)


def sharpness(img, factor: float) -> np.ndarray:
    k = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = img.shape[:2]
    smooth = sum(k[i, j] * p[i:i + H, j:j + W] for i in range(3) for j in range(3))
    return np.clip(smooth + factor * (img - smooth), 0, 1)


AUTOAUG_OPS = ("rotate", "translate", "contrast", "brightness", "sharpness")


def reduced_autoaugment(img, rng, max_rotate=30.0, max_translate=0.25, max_enhance=0.5) -> np.ndarray:
    """Apply one op drawn uniformly from rotate/translate/contrast/brightness/sharpness."""
    op = AUTOAUG_OPS[rng.integers(len(AUTOAUG_OPS))]
    if op == "rotate":
        a = math.radians(rng.uniform(-max_rotate, max_rotate))
        return affine(img, np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]]))
    if op == "translate":
        H, W = img.shape[:2]
        ty, tx = rng.uniform(-max_translate, max_translate, size=2) * (H, W)
        return affine(img, np.array([[1, 0, ty], [0, 1, tx], [0, 0, 1.0]]))
    factor = rng.uniform(1 - max_enhance, 1 + max_enhance)
    if op == "contrast":
        m = to_gray(img).mean()
        return np.clip((img - m) * factor + m, 0, 1)
    if op == "brightness":
        return np.clip(img * factor, 0, 1)
    return sharpness(img, factor)


def cutout(img, rng, side: int) -> np.ndarray:
    H, W = img.shape[:2]
    cy, cx = rng.integers(H), rng.integers(W)
    out = img.copy()
    out[max(0, cy - side // 2):min(H, cy - side // 2 + side), max(0, cx - side // 2):min(W, cx - side // 2 + side)] = 0
    return out


# --- policies ----------------------------------------------------------------------

@dataclass(frozen=True)
class AugOp:
    name: str
    prob: float
    args: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class AugPolicy:
    kind: str
    size: int
    ops: tuple[AugOp, ...]

    @property
    def op_names(self) -> tuple[str, ...]:
        return tuple(op.name for op in self.ops)

    def with_probs(self, **probs: float) -> "AugPolicy":
        ops = tuple(dataclasses.replace(op, prob=probs.get(op.name, op.prob)) for op in self.ops)
        return dataclasses.replace(self, ops=ops)

    def disabled(self) -> "AugPolicy":
        return self.with_probs(**{op.name: 0.0 for op in self.ops})


def make_policy(kind: str, size: int, *, crop_scale=None) -> AugPolicy:
    """Op lists in application order.

    The pretraining views follow the BYOL recipe; the weak view is the strong one
    without solarization.
    """
    blur = {"ksize": blur_kernel_size(size), "sigma_min": 0.1, "sigma_max": 2.0}
    jitter = {"brightness": 0.4, "contrast": 0.4, "saturation": 0.2, "hue": 0.1}
    if kind in (PRETRAIN_STRONG, PRETRAIN_WEAK):
        lo = 0.2 if crop_scale is None else crop_scale
        ops = [
            AugOp("crop", 1.0, {"scale_min": lo}),
            AugOp("color_jitter", 0.8, jitter),
            AugOp("grayscale", 0.2),
            AugOp("blur", 1.0, blur),
            AugOp("solarize", 0.2, {"threshold": 0.5}),
            AugOp("flip", 0.5),
        ]
        if kind == PRETRAIN_WEAK:
            ops = [op for op in ops if op.name != "solarize"]
    elif kind == FINETUNE:
        lo = 0.08 if crop_scale is None else crop_scale
        ops = [
            AugOp("crop", 1.0, {"scale_min": lo}),
            AugOp("autoaugment", 1.0),
            AugOp("cutout", 1.0, {"side": max(1, size // 4)}),
        ]
    elif kind == LINPROBE:
        lo = 0.08 if crop_scale is None else crop_scale
        ops = [AugOp("crop", 1.0, {"scale_min": lo}), AugOp("flip", 0.5)]
    else:
        raise ValueError(f"unknown augmentation policy {kind!r}; expected one of {POLICY_KINDS}")
    return AugPolicy(kind, size, tuple(ops))


def _apply(op: AugOp, img: np.ndarray, rng, size: int) -> np.ndarray:
    a = op.args
    if op.name == "crop":
        return random_resized_crop(img, rng, size, scale=(a.get("scale_min", 0.2), 1.0))
    if op.name == "color_jitter":
        return color_jitter(img, rng, **a)
    if op.name == "grayscale":
        return to_gray(img)
    if op.name == "blur":
        return gaussian_blur(img, rng.uniform(a["sigma_min"], a["sigma_max"]), int(a["ksize"]))
    if op.name == "solarize":
        return solarize(img, a.get("threshold", 0.5))
    if op.name == "flip":
        return hflip(img)
    if op.name == "autoaugment":
        return reduced_autoaugment(img, rng)
    if op.name == "cutout":
        return cutout(img, rng, int(a["side"]))
    raise ValueError(f"unknown augmentation op {op.name!r}")


def augment_pixels(pixels: np.ndarray, policy: AugPolicy, rng: np.random.Generator,
                   trace: list | None = None) -> np.ndarray:
    img = resize(np.asarray(pixels, dtype=np.float64), policy.size)
    for op in policy.ops:
        # one uniform draw per op keeps the stream layout independent of outcomes
        if rng.random() < op.prob:
            img = _apply(op, img, rng, policy.size)
            if trace is not None:
                trace.append(op.name)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(img: ImageRecord, policy: AugPolicy, rng: np.random.Generator, trace: list | None = None) -> ImageRecord:
    return ImageRecord(augment_pixels(img.pixels, policy, rng, trace), img.label)


def two_views(img: ImageRecord, rng: np.random.Generator, size: int | None = None,
              strong: AugPolicy | None = None, weak: AugPolicy | None = None) -> tuple[ImageRecord, ImageRecord]:
    size = size or img.pixels.shape[0]
    strong = strong or make_policy(PRETRAIN_STRONG, size)
    weak = weak or make_policy(PRETRAIN_WEAK, size)
    return augment(img, strong, rng), augment(img, weak, rng)


def augment_batch(images: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment_pixels(im, policy, rng) for im in images])


def eval_batch(images: np.ndarray, size: int) -> np.ndarray:
    if images.shape[1] == size:
        return images.astype(np.float32, copy=False)
    return np.stack([resize(im.astype(np.float64), size) for im in images]).astype(np.float32)
