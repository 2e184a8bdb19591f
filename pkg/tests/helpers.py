"""Finite-difference helpers shared by the unit and acceptance suites."""

import numpy as np

from macrl import model as M
from macrl.tensor import Tensor, backward, no_grad


def model_leaves(cfg, seed, dtype, scale=1.0):
    """Parameter arrays of a fresh model, with weights scaled up so signals are not tiny."""
    params = M.init_params(cfg, np.random.default_rng(seed), dtype)
    out = {}
    for k, v in params.items():
        a = v.data.copy()
        if k.endswith("_w") or k.endswith("mask_token"):
            a *= scale
        out[k] = a
    return out


def subset(leaves: dict, prefixes) -> dict:
    return {k: v for k, v in leaves.items() if k.startswith(tuple(prefixes))}


def _unit_dirs(leaves, rng, dtype):
    raw = {k: rng.standard_normal(v.shape) for k, v in leaves.items()}
    norm = np.sqrt(sum(float((a * a).sum()) for a in raw.values()))
    return {k: Tensor((a / norm).astype(dtype)) for k, a in raw.items()}


def directional_error(loss_fn, leaves: dict, rng, eps: float, directions: int = 2) -> float:
    """Worst error of the analytic directional derivative of ``loss_fn`` at ``leaves``.

    Each direction is a random unit vector over all leaves jointly (parameters
    and inputs alike). The reference is the fourth-order central difference
    (8[f(h) - f(-h)] - [f(2h) - f(-2h)]) / 12h, which tolerates the larger steps
    that 32-bit rounding needs. Error is |analytic - fd| / max(1, |fd|).
    """
    worst = 0.0
    dtype = next(iter(leaves.values())).dtype
    base = {k: Tensor(v) for k, v in leaves.items()}
    for _ in range(directions):
        dirs = _unit_dirs(leaves, rng, dtype)
        s = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        backward(loss_fn({k: base[k] + dirs[k] * s for k in base}))
        analytic = float(s.grad)
        with no_grad():
            def at(h):
                step = Tensor(np.asarray(h, dtype=dtype))
                return loss_fn({k: base[k] + dirs[k] * step for k in base}).item()
            fd = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
        worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


# --- composite instances --------------------------------------------------------------
# each builder: (rng, dtype) -> (loss_fn over a dict of leaf tensors, leaf arrays)

from macrl import nn, objectives as O, tensor as T  # noqa: E402

TINY = M.ModelConfig(image_size=8, patch_size=4, channels=3, enc_depth=2, enc_heads=4, enc_dim=32,
                     dec_dim=16, dec_heads=1, proj_dim=16, num_classes=3)


def _readout(rng, shape, dtype):
    return Tensor(rng.standard_normal(shape).astype(dtype))


def _block_leaves(rng, dim, dtype, prefix="blk", n=1):
    params = {}
    for i in range(n):
        nn.init_block(params, rng, f"{prefix}.{i}", dim, dtype)
    out = {}
    for k, v in params.items():
        a = v.data.copy()
        if k.endswith("_w"):
            a = (rng.standard_normal(a.shape) * 0.3).astype(dtype)
        elif k.endswith("_b") or k.endswith("_g"):
            a = (a + 0.1 * rng.standard_normal(a.shape)).astype(dtype)
        out[k] = a
    return out


def case_layer_norm(rng, dtype):
    leaves = {"x": rng.standard_normal((4, 8)).astype(dtype),
              "g": (1 + 0.1 * rng.standard_normal(8)).astype(dtype),
              "b": (0.1 * rng.standard_normal(8)).astype(dtype)}
    w = _readout(rng, (4, 8), dtype)
    return (lambda t: (nn.layer_norm(t["x"], t["g"], t["b"]) * w).sum()), leaves


def case_attention(rng, dtype):
    leaves = _block_leaves(rng, 16, dtype)
    leaves = {k: v for k, v in leaves.items() if ".attn." in k}
    leaves["x"] = rng.standard_normal((1, 8, 16)).astype(dtype)
    w = _readout(rng, (1, 8, 16), dtype)
    return (lambda t: (nn.multi_head_self_attention(t["x"], t, "blk.0.attn", 4) * w).sum()), leaves


def case_transformer_block(rng, dtype):
    leaves = _block_leaves(rng, 16, dtype, n=2)
    leaves["x"] = rng.standard_normal((1, 8, 16)).astype(dtype)
    w = _readout(rng, (1, 8, 16), dtype)

    def f(t):
        h = nn.transformer_block(t["x"], t, "blk.0", 4)
        return (nn.transformer_block(h, t, "blk.1", 4) * w).sum()
    return f, leaves


def _images(rng, dtype, batch=2):
    return rng.random((batch, TINY.image_size, TINY.image_size, TINY.channels)).astype(dtype)


def _plan(rng, batch=2, ratio=0.5):
    return M.plan_from_noise(rng.random((batch, TINY.num_patches)), ratio)


def case_encoder(rng, dtype):
    leaves = subset(model_leaves(TINY, int(rng.integers(1 << 30)), dtype, 10.0), ["encoder."])
    leaves["x"] = _images(rng, dtype)
    plan = _plan(rng)
    w = _readout(rng, (2, plan.keep_count, TINY.enc_dim), dtype)
    return (lambda t: (M.encode(t, TINY, t["x"], plan=plan)[0] * w).sum()), leaves


def case_decoder(rng, dtype):
    leaves = subset(model_leaves(TINY, int(rng.integers(1 << 30)), dtype, 10.0), ["decoder."])
    plan = _plan(rng)
    leaves["z"] = rng.standard_normal((2, plan.keep_count, TINY.enc_dim)).astype(dtype)
    w = _readout(rng, (2, TINY.num_patches, TINY.patch_dim), dtype)
    return (lambda t: (M.decode(t, TINY, t["z"], plan) * w).sum()), leaves


def case_projector(rng, dtype):
    leaves = subset(model_leaves(TINY, int(rng.integers(1 << 30)), dtype, 10.0), ["projector."])
    leaves["z"] = rng.standard_normal((2, 3, TINY.enc_dim)).astype(dtype)
    w = _readout(rng, (2, TINY.proj_dim), dtype)
    return (lambda t: (M.project(t, t["z"]) * w).sum()), leaves


def case_classifier(rng, dtype):
    leaves = subset(model_leaves(TINY, int(rng.integers(1 << 30)), dtype, 10.0), ["encoder.", "head."])
    leaves["x"] = _images(rng, dtype)
    labels = rng.integers(0, TINY.num_classes, size=2)
    return (lambda t: O.cross_entropy(M.classify(t, TINY, t["x"]), labels)), leaves


def case_info_nce(rng, dtype):
    K, dim = int(rng.integers(4, 33)), 8
    leaves = {"q": rng.standard_normal((3, dim)).astype(dtype)}
    k_pos = rng.standard_normal((3, dim))
    k_pos /= np.linalg.norm(k_pos, axis=1, keepdims=True)
    bank = O.MemoryBank.random(K, dim, rng, dtype)
    tau = float(rng.choice([0.2, 0.5, 1.0]))
    return (lambda t: O.info_nce(T.l2_normalize(t["q"]), k_pos.astype(dtype), bank, tau)), leaves


def case_reconstruction(rng, dtype):
    shape = (2, TINY.num_patches, TINY.patch_dim)
    base = rng.standard_normal(shape)
    offset = rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)  # keep clear of the |.| kink
    plan = _plan(rng)
    mode = ["visible", "masked", "all"][int(rng.integers(3))]
    target = (base + offset).astype(dtype)
    return (lambda t: O.reconstruction_loss(t["pred"], target, plan, mode)), {"pred": base.astype(dtype)}


COMPOSITES = {
    "layer_norm": case_layer_norm,
    "attention": case_attention,
    "transformer_block": case_transformer_block,
    "encoder": case_encoder,
    "decoder": case_decoder,
    "projector": case_projector,
    "classifier": case_classifier,
    "info_nce": case_info_nce,
    "reconstruction_loss": case_reconstruction,
}

# (eps, tolerance) per precision
PRECISION = {np.float64: (1e-3, 1e-6), np.float32: (1e-1, 1e-3)}


def composite_error(name, dtype, instances=20, seed=0):
    """Worst directional finite-difference error of a composite over random instances."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    eps = PRECISION[dtype][0]
    worst = 0.0
    for _ in range(instances):
        f, leaves = COMPOSITES[name](rng, dtype)
        worst = max(worst, directional_error(f, leaves, rng, eps))
    return worst
