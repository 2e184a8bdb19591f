import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import PRECISION, composite_error
from macrl import model as M
from macrl import objectives as O
from macrl import tensor as T
from macrl.model import ConfigError, ModelConfig
from macrl.tensor import Tensor


def images(rng, cfg, batch=2, dtype=np.float64):
    return rng.random((batch, cfg.image_size, cfg.image_size, cfg.channels)).astype(dtype)


def params64(cfg, seed=0):
    return M.init_params(cfg, np.random.default_rng(seed), np.float64)


# --- config ------------------------------------------------------------------------------

def test_defaults():
    cfg = ModelConfig()
    assert (cfg.enc_dim, cfg.dec_dim, cfg.proj_dim) == (512, 256, 512)
    assert (cfg.enc_depth, cfg.enc_heads, cfg.dec_heads, cfg.patch_size) == (12, 4, 1, 4)
    assert cfg.freeze_patch_embed is False


@pytest.mark.parametrize("kw, match", [
    (dict(image_size=30), "patch_size"),
    (dict(enc_dim=30, enc_heads=4), "enc_heads"),
    (dict(dec_dim=30, dec_heads=4), "dec_heads"),
    (dict(enc_dim=18, enc_heads=3), "multiple of 4"),
    (dict(num_classes=0), "num_classes"),
])
def test_invalid_configs_rejected(kw, match):
    with pytest.raises(ConfigError, match=match):
        ModelConfig(**kw)


def test_param_shapes_cover_init(tiny_cfg):
    params = M.init_params(tiny_cfg, np.random.default_rng(0))
    assert {k: v.shape for k, v in params.items()} == M.param_shapes(tiny_cfg)
    assert {M.group_of(k) for k in params} == {"encoder", "decoder", "projector", "head"}
    assert all(v.dtype == np.float32 for v in params.values())


def test_freeze_patch_embed_flag(tiny_cfg):
    cfg = ModelConfig(**{**tiny_cfg.__dict__, "freeze_patch_embed": True})
    params = M.init_params(cfg, np.random.default_rng(0))
    assert not params["encoder.patch_w"].requires_grad
    assert not params["encoder.patch_b"].requires_grad
    assert params["encoder.blocks.0.attn.q_w"].requires_grad


def test_sincos_embedding():
    emb = M.sincos_pos_embed(32, 4)
    assert emb.shape == (16, 32)
    assert len({row.tobytes() for row in emb}) == 16
    # first position: sin terms 0, cos terms 1
    np.testing.assert_array_equal(emb[0], np.tile(np.r_[np.zeros(8), np.ones(8)], 2))


# --- patchify ---------------------------------------------------------------------------------

@pytest.mark.parametrize("size, p, tokens, dim", [(32, 4, 64, 48), (64, 8, 64, 192)])
def test_patchify_shapes(rng, size, p, tokens, dim):
    x = rng.random((size, size, 3))
    assert M.patchify(x, p).shape == (tokens, dim)


def test_patchify_row_major(rng):
    x = rng.random((8, 8, 3))
    tok = M.patchify(x, 4)
    np.testing.assert_array_equal(tok[0], x[:4, :4].reshape(-1))
    np.testing.assert_array_equal(tok[1], x[:4, 4:].reshape(-1))
    np.testing.assert_array_equal(tok[2], x[4:, :4].reshape(-1))


@given(grid=st.integers(1, 4), p=st.integers(1, 4), c=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_unpatchify_inverts_patchify(grid, p, c, seed):
    x = np.random.default_rng(seed).random((2, grid * p, grid * p, c))
    np.testing.assert_array_equal(M.unpatchify(M.patchify(x, p), p, c), x)


def test_patchify_tensor_matches_array(rng):
    x = rng.random((2, 8, 8, 3))
    np.testing.assert_array_equal(M.patchify(Tensor(x), 4).data, M.patchify(x, 4))


# --- masking -------------------------------------------------------------------------------------

def test_ratio_zero_keeps_everything(rng):
    tokens = Tensor(rng.standard_normal((2, 16, 3)))
    vis, plan = M.random_mask(tokens, 0.0, rng)
    assert vis.shape == (2, 16, 3) and plan.keep_count == 16
    assert not plan.mask.any()


def test_default_ratio_on_64_tokens(rng):
    vis, plan = M.random_mask(Tensor(rng.standard_normal((3, 64, 2))), 0.75, rng)
    assert vis.shape[1] == 16
    np.testing.assert_array_equal(plan.mask.sum(axis=1), 48)


@pytest.mark.parametrize("ratio, keep", [(0.0, 64), (0.5, 32), (0.75, 16), (0.8, 12)])
def test_keep_counts(ratio, keep):
    assert M.keep_count(64, ratio) == keep


@pytest.mark.parametrize("ratio", [1.0, 1.5, -0.1])
def test_bad_ratio_rejected(ratio):
    with pytest.raises(ValueError, match="mask ratio"):
        M.keep_count(16, ratio)


def test_ratio_leaving_no_token_rejected():
    with pytest.raises(ValueError, match="no visible token"):
        M.keep_count(4, 0.9)


def test_gather_round_trip(rng):
    tokens = Tensor(rng.standard_normal((4, 16, 5)))
    plan = M.plan_from_noise(rng.random((4, 16)), 0.5)
    back = T.gather_rows(T.gather_rows(tokens, plan.ids_shuffle), plan.ids_restore)
    np.testing.assert_array_equal(back.data, tokens.data)


def test_visible_tokens_are_the_unmasked_ones(rng):
    tokens = rng.standard_normal((2, 16, 3))
    vis, plan = M.random_mask(Tensor(tokens), 0.75, rng)
    for b in range(2):
        np.testing.assert_array_equal(vis.data[b], tokens[b, plan.ids_keep[b]])
        assert set(plan.ids_keep[b]) == set(np.flatnonzero(plan.mask[b] == 0))


@given(n=st.integers(1, 64), ratio=st.floats(0, 0.99), seed=st.integers(0, 2**32 - 1))
def test_mask_plan_invariants(n, ratio, seed):
    try:
        keep = M.keep_count(n, ratio)
    except ValueError:
        return
    plan = M.plan_from_noise(np.random.default_rng(seed).random((3, n)), ratio)
    ident = np.arange(n)
    np.testing.assert_array_equal(np.take_along_axis(plan.ids_shuffle, plan.ids_restore, 1), np.tile(ident, (3, 1)))
    np.testing.assert_array_equal(plan.mask.sum(axis=1), n - keep)
    assert plan.keep_count == keep


def test_masking_frequency_is_uniform():
    plan = M.plan_from_noise(np.random.default_rng(7).random((10_000, 16)), 0.75)
    freq = plan.mask.mean(axis=0)
    assert np.abs(freq - 0.75).max() <= 0.02


def test_same_seed_same_plan_and_output(tiny_cfg):
    params = params64(tiny_cfg)
    x = images(np.random.default_rng(3), tiny_cfg)
    a, pa = M.encode(params, tiny_cfg, x, 0.5, np.random.default_rng(11))
    b, pb = M.encode(params, tiny_cfg, x, 0.5, np.random.default_rng(11))
    np.testing.assert_array_equal(pa.ids_shuffle, pb.ids_shuffle)
    np.testing.assert_array_equal(a.data, b.data)


# --- encoder / decoder ------------------------------------------------------------------------

def test_unmasked_encode_keeps_all_tokens(tiny_cfg, rng):
    latent, plan = M.encode(params64(tiny_cfg), tiny_cfg, images(rng, tiny_cfg), 0.0)
    assert latent.shape == (2, tiny_cfg.num_patches, tiny_cfg.enc_dim)
    assert not plan.mask.any()


@pytest.mark.parametrize("ratio", [0.0, 0.5, 0.75, 0.8])
def test_latent_token_count(ratio, rng):
    cfg = ModelConfig(image_size=16, patch_size=2, enc_depth=1, enc_dim=16, dec_dim=8, proj_dim=8)
    latent, _ = M.encode(params64(cfg), cfg, images(rng, cfg), ratio, rng)
    assert latent.shape[1] == int(np.floor(64 * (1 - ratio) + 1e-9))


def test_full_scale_encoder_runs(rng):
    cfg = ModelConfig()
    params = M.init_params(cfg, rng)
    with T.no_grad():
        latent, _ = M.encode(params, cfg, images(rng, cfg, batch=1, dtype=np.float32), 0.75, rng)
    assert latent.shape == (1, 16, 512)
    assert sum(k.startswith("encoder.blocks.") and k.endswith("ln1_g") for k in params) == 12


def test_encode_rejects_wrong_image_size(tiny_cfg, rng):
    with pytest.raises(ConfigError):
        M.encode(params64(tiny_cfg), tiny_cfg, rng.random((1, 16, 16, 3)))


@pytest.mark.parametrize("ratio", [0.0, 0.5, 0.75])
def test_decoder_outputs_every_patch(tiny_cfg, rng, ratio):
    params = params64(tiny_cfg)
    latent, plan = M.encode(params, tiny_cfg, images(rng, tiny_cfg), ratio, rng)
    assert M.decode(params, tiny_cfg, latent, plan).shape == (2, tiny_cfg.num_patches, tiny_cfg.patch_dim)


def test_unmasked_decode_ignores_mask_token(tiny_cfg, rng):
    params = params64(tiny_cfg)
    latent, plan = M.encode(params, tiny_cfg, images(rng, tiny_cfg), 0.0)
    before = M.decode(params, tiny_cfg, latent, plan).data
    params["decoder.mask_token"].data[...] = 123.0
    np.testing.assert_array_equal(M.decode(params, tiny_cfg, latent, plan).data, before)


def test_decode_rejects_mismatched_plan(tiny_cfg, rng):
    params = params64(tiny_cfg)
    latent, _ = M.encode(params, tiny_cfg, images(rng, tiny_cfg), 0.5, rng)
    other = M.plan_from_noise(rng.random((2, tiny_cfg.num_patches)), 0.75)
    with pytest.raises(ValueError, match="does not match"):
        M.decode(params, tiny_cfg, latent, other)


def test_reconstruction_gradient_reaches_encoder(rng):
    # 16 patches, so several tokens stay visible and attention is not trivially 1
    cfg = ModelConfig(image_size=16, enc_depth=2, enc_dim=32, dec_dim=16, proj_dim=16)
    params = params64(cfg)
    x = images(rng, cfg)
    latent, plan = M.encode(params, cfg, x, 0.75, rng)
    loss = O.reconstruction_loss(M.decode(params, cfg, latent, plan), M.patchify(x, 4), plan)
    loss.backward()
    for k, v in params.items():
        if k.startswith("encoder."):
            assert v.grad is not None and np.linalg.norm(v.grad) > 0, k


# --- projector / classifier -------------------------------------------------------------------

def test_projection_is_unit_norm(tiny_cfg, rng):
    out = M.project(params64(tiny_cfg), Tensor(rng.standard_normal((4, 5, tiny_cfg.enc_dim))))
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-6)


def test_projection_ignores_token_order(tiny_cfg, rng):
    params = params64(tiny_cfg)
    z = rng.standard_normal((2, 7, tiny_cfg.enc_dim))
    a = M.project(params, Tensor(z)).data
    b = M.project(params, Tensor(z[:, rng.permutation(7)])).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_default_projection_dim():
    assert M.param_shapes(ModelConfig())["projector.fc2_w"] == (512, 512)


def test_zero_head_gives_uniform_prediction(tiny_cfg, rng):
    params = params64(tiny_cfg)
    params["head.fc_w"].data[...] = 0.0
    logits = M.classify(params, tiny_cfg, images(rng, tiny_cfg))
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_allclose(T.softmax(logits).data, 1 / 3)


def test_logit_shape(rng):
    cfg = ModelConfig(image_size=8, enc_depth=1, enc_dim=16, dec_dim=8, proj_dim=8, num_classes=10)
    assert M.classify(params64(cfg), cfg, images(rng, cfg, batch=5)).shape == (5, 10)


def test_frozen_backbone_gets_no_gradient(tiny_cfg, rng):
    params = params64(tiny_cfg)
    loss = O.cross_entropy(M.classify(params, tiny_cfg, images(rng, tiny_cfg), frozen_backbone=True),
                           np.array([0, 2]))
    loss.backward()
    for k, v in params.items():
        if M.group_of(k) == "head":
            assert np.abs(v.grad).sum() > 0
        else:
            assert v.grad is None or not v.grad.any(), k


@pytest.mark.parametrize("name", ["encoder", "decoder", "projector", "classifier"])
@pytest.mark.parametrize("dtype", [np.float64, np.float32], ids=["64bit", "32bit"])
def test_model_gradients(name, dtype):
    assert composite_error(name, dtype) < PRECISION[dtype][1]
