import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import PRECISION, composite_error
from macrl import nn
from macrl import tensor as T
from macrl.tensor import Tensor, grad_check


def block_params(dim, rng, depth=1, dtype=np.float64, prefix="b"):
    params = {}
    for i in range(depth):
        nn.init_block(params, rng, f"{prefix}.{i}", dim, dtype)
    return params


def zero_outputs(params):
    for k, v in params.items():
        if k.endswith((".attn.o_w", ".attn.o_b", ".mlp.fc2_w", ".mlp.fc2_b")):
            v.data[...] = 0.0


# --- layer norm ---------------------------------------------------------------------------

def test_layer_norm_constant_token_is_zero():
    x = Tensor(np.full((2, 8), 3.7))
    out = nn.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_standardises(rng):
    x = Tensor(rng.standard_normal((5, 16)) * 4 + 2)
    out = nn.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_input_gradient(rng):
    g, b = Tensor(rng.standard_normal(8)), Tensor(rng.standard_normal(8))
    w = Tensor(rng.standard_normal((4, 8)))
    err = grad_check(lambda t: (nn.layer_norm(t, g, b) * w).sum(), rng.standard_normal((4, 8)), eps=1e-4)
    assert err < 1e-6


# --- attention -----------------------------------------------------------------------------

def test_single_token_attention_is_value_then_output_projection(rng):
    params = block_params(8, rng)
    x = Tensor(rng.standard_normal((3, 1, 8)))
    sink = []
    out = nn.multi_head_self_attention(x, params, "b.0.attn", 2, sink)
    np.testing.assert_array_equal(sink[0], 1.0)
    expected = nn.linear(nn.linear(x, params, "b.0.attn.v"), params, "b.0.attn.o")
    np.testing.assert_allclose(out.data, expected.data, rtol=1e-12, atol=1e-15)


def test_attention_rows_sum_to_one(rng):
    params = block_params(16, rng)
    for k in params:
        if k.endswith("_w"):
            params[k].data[...] = rng.standard_normal(params[k].shape)
    sink = []
    nn.multi_head_self_attention(Tensor(rng.standard_normal((2, 8, 16))), params, "b.0.attn", 4, sink)
    assert sink[0].shape == (2, 4, 8, 8)
    np.testing.assert_allclose(sink[0].sum(axis=-1), 1.0, atol=1e-6)


def test_heads_must_divide_dim(rng):
    params = block_params(6, rng)
    with pytest.raises(ValueError, match="divisible"):
        nn.multi_head_self_attention(Tensor(np.zeros((1, 2, 6))), params, "b.0.attn", 4)


# --- transformer block ------------------------------------------------------------------------

def test_zeroed_block_is_identity(rng):
    params = block_params(16, rng)
    zero_outputs(params)
    x = Tensor(rng.standard_normal((2, 5, 16)))
    out = nn.transformer_block(x, params, "b.0", 4)
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("tokens, dim", [(1, 4), (3, 8), (7, 16)])
def test_block_preserves_shape(rng, tokens, dim):
    params = block_params(dim, rng)
    out = nn.transformer_block(Tensor(rng.standard_normal((2, tokens, dim))), params, "b.0", 2)
    assert out.shape == (2, tokens, dim)


def test_block_shapes_match_init(rng):
    params = block_params(12, rng)
    assert {k: v.shape for k, v in params.items()} == nn.block_shapes("b.0", 12)


def test_init_statistics():
    w = nn.trunc_normal(np.random.default_rng(0), (200, 200))
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert w.std() == pytest.approx(0.02 * 0.88, rel=0.05)  # std of a normal truncated at two sigma


@pytest.mark.parametrize("name", ["layer_norm", "attention", "transformer_block"])
@pytest.mark.parametrize("dtype", [np.float64, np.float32], ids=["64bit", "32bit"])
def test_block_gradients(name, dtype):
    assert composite_error(name, dtype) < PRECISION[dtype][1]


# --- properties ------------------------------------------------------------------------------------

@given(depth=st.integers(1, 6), tokens=st.integers(1, 6), seed=st.integers(0, 2**16))
def test_zeroed_stack_is_identity(depth, tokens, seed):
    rng = np.random.default_rng(seed)
    params = block_params(8, rng, depth)
    zero_outputs(params)
    x = Tensor(rng.standard_normal((1, tokens, 8)))
    h = x
    for i in range(depth):
        h = nn.transformer_block(h, params, f"b.{i}", 2)
    np.testing.assert_array_equal(h.data, x.data)


@given(tokens=st.integers(2, 8), seed=st.integers(0, 2**16))
def test_block_is_permutation_equivariant(tokens, seed):
    rng = np.random.default_rng(seed)
    params = block_params(8, rng)
    for k in params:
        if k.endswith("_w"):
            params[k].data[...] = 0.3 * rng.standard_normal(params[k].shape)
    x = rng.standard_normal((1, tokens, 8))
    perm = rng.permutation(tokens)
    out = nn.transformer_block(Tensor(x), params, "b.0", 2).data
    out_perm = nn.transformer_block(Tensor(x[:, perm]), params, "b.0", 2).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-12)


def test_feed_forward_hidden_ratio(rng):
    params = block_params(8, rng)
    assert params["b.0.mlp.fc1_w"].shape == (8, nn.MLP_RATIO * 8)
    with T.no_grad():
        out = nn.feed_forward(Tensor(np.zeros((1, 8))), params, "b.0.mlp")
    np.testing.assert_array_equal(out.data, 0.0)
