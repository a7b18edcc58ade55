import numpy as np
import pytest

from luna.attention import luna_attend, luna_causal
from luna.errors import ConfigError
from luna.layers import (
    FFNParams,
    LunaDecoderLayerParams,
    LunaLayerParams,
    TransformerLayerParams,
    ffn,
    luna_decoder_layer,
    luna_encoder_layer,
    pool,
    transformer_layer,
)
from luna.numerics import functional as F
from luna.numerics.tensor import Tensor

from conftest import attend_np, layer_norm_np, luna_causal_prefix_np, rand


def ffn_np(x, f):
    return np.maximum(x @ f.w1.data + f.b1.data, 0) @ f.w2.data + f.b2.data


def ln_np(x, ln):
    return layer_norm_np(x, ln.gamma.data, ln.beta.data)


def _jitter(params, rng):
    """Non-trivial LN affine parameters and biases so oracles exercise them."""
    for name, t in params.named("x").items():
        if name.endswith(("gamma", "beta", "b1", "b2")):
            t.data[:] = t.data + 0.3 * rng.standard_normal(t.shape)


# -- ffn --------------------------------------------------------------------------

def test_ffn_zero_weights():
    f = FFNParams.init(4, 8, 0, "f")
    for t in (f.w1, f.b1, f.w2, f.b2):
        t.data[:] = 0
    assert np.array_equal(ffn(Tensor(np.ones((3, 4))), f).data, np.zeros((3, 4)))


def test_ffn_oracle_and_permutation(rng):
    f = FFNParams.init(4, 8, 3, "f")
    f.b1.data[:] = rng.standard_normal(8)
    x = rng.standard_normal((2, 4))
    np.testing.assert_allclose(ffn(Tensor(x), f).data, ffn_np(x, f), rtol=0, atol=1e-12)
    x = rng.standard_normal((6, 4))
    perm = rng.permutation(6)
    assert np.array_equal(ffn(Tensor(x[perm]), f).data, ffn(Tensor(x), f).data[perm])


def test_ffn_hidden_must_not_shrink():
    with pytest.raises(ConfigError):
        FFNParams.init(8, 4, 0, "f")


# -- encoder layer ------------------------------------------------------------------

def encoder_np(X, P, prm, keep=None):
    h = prm.pack.heads
    Y_P = attend_np(P, X, prm.pack.wq.data, prm.pack.wk.data, prm.pack.wv.data, h, keep)
    Y_X = attend_np(X, Y_P, prm.unpack.wq.data, prm.unpack.wk.data, prm.unpack.wv.data, h)
    X_A = ln_np(Y_X + X, prm.ln_x)
    P_A = ln_np(Y_P + P, prm.ln_p)
    return ln_np(ffn_np(X_A, prm.ffn) + X_A, prm.ln_ffn), P_A


@pytest.mark.parametrize("n,l,d,h", [(5, 2, 4, 1), (9, 3, 8, 2), (1, 1, 4, 2)])
def test_encoder_layer_shapes(rng, n, l, d, h):
    prm = LunaLayerParams.init(d, 2 * d, h, "none", 0, "e")
    xo, po = luna_encoder_layer(rand(rng, n, d), rand(rng, l, d), prm)
    assert xo.shape == (n, d) and po.shape == (l, d)


def test_encoder_layer_compositional_oracle(rng):
    prm = LunaLayerParams.init(4, 8, 1, "none", 5, "e")
    _jitter(prm, rng)
    X, P = rng.standard_normal((5, 4)), rng.standard_normal((2, 4))
    xo, po = luna_encoder_layer(Tensor(X), Tensor(P), prm)
    xr, pr = encoder_np(X, P, prm)
    np.testing.assert_allclose(xo.data, xr, rtol=0, atol=1e-12)
    np.testing.assert_allclose(po.data, pr, rtol=0, atol=1e-12)


def test_encoder_layer_masked_multihead_oracle(rng):
    prm = LunaLayerParams.init(8, 16, 2, "none", 6, "e")
    _jitter(prm, rng)
    X, P = rng.standard_normal((6, 8)), rng.standard_normal((3, 8))
    keep = np.array([1, 1, 1, 1, 0, 0], bool)
    xo, po = luna_encoder_layer(Tensor(X), Tensor(P), prm, keep)
    xr, pr = encoder_np(X, P, prm, keep)
    np.testing.assert_allclose(xo.data, xr, atol=1e-12)
    np.testing.assert_allclose(po.data, pr, atol=1e-12)


def test_encoder_p_path_ignores_ffn(rng):
    prm = LunaLayerParams.init(4, 8, 2, "none", 1, "e")
    X, P = rand(rng, 5, 4), rand(rng, 2, 4)
    _, p1 = luna_encoder_layer(X, P, prm)
    for t in (prm.ffn.w1, prm.ffn.w2, prm.ffn.b1, prm.ffn.b2):
        t.data[:] = rng.standard_normal(t.shape)
    x2, p2 = luna_encoder_layer(X, P, prm)
    assert np.array_equal(p1.data, p2.data)


def test_encoder_deterministic_without_dropout(rng):
    prm = LunaLayerParams.init(8, 16, 2, "none", 1, "e")
    X, P = rand(rng, 7, 8), rand(rng, 3, 8)
    a, b = luna_encoder_layer(X, P, prm), luna_encoder_layer(X, P, prm)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_transformer_layer_oracle(rng):
    prm = TransformerLayerParams.init(4, 8, 2, "none", 2, "t")
    X = rng.standard_normal((5, 4))
    a = attend_np(X, X, prm.attn.wq.data, prm.attn.wk.data, prm.attn.wv.data, 2)
    X_A = ln_np(a + X, prm.ln_attn)
    expected = ln_np(ffn_np(X_A, prm.ffn) + X_A, prm.ln_ffn)
    np.testing.assert_allclose(transformer_layer(Tensor(X), Tensor(X), prm).data, expected, atol=1e-12)


# -- decoder layer ------------------------------------------------------------------

def decoder_np(X, P, M, prm, kind="softplus", mem_keep=None):
    sa = prm.self_attn
    X1 = ln_np(luna_causal_prefix_np(X, P, sa.wq.data, sa.wk.data, sa.wv.data, sa.heads, kind) + X,
               prm.ln_self)
    P_out = P
    if M is not None:
        cr = prm.cross
        h = cr.pack.heads
        Y_P = attend_np(P, M, cr.pack.wq.data, cr.pack.wk.data, cr.pack.wv.data, h, mem_keep)
        Y_X = attend_np(X1, Y_P, cr.unpack.wq.data, cr.unpack.wk.data, cr.unpack.wv.data, h)
        X1 = ln_np(Y_X + X1, cr.ln_x)
        P_out = ln_np(Y_P + P, cr.ln_p)
    return ln_np(ffn_np(X1, prm.ffn) + X1, prm.ln_ffn), P_out


def test_decoder_only_oracle_and_p_passthrough(rng):
    prm = LunaDecoderLayerParams.init(4, 8, 2, "none", 3, "d", 2, cross=False)
    _jitter(prm, rng)
    X = rng.standard_normal((6, 4))
    xo, po = luna_decoder_layer(Tensor(X), prm.p, None, prm)
    assert po is prm.p
    np.testing.assert_allclose(xo.data, decoder_np(X, prm.p.data, None, prm)[0], rtol=0, atol=1e-10)


def test_decoder_single_row(rng):
    prm = LunaDecoderLayerParams.init(4, 8, 1, "none", 3, "d", 3, cross=False)
    X = rng.standard_normal((1, 4))
    xo, _ = luna_decoder_layer(Tensor(X), prm.p, None, prm, "elu1")
    y = luna_causal(Tensor(X), prm.p, prm.self_attn, "elu1").data
    X1 = ln_np(y + X, prm.ln_self)
    np.testing.assert_allclose(xo.data, ln_np(ffn_np(X1, prm.ffn) + X1, prm.ln_ffn), atol=1e-12)


def test_encoder_decoder_oracle(rng):
    prm = LunaDecoderLayerParams.init(8, 16, 2, "none", 4, "d", 3, cross=True)
    _jitter(prm, rng)
    X, P, M = rng.standard_normal((5, 8)), rng.standard_normal((3, 8)), rng.standard_normal((7, 8))
    keep = np.array([1, 1, 1, 1, 1, 0, 0], bool)
    xo, po = luna_decoder_layer(Tensor(X), Tensor(P), Tensor(M), prm, "softplus", keep)
    xr, pr = decoder_np(X, P, M, prm, "softplus", keep)
    np.testing.assert_allclose(xo.data, xr, rtol=0, atol=1e-10)
    np.testing.assert_allclose(po.data, pr, rtol=0, atol=1e-10)


def test_decoder_causality_bit_exact(rng):
    for cross in (False, True):
        prm = LunaDecoderLayerParams.init(8, 16, 2, "none", 5, "d", 3, cross=cross)
        P = prm.p if not cross else rand(rng, 3, 8)
        M = rand(rng, 4, 8) if cross else None
        X = rng.standard_normal((9, 8))
        base = luna_decoder_layer(Tensor(X), P, M, prm)[0].data
        X[6] += 1.0
        pert = luna_decoder_layer(Tensor(X), P, M, prm)[0].data
        assert np.array_equal(base[:6], pert[:6])
        assert not np.allclose(base[6:], pert[6:])


def test_decoder_mode_mismatch(rng):
    only = LunaDecoderLayerParams.init(4, 8, 1, "none", 0, "d", 2, cross=False)
    with pytest.raises(ConfigError):
        luna_decoder_layer(rand(rng, 3, 4), only.p, rand(rng, 2, 4), only)
    both = LunaDecoderLayerParams.init(4, 8, 1, "none", 0, "d", 2, cross=True)
    with pytest.raises(ConfigError):
        luna_decoder_layer(rand(rng, 3, 4), rand(rng, 2, 4), None, both)


def test_cross_attention_updates_p(rng):
    prm = LunaDecoderLayerParams.init(4, 8, 1, "none", 0, "d", 2, cross=True)
    P = rand(rng, 2, 4)
    _, po = luna_decoder_layer(rand(rng, 3, 4), P, rand(rng, 5, 4), prm)
    Y_P = luna_attend(rand(rng, 3, 4), P, rand(rng, 5, 4), prm.cross.pack, prm.cross.unpack)[1]
    assert po.shape == Y_P.shape and not np.allclose(po.data, P.data)


# -- pooling --------------------------------------------------------------------------

def test_pool_modes(rng):
    P = Tensor(np.array([[1.0, 3.0], [3.0, 5.0]]))
    assert pool(rand(rng, 4, 2), P, "p_mean").data.tolist() == [2.0, 4.0]
    one = rand(rng, 1, 2)
    assert np.array_equal(pool(rand(rng, 4, 2), one, "p_mean").data, one.data[0])
    H = rng.standard_normal((5, 2))
    a = pool(Tensor(H), P, "cls").data
    H[1:] += 10
    assert np.array_equal(a, pool(Tensor(H), P, "cls").data) and np.array_equal(a, H[0])
    with pytest.raises(ConfigError):
        pool(Tensor(H), P, "max")


def test_pool_gradient_flows(rng):
    P = rand(rng, 3, 4, requires_grad=True)
    F.sum(pool(rand(rng, 2, 4), P, "p_mean")).backward()
    np.testing.assert_allclose(P.grad, np.full((3, 4), 1 / 3))
