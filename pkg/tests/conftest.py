import numpy as np
import pytest

from luna.attention import AttentionParams
from luna.numerics.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def rand(rng, *shape, requires_grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


def random_params(rng, d, heads=1, tying="none"):
    return AttentionParams.init(d, heads, tying, int(rng.integers(1 << 30)))


def softmax_np(a):
    e = np.exp(a - a.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def layer_norm_np(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def attend_np(X, C, wq, wk, wv, heads=1, keep=None):
    """Explicit per-head loop: project, exp-normalize, weighted sum."""
    d = X.shape[-1]
    dh = d // heads
    Q, K, V = X @ wq, C @ wk, C @ wv
    out = np.zeros((X.shape[0], d))
    for j in range(heads):
        s = slice(j * dh, (j + 1) * dh)
        logits = Q[:, s] @ K[:, s].T / np.sqrt(dh)
        if keep is not None:
            logits = np.where(keep[None, :], logits, -np.inf)
        out[:, s] = softmax_np(logits) @ V[:, s]
    return out


def causal_f_np(X, Y, Z):
    """Brute-force double loop over t and j <= t."""
    n = X.shape[0]
    out = np.zeros((n, Z.shape[1]))
    for t in range(n):
        acc = np.zeros((X.shape[1], Z.shape[1]))
        for j in range(t + 1):
            acc += np.outer(Y[j], Z[j])
        out[t] = X[t] @ acc / (t + 1)
    return out


def omega_np(kind, a):
    if kind == "elu1":
        return np.where(a > 0, a + 1, np.exp(np.minimum(a, 0)))
    return np.logaddexp(0, a)


def luna_causal_prefix_np(X, P, wq, wk, wv, heads, kind):
    """For every t, run the three causal stages from scratch on X[:t+1]; keep row t."""
    n, d = X.shape
    dh = d // heads
    out = np.zeros((n, d))
    for t in range(n):
        Xt = X[: t + 1]
        Q, K, V, Pq = Xt @ wq, Xt @ wk, Xt @ wv, P @ wq
        for j in range(heads):
            s = slice(j * dh, (j + 1) * dh)
            a_pack_t = omega_np(kind, K[:, s] @ Pq[:, s].T / np.sqrt(dh))  # (t+1, l)
            a_unpack = softmax_np(causal_f_np(Q[:, s], K[:, s], a_pack_t))
            out[t, s] = causal_f_np(a_unpack, a_pack_t, V[:, s])[t]
    return out
