import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attnvote import tensor as T
from attnvote.attention import ATTENTION_KINDS, REGISTRY, AttentionConfig, build_attention
from attnvote.tensor import Tensor

from conftest import grad_check, jitter_batchnorm

KINDS = sorted(REGISTRY)


# -- numpy reference pieces (eval mode, read straight from the parameters) -----------------

def np_linear(lin, x):
    y = x @ lin.weight.data.astype(np.float64)
    return y + lin.bias.data if lin.bias is not None else y


def np_mlp(mlp, x):
    for layer, norm, act in zip(mlp.layers, mlp.norms, mlp.spec.act):
        x = np_linear(layer, x)
        if norm is not None:
            rm, rv = norm._buffers["running_mean"], norm._buffers["running_var"]
            x = (x - rm) / np.sqrt(rv + norm.eps) * norm.gamma.data + norm.beta.data
        if act:
            x = np.maximum(x, 0)
    return x


def np_softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


def make(kind, c=8, r=2, k=3, seed=0, jitter=True):
    block = build_attention(kind, c, r, k, rng=seed)
    if jitter:
        jitter_batchnorm(block, seed)
        for name, p in block.named_parameters():
            if p.size == 1:
                p.data[...] = 0.7  # open the residual gates
    block.eval()
    return block


def run(block, x, coords=None):
    return block(Tensor(x), coords=coords if block.uses_coords else None).data


# -- shape contract and identity at init ------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("n", [1, 64])
@pytest.mark.parametrize("c,r", [(8, 2), (64, 8)])
def test_shape_preserved(kind, n, c, r):
    block = build_attention(kind, c, r, k=min(16, n), rng=0)
    rng = np.random.default_rng(n)
    x = rng.standard_normal((n, c)).astype(np.float32)
    assert block(Tensor(x), coords=rng.random((n, 3)) if block.uses_coords else None).shape == (n, c)
    block.eval()
    assert run(block, x, rng.random((n, 3))).shape == (n, c)


@pytest.mark.parametrize("kind", ["nonlocal", "crisscross", "dual", "caa"])
def test_identity_at_init(kind):
    block = build_attention(kind, 16, 2, rng=1)
    x = np.random.default_rng(0).standard_normal((1, 12, 16)).astype(np.float32)
    for mode in (True, False):
        block.train(mode)
        np.testing.assert_allclose(run(block, x), x, atol=1e-6)


def test_point_attention_identity_with_zero_values():
    block = build_attention("point_attn", 16, 2, rng=1)
    block.value.layers[0].weight.data[...] = 0
    x = np.random.default_rng(1).standard_normal((9, 16)).astype(np.float32)
    np.testing.assert_allclose(run(block, x), x, atol=1e-6)


def test_offset_attention_identity_with_zero_offset_branch():
    block = build_attention("offset_attn", 16, 2, rng=1)
    block.refine.zero_output()
    x = np.random.default_rng(2).standard_normal((9, 16)).astype(np.float32)
    np.testing.assert_allclose(run(block, x), x, atol=1e-6)


def _zero_all(block):
    for p in block.parameters():
        p.data[...] = 0


def test_se_zero_weights_halves_input():
    block = build_attention("se", 16, 2, rng=0)
    _zero_all(block)
    x = np.random.default_rng(3).standard_normal((7, 16)).astype(np.float32)
    np.testing.assert_allclose(run(block, x), 0.5 * x, rtol=1e-6)


def test_cbam_zero_weights_quarters_input():
    block = build_attention("cbam", 16, 2, rng=0)
    _zero_all(block)
    x = np.random.default_rng(4).standard_normal((7, 16)).astype(np.float32)
    for mode in (True, False):
        block.train(mode)
        np.testing.assert_allclose(run(block, x), 0.25 * x, rtol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(10, 8)
    with pytest.raises(ValueError):
        AttentionConfig(8, 0)
    with pytest.raises(ValueError):
        build_attention("transformer-xl", 8)
    assert build_attention("none", 8) is None
    assert set(ATTENTION_KINDS) == {"none", *REGISTRY}


@pytest.mark.parametrize("kind", KINDS)
def test_channel_mismatch(kind):
    block = build_attention(kind, 8, 2, k=1, rng=0)
    with pytest.raises(ValueError):
        block(Tensor(np.ones((4, 16))), coords=np.zeros((4, 3)))


def test_se_parameter_count():
    c, r = 64, 8
    # W1: C x C/r plus bias, W2: C/r x C plus bias
    assert build_attention("se", c, r).num_parameters() == 2 * c * c // r + c + c // r


# -- dense oracles ------------------------------------------------------------------

def test_nonlocal_oracle(f64):
    b = make("nonlocal")
    b.w_z.norms[0].gamma.data[...] = 1.3
    x = np.random.default_rng(5).standard_normal((4, 8))
    b.record_maps = True
    y = run(b, x)
    a = np_softmax(np_mlp(b.theta, x) @ np_mlp(b.phi, x).T)
    np.testing.assert_allclose(b.last_map[0], a, rtol=1e-10)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(y, x + np_mlp(b.w_z, a @ np_mlp(b.g, x)), rtol=1e-10, atol=1e-12)


def test_nonlocal_single_point(f64):
    b = make("nonlocal")
    x = np.random.default_rng(6).standard_normal((1, 8))
    np.testing.assert_allclose(run(b, x), x + np_mlp(b.w_z, np_mlp(b.g, x)), rtol=1e-10)


def test_crisscross_oracle(f64):
    b = make("crisscross")
    x = np.random.default_rng(7).standard_normal((4, 8))
    b.record_maps = True
    y = run(b, x)
    # width-1 criss-cross == full column attention
    a = np_softmax(np_mlp(b.query, x) @ np_mlp(b.key, x).T)
    assert np.all(b.last_map > 0)
    np.testing.assert_allclose(y, x + 0.7 * a @ np_mlp(b.value, x), rtol=1e-10, atol=1e-12)


def test_se_oracle(f64):
    b = make("se", c=16, r=2)
    x = np.random.default_rng(8).standard_normal((8, 16))
    y = run(b, x)
    e = sigmoid(np_linear(b.fc2, np.maximum(np_linear(b.fc1, x.mean(axis=0)), 0)))
    ratio = y / x
    np.testing.assert_allclose(ratio, np.broadcast_to(e, ratio.shape), rtol=1e-10)


def test_cbam_oracle(f64):
    b = make("cbam")
    x = np.random.default_rng(9).standard_normal((4, 8))
    b.record_maps = True
    y = run(b, x)
    mlp = lambda s: np_linear(b.fc2, np.maximum(np_linear(b.fc1, s), 0))
    mc = sigmoid(mlp(x.mean(axis=0)) + mlp(x.max(axis=0)))
    x1 = x * mc
    ms = sigmoid(np_mlp(b.spatial, np.stack([x1.mean(axis=1), x1.max(axis=1)], axis=1)))
    assert np.all((b.last_spatial > 0) & (b.last_spatial < 1))
    np.testing.assert_allclose(b.last_spatial[0], ms, rtol=1e-10)
    np.testing.assert_allclose(y, x1 * ms, rtol=1e-10)


def test_dual_oracle(f64):
    b = make("dual")
    b.alpha.data[...] = 0.4
    b.beta.data[...] = -0.3
    x = np.random.default_rng(10).standard_normal((4, 8))
    b.record_maps = True
    y = run(b, x)
    pos = np_softmax(np_mlp(b.query, x) @ np_mlp(b.key, x).T) @ np_mlp(b.value, x)
    ch_map = np_softmax(x.T @ x)
    assert b.last_channel_map.shape == (1, 8, 8)
    np.testing.assert_allclose(y, x + 0.4 * pos - 0.3 * (x @ ch_map.T), rtol=1e-10, atol=1e-12)


def test_dual_channel_map_shape_independent_of_n():
    b = build_attention("dual", 8, 2, rng=0)
    b.record_maps = True
    for n in (1, 5, 30):
        b(Tensor(np.ones((n, 8))))
        assert b.last_channel_map.shape == (1, 8, 8)


def test_ascn_oracle(f64):
    b = make("ascn")
    x = np.random.default_rng(11).standard_normal((4, 8))
    v = np_mlp(b.value, x)
    a = np_softmax(np_mlp(b.query, x) @ np_mlp(b.key, x).T)
    np.testing.assert_allclose(run(b, x), a @ v + v, rtol=1e-10, atol=1e-12)
    one = x[:1]
    np.testing.assert_allclose(run(b, one), 2 * np_mlp(b.value, one), rtol=1e-10)


def test_point_attention_oracle(f64):
    b = make("point_attn")
    x = np.random.default_rng(12).standard_normal((4, 8))
    b.record_maps = True
    y = run(b, x)
    np.testing.assert_allclose(b.last_map.sum(axis=-1), 1.0, atol=1e-6)
    a = np_softmax(np_mlp(b.query, x) @ np_mlp(b.key, x).T)
    np.testing.assert_allclose(y, x + a @ np_mlp(b.value, x), rtol=1e-10, atol=1e-12)


def test_caa_oracle(f64):
    b = make("caa", c=4, r=2)
    x = np.random.default_rng(13).standard_normal((8, 4))
    b.record_maps = True
    y = run(b, x)
    s = np_mlp(b.query, x).T @ np_mlp(b.key, x) / 8
    pre = s.max(axis=1, keepdims=True) - s
    r = np_softmax(pre)
    np.testing.assert_allclose(b.last_similarity[0], s, rtol=1e-10)
    np.testing.assert_allclose(b.last_map[0], r, rtol=1e-10)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(y, x + 0.7 * x @ r.T, rtol=1e-10, atol=1e-12)


def test_caa_affinity_diagonal_when_self_is_max():
    b = make("caa", c=4, r=2)
    b.record_maps = True
    x = np.random.default_rng(14).standard_normal((8, 4))
    run(b, x)
    s, r = b.last_similarity[0], b.last_map[0]
    for i in range(4):
        if s[i, i] == s[i].max():
            # rowmax - S_ii = 0 is the smallest pre-softmax score of the row
            assert r[i, i] == pytest.approx(r[i].min())


@pytest.mark.parametrize("dual_norm", [True, False])
def test_offset_attention_oracle(dual_norm, f64):
    block = build_attention("offset_attn", 8, 2, rng=0, dual_norm=dual_norm)
    jitter_batchnorm(block, 0)
    block.eval()
    block.record_maps = True
    x = np.random.default_rng(15).standard_normal((4, 8))
    y = run(block, x)
    att = np_softmax(np_mlp(block.query, x) @ np_mlp(block.key, x).T)
    if dual_norm:
        att = (att / (att.sum(axis=0, keepdims=True) + 1e-9)).T
    a = block.last_map[0]
    np.testing.assert_allclose(a, att, rtol=1e-10)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
    f = a @ np_mlp(block.value, x)
    np.testing.assert_allclose(y, x + np_mlp(block.refine, x - f), rtol=1e-10, atol=1e-12)


def test_offset_attention_single_point_closed_form(f64):
    block = make("offset_attn")
    x = np.random.default_rng(16).standard_normal((1, 8))
    # force V(x) == x: identity weights, BN at identity
    v = block.value
    v.layers[0].weight.data[...] = np.eye(8)
    v.norms[0].gamma.data[...] = 1
    v.norms[0].beta.data[...] = 0
    v.norms[0]._buffers["running_mean"][...] = 0
    v.norms[0]._buffers["running_var"][...] = 1 - v.norms[0].eps
    np.testing.assert_allclose(run(block, x), x + np_mlp(block.refine, np.zeros((1, 8))), rtol=1e-8, atol=1e-8)


def pt_oracle(b, x, p, k):
    """Naive per-point loop."""
    n, c = x.shape
    out = np.empty_like(x)
    for i in range(n):
        d = [(float(np.sum((p[j] - p[i]) ** 2)), j) for j in range(n)]
        nbrs = [j for _, j in sorted(d)[:k]]
        logits, vals = [], []
        for j in nbrs:
            delta = np_mlp(b.pos, (p[i] - p[j])[None])[0]
            logits.append(np_mlp(b.gamma, (np_linear(b.phi, x[i]) - np_linear(b.psi, x[j]) + delta)[None])[0])
            vals.append(np_linear(b.alpha, x[j]) + delta)
        w = np_softmax(np.array(logits), axis=0)
        out[i] = x[i] + (w * np.array(vals)).sum(axis=0)
    return out


def test_point_transformer_oracle(f64):
    b = make("point_transformer", c=4, r=2, k=3)
    rng = np.random.default_rng(17)
    x, p = rng.standard_normal((8, 4)), rng.random((8, 3))
    b.record_maps = True
    y = run(b, x, p)
    np.testing.assert_allclose(b.last_map.sum(axis=2), 1.0, atol=1e-6)
    np.testing.assert_allclose(y, pt_oracle(b, x, p, 3), rtol=1e-9, atol=1e-12)


def test_point_transformer_k1_is_self(f64):
    b = make("point_transformer", c=4, r=2, k=1)
    rng = np.random.default_rng(18)
    x, p = rng.standard_normal((5, 4)), rng.random((5, 3))
    b.record_maps = True
    y = run(b, x, p)
    np.testing.assert_array_equal(b.last_map, 1.0)
    delta = np_mlp(b.pos, np.zeros((1, 3)))
    np.testing.assert_allclose(y, x + np_linear(b.alpha, x) + delta, rtol=1e-10)


def test_point_transformer_errors():
    b = build_attention("point_transformer", 8, 2, k=4, rng=0)
    with pytest.raises(ValueError):
        b(Tensor(np.ones((3, 8))), coords=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        b(Tensor(np.ones((6, 8))))
    with pytest.raises(ValueError):
        b(Tensor(np.ones((6, 8))), coords=np.zeros((5, 3)))


# -- equivariance / invariance ---------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_permutation_equivariance(kind):
    b = make(kind, c=16, r=2, k=4, seed=3)
    rng = np.random.default_rng(19)
    x = rng.standard_normal((1, 40, 16)).astype(np.float32)
    p = rng.random((1, 40, 3)).astype(np.float32)
    perm = rng.permutation(40)
    y = run(b, x, p)
    yp = run(b, x[:, perm], p[:, perm])
    np.testing.assert_allclose(yp, y[:, perm], atol=1e-5)


@given(st.integers(0, 1000), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
def test_point_transformer_translation_invariance(seed, tx, ty, tz):
    with T.precision(np.float64):
        b = make("point_transformer", c=8, r=2, k=4, seed=seed % 5)
        rng = np.random.default_rng(seed)
        x, p = rng.standard_normal((1, 20, 8)), rng.random((1, 20, 3))
        y0 = run(b, x, p)
        y1 = run(b, x, p + np.array([tx, ty, tz]))
    np.testing.assert_allclose(y1, y0, atol=1e-5)


# -- gradients ------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_gradients(kind, mode, f64):
    b = make(kind, c=8, r=2, k=3, seed=4)
    b.train(mode == "train")
    rng = np.random.default_rng(20)
    x = Tensor(rng.standard_normal((1, 6, 8)), requires_grad=True)
    p = rng.random((1, 6, 3))
    buffers = {k: v.copy() for k, v in b.named_buffers()}

    def build():
        # train-mode BN updates running stats; restore them so every call sees the same module
        for k, v in b.named_buffers():
            v[...] = buffers[k]
        return b(x, coords=p if b.uses_coords else None)

    assert grad_check(build, [x, *b.parameters()]) < 1e-4


def test_softmax_maps_are_normalized():
    rng = np.random.default_rng(21)
    x = Tensor(rng.standard_normal((1, 30, 16)).astype(np.float32))
    for kind in ("nonlocal", "crisscross", "dual", "ascn", "point_attn", "caa"):
        b = make(kind, c=16, r=2)
        b.record_maps = True
        b(x)
        np.testing.assert_allclose(b.last_map.sum(axis=-1), 1.0, atol=1e-6)
