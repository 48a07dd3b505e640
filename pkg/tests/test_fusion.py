import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgpkad.fusion import FusionAttention, fuse, softmax
from mgpkad.numcore import DimensionError, Param, StateError, gradcheck
from mgpkad.prior import PrototypeLibrary


def setup(seed=0, c=3, per=5, b=4, heads=4, alpha=math.e, d_img=6, d_p=8, d_model=8, d_geo=5):
    rng = np.random.default_rng(seed)
    att = FusionAttention(d_img, c, d_p, d_model, d_geo, heads, alpha, rng)
    f_img = rng.normal(size=(b, d_img))
    cats = rng.integers(0, c, size=b)
    tokens = rng.normal(size=(c * per, d_p))
    tcat = np.repeat(np.arange(c), per)
    return att, f_img, cats, tokens, tcat, rng


def reference(att, f_img, cats, tokens, tcat):
    """Loop-over-heads oracle written directly from the attention formula."""
    m, dh = att.heads, att.d_model // att.heads
    q_in = np.concatenate([f_img, np.eye(att.n_categories)[cats]], axis=1)
    Q, K, V = q_in @ att.w_q.value.T, tokens @ att.w_k.value.T, tokens @ att.w_v.value.T
    out = np.zeros((len(f_img), att.d_model))
    for h in range(m):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(len(f_img)):
            logits = Q[i, sl] @ K[:, sl].T / math.sqrt(dh)
            match = tcat == cats[i]
            if math.isinf(att.alpha):
                logits = np.where(match, logits, -np.inf)
            else:
                logits = logits + np.where(match, math.log(att.alpha), 0.0)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, sl] = w @ V[:, sl]
    return out @ att.w_o.value.T


@pytest.mark.parametrize("alpha", [1.0, math.e, 10.0, math.inf])
def test_matches_loop_oracle(alpha):
    att, f_img, cats, tokens, tcat, _ = setup(alpha=alpha)
    np.testing.assert_allclose(att.forward(f_img, cats, tokens, tcat), reference(att, f_img, cats, tokens, tcat),
                               atol=1e-12)


@given(st.integers(0, 2**31), st.sampled_from([1, 2, 4]), st.floats(0.1, 100.0))
def test_weights_sum_to_one(seed, heads, alpha):
    att, f_img, cats, tokens, tcat, _ = setup(seed, heads=heads, alpha=alpha)
    att.forward(f_img, cats, tokens, tcat)
    w = att.last_weights
    assert w.shape == (4, heads, 15)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)


def test_single_token_returns_projected_value():
    att, f_img, _, tokens, _, _ = setup(c=1, per=1)
    out = att.forward(f_img, np.zeros(4, dtype=int), tokens[:1], [0])
    expected = (tokens[:1] @ att.w_v.value.T) @ att.w_o.value.T
    np.testing.assert_allclose(out, np.repeat(expected, 4, axis=0), atol=1e-15)


@given(st.integers(0, 2**31))
def test_token_permutation_invariance(seed):
    att, f_img, cats, tokens, tcat, rng = setup(seed)
    perm = rng.permutation(len(tokens))
    a = att.forward(f_img, cats, tokens, tcat)
    b = att.forward(f_img, cats, tokens[perm], tcat[perm])
    assert np.max(np.abs(a - b)) <= 1e-12


def test_large_alpha_approaches_matched_only():
    att, f_img, cats, tokens, tcat, _ = setup(alpha=1e12)
    hard = FusionAttention(6, 3, 8, 8, 5, 4, math.inf)
    for (_, p), (_, q) in zip(hard.named_params(), att.named_params()):
        p.value[...] = q.value
    soft_out = att.forward(f_img, cats, tokens, tcat)
    hard_out = hard.forward(f_img, cats, tokens, tcat)
    np.testing.assert_allclose(soft_out, hard_out, atol=1e-6)
    # unmatched tokens get exactly zero weight when alpha is infinite
    unmatched = cats[:, None] != tcat[None, :]
    assert np.all(hard.last_weights.transpose(1, 0, 2)[:, unmatched] == 0.0)


def test_alpha_one_is_unbiased():
    att, f_img, cats, tokens, tcat, _ = setup(alpha=1.0)
    base = att.forward(f_img, cats, tokens, tcat)
    # with no bias the category only enters through the query one-hot
    att.w_q.value[:, 6:] = 0.0
    np.testing.assert_allclose(att.forward(f_img, (cats + 1) % 3, tokens, tcat),
                               att.forward(f_img, cats, tokens, tcat), atol=1e-14)
    assert base.shape == (4, 5)


def test_gradcheck():
    att, f_img, cats, tokens, tcat, _ = setup(1)
    fi, tok = Param(f_img), Param(tokens)

    def bwd(g):
        a, b = att.backward(g)
        fi.grad += a
        tok.grad += b

    rep = gradcheck(lambda: att.forward(fi.value, cats, tok.value, tcat), bwd,
                    att.named_params() + [("f_img", fi), ("tokens", tok)])
    assert rep.passed, rep.location


def test_validation():
    with pytest.raises(DimensionError):
        FusionAttention(4, 2, 4, 6, 4, heads=4)
    with pytest.raises(ValueError):
        FusionAttention(4, 2, 4, 8, 4, alpha=0.0)
    att, f_img, cats, tokens, tcat, _ = setup()
    with pytest.raises(StateError):
        att.backward(np.zeros((4, 5)))
    with pytest.raises(DimensionError):
        att.forward(f_img[:, :5], cats, tokens, tcat)
    with pytest.raises(DimensionError):
        att.forward(f_img, cats, tokens[:, :3], tcat)
    with pytest.raises(DimensionError):
        att.forward(f_img, cats + 3, tokens, tcat)


def test_softmax_stable_on_large_logits():
    s = np.array([[1000.0, 1000.0, -np.inf], [-1e308, 0.0, 1.0]])
    w = softmax(s)
    np.testing.assert_allclose(w[0], [0.5, 0.5, 0.0])
    assert np.all(np.isfinite(w))


def test_fuse_single_vector():
    att, f_img, _, tokens, _, _ = setup()
    lib = PrototypeLibrary(["a", "b", "c"], np.zeros((3, 5, 4)), tokens.reshape(3, 5, 8))
    out = fuse(f_img[0], 2, lib, att)
    np.testing.assert_allclose(out, att.forward(f_img[:1], [2], tokens, lib.token_categories())[0])
    small = PrototypeLibrary(["a", "b"], np.zeros((2, 5, 4)), tokens[:10].reshape(2, 5, 8))
    with pytest.raises(DimensionError):
        fuse(f_img[0], 0, small, att)
