import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bedma import autodiff as ad
from bedma.attention import (
    AdditiveAttentionParams, HeadProjections, MultiHeadParams, additive_attention,
    bayesian_multihead, multihead, scaled_dot_head,
)
from bedma.autodiff import Tensor
from bedma.variational import ZERO_NOISE, GaussianVariational, KLAccumulator, NoiseSource, sigma_to_rho


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reference_multihead(H, heads, w_c):
    """Plain numpy self-attention; no shared code with the library."""
    outs = []
    for w_q, w_k, w_v in heads:
        Q, K, V = H @ w_q.T, H @ w_k.T, H @ w_v.T
        outs.append(np_softmax(Q @ K.T / math.sqrt(Q.shape[1])) @ V)
    return np.concatenate(outs, axis=1) @ w_c.T


def random_heads(rng, m, h):
    d = m // h
    return [tuple(rng.standard_normal((d, m)) for _ in range(3)) for _ in range(h)], rng.standard_normal((m, m))


def det_params(heads, w_c):
    return MultiHeadParams([HeadProjections(*(Tensor(w) for w in hp)) for hp in heads], Tensor(w_c))


def bayes_params(heads, w_c, sigma=0.2):
    def gv(w, label):
        return GaussianVariational(Tensor(w), Tensor(np.full(w.shape, float(sigma_to_rho(sigma)))), label)

    hps = [HeadProjections(gv(q, f"h{i}.q"), gv(k, f"h{i}.k"), gv(v, f"h{i}.v")) for i, (q, k, v) in enumerate(heads)]
    return MultiHeadParams(hps, gv(w_c, "c"))


# ------------------------------------------------------------------ additive


def additive(rng, m=3, a=4, m_s=2):
    return AdditiveAttentionParams(rng.standard_normal(a), rng.standard_normal((a, m_s)), rng.standard_normal((a, m)))


def test_additive_singleton(rng):
    H = rng.standard_normal((1, 3))
    c, alpha = additive_attention(rng.standard_normal(2), H, additive(rng))
    np.testing.assert_array_equal(alpha.data, [1.0])
    np.testing.assert_allclose(c.data, H[0], atol=1e-15)


def test_additive_identical_annotations(rng):
    H = np.tile(rng.standard_normal(3), (5, 1))
    c, alpha = additive_attention(rng.standard_normal(2), H, additive(rng))
    np.testing.assert_allclose(alpha.data, 0.2, atol=1e-15)
    np.testing.assert_allclose(c.data, H[0], atol=1e-14)


def test_additive_zero_score_vector(rng):
    p = additive(rng)
    p.v_e = Tensor(np.zeros(4))
    H = rng.standard_normal((6, 3))
    c, alpha = additive_attention(rng.standard_normal(2), H, p)
    np.testing.assert_allclose(alpha.data, 1 / 6, atol=1e-15)
    np.testing.assert_allclose(c.data, H.mean(axis=0), atol=1e-14)


def test_additive_matches_reference(rng):
    p = additive(rng)
    H, s = rng.standard_normal((5, 3)), rng.standard_normal(2)
    e = np.array([p.v_e.data @ np.tanh(p.W_e.data @ s + p.U_e.data @ h) for h in H])
    alpha = np_softmax(e)
    c, a = additive_attention(s, H, p)
    np.testing.assert_allclose(a.data, alpha, atol=1e-14)
    np.testing.assert_allclose(c.data, alpha @ H, atol=1e-14)


def test_additive_errors(rng):
    with pytest.raises(ValueError):
        additive_attention(np.zeros(2), np.zeros((0, 3)), additive(rng))
    with pytest.raises(ad.ShapeError):
        AdditiveAttentionParams(np.zeros(3), np.zeros((4, 2)), np.zeros((4, 3)))


# ---------------------------------------------------------------- dot product


def test_identical_keys_give_uniform_weights(rng):
    Q, V = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    K = np.tile(rng.standard_normal(2), (4, 1))
    head, w = scaled_dot_head(Q, K, V)
    np.testing.assert_allclose(w.data, 0.25, atol=1e-15)
    np.testing.assert_allclose(head.data, np.tile(V.mean(axis=0), (4, 1)), atol=1e-14)


def test_single_row_head(rng):
    V = rng.standard_normal((1, 3))
    head, w = scaled_dot_head(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)), V)
    np.testing.assert_array_equal(w.data, [[1.0]])
    np.testing.assert_array_equal(head.data, V)


def test_hand_worked_head():
    head, w = scaled_dot_head([[math.log(2)], [0.0]], [[1.0], [0.0]], [[1.0], [3.0]])
    np.testing.assert_allclose(w.data[0], [2 / 3, 1 / 3], atol=1e-15)
    assert head.data[0, 0] == pytest.approx(5 / 3, abs=1e-15)


def test_head_is_linear_in_v(rng):
    Q, K, V = (rng.standard_normal((5, 2)) for _ in range(3))
    np.testing.assert_allclose(scaled_dot_head(Q, K, 2 * V)[0].data, 2 * scaled_dot_head(Q, K, V)[0].data,
                               rtol=0, atol=1e-12)


def test_head_shape_errors():
    with pytest.raises(ad.ShapeError):
        scaled_dot_head(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((2, 0)))
    with pytest.raises(ad.ShapeError):
        scaled_dot_head(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((3, 2)))


@given(H=hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(4)), elements=st.floats(-20, 20)))
def test_weight_rows_sum_to_one(H):
    heads, w_c = random_heads(np.random.default_rng(1), 4, 2)
    ctx = multihead(H, det_params(heads, w_c))
    for w in ctx.weights:
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- multi-head


def test_multihead_matches_reference(rng):
    for h in (1, 2, 4):
        heads, w_c = random_heads(rng, 4, h)
        H = rng.standard_normal((5, 4))
        np.testing.assert_allclose(multihead(H, det_params(heads, w_c)).C.data,
                                   reference_multihead(H, heads, w_c), rtol=0, atol=1e-12)


def test_identity_projections_collapse_to_one_head(rng):
    m = 3
    eye = np.eye(m)
    H = rng.standard_normal((4, m))
    C = bayesian_multihead(H, bayes_params([(eye, eye, eye)], eye), ZERO_NOISE).C
    np.testing.assert_allclose(C.data, scaled_dot_head(H, H, H)[0].data, atol=1e-15)


def test_zero_noise_equals_deterministic(rng):
    heads, w_c = random_heads(rng, 4, 2)
    H = rng.standard_normal((6, 4))
    a = bayesian_multihead(H, bayes_params(heads, w_c), ZERO_NOISE).C.data
    b = multihead(H, det_params(heads, w_c)).C.data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_permutation_equivariance(rng):
    heads, w_c = random_heads(rng, 4, 2)
    H = rng.standard_normal((5, 4))
    perm = rng.permutation(5)
    p = bayes_params(heads, w_c)
    C = bayesian_multihead(H, p, ZERO_NOISE).C.data
    np.testing.assert_allclose(bayesian_multihead(H[perm], p, ZERO_NOISE).C.data, C[perm], atol=1e-12)


def test_bayesian_kl_terms_and_noise_dependence(rng):
    heads, w_c = random_heads(rng, 4, 2)
    H = rng.standard_normal((3, 4))
    p = bayes_params(heads, w_c)
    kl = KLAccumulator()
    a = bayesian_multihead(H, p, NoiseSource(0), kl)
    assert len(kl.terms) == 2 * 3 + 1
    assert len(a.heads) == 2 and a.heads[0].shape == (3, 2)
    b = bayesian_multihead(H, p, NoiseSource(1))
    assert not np.allclose(a.C.data, b.C.data)


def test_head_count_must_divide_width(rng):
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadParams([HeadProjections(*(np.zeros((1, 4)),) * 3)] * 3, np.zeros((4, 4)))
    with pytest.raises(ad.ShapeError):
        MultiHeadParams([HeadProjections(*(np.zeros((3, 4)),) * 3)] * 2, np.zeros((4, 4)))
