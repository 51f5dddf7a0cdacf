import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bedma import autodiff as ad
from bedma.autodiff import Tensor
from bedma.recurrent import (
    GATE_NAMES, BgruCellParams, GruCellParams, bgru_cell_forward, decode, encode, gru_cell_forward,
)
from bedma.variational import ZERO_NOISE, FixedNoise, GaussianVariational, KLAccumulator, NoiseSource, sigma_to_rho


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def reference_step(x, h, p):
    """Literal numpy transcription of the GRU recurrence, [h, x] ordering."""
    hx = np.concatenate([h, x])
    z = sigmoid(p["W_z"] @ hx + p["b_z"])
    r = sigmoid(p["W_r"] @ hx + p["b_r"])
    h_tilde = np.tanh(p["W_h"] @ np.concatenate([r * h, x]) + p["b_h"])
    return (1 - z) * h_tilde + z * h


def random_params(rng, m, n_in, scale=0.5):
    out = {}
    for name in GATE_NAMES:
        shape = (m, m + n_in) if name.startswith("W") else (m,)
        out[name] = scale * rng.standard_normal(shape)
    return out


def cell(arrays):
    return GruCellParams(*(arrays[n] for n in GATE_NAMES))


def bayes_cell(mu, sigma=0.3, prefix="enc"):
    return BgruCellParams(*(
        GaussianVariational(Tensor(mu[n]), Tensor(np.full(mu[n].shape, float(sigma_to_rho(sigma)))), f"{prefix}.{n}")
        for n in GATE_NAMES
    ))


def test_zero_parameters_halve_the_state():
    h, tr = gru_cell_forward(np.array([0.7]), np.array([0.4, -0.2]), GruCellParams.zeros(2, 1))
    np.testing.assert_array_equal(tr.z, [0.5, 0.5])
    np.testing.assert_array_equal(tr.r, [0.5, 0.5])
    np.testing.assert_array_equal(tr.h_tilde, [0.0, 0.0])
    np.testing.assert_array_equal(h.data, [0.2, -0.1])


def test_saturated_update_gate_copies_state():
    p = GruCellParams.zeros(3, 2)
    p.b_z = Tensor(np.full(3, 20.0))
    h_prev = np.array([0.3, -0.9, 0.5])
    h, _ = gru_cell_forward(np.array([1.0, -1.0]), h_prev, p)
    np.testing.assert_allclose(h.data, h_prev, rtol=0, atol=1e-8)


def test_saturated_gates_select_candidate():
    p = GruCellParams.zeros(2, 1)
    p.b_z = Tensor(np.full(2, -20.0))
    p.b_h = Tensor(np.full(2, 20.0))
    h, _ = gru_cell_forward(np.array([0.0]), np.array([-0.5, 0.5]), p)
    np.testing.assert_allclose(h.data, np.tanh(20.0), rtol=0, atol=1e-8)


def test_matches_reference_transcription(rng):
    for _ in range(10):
        p = random_params(rng, 4, 3)
        x, h = rng.standard_normal(3), np.tanh(rng.standard_normal(4))
        out, _ = gru_cell_forward(x, h, cell(p))
        np.testing.assert_allclose(out.data, reference_step(x, h, p), rtol=0, atol=1e-14)


def test_batched_step_matches_rows(rng):
    p = cell(random_params(rng, 3, 2))
    X, Hp = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    batched, _ = gru_cell_forward(X, Hp, p)
    for i in range(5):
        np.testing.assert_allclose(batched.data[i], gru_cell_forward(X[i], Hp[i], p)[0].data, atol=1e-15)


def test_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        gru_cell_forward(np.zeros(2), np.zeros(3), GruCellParams.zeros(3, 1))
    with pytest.raises(ad.ShapeError):
        GruCellParams(np.zeros((2, 3)), np.zeros(2), np.zeros((2, 4)), np.zeros(2), np.zeros((2, 3)), np.zeros(2))


@given(
    x=hnp.arrays(np.float64, 2, elements=st.floats(-50, 50)),
    h=hnp.arrays(np.float64, 3, elements=st.floats(-1, 1)),
    seed=st.integers(0, 1000),
)
def test_gates_are_bounded(x, h, seed):
    p = cell(random_params(np.random.default_rng(seed), 3, 2, scale=0.3))
    out, tr = gru_cell_forward(x, h, p)
    # bounds hold in exact arithmetic; floats may round to the boundary under saturation
    assert np.all((tr.z >= 0) & (tr.z <= 1)) and np.all((tr.r >= 0) & (tr.r <= 1))
    assert np.all(np.abs(tr.h_tilde) <= 1) and np.all(np.abs(out.data) <= 1)


def test_bgru_zero_noise_is_gru_at_mu(rng):
    mu = random_params(rng, 3, 2)
    x, h = rng.standard_normal(2), rng.standard_normal(3)
    a, _ = bgru_cell_forward(x, h, bayes_cell(mu), ZERO_NOISE)
    b, _ = gru_cell_forward(x, h, cell(mu))
    np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)


def test_bgru_vanishing_sigma(rng):
    mu = random_params(rng, 3, 2)
    x, h = rng.standard_normal(2), rng.standard_normal(3)
    tiny = BgruCellParams(*(GaussianVariational(Tensor(mu[n]), Tensor(np.full(mu[n].shape, -40.0)), n)
                            for n in GATE_NAMES))
    a, _ = bgru_cell_forward(x, h, tiny, FixedNoise(3.0))
    b, _ = gru_cell_forward(x, h, cell(mu))
    np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-9)


def test_bgru_determinism_and_seed_sensitivity(rng):
    p = bayes_cell(random_params(rng, 3, 2), sigma=1.0)
    x, h = rng.standard_normal(2), rng.standard_normal(3)
    a = bgru_cell_forward(x, h, p, NoiseSource(1))[0].data
    b = bgru_cell_forward(x, h, p, NoiseSource(1))[0].data
    c = bgru_cell_forward(x, h, p, NoiseSource(2))[0].data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_bgru_contributes_six_kl_terms(rng):
    kl = KLAccumulator()
    bgru_cell_forward(np.zeros(2), np.zeros(3), bayes_cell(random_params(rng, 3, 2)), NoiseSource(0), kl)
    assert len(kl.terms) == 6


def test_distinct_labels_required(rng):
    mu = random_params(rng, 2, 1)
    with pytest.raises(ValueError):
        BgruCellParams(*(GaussianVariational(Tensor(mu[n]), Tensor(mu[n]), "same") for n in GATE_NAMES))


def test_weights_are_drawn_once_per_sequence(rng):
    """Encoding with a Bayesian stack equals a deterministic run with one fixed draw."""
    mu = random_params(rng, 3, 1)
    bcell = bayes_cell(mu, sigma=0.5)
    X = rng.standard_normal((5, 1))
    kl = KLAccumulator()
    H = encode(X, [bcell], NoiseSource(11), kl).H.data
    assert len(kl.terms) == 6
    drawn = bcell.sample(NoiseSource(11))
    np.testing.assert_array_equal(H, encode(X, [drawn]).H.data)


# ---------------------------------------------------------------- encode


def test_encode_single_step(rng):
    p = cell(random_params(rng, 4, 1))
    x = rng.standard_normal((1, 1))
    H = encode(x, [p]).H
    assert H.shape == (1, 4)
    np.testing.assert_allclose(H.data[0], gru_cell_forward(x[0], np.zeros(4), p)[0].data, atol=1e-15)


def test_zero_stack_encodes_zeros(rng):
    H = encode(rng.standard_normal((7, 2)), [GruCellParams.zeros(3, 2), GruCellParams.zeros(3, 3)]).H
    np.testing.assert_array_equal(H.data, np.zeros((7, 3)))


def test_two_layer_matches_reference(rng):
    p1, p2 = random_params(rng, 3, 2), random_params(rng, 3, 3)
    X = rng.standard_normal((4, 2))
    h1, h2, rows = np.zeros(3), np.zeros(3), []
    for x in X:
        h1 = reference_step(x, h1, p1)
        h2 = reference_step(h1, h2, p2)
        rows.append(h2)
    np.testing.assert_allclose(encode(X, [cell(p1), cell(p2)]).H.data, rows, rtol=0, atol=1e-14)


@given(j=st.integers(0, 4), delta=st.floats(-10, 10).filter(lambda d: abs(d) > 1e-6))
def test_causality(j, delta):
    rng = np.random.default_rng(0)
    stack = [cell(random_params(rng, 3, 1)), cell(random_params(rng, 3, 3))]
    X = rng.standard_normal((6, 1))
    X2 = X.copy()
    X2[j + 1] += delta
    a, b = encode(X, stack).H.data, encode(X2, stack).H.data
    assert a[: j + 1].tobytes() == b[: j + 1].tobytes()


def test_batched_encode_matches_single(rng):
    stack = [cell(random_params(rng, 3, 1))]
    X = rng.standard_normal((4, 5, 1))
    H = encode(X, stack).H.data
    for i in range(4):
        np.testing.assert_allclose(H[i], encode(X[i], stack).H.data, atol=1e-15)


def test_encode_errors():
    with pytest.raises(ValueError):
        encode(np.zeros((0, 1)), [GruCellParams.zeros(2, 1)])
    with pytest.raises(ValueError):
        encode(np.zeros((3, 1)), [])
    with pytest.raises(ValueError):
        encode(np.zeros((3, 1)), [bayes_cell(random_params(np.random.default_rng(0), 2, 1))])


def test_traces_are_recorded(rng):
    out = encode(rng.standard_normal((3, 1)), [cell(random_params(rng, 2, 1))], keep_traces=True)
    assert len(out.traces) == 3 and out.t == 3 and out.m == 2
    np.testing.assert_array_equal(out.traces[-1].h[0], out.H.data[-1])


# ---------------------------------------------------------------- decode


def test_decode_single_row(rng):
    p = cell(random_params(rng, 3, 3))
    C = rng.standard_normal((1, 3))
    np.testing.assert_allclose(decode(C, [p]).data, gru_cell_forward(C[0], np.zeros(3), p)[0].data, atol=1e-15)


def test_zero_decoder_is_zero(rng):
    np.testing.assert_array_equal(decode(rng.standard_normal((4, 3)), [GruCellParams.zeros(2, 3)]).data, 0.0)


def test_decode_consumes_every_step(rng):
    p = cell(random_params(rng, 3, 3))
    C = rng.standard_normal((4, 3))
    longer = np.vstack([C, C[-1:]])
    assert not np.allclose(decode(C, [p]).data, decode(longer, [p]).data)


def test_decode_returns_last_row_of_encode(rng):
    stack = [cell(random_params(rng, 3, 2)), cell(random_params(rng, 3, 3))]
    C = rng.standard_normal((5, 2))
    np.testing.assert_array_equal(decode(C, stack).data, encode(C, stack).H.data[-1])


def test_decode_empty():
    with pytest.raises(ValueError):
        decode(np.zeros((0, 2)), [GruCellParams.zeros(2, 2)])
