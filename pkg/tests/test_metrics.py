import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bedma.metrics import MetricsReport, evaluate, format_table, pearson_r, rmse, smape


# Brute-force references: plain Python loops, no numpy, no shared helpers.
def brute_rmse(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / len(a))


def brute_smape(a, b):
    return sum(abs(x - y) / ((x + abs(y)) / 2) for x, y in zip(a, b)) / len(a)


def brute_r(a, b):
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((y - mb) ** 2 for y in b))
    return num / (da * db)


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
    assert rmse([3.0, 4.0], [0.0, 0.0]) == rmse([0.0, 0.0], [3.0, 4.0])


def test_smape_examples():
    assert smape([2.0, 5.0], [2.0, 5.0]) == 0.0
    assert smape([3.0], [1.0]) == 1.0
    assert smape([3.0, 1.0], [1.0, 1.0]) == 0.5


def test_pearson_examples(rng):
    y = rng.standard_normal(20)
    assert pearson_r(y, y) == pytest.approx(1.0, abs=1e-15)
    assert pearson_r(-y + 4.0, y) == pytest.approx(-1.0, abs=1e-15)


def test_errors():
    with pytest.raises(ValueError, match="length"):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        rmse([], [])
    with pytest.raises(ValueError, match="index 1"):
        smape([1.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError, match="constant"):
        pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        pearson_r([1.0], [2.0])


def test_against_brute_force_on_100_vectors():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        m = int(rng.integers(2, 200))
        y = rng.uniform(0.5, 80.0, m)
        y_hat = np.maximum(y + rng.normal(0, 5.0, m), 0.0)
        a, b = y_hat.tolist(), y.tolist()
        assert abs(rmse(y_hat, y) - brute_rmse(a, b)) <= 1e-12
        assert abs(smape(y_hat, y) - brute_smape(a, b)) <= 1e-12
        assert abs(pearson_r(y_hat, y) - brute_r(a, b)) <= 1e-12


vec = hnp.arrays(np.float64, st.integers(2, 30), elements=st.floats(0.01, 100))


@given(vec, st.data())
def test_ranges(y, data):
    y_hat = data.draw(hnp.arrays(np.float64, len(y), elements=st.floats(0, 100)))
    assert rmse(y_hat, y) >= 0
    assert 0 <= smape(y_hat, y) <= 2
    if np.ptp(y_hat) > 1e-6 and np.ptp(y) > 1e-6:
        assert -1 <= pearson_r(y_hat, y) <= 1


@given(vec, st.floats(0.1, 10), st.floats(-10, 10))
def test_pearson_affine(y, a, b):
    rng = np.random.default_rng(len(y))
    x = y + rng.standard_normal(len(y))
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    r = pearson_r(x, y)
    assert pearson_r(a * x + b, y) == pytest.approx(r, abs=1e-9)
    assert pearson_r(x, a * y + b) == pytest.approx(r, abs=1e-9)
    assert pearson_r(-a * x, y) == pytest.approx(-r, abs=1e-9)


def test_evaluate_report(rng):
    y = rng.uniform(1, 2, 10)
    rep = evaluate(y * 1.1, y)
    assert rep.m == 10 and rep.mean_y == pytest.approx(y.mean()) and rep.mean_y_hat == pytest.approx(1.1 * y.mean())
    assert rep.smape_percent == pytest.approx(100 * rep.smape)


def test_table_layout():
    rep = MetricsReport(1.4772, 0.0503, 0.9721, 100, 1.0, 1.0)
    text = format_table({"BEDMA": {1: rep, 3: rep}, "GRU": {1: rep, 3: rep}}, {1: "10 min", 3: "30 min"}, "Table")
    lines = text.splitlines()
    assert lines[0] == "Table"
    assert "10 min" in lines[1] and "30 min" in lines[1]
    assert lines[2].split() == ["Model", "RMSE", "SMAPE", "R", "RMSE", "SMAPE", "R"]
    assert lines[3].split() == ["BEDMA", "1.4772", "0.0503", "0.9721"] * 1 + ["1.4772", "0.0503", "0.9721"]
    assert len({len(l) for l in lines[2:]}) == 1
