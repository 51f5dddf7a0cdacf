"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The synthetic forecasting grid (four variants, three seeds) is trained once
per module and shared by the forecasting, monotonicity and uncertainty
criteria.  Criterion 9 runs only when a Guangzhou-format CSV is supplied via
``BEDMA_GUANGZHOU_CSV`` (and ``BEDMA_GUANGZHOU_ROAD``).
"""

import math
import os
import time

import numpy as np
import pytest

from bedma.cli import main
from bedma.data import WindowConfig, denormalize, prepare, synth_series
from bedma.gradcheck import run_all
from bedma.metrics import evaluate, pearson_r, rmse, smape
from bedma.model import VARIANTS, ModelConfig, build_model, predict_mc, to_deterministic
from bedma.training import TrainConfig, train
from bedma.variational import ZERO_NOISE, GaussianVariational, NoiseSource, kl_closed_form, kl_sample_term, sample_weight, sigma_to_rho

EPOCHS = 6
SEEDS = (0, 1, 2)
HORIZONS = (1, 3, 6)
WINDOW = WindowConfig(t=6, r=6)

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [RESULTS[k] for k in sorted(RESULTS)]
    if reporter is not None:
        reporter.write_line("")
        for line in lines:
            reporter.write_line(line)
    else:
        print("\n".join(lines))


# ---------------------------------------------------------------- 1-4


def test_1_gradient_integrity():
    report = run_all()
    worst = {c: report.worst(c).error for c in report.components()}
    ok = report.passed and report.seconds < 60 and len(worst) >= 4
    record(1, ok, f"{len(report.results)} checks in {report.seconds:.1f}s, worst "
           + ", ".join(f"{c}={e:.1e}" for c, e in worst.items()))
    assert ok, report.format()


def test_2_variational_correctness():
    n = 100_000
    worst = 0.0
    for i, mu in enumerate((-3.0, 0.0, 3.0)):
        for j, sigma in enumerate((0.1, 1.0, 3.0)):
            gv = GaussianVariational(np.full(n, mu), np.full(n, float(sigma_to_rho(sigma))), "w")
            w = sample_weight(gv, NoiseSource(100 + 3 * i + j))
            mc = kl_sample_term(w, gv).item() / n
            exact = kl_closed_form(gv) / n
            if exact == 0.0:
                # posterior equals prior: every sampled term is identically zero
                zero_cell_exact = mc == 0.0
                continue
            worst = max(worst, abs(mc - exact) / exact)
    ok = worst <= 0.02 and zero_cell_exact
    record(2, ok, f"worst relative MC error {worst:.4f} over the 3x3 grid (limit 0.02); "
           f"zero-KL cell exact: {zero_cell_exact}")
    assert ok


def test_3_deterministic_limit():
    rng = np.random.default_rng(3)
    worst = 0.0
    for variant in ("bedma", "bgru-ed"):
        m = build_model(ModelConfig(variant=variant, window=6, horizon=6), seed=11)
        twin = to_deterministic(m)
        for _ in range(10):
            x = rng.uniform(0, 1, size=(6, 1))
            worst = max(worst, float(np.max(np.abs(m.run(x, ZERO_NOISE).y_hat.data - twin.run(x).y_hat.data))))
    ok = worst <= 1e-9
    record(3, ok, f"max |bayesian(eps=0) - deterministic| = {worst:.1e} (limit 1e-9)")
    assert ok


def _brute(a, b):
    n = len(a)
    e = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / n)
    s = sum(abs(x - y) / ((x + abs(y)) / 2) for x, y in zip(a, b)) / n
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    r = cov / math.sqrt(sum((x - ma) ** 2 for x in a) * sum((y - mb) ** 2 for y in b))
    return e, s, r


def test_4_metric_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 200))
        y = rng.uniform(0.5, 50, n)
        y_hat = y + rng.normal(0, 2, n)
        ref = _brute(list(y_hat), list(y))
        got = (rmse(y_hat, y), smape(y_hat, y), pearson_r(y_hat, y))
        worst = max(worst, max(abs(g - r) for g, r in zip(got, ref)))
    examples = (rmse([3.0, 4.0], [0.0, 0.0]) == math.sqrt(12.5) and smape([3.0], [1.0]) == 1.0
                and smape([3.0, 1.0], [1.0, 1.0]) == 0.5 and pearson_r([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == 1.0)
    ok = worst <= 1e-12 and examples
    record(4, ok, f"max deviation from brute force {worst:.1e} on 100 vectors; worked examples "
           + ("exact" if examples else "WRONG"))
    assert ok


# ---------------------------------------------------------------- 5-7


@pytest.fixture(scope="module")
def grid():
    series = synth_series("sine+noise", 6000, 144, 0.05, seed=0)
    pd = prepare(series, WINDOW)
    y = denormalize(pd.test.targets, pd.stats)
    scale = pd.stats.max - pd.stats.min
    out = {}
    for variant in VARIANTS:
        for seed in SEEDS:
            t0 = time.perf_counter()
            model = build_model(ModelConfig(variant=variant, window=WINDOW.t, horizon=WINDOW.r), seed=seed)
            model, _ = train(pd.train, model, TrainConfig(epochs=EPOCHS, seed=seed))
            pred = predict_mc(model, pd.test.inputs[..., None], n_mc=30, seed=1)
            mean, std = denormalize(pred.mean, pd.stats), pred.std * scale
            reps = {h: evaluate(mean[:, h - 1], y[:, h - 1]) for h in HORIZONS}
            out[variant, seed] = {
                "rmse": {h: rep.rmse for h, rep in reps.items()},
                "r": {h: rep.r for h, rep in reps.items()},
                "coverage": float(np.mean(np.abs(y - mean) <= 2 * std)),
                "variance": pred.variance,
                "seconds": time.perf_counter() - t0,
            }
    return out


def test_5_synthetic_forecasting(grid):
    bedma, gru = grid["bedma", 0], grid["gru-ed", 0]
    ok = (bedma["r"][1] >= 0.95 and bedma["r"][6] >= 0.85 and bedma["seconds"] <= 600
          and gru["r"][1] >= 0.9)
    record(5, ok, f"bedma R h1={bedma['r'][1]:.4f} (>=0.95) h6={bedma['r'][6]:.4f} (>=0.85) in "
           f"{bedma['seconds']:.0f}s; gru-ed calibration R h1={gru['r'][1]:.4f} (>=0.9)")
    assert ok


def test_6_horizon_monotonicity(grid):
    medians = {v: [float(np.median([grid[v, s]["rmse"][h] for s in SEEDS])) for h in HORIZONS] for v in VARIANTS}
    ok = all(m[0] <= m[1] <= m[2] for m in medians.values())
    record(6, ok, "median RMSE h1/h3/h6: " + "; ".join(
        f"{v} " + "/".join(f"{x:.4f}" for x in m) for v, m in medians.items()))
    assert ok


def test_7_uncertainty(grid):
    cov = grid["bedma", 0]["coverage"]
    zero = all(np.all(grid[v, s]["variance"] == 0.0) for v in ("gru-ed", "mhatt") for s in SEEDS)
    others = ", ".join(f"{grid['bedma', s]['coverage']:.3f}" for s in SEEDS)
    ok = cov >= 0.8 and zero
    record(7, ok, f"bedma +-2 sigma coverage {cov:.3f} (>=0.80; all seeds {others}); "
           f"deterministic variance exactly zero: {zero}")
    assert ok


# ---------------------------------------------------------------- 8-9


CONFIG = """
seed = 7
[model]
variant = "bedma"
hidden = 8
heads = 2
layers = 1
[window]
t = 6
r = 6
[train]
epochs = 3
[data]
length = 800
"""


def test_8_reproducibility(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG)
    codes = [main(["train", "--config", str(path), "--out", str(tmp_path / d)]) for d in ("a", "b")]
    same = {
        name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in ("history.csv", "checkpoint.bsfc")
    }
    ok = codes == [0, 0] and all(same.values())
    record(8, ok, "byte-identical " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok


def test_9_guangzhou(tmp_path, capsys):
    path, road = os.environ.get("BEDMA_GUANGZHOU_CSV"), os.environ.get("BEDMA_GUANGZHOU_ROAD")
    if not path or not road:
        RESULTS[9] = "criterion 9: SKIP  set BEDMA_GUANGZHOU_CSV and BEDMA_GUANGZHOU_ROAD to run"
        pytest.skip("Guangzhou series not supplied")
    out = tmp_path / "gz"
    code = main(["train", "--data", path, "--road", road, "--variant", "bedma", "--out", str(out)])
    if code == 0:
        code = main(["evaluate", "--checkpoint", str(out / "checkpoint.bsfc"), "--horizon", "1,3,6"])
    table = capsys.readouterr().out
    ok = code == 0 and all(label in table for label in ("10 min", "30 min", "60 min"))
    # non-binding: the reference R at 10 minutes is 0.9721, reported but not enforced
    record(9, ok, "report emitted (no tolerance enforced)\n" + table)
    assert ok
