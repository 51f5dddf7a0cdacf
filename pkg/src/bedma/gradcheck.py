"""Central finite-difference checks of every analytic gradient in the package.

Each check builds a scalar function of named arrays, differentiates it on a
fresh tape and compares against ``(f(x + h) - f(x - h)) / 2h`` evaluated
without any tape.  Error is ``|analytic - numeric| / max(1, |analytic|)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import HeadProjections, MultiHeadParams, bayesian_multihead
from .recurrent import GATE_NAMES, BgruCellParams, encode
from .variational import (
    GaussianVariational,
    KLAccumulator,
    NoiseSource,
    kl_sample_term,
    log_prob_gaussian,
    sample_weight,
    sigma_to_rho,
)

TOLERANCE = 1e-4
STEP = 1e-5


def numeric_gradient(f: Callable[[dict], float], inputs: dict[str, np.ndarray], name: str,
                     step: float = STEP) -> np.ndarray:
    x = inputs[name]
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        up = f(inputs)
        x[i] = orig - step
        down = f(inputs)
        x[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def check_function(fn: Callable[[dict], ad.Tensor], inputs: dict[str, np.ndarray],
                   wrt: list[str] | None = None, step: float = STEP) -> float:
    """Worst relative error of ``d fn / d input`` over the inputs in ``wrt``."""
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    wrt = list(inputs) if wrt is None else wrt
    tape = ad.Tape()
    leaves = {k: tape.variable(v) for k, v in inputs.items()}
    grads = ad.backward(tape, fn(leaves))

    def value(arrays):
        return float(fn({k: ad.Tensor(v) for k, v in arrays.items()}).data)

    worst = 0.0
    for name in wrt:
        worst = max(worst, relative_error(grads[leaves[name]], numeric_gradient(value, inputs, name, step)))
    return worst


@dataclass
class CheckResult:
    component: str
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def components(self) -> list[str]:
        seen = []
        for r in self.results:
            if r.component not in seen:
                seen.append(r.component)
        return seen

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def worst(self, component: str) -> CheckResult:
        return max((r for r in self.results if r.component == component), key=lambda r: r.error)

    def format(self) -> str:
        lines = []
        for comp in self.components():
            rs = [r for r in self.results if r.component == comp]
            w = self.worst(comp)
            status = "PASS" if all(r.passed for r in rs) else "FAIL"
            lines.append(f"[{comp}] {status}  checks={len(rs)}  worst={w.error:.3e} ({w.name})")
            for r in rs:
                if not r.passed:
                    lines.append(f"    FAILED {r.name}: relative error {r.error:.3e} > {r.tolerance:g}")
        lines.append(f"total {len(self.results)} checks in {self.seconds:.2f}s: "
                     + ("all passed" if self.passed else f"{len(self.failures())} failed"))
        return "\n".join(lines)


def _random_shape(rng, max_rank: int = 2, max_extent: int = 4) -> tuple[int, ...]:
    rank = int(rng.integers(1, max_rank + 1))
    return tuple(int(n) for n in rng.integers(1, max_extent + 1, size=rank))


def _projected(out: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    # random projection so every output entry contributes to the check
    return ad.sum(ad.mul(out, ad.Tensor(weights)))


def _away_from_zero(rng, shape, low=0.2, high=2.0):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def autodiff_checks(rng: np.random.Generator, n_shapes: int = 20) -> list[CheckResult]:
    results = []

    def run(kind, make):
        worst = 0.0
        for _ in range(n_shapes):
            fn, inputs = make()
            worst = max(worst, check_function(fn, inputs))
        results.append(CheckResult("autodiff", kind, worst))

    def unary(kind, sampler):
        def make():
            shape = _random_shape(rng)
            proj = rng.standard_normal(shape)
            return (lambda v: _projected(ad.pointwise(kind, v["x"]), proj)), {"x": sampler(shape)}
        return make

    for kind, sampler in [
        ("sigmoid", lambda s: rng.normal(0, 2, s)),
        ("tanh", lambda s: rng.normal(0, 1.5, s)),
        ("relu", lambda s: _away_from_zero(rng, s)),
        ("log", lambda s: rng.uniform(0.5, 3.0, s)),
        ("exp", lambda s: rng.normal(0, 1, s)),
        ("square", lambda s: rng.normal(0, 1, s)),
        ("sqrt", lambda s: rng.uniform(0.5, 3.0, s)),
        ("softplus", lambda s: rng.normal(0, 2, s)),
        ("neg", lambda s: rng.normal(0, 1, s)),
    ]:
        run(kind, unary(kind, sampler))

    def binary(kind):
        def make():
            shape = _random_shape(rng)
            proj = rng.standard_normal(shape)
            b = rng.uniform(0.5, 2.0, shape) if kind == "div" else rng.standard_normal(shape)
            return (lambda v: _projected(ad.pointwise(kind, v["a"], v["b"]), proj)), {
                "a": rng.standard_normal(shape), "b": b}
        return make

    for kind in ("add", "sub", "mul", "div"):
        run(kind, binary(kind))

    def constant_op(kind):
        def make():
            shape = _random_shape(rng)
            c = float(rng.normal(0, 2))
            proj = rng.standard_normal(shape)
            return (lambda v: _projected(ad.pointwise(kind, v["x"], constant=c), proj)), {
                "x": rng.standard_normal(shape)}
        return make

    run("scale", constant_op("scale"))
    run("shift", constant_op("shift"))

    def make_matmul():
        m, k, n = (int(x) for x in rng.integers(1, 5, size=3))
        if rng.random() < 0.4:
            b = int(rng.integers(1, 4))
            a_shape = (b, m, k)
            b_shape = (b, k, n) if rng.random() < 0.5 else (k, n)
        else:
            a_shape, b_shape = (m, k), (k, n)
        proj = rng.standard_normal(a_shape[:-1] + (n,))
        return (lambda v: _projected(ad.matmul(v["a"], v["b"]), proj)), {
            "a": rng.standard_normal(a_shape), "b": rng.standard_normal(b_shape)}

    run("matmul", make_matmul)

    def make_transpose():
        shape = _random_shape(rng, 3) if rng.random() < 0.3 else tuple(int(x) for x in rng.integers(1, 5, 2))
        if len(shape) < 2:
            shape = shape + (2,)
        proj = rng.standard_normal(shape[:-2] + (shape[-1], shape[-2]))
        return (lambda v: _projected(ad.transpose(v["x"]), proj)), {"x": rng.standard_normal(shape)}

    run("transpose", make_transpose)

    def make_sum():
        shape = _random_shape(rng, 3)
        axis = None if rng.random() < 0.5 else int(rng.integers(0, len(shape)))
        out_shape = () if axis is None else shape[:axis] + shape[axis + 1:]
        proj = rng.standard_normal(out_shape)
        fn_kind = ad.sum if rng.random() < 0.5 else ad.mean
        return (lambda v: _projected(fn_kind(v["x"], axis), proj)), {"x": rng.standard_normal(shape)}

    run("sum/mean", make_sum)

    def make_softmax():
        shape = _random_shape(rng, 3)
        proj = rng.standard_normal(shape)
        return (lambda v: _projected(ad.softmax_rows(v["x"]), proj)), {"x": rng.normal(0, 2, shape)}

    run("softmax", make_softmax)

    def make_concat():
        rows = [int(x) for x in rng.integers(1, 4, size=int(rng.integers(1, 4)))]
        cols = int(rng.integers(1, 4))
        axis = int(rng.integers(0, 2))
        parts = {f"p{i}": rng.standard_normal((r, cols) if axis == 0 else (cols, r)) for i, r in enumerate(rows)}
        out_shape = (sum(rows), cols) if axis == 0 else (cols, sum(rows))
        proj = rng.standard_normal(out_shape)
        names = list(parts)
        return (lambda v: _projected(ad.concat([v[n] for n in names], axis=axis), proj)), parts

    run("concat", make_concat)

    def make_stack():
        shape = _random_shape(rng)
        n = int(rng.integers(1, 4))
        axis = int(rng.integers(0, len(shape) + 1))
        parts = {f"p{i}": rng.standard_normal(shape) for i in range(n)}
        out_shape = shape[:axis] + (n,) + shape[axis:]
        proj = rng.standard_normal(out_shape)
        names = list(parts)
        return (lambda v: _projected(ad.stack([v[k] for k in names], axis=axis), proj)), parts

    run("stack", make_stack)

    def make_slice():
        shape = tuple(int(x) for x in rng.integers(2, 5, size=2))
        lo = int(rng.integers(0, shape[0] - 1))
        col = int(rng.integers(0, shape[1]))
        sl = (slice(lo, shape[0]), col)
        proj = rng.standard_normal((shape[0] - lo,))
        return (lambda v: _projected(v["x"][sl], proj)), {"x": rng.standard_normal(shape)}

    run("slice", make_slice)

    def make_reshape_broadcast():
        n = int(rng.integers(1, 4))
        b = int(rng.integers(1, 4))
        proj = rng.standard_normal((b, n))
        return (lambda v: _projected(ad.broadcast_to(ad.reshape(v["x"], (n,)), (b, n)), proj)), {
            "x": rng.standard_normal((n, 1))}

    run("reshape/broadcast", make_reshape_broadcast)

    def make_composite():
        proj = rng.standard_normal((3, 3))

        def fn(v):
            a, b, c = v["a"], v["b"], v["c"]
            h = ad.tanh(ad.add(ad.matmul(a, b), c))
            s = ad.softmax_rows(ad.mul(ad.sigmoid(h), ad.exp(ad.scale(b, 0.3))))
            return ad.add(_projected(s, proj), ad.sum(ad.square(ad.relu(ad.sub(h, ad.neg(a))))))

        return fn, {k: rng.standard_normal((3, 3)) for k in "abc"}

    run("composite", make_composite)
    return results


def variational_checks(rng: np.random.Generator, n_shapes: int = 20) -> list[CheckResult]:
    results = []
    worst_sample = worst_kl = worst_lp = 0.0
    for i in range(n_shapes):
        shape = _random_shape(rng)
        mu = rng.normal(0, 1, shape)
        rho = sigma_to_rho(rng.uniform(0.1, 2.0, shape))
        proj = rng.standard_normal(shape)
        seed = int(rng.integers(0, 2**31))

        def sampled(v, seed=seed, proj=proj):
            gv = GaussianVariational(v["mu"], v["rho"], label="w")
            return _projected(sample_weight(gv, NoiseSource(seed)), proj)

        def kl(v, seed=seed):
            gv = GaussianVariational(v["mu"], v["rho"], label="w")
            acc = KLAccumulator()
            acc.sample(gv, NoiseSource(seed))
            return acc.total()

        def lp(v):
            return log_prob_gaussian(v["x"], v["mu"], ad.softplus(v["rho"]))

        worst_sample = max(worst_sample, check_function(sampled, {"mu": mu, "rho": rho}))
        worst_kl = max(worst_kl, check_function(kl, {"mu": mu, "rho": rho}))
        worst_lp = max(worst_lp, check_function(lp, {"x": rng.normal(0, 1, shape), "mu": mu, "rho": rho}))
        if i == 0:
            w = rng.normal(0, 1, shape)

            def direct(v, w=w):
                gv = GaussianVariational(v["mu"], v["rho"], label="w")
                return kl_sample_term(v["w"], gv)

            results.append(CheckResult("variational", "kl_sample_term(w, mu, rho)",
                                       check_function(direct, {"w": w, "mu": mu, "rho": rho})))
    results.append(CheckResult("variational", "sample_weight", worst_sample))
    results.append(CheckResult("variational", "sampled KL term", worst_kl))
    results.append(CheckResult("variational", "log_prob_gaussian", worst_lp))
    return results


def _bgru_stack_inputs(rng, n_in: int, m: int, layers: int, prefix: str) -> dict[str, np.ndarray]:
    arrays = {}
    for layer in range(layers):
        width = n_in if layer == 0 else m
        for gate in GATE_NAMES:
            shape = (m, m + width) if gate.startswith("W") else (m,)
            arrays[f"{prefix}{layer}.{gate}.mu"] = rng.normal(0, 0.5, shape)
            arrays[f"{prefix}{layer}.{gate}.rho"] = sigma_to_rho(rng.uniform(0.05, 0.5, shape))
    return arrays


def _bgru_stack(v: dict, layers: int, prefix: str) -> list[BgruCellParams]:
    return [
        BgruCellParams(*(GaussianVariational(v[f"{prefix}{layer}.{g}.mu"], v[f"{prefix}{layer}.{g}.rho"],
                                             label=f"{prefix}{layer}.{g}") for g in GATE_NAMES))
        for layer in range(layers)
    ]


def recurrent_checks(rng: np.random.Generator) -> list[CheckResult]:
    """Sum of H through a 4-step, 2-layer Bayesian encoder."""
    t, n_in, m, layers = 4, 2, 3, 2
    inputs = _bgru_stack_inputs(rng, n_in, m, layers, "enc")
    inputs["X"] = rng.normal(0, 1, (t, n_in))
    seed = int(rng.integers(0, 2**31))

    def fn(v):
        kl = KLAccumulator()
        H = encode(v["X"], _bgru_stack(v, layers, "enc"), NoiseSource(seed), kl).H
        return ad.sum(H)

    def fn_kl(v):
        kl = KLAccumulator()
        H = encode(v["X"], _bgru_stack(v, layers, "enc"), NoiseSource(seed), kl).H
        return ad.add(ad.sum(H), ad.scale(kl.total(), 0.01))

    names = list(inputs)
    return [
        CheckResult("recurrent", "encode sum(H) wrt mu, rho, X", check_function(fn, inputs, names)),
        CheckResult("recurrent", "encode sum(H) + KL", check_function(fn_kl, inputs, names)),
    ]


def attention_checks(rng: np.random.Generator) -> list[CheckResult]:
    """Sum of C through Bayesian multi-head attention, t=3, m=4, h=2."""
    t, m, h = 3, 4, 2
    d = m // h
    inputs = {"H": rng.normal(0, 1, (t, m))}
    for i in range(h):
        for proj in ("w_q", "w_k", "w_v"):
            inputs[f"head{i}.{proj}.mu"] = rng.normal(0, 0.7, (d, m))
            inputs[f"head{i}.{proj}.rho"] = sigma_to_rho(rng.uniform(0.05, 0.5, (d, m)))
    inputs["w_c.mu"] = rng.normal(0, 0.7, (m, m))
    inputs["w_c.rho"] = sigma_to_rho(rng.uniform(0.05, 0.5, (m, m)))
    seed = int(rng.integers(0, 2**31))

    def gv(v, name):
        return GaussianVariational(v[name + ".mu"], v[name + ".rho"], label=name)

    def fn(v):
        heads = [HeadProjections(*(gv(v, f"head{i}.{p}") for p in ("w_q", "w_k", "w_v"))) for i in range(h)]
        ctx = bayesian_multihead(v["H"], MultiHeadParams(heads, gv(v, "w_c")), NoiseSource(seed), KLAccumulator())
        return ad.sum(ctx.C)

    wrt = [k for k in inputs if k != "H"]
    return [
        CheckResult("attention", "bayesian_multihead sum(C) wrt mu, rho", check_function(fn, inputs, wrt)),
        CheckResult("attention", "bayesian_multihead sum(C) wrt H", check_function(fn, inputs, ["H"])),
    ]


def run_all(seed: int = 0, n_shapes: int = 20) -> GradcheckReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    report.results += autodiff_checks(rng, n_shapes)
    report.results += variational_checks(rng, n_shapes)
    report.results += recurrent_checks(rng)
    report.results += attention_checks(rng)
    report.seconds = time.perf_counter() - t0
    return report
