"""RMSE, SMAPE and Pearson R, plus the Table-style report layout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _pair(y_hat, y) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y_hat, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} predictions vs {b.size} targets")
    if a.size == 0:
        raise ValueError("metrics need at least one sample")
    return a, b


def rmse(y_hat, y) -> float:
    a, b = _pair(y_hat, y)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def smape(y_hat, y) -> float:
    """Mean of ``|y_hat - y| / ((y_hat + |y|) / 2)`` as a fraction; multiply by 100 for percent.

    The prediction enters the denominator without an absolute value, so
    predictions are expected to be nonnegative.
    """
    a, b = _pair(y_hat, y)
    denom = (a + np.abs(b)) / 2.0
    bad = np.flatnonzero(denom == 0)
    if bad.size:
        raise ValueError(f"zero SMAPE denominator at index {int(bad[0])}")
    return float(np.mean(np.abs(a - b) / denom))


def pearson_r(y_hat, y) -> float:
    a, b = _pair(y_hat, y)
    if a.size < 2:
        raise ValueError("pearson_r needs at least two samples")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(np.dot(da, da)), float(np.dot(db, db))
    if saa == 0 or sbb == 0:
        raise ValueError("pearson_r is undefined for a constant input")
    r = float(np.dot(da, db)) / np.sqrt(saa * sbb)
    return float(np.clip(r, -1.0, 1.0))


@dataclass
class MetricsReport:
    rmse: float
    smape: float
    r: float
    m: int
    mean_y: float
    mean_y_hat: float

    @property
    def smape_percent(self) -> float:
        return 100.0 * self.smape


def evaluate(y_hat, y) -> MetricsReport:
    a, b = _pair(y_hat, y)
    return MetricsReport(rmse(a, b), smape(a, b), pearson_r(a, b), a.size, float(b.mean()), float(a.mean()))


def format_table(rows: dict[str, dict[str, MetricsReport]], labels: dict[str, str] | None = None,
                 title: str = "") -> str:
    """Aligned text: one line per model, RMSE/SMAPE/R column triple per horizon.

    ``rows`` maps model name -> horizon key -> report.
    """
    horizons = list(next(iter(rows.values())).keys()) if rows else []
    labels = labels or {h: h for h in horizons}
    name_w = max([5] + [len(n) for n in rows])
    cell = 10
    lines = []
    if title:
        lines.append(title)
    lines.append(" " * name_w + "".join(f"  {labels[h]:^{3 * cell + 2}}" for h in horizons))
    lines.append(
        f"{'Model':<{name_w}}"
        + "".join(f"  {'RMSE':>{cell}}{'SMAPE':>{cell + 1}}{'R':>{cell + 1}}" for _ in horizons)
    )
    for name, per_h in rows.items():
        line = f"{name:<{name_w}}"
        for h in horizons:
            rep = per_h[h]
            line += f"  {rep.rmse:>{cell}.4f} {rep.smape:>{cell}.4f} {rep.r:>{cell}.4f}"
        lines.append(line)
    return "\n".join(lines) + "\n"
