"""``bedma`` command line: train, evaluate, predict, benchmark, gradcheck.

Exit codes: 0 success, 1 invalid configuration, 2 data or checkpoint
problem, 3 non-finite loss, 4 a benchmark cell failed, 5 gradcheck failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, build_run_config, apply_overrides, load_run_config, minutes_label, read_document
from .data import (DataError, NormStats, Series, WindowConfig, denormalize, impute_missing, load_csv,
                   normalize, prepare, sliding_windows, synth_series, train_test_split)
from .gradcheck import run_all
from .metrics import MetricsReport, evaluate, format_table
from .model import (CheckpointError, ConfigError, Model, ModelConfig, build_model, load_checkpoint,
                    predict_mc, save_checkpoint)
from .training import NumericError, train

logger = logging.getLogger("bedma")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_BENCHMARK = 4
EXIT_GRADCHECK = 5

CHECKPOINT_NAME = "checkpoint.bsfc"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ helpers


def _overrides(args, horizon_key: str | None) -> list[str]:
    out = list(args.set or [])
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    if args.out is not None:
        out.append(f"out={json.dumps(str(args.out))}")
    if args.data is not None:
        out += ['data.kind="csv"', f"data.path={json.dumps(str(args.data))}"]
    if args.road is not None:
        out.append(f"data.road={json.dumps(args.road)}")
    if args.variant is not None:
        out.append(f"model.variant={json.dumps(args.variant)}")
    if args.horizon is not None and horizon_key is not None:
        steps = _parse_horizons(args.horizon)
        if horizon_key == "window.r":
            if len(steps) != 1:
                raise ConfigError("horizon", f"train takes a single horizon, got {args.horizon!r}")
            out.append(f"window.r={steps[0]}")
        else:
            out.append(f"{horizon_key}={steps}")
    return out


def _parse_horizons(text: str) -> list[int]:
    try:
        steps = [int(part) for part in str(text).replace(" ", "").split(",") if part]
    except ValueError:
        raise ConfigError("horizon", f"expected comma-separated step counts, got {text!r}") from None
    if not steps or any(h < 1 for h in steps):
        raise ConfigError("horizon", f"horizons are positive step counts, got {text!r}")
    return steps


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("out", f"cannot create output directory {out}: {exc}") from exc
    return out


def load_series(cfg: RunConfig) -> Series:
    d = cfg.data
    if d.kind == "csv":
        return load_csv(d.path, d.road)
    return synth_series(d.synth_kind, d.length, d.period, d.noise_std, seed=d.synth_seed)


def _minutes_per_step(cfg: RunConfig, series: Series) -> float:
    return float(series.interval_minutes) if cfg.data.kind == "csv" else cfg.eval.minutes_per_step


def _fingerprints(pd) -> dict:
    return {"train": pd.train.fingerprint(), "test": pd.test.fingerprint(),
            "n_train": len(pd.train), "n_test": len(pd.test)}


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _horizon_reports(model: Model, ds, stats: NormStats, horizons, n_mc: int, seed: int) -> dict:
    """Denormalized metrics plus interval coverage, per horizon (in steps)."""
    pred = predict_mc(model, ds.inputs[..., None], n_mc=n_mc, seed=seed)
    scale = stats.max - stats.min
    y = denormalize(ds.targets, stats)
    mean = denormalize(pred.mean, stats)
    std = pred.std * scale
    out = {}
    for h in horizons:
        col = h - 1
        rep = evaluate(mean[:, col], y[:, col])
        covered = np.abs(y[:, col] - mean[:, col]) <= 2.0 * std[:, col]
        out[h] = (rep, float(np.mean(covered)), float(np.mean(std[:, col])))
    return out


REPORT_FIELDS = ("model", "horizon", "minutes", "rmse", "smape", "smape_percent", "r", "m",
                 "mean_y", "mean_y_hat", "coverage", "mean_std")


def _report_rows(name: str, reports: dict, minutes_per_step: float) -> list[list]:
    rows = []
    for h, (rep, coverage, mean_std) in reports.items():
        rows.append([name, h, repr(h * minutes_per_step), repr(rep.rmse), repr(rep.smape),
                     repr(rep.smape_percent), repr(rep.r), rep.m, repr(rep.mean_y),
                     repr(rep.mean_y_hat), repr(coverage), repr(mean_std)])
    return rows


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ------------------------------------------------------------------ commands


def train_run(cfg: RunConfig, pd, seed: int | None = None) -> tuple[Model, object]:
    seed = cfg.seed if seed is None else seed
    model = build_model(cfg.model, seed=seed)
    tc = cfg.train
    if tc.seed != seed:
        tc = type(tc)(**{**asdict(tc), "seed": seed})
    return train(pd.train, model, tc, log_every=1)


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg.out)
    series = load_series(cfg)
    pd = prepare(series, cfg.window, cfg.data.train_fraction)
    logger.info("training %s on %d windows (series %s, %.2f%% missing)",
                cfg.model.variant, len(pd.train), series.road_id, 100 * series.missing_rate)
    model, history = train_run(cfg, pd)
    model.extras["norm"] = pd.stats.to_dict()
    # the output path is left out so identical runs in different directories match byte for byte
    model.extras["run"] = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    save_checkpoint(model, out / CHECKPOINT_NAME)
    history.to_csv(out / "history.csv", include_timing=False)
    _write(out / "timing.csv", _csv_text(("epoch", "seconds"),
                                         [[r.epoch, f"{r.seconds:.3f}"] for r in history.records]))
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "dataset": _fingerprints(pd),
        "norm": pd.stats.to_dict(),
        "training": model.extras["training"],
    }
    _write(out / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"trained {cfg.model.variant}: best epoch {history.best_epoch} of {len(history)}, "
          f"checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _load(path) -> Model:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"no such checkpoint: {path}") from exc
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _eval_config(model: Model, args, horizon_key: str) -> RunConfig:
    base = read_document(args.config) if args.config else model.extras.get("run", {})
    doc = apply_overrides(base, _overrides(args, horizon_key))
    doc.pop("model", None)
    cfg = build_run_config(doc)
    if (cfg.window.t, cfg.window.r) != (model.config.window, model.config.horizon):
        raise ConfigError("window",
                          f"data window t={cfg.window.t}, r={cfg.window.r} does not match checkpoint "
                          f"t={model.config.window}, r={model.config.horizon}")
    return cfg


def _split_windows(series: Series, cfg: RunConfig, stats: NormStats, split: str):
    filled = impute_missing(series)
    train_raw, test_raw = train_test_split(filled.values, cfg.data.train_fraction)
    raw = train_raw if split == "train" else test_raw
    return sliding_windows(normalize(raw, stats)[0], cfg.window, stats)


def cmd_evaluate(args) -> int:
    model = _load(args.checkpoint)
    if "norm" not in model.extras:
        raise DataError(f"{args.checkpoint}: checkpoint carries no normalization statistics")
    stats = NormStats.from_dict(model.extras["norm"])
    cfg = _eval_config(model, args, "eval.horizons")
    r = model.config.horizon
    too_far = [h for h in cfg.eval.horizons if h > r]
    if too_far:
        raise ConfigError("horizon", f"horizon {too_far[0]} exceeds the trained horizon r={r}; "
                                     f"the model only emits {r} steps")
    series = load_series(cfg)
    ds = _split_windows(series, cfg, stats, args.split)
    mps = _minutes_per_step(cfg, series)
    reports = _horizon_reports(model, ds, stats, cfg.eval.horizons, cfg.eval.n_mc, cfg.eval.mc_seed)
    out = _out_dir(args.out if args.out is not None else Path(args.checkpoint).parent)
    name = model.variant
    labels = {h: minutes_label(h, mps) for h in cfg.eval.horizons}
    table = format_table({name: {h: rep for h, (rep, _, _) in reports.items()}}, labels,
                         title=f"{name} on the {args.split} split ({len(ds)} windows)")
    _write(out / "evaluation.csv", _csv_text(REPORT_FIELDS, _report_rows(name, reports, mps)))
    _write(out / "evaluation.txt", table)
    print(table, end="")
    return EXIT_OK


def _parse_values(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(" ", "").split(",") if v])
    except ValueError:
        raise DataError(f"--values expects comma-separated numbers, got {text!r}") from None


def cmd_predict(args) -> int:
    model = _load(args.checkpoint)
    stats = NormStats.from_dict(model.extras["norm"])
    t = model.config.window
    if args.values is not None:
        recent = _parse_values(args.values)
        mps = 10.0
    else:
        cfg = _eval_config(model, args, None)
        series = impute_missing(load_series(cfg))
        recent = series.values
        mps = _minutes_per_step(cfg, series)
    if len(recent) < t or np.any(~np.isfinite(recent)):
        raise DataError(f"predict needs {t} finite observations, got {len(recent)}")
    window = normalize(recent[-t:], stats)[0][:, None]
    n_mc = args.n_mc if args.n_mc is not None else 30
    pred = predict_mc(model, window, n_mc=n_mc, seed=args.seed if args.seed is not None else 1)
    mean = denormalize(pred.mean, stats)
    half = 2.0 * pred.std * (stats.max - stats.min)
    print(f"{'step':>4} {'minutes':>8} {'mean':>12} {'lower':>12} {'upper':>12}")
    for i in range(len(mean)):
        print(f"{i + 1:>4} {(i + 1) * mps:>8g} {mean[i]:>12.4f} {mean[i] - half[i]:>12.4f} {mean[i] + half[i]:>12.4f}")
    return EXIT_OK


def run_benchmark(cfg: RunConfig, pd, train_fn=train_run):
    """Train every (variant, repeat) cell; returns (per-cell metrics, failures)."""
    cells, failures = [], []
    horizons = cfg.eval.horizons
    for variant in cfg.benchmark.variants:
        mcfg = ModelConfig(**{**asdict(cfg.model), "variant": variant})
        for k in range(cfg.benchmark.repeats):
            seed = cfg.seed + k if cfg.benchmark.seed_mode == "per-repeat" else cfg.seed
            cell_cfg = RunConfig(mcfg, cfg.window, cfg.train, cfg.data, cfg.eval, cfg.benchmark, seed, cfg.out)
            t0 = time.perf_counter()
            try:
                model, history = train_fn(cell_cfg, pd, seed)
                reports = _horizon_reports(model, pd.test, pd.stats, horizons, cfg.eval.n_mc,
                                           cfg.eval.mc_seed + k)
            except (NumericError, ConfigError, FloatingPointError, ValueError) as exc:
                logger.error("cell %s repeat %d failed: %s", variant, k, exc)
                failures.append((variant, k, str(exc)))
                continue
            cells.append({"variant": variant, "repeat": k, "seed": seed, "reports": reports,
                          "best_epoch": history.best_epoch, "seconds": time.perf_counter() - t0,
                          "train_fingerprint": pd.train.fingerprint(), "test_fingerprint": pd.test.fingerprint()})
    return cells, failures


def _mean_reports(cells, variant: str, horizons) -> dict[int, MetricsReport]:
    mine = [c for c in cells if c["variant"] == variant]
    out = {}
    for h in horizons:
        reps = [c["reports"][h][0] for c in mine]
        out[h] = MetricsReport(*(float(np.mean([getattr(r, f) for r in reps]))
                                 for f in ("rmse", "smape", "r")),
                               reps[0].m, reps[0].mean_y, float(np.mean([r.mean_y_hat for r in reps])))
    return out


def cmd_benchmark(cfg: RunConfig, train_fn=train_run) -> int:
    out = _out_dir(cfg.out)
    series = load_series(cfg)
    pd = prepare(series, cfg.window, cfg.data.train_fraction)
    mps = _minutes_per_step(cfg, series)
    cells, failures = run_benchmark(cfg, pd, train_fn)
    horizons = cfg.eval.horizons
    rows = []
    for c in cells:
        for row in _report_rows(c["variant"], c["reports"], mps):
            rows.append(row[:1] + [c["repeat"], c["seed"]] + row[1:] + [c["train_fingerprint"], c["test_fingerprint"]])
    header = ("model", "repeat", "seed") + REPORT_FIELDS[1:] + ("train_fingerprint", "test_fingerprint")
    _write(out / "benchmark.csv", _csv_text(header, rows))
    _write(out / "benchmark_timing.csv", _csv_text(("model", "repeat", "seconds"),
                                                   [[c["variant"], c["repeat"], f"{c['seconds']:.3f}"] for c in cells]))
    done = [v for v in cfg.benchmark.variants if any(c["variant"] == v for c in cells)]
    table = format_table({v: _mean_reports(cells, v, horizons) for v in done},
                         {h: minutes_label(h, mps) for h in horizons},
                         title=f"mean over {cfg.benchmark.repeats} repeats; dataset {pd.test.fingerprint()[:16]}")
    for variant, k, message in failures:
        table += f"FAILED {variant} repeat {k}: {message}\n"
    _write(out / "benchmark.txt", table)
    manifest = {"version": __version__, "config": cfg.to_dict(), "dataset": _fingerprints(pd),
                "failures": [list(f) for f in failures]}
    _write(out / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(table, end="")
    return EXIT_BENCHMARK if failures else EXIT_OK


def cmd_gradcheck(seed: int = 0, n_shapes: int = 20) -> int:
    report = run_all(seed=seed, n_shapes=n_shapes)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser, checkpoint: bool = False):
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--data", type=Path, help="CSV with header timestamp,road_id,speed")
    p.add_argument("--road", help="road id to select from --data")
    p.add_argument("--variant", choices=("gru-ed", "bgru-ed", "mhatt", "bedma"))
    p.add_argument("--horizon", help="train: steps r; evaluate: comma-separated steps, e.g. 1,3,6")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=5")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bedma", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("train", help="train one model"))
    p = sub.add_parser("evaluate", help="metrics per horizon for a checkpoint")
    _common(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = sub.add_parser("predict", help="forecast from the latest observations")
    _common(p, checkpoint=True)
    p.add_argument("--values", help="comma-separated recent observations (raw units)")
    p.add_argument("--n-mc", type=int, dest="n_mc")
    _common(sub.add_parser("benchmark", help="four-variant ablation grid"))
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", type=int, default=20, help="random shapes per op")
    return parser


def dispatch(args) -> int:
    if args.command == "gradcheck":
        return cmd_gradcheck(args.seed, args.shapes)
    if args.command == "train":
        return cmd_train(load_run_config(args.config, _overrides(args, "window.r")))
    if args.command == "benchmark":
        return cmd_benchmark(load_run_config(args.config, _overrides(args, "window.r")))
    if args.command == "evaluate":
        return cmd_evaluate(args)
    if args.command == "predict":
        return cmd_predict(args)
    raise CliError(EXIT_CONFIG, f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
