"""Run configuration: one TOML file with sections, plus dotted-key overrides.

Example::

    seed = 0
    out = "runs/sine"

    [model]
    variant = "bedma"
    hidden = 64

    [window]
    t = 6
    r = 6

    [data]
    kind = "synthetic"      # or "csv" with path + road

The window length and horizon live in ``[window]`` only; the model section
inherits them.  The top-level ``seed`` seeds initialization and training.
"""

from __future__ import annotations

import json
import math
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .data import SYNTH_KINDS, TRAIN_FRACTION, WindowConfig
from .model import VARIANTS, ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str = ""
    road: str = ""
    synth_kind: str = "sine+noise"
    length: int = 6000
    period: float = 144.0
    noise_std: float = 0.05
    synth_seed: int = 0
    train_fraction: float = TRAIN_FRACTION

    def validate(self):
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError("data.kind", f"choose 'synthetic' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("data.path", "required when data.kind = 'csv'")
        if self.kind == "csv" and not self.road:
            raise ConfigError("data.road", "required when data.kind = 'csv'")
        if self.synth_kind not in SYNTH_KINDS:
            raise ConfigError("data.synth_kind", f"choose from {SYNTH_KINDS}")
        if self.length < 2:
            raise ConfigError("data.length", "must be >= 2")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("data.train_fraction", "must lie in (0, 1)")


@dataclass
class EvalConfig:
    horizons: list = field(default_factory=lambda: [1, 3, 6])
    n_mc: int = 30
    mc_seed: int = 1
    minutes_per_step: float = 10.0

    def validate(self):
        if not self.horizons:
            raise ConfigError("eval.horizons", "must list at least one horizon")
        for h in self.horizons:
            if isinstance(h, bool) or not isinstance(h, int) or h < 1:
                raise ConfigError("eval.horizons", f"horizons are positive step counts, got {h!r}")
        if self.n_mc < 1:
            raise ConfigError("eval.n_mc", "must be >= 1")
        if not self.minutes_per_step > 0:
            raise ConfigError("eval.minutes_per_step", "must be positive")


@dataclass
class BenchmarkConfig:
    repeats: int = 10
    variants: list = field(default_factory=lambda: list(VARIANTS))
    # "per-repeat": repeat k uses seed + k; "fixed": every repeat uses seed
    seed_mode: str = "per-repeat"

    def validate(self):
        if self.repeats < 1:
            raise ConfigError("benchmark.repeats", "must be >= 1")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError("benchmark.variants", f"unknown variant {v!r}; choose from {VARIANTS}")
        if self.seed_mode not in ("per-repeat", "fixed"):
            raise ConfigError("benchmark.seed_mode", "choose 'per-repeat' or 'fixed'")


# keys of ModelConfig that the [window] section owns
_WINDOW_OWNED = {"window": "t", "horizon": "r"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self) -> dict:
        """Document form; ``build_run_config(cfg.to_dict())`` reproduces ``cfg``."""
        model = {k: v for k, v in asdict(self.model).items() if k not in _WINDOW_OWNED}
        train = {k: v for k, v in asdict(self.train).items() if k != "seed"}
        return {
            "seed": self.seed,
            "out": self.out,
            "model": model,
            "window": asdict(self.window),
            "train": train,
            "data": asdict(self.data),
            "eval": asdict(self.eval),
            "benchmark": asdict(self.benchmark),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_SECTIONS = {
    "model": ModelConfig,
    "window": WindowConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "benchmark": BenchmarkConfig,
}
_TOP_LEVEL = {"seed": int, "out": str}


def _coerce(key: str, value, annotation):
    """Check ``value`` against a dataclass field annotation, widening int to float."""
    if isinstance(annotation, str):
        annotation = {"int": int, "float": float, "str": str, "bool": bool, "list": list}.get(annotation, annotation)
    origin = typing.get_origin(annotation) or annotation
    if origin is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if origin is int:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if origin is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if origin is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return list(value)
    return value


def _build_section(name: str, values: dict):
    cls = _SECTIONS[name]
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        dotted = f"{name}.{key}"
        if name == "model" and key in _WINDOW_OWNED:
            raise ConfigError(dotted, f"set window.{_WINDOW_OWNED[key]} instead")
        if name == "train" and key == "seed":
            raise ConfigError(dotted, "set the top-level seed instead")
        if key not in known:
            raise ConfigError(dotted, f"unknown key; {name} accepts {sorted(known)}")
        kwargs[key] = _coerce(dotted, value, known[key].type)
    return kwargs


def _prefixed(section: str, exc: Exception) -> ConfigError:
    key = getattr(exc, "key", None)
    key = f"{section}.{key}" if key and "." not in key else (key or section)
    message = str(exc).split(": ", 1)[-1] if getattr(exc, "key", None) else str(exc)
    return ConfigError(key, message)


def build_run_config(doc: dict) -> RunConfig:
    """Validate a parsed document (nested dicts) into a :class:`RunConfig`."""
    for key in doc:
        if key not in _SECTIONS and key not in _TOP_LEVEL:
            raise ConfigError(key, f"unknown section or key; expected {sorted(_SECTIONS) + sorted(_TOP_LEVEL)}")
    top = {k: _coerce(k, doc[k], t) for k, t in _TOP_LEVEL.items() if k in doc}
    parts = {}
    for name in _SECTIONS:
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(name, "expected a [section] table")
        parts[name] = _build_section(name, section)

    try:
        window = WindowConfig(**parts["window"])
    except ValueError as exc:
        raise ConfigError("window", str(exc)) from exc
    seed = top.get("seed", 0)
    built = {"window": window}
    extra = {
        "model": {"window": window.t, "horizon": window.r},
        "train": {"seed": seed},
    }
    for name in ("model", "train", "data", "eval", "benchmark"):
        try:
            obj = _SECTIONS[name](**parts[name], **extra.get(name, {}))
            obj.validate()
        except ConfigError as exc:
            raise _prefixed(name, exc) from exc
        built[name] = obj
    return RunConfig(seed=seed, out=top.get("out", "runs/default"), **built)


def parse_override(text: str) -> tuple[list[str], object]:
    """``"train.epochs=5"`` -> (["train", "epochs"], 5).  Values use TOML syntax; bare words are strings."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    if not key:
        raise ConfigError(text, "override has an empty key")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        path, value = parse_override(item) if isinstance(item, str) else item
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(path), f"{part} is not a section")
        node[path[-1]] = value
    return doc


def read_document(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"no such config file: {path}")
    try:
        return tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from exc


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (or start from defaults), apply overrides, validate."""
    doc = read_document(path) if path is not None else {}
    return build_run_config(apply_overrides(doc, overrides))


def minutes_label(h: int, minutes_per_step: float) -> str:
    minutes = h * minutes_per_step
    return f"{int(minutes)} min" if math.isclose(minutes, round(minutes)) else f"{minutes:g} min"
