"""Encoder, attention, decoder and relu output head wired into four variants.

========  =========  ==========================  =========
variant   encoder    attention                   weights
========  =========  ==========================  =========
gru-ed    GRU        none (decoder reads H)      point
bgru-ed   BGRU       none (decoder reads H)      Gaussian
mhatt     GRU        multi-head self-attention   point
bedma     BGRU       Bayesian multi-head         Gaussian
========  =========  ==========================  =========

Parameters live in a flat ordered mapping of numpy arrays keyed by dotted
path.  A Gaussian parameter ``p`` is stored as ``p.mu`` and ``p.rho``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import HeadProjections, MultiHeadParams, bayesian_multihead, multihead
from .autodiff import Tape, Tensor
from .recurrent import GATE_NAMES, BgruCellParams, GruCellParams, decode, encode
from .variational import (
    GaussianVariational,
    KLAccumulator,
    NoiseSource,
    PriorSpec,
    draw,
    glorot_limit,
    init_variational,
)

VARIANTS = ("gru-ed", "bgru-ed", "mhatt", "bedma")
BAYESIAN = frozenset({"bgru-ed", "bedma"})
WITH_ATTENTION = frozenset({"mhatt", "bedma"})
DETERMINISTIC_TWIN = {"bedma": "mhatt", "bgru-ed": "gru-ed"}


class ConfigError(ValueError):
    """A configuration value violates its invariant; ``key`` names the field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    variant: str = "bedma"
    layers: int = 2
    hidden: int = 64
    heads: int = 2
    window: int = 6
    horizon: int = 6
    n_in: int = 1
    prior_mean: float = 0.0
    prior_std: float = 1.0
    init: str = "glorot"
    init_sigma: float = 0.05
    head_bias_init: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for key in ("layers", "hidden", "heads", "window", "horizon", "n_in"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        if self.hidden % self.heads:
            raise ConfigError("heads", f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if not self.prior_std > 0:
            raise ConfigError("prior_std", "must be positive")
        if not self.init_sigma > 0:
            raise ConfigError("init_sigma", "must be positive")
        if self.init not in ("glorot", "standard-normal"):
            raise ConfigError("init", f"unknown scheme {self.init!r}")

    @property
    def bayesian(self) -> bool:
        return self.variant in BAYESIAN

    @property
    def attention(self) -> bool:
        return self.variant in WITH_ATTENTION

    @property
    def head_width(self) -> int:
        return self.hidden // self.heads

    @property
    def prior(self) -> PriorSpec:
        return PriorSpec(self.prior_mean, self.prior_std)


@dataclass
class ParamSpec:
    name: str
    shape: tuple
    fan_in: int
    fan_out: int
    bias: bool = False


def _layout(cfg: ModelConfig) -> list[ParamSpec]:
    m = cfg.hidden
    specs = []

    def cell(prefix, n_in):
        for gate in ("z", "r", "h"):
            specs.append(ParamSpec(f"{prefix}.W_{gate}", (m, m + n_in), m + n_in, m))
            specs.append(ParamSpec(f"{prefix}.b_{gate}", (m,), m + n_in, m, bias=True))

    for layer in range(cfg.layers):
        cell(f"encoder.{layer}", cfg.n_in if layer == 0 else m)
    if cfg.attention:
        d = cfg.head_width
        for i in range(cfg.heads):
            for proj in ("w_q", "w_k", "w_v"):
                specs.append(ParamSpec(f"attention.head{i}.{proj}", (d, m), m, d))
        specs.append(ParamSpec("attention.w_c", (m, m), m, m))
    for layer in range(cfg.layers):
        cell(f"decoder.{layer}", m)
    specs.append(ParamSpec("head.w_y", (cfg.horizon, m), m, cfg.horizon))
    specs.append(ParamSpec("head.b_y", (cfg.horizon,), m, cfg.horizon, bias=True))
    return specs


def parameter_names(cfg: ModelConfig) -> list[str]:
    names = []
    for spec in _layout(cfg):
        if cfg.bayesian:
            names += [spec.name + ".mu", spec.name + ".rho"]
        else:
            names.append(spec.name)
    return names


@dataclass
class ForwardResult:
    y_hat: Tensor
    kl_total: Tensor
    leaves: dict = field(default_factory=dict)
    context: object = None


class _Pass:
    """Per-forward view of the parameters as tensors (tape leaves when tracking)."""

    def __init__(self, model: "Model", tape: Tape | None, noise: NoiseSource | None, with_kl: bool = True):
        self.model = model
        self.tape = tape
        self.noise = noise
        self.kl = KLAccumulator(model.config.prior) if model.config.bayesian and with_kl else None
        self.leaves: dict[str, Tensor] = {}

    def tensor(self, name: str) -> Tensor:
        value = self.model.params[name]
        t = self.tape.variable(value) if self.tape is not None else Tensor(value)
        self.leaves[name] = t
        return t

    def param(self, base: str):
        if self.model.config.bayesian:
            return GaussianVariational(self.tensor(base + ".mu"), self.tensor(base + ".rho"), label=base)
        return self.tensor(base)

    def cell(self, prefix: str):
        values = [self.param(f"{prefix}.{g}") for g in GATE_NAMES]
        return BgruCellParams(*values) if self.model.config.bayesian else GruCellParams(*values)


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        expected = parameter_names(config)
        missing = [n for n in expected if n not in params]
        extra = [n for n in params if n not in set(expected)]
        if missing or extra:
            raise ValueError(f"parameter names do not match the layout: missing {missing}, extra {extra}")
        shapes = {}
        for spec in _layout(config):
            shapes[spec.name] = spec.shape
        # every entry of ``params`` is a view into the single buffer ``flat``
        views, offset = [], 0
        for name in expected:
            arr = np.asarray(params[name], dtype=np.float64)
            base = name.rsplit(".", 1)[0] if config.bayesian else name
            if arr.shape != tuple(shapes[base]):
                raise ValueError(f"{name}: expected shape {shapes[base]}, got {arr.shape}")
            views.append((name, offset, arr))
            offset += arr.size
        self.flat = np.empty(offset)
        self.params: dict[str, np.ndarray] = {}
        for name, start, arr in views:
            view = self.flat[start: start + arr.size].reshape(arr.shape)
            view[...] = arr
            self.params[name] = view
        # free-form extras carried through checkpoints (normalization, training metadata)
        self.extras: dict = {}

    @property
    def variant(self) -> str:
        return self.config.variant

    def copy(self) -> "Model":
        twin = Model(self.config, {k: v.copy() for k, v in self.params.items()})
        twin.extras = json.loads(json.dumps(self.extras))
        return twin

    def n_parameters(self) -> int:
        return int(self.flat.size)

    def flatten(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        """Pack per-name arrays (gradients, say) in ``flat`` order."""
        return np.concatenate([np.ravel(arrays[name]) for name in self.params])

    def run(self, X, noise: NoiseSource | None = None, tape: Tape | None = None,
            with_kl: bool = True) -> ForwardResult:
        """Forward pass on ``X[t, n_in]`` or a batch ``X[B, t, n_in]``.

        Bayesian variants draw every weight once from ``noise`` for the whole
        pass, so all windows in a batch share one network sample.  With
        ``with_kl=False`` the KL terms are skipped and ``kl_total`` is 0.
        """
        cfg = self.config
        X = ad.as_tensor(X)
        if X.ndim == 1 and cfg.n_in == 1:
            X = ad.reshape(X, (-1, 1))
        if X.ndim not in (2, 3) or X.shape[-2] != cfg.window or X.shape[-1] != cfg.n_in:
            raise ValueError(
                f"window must have shape [{cfg.window}, {cfg.n_in}] (optionally batched), got {X.shape}"
            )
        if cfg.bayesian and noise is None:
            raise ValueError(f"variant {cfg.variant} needs a noise source")
        p = _Pass(self, tape, noise, with_kl)

        enc = [p.cell(f"encoder.{layer}") for layer in range(cfg.layers)]
        H = encode(X, enc, noise, p.kl).H
        context = None
        if cfg.attention:
            heads = [
                HeadProjections(*(p.param(f"attention.head{i}.{proj}") for proj in ("w_q", "w_k", "w_v")))
                for i in range(cfg.heads)
            ]
            mh = MultiHeadParams(heads, p.param("attention.w_c"))
            context = bayesian_multihead(H, mh, noise, p.kl) if cfg.bayesian else multihead(H, mh)
            C = context.C
        else:
            C = H
        dec = [p.cell(f"decoder.{layer}") for layer in range(cfg.layers)]
        h_last = decode(C, dec, noise, p.kl)

        w_y = p.param("head.w_y")
        b_y = p.param("head.b_y")
        if cfg.bayesian:
            w_y, b_y = draw(w_y, noise, p.kl), draw(b_y, noise, p.kl)
        single = h_last.ndim == 1
        h2 = ad.reshape(h_last, (1, -1)) if single else h_last
        pre = ad.add(ad.matmul(h2, ad.transpose(w_y)), ad.broadcast_to(b_y, (h2.shape[0], cfg.horizon)))
        y_hat = ad.relu(pre)
        if single:
            y_hat = ad.reshape(y_hat, (cfg.horizon,))
        kl_total = p.kl.total() if p.kl is not None else Tensor(0.0)
        return ForwardResult(y_hat, kl_total, p.leaves, context)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for spec in _layout(cfg):
        bias_level = cfg.head_bias_init if spec.name == "head.b_y" else 0.0
        if cfg.bayesian:
            mu, rho = init_variational(spec.shape, spec.fan_in, spec.fan_out, rng,
                                       sigma0=cfg.init_sigma, scheme=cfg.init, bias=spec.bias)
            if spec.bias and cfg.init == "glorot":
                mu = mu + bias_level
            params[spec.name + ".mu"] = mu
            params[spec.name + ".rho"] = rho
        elif spec.bias:
            params[spec.name] = np.full(spec.shape, bias_level)
        else:
            k = glorot_limit(spec.fan_in, spec.fan_out)
            params[spec.name] = rng.uniform(-k, k, size=spec.shape)
    return Model(cfg, params)


def forward(model: Model, window, noise: NoiseSource | None = None) -> tuple[Tensor, Tensor]:
    res = model.run(window, noise)
    return res.y_hat, res.kl_total


def to_deterministic(model: Model) -> Model:
    """Point-weight twin whose weights are the posterior means."""
    if not model.config.bayesian:
        return model.copy()
    cfg = ModelConfig(**{**asdict(model.config), "variant": DETERMINISTIC_TWIN[model.variant]})
    params = {name[: -len(".mu")]: v.copy() for name, v in model.params.items() if name.endswith(".mu")}
    return Model(cfg, params)


# ----------------------------------------------------------------- prediction


@dataclass
class PredictionResult:
    mean: np.ndarray
    variance: np.ndarray
    samples: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @property
    def interval(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.std
        return self.mean - 2.0 * s, self.mean + 2.0 * s


def predict_mc(model: Model, window, n_mc: int = 30, seed: int = 0) -> PredictionResult:
    """Monte-Carlo predictive mean and population variance over ``n_mc`` weight draws."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if not model.config.bayesian:
        y = model.run(window).y_hat.data
        samples = np.broadcast_to(y, (n_mc,) + y.shape).copy()
        return PredictionResult(y.copy(), np.zeros_like(y), samples)
    root = NoiseSource(seed)
    samples = np.stack([model.run(window, root.spawn(k), with_kl=False).y_hat.data for k in range(n_mc)])
    mean = samples.mean(axis=0)
    variance = ((samples - mean) ** 2).mean(axis=0)
    flat = np.all(samples == samples[0], axis=0)
    mean = np.where(flat, samples[0], mean)
    variance = np.where(flat, 0.0, variance)
    return PredictionResult(mean, variance, samples)


# ----------------------------------------------------------------- checkpoints

MAGIC = b"BSFC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> None:
    meta = {"config": asdict(model.config), "extras": model.extras}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<Q", len(blob))
    out += blob
    out += struct.pack("<I", len(model.params))
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", value.ndim)
        out += struct.pack(f"<{value.ndim}Q", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"corrupt length: needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, variant: str | None = None) -> Model:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {FORMAT_VERSION}")
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from exc
    cfg = ModelConfig(**meta["config"])
    if variant is not None and variant != cfg.variant:
        raise CheckpointError(f"variant mismatch: checkpoint holds {cfg.variant}, requested {variant}")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in params:
            raise CheckpointError(f"duplicate parameter {name}")
        params[name] = values
    if r.pos != len(r.data):
        raise CheckpointError(f"corrupt length: {len(r.data) - r.pos} trailing bytes")
    expected = parameter_names(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names do not match: missing {missing}, extra {extra}")
    try:
        model = Model(cfg, params)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    model.extras = meta.get("extras", {})
    return model
