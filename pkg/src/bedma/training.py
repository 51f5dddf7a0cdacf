"""Combined data-fit + KL loss, Adam, and the mini-batch training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import WindowedDataset
from .model import ConfigError, Model
from .variational import ZERO_NOISE, NoiseSource

logger = logging.getLogger(__name__)

LOSS_VARIANTS = ("mse", "mae")
KL_MODES = ("paper-alpha", "per-batch")


class NumericError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 12
    learning_rate: float = 0.001
    loss_variant: str = "mse"
    kl_weight_mode: str = "paper-alpha"
    n_mc_train: int = 1
    early_stop_patience: int = 10
    seed: int = 0
    clip_norm: float = 5.0
    val_fraction: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", f"must be positive, got {self.learning_rate}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError("loss_variant", f"choose from {LOSS_VARIANTS}")
        if self.kl_weight_mode not in KL_MODES:
            raise ConfigError("kl_weight_mode", f"choose from {KL_MODES}")
        if self.n_mc_train < 1:
            raise ConfigError("n_mc_train", "must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience", "must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction", "must lie in [0, 1)")


# ------------------------------------------------------------------- losses


def data_term(y_hat: Tensor, y, variant: str = "mse") -> Tensor:
    y = ad.as_tensor(y)
    if y_hat.shape != y.shape:
        raise ad.ShapeError(f"prediction {y_hat.shape} and target {y.shape} differ")
    diff = ad.sub(y_hat, y)
    if variant == "mse":
        return ad.mean(ad.square(diff))
    if variant == "mae":
        # |x| = relu(x) + relu(-x)
        return ad.mean(ad.add(ad.relu(diff), ad.relu(ad.neg(diff))))
    raise ValueError(f"unknown loss variant {variant!r}")


def combined_loss(y_hat: Tensor, y, kl_total, alpha: float, variant: str = "mse") -> Tensor:
    """``alpha * fit(y_hat, y) + kl_total / alpha``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return _weighted(data_term(y_hat, y, variant), ad.as_tensor(kl_total), alpha, 1.0 / alpha)


def _weighted(fit: Tensor, kl: Tensor, fit_weight: float, kl_weight: float) -> Tensor:
    return ad.add(ad.scale(fit, fit_weight), ad.scale(kl, kl_weight))


def loss_weights(mode: str, n_train: int, batch_size: int) -> tuple[float, float]:
    """(data weight, KL weight) for one mini-batch."""
    if mode == "paper-alpha":
        alpha = float(n_train * batch_size)
        return alpha, 1.0 / alpha
    if mode == "per-batch":
        return 1.0, 1.0 / math.ceil(n_train / batch_size)
    raise ValueError(f"unknown KL weighting {mode!r}")


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        params[name] -= (lr / c1) * m / denom
    return params


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


# ------------------------------------------------------------------- history


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    data_term: float
    kl_term: float
    val_loss: float
    seconds: float


HISTORY_FIELDS = ("epoch", "train_loss", "data_term", "kl_term", "val_loss", "seconds")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def column(self, key: str) -> list:
        return [getattr(r, key) for r in self.records]

    def to_csv(self, path=None, include_timing: bool = True) -> str:
        fields = HISTORY_FIELDS if include_timing else HISTORY_FIELDS[:-1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for rec in self.records:
            w.writerow([rec.epoch] + [repr(float(getattr(rec, f))) for f in fields[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


# -------------------------------------------------------------------- loop


def _batch_noise(seed: int, epoch: int, batch: int, k: int) -> NoiseSource:
    ss = np.random.SeedSequence(seed & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=(epoch, batch, k))
    return NoiseSource(int(ss.generate_state(2, np.uint64)[0]))


def _as_model_input(windows: np.ndarray) -> np.ndarray:
    return windows[..., None] if windows.ndim == 2 else windows


def validation_loss(model: Model, ds: WindowedDataset, variant: str = "mse", chunk: int = 1024) -> float:
    """Data-fit loss of the posterior-mean network (all noise set to zero)."""
    total, count = 0.0, 0
    for lo in range(0, len(ds), chunk):
        X = _as_model_input(ds.inputs[lo: lo + chunk])
        y = ds.targets[lo: lo + chunk]
        y_hat = model.run(X, ZERO_NOISE).y_hat.data
        err = y_hat - y
        total += float(np.sum(err * err if variant == "mse" else np.abs(err)))
        count += err.size
    return total / count


def split_validation(ds: WindowedDataset, fraction: float) -> tuple[WindowedDataset, WindowedDataset | None]:
    """Hold out the chronologically last ``fraction`` of windows."""
    n = len(ds)
    n_val = int(math.ceil(n * fraction)) if fraction > 0 else 0
    if n_val == 0 or n - n_val < 1:
        return ds, None
    return ds.subset(np.arange(n - n_val)), ds.subset(np.arange(n - n_val, n))


def train_step(model: Model, X: np.ndarray, y: np.ndarray, cfg: TrainConfig, state: AdamState,
               weights: tuple[float, float], noises: list) -> tuple[float, float, float]:
    tape = Tape()
    losses, fits, kls, leaf_sets = [], [], [], []
    for noise in noises:
        res = model.run(X, noise, tape)
        fit = data_term(res.y_hat, y, cfg.loss_variant)
        losses.append(_weighted(fit, res.kl_total, *weights))
        fits.append(fit.item())
        kls.append(res.kl_total.item())
        leaf_sets.append(res.leaves)
    loss = losses[0]
    for extra in losses[1:]:
        loss = ad.add(loss, extra)
    if len(losses) > 1:
        loss = ad.scale(loss, 1.0 / len(losses))
    value = loss.item()
    if not math.isfinite(value):
        return value, float(np.mean(fits)), float(np.mean(kls))
    g = ad.backward(tape, loss)
    flat_grad = model.flatten({name: g[leaf.node] for name, leaf in leaf_sets[0].items()})
    for leaves in leaf_sets[1:]:
        flat_grad += model.flatten({name: g[leaf.node] for name, leaf in leaves.items()})
    grads = {"flat": flat_grad}
    clip_global_norm(grads, cfg.clip_norm)
    adam_step({"flat": model.flat}, grads, state, cfg.learning_rate)
    return value, float(np.mean(fits)), float(np.mean(kls))


def train(dataset: WindowedDataset, model: Model, cfg: TrainConfig,
          validation: WindowedDataset | None = None, log_every: int = 0) -> tuple[Model, TrainHistory]:
    """Mini-batch training with Adam and early stopping on validation loss.

    Without an explicit ``validation`` set the last ``cfg.val_fraction`` of
    ``dataset`` is held out.  Returns the parameters of the best epoch.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.r != model.config.horizon:
        raise ValueError(f"dataset horizon {dataset.r} does not match model horizon {model.config.horizon}")
    if dataset.t != model.config.window:
        raise ValueError(f"dataset window {dataset.t} does not match model window {model.config.window}")
    if validation is None:
        fit_ds, val_ds = split_validation(dataset, cfg.val_fraction)
    else:
        fit_ds, val_ds = dataset, validation
    n = len(fit_ds)
    weights = loss_weights(cfg.kl_weight_mode, n, cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = TrainHistory()
    best = (math.inf, 0, model.flat.copy())
    X_all = _as_model_input(fit_ds.inputs)

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo: lo + cfg.batch_size]
            noises = [_batch_noise(cfg.seed, epoch, b, k) for k in range(cfg.n_mc_train)]
            if not model.config.bayesian:
                noises = [None]
            stats = train_step(model, X_all[idx], fit_ds.targets[idx], cfg, state, weights, noises)
            if not math.isfinite(stats[0]):
                raise NumericError(epoch, b, stats[0])
            sums += stats
            n_batches += 1
        means = sums / n_batches
        if val_ds is not None:
            val = validation_loss(model, val_ds, cfg.loss_variant)
        else:
            val = float(means[1])
        history.records.append(EpochRecord(epoch, *means, val, time.perf_counter() - t0))
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.6g fit %.6g kl %.6g val %.6g", epoch, *means, val)
        if val < best[0]:
            best = (val, epoch, model.flat.copy())
        elif epoch - best[1] >= cfg.early_stop_patience:
            break

    model.flat[:] = best[2]
    history.best_epoch = best[1]
    last = history.records[-1]
    model.extras["training"] = {
        "epochs_run": len(history),
        "best_epoch": best[1],
        "final_train_loss": last.train_loss,
        "best_val_loss": best[0],
        "seed": cfg.seed,
    }
    return model, history
