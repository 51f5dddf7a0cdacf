"""GRU cells (point-valued and Bayesian) and multi-layer sequence encoding.

The recurrence, with ``[a, b]`` meaning concatenation::

    z = sigmoid(W_z [h, x] + b_z)
    r = sigmoid(W_r [h, x] + b_r)
    h~ = tanh(W_h [r * h, x] + b_h)
    h' = (1 - z) * h~ + z * h

Step functions accept a single vector ``x[n_in]`` or a batch ``x[B, n_in]``;
sequences are ``[t, n_in]`` or ``[B, t, n_in]``.  Bayesian cells draw their
weights once per sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .variational import GaussianVariational, KLAccumulator, NoiseSource, draw

GATE_NAMES = ("W_z", "b_z", "W_r", "b_r", "W_h", "b_h")


@dataclass
class GruCellParams:
    W_z: Tensor
    b_z: Tensor
    W_r: Tensor
    b_r: Tensor
    W_h: Tensor
    b_h: Tensor

    def __post_init__(self):
        for name in GATE_NAMES:
            setattr(self, name, ad.as_tensor(getattr(self, name)))
        m = self.W_z.shape[0]
        for w, b in ((self.W_z, self.b_z), (self.W_r, self.b_r), (self.W_h, self.b_h)):
            if w.ndim != 2 or w.shape != self.W_z.shape or b.shape != (m,):
                raise ad.ShapeError(
                    f"inconsistent gate shapes: W {w.shape}, b {b.shape}, expected W {self.W_z.shape}, b ({m},)"
                )

    @property
    def hidden(self) -> int:
        return self.W_z.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_z.shape[1] - self.hidden

    @classmethod
    def zeros(cls, m: int, n_in: int) -> "GruCellParams":
        w, b = np.zeros((m, m + n_in)), np.zeros(m)
        return cls(w, b, w, b, w, b)


@dataclass
class BgruCellParams:
    W_z: GaussianVariational
    b_z: GaussianVariational
    W_r: GaussianVariational
    b_r: GaussianVariational
    W_h: GaussianVariational
    b_h: GaussianVariational

    def __post_init__(self):
        labels = [getattr(self, n).label for n in GATE_NAMES]
        if len(set(labels)) != len(labels):
            raise ValueError(f"gate noise labels must be distinct, got {labels}")
        GruCellParams(*(getattr(self, n).mu for n in GATE_NAMES))

    @property
    def hidden(self) -> int:
        return self.W_z.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_z.shape[1] - self.hidden

    def sample(self, noise: NoiseSource, kl: KLAccumulator | None = None) -> GruCellParams:
        return GruCellParams(*(draw(getattr(self, n), noise, kl) for n in GATE_NAMES))


Cell = Union[GruCellParams, BgruCellParams]


@dataclass
class GateTrace:
    z: np.ndarray
    r: np.ndarray
    h_tilde: np.ndarray
    h: np.ndarray


@dataclass
class EncoderOutput:
    H: Tensor
    traces: list | None = None

    @property
    def t(self) -> int:
        return self.H.shape[-2]

    @property
    def m(self) -> int:
        return self.H.shape[-1]


class _Prepared:
    """Transposed weights and batch-broadcast biases, built once per sequence."""

    def __init__(self, p: GruCellParams, batch: int | None):
        self.m = p.hidden
        self.WzT, self.WrT, self.WhT = ad.transpose(p.W_z), ad.transpose(p.W_r), ad.transpose(p.W_h)
        if batch is None:
            shape = (1, self.m)
        else:
            shape = (batch, self.m)
        self.bz = ad.broadcast_to(p.b_z, shape)
        self.br = ad.broadcast_to(p.b_r, shape)
        self.bh = ad.broadcast_to(p.b_h, shape)


def _step(x: Tensor, h: Tensor, w: _Prepared):
    hx = ad.concat([h, x], axis=-1)
    z = ad.sigmoid(ad.add(ad.matmul(hx, w.WzT), w.bz))
    r = ad.sigmoid(ad.add(ad.matmul(hx, w.WrT), w.br))
    rhx = ad.concat([ad.mul(r, h), x], axis=-1)
    h_tilde = ad.tanh(ad.add(ad.matmul(rhx, w.WhT), w.bh))
    # (1 - z) * h~ + z * h, written as h~ + z * (h - h~)
    h_new = ad.add(h_tilde, ad.mul(z, ad.sub(h, h_tilde)))
    return h_new, z, r, h_tilde


def _check_step_shapes(x: Tensor, h: Tensor, p: GruCellParams):
    if x.shape[-1] != p.n_in or h.shape[-1] != p.hidden or x.shape[:-1] != h.shape[:-1]:
        raise ad.ShapeError(
            f"cell expects x[...,{p.n_in}] and h[...,{p.hidden}], got x {x.shape}, h {h.shape}"
        )


def _single_step(x, h_prev, p: GruCellParams):
    x, h_prev = ad.as_tensor(x), ad.as_tensor(h_prev)
    _check_step_shapes(x, h_prev, p)
    vector = x.ndim == 1
    if vector:
        x, h_prev = ad.reshape(x, (1, -1)), ad.reshape(h_prev, (1, -1))
    w = _Prepared(p, None if vector else x.shape[0])
    h, z, r, h_tilde = _step(x, h_prev, w)
    trace = GateTrace(*(np.squeeze(a.data, 0) if vector else a.data for a in (z, r, h_tilde, h)))
    if vector:
        h = ad.reshape(h, (-1,))
    return h, trace


def gru_cell_forward(x_t, h_prev, p: GruCellParams) -> tuple[Tensor, GateTrace]:
    return _single_step(x_t, h_prev, p)


def bgru_cell_forward(x_t, h_prev, p: BgruCellParams, noise: NoiseSource,
                      kl: KLAccumulator | None = None) -> tuple[Tensor, GateTrace]:
    return _single_step(x_t, h_prev, p.sample(noise, kl))


def _materialize(stack: Sequence[Cell], noise, kl) -> list[GruCellParams]:
    cells = []
    for cell in stack:
        if isinstance(cell, BgruCellParams):
            if noise is None:
                raise ValueError("a Bayesian cell needs a noise source")
            cells.append(cell.sample(noise, kl))
        else:
            cells.append(cell)
    return cells


def _run(X, stack: Sequence[Cell], noise, kl, keep_traces: bool, collect: bool):
    X = ad.as_tensor(X)
    if not stack:
        raise ValueError("cell stack is empty")
    if X.ndim not in (2, 3):
        raise ad.ShapeError(f"sequence must be [t, n_in] or [B, t, n_in], got {X.shape}")
    single = X.ndim == 2
    if single:
        X = ad.reshape(X, (1,) + X.shape)
    batch, t, n_in = X.shape
    if t == 0:
        raise ValueError("empty sequence")
    cells = _materialize(stack, noise, kl)
    if cells[0].n_in != n_in:
        raise ad.ShapeError(f"first layer expects {cells[0].n_in} inputs, sequence has {n_in}")
    for lower, upper in zip(cells, cells[1:]):
        if upper.n_in != lower.hidden:
            raise ad.ShapeError("layer widths do not chain")
    prepared = [_Prepared(c, batch) for c in cells]
    hs = [Tensor(np.zeros((batch, c.hidden))) for c in cells]
    outputs, traces = [], []
    for j in range(t):
        inp = X[:, j, :]
        for layer, w in enumerate(prepared):
            h, z, r, h_tilde = _step(inp, hs[layer], w)
            hs[layer] = h
            inp = h
        if collect:
            outputs.append(inp)
        if keep_traces:
            traces.append(GateTrace(z.data, r.data, h_tilde.data, inp.data))
    return outputs, hs[-1], traces, single


def encode(X, stack: Sequence[Cell], noise: NoiseSource | None = None,
           kl: KLAccumulator | None = None, keep_traces: bool = False) -> EncoderOutput:
    """Top-layer hidden state at every step, from zero initial state in every layer."""
    outputs, _, traces, single = _run(X, stack, noise, kl, keep_traces, collect=True)
    H = ad.stack(outputs, axis=1)
    if single:
        H = ad.reshape(H, H.shape[1:])
    return EncoderOutput(H, traces if keep_traces else None)


def decode(C, stack: Sequence[Cell], noise: NoiseSource | None = None,
           kl: KLAccumulator | None = None) -> Tensor:
    """Final top-layer hidden state after consuming ``C`` as an input sequence."""
    _, h_last, _, single = _run(C, stack, noise, kl, False, collect=False)
    if single:
        h_last = ad.reshape(h_last, (h_last.shape[-1],))
    return h_last
