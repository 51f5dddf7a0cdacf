"""Additive attention and (Bayesian) multi-head self-attention over encoder states.

Multi-head attention here is self-attention with queries, keys and values
all equal to the encoder output ``H[t, m]``.  Head ``i`` projects ``H`` to
width ``d = m / h`` with weight-only maps, the heads are concatenated in
index order and mapped back to width ``m`` by an output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .recurrent import EncoderOutput
from .variational import GaussianVariational, KLAccumulator, NoiseSource, draw


def _as_matrix(H) -> Tensor:
    if isinstance(H, EncoderOutput):
        H = H.H
    return ad.as_tensor(H)


@dataclass
class AdditiveAttentionParams:
    """``e_j = v_e . tanh(W_e s + U_e h_j)``; ``W_e`` is [a, m_s], ``U_e`` is [a, m], ``v_e`` is [a]."""

    v_e: Tensor
    W_e: Tensor
    U_e: Tensor

    def __post_init__(self):
        self.v_e, self.W_e, self.U_e = (ad.as_tensor(a) for a in (self.v_e, self.W_e, self.U_e))
        a = self.v_e.shape[0]
        if self.v_e.ndim != 1 or self.W_e.shape[0] != a or self.U_e.shape[0] != a:
            raise ad.ShapeError(
                f"v_e {self.v_e.shape}, W_e {self.W_e.shape}, U_e {self.U_e.shape} do not share a score width"
            )


def additive_attention(s_prev, H, p: AdditiveAttentionParams) -> tuple[Tensor, Tensor]:
    """Context vector and attention weights for one decoder state."""
    H = _as_matrix(H)
    s_prev = ad.as_tensor(s_prev)
    if H.ndim != 2 or H.shape[0] == 0:
        raise ValueError("additive attention needs a non-empty [t, m] annotation matrix")
    t = H.shape[0]
    a = p.v_e.shape[0]
    keys = ad.matmul(p.U_e, ad.transpose(H))  # [a, t]
    query = ad.matmul(p.W_e, ad.reshape(s_prev, (-1, 1)))  # [a, 1]
    hidden = ad.tanh(ad.add(keys, ad.broadcast_to(query, (a, t))))
    scores = ad.matmul(ad.reshape(p.v_e, (1, a)), hidden)  # [1, t]
    alpha = ad.softmax_rows(scores)
    context = ad.matmul(alpha, H)
    return ad.reshape(context, (-1,)), ad.reshape(alpha, (-1,))


def scaled_dot_head(Q, K, V) -> tuple[Tensor, Tensor]:
    """``softmax(Q K^T / sqrt(d)) V`` on [t, d] (or batched [B, t, d]) inputs."""
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    d = Q.shape[-1]
    if d == 0:
        raise ad.ShapeError("head width d must be positive")
    if K.shape != Q.shape or V.shape[:-1] != K.shape[:-1]:
        raise ad.ShapeError(f"Q {Q.shape}, K {K.shape}, V {V.shape} are not aligned")
    scores = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(d))
    weights = ad.softmax_rows(scores)
    return ad.matmul(weights, V), weights


@dataclass
class ContextMatrix:
    C: Tensor
    heads: list = field(default_factory=list)
    weights: list = field(default_factory=list)


@dataclass
class HeadProjections:
    w_q: object
    w_k: object
    w_v: object


@dataclass
class MultiHeadParams:
    """Per-head ``d x m`` projections and the ``m x m`` output map.

    Entries are :class:`GaussianVariational` for the Bayesian layer or plain
    tensors for the deterministic one.
    """

    heads: list
    w_c: object

    def __post_init__(self):
        if not self.heads:
            raise ValueError("need at least one head")
        m = _shape(self.w_c)[0]
        h = len(self.heads)
        if m % h:
            raise ValueError(f"hidden width {m} is not divisible by {h} heads")
        d = m // h
        for hp in self.heads:
            for w in (hp.w_q, hp.w_k, hp.w_v):
                if _shape(w) != (d, m):
                    raise ad.ShapeError(f"head projection must be ({d}, {m}), got {_shape(w)}")
        if _shape(self.w_c) != (m, m):
            raise ad.ShapeError(f"output projection must be ({m}, {m}), got {_shape(self.w_c)}")

    @property
    def h(self) -> int:
        return len(self.heads)

    @property
    def m(self) -> int:
        return _shape(self.w_c)[0]

    @property
    def d(self) -> int:
        return self.m // self.h


def _shape(w) -> tuple[int, ...]:
    return w.shape if isinstance(w, (GaussianVariational, Tensor)) else np.shape(w)


def multihead(H, p: MultiHeadParams) -> ContextMatrix:
    """Deterministic multi-head self-attention with point-valued projections."""
    H = _as_matrix(H)
    heads, weights = [], []
    for hp in p.heads:
        q = ad.matmul(H, ad.transpose(ad.as_tensor(hp.w_q)))
        k = ad.matmul(H, ad.transpose(ad.as_tensor(hp.w_k)))
        v = ad.matmul(H, ad.transpose(ad.as_tensor(hp.w_v)))
        head, w = scaled_dot_head(q, k, v)
        heads.append(head)
        weights.append(w)
    joined = ad.concat(heads, axis=-1) if len(heads) > 1 else heads[0]
    C = ad.matmul(joined, ad.transpose(ad.as_tensor(p.w_c)))
    return ContextMatrix(C, heads, weights)


def sample_multihead(p: MultiHeadParams, noise: NoiseSource,
                     kl: KLAccumulator | None = None) -> MultiHeadParams:
    def pick(w):
        return draw(w, noise, kl) if isinstance(w, GaussianVariational) else ad.as_tensor(w)

    heads = [HeadProjections(pick(hp.w_q), pick(hp.w_k), pick(hp.w_v)) for hp in p.heads]
    return MultiHeadParams(heads, pick(p.w_c))


def bayesian_multihead(H, p: MultiHeadParams, noise: NoiseSource,
                       kl: KLAccumulator | None = None) -> ContextMatrix:
    """Sample every projection once, then run :func:`multihead` with the draws."""
    return multihead(H, sample_multihead(p, noise, kl))
