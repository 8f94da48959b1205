"""Self-attention fusion of photo features into user / attraction representations.

A photo stack holds up to ``capacity`` features in ascending time order; short
stacks are filled with copies of the mean of their real rows. Scores are
``w . tanh(V row)`` and the pooled vector is the softmax-weighted row sum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

POOLING_MODES = ("attention", "max", "average")


@dataclass
class AttentionParams:
    w: np.ndarray  # (omega,)
    V: np.ndarray  # (omega, d)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.V.ndim != 2 or self.w.shape != (self.V.shape[0],):
            raise ValueError("attention needs w of length omega and V of shape (omega, d)")

    @property
    def omega(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.V.shape[1]


def init_attention(d: int, omega: int = 10, rng: np.random.Generator | int | None = 0) -> AttentionParams:
    rng = np.random.default_rng(rng)
    return AttentionParams(
        rng.uniform(-1.0 / np.sqrt(omega), 1.0 / np.sqrt(omega), size=omega),
        rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(omega, d)),
    )


@dataclass
class PhotoStack:
    rows: np.ndarray  # (capacity, d)
    real_count: int

    @property
    def capacity(self) -> int:
        return self.rows.shape[0]

    @property
    def real_rows(self) -> np.ndarray:
        return self.rows[: self.real_count]


def build_stack(features: Sequence, capacity: int) -> PhotoStack:
    """Stack time-ordered features; keep the most recent ``capacity`` or mean-pad."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("build_stack needs at least one feature vector")
    if capacity < 1:
        raise ValueError("capacity must be positive")
    if len(X) >= capacity:
        return PhotoStack(X[len(X) - capacity:].copy(), capacity)
    pad = np.repeat(X.mean(axis=0, keepdims=True), capacity - len(X), axis=0)
    return PhotoStack(np.vstack([X, pad]), len(X))


def _check(stack: PhotoStack, params: AttentionParams):
    if stack.rows.shape[1] != params.d:
        raise ValueError(f"stack feature size {stack.rows.shape[1]} != attention d {params.d}")


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(stack: PhotoStack, params: AttentionParams) -> np.ndarray:
    _check(stack, params)
    scores = np.tanh(stack.rows @ params.V.T) @ params.w
    return softmax(scores)


def pool(stack: PhotoStack, weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (stack.capacity,):
        raise ValueError(f"expected {stack.capacity} weights, got {weights.shape}")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    return weights @ stack.rows


def pool_variant(stack: PhotoStack, mode: str) -> np.ndarray:
    """Coordinate-wise max or mean over the real (non-padding) rows."""
    if mode == "max":
        return stack.real_rows.max(axis=0)
    if mode == "average":
        return stack.real_rows.mean(axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


def attention_backward(stack: PhotoStack, params: AttentionParams, upstream):
    """Gradients of ``upstream . pool(stack, attention_weights(stack))``.

    Returns ``(dw, dV, drows)`` where ``drows`` treats every stack row
    (padding included) as an independent input.
    """
    _check(stack, params)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (params.d,):
        raise ValueError("upstream gradient must have length d")
    out = attend_batch_backward(stack.rows[None], params, g[None])
    return out[0], out[1], out[2][0]


# -- batched forms used by training -----------------------------------------

def attend_batch(S: np.ndarray, params: AttentionParams):
    """Pooled rows and weights for a (n, N, d) batch of stacks."""
    Z = np.tanh(np.einsum("nkd,wd->nkw", S, params.V))
    a = softmax(Z @ params.w, axis=1)
    return np.einsum("nk,nkd->nd", a, S), a


def attend_batch_backward(S: np.ndarray, params: AttentionParams, G: np.ndarray):
    """(dw, dV, dS) for summed ``G . pooled`` over a batch of stacks."""
    Z = np.tanh(np.einsum("nkd,wd->nkw", S, params.V))
    a = softmax(Z @ params.w, axis=1)
    dS = a[:, :, None] * G[:, None, :]
    da = np.einsum("nkd,nd->nk", S, G)
    ds = a * (da - (a * da).sum(axis=1, keepdims=True))
    dw = np.einsum("nkw,nk->w", Z, ds)
    dpre = ds[:, :, None] * params.w[None, None, :] * (1.0 - Z * Z)
    dV = np.einsum("nkw,nkd->wd", dpre, S)
    dS += np.einsum("nkw,wd->nkd", dpre, params.V)
    return dw, dV, dS


@dataclass
class StackLayout:
    """Sparse maps from the photo feature matrix to a batch of stacks.

    ``mix`` sends (n_photos, d) features to (n_entities * capacity, d) stack
    rows, including copies of the mean for padding rows; ``mean`` averages real
    rows per entity; ``members`` lists each entity's real photo indices.
    """

    mix: sp.csr_matrix
    mean: sp.csr_matrix
    members: list[np.ndarray]
    capacity: int

    @property
    def n_entities(self) -> int:
        return len(self.members)

    def stacks(self, F: np.ndarray) -> np.ndarray:
        return (self.mix @ F).reshape(self.n_entities, self.capacity, F.shape[1])

    def stacks_backward(self, dS: np.ndarray) -> np.ndarray:
        return self.mix.T @ dS.reshape(-1, dS.shape[-1])


def stack_layout(groups: Sequence[Sequence[int]], times: np.ndarray, capacity: int, n_photos: int) -> StackLayout:
    """Layout for entities whose photos are ``groups[e]`` (indices into the photo matrix).

    Photos of each entity are ordered by ``times`` (ties by index) and
    truncated to the most recent ``capacity``. An empty group pools to zeros.
    """
    rows, cols, vals = [], [], []
    mrows, mcols, mvals = [], [], []
    members = []
    for e, group in enumerate(groups):
        group = np.asarray(group, dtype=np.int64)
        if len(group) == 0:
            # No photos left (all held out): every stack row stays zero.
            members.append(group)
            continue
        group = group[np.lexsort((group, times[group]))][-capacity:]
        members.append(group)
        k = len(group)
        base = e * capacity
        rows.extend(base + np.arange(k))
        cols.extend(group)
        vals.extend(np.ones(k))
        for r in range(k, capacity):
            rows.extend([base + r] * k)
            cols.extend(group)
            vals.extend(np.full(k, 1.0 / k))
        mrows.extend([e] * k)
        mcols.extend(group)
        mvals.extend(np.full(k, 1.0 / k))
    n = len(groups)
    mix = sp.csr_matrix((vals, (rows, cols)), shape=(n * capacity, n_photos))
    mean = sp.csr_matrix((mvals, (mrows, mcols)), shape=(n, n_photos))
    return StackLayout(mix, mean, members, capacity)


def pool_entities(F: np.ndarray, layout: StackLayout, mode: str, params: AttentionParams | None = None):
    """(n_entities, d) representations and a cache for :func:`pool_entities_backward`."""
    if mode == "attention":
        S = layout.stacks(F)
        out, _ = attend_batch(S, params)
        return out, S
    if mode == "average":
        return np.asarray(layout.mean @ F), None
    if mode == "max":
        out = np.empty((layout.n_entities, F.shape[1]))
        arg = np.empty((layout.n_entities, F.shape[1]), dtype=np.int64)
        for e, group in enumerate(layout.members):
            if len(group) == 0:
                out[e] = 0.0
                arg[e] = -1
                continue
            block = F[group]
            k = np.argmax(block, axis=0)
            arg[e] = group[k]
            out[e] = block[k, np.arange(F.shape[1])]
        return out, arg
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_entities_backward(G: np.ndarray, F: np.ndarray, layout: StackLayout, mode: str, cache, params=None):
    """Returns (dF, dw, dV); the attention gradients are None for max/average."""
    if mode == "attention":
        dw, dV, dS = attend_batch_backward(cache, params, G)
        return np.asarray(layout.stacks_backward(dS)), dw, dV
    if mode == "average":
        return np.asarray(layout.mean.T @ G), None, None
    dF = np.zeros_like(F)
    cols = np.broadcast_to(np.arange(F.shape[1]), cache.shape)
    live = cache >= 0
    np.add.at(dF, (cache[live], cols[live]), G[live])
    return dF, None, None
