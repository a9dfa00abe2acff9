"""Convex-combination codeword search over a shared codebook.

Every sub-vector keeps ``n`` candidate codeword indices and ``n`` learnable
scores. Its quantized value is the softmax-weighted sum of the candidates, so
it always lies in their convex hull. Candidates are references into the
layer's shared codebook: a gradient reaching a candidate lands on the shared
codeword, which is what the final ``C[A]`` representation needs.

All per-sub-vector arrays are batched along axis 0 (one row per sub-vector,
row-major over the ``(row, slot)`` grid).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import config
from .errors import ContractError
from .kmeans import sq_distances


@dataclass
class ConvexConfig:
    n: int = config.NUM_CANDIDATES
    lam: float = config.REPLACE_THRESHOLD
    lr_codebook: float = config.LR_CODEBOOK
    lr_scores: float = config.LR_SCORES
    init_steps: int = 100
    replace_every: int = 1

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ContractError(f"replacement threshold must lie in (0, 1), got {self.lam}")
        if self.n < 1:
            raise ContractError(f"candidate count must be positive, got {self.n}")
        if self.replace_every < 1:
            raise ContractError("replace_every must be >= 1")


@dataclass
class SoftState:
    """Calibration-time representation of one layer.

    ``candidates`` and ``scores`` are ``(S, n)``; ``confirmed`` and
    ``confirmed_index`` are ``(S,)``. ``confirmed_index`` is -1 while a
    sub-vector is still soft.
    """

    candidates: np.ndarray
    scores: np.ndarray
    confirmed: np.ndarray = None
    confirmed_index: np.ndarray = None

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates, dtype=np.int64)
        self.scores = np.asarray(self.scores)
        if self.scores.dtype.kind != "f":
            self.scores = self.scores.astype(np.float32)
        s = self.candidates.shape[0]
        if self.confirmed is None:
            self.confirmed = np.zeros(s, dtype=bool)
        if self.confirmed_index is None:
            self.confirmed_index = np.full(s, -1, dtype=np.int64)

    @property
    def count(self) -> int:
        return self.candidates.shape[0]

    @property
    def n(self) -> int:
        return self.candidates.shape[1]

    def copy(self) -> "SoftState":
        return SoftState(
            self.candidates.copy(), self.scores.copy(), self.confirmed.copy(), self.confirmed_index.copy()
        )

    def effective_ratios(self) -> np.ndarray:
        """Softmax ratios, with confirmed rows replaced by their one-hot vector."""
        r = ratios(self.scores)
        if self.confirmed.any():
            rows = np.flatnonzero(self.confirmed)
            onehot = (self.candidates[rows] == self.confirmed_index[rows, None]).astype(r.dtype)
            r[rows] = onehot
        return r


def select_candidates(w: np.ndarray, cb: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` codewords nearest to each sub-vector, nearest first.

    ``w`` may be a single length-``d`` vector or an ``(S, d)`` batch. Ties are
    broken by the lower codeword index.
    """
    cb = np.asarray(cb)
    if n > cb.shape[0]:
        raise ContractError(f"cannot select {n} candidates from {cb.shape[0]} codewords")
    single = np.ndim(w) == 1
    dist = sq_distances(np.atleast_2d(w), cb)
    out = np.argsort(dist, axis=1, kind="stable")[:, :n]
    return out[0] if single else out


def ratios(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def init_scores(w: np.ndarray, candidates: np.ndarray, cb: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Proximity-weighted initial scores ``-dist^2 / T``.

    ``T`` is the mean squared distance from each sub-vector to its nearest
    candidate, so ratios start biased toward close codewords instead of
    uniform.
    """
    w = np.asarray(w, np.float64)
    c = np.asarray(cb, np.float64)[candidates]
    dist = ((w[:, None, :] - c) ** 2).sum(axis=-1)
    temp = float(dist[:, 0].mean())
    if temp <= 0:
        temp = float(dist.mean()) or 1.0
    return (-dist / temp).astype(dtype)


def new_state(w: np.ndarray, cb: np.ndarray, n: int, dtype=np.float32) -> SoftState:
    cand = select_candidates(w, cb, n)
    return SoftState(cand, init_scores(w, cand, cb, dtype))


def reconstruct(state: SoftState, cb: np.ndarray, r: np.ndarray = None) -> np.ndarray:
    """Quantized sub-vectors: convex combination of candidates, or the confirmed codeword.

    ``r`` may pass in ``ratios(state.scores)`` when the caller already has it.
    """
    cb = np.asarray(cb)
    r = (ratios(state.scores) if r is None else r).astype(cb.dtype, copy=False)
    out = np.einsum("sn,snd->sd", r, cb[state.candidates])
    if state.confirmed.any():
        rows = np.flatnonzero(state.confirmed)
        out[rows] = cb[state.confirmed_index[rows]]
    return out


def grad_scores(g_w: np.ndarray, state: SoftState, cb: np.ndarray, r: np.ndarray = None) -> np.ndarray:
    """Back-propagate ``dL/dw_hat`` through the convex combination to the scores.

    ``dL/dz_m = r_m * (a_m - sum_j r_j a_j)`` with ``a_j = g_w . c_j``.
    Confirmed sub-vectors get zero gradient.
    """
    cb = np.asarray(cb)
    r = ratios(state.scores) if r is None else r
    a = np.einsum("sd,snd->sn", g_w, cb[state.candidates])
    g = r * (a - (r * a).sum(axis=-1, keepdims=True))
    g[state.confirmed] = 0
    return g.astype(state.scores.dtype, copy=False)


def grad_codebook(g_w: np.ndarray, state: SoftState, k: int, r: np.ndarray = None) -> np.ndarray:
    """Accumulate ``dL/dC`` over every sub-vector that references each codeword.

    Soft sub-vectors contribute ``r_m * g_w`` to candidate ``m``; confirmed
    ones contribute ``g_w`` to their confirmed codeword. Accumulation runs in
    row-major sub-vector order, so the result is deterministic.
    """
    g_w = np.asarray(g_w)
    d = g_w.shape[1]
    r = ratios(state.scores) if r is None else r
    soft = ~state.confirmed
    contrib = r[soft, :, None] * g_w[soft, None, :]
    idx = state.candidates[soft].reshape(-1)
    contrib = contrib.reshape(-1, d)
    hard = state.confirmed
    if hard.any():
        idx = np.concatenate([idx, state.confirmed_index[hard]])
        contrib = np.concatenate([contrib, g_w[hard]])
    out = np.stack(
        [np.bincount(idx, weights=contrib[:, j].astype(np.float64), minlength=k) for j in range(d)], axis=1
    )
    return out.astype(g_w.dtype, copy=False)


# ---------------------------------------------------------------------------
# Adamax


@dataclass
class OptimState:
    """First moment and infinity-norm accumulators for one parameter array."""

    m: np.ndarray
    u: np.ndarray
    t: int = 0
    beta1: float = config.ADAMAX_BETA1
    beta2: float = config.ADAMAX_BETA2
    eps: float = config.ADAMAX_EPS

    @classmethod
    def like(cls, param: np.ndarray, **kw) -> "OptimState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adamax_step(param: np.ndarray, grad: np.ndarray, opt: OptimState, lr: float, mask=None) -> np.ndarray:
    """One in-place Adamax update of ``param``; returns ``param``.

    Rows where ``mask`` is False keep both their value and their accumulators.
    """
    if param.shape != grad.shape or opt.m.shape != param.shape:
        raise ContractError(f"shape mismatch: param {param.shape}, grad {grad.shape}, state {opt.m.shape}")
    opt.t += 1
    m = opt.beta1 * opt.m + (1 - opt.beta1) * grad
    u = np.maximum(opt.beta2 * opt.u, np.abs(grad))
    step = (lr / (1 - opt.beta1 ** opt.t)) * m / (u + opt.eps)
    if mask is None:
        opt.m[...] = m
        opt.u[...] = u
        param -= step.astype(param.dtype, copy=False)
    else:
        opt.m[mask] = m[mask]
        opt.u[mask] = u[mask]
        param[mask] -= step[mask].astype(param.dtype, copy=False)
    return param


def init_loss(w: np.ndarray, state: SoftState, cb: np.ndarray) -> float:
    diff = np.asarray(w, np.float64) - reconstruct(state, cb)
    return float(np.einsum("sd,sd->", diff, diff))


def init_phase(w: np.ndarray, state: SoftState, cb: np.ndarray, cfg: ConvexConfig):
    """Fit scores and codewords to the weights by minimising ``||W - W_hat||^2``.

    Runs ``cfg.init_steps`` Adamax steps. ``state`` and ``cb`` are updated in
    place. Returns the list of reconstruction errors, one before each step and
    one after the last.
    """
    k = cb.shape[0]
    w = np.asarray(w, dtype=cb.dtype)
    cb_opt = OptimState.like(cb)
    sc_opt = OptimState.like(state.scores)
    history = []
    for _ in range(cfg.init_steps):
        w_hat = reconstruct(state, cb)
        diff = w_hat - w
        history.append(float(np.einsum("sd,sd->", diff.astype(np.float64), diff)))
        g_w = 2 * diff
        gs = grad_scores(g_w, state, cb)
        gc = grad_codebook(g_w, state, k)
        adamax_step(state.scores, gs, sc_opt, cfg.lr_scores, mask=~state.confirmed)
        adamax_step(cb, gc, cb_opt, cfg.lr_codebook)
    history.append(init_loss(w, state, cb))
    return history


# ---------------------------------------------------------------------------
# Adaptive candidate replacement


def _sq_dist_fast(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # float64 norm expansion; only ranks codewords for replacement
    x = np.asarray(x, np.float64)
    c = np.asarray(c, np.float64)
    out = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(axis=1)[None, :]
    return np.maximum(out, 0.0, out=out)


@dataclass
class ReplaceInfo:
    replaced: int = 0
    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    max_shift: float = 0.0


def adaptive_replace(state: SoftState, cb: np.ndarray, lam: float, r: np.ndarray = None) -> ReplaceInfo:
    """Swap low-ratio candidates for codewords closer to the current reconstruction.

    A soft candidate whose ratio is below ``lam`` is re-pointed at the nearest
    codeword not held by another slot of the same sub-vector (which may be the
    candidate itself, in which case nothing changes). The slot keeps its score,
    so the reconstruction moves by ``r_m * (c_new - c_old)`` only. Slots are
    visited in ascending-ratio order, and a slot is skipped for this sweep once
    the replaced ratio mass would exceed ``lam``; each sweep therefore shifts a
    reconstruction by at most ``lam`` times the largest codeword distance.

    Updates ``state`` in place.
    """
    r = ratios(state.scores) if r is None else r
    low = (r < lam) & ~state.confirmed[:, None]
    rows = np.flatnonzero(low.any(axis=1))
    if rows.size == 0 or state.n >= cb.shape[0]:
        return ReplaceInfo()
    cand = state.candidates[rows]
    rr = r[rows]
    before = reconstruct(SoftState(cand, state.scores[rows]), cb, rr)
    dist = _sq_dist_fast(before, cb)
    ar = np.arange(rows.size)
    order = np.argsort(rr, axis=1, kind="stable")
    budget = np.zeros(rows.size)
    replaced = 0
    for j in range(state.n):
        slot = order[:, j]
        rj = rr[ar, slot]
        ok = (rj < lam) & (budget + rj <= lam)
        if not ok.any():
            continue
        sub = np.flatnonzero(ok)
        dmask = dist[sub].copy()
        held = cand[sub]
        for m in range(state.n):
            other = slot[sub] != m
            dmask[np.flatnonzero(other), held[other, m]] = np.inf
        best = np.argmin(dmask, axis=1)
        own = held[np.arange(sub.size), slot[sub]]
        better = dmask[np.arange(sub.size), best] < dist[sub, own]
        sub, best = sub[better], best[better]
        cand[sub, slot[sub]] = best
        budget[sub] += rj[sub]
        replaced += sub.size
    changed = np.flatnonzero(np.any(cand != state.candidates[rows], axis=1))
    state.candidates[rows] = cand
    after = reconstruct(SoftState(cand, state.scores[rows]), cb, rr)
    shift = np.sqrt(((after.astype(np.float64) - before) ** 2).sum(axis=1)).max()
    return ReplaceInfo(replaced, rows[changed], float(shift))
