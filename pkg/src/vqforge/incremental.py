"""Calibration loop with incremental confirmation of soft assignments.

Each optimizer step evaluates the task loss, the block-wise distillation loss
and (conditionally) the convergence regularizer, pushes gradients into the
scores and shared codebooks, sweeps low-ratio candidates, then hardens every
sub-vector whose largest ratio exceeds ``tau``. Hardened sub-vectors
reconstruct to their codeword verbatim, so the model the loop last evaluated is
the model ``C[A]`` describes.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence

import numpy as np

from . import config
from .convexopt import (
    ConvexConfig,
    OptimState,
    SoftState,
    adamax_step,
    adaptive_replace,
    grad_codebook,
    grad_scores,
    init_phase,
    new_state,
    ratios,
    reconstruct,
)
from .errors import ContractError, DivergenceError
from .harness.metrics import max_ratio_histogram
from .kmeans import Assignments, Codebook, fit as kmeans_fit, make_rng
from .weightio import ModelBundle, partition

log = logging.getLogger(__name__)


@dataclass
class CalibConfig:
    k: int = 256
    d: int = 4
    tau: float = config.CONFIRM_THRESHOLD
    max_epochs: int = 10
    batch_size: int = 128
    w_task: float = 1.0
    w_bkd: float = 1.0
    w_reg: float = 1.0
    enable_replacement: bool = True
    enable_incremental: bool = True
    seed: int = 0
    kmeans_iters: int = config.KMEANS_MAX_ITERS
    kmeans_tol: float = config.KMEANS_TOL
    shuffle: bool = True
    check_invariants: bool = False
    dump_path: Optional[str] = None

    def __post_init__(self):
        if not 0.5 < self.tau < 1:
            raise ContractError(f"confirmation threshold must lie in (0.5, 1), got {self.tau}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ContractError("batch_size must be >= 1 and max_epochs >= 0")


class ModelAdapter(Protocol):
    """What :func:`calibrate` needs from a model.

    ``forward`` returns ``(outputs, features, cache)``; ``outputs`` may be
    None for models without a task head, ``features`` is one array per
    distillation block. ``backward`` maps gradients w.r.t. outputs and
    features to a gradient per quantized weight matrix (same shapes).
    """

    layer_names: Sequence[str]

    def forward(self, x, weights: Dict[str, np.ndarray]): ...

    def backward(self, cache, grad_outputs, grad_features) -> Dict[str, np.ndarray]: ...


@dataclass
class CalibData:
    x: Any
    y: Optional[np.ndarray] = None

    def __len__(self):
        return _length(self.x)

    def take(self, idx) -> "CalibData":
        return CalibData(_take(self.x, idx), None if self.y is None else self.y[idx])


def _length(x):
    if isinstance(x, dict):
        return len(next(iter(x.values())))
    return len(x)


def _take(x, idx):
    if isinstance(x, dict):
        return {k: v[idx] for k, v in x.items()}
    return x[idx]


# ---------------------------------------------------------------------------
# Objectives


def loss_task(outputs: np.ndarray, targets: np.ndarray):
    """Mean squared error over all elements and its gradient w.r.t. ``outputs``."""
    if outputs.shape != targets.shape:
        raise ContractError(f"output shape {outputs.shape} != target shape {targets.shape}")
    diff = outputs.astype(np.float64) - targets
    n = diff.size
    return float(np.vdot(diff, diff) / n), (2.0 / n) * diff


def loss_bkd(fp_features: Sequence[np.ndarray], q_features: Sequence[np.ndarray]):
    """Sum over blocks of the squared feature distance, averaged over the batch."""
    if len(fp_features) != len(q_features):
        raise ContractError(f"{len(fp_features)} full-precision blocks vs {len(q_features)} quantized blocks")
    total = 0.0
    grads = []
    for fp, q in zip(fp_features, q_features):
        if fp.shape != q.shape:
            raise ContractError(f"block shape mismatch {fp.shape} vs {q.shape}")
        diff = q.astype(np.float64) - fp
        b = diff.shape[0]
        total += float(np.vdot(diff, diff)) / b
        grads.append((2.0 / b) * diff)
    return total, grads


def loss_reg(states: Sequence[SoftState], rs: Optional[Sequence[np.ndarray]] = None):
    """Convergence regularizer ``(1/S) sum_s sum_m r_m (1 - r_m)`` summed over layers.

    ``1/S`` is ``d / (o*i)`` for a layer with ``S`` sub-vectors. Confirmed
    sub-vectors are one-hot and contribute nothing. Returns the loss and one
    ``(S, n)`` score gradient per state. ``rs`` optionally supplies the
    ratios of each state.
    """
    total = 0.0
    grads = []
    for j, st in enumerate(states):
        r = (ratios(st.scores) if rs is None else rs[j]).astype(np.float64)
        soft = ~st.confirmed
        scale = 1.0 / st.count
        rsoft = r[soft]
        total += scale * float((rsoft * (1 - rsoft)).sum())
        sq = (rsoft * rsoft).sum(axis=1, keepdims=True)
        g = np.zeros_like(r)
        g[soft] = 2 * scale * rsoft * (sq - rsoft)
        grads.append(g)
    return total, grads


def combine_losses(l_task: float, l_bkd: float, l_reg: float, prev_l_reg: Optional[float]):
    """Total objective; the regularizer counts only when it grew since the last step.

    Returns ``(total, reg_included)``. With no previous value the regularizer
    is included.
    """
    include = prev_l_reg is None or l_reg > prev_l_reg
    return l_task + l_bkd + (l_reg if include else 0.0), include


# ---------------------------------------------------------------------------
# Confirmation


@dataclass
class ConfirmInfo:
    count: int
    truncation: float
    rows: np.ndarray
    errors: np.ndarray  # per confirmed row squared truncation error
    bounds: np.ndarray  # (1 - r_max)^2 * max_j ||c* - c_j||^2


def _harden(state: SoftState, cb: np.ndarray, rows: np.ndarray) -> ConfirmInfo:
    r = ratios(state.scores[rows])
    slot = np.argmax(r, axis=1)
    cand = state.candidates[rows]
    c = np.asarray(cb, np.float64)[cand]
    soft = np.einsum("sn,snd->sd", r.astype(np.float64), c)
    star = c[np.arange(rows.size), slot]
    err = ((star - soft) ** 2).sum(axis=1)
    spread = ((star[:, None, :] - c) ** 2).sum(axis=-1).max(axis=1)
    rmax = r[np.arange(rows.size), slot].astype(np.float64)
    state.confirmed[rows] = True
    state.confirmed_index[rows] = cand[np.arange(rows.size), slot]
    return ConfirmInfo(int(rows.size), float(err.sum()), rows, err, (1 - rmax) ** 2 * spread)


def confirm_step(state: SoftState, cb: np.ndarray, tau: float, r: np.ndarray = None) -> ConfirmInfo:
    """Harden every soft sub-vector whose largest ratio exceeds ``tau``."""
    r = ratios(state.scores) if r is None else r
    rows = np.flatnonzero(~state.confirmed & (r.max(axis=1) > tau))
    return _harden(state, cb, rows)


def finalize_force_confirm(state: SoftState, cb: np.ndarray) -> ConfirmInfo:
    """Harden whatever is still soft to its arg-max candidate (lowest slot on ties)."""
    return _harden(state, cb, np.flatnonzero(~state.confirmed))


def hard_indices(state: SoftState) -> np.ndarray:
    if not state.confirmed.all():
        raise ContractError("state still has soft sub-vectors")
    return state.confirmed_index.copy()


# ---------------------------------------------------------------------------
# Calibration driver


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    loss_task: float
    loss_bkd: float
    loss_reg: float
    reg_included: int
    confirmed_fraction: float
    newly_confirmed: int
    truncation_error: float
    replaced: int
    histogram: List[int]


@dataclass
class InvariantStats:
    checks: int = 0
    max_simplex_error: float = 0.0
    min_ratio: float = 1.0
    hull_violations: int = 0
    max_hull_excess: float = 0.0
    replacement_sweeps: int = 0
    max_replacement_ratio: float = 0.0  # observed shift / (lam * max pairwise codeword distance)
    truncation_checks: int = 0
    max_truncation_ratio: float = 0.0  # observed truncation / its bound


@dataclass
class CalibReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    reg_trace: List[bool] = field(default_factory=list)
    histogram_edges: List[float] = field(default_factory=list)
    init_losses: Dict[str, List[float]] = field(default_factory=dict)
    total_steps: int = 0
    confirmed_by_threshold: int = 0
    forced: int = 0
    residual_truncation: float = 0.0
    final_calibration_task_loss: float = float("nan")
    final_calibration_loss: float = float("nan")
    final_inference_task_loss: float = float("nan")
    final_inference_loss: float = float("nan")
    weights_consistent: bool = False
    invariants: InvariantStats = field(default_factory=InvariantStats)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerCalib:
    name: str
    rows: int
    cols: int
    d: int
    vectors: np.ndarray  # fp sub-vectors (S, d)
    codebook: np.ndarray  # (k, d) float32, learned in place
    state: SoftState
    cb_opt: OptimState = None
    sc_opt: OptimState = None

    def weight(self, r: np.ndarray = None) -> np.ndarray:
        return reconstruct(self.state, self.codebook, r).reshape(self.rows, self.cols)

    def hard_weight(self, indices) -> np.ndarray:
        return self.codebook[np.asarray(indices).reshape(-1)].reshape(self.rows, self.cols)


@dataclass
class CalibResult:
    codebooks: Dict[str, Codebook]
    assignments: Dict[str, Assignments]
    report: CalibReport
    layers: Dict[str, LayerCalib]
    calibration_weights: Dict[str, np.ndarray]
    inference_weights: Dict[str, np.ndarray]


def evaluate(adapter, weights, data: CalibData, fp_features=None, batch_size: int = 1024):
    """Task and distillation loss of ``adapter`` under ``weights`` over all of ``data``."""
    n = len(data)
    fp_weights = getattr(adapter, "fp_weights", None)
    lt = lb = 0.0
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(n, lo + batch_size))
        part = data.take(idx)
        out, feats, _ = adapter.forward(part.x, weights)
        if fp_features is None:
            _, fpf, _ = adapter.forward(part.x, fp_weights)
        else:
            fpf = [f[idx] for f in fp_features]
        frac = len(idx) / n
        if out is not None and part.y is not None:
            lt += loss_task(out, part.y)[0] * frac
        lb += loss_bkd(fpf, feats)[0] * frac
    return lt, lb


def _check_invariants(layers, stats: InvariantStats, tol: float = 1e-6):
    stats.checks += 1
    for lc in layers:
        st = lc.state
        soft = ~st.confirmed
        if not soft.any():
            continue
        r = ratios(st.scores[soft])
        stats.max_simplex_error = max(stats.max_simplex_error, float(np.abs(r.sum(axis=1) - 1).max()))
        stats.min_ratio = min(stats.min_ratio, float(r.min()))
        c = lc.codebook[st.candidates[soft]].astype(np.float64)
        w_hat = reconstruct(st, lc.codebook)[soft].astype(np.float64)
        scale = max(1.0, float(np.abs(c).max()))
        lo_ex = c.min(axis=1) - w_hat
        hi_ex = w_hat - c.max(axis=1)
        excess = float(max(lo_ex.max(), hi_ex.max()))
        bary = float(np.abs(np.einsum("sn,snd->sd", r.astype(np.float64), c) - w_hat).max())
        stats.max_hull_excess = max(stats.max_hull_excess, excess, bary)
        if excess > tol * scale or bary > tol * scale or r.min() < 0:
            stats.hull_violations += 1


def _max_pairwise(cb: np.ndarray) -> float:
    c = cb.astype(np.float64)
    g = c @ c.T
    n2 = np.diag(g)
    return float(np.sqrt(max(0.0, (n2[:, None] + n2[None, :] - 2 * g).max())))


def calibrate(
    bundle: ModelBundle,
    adapter: ModelAdapter,
    data: CalibData,
    cfg: Optional[CalibConfig] = None,
    convex: Optional[ConvexConfig] = None,
    codebooks: Optional[Dict[str, Codebook]] = None,
    eval_data: Optional[CalibData] = None,
) -> CalibResult:
    """Quantize every layer of ``bundle`` that ``adapter`` exposes.

    ``codebooks`` seeds the shared codebook per layer; missing layers are
    seeded with k-means++ and refined with Lloyd. Final losses are measured on
    ``eval_data`` (default: ``data``) twice: with the weights the calibration
    loop ended on, and with ``C[A]`` after any forced confirmations.
    """
    cfg = cfg or CalibConfig()
    convex = convex or ConvexConfig()
    codebooks = dict(codebooks or {})
    eval_data = eval_data if eval_data is not None else data
    report = CalibReport()

    layers: List[LayerCalib] = []
    for li, name in enumerate(adapter.layer_names):
        w = bundle[name]
        table = partition(w, cfg.d)
        if name not in codebooks:
            codebooks[name], _, _ = kmeans_fit(table, cfg.k, cfg.seed + li, cfg.kmeans_iters, cfg.kmeans_tol)
        cb = codebooks[name].entries.copy()
        if convex.n > cb.shape[0]:
            raise ContractError(f"n={convex.n} candidates exceeds codebook size {cb.shape[0]}")
        state = new_state(table.vectors, cb, convex.n)
        report.init_losses[name] = init_phase(table.vectors, state, cb, convex)
        lc = LayerCalib(name, w.rows, w.cols, cfg.d, table.vectors, cb, state)
        lc.cb_opt = OptimState.like(cb)
        lc.sc_opt = OptimState.like(state.scores)
        layers.append(lc)

    fp_weights = {name: bundle[name].values for name in adapter.layer_names}
    n = len(data)
    _, fp_all, _ = adapter.forward(data.x, fp_weights)
    rng = make_rng(cfg.seed)
    prev_reg = None
    stats = report.invariants
    edges = None

    def total_soft():
        return sum(int((~lc.state.confirmed).sum()) for lc in layers)

    total_subvectors = sum(lc.state.count for lc in layers)
    done = total_soft() == 0 or cfg.max_epochs == 0
    for epoch in range(cfg.max_epochs):
        if done:
            break
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        acc = dict(steps=0, lt=0.0, lb=0.0, lr=0.0, inc=0, new=0, trunc=0.0, rep=0)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = data.take(idx)
            rs = [ratios(lc.state.scores) for lc in layers]
            weights = {lc.name: lc.weight(r) for lc, r in zip(layers, rs)}
            out, feats, cache = adapter.forward(batch.x, weights)
            if out is not None and batch.y is not None:
                lt, g_out = loss_task(out, batch.y)
            else:
                lt, g_out = 0.0, None
            lb, g_feats = loss_bkd([f[idx] for f in fp_all], feats)
            lr_val, g_reg = loss_reg([lc.state for lc in layers], rs)
            total, include = combine_losses(cfg.w_task * lt, cfg.w_bkd * lb, cfg.w_reg * lr_val, prev_reg)
            if not np.isfinite(total):
                dump = {f"{lc.name}/{k}": v for lc in layers
                        for k, v in (("codebook", lc.codebook), ("scores", lc.state.scores),
                                     ("candidates", lc.state.candidates))}
                if cfg.dump_path:
                    np.savez(cfg.dump_path, **dump)
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {report.total_steps}", dump)
            prev_reg = lr_val
            report.reg_trace.append(include)

            if g_out is not None:
                g_out = cfg.w_task * g_out
            g_feats = [cfg.w_bkd * g for g in g_feats]
            grads = adapter.backward(cache, g_out, g_feats)
            for lc, gr, r in zip(layers, g_reg, rs):
                g_w = np.asarray(grads[lc.name], dtype=np.float32).reshape(-1, lc.d)
                gs = grad_scores(g_w, lc.state, lc.codebook, r)
                if include:
                    gs = gs + (cfg.w_reg * gr).astype(gs.dtype)
                gc = grad_codebook(g_w, lc.state, lc.codebook.shape[0], r)
                adamax_step(lc.state.scores, gs, lc.sc_opt, convex.lr_scores, mask=~lc.state.confirmed)
                adamax_step(lc.codebook, gc, lc.cb_opt, convex.lr_codebook)

            report.total_steps += 1
            rs = [ratios(lc.state.scores) for lc in layers]
            if cfg.check_invariants:
                _check_invariants(layers, stats)
            if cfg.enable_replacement and report.total_steps % convex.replace_every == 0:
                for lc, r in zip(layers, rs):
                    info = adaptive_replace(lc.state, lc.codebook, convex.lam, r)
                    acc["rep"] += info.replaced
                    if cfg.check_invariants and info.replaced:
                        stats.replacement_sweeps += 1
                        bound = convex.lam * _max_pairwise(lc.codebook)
                        if bound > 0:
                            stats.max_replacement_ratio = max(stats.max_replacement_ratio, info.max_shift / bound)
            if cfg.enable_incremental:
                for lc, r in zip(layers, rs):
                    info = confirm_step(lc.state, lc.codebook, cfg.tau, r)
                    acc["new"] += info.count
                    acc["trunc"] += info.truncation
                    if cfg.check_invariants and info.count:
                        stats.truncation_checks += info.count
                        ok = info.bounds > 0
                        if ok.any():
                            stats.max_truncation_ratio = max(
                                stats.max_truncation_ratio, float((info.errors[ok] / info.bounds[ok]).max()))
                        elif info.errors.max() > 0:
                            stats.max_truncation_ratio = float("inf")
                    report.confirmed_by_threshold += info.count

            acc["steps"] += 1
            acc["lt"] += lt
            acc["lb"] += lb
            acc["lr"] += lr_val
            acc["inc"] += int(include)
            if total_soft() == 0:
                done = True
                break

        edges, counts = max_ratio_histogram([lc.state for lc in layers], convex.n)
        s = max(1, acc["steps"])
        report.epochs.append(EpochRecord(
            epoch=epoch,
            steps=acc["steps"],
            loss_task=acc["lt"] / s,
            loss_bkd=acc["lb"] / s,
            loss_reg=acc["lr"] / s,
            reg_included=acc["inc"],
            confirmed_fraction=1 - total_soft() / total_subvectors,
            newly_confirmed=acc["new"],
            truncation_error=acc["trunc"],
            replaced=acc["rep"],
            histogram=[int(c) for c in counts],
        ))
        log.info("epoch %d: L_t=%.4g L_bkd=%.4g L_r=%.4g confirmed=%.3f", epoch, acc["lt"] / s,
                 acc["lb"] / s, acc["lr"] / s, report.epochs[-1].confirmed_fraction)

    if edges is None:
        edges, _ = max_ratio_histogram([lc.state for lc in layers], convex.n)
    report.histogram_edges = [float(e) for e in edges]

    calib_weights = {lc.name: lc.weight() for lc in layers}
    _, fp_eval, _ = adapter.forward(eval_data.x, fp_weights)
    lt_c, lb_c = evaluate(adapter, calib_weights, eval_data, fp_eval)
    report.final_calibration_task_loss = lt_c
    report.final_calibration_loss = lt_c + lb_c

    out_cb, out_as, inf_weights = {}, {}, {}
    for lc in layers:
        info = finalize_force_confirm(lc.state, lc.codebook)
        report.forced += info.count
        report.residual_truncation += info.truncation
        idx = hard_indices(lc.state)
        out_cb[lc.name] = Codebook(lc.codebook.copy())
        out_as[lc.name] = Assignments(idx.reshape(lc.rows, lc.cols // lc.d), lc.codebook.shape[0])
        inf_weights[lc.name] = lc.hard_weight(idx)
    lt_i, lb_i = evaluate(adapter, inf_weights, eval_data, fp_eval)
    report.final_inference_task_loss = lt_i
    report.final_inference_loss = lt_i + lb_i
    report.weights_consistent = all(
        calib_weights[k].tobytes() == inf_weights[k].tobytes() for k in calib_weights)
    return CalibResult(out_cb, out_as, report, {lc.name: lc for lc in layers}, calib_weights, inf_weights)


class LayerwiseAdapter:
    """Each layer sees its own full-precision input; blocks are the layer outputs.

    There is no task head, so calibration reduces to per-layer distillation.
    ``x`` is a dict mapping layer name to an ``(N, cols)`` input array.
    """

    def __init__(self, bundle: ModelBundle, names: Optional[Sequence[str]] = None):
        self.layer_names = list(names or bundle.names)
        self.fp_weights = {n: bundle[n].values for n in self.layer_names}

    def forward(self, x, weights):
        feats = [x[n] @ weights[n].T for n in self.layer_names]
        return None, feats, x

    def backward(self, cache, grad_outputs, grad_features):
        return {n: (g.T @ cache[n]).astype(np.float32) for n, g in zip(self.layer_names, grad_features)}


def isotropic_inputs(bundle: ModelBundle, samples: int, seed: int, names=None) -> Dict[str, np.ndarray]:
    """Seeded standard-normal inputs for :class:`LayerwiseAdapter`."""
    rng = make_rng(seed)
    names = list(names or bundle.names)
    return {n: rng.standard_normal((samples, bundle[n].cols)).astype(np.float32) for n in names}
