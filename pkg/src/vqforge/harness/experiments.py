"""Benchmark suites: ablation, consistency, histogram, SSM, RTN vs VQ.

Every suite returns a JSON-ready dict with at least ``suite``, ``seed``,
``config`` and ``rows`` (a list of flat records, one per arm or method).
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Dict

import numpy as np

from ..convexopt import ConvexConfig
from ..incremental import CalibConfig, CalibData, LayerwiseAdapter, calibrate, evaluate, isotropic_inputs
from ..kmeans import Assignments, Codebook, fit as kmeans_fit, make_rng
from ..weightio import ModelBundle, partition
from .baselines import rtn_quantize
from .synthetic import SyntheticSpec, gen_weights, kurtosis
from .toys import MLPAdapter, ToyMLP, random_ssm_block, ssm_forward

ARMS = ("baseline-vq", "+combination", "+incremental")
SUITES = ("ablation", "consistency", "histogram", "ssm", "rtn-vs-vq")


@dataclass
class BenchConfig:
    """The standard synthetic benchmark: a 128-128-128 MLP with outlier-heavy weights.

    ``epochs=48`` at 32 batches per epoch gives about 1.5k optimizer steps.
    """

    width: int = 128
    d: int = 4
    k: int = 256
    bits: int = 2
    sigma: float = 0.02
    outlier_fraction: float = 0.01
    outlier_scale: float = 20.0
    calib_samples: int = 4096
    eval_samples: int = 2048
    batch_size: int = 128
    epochs: int = 48
    n: int = 4
    init_steps: int = 100
    tau: float = 0.99
    lam: float = 1e-2
    seed: int = 0
    check_invariants: bool = False

    def calib_config(self, **kw) -> CalibConfig:
        base = CalibConfig(k=self.k, d=self.d, tau=self.tau, max_epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed, check_invariants=self.check_invariants)
        return replace(base, **kw)

    def convex_config(self) -> ConvexConfig:
        return ConvexConfig(n=self.n, lam=self.lam, init_steps=self.init_steps)


@dataclass
class Benchmark:
    cfg: BenchConfig
    mlp: ToyMLP
    bundle: ModelBundle
    adapter: MLPAdapter
    calib: CalibData
    eval: CalibData
    codebooks: Dict[str, Codebook]
    baseline_assignments: Dict[str, Assignments]


def build_benchmark(cfg: BenchConfig = None) -> Benchmark:
    """Teacher MLP with synthetic outlier weights, its data, and the K-Means codebooks."""
    cfg = cfg or BenchConfig()
    w = cfg.width
    specs = [SyntheticSpec(w, w, cfg.sigma, cfg.outlier_fraction, cfg.outlier_scale, cfg.seed + j, name)
             for j, name in enumerate(ToyMLP.layer_names)]
    w1, w2 = (gen_weights(s).values for s in specs)
    rng = make_rng(cfg.seed + 1000)
    b1 = rng.normal(0, cfg.sigma, w).astype(np.float32)
    b2 = rng.normal(0, cfg.sigma, w).astype(np.float32)
    mlp = ToyMLP(w1, b1, w2, b2)
    x = rng.standard_normal((cfg.calib_samples + cfg.eval_samples, w)).astype(np.float32)
    y, _ = mlp.forward(x)
    calib = CalibData(x[:cfg.calib_samples], y[:cfg.calib_samples])
    held = CalibData(x[cfg.calib_samples:], y[cfg.calib_samples:])
    bundle = mlp.bundle()
    codebooks, assignments = {}, {}
    for li, name in enumerate(ToyMLP.layer_names):
        cb, a, _ = kmeans_fit(partition(bundle[name], cfg.d), cfg.k, cfg.seed + li)
        codebooks[name], assignments[name] = cb, a
    return Benchmark(cfg, mlp, bundle, MLPAdapter(mlp), calib, held, codebooks, assignments)


def hard_weights(codebooks, assignments, bundle) -> Dict[str, np.ndarray]:
    """``C[A]`` per layer, shaped like the bundle's matrices."""
    return {n: codebooks[n].entries[assignments[n].indices.reshape(-1)].reshape(bundle[n].shape)
            for n in codebooks}


def weight_mse(bundle: ModelBundle, weights: Dict[str, np.ndarray]) -> float:
    """Mean squared weight error over every quantized entry."""
    err = sum(float(((bundle[n].values.astype(np.float64) - w) ** 2).sum()) for n, w in weights.items())
    return err / sum(bundle[n].values.size for n in weights)


def _summary(arm: str, res, bundle, seconds: float) -> dict:
    rep = res.report
    return {
        "arm": arm,
        "task_loss": rep.final_inference_task_loss,
        "calibration_task_loss": rep.final_calibration_task_loss,
        "gap": rep.final_inference_task_loss - rep.final_calibration_task_loss,
        "inference_loss": rep.final_inference_loss,
        "calibration_loss": rep.final_calibration_loss,
        "weight_mse": weight_mse(bundle, res.inference_weights),
        "confirmed_by_threshold": rep.confirmed_by_threshold,
        "forced": rep.forced,
        "residual_truncation": rep.residual_truncation,
        "incremental_truncation": sum(e.truncation_error for e in rep.epochs),
        "weights_consistent": rep.weights_consistent,
        "steps": rep.total_steps,
        "seconds": seconds,
    }


def run_arm(bench: Benchmark, arm: str):
    """Run one ablation arm; returns ``(summary dict, CalibResult or None)``."""
    cfg = bench.cfg
    t0 = time.perf_counter()
    if arm == "baseline-vq":
        weights = hard_weights(bench.codebooks, bench.baseline_assignments, bench.bundle)
        lt, lb = evaluate(bench.adapter, weights, bench.eval)
        return {"arm": arm, "task_loss": lt, "calibration_task_loss": lt, "gap": 0.0,
                "inference_loss": lt + lb, "calibration_loss": lt + lb,
                "weight_mse": weight_mse(bench.bundle, weights), "seconds": time.perf_counter() - t0}, None
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; choose from {ARMS}")
    ccfg = cfg.calib_config(enable_replacement=True, enable_incremental=arm == "+incremental")
    res = calibrate(bench.bundle, bench.adapter, bench.calib, ccfg, cfg.convex_config(),
                    codebooks=bench.codebooks, eval_data=bench.eval)
    return _summary(arm, res, bench.bundle, time.perf_counter() - t0), res


def _arm_job(args):
    cfg, arm = args
    return run_arm(build_benchmark(cfg), arm)


def run_ablation(cfg: BenchConfig = None, bench: Benchmark = None, workers: int = 1) -> dict:
    """Baseline VQ, then + convex combination optimization, then + incremental confirmation.

    Arms are independent; ``workers > 1`` runs them in separate processes,
    each rebuilding the (deterministic) benchmark. The returned dict keeps
    the full results under ``"_results"``, which is stripped before
    serialization.
    """
    if bench is None:
        cfg = cfg or BenchConfig()
    else:
        cfg = bench.cfg
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_arm_job, [(cfg, arm) for arm in ARMS]))
    else:
        bench = bench or build_benchmark(cfg)
        outs = [run_arm(bench, arm) for arm in ARMS]
    rows = [o[0] for o in outs]
    return {"suite": "ablation", "seed": cfg.seed, "config": asdict(cfg), "rows": rows,
            "_results": {arm: o[1] for arm, o in zip(ARMS, outs)}}


def consistency_rows(ablation: dict) -> list:
    """Calibration-time vs inference-time loss for the two calibrated arms."""
    rows = []
    for r in ablation["rows"]:
        if r["arm"] == "baseline-vq":
            continue
        rows.append({k: r[k] for k in ("arm", "calibration_task_loss", "task_loss", "gap", "calibration_loss",
                                       "inference_loss", "forced", "residual_truncation",
                                       "weights_consistent")})
        rows[-1]["exact"] = r["calibration_loss"] == r["inference_loss"]
    return rows


def histogram_rows(ablation: dict) -> list:
    """Per-epoch max-ratio histograms of the calibrated arms."""
    rows = []
    for arm in ("+combination", "+incremental"):
        res = ablation["_results"].get(arm)
        if res is None:
            continue
        edges = res.report.histogram_edges
        for e in res.report.epochs:
            row = {"arm": arm, "epoch": e.epoch, "confirmed_fraction": e.confirmed_fraction,
                   "reg_included": e.reg_included}
            row.update({f"bin_{edges[j]:.2f}": c for j, c in enumerate(e.histogram)})
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# RTN vs VQ in weight space


def run_rtn_vs_vq(cfg: BenchConfig = None, bench: Benchmark = None) -> dict:
    """Weight MSE at matched 2 bits: RTN, hard K-Means VQ, and convex-combination VQ.

    The convex-combination arm runs in weight-reconstruction mode: each layer is distilled on
    isotropic inputs, which makes the distillation loss an unbiased estimate
    of the squared weight error.
    """
    bench = bench or build_benchmark(cfg)
    cfg = bench.cfg
    bundle = bench.bundle
    names = list(ToyMLP.layer_names)
    rows = []
    t0 = time.perf_counter()
    rtn = {n: rtn_quantize(bundle[n].values, cfg.bits)[0] for n in names}
    rows.append({"method": "rtn", "weight_mse": weight_mse(bundle, rtn), "seconds": time.perf_counter() - t0})
    km = hard_weights(bench.codebooks, bench.baseline_assignments, bundle)
    rows.append({"method": "kmeans-vq", "weight_mse": weight_mse(bundle, km), "seconds": 0.0})
    t0 = time.perf_counter()
    adapter = LayerwiseAdapter(bundle, names)
    data = CalibData(isotropic_inputs(bundle, cfg.calib_samples, cfg.seed + 2000, names))
    held = CalibData(isotropic_inputs(bundle, cfg.eval_samples, cfg.seed + 3000, names))
    res = calibrate(bundle, adapter, data, cfg.calib_config(), cfg.convex_config(),
                    codebooks=bench.codebooks, eval_data=held)
    rows.append({"method": "convex-vq", "weight_mse": weight_mse(bundle, res.inference_weights),
                 "soft_weight_mse": weight_mse(bundle, {k: v.astype(np.float64)
                                                        for k, v in res.calibration_weights.items()}),
                 "forced": res.report.forced, "confirmed_by_threshold": res.report.confirmed_by_threshold,
                 "seconds": time.perf_counter() - t0})
    stats = {n: {"kurtosis": kurtosis(bundle[n].values)} for n in names}
    return {"suite": "rtn-vs-vq", "seed": cfg.seed, "config": asdict(cfg), "rows": rows, "weights": stats,
            "_results": {"convex-vq": res}}


# ---------------------------------------------------------------------------
# SSM block


@dataclass
class SSMBenchConfig:
    state: int = 8
    d_model: int = 64
    hidden: int = 128
    length: int = 32
    delta: float = 0.1
    calib_sequences: int = 128
    eval_sequences: int = 64
    sigma: float = 0.02
    outlier_fraction: float = 0.01
    outlier_scale: float = 20.0
    d: int = 4
    k: int = 256
    bits: int = 2
    epochs: int = 48
    batch_size: int = 128
    n: int = 4
    init_steps: int = 100
    seed: int = 0


def _rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def run_ssm(cfg: SSMBenchConfig = None) -> dict:
    """Quantize the projections of a toy SSM block and measure held-out output error.

    Calibration is layer-wise: ``in_proj`` is distilled on the block inputs and
    ``out_proj`` on the full-precision SSM outputs. No gradient passes
    through the scan; the end-to-end error is measured afterwards.
    """
    cfg = cfg or SSMBenchConfig()
    w_in = gen_weights(SyntheticSpec(cfg.hidden, cfg.d_model, cfg.sigma, cfg.outlier_fraction,
                                     cfg.outlier_scale, cfg.seed, "in_proj")).values
    w_out = gen_weights(SyntheticSpec(cfg.d_model, cfg.hidden, cfg.sigma, cfg.outlier_fraction,
                                      cfg.outlier_scale, cfg.seed + 1, "out_proj")).values
    block = random_ssm_block(cfg.state, cfg.d_model, cfg.hidden, cfg.seed + 2, cfg.delta, (w_in, w_out))
    rng = make_rng(cfg.seed + 3)
    u = rng.standard_normal((cfg.calib_sequences + cfg.eval_sequences, cfg.length, cfg.d_model)).astype(np.float32)
    u_cal, u_ev = u[:cfg.calib_sequences], u[cfg.calib_sequences:]

    # dual-path self-check on one channel of the first sequence
    v = (u_ev[0] @ w_in.T)[:, 0]
    duality = _rel_err(ssm_forward(block, v, "conv"), ssm_forward(block, v, "recurrence"))

    bundle = block.bundle()
    names = list(block.layer_names)

    def layer_inputs(seq):
        _, v_, s_ = block.forward(seq)
        return {"in_proj": seq.reshape(-1, cfg.d_model), "out_proj": s_.reshape(-1, cfg.hidden).astype(np.float32)}

    y_ref, _, _ = block.forward(u_ev)

    def e2e(weights):
        y, _, _ = block.forward(u_ev, {n: np.asarray(w, np.float32) for n, w in weights.items()})
        return _rel_err(y, y_ref)

    rows = []
    rtn = {n: rtn_quantize(bundle[n].values, cfg.bits)[0] for n in names}
    rows.append({"method": "rtn", "weight_mse": weight_mse(bundle, rtn), "output_rel_err": e2e(rtn)})
    codebooks, assigns = {}, {}
    for li, n in enumerate(names):
        codebooks[n], assigns[n], _ = kmeans_fit(partition(bundle[n], cfg.d), cfg.k, cfg.seed + li)
    km = hard_weights(codebooks, assigns, bundle)
    rows.append({"method": "kmeans-vq", "weight_mse": weight_mse(bundle, km), "output_rel_err": e2e(km)})
    ccfg = CalibConfig(k=cfg.k, d=cfg.d, max_epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed)
    t0 = time.perf_counter()
    res = calibrate(bundle, LayerwiseAdapter(bundle, names), CalibData(layer_inputs(u_cal)), ccfg,
                    ConvexConfig(n=cfg.n, init_steps=cfg.init_steps), codebooks=codebooks,
                    eval_data=CalibData(layer_inputs(u_ev)))
    rows.append({"method": "convex-vq", "weight_mse": weight_mse(bundle, res.inference_weights),
                 "output_rel_err": e2e(res.inference_weights),
                 "calibration_output_rel_err": e2e(res.calibration_weights),
                 "forced": res.report.forced, "confirmed_by_threshold": res.report.confirmed_by_threshold,
                 "seconds": time.perf_counter() - t0})
    return {"suite": "ssm", "seed": cfg.seed, "config": asdict(cfg), "rows": rows,
            "duality_rel_err": duality, "_results": {"convex-vq": res}}


# ---------------------------------------------------------------------------
# Dispatch and output


def _quick(cfg):
    return replace(cfg, epochs=2, init_steps=10)


def run_suite(name: str, seed: int = 0, quick: bool = False, workers: int = 1) -> dict:
    """Run one named suite and return its JSON-ready report (no ``_results``)."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    t0 = time.perf_counter()
    if name == "ssm":
        cfg = SSMBenchConfig(seed=seed)
        report = run_ssm(_quick(cfg) if quick else cfg)
    else:
        cfg = BenchConfig(seed=seed)
        cfg = _quick(cfg) if quick else cfg
        if name == "rtn-vs-vq":
            report = run_rtn_vs_vq(cfg)
        else:
            abl = run_ablation(cfg, workers=workers)
            if name == "ablation":
                report = abl
            elif name == "consistency":
                report = dict(abl, suite=name, rows=consistency_rows(abl))
            else:
                report = dict(abl, suite=name, rows=histogram_rows(abl),
                              edges=abl["_results"]["+incremental"].report.histogram_edges)
    report = {k: v for k, v in report.items() if not k.startswith("_")}
    report["seconds"] = time.perf_counter() - t0
    return report


def write_csv(report: dict, path) -> None:
    """Write ``report["rows"]`` as a CSV table (union of keys, in first-seen order)."""
    rows = report.get("rows", [])
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
