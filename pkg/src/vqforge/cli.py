"""Command-line entry points: ``vqforge`` and ``weights``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config
from .errors import VQError

log = logging.getLogger("vqforge")


def _dump(obj, out=None):
    text = json.dumps(obj, indent=2, default=_json_default)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# weights


def cmd_inspect(args) -> int:
    from .weightio import layer_stats, load_bundle

    bundle = load_bundle(args.path)
    rows = [layer_stats(w, args.sigma) for w in bundle]
    if args.json:
        _dump({"metadata": bundle.metadata, "layers": rows})
        return 0
    for k, v in bundle.metadata.items():
        print(f"# {k}: {v}")
    print(f"{'name':<24} {'shape':>12} {'min':>11} {'max':>11} {'mean':>11} {'std':>11} {'outliers':>9}")
    for r in rows:
        shape = "x".join(str(s) for s in r["shape"])
        print(f"{r['name']:<24} {shape:>12} {r['min']:>11.4g} {r['max']:>11.4g} {r['mean']:>11.4g} "
              f"{r['std']:>11.4g} {r['outliers']:>9d}")
    return 0


def weights_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weights", description="Inspect WTS weight bundles.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("inspect", help="per-layer shape and value statistics")
    s.add_argument("path")
    s.add_argument("--sigma", type=float, default=6.0, help="outlier threshold in standard deviations")
    s.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    s.set_defaults(func=cmd_inspect)
    return p


# ---------------------------------------------------------------------------
# vqforge


def cmd_kmeans(args) -> int:
    from .kmeans import fit
    from .weightio import load_bundle, partition

    bundle = load_bundle(args.wts)
    layers = []
    for li, w in enumerate(bundle):
        table = partition(w, args.d)
        cb, a, dist = fit(table, args.k, args.seed + li, max_iters=args.iters, tol=args.tol)
        entry = {"name": w.name, "shape": list(w.shape), "k": cb.k, "d": cb.d,
                 "distortion": dist, "mse": dist / w.values.size}
        if not args.summary:
            entry["codebook"] = cb.entries.tolist()
            entry["assignments"] = a.indices.tolist()
        layers.append(entry)
    _dump({"seed": args.seed, "layers": layers})
    return 0


def cmd_calibrate(args) -> int:
    from .convexopt import ConvexConfig
    from .incremental import CalibConfig, CalibData, LayerwiseAdapter, calibrate, isotropic_inputs
    from .packfmt import PackedModel, write_vqm
    from .weightio import load_bundle

    bundle = load_bundle(args.wts)
    k, d = config.preset(args.bits)
    names = [w.name for w in bundle if w.cols % d == 0]
    skipped = [w.name for w in bundle if w.cols % d]
    if skipped:
        log.warning("skipping layers whose width is not a multiple of d=%d: %s", d, skipped)
    if not names:
        raise VQError(f"no layer has a width divisible by d={d}")
    adapter = LayerwiseAdapter(bundle, names)
    data = CalibData(isotropic_inputs(bundle, args.samples, args.seed, names))
    cfg = CalibConfig(k=k, d=d, tau=args.tau, max_epochs=args.epochs, batch_size=args.batch_size,
                      enable_replacement=not args.no_replacement, enable_incremental=not args.no_incremental,
                      seed=args.seed, dump_path=args.dump)
    convex = ConvexConfig(n=args.n, lam=args.lam, init_steps=args.init_steps)
    res = calibrate(bundle, adapter, data, cfg, convex)
    model = PackedModel.from_results(res.codebooks, res.assignments)
    write_vqm(model, args.out)
    report = res.report.to_dict()
    report["bits"] = args.bits
    report["codebook_shape"] = [k, d]
    report["layers"] = names
    report["skipped_layers"] = skipped
    report["out"] = str(args.out)
    _dump(report, args.report)
    return 0


def cmd_pack_info(args) -> int:
    from .packfmt import describe, read_vqm

    info = describe(read_vqm(args.vqm))
    if args.json:
        _dump(info)
        return 0
    print(f"{'name':<24} {'shape':>12} {'d':>3} {'k':>5} {'bits/w':>7} {'assign bits':>12} "
          f"{'codebook bits':>14} {'bytes':>9}")
    for r in info["layers"]:
        shape = "x".join(str(s) for s in r["shape"])
        print(f"{r['name']:<24} {shape:>12} {r['d']:>3} {r['k']:>5} {r['bits_per_weight']:>7.3f} "
              f"{r['assignment_bits']:>12d} {r['codebook_bits']:>14d} {r['encoded_bytes']:>9d}")
    print(f"total: {info['total_weights']} weights, {info['bits_per_weight']:.3f} bits/weight "
          f"({info['bits_per_weight_with_codebooks']:.3f} with codebooks), "
          f"{info['encoded_bytes']} bytes vs {info['fp32_bytes']} fp32")
    return 0


def cmd_infer(args) -> int:
    from .packfmt import read_vqm
    from .qinfer import bench, qmatmul

    model = read_vqm(args.vqm)
    x = np.fromfile(args.input, dtype="<f4")
    rows = []
    for layer in model:
        if x.size % layer.i:
            log.warning("layer %r: input of %d values is not a multiple of width %d, skipped",
                        layer.name, x.size, layer.i)
            continue
        batch = x.reshape(-1, layer.i)
        y = qmatmul(layer, batch.T, use_numba=not args.no_jit).T
        entry = {"name": layer.name, "input_shape": list(batch.shape), "output": y.tolist()}
        if args.bench:
            entry["timing"] = bench(layer, batch[0], repeats=args.repeats)
        rows.append(entry)
    if not rows:
        raise VQError(f"no layer accepts an input of {x.size} values")
    _dump({"layers": rows})
    return 0


def cmd_bench(args) -> int:
    from .harness.experiments import run_suite, write_csv

    report = run_suite(args.suite, seed=args.seed, quick=args.quick)
    _dump(report, args.out)
    if args.csv:
        write_csv(report, args.csv)
    if args.out:
        print(f"wrote {args.out}")
    return 0


def vqforge_parser() -> argparse.ArgumentParser:
    from .harness.experiments import SUITES

    p = argparse.ArgumentParser(prog="vqforge", description="Vector quantization with convex-combination search.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("kmeans", help="K-Means codebook and nearest assignments per layer")
    s.add_argument("wts")
    s.add_argument("--k", type=int, default=256)
    s.add_argument("--d", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iters", type=int, default=config.KMEANS_MAX_ITERS)
    s.add_argument("--tol", type=float, default=config.KMEANS_TOL)
    s.add_argument("--summary", action="store_true", help="omit codebook and assignment arrays")
    s.set_defaults(func=cmd_kmeans)

    s = sub.add_parser("calibrate", help="quantize a WTS bundle into a VQM file")
    s.add_argument("wts")
    s.add_argument("--bits", type=int, choices=sorted(config.BIT_PRESETS), default=2)
    s.add_argument("--tau", type=float, default=config.CONFIRM_THRESHOLD)
    s.add_argument("--lambda", dest="lam", type=float, default=config.REPLACE_THRESHOLD)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--n", type=int, default=config.NUM_CANDIDATES, help="candidate codewords per sub-vector")
    s.add_argument("--init-steps", type=int, default=100)
    s.add_argument("--samples", type=int, default=config.CALIB_SAMPLES, help="synthetic calibration inputs")
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--no-replacement", action="store_true")
    s.add_argument("--no-incremental", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output VQM path")
    s.add_argument("--report", help="write the JSON report here instead of stdout")
    s.add_argument("--dump", help="npz path for the state dump on divergence")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("pack-info", help="bit rates and sizes of a VQM file")
    s.add_argument("vqm")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_pack_info)

    s = sub.add_parser("infer", help="run packed layers on a raw float32 input")
    s.add_argument("vqm")
    s.add_argument("--input", required=True, help="raw little-endian float32 file")
    s.add_argument("--bench", action="store_true", help="also time dense and on-the-fly paths")
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--no-jit", action="store_true", help="use the numpy lookup-table path")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", help="run a benchmark suite")
    s.add_argument("--suite", choices=SUITES, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="JSON report path (default stdout)")
    s.add_argument("--csv", help="also write a flat CSV table")
    s.add_argument("--quick", action="store_true", help="reduced epochs and sizes for smoke runs")
    s.set_defaults(func=cmd_bench)
    return p


def _run(parser: argparse.ArgumentParser, argv) -> int:
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (VQError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return _run(vqforge_parser(), argv)


def weights_main(argv=None) -> int:
    return _run(weights_parser(), argv)


if __name__ == "__main__":
    sys.exit(main())
