"""Command-line interface.

Exit codes: 0 success, 1 invalid input or validation failure, 2 solver or
estimation failure.  Failures also write ``error.json`` to the output
directory.  The output directory defaults to ``$SLICESHIFT_OUTDIR`` when set,
otherwise ``./sliceshift_out``; ``--out`` takes precedence over both.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, io
from .estimator import BoundInputs, theorem1_bound
from .kliep import ObjectiveError, SolverConfig, SolverDivergence
from .pipeline import METHODS, relative_error, run_method, run_on_bundle
from .slice_core import InputError, SliceMatrix, infer_edges, validate_inputs
from .synthetics import GENERATORS, generate, write_bundle

log = logging.getLogger("sliceshift")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2
ENV_OUTDIR = "SLICESHIFT_OUTDIR"

SWEEP_AXES = {"p_spurious": "support_shift", "d_irrelevant": "highdim", "theta_ii": "noisy_slices"}
SWEEP_METHOD_ALIASES = {"noise-aware": "mandoline", "noise-unaware": "mandoline-unaware"}
SWEEP_METHODS = METHODS + ("mandoline-unaware", "source")


class CLIError(Exception):
    def __init__(self, message, code=EXIT_INPUT, kind="input_error", details=None):
        super().__init__(message)
        self.code, self.kind, self.details = code, kind, details or {}


def _outdir(args) -> Path:
    out = args.out or os.environ.get(ENV_OUTDIR) or "sliceshift_out"
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out: Path, argv: list[str], config: dict):
    io.dump_json(out / "manifest.json", {
        "argv": argv,
        "config": config,
        "seeds": config.get("seeds", [config.get("seed")]),
        "version": __version__,
    })


def _float_list(text):
    if text is None or text.strip() == "":
        return []
    return [float(v) for v in text.split(",")]


def _int_list(text):
    if text is None or text.strip() == "":
        return []
    return [int(v) for v in text.split(",")]


# --------------------------------------------------------------------------- subcommands


def cmd_validate(args) -> int:
    out = _outdir(args)
    source, target = io.read_slices(args.source), io.read_slices(args.target)
    graph = io.read_edges(args.edges) if args.edges else None
    corr = io.read_correction(args.correction) if args.correction else None
    report = validate_inputs(source, target, graph, corr)
    io.dump_json(out / "validation.json", report.to_dict())
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.ok else EXIT_INPUT


def cmd_edges(args) -> int:
    out = _outdir(args)
    source, target = io.read_slices(args.source), io.read_slices(args.target)
    if source.k != target.k:
        raise CLIError(f"source has k={source.k} slices but target has k={target.k}")
    pooled = SliceMatrix(np.vstack([source.values, target.values]))
    graph = infer_edges(pooled, args.max_edges)
    io.write_edges(out / "edges.json", graph)
    print(json.dumps([list(e) for e in graph.edges]))
    return EXIT_OK


def _run_config(args) -> dict:
    return {
        "source": args.source, "target": args.target, "loss": args.loss,
        "edges": args.edges, "correction": args.correction,
        "source_features": args.source_features, "target_features": args.target_features,
        "method": args.method, "split": args.split, "seed": args.seed,
        "noise_unaware": args.noise_unaware, "unnormalized": args.unnormalized,
        "max_iters": args.max_iters, "grad_tol": args.grad_tol,
    }


def cmd_estimate(args) -> int:
    out = _outdir(args)
    config = _run_config(args)
    _write_manifest(out, args.argv, config)
    if args.method not in METHODS:
        raise CLIError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    for name in ("source", "target", "loss"):
        if not getattr(args, name):
            raise CLIError(f"missing required field {name!r}", details={"field": name})
    if args.method == "mandoline" and not args.correction and not args.noise_unaware:
        raise CLIError("method 'mandoline' requires field 'correction' (or --noise-unaware)",
                       details={"field": "correction"})
    source, target = io.read_slices(args.source), io.read_slices(args.target)
    loss = io.read_loss(args.loss)
    graph = io.read_edges(args.edges) if args.edges else None
    corr = io.read_correction(args.correction) if args.correction else None
    report = validate_inputs(source, target, graph, corr if not args.noise_unaware else None)
    if loss.size != source.n:
        report.violations.append(f"loss has {loss.size} entries but source has {source.n} rows")
    if not report.ok:
        raise CLIError("input validation failed", kind="validation_error", details=report.to_dict())
    for w in report.warnings:
        log.warning(w)
    xs = io.read_features(args.source_features) if args.source_features else None
    xt = io.read_features(args.target_features) if args.target_features else None
    solver = SolverConfig(max_iters=args.max_iters, grad_tol=args.grad_tol)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            res = run_method(args.method, source, target, loss, graph=graph, corr=corr,
                             source_features=xs, target_features=xt, split=args.split,
                             seed=args.seed, solver=solver, noise_unaware=args.noise_unaware,
                             normalize=not args.unnormalized)
        except (SolverDivergence, ObjectiveError) as exc:
            raise CLIError(str(exc), code=EXIT_SOLVER, kind="solver_error") from exc
    est = res.estimate.to_dict()
    est["split"] = args.split if args.method == "mandoline" else "none"
    io.dump_json(out / "estimate.json", est)
    with (out / "weights.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("index,weight\n")
        for i, w in zip(res.eval_index.tolist(), res.weights.weights.tolist()):
            fh.write(f"{i},{w!r}\n")
    diagnostics = {
        "m_hat": res.estimate.m_hat,
        "ess": res.estimate.ess,
        "weight_variance": res.estimate.weight_variance,
        "warnings": report.warnings + [str(w.message) for w in caught],
    }
    if res.solve is not None:
        diagnostics["partition_ratio_estimate"] = res.weights.partition_ratio_estimate
        io.dump_json(out / "solver_trace.json", res.solve.to_dict())
        diagnostics["solver_status"] = res.solve.status
    io.dump_json(out / "diagnostics.json", diagnostics)
    print(json.dumps(est, indent=2))
    return EXIT_OK


_SYNTH_PARAMS = {
    "support_shift": {"p": "p_spurious", "n": "n"},
    "highdim": {"d": "d_irrelevant", "n": "n_source"},
    "noisy_slices": {"theta_ii": "theta_ii", "n": "n"},
}
_SYNTH_REQUIRED = {"support_shift": "p", "highdim": "d", "noisy_slices": "theta_ii"}


def cmd_synth(args) -> int:
    if args.generator not in GENERATORS:
        raise CLIError(
            f"unknown generator {args.generator!r}; available: {', '.join(GENERATORS)}",
            details={"available": list(GENERATORS)},
        )
    out = _outdir(args)
    req = _SYNTH_REQUIRED[args.generator]
    if getattr(args, req) is None:
        raise CLIError(f"generator {args.generator!r} needs --{req.replace('_', '-')}",
                       details={"field": req})
    params = {}
    for flag, name in _SYNTH_PARAMS[args.generator].items():
        v = getattr(args, flag)
        if v is not None:
            params[name] = int(v) if name in ("n", "n_source", "d_irrelevant") else float(v)
    _write_manifest(out, args.argv, {"generator": args.generator, "params": params, "seed": args.seed})
    try:
        bundle = generate(args.generator, seed=args.seed, **params)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    write_bundle(bundle, out, features=not args.no_features)
    print(json.dumps(bundle.truth(), indent=2, sort_keys=True))
    return EXIT_OK


def _sweep_cell(cell):
    axis, value, method, seed, split, n = cell
    gen = SWEEP_AXES[axis]
    params = {axis: int(value) if axis == "d_irrelevant" else float(value)}
    if n is not None:
        params["n_source" if gen == "highdim" else "n"] = n
    row = {"axis_value": value, "method": method, "seed": seed}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bundle = generate(gen, seed=seed, **params)
            est = run_on_bundle(bundle, method, split=split, seed=seed).estimate.value
        row.update(
            estimate=est,
            truth=bundle.true_target_value,
            source_truth=bundle.true_source_value,
            relative_error=relative_error(est, bundle.true_target_value, bundle.true_source_value),
            status="ok",
        )
    except Exception as exc:  # recorded per cell, the sweep continues
        row.update(estimate="", truth="", source_truth="", relative_error="",
                   status=f"{type(exc).__name__}: {exc}")
    return row


def cmd_sweep(args) -> int:
    out = _outdir(args)
    if args.axis not in SWEEP_AXES:
        raise CLIError(f"unknown sweep axis {args.axis!r}; choose from {', '.join(SWEEP_AXES)}")
    values = _float_list(args.values)
    seeds = _int_list(args.seeds)
    methods = [SWEEP_METHOD_ALIASES.get(m.strip(), m.strip()) for m in args.methods.split(",") if m.strip()]
    if not seeds:
        raise CLIError("seeds list is empty", details={"field": "seeds"})
    if not values:
        raise CLIError("values list is empty", details={"field": "values"})
    if not methods:
        raise CLIError("methods list is empty", details={"field": "methods"})
    bad = [m for m in methods if m not in SWEEP_METHODS]
    if bad:
        raise CLIError(f"unknown methods {bad}; choose from {', '.join(SWEEP_METHODS)}")
    config = {"axis": args.axis, "values": values, "methods": methods, "seeds": seeds,
              "split": args.split, "n": args.n}
    _write_manifest(out, args.argv, config)
    cells = [(args.axis, v, m, s, args.split, args.n) for v in values for m in methods for s in seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    fields = ["axis_value", "method", "seed", "estimate", "truth", "source_truth",
              "relative_error", "status"]
    with (out / "results.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows) - len(failed)}/{len(rows)} cells ok -> {out / 'results.csv'}")
    if failed:
        io.dump_json(out / "error.json", {"kind": "sweep_cell_failures",
                                          "failed": [{k: r[k] for k in ("axis_value", "method", "seed", "status")}
                                                     for r in failed]})
        return EXIT_SOLVER
    return EXIT_OK


def cmd_bound(args) -> int:
    out = _outdir(args)
    m_hat, n_s = args.m_hat, args.n_s
    if args.estimate:
        est = json.loads(Path(args.estimate).read_text(encoding="utf-8"))
        m_hat = est["m_hat"] if m_hat is None else m_hat
        if n_s is None:
            n_s = est["n_s1"] + est["n_s2"] if est.get("split") == "half" else est["n_s2"]
    if m_hat is None or n_s is None:
        raise CLIError("bound needs --m-hat and --n-s (or --estimate estimate.json)")
    try:
        inputs = BoundInputs(
            eta_s_min=_float_list(args.eta_s_min) or [0.0],
            eta_s_max=_float_list(args.eta_s_max) or [0.0],
            eta_t_min=_float_list(args.eta_t_min) or [0.0],
            eta_t_max=_float_list(args.eta_t_max) or [0.0],
            M=args.M, tv_term=args.tv, epsilon=args.epsilon, c_s_loss=args.c_loss,
        )
        value = theorem1_bound(inputs, int(n_s), float(m_hat))
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    result = {"bound": value, "n_s": int(n_s), "m_hat": float(m_hat), "inputs": inputs.to_dict()}
    io.dump_json(out / "bound.json", result)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    argv = list(manifest["argv"])
    if manifest.get("version") != __version__:
        log.warning("manifest written by version %s, running %s", manifest.get("version"), __version__)
    argv += ["--out", args.out or str(Path(args.manifest).resolve().parent)]
    return main(argv)


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sliceshift", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_out(sp):
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUTDIR} or ./sliceshift_out)")
        return sp

    sp = with_out(sub.add_parser("validate", help="check input files against all invariants"))
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--edges")
    sp.add_argument("--correction")
    sp.set_defaults(func=cmd_validate)

    sp = with_out(sub.add_parser("edges", help="infer a dependency matching from pooled slices"))
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--max-edges", type=int, default=4)
    sp.set_defaults(func=cmd_edges)

    sp = with_out(sub.add_parser("estimate", help="estimate target performance"))
    sp.add_argument("--source")
    sp.add_argument("--target")
    sp.add_argument("--loss")
    sp.add_argument("--edges")
    sp.add_argument("--correction")
    sp.add_argument("--source-features")
    sp.add_argument("--target-features")
    sp.add_argument("--method", default="mandoline",
                    help=f"one of {', '.join(METHODS)} (CBIW with a fine-tuned network is not provided)")
    sp.add_argument("--split", choices=("half", "none"), default="half")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise-unaware", action="store_true",
                    help="treat observed slices as exact (identity correction tables)")
    sp.add_argument("--unnormalized", action="store_true", help="do not self-normalize weights")
    sp.add_argument("--max-iters", type=int, default=500)
    sp.add_argument("--grad-tol", type=float, default=1e-8)
    sp.set_defaults(func=cmd_estimate)

    sp = with_out(sub.add_parser("synth", help="write a synthetic bundle"))
    sp.add_argument("generator", help=f"one of {', '.join(GENERATORS)}")
    sp.add_argument("--p", type=float, help="support_shift: spurious-feature rate on source")
    sp.add_argument("--d", type=int, help="highdim: number of irrelevant features")
    sp.add_argument("--theta-ii", type=float, help="noisy_slices: shared noise parameter")
    sp.add_argument("--n", type=int, help="override the default dataset size")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-features", action="store_true", help="skip feature CSVs")
    sp.set_defaults(func=cmd_synth)

    sp = with_out(sub.add_parser("sweep", help="relative error over a parameter grid"))
    sp.add_argument("--axis", required=True, help=f"one of {', '.join(SWEEP_AXES)}")
    sp.add_argument("--values", required=True, help="comma-separated axis values")
    sp.add_argument("--methods", default="mandoline,cbiw")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--split", choices=("half", "none"), default="none")
    sp.add_argument("--n", type=int, help="override the generator's dataset size")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = with_out(sub.add_parser("bound", help="evaluate the finite-sample error bound"))
    sp.add_argument("--eta-s-min")
    sp.add_argument("--eta-s-max")
    sp.add_argument("--eta-t-min")
    sp.add_argument("--eta-t-max")
    sp.add_argument("--M", type=float, default=1.0)
    sp.add_argument("--tv", type=float, default=0.0)
    sp.add_argument("--epsilon", type=float, default=0.05)
    sp.add_argument("--c-loss", type=float, default=1.0)
    sp.add_argument("--n-s", type=int)
    sp.add_argument("--m-hat", type=float)
    sp.add_argument("--estimate", help="estimate.json supplying m_hat and n_s")
    sp.set_defaults(func=cmd_bound)

    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest.json")
    sp.add_argument("manifest")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_replay)
    return p


def _strip_out(argv: list[str]) -> list[str]:
    cleaned, skip = [], False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        cleaned.append(a)
    return cleaned


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = _strip_out(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, InputError) as exc:
        code = getattr(exc, "code", EXIT_INPUT)
        payload = {"kind": getattr(exc, "kind", "input_error"), "message": str(exc),
                   "exit_code": code}
        payload.update(getattr(exc, "details", {}) and {"details": exc.details} or {})
        out = getattr(args, "out", None) or os.environ.get(ENV_OUTDIR)
        if args.command != "replay":
            target = Path(out or "sliceshift_out")
            target.mkdir(parents=True, exist_ok=True)
            io.dump_json(target / "error.json", payload)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
