"""End-to-end estimation: pick a method, build weights, evaluate the loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baselines
from .estimator import Estimate, weighted_estimate
from .kliep import SolveResult, SolverConfig, build_weights, solve, split_source
from .slice_core import CorrectionMatrix, DependencyGraph, InputError, SliceMatrix
from .synthetics import SyntheticBundle
from .weights import WeightVector

METHODS = ("mandoline", "cbiw", "kmm", "ulsif", "simple")
KMM_MAX_ROWS = 10000


@dataclass
class RunResult:
    estimate: Estimate
    weights: WeightVector
    eval_index: np.ndarray
    solve: SolveResult | None = None


def run_method(
    method: str,
    source: SliceMatrix,
    target: SliceMatrix,
    loss,
    graph: DependencyGraph | None = None,
    corr: CorrectionMatrix | None = None,
    source_features=None,
    target_features=None,
    split: str = "half",
    seed: int = 0,
    solver: SolverConfig | None = None,
    noise_unaware: bool = False,
    normalize: bool = True,
) -> RunResult:
    loss = np.asarray(loss, dtype=float)
    if loss.size != source.n:
        raise InputError(f"loss has {loss.size} entries but source has {source.n} rows")
    graph = graph or DependencyGraph.empty()
    if method == "mandoline":
        if noise_unaware:
            corr = CorrectionMatrix.identity(source.k)
        if corr is None:
            raise InputError("method 'mandoline' requires a correction matrix (field 'correction')")
        train, evl = split_source(source.n, split, seed)
        s_train, s_eval = source.take(train), source.take(evl)
        res = solve(s_train, target, corr, graph, solver)
        w = build_weights(res.delta, s_train, s_eval, corr, graph, normalize)
        est = weighted_estimate(w, loss[evl], n_s1=len(train), method=method)
        return RunResult(est, w, evl, res)

    if method == "simple":
        w = baselines.simple_slice_weights(source, target)
        return RunResult(weighted_estimate(w, loss, method=method), w, np.arange(source.n))

    xs = source.values.astype(float) if source_features is None else np.asarray(source_features, float)
    xt = target.values.astype(float) if target_features is None else np.asarray(target_features, float)
    if len(xs) != source.n:
        raise InputError("source features and source slices differ in row count")
    idx = np.arange(source.n)
    if method == "cbiw":
        w = baselines.cbiw_weights(xs, xt, normalize=normalize)
    elif method == "kmm":
        if source.n > KMM_MAX_ROWS:
            rng = np.random.default_rng(seed)
            idx = np.sort(rng.choice(source.n, KMM_MAX_ROWS, replace=False))
        w = baselines.kmm_weights(xs[idx], xt, seed=seed)
    elif method == "ulsif":
        w = baselines.ulsif_weights(xs, xt, seed=seed, normalize=normalize)
    else:
        raise InputError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return RunResult(weighted_estimate(w, loss[idx], method=method), w, idx)


def relative_error(estimate: float, truth: float, source_truth: float) -> float:
    """|estimate - truth| / |source value - truth|."""
    denom = abs(source_truth - truth)
    if denom == 0:
        return float("inf") if estimate != truth else 0.0
    return abs(estimate - truth) / denom


def run_on_bundle(bundle: SyntheticBundle, method: str, split: str = "half", seed: int = 0,
                  solver: SolverConfig | None = None) -> RunResult:
    """Run a method on a synthetic bundle.

    ``method`` may also be ``mandoline-unaware`` (identity correction tables)
    or ``source`` (unweighted source mean).
    """
    if method == "source":
        w = WeightVector.from_raw(np.ones(bundle.source_slices.n))
        return RunResult(weighted_estimate(w, bundle.source_loss, method="source"), w,
                         np.arange(bundle.source_slices.n))
    unaware = method == "mandoline-unaware"
    return run_method(
        "mandoline" if unaware else method,
        bundle.source_slices,
        bundle.target_slices,
        bundle.source_loss,
        graph=bundle.graph,
        corr=bundle.correction,
        source_features=bundle.source_features,
        target_features=bundle.target_features,
        split=split,
        seed=seed,
        solver=solver,
        noise_unaware=unaware,
    )
