"""Noise-aware log-linear KLIEP over binary slices.

The density ratio between target and source on the latent slices g is
modelled as ``exp(delta . phi(g))`` up to normalization.  Only noisy slices
g~ are observed; conditional expectations over g given g~ use the per-slice
correction tables, under which g factorizes given g~.  Rows sharing the same
g~ pattern are collapsed before any computation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .graphical_model import PotentialMap
from .slice_core import CorrectionMatrix, CorrectionTable, DependencyGraph, SliceMatrix, as_slices
from .weights import WeightVector

log = logging.getLogger(__name__)

# edge configurations (g_i, g_j) in the order used for the 4-way sums
_EDGE_G = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=float)
_EDGE_PHI = np.column_stack([_EDGE_G, _EDGE_G[:, 0] * _EDGE_G[:, 1]])


class ObjectiveError(FloatingPointError):
    pass


class SolverDivergence(RuntimeError):
    """The line search could not make progress on a concave objective."""


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def cond_mean_phi(gtilde, table: CorrectionTable, graph: DependencyGraph) -> np.ndarray:
    """E[phi(g) | g~] under the correction tables, for one row or an (n, k) array."""
    gt = np.asarray(gtilde)
    single = gt.ndim == 1
    gt = np.atleast_2d(gt)
    pmap = PotentialMap.build(gt.shape[1], graph)
    m = table.signed_means(gt)
    cols = [m[:, list(pmap.unpaired)]]
    for i, j in pmap.edges:
        cols.append(np.stack([m[:, i], m[:, j], m[:, i] * m[:, j]], axis=1))
    out = np.concatenate(cols, axis=1)
    return out[0] if single else out


def _log_components(gt: np.ndarray, delta: np.ndarray, table: CorrectionTable, pmap: PotentialMap):
    """Per-row log E[exp(delta . phi) | g~] and the tilted mean of phi.

    The tilted mean is E[exp(delta . phi) phi | g~] / E[exp(delta . phi) | g~];
    it factorizes by component, so each component's block only involves that
    component's configurations.
    """
    q_minus, q_plus = table.probs(gt)
    lq = np.stack([_log(q_minus), _log(q_plus)], axis=-1)  # (n, k, 2)
    n = gt.shape[0]
    log_value = np.zeros(n)
    tilted = np.zeros((n, pmap.dim))
    for c, i in enumerate(pmap.unpaired):
        a = lq[:, i, :] + np.array([-delta[c], delta[c]])
        log_value += logsumexp(a, axis=1)
        p = softmax(a, axis=1)
        tilted[:, c] = p[:, 1] - p[:, 0]
    off = pmap.edge_offset
    for e, (i, j) in enumerate(pmap.edges):
        blk = slice(off + 3 * e, off + 3 * e + 3)
        gi = (_EDGE_G[:, 0] > 0).astype(int)
        gj = (_EDGE_G[:, 1] > 0).astype(int)
        a = lq[:, i, gi] + lq[:, j, gj] + _EDGE_PHI @ delta[blk]
        log_value += logsumexp(a, axis=1)
        tilted[:, blk] = softmax(a, axis=1) @ _EDGE_PHI
    return log_value, tilted


def cond_mean_exp(gtilde, delta, table: CorrectionTable, graph: DependencyGraph):
    """Return ``(log E[exp(delta . phi(g)) | g~], E[exp(delta . phi(g)) phi(g) | g~])``."""
    gt = np.asarray(gtilde)
    single = gt.ndim == 1
    gt = np.atleast_2d(gt)
    pmap = PotentialMap.build(gt.shape[1], graph)
    delta = np.asarray(delta, dtype=float)
    lv, ratio = _log_components(gt, delta, table, pmap)
    vec = np.exp(lv)[:, None] * ratio
    return (lv[0], vec[0]) if single else (lv, vec)


def target_moment(target: SliceMatrix, table: CorrectionTable, pmap: PotentialMap) -> np.ndarray:
    """(1/n_t) sum_i E[phi(g) | g~(x_i)] -- the only pass over the target set."""
    pats, counts, _ = target.patterns()
    graph = DependencyGraph(pmap.edges)
    return counts @ cond_mean_phi(pats, table, graph) / target.n


class KLIEPProblem:
    """Empirical objective with target statistics and source patterns cached."""

    def __init__(self, source_train, target, corr: CorrectionMatrix, graph: DependencyGraph):
        source_train, target = as_slices(source_train), as_slices(target)
        if source_train.n < 1 or target.n < 1:
            raise ValueError("objective needs at least one source and one target example")
        self.pmap = PotentialMap.build(source_train.k, graph)
        self.table = corr.source
        self.target_mean = target_moment(target, corr.target, self.pmap)
        self.patterns, counts, _ = source_train.patterns()
        self.log_counts = np.log(counts)
        self.n_source = source_train.n

    @property
    def dim(self) -> int:
        return self.pmap.dim

    def _check(self, delta, *vals):
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise ObjectiveError(
                f"non-finite objective at |delta|_inf = {np.max(np.abs(delta)):.3g}"
            )

    def value_and_grad(self, delta):
        delta = np.asarray(delta, dtype=float)
        self._check(delta, delta)
        lv, ratio = _log_components(self.patterns, delta, self.table, self.pmap)
        a = lv + self.log_counts
        lse = logsumexp(a)
        value = float(delta @ self.target_mean - lse + np.log(self.n_source))
        grad = self.target_mean - softmax(a) @ ratio
        self._check(delta, value, grad)
        return value, grad

    def value(self, delta) -> float:
        return self.value_and_grad(delta)[0]

    def grad(self, delta) -> np.ndarray:
        return self.value_and_grad(delta)[1]


def objective(delta, source_train, target, corr: CorrectionMatrix, graph: DependencyGraph) -> float:
    return KLIEPProblem(source_train, target, corr, graph).value(delta)


def gradient(delta, source_train, target, corr: CorrectionMatrix, graph: DependencyGraph) -> np.ndarray:
    return KLIEPProblem(source_train, target, corr, graph).grad(delta)


@dataclass
class SolverConfig:
    max_iters: int = 500
    grad_tol: float = 1e-8
    init: np.ndarray | None = None
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 60
    memory: int = 10

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be > 0")
        if not (0 < self.armijo < 1 and 0 < self.backtrack < 1):
            raise ValueError("line-search constants must lie in (0, 1)")


@dataclass
class SolveResult:
    delta: np.ndarray
    converged: bool
    status: str
    n_iter: int
    objective: float
    grad_norm: float
    trace: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta.tolist(),
            "converged": self.converged,
            "status": self.status,
            "n_iter": self.n_iter,
            "objective": self.objective,
            "grad_norm": self.grad_norm,
            "trace": self.trace,
        }


def _two_loop(grad, s_hist, y_hist):
    """L-BFGS direction for *descent* on the negated objective."""
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def maximize(problem: KLIEPProblem, config: SolverConfig | None = None) -> SolveResult:
    """Maximize the concave objective with L-BFGS and a backtracking line search."""
    cfg = config or SolverConfig()
    x = np.zeros(problem.dim) if cfg.init is None else np.array(cfg.init, dtype=float)
    if x.shape != (problem.dim,):
        raise ValueError(f"init has shape {x.shape}, expected ({problem.dim},)")
    fval, g = problem.value_and_grad(x)
    # work with f = -J, descent direction p on f
    f, gf = -fval, -g
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    trace = [{"iter": 0, "objective": fval, "grad_norm": float(np.max(np.abs(g)))}]
    status = "max_iters"
    it = 0
    while True:
        gnorm = float(np.max(np.abs(gf)))
        if gnorm <= cfg.grad_tol:
            status = "converged"
            break
        if it >= cfg.max_iters:
            break
        it += 1
        p = _two_loop(gf, s_hist, y_hist)
        if not gf @ p < 0:
            s_hist.clear()
            y_hist.clear()
            p = -gf
        slope = gf @ p
        step = 1.0 if s_hist else min(1.0, 1.0 / max(gnorm, 1e-300))
        noise = 1e-14 * max(1.0, abs(f))
        accepted = False
        for _ in range(cfg.max_backtracks):
            x_new = x + step * p
            try:
                fv_new, g_new = problem.value_and_grad(x_new)
            except ObjectiveError:
                step *= cfg.backtrack
                continue
            f_new, gf_new = -fv_new, -g_new
            if f_new <= f + cfg.armijo * step * slope:
                accepted = True
                break
            # near the optimum f stops resolving; accept a step that does not
            # raise f beyond rounding while shrinking the gradient
            if f_new <= f + noise and np.max(np.abs(gf_new)) < gnorm:
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            if s_hist:
                s_hist.clear()
                y_hist.clear()
                it -= 1
                continue
            if gnorm < 1e-6:
                status = "stalled"
                log.warning("line search stalled at gradient norm %.3g", gnorm)
                break
            raise SolverDivergence(
                f"line search failed at iteration {it} with gradient norm {gnorm:.3g}"
            )
        s, y = x_new - x, gf_new - gf
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, gf = x_new, f_new, gf_new
        trace.append({"iter": it, "objective": -f, "grad_norm": float(np.max(np.abs(gf)))})
    return SolveResult(
        delta=x,
        converged=status == "converged",
        status=status,
        n_iter=it,
        objective=-f,
        grad_norm=float(np.max(np.abs(gf))),
        trace=trace,
    )


def solve(source_train, target, corr: CorrectionMatrix, graph: DependencyGraph,
          config: SolverConfig | None = None) -> SolveResult:
    return maximize(KLIEPProblem(source_train, target, corr, graph), config)


def build_weights(delta, source_train, source_eval, corr: CorrectionMatrix, graph: DependencyGraph,
                  normalize: bool = True) -> WeightVector:
    """Weights E[w_hat(g) | g~(x)] on the evaluation split.

    The partition ratio is estimated from the training split as
    ``n_train / sum_j E[exp(delta . phi) | g~_j]``.
    """
    source_train, source_eval = as_slices(source_train), as_slices(source_eval)
    delta = np.asarray(delta, dtype=float)
    pmap = PotentialMap.build(source_train.k, graph)
    pats, counts, _ = source_train.patterns()
    lv_train, _ = _log_components(pats, delta, corr.source, pmap)
    log_denom = logsumexp(lv_train + np.log(counts))
    epats, _, inverse = source_eval.patterns()
    lv_eval, _ = _log_components(epats, delta, corr.source, pmap)
    lv = lv_eval[inverse]
    raw = np.exp(np.log(source_train.n) + lv - log_denom)
    weights = softmax(lv) if normalize else raw
    return WeightVector(weights, normalize, raw, float(np.exp(np.log(source_train.n) - log_denom)))


def split_source(n: int, mode: str = "half", seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the (train, eval) source splits.

    ``half`` shuffles with ``seed`` and uses the first floor(n/2) rows for
    training; ``none`` trains and evaluates on every row.
    """
    if mode == "none":
        idx = np.arange(n)
        return idx, idx
    if mode != "half":
        raise ValueError(f"unknown split mode {mode!r}")
    if n < 2:
        raise ValueError("half split needs at least 2 source examples")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[: n // 2]), np.sort(perm[n // 2:])
