"""Joint model over true and observed slices, its marginal over g, and exact sampling.

Every connected component of the slice graph has at most two slices, so all
sums here are exact enumerations over at most 36 configurations.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .slice_core import DependencyGraph, CorrectionTable, InputError, SliceMatrix

MAX_ENUM_K = 20


@dataclass(frozen=True)
class PotentialMap:
    """Layout of the potential vector phi(g).

    Unpaired slices contribute one entry ``g_i`` each (ascending index), then
    every edge ``(i, j)`` contributes ``[g_i, g_j, g_i * g_j]``.
    """

    k: int
    edges: tuple[tuple[int, int], ...]

    @classmethod
    def build(cls, k: int, graph: DependencyGraph | None) -> "PotentialMap":
        edges = () if graph is None else graph.edges
        bad = (graph or DependencyGraph()).violations(k)
        if bad:
            raise InputError("invalid dependency graph: " + "; ".join(bad))
        return cls(k, tuple(edges))

    @property
    def unpaired(self) -> tuple[int, ...]:
        paired = {i for e in self.edges for i in e}
        return tuple(i for i in range(self.k) if i not in paired)

    @property
    def dim(self) -> int:
        return self.k + len(self.edges)

    @property
    def edge_offset(self) -> int:
        return len(self.unpaired)

    def phi(self, g: np.ndarray) -> np.ndarray:
        g = np.atleast_2d(np.asarray(g, dtype=float))
        cols = [g[:, list(self.unpaired)]]
        for i, j in self.edges:
            cols.append(np.stack([g[:, i], g[:, j], g[:, i] * g[:, j]], axis=1))
        return np.concatenate(cols, axis=1)

    def labels(self) -> list[str]:
        out = [f"g{i}" for i in self.unpaired]
        for i, j in self.edges:
            out += [f"g{i}@{i},{j}", f"g{j}@{i},{j}", f"g{i}*g{j}"]
        return out


@dataclass(frozen=True)
class JointModelParams:
    """Parameters of the joint density over (g, g~).

    ``theta_edge`` follows the sorted edge order of the graph it is used with.
    ``theta_abstain=None`` means the observed slices never abstain.
    """

    theta_singleton: np.ndarray
    theta_noise: np.ndarray
    theta_edge: np.ndarray
    theta_abstain: np.ndarray | None = None

    def __post_init__(self):
        for name in ("theta_singleton", "theta_noise", "theta_edge"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if self.theta_abstain is not None:
            object.__setattr__(
                self, "theta_abstain", np.asarray(self.theta_abstain, dtype=float).reshape(-1)
            )
        k = self.theta_singleton.size
        if self.theta_noise.size != k or (
            self.theta_abstain is not None and self.theta_abstain.size != k
        ):
            raise InputError("theta_singleton, theta_noise and theta_abstain must all have length k")
        arrays = [self.theta_singleton, self.theta_noise, self.theta_edge]
        if self.theta_abstain is not None:
            arrays.append(self.theta_abstain)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise InputError("theta must be finite")

    @property
    def k(self) -> int:
        return self.theta_singleton.size

    @property
    def gtilde_support(self) -> tuple[int, ...]:
        return (-1, 1) if self.theta_abstain is None else (-1, 0, 1)

    def abstain(self, i: int) -> float:
        return 0.0 if self.theta_abstain is None else float(self.theta_abstain[i])

    def to_dict(self) -> dict:
        return {
            "theta_singleton": self.theta_singleton.tolist(),
            "theta_noise": self.theta_noise.tolist(),
            "theta_edge": self.theta_edge.tolist(),
            "theta_abstain": None if self.theta_abstain is None else self.theta_abstain.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointModelParams":
        return cls(d["theta_singleton"], d["theta_noise"], d["theta_edge"], d.get("theta_abstain"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class ProbabilityTable:
    configs: np.ndarray  # (2**k, k) in {-1, +1}
    probs: np.ndarray

    def expect(self, values: np.ndarray) -> float:
        return float(np.dot(self.probs, values))


def _component_log_potential(theta: JointModelParams, comp: tuple[int, ...], edge_idx, g, gt):
    """Log potential of one component; g and gt are (m, len(comp)) arrays."""
    out = np.zeros(g.shape[0])
    for c, i in enumerate(comp):
        out += theta.theta_singleton[i] * g[:, c] + theta.theta_noise[i] * g[:, c] * gt[:, c]
        out += theta.abstain(i) * (gt[:, c] == 0)
    if edge_idx is not None:
        out += theta.theta_edge[edge_idx] * gt[:, 0] * gt[:, 1]
    return out


def _components(theta: JointModelParams, pmap: PotentialMap):
    for i in pmap.unpaired:
        yield (i,), None
    for e, (i, j) in enumerate(pmap.edges):
        yield (i, j), e


def _component_table(theta: JointModelParams, comp, edge_idx):
    """All (g, g~) configurations of a component with normalized probabilities."""
    m = len(comp)
    gs = list(itertools.product((-1, 1), repeat=m))
    gts = list(itertools.product(theta.gtilde_support, repeat=m))
    g = np.array([a for a in gs for _ in gts], dtype=float).reshape(-1, m)
    gt = np.array([b for _ in gs for b in gts], dtype=float).reshape(-1, m)
    logp = _component_log_potential(theta, comp, edge_idx, g, gt)
    return g, gt, np.exp(logp - logsumexp(logp))


def _check_theta(theta: JointModelParams, pmap: PotentialMap):
    if theta.k != pmap.k or theta.theta_edge.size != len(pmap.edges):
        raise InputError(
            f"theta sized for k={theta.k}, |E|={theta.theta_edge.size}; "
            f"graph has k={pmap.k}, |E|={len(pmap.edges)}"
        )


def marginalize(theta: JointModelParams, graph: DependencyGraph) -> np.ndarray:
    """Natural parameters psi of p(g) obtained by summing the joint over g~.

    The returned vector follows :class:`PotentialMap` order.
    """
    pmap = PotentialMap.build(theta.k, graph)
    _check_theta(theta, pmap)
    support = theta.gtilde_support
    psi = np.zeros(pmap.dim)
    for c, i in enumerate(pmap.unpaired):
        ti, tii, ta = theta.theta_singleton[i], theta.theta_noise[i], theta.abstain(i)
        # log of sum over g~ of exp(potential) at g = +1 and g = -1
        plus = [ti + tii * b + ta * (b == 0) for b in support]
        minus = [-ti - tii * b + ta * (b == 0) for b in support]
        psi[c] = 0.5 * (logsumexp(plus) - logsumexp(minus))
    off = pmap.edge_offset
    for e, (i, j) in enumerate(pmap.edges):
        tii, tjj, tij = theta.theta_noise[i], theta.theta_noise[j], theta.theta_edge[e]
        ai, aj = theta.abstain(i), theta.abstain(j)

        def log_f(gi, gj):
            terms = [
                tii * gi * u + tjj * gj * v + tij * u * v + ai * (u == 0) + aj * (v == 0)
                for u in support
                for v in support
            ]
            return logsumexp(terms)

        psi[off + 3 * e] = theta.theta_singleton[i]
        psi[off + 3 * e + 1] = theta.theta_singleton[j]
        psi[off + 3 * e + 2] = 0.5 * (log_f(1, 1) - log_f(1, -1))
    return psi


def all_configs(k: int) -> np.ndarray:
    if k > MAX_ENUM_K:
        raise InputError(f"exact enumeration limited to k <= {MAX_ENUM_K} (got k={k})")
    return np.array(list(itertools.product((-1, 1), repeat=k)), dtype=float).reshape(-1, k)


def enumerate_marginal(psi: np.ndarray, graph: DependencyGraph, k: int | None = None) -> ProbabilityTable:
    """Exact p(g; psi) on every configuration of g by brute-force normalization."""
    psi = np.asarray(psi, dtype=float)
    if k is None:
        k = psi.size - len(graph.edges)
    pmap = PotentialMap.build(k, graph)
    if psi.size != pmap.dim:
        raise InputError(f"psi has dimension {psi.size}, expected {pmap.dim}")
    configs = all_configs(k)
    logp = pmap.phi(configs) @ psi
    return ProbabilityTable(configs, np.exp(logp - logsumexp(logp)))


def enumerate_joint(theta: JointModelParams, graph: DependencyGraph):
    """Brute-force joint table over every (g, g~) configuration.

    Returns ``(g, gtilde, probs)``.  Exponential in k; used as a reference.
    """
    pmap = PotentialMap.build(theta.k, graph)
    _check_theta(theta, pmap)
    k = theta.k
    if 2 * k > MAX_ENUM_K:
        raise InputError(f"joint enumeration limited to k <= {MAX_ENUM_K // 2}")
    gs = all_configs(k)
    gts = np.array(list(itertools.product(theta.gtilde_support, repeat=k)), dtype=float).reshape(-1, k)
    g = np.repeat(gs, len(gts), axis=0)
    gt = np.tile(gts, (len(gs), 1))
    logp = g @ theta.theta_singleton + (g * gt) @ theta.theta_noise
    if theta.theta_abstain is not None:
        logp = logp + (gt == 0) @ theta.theta_abstain
    for e, (i, j) in enumerate(pmap.edges):
        logp = logp + theta.theta_edge[e] * gt[:, i] * gt[:, j]
    return g, gt, np.exp(logp - logsumexp(logp))


def sample_joint(
    theta: JointModelParams, graph: DependencyGraph, n: int, seed: int | np.random.Generator
) -> tuple[SliceMatrix, SliceMatrix]:
    """Draw n exact i.i.d. samples of (g, g~), component by component."""
    pmap = PotentialMap.build(theta.k, graph)
    _check_theta(theta, pmap)
    rng = np.random.default_rng(seed)
    g = np.zeros((n, theta.k), dtype=np.int8)
    gt = np.zeros((n, theta.k), dtype=np.int8)
    for comp, e in _components(theta, pmap):
        cg, cgt, p = _component_table(theta, comp, e)
        pick = rng.choice(len(p), size=n, p=p)
        g[:, list(comp)] = cg[pick]
        gt[:, list(comp)] = cgt[pick]
    return SliceMatrix(g), SliceMatrix(gt)


def exact_correction(theta: JointModelParams, graph: DependencyGraph) -> CorrectionTable:
    """True p(g_i | g~_i) for every slice, by enumerating each component."""
    pmap = PotentialMap.build(theta.k, graph)
    _check_theta(theta, pmap)
    tables = np.full((theta.k, 2, 3), 0.5)
    for comp, e in _components(theta, pmap):
        cg, cgt, p = _component_table(theta, comp, e)
        for c, i in enumerate(comp):
            for b in theta.gtilde_support:
                mask = cgt[:, c] == b
                pb = p[mask].sum()
                tables[i, 1, b + 1] = p[mask & (cg[:, c] == 1)].sum() / pb
                tables[i, 0, b + 1] = 1.0 - tables[i, 1, b + 1]
    return CorrectionTable(tables, np.full(theta.k, theta.theta_abstain is not None))


def marginal_expectation(theta: JointModelParams, graph: DependencyGraph, values) -> float:
    """E[f(g)] under the model, where ``values`` maps each g configuration (in
    :func:`all_configs` order) to f(g)."""
    table = enumerate_marginal(marginalize(theta, graph), graph, theta.k)
    return table.expect(np.asarray(values, dtype=float))
