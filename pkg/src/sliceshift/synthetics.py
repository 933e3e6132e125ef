"""Seeded synthetic shift problems with known target values.

Each generator returns a :class:`SyntheticBundle`.  Randomness comes from a
single root seed split with ``SeedSequence.spawn`` into one stream per
component, so e.g. the relevant part of the high-dimensional problem does
not change when ``d_irrelevant`` does.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import io
from .graphical_model import JointModelParams, enumerate_marginal, exact_correction, marginalize, sample_joint
from .slice_core import CorrectionMatrix, DependencyGraph, SliceMatrix

MC_REFERENCE_SIZE = 1_000_000
NOISY_LOSS_TABLE = (0.02, 0.2, 0.9, 0.2)  # indexed by (g1, g2) = (--), (-+), (+-), (++)


@dataclass
class SyntheticBundle:
    source_features: np.ndarray
    target_features: np.ndarray
    source_slices: SliceMatrix
    target_slices: SliceMatrix
    source_loss: np.ndarray
    true_target_value: float
    true_source_value: float
    truth_method: str
    generator: str
    generator_config: dict
    seed: int
    graph: DependencyGraph = field(default_factory=DependencyGraph)
    correction: CorrectionMatrix | None = None
    extras: dict = field(default_factory=dict)

    def truth(self) -> dict:
        return {
            "true_target_value": self.true_target_value,
            "true_source_value": self.true_source_value,
            "truth_method": self.truth_method,
            "generator": self.generator,
            "generator_config": self.generator_config,
            "seed": self.seed,
        }


def _binary_g(rng, n, p_zero):
    return (rng.random(n) >= p_zero).astype(np.int8)


def gen_support_shift(p_spurious: float, n: int = 10000, seed: int = 0) -> SyntheticBundle:
    """One binary property g1 plus a spurious feature that is always on in the target.

    g1 = 0 with probability 0.25 on source and 0.75 on target; the first
    feature is Normal(2 g1 - 1, var) and Y is logistic in it.  The spurious
    feature is 1 with probability ``p_spurious`` on source.
    """
    if not 0 < p_spurious <= 1:
        raise ValueError("p_spurious must lie in (0, 1]")
    s_par, s_src, s_tgt, s_ref = np.random.SeedSequence(seed).spawn(4)
    rng = np.random.default_rng(s_par)
    variance = float(rng.uniform(0.5, 2.0))
    coef = float(rng.uniform(1.0, 3.0))
    sd = np.sqrt(variance)

    def side(stream, p_zero, spurious_rate, size):
        r = np.random.default_rng(stream)
        g = _binary_g(r, size, p_zero)
        x1 = r.normal(2.0 * g - 1.0, sd)
        spur = (r.random(size) < spurious_rate).astype(float)
        y = (r.random(size) < expit(coef * x1)).astype(float)
        return g, np.column_stack([x1, spur]), y

    gs, xs, ys = side(s_src, 0.25, p_spurious, n)
    gt, xt, _ = side(s_tgt, 0.75, 1.0, n)
    ref_s, ref_t = (np.random.default_rng(s) for s in s_ref.spawn(2))

    def reference(r, p_zero):
        g = _binary_g(r, MC_REFERENCE_SIZE, p_zero)
        return float(expit(coef * r.normal(2.0 * g - 1.0, sd)).mean())

    return SyntheticBundle(
        source_features=xs,
        target_features=xt,
        source_slices=SliceMatrix(2 * gs.astype(np.int8) - 1),
        target_slices=SliceMatrix(2 * gt.astype(np.int8) - 1),
        source_loss=ys,
        true_target_value=reference(ref_t, 0.75),
        true_source_value=reference(ref_s, 0.25),
        truth_method="monte_carlo",
        generator="support_shift",
        generator_config={"p_spurious": p_spurious, "n": n, "variance": variance, "coef": coef},
        seed=seed,
        correction=CorrectionMatrix.identity(1),
    )


def _circle_points(r, g):
    angle = r.uniform(0.0, 2.0 * np.pi, g.size)
    cx = np.where(g == 1, 0.0, -1.0)
    cy = np.where(g == 1, 1.0, 0.0)
    return np.column_stack([cx + np.cos(angle), cy + np.sin(angle)])


def gen_highdim(d_irrelevant: int, seed: int = 0, n_source: int = 1000,
                n_target: int = 10000) -> SyntheticBundle:
    """Two informative features on class-dependent circles plus N(0, 25) noise dimensions."""
    if d_irrelevant < 0:
        raise ValueError("d_irrelevant must be >= 0")
    s_src, s_tgt, s_noise, s_ref = np.random.SeedSequence(seed).spawn(4)
    coef = np.array([1.0, 1.0]) / np.sqrt(2.0)

    def side(stream, p_zero, size):
        r = np.random.default_rng(stream)
        g = _binary_g(r, size, p_zero)
        x = _circle_points(r, g)
        y = (r.random(size) < expit(x @ coef)).astype(float)
        return g, x, y

    gs, xs, ys = side(s_src, 0.25, n_source)
    gt, xt, _ = side(s_tgt, 0.75, n_target)
    noise = np.random.default_rng(s_noise)
    xs = np.hstack([xs, noise.normal(0.0, 5.0, (n_source, d_irrelevant))])
    xt = np.hstack([xt, noise.normal(0.0, 5.0, (n_target, d_irrelevant))])
    ref_s, ref_t = (np.random.default_rng(s) for s in s_ref.spawn(2))

    def reference(r, p_zero):
        g = _binary_g(r, MC_REFERENCE_SIZE, p_zero)
        return float(expit(_circle_points(r, g) @ coef).mean())

    return SyntheticBundle(
        source_features=xs,
        target_features=xt,
        source_slices=SliceMatrix(2 * gs.astype(np.int8) - 1),
        target_slices=SliceMatrix(2 * gt.astype(np.int8) - 1),
        source_loss=ys,
        true_target_value=reference(ref_t, 0.75),
        true_source_value=reference(ref_s, 0.25),
        truth_method="monte_carlo",
        generator="highdim",
        generator_config={"d_irrelevant": d_irrelevant, "n_source": n_source, "n_target": n_target},
        seed=seed,
        correction=CorrectionMatrix.identity(1),
    )


def noisy_loss(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g)
    idx = 2 * (g[:, 0] > 0) + (g[:, 1] > 0)
    return np.asarray(NOISY_LOSS_TABLE)[idx]


def gen_noisy_slices(theta_ii: float, seed: int = 0, n: int = 100_000) -> SyntheticBundle:
    """Two noisy slices joined by one edge, sampled exactly from the joint model.

    All non-noise parameters of the source and target models are drawn
    uniformly from [0, 1]; every slice shares the noise parameter ``theta_ii``.
    The bundle carries the exact correction tables p(g_i | g~_i).
    """
    if theta_ii < 0:
        raise ValueError("theta_ii must be >= 0")
    s_par, s_src, s_tgt = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(s_par)
    graph = DependencyGraph(((0, 1),))

    def draw():
        return JointModelParams(rng.uniform(0, 1, 2), np.full(2, float(theta_ii)), rng.uniform(0, 1, 1))

    theta_s, theta_t = draw(), draw()
    g_s, gt_s = sample_joint(theta_s, graph, n, np.random.default_rng(s_src))
    g_t, gt_t = sample_joint(theta_t, graph, n, np.random.default_rng(s_tgt))

    def truth(theta):
        table = enumerate_marginal(marginalize(theta, graph), graph, 2)
        return table.expect(noisy_loss(table.configs))

    corr = CorrectionMatrix(exact_correction(theta_s, graph), exact_correction(theta_t, graph))
    return SyntheticBundle(
        source_features=gt_s.values.astype(float),
        target_features=gt_t.values.astype(float),
        source_slices=gt_s,
        target_slices=gt_t,
        source_loss=noisy_loss(g_s.values),
        true_target_value=truth(theta_t),
        true_source_value=truth(theta_s),
        truth_method="analytic",
        generator="noisy_slices",
        generator_config={"theta_ii": float(theta_ii), "n": n,
                          "theta_source": theta_s.to_dict(), "theta_target": theta_t.to_dict()},
        seed=seed,
        graph=graph,
        correction=corr,
        extras={"source_g": g_s, "target_g": g_t, "theta_source": theta_s, "theta_target": theta_t},
    )


GENERATORS = {
    "support_shift": gen_support_shift,
    "highdim": gen_highdim,
    "noisy_slices": gen_noisy_slices,
}


def generate(name: str, seed: int = 0, **params) -> SyntheticBundle:
    if name not in GENERATORS:
        raise KeyError(f"unknown generator {name!r}; available: {', '.join(GENERATORS)}")
    return GENERATORS[name](seed=seed, **params)


def write_bundle(bundle: SyntheticBundle, outdir, features: bool = True) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_slices(out / "source_slices.csv", bundle.source_slices)
    io.write_slices(out / "target_slices.csv", bundle.target_slices)
    io.write_loss(out / "source_loss.csv", bundle.source_loss)
    io.write_edges(out / "edges.json", bundle.graph)
    if bundle.correction is not None:
        io.write_correction(out / "correction.json", bundle.correction)
    if features:
        io.write_features(out / "source_features.csv", bundle.source_features)
        io.write_features(out / "target_features.csv", bundle.target_features)
    io.dump_json(out / "truth.json", bundle.truth())
    return out
