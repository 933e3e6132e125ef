"""Weighted performance estimates and weight diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .weights import WeightVector


@dataclass(frozen=True)
class Estimate:
    value: float
    m_hat: float
    ess: float
    weight_variance: float
    n_s1: int
    n_s2: int
    method: str = "mandoline"

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "m_hat": self.m_hat,
            "ess": self.ess,
            "weight_variance": self.weight_variance,
            "n_s1": self.n_s1,
            "n_s2": self.n_s2,
            "method": self.method,
        }


def effective_sample_size(weights) -> float:
    """(sum w)^2 / sum w^2."""
    w = np.asarray(getattr(weights, "weights", weights), dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    sq = np.dot(w, w)
    if sq == 0:
        raise ValueError("effective sample size undefined for all-zero weights")
    return float(w.sum() ** 2 / sq)


def weighted_estimate(weights: WeightVector, loss, n_s1: int | None = None,
                      method: str = "mandoline") -> Estimate:
    """Importance-weighted mean of the loss.

    Normalized weights give the self-normalized estimate ``sum w_i l_i``;
    unnormalized weights are averaged as ``sum w_i l_i / n``.
    """
    loss = np.asarray(loss, dtype=float).reshape(-1)
    w = weights.weights
    if w.size != loss.size:
        raise ValueError(f"{w.size} weights but {loss.size} losses")
    if weights.normalized:
        value = float(w @ loss)
    else:
        value = float(w @ loss / loss.size)
    raw = weights.raw
    return Estimate(
        value=value,
        m_hat=float(raw.max()),
        ess=effective_sample_size(w),
        weight_variance=float(np.var(raw)),
        n_s1=int(loss.size if n_s1 is None else n_s1),
        n_s2=int(loss.size),
        method=method,
    )


@dataclass
class BoundInputs:
    """Quantities entering the finite-sample error bound.

    The eta arrays hold per-slice relative-error bounds for the k' uncorrected
    slices; ``tv_term`` bounds the shift in properties the slices do not model
    and is always supplied by the user.
    """

    eta_s_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_s_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_t_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_t_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    M: float = 1.0
    tv_term: float = 0.0
    epsilon: float = 0.05
    c_s_loss: float = 1.0

    def __post_init__(self):
        names = ("eta_s_min", "eta_s_max", "eta_t_min", "eta_t_max")
        for name in names:
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        sizes = {getattr(self, n).size for n in names}
        if len(sizes) != 1:
            raise ValueError("all eta arrays must have the same length k'")
        for name in names:
            v = getattr(self, name)
            if np.any(v < 0) or np.any(v >= 1):
                raise ValueError(f"{name} entries must lie in [0, 1)")
        if np.any(self.eta_s_min > self.eta_s_max) or np.any(self.eta_t_min > self.eta_t_max):
            raise ValueError("eta minimum exceeds maximum")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.tv_term < 0:
            raise ValueError("tv_term must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def correction_ratio(inputs: BoundInputs) -> float:
    return float(np.prod((1 + inputs.eta_t_max) / (1 - inputs.eta_s_min)))


def theorem1_bound(inputs: BoundInputs, n_s: int, M_hat: float) -> float:
    """High-probability bound on |true target loss - estimate|.

    Sum of the user-supplied unmodeled-shift term, a bias term from inaccurate
    correction tables, and a sampling term shrinking like 1/sqrt(n_s).
    """
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    r = correction_ratio(inputs)
    bias = r * inputs.M * float(np.sum(
        inputs.eta_t_max / (1 - inputs.eta_t_min) + inputs.eta_s_max / (1 - inputs.eta_s_min)
    ))
    sampling = M_hat * (inputs.c_s_loss + 1) * np.sqrt(np.log(4 / inputs.epsilon) / n_s)
    return float(inputs.tv_term + bias + sampling)
