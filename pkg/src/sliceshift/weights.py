from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateWeightsWarning(UserWarning):
    """Weights concentrate on very few examples or cannot represent the target."""


@dataclass(frozen=True)
class WeightVector:
    """Importance weights over the evaluation examples.

    ``raw`` keeps the unnormalized weights so that diagnostics such as the
    maximum weight are available after self-normalization.
    """

    weights: np.ndarray
    normalized: bool
    raw: np.ndarray
    partition_ratio_estimate: float | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be a finite non-negative vector")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "raw", np.asarray(self.raw, dtype=float))

    def __len__(self):
        return self.weights.size

    @property
    def max_raw(self) -> float:
        return float(self.raw.max())

    @classmethod
    def from_raw(cls, raw, normalize: bool = True, partition_ratio_estimate=None) -> "WeightVector":
        raw = np.asarray(raw, dtype=float)
        if normalize:
            total = raw.sum()
            if not total > 0:
                raise ValueError("cannot normalize weights that sum to zero")
            w = raw / total
        else:
            w = raw
        return cls(w, normalize, raw, partition_ratio_estimate)


def warn_if_concentrated(w: np.ndarray, name: str, min_ess_fraction: float = 0.01):
    w = np.asarray(w, dtype=float)
    ess = w.sum() ** 2 / np.dot(w, w)
    if w.size > 1 and ess < max(2.0, min_ess_fraction * w.size):
        warnings.warn(
            f"{name}: weights concentrate on ~{ess:.1f} of {w.size} examples",
            DegenerateWeightsWarning,
            stacklevel=3,
        )
