"""Slice matrices, dependency graphs, correction matrices and input validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# column index of g~ in a correction table: g~ = -1, 0, +1 -> 0, 1, 2
ABSTAIN_COL = 1
COVARIANCE_RIDGE = 1e-8


class InputError(ValueError):
    """Raised when inputs cannot be used by an estimator."""


class SingularCovarianceError(InputError):
    pass


@dataclass(frozen=True)
class SliceMatrix:
    """Observed slice values for one dataset, one column per slicing function.

    Entries are -1, +1, or 0 for an abstain.  Construction does not check the
    value range; use :func:`validate_inputs` for a full report.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise InputError(f"slice matrix must be 2-D, got shape {arr.shape}")
        if np.issubdtype(arr.dtype, np.floating):
            if not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
                raise InputError("slice matrix entries must be integers")
        arr = np.ascontiguousarray(arr, dtype=np.int8)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def has_abstains(self) -> bool:
        return bool(np.any(self.values == 0))

    def take(self, idx) -> "SliceMatrix":
        return SliceMatrix(self.values[idx])

    def patterns(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distinct rows, their counts, and the row -> pattern index map."""
        uniq, inverse, counts = np.unique(
            self.values, axis=0, return_inverse=True, return_counts=True
        )
        return uniq, counts, inverse.reshape(-1)


@dataclass(frozen=True)
class DependencyGraph:
    """A matching on slice indices.  Pairs are stored as sorted ``(i, j)``, i <= j."""

    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        canon = tuple(sorted((min(int(a), int(b)), max(int(a), int(b))) for a, b in self.edges))
        object.__setattr__(self, "edges", canon)

    @classmethod
    def empty(cls) -> "DependencyGraph":
        return cls(())

    def __len__(self):
        return len(self.edges)

    def violations(self, k: int | None = None) -> list[str]:
        out = []
        seen: dict[int, tuple[int, int]] = {}
        for e in sorted(set(self.edges)):
            if self.edges.count(e) > 1:
                out.append(f"edge {list(e)} listed {self.edges.count(e)} times")
        for i, j in self.edges:
            if i == j:
                out.append(f"self-loop on index {i}")
                continue
            if i < 0 or (k is not None and j >= k):
                out.append(f"edge {[i, j]} out of range for k={k}")
            for idx in (i, j):
                if idx in seen and seen[idx] != (i, j):
                    out.append(f"index {idx} in two edges")
                seen.setdefault(idx, (i, j))
        # a duplicated edge also trips the matching check; report each fact once
        return list(dict.fromkeys(out))


@dataclass(frozen=True)
class CorrectionTable:
    """Per-slice tables ``p(g_i = a | g~_i = b)`` for one dataset.

    ``tables`` has shape (k, 2, 3): axis 1 is g in (-1, +1), axis 2 is g~ in
    (-1, 0, +1).  ``has_abstain[i]`` records whether the abstain column was
    supplied; a missing column is stored as (0.5, 0.5).
    """

    tables: np.ndarray
    has_abstain: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.array(self.tables, dtype=float)
        if t.ndim == 3 and t.shape[1:] == (2, 2):
            full = np.full((t.shape[0], 2, 3), 0.5)
            full[:, :, 0] = t[:, :, 0]
            full[:, :, 2] = t[:, :, 1]
            t = full
            has = np.zeros(t.shape[0], dtype=bool)
        else:
            if t.ndim != 3 or t.shape[1:] != (2, 3):
                raise InputError(f"correction tables must have shape (k, 2, 3), got {t.shape}")
            has = (
                np.ones(t.shape[0], dtype=bool)
                if self.has_abstain is None
                else np.asarray(self.has_abstain, dtype=bool)
            )
        t.setflags(write=False)
        has.setflags(write=False)
        object.__setattr__(self, "tables", t)
        object.__setattr__(self, "has_abstain", has)

    @property
    def k(self) -> int:
        return self.tables.shape[0]

    @classmethod
    def identity(cls, k: int) -> "CorrectionTable":
        t = np.full((k, 2, 3), 0.5)
        t[:, 0, 0], t[:, 1, 0] = 1.0, 0.0
        t[:, 0, 2], t[:, 1, 2] = 0.0, 1.0
        return cls(t, np.zeros(k, dtype=bool))

    @classmethod
    def uninformative(cls, k: int) -> "CorrectionTable":
        return cls(np.full((k, 2, 3), 0.5), np.ones(k, dtype=bool))

    def signed_means(self, gtilde: np.ndarray) -> np.ndarray:
        """E[g_i | g~_i] for every entry of an (n, k) slice array."""
        cols = np.asarray(gtilde, dtype=np.intp) + 1
        idx = np.arange(self.k)
        return self.tables[idx, 1, cols] - self.tables[idx, 0, cols]

    def probs(self, gtilde: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(p(g_i=-1 | g~_i), p(g_i=+1 | g~_i)) arrays for an (n, k) slice array."""
        cols = np.asarray(gtilde, dtype=np.intp) + 1
        idx = np.arange(self.k)
        return self.tables[idx, 0, cols], self.tables[idx, 1, cols]


@dataclass(frozen=True)
class CorrectionMatrix:
    source: CorrectionTable
    target: CorrectionTable

    @classmethod
    def identity(cls, k: int) -> "CorrectionMatrix":
        return cls(CorrectionTable.identity(k), CorrectionTable.identity(k))

    @classmethod
    def uninformative(cls, k: int) -> "CorrectionMatrix":
        return cls(CorrectionTable.uninformative(k), CorrectionTable.uninformative(k))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": list(self.violations), "warnings": list(self.warnings)}

    def raise_if_failed(self):
        if self.violations:
            raise InputError("; ".join(self.violations))


def _check_slices(name: str, s: SliceMatrix, report: ValidationReport):
    if s.n < 1:
        report.violations.append(f"{name} slice matrix has no rows")
    if s.k < 1:
        report.violations.append(f"{name} slice matrix has no columns")
    bad = ~np.isin(s.values, (-1, 0, 1))
    if bad.any():
        rows, cols = np.nonzero(bad)
        report.violations.append(
            f"{name} slice matrix has {bad.sum()} entries outside {{-1,0,1}} "
            f"(first at row {rows[0]}, column {cols[0]})"
        )


def _check_table(name: str, table: CorrectionTable, slices: Sequence[SliceMatrix], report):
    t = table.tables
    labels = {0: "-1", 1: "0", 2: "+1"}
    for i in range(table.k):
        if not np.all(np.isfinite(t[i])) or np.any(t[i] < 0) or np.any(t[i] > 1):
            report.violations.append(f"{name} sigma^{i} has entries outside [0, 1]")
        for col in (0, 2) + ((1,) if table.has_abstain[i] else ()):
            s = t[i, :, col].sum()
            if not np.isclose(s, 1.0, rtol=0, atol=1e-9):
                report.violations.append(
                    f"{name} sigma^{i} column for g~={labels[col]} sums to {s:.6g} != 1"
                )
        if not table.has_abstain[i] and any(
            i < sl.k and np.any(sl.values[:, i] == 0) for sl in slices
        ):
            report.warnings.append(
                f"{name} sigma^{i} has no abstain column but slice {i} abstains; using (0.5, 0.5)"
            )


def validate_inputs(
    source: SliceMatrix,
    target: SliceMatrix,
    graph: DependencyGraph | None = None,
    corr: CorrectionMatrix | None = None,
) -> ValidationReport:
    """Check every input invariant and collect all failures into one report."""
    report = ValidationReport()
    _check_slices("source", source, report)
    _check_slices("target", target, report)
    if source.k != target.k:
        report.violations.append(f"source has k={source.k} slices but target has k={target.k}")
    k = source.k
    if graph is not None:
        report.violations.extend(graph.violations(k))
    if corr is not None:
        for name, table, data in (("source", corr.source, source), ("target", corr.target, target)):
            if table.k != k:
                report.violations.append(f"{name} correction has {table.k} slices, expected {k}")
                continue
            _check_table(name, table, [data], report)
    if not report.ok:
        return report

    for i in range(k):
        col_s, col_t = source.values[:, i], target.values[:, i]
        if np.all(col_s == col_s[0]) and np.all(col_t == col_s[0]):
            report.warnings.append(f"slice {i} is constant ({col_s[0]}) on both datasets")
    src_pat = {tuple(r) for r in np.unique(source.values, axis=0)}
    tgt_pat = {tuple(r) for r in np.unique(target.values, axis=0)}
    missing = sorted(src_pat - tgt_pat)
    if missing:
        shown = ", ".join(str(list(map(int, p))) for p in missing[:5])
        more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
        report.warnings.append(f"{len(missing)} source slice patterns absent from target: {shown}{more}")
    return report


def infer_edges(pooled: SliceMatrix, max_edges: int) -> DependencyGraph:
    """Pick dependent slice pairs from the inverse covariance of the pooled slices.

    Off-diagonal entries of the (ridge-regularized) precision matrix are ranked
    by magnitude and taken greedily, skipping pairs that would reuse an index.
    Abstains count as 0 in the covariance.
    """
    x = pooled.values.astype(float)
    n, k = x.shape
    if k < 2 or max_edges <= 0:
        return DependencyGraph.empty()
    if n < 2:
        raise InputError("edge inference needs at least 2 examples")
    const = [i for i in range(k) if np.all(x[:, i] == x[0, i])]
    if const:
        raise SingularCovarianceError(
            f"slices {const} are constant; covariance is singular. "
            "Drop constant/duplicate slices or supply edges manually."
        )
    cov = np.cov(x, rowvar=False) + COVARIANCE_RIDGE * np.eye(k)
    try:
        prec = np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            "slice covariance is singular; drop constant/duplicate slices or supply edges manually"
        ) from exc
    if not np.all(np.isfinite(prec)):
        raise SingularCovarianceError(
            "slice covariance is singular; drop constant/duplicate slices or supply edges manually"
        )
    iu, ju = np.triu_indices(k, 1)
    mags = np.abs(prec[iu, ju])
    order = sorted(range(len(iu)), key=lambda t: (-mags[t], iu[t], ju[t]))
    used: set[int] = set()
    chosen = []
    for t in order:
        if len(chosen) >= max_edges:
            break
        i, j = int(iu[t]), int(ju[t])
        if i in used or j in used:
            continue
        chosen.append((i, j))
        used.update((i, j))
    return DependencyGraph(tuple(chosen))


def as_slices(x) -> SliceMatrix:
    return x if isinstance(x, SliceMatrix) else SliceMatrix(np.asarray(x))


def loss_vector(values: Iterable[float]) -> np.ndarray:
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise InputError("loss vector has non-finite entries")
    return arr
