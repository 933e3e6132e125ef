"""Reference density-ratio estimators: CBIW, KMM, uLSIF and slice-frequency weights.

CBIW, KMM and uLSIF act on real feature matrices, standardized with the
pooled source+target mean and standard deviation before fitting.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve
from scipy.special import expit, log_expit

from .slice_core import InputError, SliceMatrix, as_slices
from .weights import DegenerateWeightsWarning, WeightVector, warn_if_concentrated


class ConvergenceWarning(UserWarning):
    pass


def _features(x, name):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[1] < 1:
        raise InputError(f"{name} features must be a 2-D matrix with at least one column")
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name} features contain non-finite values")
    return x


def standardize(source, target):
    xs, xt = _features(source, "source"), _features(target, "target")
    if xs.shape[1] != xt.shape[1]:
        raise InputError(f"source has {xs.shape[1]} features, target has {xt.shape[1]}")
    pooled = np.vstack([xs, xt])
    mu = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd[sd == 0] = 1.0
    return (xs - mu) / sd, (xt - mu) / sd


# --------------------------------------------------------------------------- CBIW


def _accurate_xtr(xa, r, block=1024):
    """``xa.T @ r`` with small rounding error.

    One long BLAS reduction over rows ordered source-then-target carries
    partial sums of order n, which puts its rounding floor near the 1e-8
    gradient tolerance at n ~ 1e5.  Summing short blocks pairwise avoids it.
    """
    n = xa.shape[0]
    if n <= block:
        return xa.T @ r
    parts = np.stack([xa[i:i + block].T @ r[i:i + block] for i in range(0, n, block)])
    return np.ascontiguousarray(parts.T).sum(axis=1)


def fit_logistic_irls(x, z, l2_strength=1.0, tol=1e-8, max_iter=100):
    """L2-regularized logistic regression by Newton/IRLS.

    Minimizes ``sum_i logloss_i + ||w||^2 / (2 * l2_strength)`` with an
    unpenalized intercept, i.e. ``l2_strength`` is an inverse strength.
    Returns ``(coef, intercept, n_iter)``.
    """
    n, p = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    reg = np.full(p + 1, 1.0 / l2_strength if l2_strength else 0.0)
    reg[-1] = 0.0
    beta = np.zeros(p + 1)

    def loss(b):
        eta = xa @ b
        # logloss = -[z log s(eta) + (1-z) log s(-eta)]
        return -(z * log_expit(eta) + (1 - z) * log_expit(-eta)).sum() + 0.5 * reg @ (b * b)

    cur = loss(beta)
    for it in range(1, max_iter + 1):
        mu = expit(xa @ beta)
        grad = _accurate_xtr(xa, mu - z) + reg * beta
        if np.max(np.abs(grad)) <= tol:
            return beta[:-1], beta[-1], it - 1
        wts = mu * (1 - mu)
        hess = (xa * wts[:, None]).T @ xa
        hess[np.diag_indices_from(hess)] += reg + 1e-12
        try:
            step = cho_solve(cho_factor(hess), grad)
        except LinAlgError:
            step = solve(hess, grad, assume_a="sym")
        decrement = grad @ step
        if decrement <= 1e-13 * max(1.0, abs(cur)):
            # below loss rounding: the line search cannot see progress, Newton is local
            beta = beta - step
            cur = loss(beta)
            continue
        t = 1.0
        while True:
            cand = beta - t * step
            new = loss(cand)
            if new <= cur - 1e-4 * t * decrement or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10 and new > cur:
            break
        beta, cur = cand, new
    mu = expit(xa @ beta)
    grad = _accurate_xtr(xa, mu - z) + reg * beta
    if np.max(np.abs(grad)) > tol:
        warnings.warn(
            f"logistic IRLS stopped with gradient norm {np.max(np.abs(grad)):.2e}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return beta[:-1], beta[-1], max_iter


def cbiw_weights(source, target, l2_strength: float = 1.0, normalize: bool = True,
                 standardize_features: bool = True) -> WeightVector:
    """Classifier-based importance weights from a source-vs-target logistic model.

    Raw weight is ``(n_s / n_t) * p(z=1 | x) / p(z=0 | x)`` on source rows.
    ``l2_strength=None`` or 0 fits without regularization.
    """
    if standardize_features:
        xs, xt = standardize(source, target)
    else:
        xs, xt = _features(source, "source"), _features(target, "target")
    x = np.vstack([xs, xt])
    z = np.concatenate([np.zeros(len(xs)), np.ones(len(xt))])
    coef, icpt, _ = fit_logistic_irls(x, z, l2_strength or 0.0)
    eta_s = xs @ coef + icpt
    eta_t = xt @ coef + icpt
    if eta_s.max() < eta_t.min():
        warnings.warn(
            "CBIW classifier separates source from target; weights are extreme",
            DegenerateWeightsWarning,
            stacklevel=2,
        )
    # p/(1-p) = exp(eta); shift before exponentiating, normalization absorbs it
    log_raw = np.log(len(xs) / len(xt)) + eta_s
    raw = np.exp(log_raw)
    if not np.all(np.isfinite(raw)):
        raw = np.exp(log_raw - log_raw.max())
    warn_if_concentrated(raw, "CBIW")
    if normalize:
        w = np.exp(log_raw - log_raw.max())
        return WeightVector(w / w.sum(), True, raw)
    return WeightVector(raw, False, raw)


# --------------------------------------------------------------------------- kernels


def _sqdist(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def gaussian_kernel(a, b, width):
    return np.exp(-_sqdist(a, b) / (2.0 * width * width))


def median_width(x, max_points=1000, seed=0):
    rng = np.random.default_rng(seed)
    if len(x) > max_points:
        x = x[rng.choice(len(x), max_points, replace=False)]
    d = np.sqrt(_sqdist(x, x))
    vals = d[np.triu_indices(len(x), 1)]
    vals = vals[vals > 0]
    return float(np.median(vals)) if vals.size else 1.0


# --------------------------------------------------------------------------- KMM

KMM_WINDOW = 50


def _project_box_sum(v, upper, lo, hi):
    """Euclidean projection onto {0 <= w <= upper, lo <= sum(w) <= hi}."""
    w = np.clip(v, 0.0, upper)
    s = w.sum()
    if lo <= s <= hi:
        return w
    goal = hi if s > hi else lo
    # sum(clip(v - tau)) is non-increasing in tau
    a, b = v.min() - upper, v.max()
    for _ in range(200):
        tau = 0.5 * (a + b)
        if np.clip(v - tau, 0.0, upper).sum() > goal:
            a = tau
        else:
            b = tau
    w = np.clip(v - b, 0.0, upper)
    return w


def _top_eigenvalue(k, iters=100, seed=0):
    v = np.random.default_rng(seed).standard_normal(k.shape[0])
    lam = 0.0
    for _ in range(iters):
        u = k @ v
        lam_new = np.linalg.norm(u)
        v = u / lam_new
        if abs(lam_new - lam) <= 1e-10 * lam_new:
            break
        lam = lam_new
    return lam_new


def kmm_weights(source, target, kernel_width: float = 1.0, B: float = 1000.0,
                eps: float | None = None, tol: float = 1e-6, max_iter: int = 50000,
                max_samples: int = 10000, seed: int = 0) -> WeightVector:
    """Kernel mean matching on a Gaussian RKHS, solved by accelerated projected gradient.

    Solves ``min 0.5 w'Kw - kappa'w`` s.t. ``0 <= w <= B`` and
    ``|sum(w) - n_s| <= n_s * eps`` where ``kappa_i = (n_s/n_t) sum_j k(x_i, t_j)``.
    Iteration stops once the objective improves by at most ``tol`` (relative)
    over the last ``KMM_WINDOW`` iterations.
    Inputs above ``max_samples`` rows are subsampled with ``seed``; the target
    subsample only enters through ``kappa``.  Weights are returned for the
    source rows that were kept (all rows when no subsampling happened).
    """
    if kernel_width <= 0:
        raise InputError("kernel_width must be positive")
    xs, xt = standardize(source, target)
    rng = np.random.default_rng(seed)
    if len(xs) > max_samples:
        raise InputError(
            f"KMM supports at most {max_samples} source rows; subsample first (got {len(xs)})"
        )
    if len(xt) > max_samples:
        xt = xt[rng.choice(len(xt), max_samples, replace=False)]
    ns, nt = len(xs), len(xt)
    if eps is None:
        eps = (np.sqrt(ns) - 1) / np.sqrt(ns)
    K = gaussian_kernel(xs, xs, kernel_width)
    kappa = (ns / nt) * gaussian_kernel(xs, xt, kernel_width).sum(axis=1)
    lo, hi = ns * (1 - eps), ns * (1 + eps)
    L = _top_eigenvalue(K)

    def obj(w):
        return 0.5 * w @ (K @ w) - kappa @ w

    w = _project_box_sum(np.ones(ns), B, lo, hi)
    y, t = w.copy(), 1.0
    f_w = obj(w)
    history = [f_w]
    converged = False
    for _ in range(max_iter):
        grad = K @ y - kappa
        w_new = _project_box_sum(y - grad / L, B, lo, hi)
        f_new = obj(w_new)
        if f_new > f_w:
            # restart momentum from the last iterate
            y, t = w.copy(), 1.0
            grad = K @ y - kappa
            w_new = _project_box_sum(y - grad / L, B, lo, hi)
            f_new = obj(w_new)
        # the Gram matrix is numerically low-rank, so w itself can drift along
        # flat directions long after the objective has settled; judge
        # progress on the objective over a window of iterations
        history.append(f_new)
        if len(history) > KMM_WINDOW and history[-KMM_WINDOW - 1] - f_new <= tol * max(1.0, abs(f_new)):
            w, f_w = w_new, f_new
            converged = True
            break
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = w_new + ((t - 1) / t_new) * (w_new - w)
        w, f_w, t = w_new, f_new, t_new
    if not converged:
        warnings.warn(
            f"KMM did not converge in {max_iter} iterations; returning last iterate",
            ConvergenceWarning,
            stacklevel=2,
        )
    return WeightVector.from_raw(w, True)


# --------------------------------------------------------------------------- uLSIF


def ulsif_weights(source, target, n_basis: int | None = None, lam: float = 0.1,
                  width: float | None = None, seed: int = 0, normalize: bool = True) -> WeightVector:
    """Least-squares density-ratio fit on Gaussian basis functions at target points.

    ``alpha = (H + lam I)^-1 h`` with H the source second moment of the basis and
    h its target mean; negative coefficients are clipped to zero after the solve.
    """
    xs, xt = standardize(source, target)
    if n_basis is None:
        n_basis = min(100, len(xt))
    if not 1 <= n_basis <= len(xt):
        raise InputError(f"n_basis must lie in [1, n_t={len(xt)}]")
    rng = np.random.default_rng(seed)
    centers = xt[np.sort(rng.choice(len(xt), n_basis, replace=False))]
    if width is None:
        width = median_width(np.vstack([xs, xt]), seed=seed)
    phi_s = gaussian_kernel(xs, centers, width)
    phi_t = gaussian_kernel(xt, centers, width)
    H = phi_s.T @ phi_s / len(xs)
    h = phi_t.mean(axis=0)
    alpha = None
    for attempt in range(4):
        try:
            alpha = solve(H + lam * np.eye(n_basis), h, assume_a="pos")
            break
        except (LinAlgError, np.linalg.LinAlgError):
            if attempt == 3:
                raise
            lam *= 10.0
    alpha = np.maximum(alpha, 0.0)
    raw = phi_s @ alpha
    if normalize and not raw.sum() > 0:
        raise InputError("uLSIF produced all-zero weights")
    return WeightVector.from_raw(raw, normalize)


# --------------------------------------------------------------------------- frequency ratio


def simple_slice_weights(source: SliceMatrix, target: SliceMatrix) -> WeightVector:
    """Weight each source row by target/source frequency of its exact slice pattern."""
    source, target = as_slices(source), as_slices(target)
    spats, scounts, inverse = source.patterns()
    tpats, tcounts, _ = target.patterns()
    tfreq = {tuple(p): c / target.n for p, c in zip(tpats.tolist(), tcounts)}
    sfreq = scounts / source.n
    ratio = np.array([tfreq.get(tuple(p), 0.0) for p in spats.tolist()]) / sfreq
    src_set = {tuple(p) for p in spats.tolist()}
    missing = [p for p in tfreq if p not in src_set]
    if missing:
        mass = sum(tfreq[p] for p in missing)
        warnings.warn(
            f"{len(missing)} target slice patterns never occur in source "
            f"(target mass {mass:.3g} unrepresentable): {missing[:5]}",
            DegenerateWeightsWarning,
            stacklevel=2,
        )
    raw = ratio[inverse]
    return WeightVector.from_raw(raw, True)
