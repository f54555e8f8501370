"""Horizontal regression engines over Fourier characters.

Two per-unit estimators for an outcome function on the hypercube:

* ``lasso_fit``: minimizes (1/n) ||Y - chi alpha||^2 + lambda ||alpha||_1
  over all 2^p coefficients by cyclic coordinate descent on an active set.
  The active set grows through full matrix-free passes (one fast transform
  per pass), so the 2^p-column design never exists in memory.
* ``select_ridge_fit``: refits the Lasso support by ridge with penalty
  exactly 1/n, which admits Gaussian prediction intervals through the
  support gram matrix.

Character columns have entries +-1, so every column has squared norm n;
coordinate updates reduce to a soft threshold of the partial correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Sequence

import numpy as np

from synthcombo.hypercube import (
    MAX_WHT_P,
    Combination,
    SparseFourierVector,
    character_matrix,
    correlate_all_subsets,
)


class NumericalError(RuntimeError):
    """A linear-algebra step failed beyond recovery (singular system, blowup)."""


@dataclass(frozen=True)
class RegressionSample:
    """Observed (combination, outcome) pairs for one unit.

    ``masks`` holds the combination bitmasks; duplicates are allowed and act
    as repeated measurements.
    """

    p: int
    masks: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self) -> None:
        masks = np.ascontiguousarray(np.asarray(self.masks, dtype=np.int64))
        outcomes = np.ascontiguousarray(np.asarray(self.outcomes, dtype=np.float64))
        if masks.ndim != 1 or outcomes.ndim != 1 or masks.size != outcomes.size:
            raise ValueError("masks and outcomes must be equal-length 1-d arrays")
        if masks.size == 0:
            raise ValueError("sample must contain at least one observation")
        if masks.size and (masks.min() < 0 or masks.max() >= (1 << self.p)):
            raise ValueError(f"combination mask outside [0, 2^{self.p})")
        if not np.all(np.isfinite(outcomes)):
            raise ValueError("outcomes must be finite")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "outcomes", outcomes)

    @classmethod
    def from_combinations(cls, combos: Sequence[Combination], outcomes: Sequence[float]) -> "RegressionSample":
        if not combos:
            raise ValueError("sample must contain at least one observation")
        p = combos[0].p
        if any(c.p != p for c in combos):
            raise ValueError("all combinations must share the same p")
        return cls(p, np.array([c.mask for c in combos]), np.asarray(outcomes, dtype=np.float64))

    @property
    def n(self) -> int:
        return int(self.masks.size)

    @property
    def combos(self) -> list[Combination]:
        return [Combination(self.p, int(m)) for m in self.masks]


@dataclass(frozen=True)
class LassoFit:
    alpha_hat: SparseFourierVector
    lam: float
    objective: float
    sweeps: int
    converged: bool


@dataclass(frozen=True)
class SelectRidgeFit:
    """Ridge refit on the Lasso support, with the pieces the intervals need."""

    support: tuple[int, ...]          # subset bits, sorted
    coeffs: np.ndarray                # ridge coefficients aligned with support
    gram: np.ndarray                  # K = chi_S^T chi_S / n on the support
    noise_var: float
    n: int
    p: int

    def as_sparse(self) -> SparseFourierVector:
        return SparseFourierVector(self.p, list(zip(self.support, self.coeffs)))


@dataclass(frozen=True)
class PredictionInterval:
    point: float
    std_err: float
    level: float

    @property
    def half_width(self) -> float:
        return NormalDist().inv_cdf(0.5 + self.level / 2.0) * self.std_err

    @property
    def bounds(self) -> tuple[float, float]:
        h = self.half_width
        return (self.point - h, self.point + h)


def _soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def lasso_lambda_default(n: int, p: int, sigma_hat: float, c: float = 4.0) -> float:
    """Penalty scale c * sigma_hat * sqrt(p/n); decays with sample size."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return c * sigma_hat * math.sqrt(p / n)


def lasso_lambda_max(sample: RegressionSample) -> float:
    """The smallest penalty at which the all-zero solution is optimal.

    From the zero-point stationarity condition: max_S |(2/n) chi_S^T Y|.
    """
    corr = correlate_all_subsets(sample.masks, sample.outcomes, sample.p)
    return 2.0 * float(np.abs(corr).max()) / sample.n


@dataclass
class _ActiveSet:
    """Mutable solver state: active subset bits, cached sign columns, coefficients."""

    bits: list[int] = field(default_factory=list)
    index: dict[int, int] = field(default_factory=dict)
    cols: np.ndarray | None = None          # n x k sign cache
    coef: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def add(self, new_bits: np.ndarray, masks: np.ndarray) -> None:
        fresh = [int(b) for b in new_bits if int(b) not in self.index]
        if not fresh:
            return
        new_cols = character_matrix(masks, fresh)
        self.cols = new_cols if self.cols is None else np.hstack([self.cols, new_cols])
        for b in fresh:
            self.index[b] = len(self.bits)
            self.bits.append(b)
        self.coef = np.concatenate([self.coef, np.zeros(len(fresh))])


def lasso_fit(
    sample: RegressionSample,
    lam: float,
    *,
    tol: float = 1e-8,
    max_sweeps: int = 1000,
    warm_start: SparseFourierVector | None = None,
    check_objective: bool = True,
) -> LassoFit:
    """Coordinate-descent Lasso over all 2^p character coefficients.

    Outer loop: one full pass computes every coordinate's correlation with
    the residual via the fast transform and adds violators of the
    stationarity condition to the active set.  Inner loop: cyclic coordinate
    descent over the active set until the largest coefficient change in a
    sweep drops below ``tol``.  Terminates when a full pass adds nothing and
    the inner loop has converged, or at ``max_sweeps``.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if sample.p > MAX_WHT_P:
        raise ValueError(f"lasso over all subsets requires p <= {MAX_WHT_P}")
    y = sample.outcomes
    masks = sample.masks
    n = sample.n
    p = sample.p

    state = _ActiveSet()
    if warm_start is not None and warm_start.nnz:
        state.add(warm_start.support_bits, masks)
        for b, v in warm_start.items():
            state.coef[state.index[b]] = v

    if state.cols is None:
        residual = y.copy()
    else:
        residual = y - state.cols @ state.coef

    sweeps = 0
    # a warm start carries coefficients tuned for some other penalty, so the
    # active set must be swept at this one even if no new coordinate violates
    inner_converged = not state.bits
    prev_objective = float(residual @ residual) / n + lam * float(np.abs(state.coef).sum())
    # slack on the add rule avoids churn on coordinates sitting exactly at the bound
    add_slack = max(tol, 1e-12)

    while True:
        corr = correlate_all_subsets(masks, residual, p) / n
        grad = 2.0 * np.abs(corr)
        candidates = np.nonzero(grad > lam + add_slack)[0]
        fresh = [int(b) for b in candidates if int(b) not in state.index]
        if not fresh and inner_converged:
            break
        if fresh:
            state.add(np.array(fresh), masks)
        if not state.bits:
            break

        cols = state.cols
        coef = state.coef
        k = len(state.bits)
        inner_converged = False
        while sweeps < max_sweeps:
            sweeps += 1
            max_delta = 0.0
            for j in range(k):
                cj = cols[:, j]
                rho = coef[j] + float(cj @ residual) / n
                new = _soft_threshold(rho, lam / 2.0)
                delta = new - coef[j]
                if delta != 0.0:
                    residual -= delta * cj
                    coef[j] = new
                    ad = abs(delta)
                    if ad > max_delta:
                        max_delta = ad
            if check_objective:
                obj = float(residual @ residual) / n + lam * float(np.abs(coef).sum())
                assert obj <= prev_objective + 1e-10 * max(1.0, abs(prev_objective)), (
                    f"objective increased: {prev_objective} -> {obj}"
                )
                prev_objective = obj
            if max_delta < tol:
                inner_converged = True
                break
        if sweeps >= max_sweeps and not inner_converged:
            break

    objective = float(residual @ residual) / n + lam * float(np.abs(state.coef).sum())
    alpha = SparseFourierVector(p, list(zip(state.bits, state.coef)))
    converged = inner_converged and sweeps < max_sweeps
    if not state.bits:
        converged = True
    return LassoFit(alpha_hat=alpha, lam=lam, objective=objective, sweeps=sweeps, converged=converged)


def lasso_path_fit(
    sample: RegressionSample,
    lam: float,
    *,
    n_grid: int = 40,
    tol: float = 1e-8,
    max_sweeps: int = 1000,
) -> LassoFit:
    """Warm-started descent down a geometric penalty grid ending at ``lam``.

    A cold start at a tiny penalty on an underdetermined sample settles on
    whichever interpolant coordinate descent wanders into, and that is
    usually dense.  Tracking the solution from ``lasso_lambda_max`` downward
    keeps each restart inside the sparse solution's basin, so the final fit
    lands on the small-penalty limit of the regularization path instead.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if n_grid < 1:
        raise ValueError("n_grid must be >= 1")
    lam_max = lasso_lambda_max(sample)
    if lam >= lam_max or lam_max == 0.0:
        return lasso_fit(sample, lam, tol=tol, max_sweeps=max_sweeps)
    # geomspace cannot hit zero, so the grid bottoms out just above it and
    # the last step is replaced by the requested penalty itself
    floor = max(lam, 1e-12 * lam_max)
    grid = np.geomspace(lam_max, floor, n_grid)
    grid[-1] = lam
    warm = None
    fit = None
    for step in grid:
        fit = lasso_fit(sample, float(step), tol=tol, max_sweeps=max_sweeps, warm_start=warm)
        warm = fit.alpha_hat
    return fit


def kkt_residuals(sample: RegressionSample, fit: LassoFit) -> tuple[float, float]:
    """Max subgradient violations (active, inactive) of the fitted Lasso.

    Active coordinates must satisfy (2/n) chi_j^T (Y - chi alpha) = lambda
    sign(alpha_j); inactive ones |(2/n) chi_j^T (Y - chi alpha)| <= lambda.
    Checks every one of the 2^p coordinates.
    """
    alpha = fit.alpha_hat
    residual = sample.outcomes.copy()
    if alpha.nnz:
        residual = residual - character_matrix(sample.masks, alpha.support_bits) @ alpha.coefficients
    grad = 2.0 * correlate_all_subsets(sample.masks, residual, sample.p) / sample.n
    active_viol = 0.0
    for b, v in alpha.items():
        active_viol = max(active_viol, abs(grad[b] - fit.lam * math.copysign(1.0, v)))
    inactive = np.ones(1 << sample.p, dtype=bool)
    if alpha.nnz:
        inactive[alpha.support_bits] = False
    inactive_viol = float(np.maximum(np.abs(grad[inactive]) - fit.lam, 0.0).max(initial=0.0))
    return active_viol, inactive_viol


def lasso_cv(
    sample: RegressionSample,
    lambda_grid: Sequence[float],
    k_folds: int = 5,
    seed: int = 0,
    *,
    tol: float = 1e-8,
    max_sweeps: int = 1000,
) -> tuple[float, np.ndarray]:
    """K-fold cross-validation over a penalty grid.

    Returns the best lambda and the mean held-out squared errors aligned
    with the deduplicated grid in descending order.  Ties break toward the
    larger (sparser) lambda.  Fold assignment is a seeded shuffle,
    identical across calls with the same seed.
    """
    if not len(lambda_grid):
        raise ValueError("lambda grid is empty")
    if k_folds < 2:
        raise ValueError("k_folds must be >= 2")
    if sample.n < k_folds:
        raise ValueError(f"need at least {k_folds} observations for {k_folds}-fold CV")
    grid = sorted(set(float(l) for l in lambda_grid), reverse=True)
    rng = np.random.default_rng(seed)
    order = rng.permutation(sample.n)
    folds = np.array_split(order, k_folds)
    errors = np.zeros(len(grid))
    for fold in folds:
        hold = np.zeros(sample.n, dtype=bool)
        hold[fold] = True
        train = RegressionSample(sample.p, sample.masks[~hold], sample.outcomes[~hold])
        test_masks = sample.masks[hold]
        test_y = sample.outcomes[hold]
        warm = None
        for gi, lam in enumerate(grid):
            fit = lasso_fit(train, lam, tol=tol, max_sweeps=max_sweeps, warm_start=warm)
            warm = fit.alpha_hat
            pred = np.zeros(test_y.size)
            if fit.alpha_hat.nnz:
                pred = character_matrix(test_masks, fit.alpha_hat.support_bits) @ fit.alpha_hat.coefficients
            errors[gi] += float(np.sum((test_y - pred) ** 2))
    errors /= sample.n
    # grid is descending, so keeping the first index at the minimum prefers
    # the larger lambda on ties
    best_idx = 0
    for gi in range(len(grid)):
        if errors[gi] < errors[best_idx] - 1e-15:
            best_idx = gi
    return grid[best_idx], errors


def select_ridge_fit(
    sample: RegressionSample,
    lambda_for_selection: float,
    *,
    tol: float = 1e-8,
    max_sweeps: int = 1000,
) -> SelectRidgeFit:
    """Lasso support selection followed by a ridge refit with penalty 1/n.

    The gram matrix and residual variance feed the Gaussian prediction
    intervals.  An empty support yields the constant-zero model; intervals
    then carry the raw noise level.
    """
    lf = lasso_fit(sample, lambda_for_selection, tol=tol, max_sweeps=max_sweeps)
    support = tuple(int(b) for b in lf.alpha_hat.support_bits)
    n = sample.n
    y = sample.outcomes
    if not support:
        noise_var = float(y @ y) / max(1, n)
        return SelectRidgeFit(
            support=(), coeffs=np.zeros(0), gram=np.zeros((0, 0)),
            noise_var=noise_var, n=n, p=sample.p,
        )
    x = character_matrix(sample.masks, support)
    gram_n = x.T @ x                       # chi^T chi, scaled by n below
    a = gram_n + np.eye(len(support)) / n  # ridge penalty exactly 1/n
    try:
        coeffs = np.linalg.solve(a, x.T @ y)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("ridge system singular despite 1/n penalty") from exc
    resid = y - x @ coeffs
    noise_var = float(resid @ resid) / max(1, n - len(support))
    return SelectRidgeFit(
        support=support,
        coeffs=coeffs,
        gram=gram_n / n,
        noise_var=noise_var,
        n=n,
        p=sample.p,
    )


def sr_predict(fit: SelectRidgeFit, c: Combination) -> float:
    if c.p != fit.p:
        raise ValueError(f"combination has p={c.p}, fit has p={fit.p}")
    if not fit.support:
        return 0.0
    signs = character_matrix([c.mask], fit.support)[0]
    return float(signs @ fit.coeffs)


def _solve_gram(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Symmetric solve with a jitter fallback for near-singular grams."""
    try:
        sol = np.linalg.solve(gram, rhs)
        if np.all(np.isfinite(sol)):
            return sol
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * max(1.0, float(np.trace(gram)) / max(1, gram.shape[0]))
    try:
        sol = np.linalg.solve(gram + jitter * np.eye(gram.shape[0]), rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("gram matrix singular even after jitter") from exc
    if not np.all(np.isfinite(sol)):
        raise NumericalError("gram solve produced non-finite values")
    return sol


def sr_std_err(fit: SelectRidgeFit, c: Combination) -> float:
    """Standard error of the point prediction at one combination.

    sqrt(noise_var * chi_S^T K^-1 chi_S / n) on the support; with an empty
    support the design carries no information and the error is
    sqrt(noise_var / n).
    """
    if c.p != fit.p:
        raise ValueError(f"combination has p={c.p}, fit has p={fit.p}")
    if not fit.support:
        return math.sqrt(fit.noise_var / fit.n)
    chi = character_matrix([c.mask], fit.support)[0]
    quad = float(chi @ _solve_gram(fit.gram, chi))
    quad = max(quad, 0.0)
    return math.sqrt(fit.noise_var * quad / fit.n)


def sr_predict_interval(fit: SelectRidgeFit, c: Combination, level: float = 0.95) -> PredictionInterval:
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    return PredictionInterval(point=sr_predict(fit, c), std_err=sr_std_err(fit, c), level=level)


def column_mean_imbalance(sample: RegressionSample, subset_bits: Sequence[int] | None = None) -> float:
    """Max |mean of chi_S over the sample| across subsets.

    The interval theory wants every character column to sum to zero over
    the design; this reports how far a design is from that.  Checks the
    given subsets, or every nonempty subset when p is small enough for the
    full transform.
    """
    if subset_bits is None:
        sums = correlate_all_subsets(sample.masks, np.ones(sample.n), sample.p)
        return float(np.abs(sums[1:]).max(initial=0.0)) / sample.n
    if not len(subset_bits):
        return 0.0
    cols = character_matrix(sample.masks, subset_bits)
    return float(np.abs(cols.mean(axis=0)).max())
