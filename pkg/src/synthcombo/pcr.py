"""Vertical regression: transfer weights from donors to a target unit.

A target unit observes outcomes at its own combinations; each donor's
horizontal model predicts outcomes at those same combinations, giving a
|combinations| x |donors| panel.  Principal component regression of the
target's outcomes on that panel yields weights that transfer donor
predictions to combinations the target never ran:

    w_hat = sum_{l <= kappa} s_l^{-1} v_l (u_l . y)

with (u_l, s_l, v_l) the top singular triplets of the panel.  Truncation
does the denoising; singular values below a relative floor are dropped so
1/s_l cannot blow up.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

RELATIVE_RANK_FLOOR = 1e-10


@dataclass(frozen=True)
class DonorPanel:
    """Donor predictions evaluated at one target unit's combinations.

    Column u holds donor u's predicted outcomes; row order must match the
    order of the target's observed outcomes.
    """

    donors: tuple
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64))
        if m.ndim != 2:
            raise ValueError("panel matrix must be 2-d")
        if m.shape[1] != len(self.donors):
            raise ValueError(f"{len(self.donors)} donors but {m.shape[1]} columns")
        if len(set(self.donors)) != len(self.donors):
            raise ValueError("duplicate donor ids")
        if m.size and not np.all(np.isfinite(m)):
            raise ValueError("panel entries must be finite")
        object.__setattr__(self, "donors", tuple(self.donors))
        object.__setattr__(self, "matrix", m)

    @property
    def rows(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def cols(self) -> int:
        return int(self.matrix.shape[1])


@dataclass(frozen=True)
class TransferWeights:
    """PCR output: one weight per donor plus the spectrum actually used."""

    weights: np.ndarray
    rank: int
    singvals: np.ndarray          # the retained values, descending
    spectrum: np.ndarray          # every singular value, for diagnostics

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        s = np.asarray(self.singvals, dtype=np.float64)
        if self.rank != s.size:
            raise ValueError("rank must equal the number of retained singular values")
        if s.size and (s.min() <= 0.0 or np.any(np.diff(s) > 0)):
            raise ValueError("retained singular values must be positive and non-increasing")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "singvals", s)
        object.__setattr__(self, "spectrum", np.asarray(self.spectrum, dtype=np.float64))


def _effective_rank(s: np.ndarray, kappa: int) -> int:
    if s.size == 0 or s[0] <= 0.0:
        return 0
    positive = int(np.sum(s > RELATIVE_RANK_FLOOR * s[0]))
    return min(kappa, positive)


def pcr_fit(panel: DonorPanel, target_outcomes: np.ndarray, kappa: int) -> TransferWeights:
    """Truncated-SVD regression of the target's outcomes on the donor panel."""
    y = np.asarray(target_outcomes, dtype=np.float64)
    if y.ndim != 1 or y.size != panel.rows:
        raise ValueError(f"target outcomes must have length {panel.rows}")
    if not 1 <= kappa <= min(panel.rows, panel.cols):
        raise ValueError(f"kappa must lie in [1, {min(panel.rows, panel.cols)}]")
    u, s, vt = np.linalg.svd(panel.matrix, full_matrices=False)
    k = _effective_rank(s, kappa)
    if k == 0:
        raise ValueError("panel has numerical rank 0; no direction to regress on")
    w = vt[:k].T @ ((u[:, :k].T @ y) / s[:k])
    return TransferWeights(weights=w, rank=k, singvals=s[:k].copy(), spectrum=s)


def pcr_predict(donor_predictions: Sequence[float], w: TransferWeights) -> float:
    """Transfer the donors' predictions at one combination to the target."""
    v = np.asarray(donor_predictions, dtype=np.float64)
    if v.ndim != 1 or v.size != w.weights.size:
        raise ValueError(f"expected {w.weights.size} donor predictions, got {v.size}")
    return float(v @ w.weights)


def kappa_select(
    panel: DonorPanel,
    target_outcomes: np.ndarray,
    method: str = "cv",
    *,
    fixed: int | None = None,
    folds: int = 5,
    seed: int = 0,
) -> int:
    """Pick the PCR truncation level.

    cv: k-fold over panel rows, smallest held-out MSE (ties to the smaller
    rank).  elbow: position of the largest ratio between consecutive
    singular values.  fixed: caller-chosen value passed through ``fixed``.
    """
    if panel.rows == 0 or panel.cols == 0:
        raise ValueError("empty panel")
    if method == "fixed":
        if fixed is None:
            raise ValueError("method 'fixed' needs a fixed= value")
        if not 1 <= fixed <= min(panel.rows, panel.cols):
            raise ValueError(f"fixed kappa must lie in [1, {min(panel.rows, panel.cols)}]")
        return int(fixed)
    if method == "elbow":
        s = np.linalg.svd(panel.matrix, compute_uv=False)
        if s.size == 0 or s[0] <= 0.0:
            raise ValueError("panel has numerical rank 0")
        floor = RELATIVE_RANK_FLOOR * s[0]
        best_k, best_ratio = 1, -np.inf
        for l in range(s.size - 1):
            ratio = np.inf if s[l + 1] <= floor else s[l] / s[l + 1]
            if ratio > best_ratio:
                best_k, best_ratio = l + 1, ratio
            if ratio == np.inf:
                break          # later ratios are 0/0 noise past the rank
        return best_k
    if method != "cv":
        raise ValueError(f"unknown kappa selection method: {method!r}")

    y = np.asarray(target_outcomes, dtype=np.float64)
    if y.size != panel.rows:
        raise ValueError(f"target outcomes must have length {panel.rows}")
    if folds < 2:
        raise ValueError("cv needs at least 2 folds")
    if panel.rows < folds:
        raise ValueError(f"cv with {folds} folds needs at least {folds} rows")
    order = np.random.default_rng(seed).permutation(panel.rows)
    parts = np.array_split(order, folds)
    min_train = min(panel.rows - part.size for part in parts)
    kmax = min(min_train, panel.cols)
    errors = np.zeros(kmax)
    for part in parts:
        hold = np.zeros(panel.rows, dtype=bool)
        hold[part] = True
        train = DonorPanel(panel.donors, panel.matrix[~hold])
        test_m = panel.matrix[hold]
        test_y = y[hold]
        for k in range(1, kmax + 1):
            w = pcr_fit(train, y[~hold], k)
            pred = test_m @ w.weights
            errors[k - 1] += float(np.sum((test_y - pred) ** 2))
    best = int(np.argmin(errors)) + 1    # argmin takes the first, so ties go small
    return best


@dataclass(frozen=True)
class SpectrumReport:
    """Diagnostics for the balanced-spectrum sanity check."""

    singvals: np.ndarray
    ratios: np.ndarray            # s_k / s_1 for each k
    mean_square: float            # ||panel||_F^2 / (rows * cols)
    energy: np.ndarray            # cumulative share of sum s_l^2 per kappa

    def as_dict(self) -> dict:
        return {
            "singvals": [float(v) for v in self.singvals],
            "ratios": [float(v) for v in self.ratios],
            "mean_square": float(self.mean_square),
            "energy": [float(v) for v in self.energy],
        }


def diagnostics(panel: DonorPanel) -> SpectrumReport:
    if panel.rows == 0 or panel.cols == 0:
        raise ValueError("empty panel")
    s = np.linalg.svd(panel.matrix, compute_uv=False)
    total = float(np.sum(s**2))
    ratios = s / s[0] if s[0] > 0 else np.zeros_like(s)
    energy = np.cumsum(s**2) / total if total > 0 else np.zeros_like(s)
    return SpectrumReport(
        singvals=s,
        ratios=ratios,
        mean_square=total / (panel.rows * panel.cols),
        energy=energy,
    )
