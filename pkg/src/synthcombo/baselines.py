"""Comparator estimators and shared scoring: a per-unit sparse fit with
no cross-unit transfer, and low-rank matrix completion over the observed
cells (soft shrinkage or hard rank truncation)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._rng import substream
from .estimator import FittedSynthCombo, Panel, RejectedUnitError, _pilot_lambda
from .hypercube import character_matrix
from .simdata import GroundTruth, expected_values
from .sparse_regress import LassoFit, NumericalError, RegressionSample, lasso_fit

EVAL_FULL_CUBE_MAX_P = 14
EVAL_SAMPLE_SIZE = 4096

SOFT_IMPUTE_TOL = 1e-4
SOFT_IMPUTE_MAX_ITER = 500


@dataclass(frozen=True)
class PerUnitLasso:
    """Independent sparse fit per unit; no strength is borrowed across units."""

    p: int
    fits: tuple[LassoFit, ...]

    def predict_unit(self, unit: int, masks) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.int64)
        vec = self.fits[unit].alpha_hat
        if vec.nnz == 0:
            return np.zeros(masks.size)
        return character_matrix(masks, vec.support_bits) @ vec.coefficients


def perunit_lasso(
    panel: Panel, lambda_policy: float | Callable | None = None
) -> PerUnitLasso:
    """Fit every unit separately.

    lambda_policy: None picks the iterated pilot rule per unit, a float is
    used as-is everywhere, and a callable receives each unit's sample.
    """
    fits = []
    for u in range(panel.n_units):
        sample = panel.sample(u)
        if sample.n == 0:
            raise ValueError(f"unit {u} has no observations")
        if lambda_policy is None:
            lam = _pilot_lambda(sample, 4.0)
        elif callable(lambda_policy):
            lam = float(lambda_policy(sample))
        else:
            lam = float(lambda_policy)
        fits.append(lasso_fit(sample, lam))
    return PerUnitLasso(p=panel.p, fits=tuple(fits))


@dataclass(frozen=True)
class SynthComboPredictor:
    """Vectorized prediction adapter over a fitted two-stage model."""

    model: FittedSynthCombo

    def predict_unit(self, unit: int, masks) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.int64)
        model = self.model
        if model.is_rejected(unit):
            raise RejectedUnitError(f"unit {unit} was rejected at fit time")
        if unit in model.donor_models:
            return model.donor_models[unit].predict(masks)
        weights = model.transfers[unit].weights.weights
        columns = np.column_stack(
            [model.donor_models[u].predict(masks) for u in model.donor_ids]
        )
        return columns @ weights


@dataclass(frozen=True)
class CompletionProblem:
    """Dense completion instance over units x combination universe."""

    matrix: np.ndarray
    observed: np.ndarray
    universe: np.ndarray
    p: int
    lam: float = 0.0
    max_rank: int | None = None

    def __post_init__(self) -> None:
        if self.matrix.shape != self.observed.shape:
            raise ValueError("matrix and mask shapes differ")
        if not self.observed.any():
            raise ValueError("no observed entries")
        if self.lam < 0.0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.max_rank is not None:
            if self.max_rank < 1:
                raise ValueError(f"max_rank must be positive, got {self.max_rank}")
            if self.lam > 0.0:
                raise ValueError("choose soft shrinkage (lam) or hard rank, not both")
        if self.universe.size != self.matrix.shape[1]:
            raise ValueError("universe length must match matrix columns")

    @classmethod
    def from_panel(
        cls,
        panel: Panel,
        eval_combos: np.ndarray | None = None,
        *,
        lam: float = 0.0,
        max_rank: int | None = None,
    ) -> "CompletionProblem":
        """Universe = observed combos union evaluation combos; repeated
        observations of the same cell are averaged."""
        pieces = [m for m in panel.unit_masks if m.size]
        if eval_combos is not None:
            pieces.append(np.asarray(eval_combos, dtype=np.int64))
        universe = np.unique(np.concatenate(pieces))
        col = {int(m): j for j, m in enumerate(universe)}
        matrix = np.zeros((panel.n_units, universe.size))
        counts = np.zeros_like(matrix)
        for u in range(panel.n_units):
            for mask, y in zip(panel.unit_masks[u], panel.unit_outcomes[u]):
                j = col[int(mask)]
                matrix[u, j] += y
                counts[u, j] += 1.0
        observed = counts > 0
        matrix[observed] /= counts[observed]
        return cls(
            matrix=matrix,
            observed=observed,
            universe=universe,
            p=panel.p,
            lam=lam,
            max_rank=max_rank,
        )


@dataclass(frozen=True)
class CompletedPanel:
    """Completion output restricted to the problem's combination universe."""

    matrix: np.ndarray
    universe: np.ndarray
    p: int
    converged: bool
    n_iter: int

    def predict_unit(self, unit: int, masks) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.int64)
        pos = np.searchsorted(self.universe, masks)
        bad = (pos >= self.universe.size) | (self.universe[np.minimum(pos, self.universe.size - 1)] != masks)
        if bad.any():
            raise ValueError(
                f"combination {int(masks[bad][0])} is outside the completion universe"
            )
        return self.matrix[unit, pos]


def soft_impute(problem: CompletionProblem) -> CompletedPanel:
    """Iterative low-rank completion.

    Missing cells are refilled from the current estimate, then the SVD is
    either soft-thresholded by lam or truncated to max_rank. Stops when the
    relative Frobenius change drops below 1e-4; hitting the iteration cap
    returns the last iterate with converged=False.
    """
    observed = problem.observed
    target = problem.matrix
    z = np.zeros_like(target)
    prev_obj = math.inf
    converged = False
    n_iter = 0
    for n_iter in range(1, SOFT_IMPUTE_MAX_ITER + 1):
        filled = np.where(observed, target, z)
        u, s, vt = np.linalg.svd(filled, full_matrices=False)
        if problem.max_rank is not None:
            s_new = np.where(np.arange(s.size) < problem.max_rank, s, 0.0)
        else:
            s_new = np.maximum(s - problem.lam, 0.0)
        z_new = (u * s_new) @ vt
        resid = float(np.sum((target - z_new)[observed] ** 2))
        obj = 0.5 * resid + problem.lam * float(s_new.sum())
        if obj > prev_obj + 1e-8 * (1.0 + abs(prev_obj)):
            raise NumericalError(
                f"completion objective rose from {prev_obj} to {obj} at iteration {n_iter}"
            )
        prev_obj = obj
        delta = float(np.linalg.norm(z_new - z))
        scale = max(float(np.linalg.norm(z_new)), 1e-12)
        z = z_new
        if delta <= SOFT_IMPUTE_TOL * scale:
            converged = True
            break
    return CompletedPanel(
        matrix=z,
        universe=problem.universe,
        p=problem.p,
        converged=converged,
        n_iter=n_iter,
    )


@dataclass(frozen=True)
class MseReport:
    per_unit: tuple[float, ...]
    aggregate: float

    def as_dict(self) -> dict:
        return {"per_unit": list(self.per_unit), "aggregate": self.aggregate}


def evaluate_mse(
    predictor,
    truth: GroundTruth,
    combo_set: np.ndarray | None = None,
    *,
    seed: int = 0,
) -> MseReport:
    """Mean squared error against the noiseless truth.

    combo_set=None scores the full cube for p <= 14; beyond that each unit
    gets its own seeded uniform sample of 4096 combinations.
    """
    per_unit = []
    shared: np.ndarray | None
    if combo_set is not None:
        shared = np.asarray(combo_set, dtype=np.int64)
    elif truth.p <= EVAL_FULL_CUBE_MAX_P:
        shared = np.arange(1 << truth.p, dtype=np.int64)
    else:
        shared = None
    for u in range(truth.n_units):
        if shared is not None:
            masks = shared
        else:
            rng = substream(seed, "eval-combos", u)
            masks = np.sort(
                rng.choice(1 << truth.p, size=EVAL_SAMPLE_SIZE, replace=False)
            ).astype(np.int64)
        want = expected_values(truth, u)[masks]
        got = predictor.predict_unit(u, masks)
        per_unit.append(float(np.mean((got - want) ** 2)))
    return MseReport(per_unit=tuple(per_unit), aggregate=float(np.mean(per_unit)))
