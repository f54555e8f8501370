"""End-to-end two-step estimator for unit-by-combination outcome panels.

Pipeline: pick donor units whose own data cross-validates well, fit each
donor horizontally (sparse Fourier regression or a tree), then transfer
donor predictions to every remaining unit by principal component
regression on the donor panel at that unit's observed combinations.
Point predictions and, for the select+ridge horizontal, Gaussian
intervals follow for any (unit, combination) pair.

The module also houses ``identification_oracle``, an exact-arithmetic
feasibility checker for small noiseless instances: it reports whether a
query is reconstructible from the observation pattern alone and, if so,
the reconstructed value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from synthcombo._rng import subseed, substream
from synthcombo.cart import CartModel, cart_fit, cart_predict
from synthcombo.hypercube import Combination, SparseFourierVector, character_matrix
from synthcombo.pcr import DonorPanel, TransferWeights, kappa_select, pcr_fit
from synthcombo.sparse_regress import (
    LassoFit,
    PredictionInterval,
    RegressionSample,
    SelectRidgeFit,
    lasso_fit,
    lasso_lambda_default,
    lasso_lambda_max,
    lasso_path_fit,
    select_ridge_fit,
    sr_predict,
    sr_std_err,
)

SCHEMA_VERSION = "1"

HORIZONTAL_METHODS = ("lasso", "select_ridge", "cart")
KAPPA_METHODS = ("cv", "elbow", "fixed")


class IntervalsUnavailableError(ValueError):
    """The fitted horizontal method carries no gram matrix, so no CIs."""


class RejectedUnitError(ValueError):
    """The unit failed the vertical CV screen; no predictions are offered."""


@dataclass(frozen=True)
class Panel:
    """Observed outcomes, one (masks, outcomes) pair per unit id 0..N-1.

    Units may have zero observations; duplicates are repeated measurements.
    """

    p: int
    unit_masks: tuple
    unit_outcomes: tuple

    def __post_init__(self) -> None:
        if len(self.unit_masks) != len(self.unit_outcomes):
            raise ValueError("masks and outcomes must pair up per unit")
        if not len(self.unit_masks):
            raise ValueError("panel needs at least one unit")
        masks_t, outs_t = [], []
        for u, (m, y) in enumerate(zip(self.unit_masks, self.unit_outcomes)):
            m = np.ascontiguousarray(np.asarray(m, dtype=np.int64)).reshape(-1)
            y = np.ascontiguousarray(np.asarray(y, dtype=np.float64)).reshape(-1)
            if m.size != y.size:
                raise ValueError(f"unit {u}: {m.size} masks vs {y.size} outcomes")
            if m.size and (m.min() < 0 or m.max() >= (1 << self.p)):
                raise ValueError(f"unit {u}: combination mask outside [0, 2^{self.p})")
            if y.size and not np.all(np.isfinite(y)):
                raise ValueError(f"unit {u}: non-finite outcome")
            masks_t.append(m)
            outs_t.append(y)
        object.__setattr__(self, "unit_masks", tuple(masks_t))
        object.__setattr__(self, "unit_outcomes", tuple(outs_t))

    @property
    def n_units(self) -> int:
        return len(self.unit_masks)

    def n_obs(self, unit: int) -> int:
        return int(self.unit_masks[unit].size)

    def sample(self, unit: int) -> RegressionSample:
        if self.n_obs(unit) == 0:
            raise ValueError(f"unit {unit} has no observations")
        return RegressionSample(self.p, self.unit_masks[unit], self.unit_outcomes[unit])

    @classmethod
    def from_observations(cls, p: int, per_unit: Sequence[Sequence[tuple[Combination, float]]]) -> "Panel":
        masks, outs = [], []
        for obs in per_unit:
            masks.append(np.array([c.mask for c, _ in obs], dtype=np.int64))
            outs.append(np.array([y for _, y in obs], dtype=np.float64))
        return cls(p, tuple(masks), tuple(outs))


@dataclass(frozen=True)
class SynthComboConfig:
    """Everything the fit needs besides the panel itself."""

    horizontal: str = "lasso"
    cv_folds: int = 5
    min_obs: int | None = None            # default: 2 * cv_folds
    donor_threshold: float | None = None  # None: largest log-gap rule
    donor_ids: tuple[int, ...] | None = None
    lambda_rule: str = "pilot"            # pilot | fixed
    lambda_fixed: float | None = None
    lambda_c: float = 4.0
    cart_leaves: int = 16
    kappa_method: str = "cv"
    kappa_fixed: int | None = None
    vertical_threshold: float | None = None  # None: 4 x median donor CV error
    seed: int = 0

    def __post_init__(self) -> None:
        if self.horizontal not in HORIZONTAL_METHODS:
            raise ValueError(f"horizontal must be one of {HORIZONTAL_METHODS}")
        if self.kappa_method not in KAPPA_METHODS:
            raise ValueError(f"kappa_method must be one of {KAPPA_METHODS}")
        if self.kappa_method == "fixed" and self.kappa_fixed is None:
            raise ValueError("kappa_method 'fixed' requires kappa_fixed")
        if self.lambda_rule not in ("pilot", "fixed", "path"):
            raise ValueError("lambda_rule must be 'pilot', 'fixed', or 'path'")
        if self.lambda_rule in ("fixed", "path") and self.lambda_fixed is None:
            raise ValueError(f"lambda_rule {self.lambda_rule!r} requires lambda_fixed")
        if self.lambda_rule == "path" and self.horizontal != "lasso":
            raise ValueError("lambda_rule 'path' only makes sense with horizontal 'lasso'")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.donor_threshold is not None and not self.donor_threshold > 0:
            raise ValueError("donor_threshold must be > 0")
        if self.vertical_threshold is not None and not self.vertical_threshold > 0:
            raise ValueError("vertical_threshold must be > 0")

    @property
    def effective_min_obs(self) -> int:
        return self.min_obs if self.min_obs is not None else 2 * self.cv_folds


@dataclass(frozen=True)
class DonorModel:
    """One donor's fitted horizontal model, whatever its flavor."""

    method: str
    lasso: LassoFit | None = None
    ridge: SelectRidgeFit | None = None
    cart: CartModel | None = None
    cv_error: float = float("nan")

    def predict(self, masks) -> np.ndarray:
        masks = np.atleast_1d(np.asarray(masks, dtype=np.int64))
        if self.method == "lasso":
            a = self.lasso.alpha_hat
            if a.nnz == 0:
                return np.zeros(masks.size)
            return character_matrix(masks, a.support_bits) @ a.coefficients
        if self.method == "select_ridge":
            if not self.ridge.support:
                return np.zeros(masks.size)
            return character_matrix(masks, self.ridge.support) @ self.ridge.coeffs
        return cart_predict(self.cart, masks)

    def std_err(self, p: int, mask: int) -> float:
        if self.method != "select_ridge":
            raise IntervalsUnavailableError(
                f"horizontal method {self.method!r} has no interval machinery; "
                "fit with horizontal='select_ridge' for CIs"
            )
        return sr_std_err(self.ridge, Combination(p, mask))


@dataclass(frozen=True)
class UnitTransfer:
    """PCR output for one non-donor: weights plus the panel row context."""

    weights: TransferWeights
    row_masks: np.ndarray
    cv_error: float


@dataclass(frozen=True)
class FittedSynthCombo:
    p: int
    n_units: int
    config: SynthComboConfig
    donor_ids: tuple[int, ...]
    donor_models: dict
    transfers: dict
    rejected_units: tuple[int, ...]
    unit_cv_error: dict

    def __post_init__(self) -> None:
        donors = set(self.donor_ids)
        moved = set(self.transfers) | set(self.rejected_units)
        if donors & moved:
            raise ValueError("a donor cannot also be transferred or rejected")
        everyone = donors | moved
        if everyone != set(range(self.n_units)):
            raise ValueError("donors, transfers, and rejections must cover all units")
        if set(self.donor_models) != donors:
            raise ValueError("every donor needs a model, and only donors have one")

    def is_rejected(self, unit: int) -> bool:
        return unit in self.rejected_units


def _refit_sigma(sample: RegressionSample, support_bits) -> float:
    """Residual scale from ordinary least squares on a given support.

    OLS removes the Lasso's shrinkage bias, so weak-but-real coordinates
    left out of the support show up in the residual where they belong.
    """
    y = sample.outcomes
    k = len(support_bits)
    if 0 < k < sample.n:
        x = character_matrix(sample.masks, support_bits)
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
        resid = y - x @ coef
        dof = max(1, sample.n - k)
    else:
        resid = y
        dof = sample.n
    return math.sqrt(float(resid @ resid) / dof)


def _pilot_lambda(sample: RegressionSample, c: float, max_rounds: int = 8) -> float:
    """Iterated pilot penalty: fixed point of lambda -> c sigma(lambda) sqrt(p/n).

    Start from the crude scale sd(Y), fit, re-estimate sigma from an OLS
    refit on the selected support, and repeat until the penalty stabilizes
    (warm-starting each round).  Noiseless data walks down to a floor set
    relative to the all-zero penalty, so the coordinate descent stays
    identified; noisy data settles near c sigma sqrt(p/n).
    """
    y = sample.outcomes
    sigma = float(np.std(y))
    if sigma == 0.0:
        return 1e-9
    # wider-than-tall designs keep a larger floor, the usual path convention
    ratio = 1e-2 if (1 << sample.p) >= sample.n else 1e-4
    floor = max(1e-9, ratio * lasso_lambda_max(sample))
    lam = max(lasso_lambda_default(sample.n, sample.p, sigma, c), floor)
    warm = None
    for _ in range(max_rounds):
        fitted = lasso_fit(sample, lam, warm_start=warm)
        warm = fitted.alpha_hat
        sigma = _refit_sigma(sample, fitted.alpha_hat.support_bits)
        new_lam = max(lasso_lambda_default(sample.n, sample.p, sigma, c), floor)
        if abs(new_lam - lam) <= 1e-3 * lam:
            return new_lam
        lam = new_lam
    return lam


def _choose_lambda(sample: RegressionSample, config: SynthComboConfig) -> float:
    if config.lambda_rule in ("fixed", "path"):
        return float(config.lambda_fixed)
    return _pilot_lambda(sample, config.lambda_c)


def _fit_horizontal(sample: RegressionSample, config: SynthComboConfig, seed: int) -> DonorModel:
    if config.horizontal == "cart":
        model = cart_fit(sample, config.cart_leaves, seed=seed)
        return DonorModel(method="cart", cart=model)
    lam = _choose_lambda(sample, config)
    if config.horizontal == "lasso":
        if config.lambda_rule == "path":
            return DonorModel(method="lasso", lasso=lasso_path_fit(sample, lam))
        return DonorModel(method="lasso", lasso=lasso_fit(sample, lam))
    return DonorModel(method="select_ridge", ridge=select_ridge_fit(sample, lam))


def _horizontal_cv_error(sample: RegressionSample, config: SynthComboConfig, seed: int) -> float:
    """K-fold held-out MSE of the configured horizontal method on one unit."""
    k = config.cv_folds
    order = substream(seed, "fold-shuffle").permutation(sample.n)
    parts = np.array_split(order, k)
    total = 0.0
    for fold_i, part in enumerate(parts):
        hold = np.zeros(sample.n, dtype=bool)
        hold[part] = True
        train = RegressionSample(sample.p, sample.masks[~hold], sample.outcomes[~hold])
        model = _fit_horizontal(train, config, subseed(seed, "fold", fold_i))
        pred = model.predict(sample.masks[hold])
        total += float(np.sum((sample.outcomes[hold] - pred) ** 2))
    return total / sample.n


def _auto_threshold(errors: dict) -> float:
    """Split unit CV errors at the largest log-scale gap.

    With no gap bigger than log(4) the units look homogeneous and everyone
    passes.  Invented plumbing: the threshold is described as given, not
    derived, in the source method.
    """
    vals = np.sort(np.array([e for e in errors.values() if np.isfinite(e)]))
    if vals.size == 0:
        return float("inf")
    if vals.size == 1:
        return float(vals[0])
    logs = np.log(np.maximum(vals, 1e-300))
    gaps = np.diff(logs)
    i = int(np.argmax(gaps))
    if gaps[i] < math.log(4.0):
        return float(vals[-1])
    return float(math.exp((logs[i] + logs[i + 1]) / 2.0))


def donor_select(
    panel: Panel,
    config: SynthComboConfig | None = None,
    *,
    error_threshold: float | None = None,
    seed: int | None = None,
) -> tuple[tuple[int, ...], dict]:
    """Units whose own-data CV error clears the donor threshold.

    Units with fewer than ``min_obs`` observations are out regardless.
    Returns (donor ids, per-candidate CV error).  Raises if nobody
    qualifies.
    """
    config = config or SynthComboConfig()
    seed = config.seed if seed is None else seed
    threshold = error_threshold if error_threshold is not None else config.donor_threshold
    min_obs = config.effective_min_obs
    if min_obs < config.cv_folds:
        raise ValueError("min_obs must be at least cv_folds")
    errors: dict = {}
    for u in range(panel.n_units):
        if panel.n_obs(u) < min_obs:
            continue
        errors[u] = _horizontal_cv_error(panel.sample(u), config, subseed(seed, "donor-cv", u))
    if threshold is None:
        threshold = _auto_threshold(errors)
    donors = tuple(u for u in sorted(errors) if errors[u] <= threshold)
    if not donors:
        raise ValueError(
            f"no unit qualifies as a donor (threshold {threshold:g}, "
            f"{len(errors)} candidates with >= {min_obs} observations)"
        )
    return donors, errors


def _vertical_cv_error(
    dpanel: DonorPanel, y: np.ndarray, kappa: int, folds: int, seed: int
) -> float:
    """Held-out MSE of the PCR transfer at the chosen truncation level."""
    rows = dpanel.rows
    order = substream(seed, "vert-shuffle").permutation(rows)
    parts = np.array_split(order, folds)
    total = 0.0
    for part in parts:
        hold = np.zeros(rows, dtype=bool)
        hold[part] = True
        train = DonorPanel(dpanel.donors, dpanel.matrix[~hold])
        k = min(kappa, int(np.sum(~hold)), dpanel.cols)
        w = pcr_fit(train, y[~hold], k)
        pred = dpanel.matrix[hold] @ w.weights
        total += float(np.sum((y[hold] - pred) ** 2))
    return total / rows


def fit(panel: Panel, config: SynthComboConfig | None = None) -> FittedSynthCombo:
    """Two-phase fit: all donors horizontally, then every other unit by PCR.

    Non-donors whose PCR transfer cross-validates poorly (above the
    vertical threshold) land in ``rejected_units`` and get no predictions.
    """
    config = config or SynthComboConfig()
    if config.donor_ids is not None:
        donors = tuple(sorted(set(config.donor_ids)))
        if not donors:
            raise ValueError("explicit donor set is empty")
        for u in donors:
            if not 0 <= u < panel.n_units:
                raise ValueError(f"donor id {u} out of range")
            if panel.n_obs(u) == 0:
                raise ValueError(f"donor {u} has no observations")
        errors = {}
        for u in donors:
            if panel.n_obs(u) >= config.cv_folds:
                errors[u] = _horizontal_cv_error(
                    panel.sample(u), config, subseed(config.seed, "donor-cv", u)
                )
            else:
                errors[u] = float("nan")
    else:
        donors, errors = donor_select(panel, config)

    donor_models = {}
    for u in donors:
        model = _fit_horizontal(panel.sample(u), config, subseed(config.seed, "horizontal", u))
        check = model.predict(panel.unit_masks[u])
        if not np.all(np.isfinite(check)):
            raise ValueError(f"donor {u}: non-finite horizontal predictions")
        donor_models[u] = replace(model, cv_error=errors.get(u, float("nan")))

    if config.vertical_threshold is not None:
        vertical_threshold = config.vertical_threshold
    else:
        donor_errs = [e for e in errors.values() if np.isfinite(e)]
        vertical_threshold = 4.0 * float(np.median(donor_errs)) if donor_errs else float("nan")

    transfers: dict = {}
    rejected: list[int] = []
    unit_cv_error = dict(errors)
    for n in range(panel.n_units):
        if n in donor_models:
            continue
        masks_n = panel.unit_masks[n]
        y_n = panel.unit_outcomes[n]
        if masks_n.size == 0:
            rejected.append(n)
            continue
        matrix = np.column_stack([donor_models[u].predict(masks_n) for u in donors])
        if not np.all(np.isfinite(matrix)):
            raise ValueError(f"unit {n}: non-finite donor predictions in panel")
        dpanel = DonorPanel(donors, matrix)
        kappa = _pick_kappa(dpanel, y_n, config, subseed(config.seed, "kappa", n))
        weights = pcr_fit(dpanel, y_n, kappa)
        if masks_n.size >= config.cv_folds:
            cv_err = _vertical_cv_error(
                dpanel, y_n, kappa, config.cv_folds, subseed(config.seed, "vertical-cv", n)
            )
        else:
            cv_err = float("nan")
        unit_cv_error[n] = cv_err
        if np.isfinite(vertical_threshold) and np.isfinite(cv_err) and cv_err > vertical_threshold:
            rejected.append(n)
            continue
        transfers[n] = UnitTransfer(weights=weights, row_masks=masks_n.copy(), cv_error=cv_err)

    return FittedSynthCombo(
        p=panel.p,
        n_units=panel.n_units,
        config=config,
        donor_ids=donors,
        donor_models=donor_models,
        transfers=transfers,
        rejected_units=tuple(rejected),
        unit_cv_error=unit_cv_error,
    )


def _pick_kappa(dpanel: DonorPanel, y: np.ndarray, config: SynthComboConfig, seed: int) -> int:
    cap = min(dpanel.rows, dpanel.cols)
    if config.kappa_method == "fixed":
        return min(int(config.kappa_fixed), cap)
    if config.kappa_method == "cv" and dpanel.rows >= config.cv_folds:
        return kappa_select(dpanel, y, "cv", folds=config.cv_folds, seed=seed)
    # too few rows for folds: fall back to the spectrum elbow
    return kappa_select(dpanel, y, "elbow")


def predict(model: FittedSynthCombo, unit: int, combination: Combination) -> float:
    """Point prediction for any kept unit at any combination."""
    if combination.p != model.p:
        raise ValueError(f"combination has p={combination.p}, model has p={model.p}")
    if not 0 <= unit < model.n_units:
        raise ValueError(f"unknown unit {unit}")
    if model.is_rejected(unit):
        raise RejectedUnitError(
            f"unit {unit} was rejected by the vertical CV screen; no estimate offered"
        )
    if unit in model.donor_models:
        return float(model.donor_models[unit].predict([combination.mask])[0])
    transfer = model.transfers[unit]
    donor_preds = np.array(
        [float(model.donor_models[u].predict([combination.mask])[0]) for u in model.donor_ids]
    )
    return float(donor_preds @ transfer.weights.weights)


def predict_interval(
    model: FittedSynthCombo, unit: int, combination: Combination, level: float = 0.95
) -> PredictionInterval:
    """Gaussian interval; requires the select+ridge horizontal.

    Non-donor variance composes donor standard errors through the transfer
    weights: se^2 = sum_u (w_u * se_u(pi))^2.
    """
    if model.config.horizontal != "select_ridge":
        raise IntervalsUnavailableError(
            f"horizontal method {model.config.horizontal!r} has no interval machinery; "
            "fit with horizontal='select_ridge' for CIs"
        )
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    point = predict(model, unit, combination)
    if unit in model.donor_models:
        se = model.donor_models[unit].std_err(model.p, combination.mask)
        return PredictionInterval(point=point, std_err=se, level=level)
    transfer = model.transfers[unit]
    acc = 0.0
    for w_u, u in zip(transfer.weights.weights, model.donor_ids):
        se_u = model.donor_models[u].std_err(model.p, combination.mask)
        acc += (w_u * se_u) ** 2
    return PredictionInterval(point=point, std_err=math.sqrt(acc), level=level)


# ---------------------------------------------------------------------------
# model persistence


def _sparse_to_list(v: SparseFourierVector) -> list:
    return [[int(b), float(c)] for b, c in v.items()]


def _sparse_from_list(p: int, entries) -> SparseFourierVector:
    return SparseFourierVector(p, [(int(b), float(c)) for b, c in entries])


def model_to_dict(model: FittedSynthCombo) -> dict:
    """JSON-ready document with everything prediction and CIs need."""
    cfg = model.config
    doc = {
        "schema_version": SCHEMA_VERSION,
        "p": model.p,
        "n_units": model.n_units,
        "config": {
            "horizontal": cfg.horizontal,
            "cv_folds": cfg.cv_folds,
            "min_obs": cfg.min_obs,
            "donor_threshold": cfg.donor_threshold,
            "donor_ids": list(cfg.donor_ids) if cfg.donor_ids is not None else None,
            "lambda_rule": cfg.lambda_rule,
            "lambda_fixed": cfg.lambda_fixed,
            "lambda_c": cfg.lambda_c,
            "cart_leaves": cfg.cart_leaves,
            "kappa_method": cfg.kappa_method,
            "kappa_fixed": cfg.kappa_fixed,
            "vertical_threshold": cfg.vertical_threshold,
            "seed": cfg.seed,
        },
        "donor_ids": list(model.donor_ids),
        "rejected_units": list(model.rejected_units),
        "unit_cv_error": {str(u): float(e) for u, e in model.unit_cv_error.items()},
        "donors": {},
        "transfers": {},
    }
    for u, dm in model.donor_models.items():
        entry: dict = {"method": dm.method, "cv_error": float(dm.cv_error)}
        if dm.method == "lasso":
            entry["alpha"] = _sparse_to_list(dm.lasso.alpha_hat)
            entry["lambda"] = dm.lasso.lam
        elif dm.method == "select_ridge":
            entry["support"] = [int(b) for b in dm.ridge.support]
            entry["coeffs"] = [float(c) for c in dm.ridge.coeffs]
            entry["gram"] = [[float(x) for x in row] for row in dm.ridge.gram]
            entry["noise_var"] = float(dm.ridge.noise_var)
            entry["n"] = dm.ridge.n
        else:
            entry["selected"] = sorted(dm.cart.selected)
            entry["coeffs"] = _sparse_to_list(dm.cart.coeffs)
        doc["donors"][str(u)] = entry
    for n, tr in model.transfers.items():
        doc["transfers"][str(n)] = {
            "weights": [float(w) for w in tr.weights.weights],
            "rank": tr.weights.rank,
            "singvals": [float(s) for s in tr.weights.singvals],
            "spectrum": [float(s) for s in tr.weights.spectrum],
            "row_masks": [int(m) for m in tr.row_masks],
            "cv_error": float(tr.cv_error),
        }
    return doc


def model_from_dict(doc: dict) -> FittedSynthCombo:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported model schema {doc.get('schema_version')!r}; expected {SCHEMA_VERSION!r}"
        )
    p = int(doc["p"])
    c = doc["config"]
    config = SynthComboConfig(
        horizontal=c["horizontal"],
        cv_folds=int(c["cv_folds"]),
        min_obs=c["min_obs"],
        donor_threshold=c["donor_threshold"],
        donor_ids=tuple(c["donor_ids"]) if c["donor_ids"] is not None else None,
        lambda_rule=c["lambda_rule"],
        lambda_fixed=c["lambda_fixed"],
        lambda_c=float(c["lambda_c"]),
        cart_leaves=int(c["cart_leaves"]),
        kappa_method=c["kappa_method"],
        kappa_fixed=c["kappa_fixed"],
        vertical_threshold=c["vertical_threshold"],
        seed=int(c["seed"]),
    )
    donor_models = {}
    for key, entry in doc["donors"].items():
        u = int(key)
        method = entry["method"]
        if method == "lasso":
            alpha = _sparse_from_list(p, entry["alpha"])
            lf = LassoFit(alpha_hat=alpha, lam=float(entry["lambda"]), objective=float("nan"),
                          sweeps=0, converged=True)
            donor_models[u] = DonorModel(method="lasso", lasso=lf, cv_error=entry["cv_error"])
        elif method == "select_ridge":
            rf = SelectRidgeFit(
                support=tuple(int(b) for b in entry["support"]),
                coeffs=np.array(entry["coeffs"], dtype=np.float64),
                gram=np.array(entry["gram"], dtype=np.float64).reshape(
                    len(entry["support"]), len(entry["support"])
                ),
                noise_var=float(entry["noise_var"]),
                n=int(entry["n"]),
                p=p,
            )
            donor_models[u] = DonorModel(method="select_ridge", ridge=rf, cv_error=entry["cv_error"])
        else:
            from synthcombo.cart import CartTree

            cm = CartModel(
                p=p,
                selected=frozenset(int(j) for j in entry["selected"]),
                coeffs=_sparse_from_list(p, entry["coeffs"]),
                split=(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)),
                tree=CartTree(p=p, max_leaves=1, nodes=[]),
            )
            donor_models[u] = DonorModel(method="cart", cart=cm, cv_error=entry["cv_error"])
    transfers = {}
    for key, entry in doc["transfers"].items():
        weights = TransferWeights(
            weights=np.array(entry["weights"], dtype=np.float64),
            rank=int(entry["rank"]),
            singvals=np.array(entry["singvals"], dtype=np.float64),
            spectrum=np.array(entry["spectrum"], dtype=np.float64),
        )
        transfers[int(key)] = UnitTransfer(
            weights=weights,
            row_masks=np.array(entry["row_masks"], dtype=np.int64),
            cv_error=float(entry["cv_error"]),
        )
    return FittedSynthCombo(
        p=p,
        n_units=int(doc["n_units"]),
        config=config,
        donor_ids=tuple(int(u) for u in doc["donor_ids"]),
        donor_models=donor_models,
        transfers=transfers,
        rejected_units=tuple(int(u) for u in doc["rejected_units"]),
        unit_cv_error={int(k): float(v) for k, v in doc["unit_cv_error"].items()},
    )


# ---------------------------------------------------------------------------
# exact feasibility oracle for small noiseless instances


def _restricted_rows(support_bits: Sequence[int], masks: np.ndarray) -> np.ndarray:
    """Rows = char vectors restricted to one unit's support coordinates."""
    if masks.size == 0:
        return np.zeros((0, len(support_bits)))
    return character_matrix(masks, support_bits)


def _in_span(columns: np.ndarray, target: np.ndarray, tol: float = 1e-8):
    """Least-squares membership test; returns (flag, coefficients)."""
    if target.size == 0:
        return True, np.zeros(columns.shape[1] if columns.ndim == 2 else 0)
    if columns.size == 0:
        return bool(np.linalg.norm(target) <= tol), np.zeros(0)
    coef, *_ = np.linalg.lstsq(columns, target, rcond=None)
    resid = float(np.linalg.norm(columns @ coef - target))
    return resid <= tol * max(1.0, float(np.linalg.norm(target))), coef


def identification_oracle(
    alphas: Sequence[SparseFourierVector],
    observed: Sequence[Sequence[int]],
    query: tuple[int, Combination],
) -> tuple[bool, float | None]:
    """Is E[Y_unit at combination] pinned down by the observation pattern?

    Works in exact arithmetic on the noiseless values implied by
    ``alphas``.  Two routes:

    (a) the queried unit's own observations span its restricted
        characteristic at the query, in which case the value is the
        matching linear combination of its observed outcomes;
    (b) vertical transfer: donor units (those whose own observations have
        full column rank over their support coordinates, hence are
        horizontally identified everywhere) span the queried unit's
        coefficient vector, and the query column lies in the row space of
        the noiseless donor panel at the unit's observed combinations, so
        the transfer weights' ambiguity cannot leak into the value.

    Route (b) evaluates the double sum over donors and their observed
    entries rather than reading the answer off ``alphas[unit]``.
    """
    n_units = len(alphas)
    if n_units != len(observed):
        raise ValueError("need one observation set per unit")
    if n_units > 20:
        raise ValueError("oracle is for small instances (<= 20 units)")
    unit, combo = query
    p = combo.p
    if p > 10:
        raise ValueError("oracle is for small instances (p <= 10)")
    if any(a.p != p for a in alphas):
        raise ValueError("all coefficient vectors must share the query's p")
    obs_masks = [np.asarray(sorted(set(int(m) for m in o)), dtype=np.int64) for o in observed]

    def noiseless(u: int, masks: np.ndarray) -> np.ndarray:
        a = alphas[u]
        if a.nnz == 0:
            return np.zeros(masks.size)
        return character_matrix(masks, a.support_bits) @ a.coefficients

    # route (a): the unit's own horizontal span covers the query.
    support_n = [int(b) for b in alphas[unit].support_bits]
    if not support_n:
        return True, 0.0
    rows_n = _restricted_rows(support_n, obs_masks[unit])
    target = _restricted_rows(support_n, np.array([combo.mask]))[0]
    ok, beta = _in_span(rows_n.T, target)
    if ok:
        return True, float(beta @ noiseless(unit, obs_masks[unit]))

    # route (b): transfer through horizontally-identified donors.
    donors = []
    for u in range(n_units):
        if u == unit:
            continue
        sup = [int(b) for b in alphas[u].support_bits]
        if not sup:
            donors.append(u)
            continue
        rows = _restricted_rows(sup, obs_masks[u])
        if rows.shape[0] >= len(sup) and np.linalg.matrix_rank(rows, tol=1e-10) == len(sup):
            donors.append(u)
    if not donors:
        return False, None

    all_bits = sorted({int(b) for u in donors + [unit] for b in alphas[u].support_bits})
    if all_bits:
        stack = np.zeros((len(all_bits), len(donors)))
        targ = np.zeros(len(all_bits))
        pos = {b: i for i, b in enumerate(all_bits)}
        for col, u in enumerate(donors):
            for b, v in alphas[u].items():
                stack[pos[int(b)], col] = v
        for b, v in alphas[unit].items():
            targ[pos[int(b)]] = v
        ok, _ = _in_span(stack, targ)
        if not ok:
            return False, None

    if obs_masks[unit].size == 0:
        return False, None

    def donor_value_from_entries(u: int, mask: int) -> float:
        # the donor's own beta-weighted sum of its observed outcomes
        sup = [int(b) for b in alphas[u].support_bits]
        if not sup:
            return 0.0
        rows = _restricted_rows(sup, obs_masks[u])
        target_u = _restricted_rows(sup, np.array([mask]))[0]
        beta, *_ = np.linalg.lstsq(rows.T, target_u, rcond=None)
        return float(beta @ noiseless(u, obs_masks[u]))

    m = np.column_stack(
        [[donor_value_from_entries(u, int(mk)) for mk in obs_masks[unit]] for u in donors]
    ).reshape(obs_masks[unit].size, len(donors))
    y = noiseless(unit, obs_masks[unit])
    q = np.array([donor_value_from_entries(u, combo.mask) for u in donors])
    w, *_ = np.linalg.lstsq(m, y, rcond=None)
    if float(np.linalg.norm(m @ w - y)) > 1e-8 * max(1.0, float(np.linalg.norm(y))):
        return False, None
    _, s, vt = np.linalg.svd(m, full_matrices=False)
    rank = int(np.sum(s > 1e-10 * s[0])) if s.size and s[0] > 0 else 0
    if rank == 0:
        return False, None
    q_proj = vt[:rank].T @ (vt[:rank] @ q)
    if float(np.linalg.norm(q - q_proj)) > 1e-8 * max(1.0, float(np.linalg.norm(q))):
        return False, None
    return True, float(q @ w)
