"""Synthetic benchmark data: low-rank sparse coefficient matrices, noise
calibrated to a target signal-to-noise ratio, and three observation
patterns (value-confounded, shared design plan, plain uniform)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rng import subseed, substream
from .design import DesignPlan
from .estimator import Panel
from .hypercube import Combination, SparseFourierVector, wht_inverse

PATTERNS = ("confounded", "design", "uniform")

# confounded weights enumerate every combination's expected value
CONFOUNDED_MAX_P = 20


@dataclass(frozen=True)
class SimConfig:
    """Shape of one synthetic problem instance."""

    n_units: int
    p: int
    r: int
    snr: float = 1.0
    pattern: str = "confounded"
    base_nnz: int | None = None
    donor_count: int | None = None
    donor_obs: int | None = None
    nondonor_obs: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_units < 1:
            raise ValueError(f"n_units must be positive, got {self.n_units}")
        if self.p < 1:
            raise ValueError(f"p must be positive, got {self.p}")
        if not 1 <= self.r <= self.n_units:
            raise ValueError(f"r must be in [1, n_units], got {self.r}")
        if not self.snr > 0.0:
            raise ValueError(f"snr must be positive, got {self.snr}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        for name in ("base_nnz", "donor_count", "donor_obs", "nondonor_obs"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be positive when given")

    @property
    def effective_base_nnz(self) -> int:
        return self.base_nnz if self.base_nnz is not None else math.ceil(self.p**1.5)

    @property
    def sparsity(self) -> int:
        """Worst-case per-unit support size."""
        return self.r * self.effective_base_nnz

    @property
    def effective_donor_count(self) -> int:
        return self.donor_count if self.donor_count is not None else 2 * self.r

    @property
    def effective_donor_obs(self) -> int:
        return self.donor_obs if self.donor_obs is not None else math.ceil(2.0 * self.p**2.5)

    @property
    def effective_nondonor_obs(self) -> int:
        return self.nondonor_obs if self.nondonor_obs is not None else 2 * self.r**4


@dataclass(frozen=True)
class GroundTruth:
    """Per-unit coefficient vectors with the noise scale baked in.

    The first r units are the bases; the rest are their convex mixtures.
    per_unit_sigma overrides sigma unit by unit when set.
    """

    alphas: tuple[SparseFourierVector, ...]
    r: int
    s: int
    p: int
    sigma: float
    per_unit_sigma: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if len(self.alphas) < self.r:
            raise ValueError("fewer units than the claimed rank")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.per_unit_sigma is not None and len(self.per_unit_sigma) != len(self.alphas):
            raise ValueError("per_unit_sigma must have one entry per unit")
        union = sorted({b for vec in self.alphas for b in vec.support_bits})
        if not union:
            raise ValueError("all coefficient vectors are zero")
        index = {b: j for j, b in enumerate(union)}
        mat = np.zeros((len(self.alphas), len(union)))
        for i, vec in enumerate(self.alphas):
            for b, v in vec.items():
                mat[i, index[b]] = v
            if vec.nnz > self.s:
                raise ValueError(f"unit {i} has {vec.nnz} nonzeros, above s={self.s}")
        svals = np.linalg.svd(mat, compute_uv=False)
        rank = int(np.sum(svals > svals[0] * 1e-8))
        if rank != self.r:
            raise ValueError(f"coefficient matrix has rank {rank}, expected {self.r}")

    @property
    def n_units(self) -> int:
        return len(self.alphas)

    def unit_sigma(self, unit: int) -> float:
        if self.per_unit_sigma is not None:
            return self.per_unit_sigma[unit]
        return self.sigma


def signal_variance(vec: SparseFourierVector) -> float:
    """Variance of the unit's value over the uniform cube: sum of squared
    coefficients away from the constant term."""
    return float(sum(v * v for b, v in vec.items() if b != 0))


def gen_truth(config: SimConfig, *, snr_scope: str = "global") -> GroundTruth:
    """Draw r sparse bases with standard normal coefficients on disjoint
    supports, then fill the remaining units with Dirichlet(1) mixtures.

    snr_scope "global" sets one sigma from the mean signal variance;
    "per_unit" gives every unit its own sigma.
    """
    if snr_scope not in ("global", "per_unit"):
        raise ValueError(f"snr_scope must be global or per_unit, got {snr_scope!r}")
    nnz = config.effective_base_nnz
    cube = 1 << config.p
    if config.r * nnz > cube - 1:
        raise ValueError(
            f"need {config.r * nnz} distinct nonempty subsets but only {cube - 1} exist"
        )
    rng = substream(config.seed, "truth")
    support_pool = rng.choice(np.arange(1, cube), size=config.r * nnz, replace=False)
    bases = []
    for j in range(config.r):
        bits = support_pool[j * nnz : (j + 1) * nnz]
        coeffs = rng.normal(0.0, 1.0, size=nnz)
        bases.append(list(zip(bits.tolist(), coeffs.tolist())))
    alphas = [SparseFourierVector(config.p, entries) for entries in bases]
    mixing = rng.dirichlet(np.ones(config.r), size=config.n_units - config.r)
    for weights in mixing:
        entries: dict[int, float] = {}
        for w, base in zip(weights, bases):
            for bit, v in base:
                entries[bit] = entries.get(bit, 0.0) + w * v
        alphas.append(SparseFourierVector(config.p, list(entries.items())))
    variances = np.array([signal_variance(vec) for vec in alphas])
    if snr_scope == "global":
        sigma = math.sqrt(float(variances.mean()) / config.snr)
        per_unit = None
    else:
        sigma = math.sqrt(float(variances.mean()) / config.snr)
        per_unit = tuple(math.sqrt(v / config.snr) for v in variances)
    return GroundTruth(
        alphas=tuple(alphas),
        r=config.r,
        s=config.sparsity,
        p=config.p,
        sigma=sigma,
        per_unit_sigma=per_unit,
    )


def expected_values(truth: GroundTruth, unit: int) -> np.ndarray:
    """Noiseless value of one unit at every combination, indexed by mask."""
    if truth.p > CONFOUNDED_MAX_P:
        raise ValueError(f"cube enumeration refused for p={truth.p} > {CONFOUNDED_MAX_P}")
    dense = np.zeros(1 << truth.p)
    for bit, v in truth.alphas[unit].items():
        dense[bit] = v
    return wht_inverse(dense)


def observation_weights(truth: GroundTruth, unit: int) -> np.ndarray:
    """Probability of each combination being seen for this unit: its
    absolute expected value, normalized. Errors if everything is zero."""
    values = np.abs(expected_values(truth, unit))
    total = values.sum()
    if total == 0.0:
        raise ValueError(f"unit {unit} has identically zero outcomes")
    return values / total


def _gumbel_top_k(weights: np.ndarray, count: int, rng) -> np.ndarray:
    """Sequential weighted sampling without replacement via racing keys.

    Zero-weight cells get -inf keys and are unreachable; asking for more
    draws than there are positive weights is refused.
    """
    if count <= 0:
        return np.array([], dtype=np.int64)
    positive = int(np.count_nonzero(weights))
    if count > positive:
        raise ValueError(
            f"requested {count} draws but only {positive} cells have positive weight"
        )
    with np.errstate(divide="ignore"):
        keys = np.where(weights > 0.0, np.log(weights), -np.inf)
    keys = keys + rng.gumbel(0.0, 1.0, size=weights.size)
    picked = np.argpartition(-keys, count - 1)[:count]
    return np.sort(picked).astype(np.int64)


def confounded_sampler(
    truth: GroundTruth, unit: int, count: int, seed: int
) -> list[tuple[Combination, float]]:
    """Draw combinations biased toward large absolute outcomes, plus noise."""
    cube = 1 << truth.p
    if count > cube:
        raise ValueError(f"asked for {count} combinations, cube has {cube}")
    weights = observation_weights(truth, unit)
    rng = substream(seed, "confounded", unit)
    picked = _gumbel_top_k(weights, count, rng)
    values = expected_values(truth, unit)[picked]
    noise = rng.normal(0.0, truth.unit_sigma(unit), size=count)
    return [
        (Combination(truth.p, int(mask)), float(v + e))
        for mask, v, e in zip(picked, values, noise)
    ]


def _uniform_sampler(
    truth: GroundTruth, unit: int, count: int, seed: int
) -> list[tuple[Combination, float]]:
    cube = 1 << truth.p
    if count > cube:
        raise ValueError(f"asked for {count} combinations, cube has {cube}")
    rng = substream(seed, "uniform", unit)
    picked = np.sort(rng.choice(cube, size=count, replace=False)).astype(np.int64)
    values = expected_values(truth, unit)[picked]
    noise = rng.normal(0.0, truth.unit_sigma(unit), size=count)
    return [
        (Combination(truth.p, int(mask)), float(v + e))
        for mask, v, e in zip(picked, values, noise)
    ]


def heavy_unit_ids(
    truth: GroundTruth, seed: int = 0, donor_count: int | None = None
) -> tuple[int, ...]:
    """Which units the sampled patterns observe heavily, for a given seed.

    Pure function of (seed, population, count), so callers that need the
    designed donor set, the CLI in particular, can recover it without
    threading extra state through realize_panel.
    """
    n_heavy = donor_count if donor_count is not None else 2 * truth.r
    if n_heavy > truth.n_units:
        raise ValueError(
            f"need {n_heavy} heavily observed units, population has {truth.n_units}"
        )
    rng = substream(seed, "heavy-units")
    return tuple(sorted(rng.choice(truth.n_units, size=n_heavy, replace=False).tolist()))


def realize_panel(
    truth: GroundTruth,
    plan_or_pattern: DesignPlan | str,
    seed: int = 0,
    *,
    donor_count: int | None = None,
    donor_obs: int | None = None,
    nondonor_obs: int | None = None,
) -> Panel:
    """Assemble the observed panel under a shared design plan or one of
    the sampled patterns ("confounded" / "uniform").

    For the sampled patterns, `donor_count` heavily observed units are
    chosen uniformly (default 2r); they get `donor_obs` draws (default
    ceil(2 p^{5/2})) and everyone else gets `nondonor_obs` (default 2r^4).
    """
    if isinstance(plan_or_pattern, DesignPlan):
        plan = plan_or_pattern
        if plan.params.p != truth.p or plan.params.n_units != truth.n_units:
            raise ValueError("plan dimensions do not match the truth")
        masks_per_unit: list[np.ndarray] = []
        outcomes: list[np.ndarray] = []
        donor_set = set(plan.donor_ids)
        for u in range(truth.n_units):
            masks = plan.donor_combos if u in donor_set else plan.nondonor_combos
            values = expected_values(truth, u)[masks]
            rng = substream(seed, "design-noise", u)
            noise = rng.normal(0.0, truth.unit_sigma(u), size=masks.size)
            masks_per_unit.append(np.asarray(masks, dtype=np.int64))
            outcomes.append(values + noise)
        return Panel(truth.p, tuple(masks_per_unit), tuple(outcomes))
    if plan_or_pattern not in ("confounded", "uniform"):
        raise ValueError(
            f"expected a DesignPlan, 'confounded', or 'uniform', got {plan_or_pattern!r}"
        )
    heavy_obs = donor_obs if donor_obs is not None else math.ceil(2.0 * truth.p**2.5)
    light_obs = nondonor_obs if nondonor_obs is not None else 2 * truth.r**4
    heavy = set(heavy_unit_ids(truth, seed, donor_count=donor_count))
    sampler = confounded_sampler if plan_or_pattern == "confounded" else _uniform_sampler
    masks_per_unit = []
    outcomes = []
    for u in range(truth.n_units):
        count = heavy_obs if u in heavy else light_obs
        pairs = sampler(truth, u, count, subseed(seed, "cell", u))
        masks_per_unit.append(np.array([c.mask for c, _ in pairs], dtype=np.int64))
        outcomes.append(np.array([y for _, y in pairs]))
    return Panel(truth.p, tuple(masks_per_unit), tuple(outcomes))


def truth_to_dict(truth: GroundTruth) -> dict:
    return {
        "p": truth.p,
        "r": truth.r,
        "s": truth.s,
        "sigma": truth.sigma,
        "per_unit_sigma": list(truth.per_unit_sigma) if truth.per_unit_sigma else None,
        "alphas": [
            {"bits": [int(b) for b in vec.support_bits], "coeffs": list(map(float, vec.coefficients))}
            for vec in truth.alphas
        ],
    }


def truth_from_dict(payload: dict) -> GroundTruth:
    alphas = tuple(
        SparseFourierVector(payload["p"], list(zip(entry["bits"], entry["coeffs"])))
        for entry in payload["alphas"]
    )
    per_unit = payload.get("per_unit_sigma")
    return GroundTruth(
        alphas=alphas,
        r=payload["r"],
        s=payload["s"],
        p=payload["p"],
        sigma=payload["sigma"],
        per_unit_sigma=tuple(per_unit) if per_unit else None,
    )
