"""Randomized assignment plans and checkers for the conditions they promise.

The sampler draws a donor set and two shared combination sets (one for
donors, one for everyone else) with sizes given by closed-form ceilings.
The checkers measure, on a realized plan, the quantities the guarantees
are stated in terms of: per-donor restricted column rank, design
incoherence, spectrum balance, and query membership in the observed
row space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rng import substream
from .hypercube import MAX_P, character_matrix, correlate_all_subsets

EXACT_INCOHERENCE_MAX_P = 10

# a combo set smaller than the support can never have full column rank,
# and SVD on such a matrix reports only min(rows, cols) values
SPAN_PASS_FLOOR = 1e-8

SUBSPACE_RESIDUAL_TOL = 1e-6

# "well-balanced" constants are universal-but-unspecified; these defaults
# are deliberately permissive and both are configurable at the call site
SPECTRUM_RATIO_FLOOR = 0.05
FROBENIUS_MASS_FLOOR = 1e-8


@dataclass(frozen=True)
class DesignParams:
    """Population and target sizes that drive the assignment sampler."""

    n_units: int
    p: int
    r: int
    s: int
    gamma: float
    delta: float
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0

    def __post_init__(self) -> None:
        if self.n_units < 1:
            raise ValueError(f"n_units must be positive, got {self.n_units}")
        if not 1 <= self.p <= MAX_P:
            raise ValueError(f"p must be in [1, {MAX_P}], got {self.p}")
        if self.r < 1:
            raise ValueError(f"r must be positive, got {self.r}")
        if self.s < 1:
            raise ValueError(f"s must be positive, got {self.s}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        for name in ("c1", "c2", "c3"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    def as_dict(self) -> dict:
        return {
            "n_units": self.n_units,
            "p": self.p,
            "r": self.r,
            "s": self.s,
            "gamma": self.gamma,
            "delta": self.delta,
            "c1": self.c1,
            "c2": self.c2,
            "c3": self.c3,
        }


def theory_sizes(params: DesignParams) -> tuple[int, int, int]:
    """Closed-form ceilings (n_donors, n_donor_combos, n_nondonor_combos).

    Each size is ceil(c_i * expression) clamped to at least 1; the donor
    count feeds the two log terms that follow it.
    """
    r, s, gamma, delta = params.r, params.s, params.gamma, params.delta
    n_donors = max(1, math.ceil(params.c1 * r * math.log(r * s / gamma)))
    n_donor_combos = max(
        1,
        math.ceil(
            params.c2
            * r**3
            * s**2
            * math.log(n_donors * 2.0**params.p / gamma)
            / delta**2
        ),
    )
    n_nondonor_combos = max(
        1,
        math.ceil(
            params.c3 * max(r * math.log(n_donors / gamma), r**4 / delta**4)
        ),
    )
    return n_donors, n_donor_combos, n_nondonor_combos


def preset_sizes(params: DesignParams) -> tuple[int, int, int]:
    """Benchmark-reproduction sizes: 2r donors, ceil(2 p^{5/2}) donor
    combos, 2 r^4 non-donor combos."""
    return (
        2 * params.r,
        math.ceil(2.0 * params.p**2.5),
        2 * params.r**4,
    )


@dataclass(frozen=True)
class DesignPlan:
    """A realized assignment: who the donors are and which combination
    sets each side of the split observes."""

    params: DesignParams
    donor_ids: tuple[int, ...]
    donor_combos: np.ndarray
    nondonor_combos: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.donor_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("plan needs at least one donor")
        if len(set(ids.tolist())) != ids.size:
            raise ValueError("donor ids repeat")
        if ids.min() < 0 or ids.max() >= self.params.n_units:
            raise ValueError("donor id outside the unit population")
        cube = 1 << self.params.p
        for name in ("donor_combos", "nondonor_combos"):
            combos = np.asarray(getattr(self, name), dtype=np.int64)
            object.__setattr__(self, name, combos)
            if combos.size == 0:
                raise ValueError(f"{name} is empty")
            if len(set(combos.tolist())) != combos.size:
                raise ValueError(f"{name} has duplicates")
            if combos.min() < 0 or combos.max() >= cube:
                raise ValueError(f"{name} has masks outside the cube")

    @property
    def nondonor_ids(self) -> tuple[int, ...]:
        taken = set(self.donor_ids)
        return tuple(u for u in range(self.params.n_units) if u not in taken)

    def to_dict(self) -> dict:
        return {
            "params": self.params.as_dict(),
            "donor_ids": list(self.donor_ids),
            "donor_combos": [int(m) for m in self.donor_combos],
            "nondonor_combos": [int(m) for m in self.nondonor_combos],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DesignPlan":
        return cls(
            params=DesignParams(**payload["params"]),
            donor_ids=tuple(int(u) for u in payload["donor_ids"]),
            donor_combos=np.array(payload["donor_combos"], dtype=np.int64),
            nondonor_combos=np.array(payload["nondonor_combos"], dtype=np.int64),
        )


def design_sample(params: DesignParams, seed: int = 0, *, preset: str | None = None) -> DesignPlan:
    """Draw a plan: donors uniform without replacement, then the two
    shared combination sets, also uniform without replacement.

    preset=None uses the theoretical ceilings; preset="sims" uses the
    benchmark-reproduction sizes.
    """
    if preset is None:
        sizes = theory_sizes(params)
    elif preset == "sims":
        sizes = preset_sizes(params)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    n_donors, n_donor_combos, n_nondonor_combos = sizes
    cube = 1 << params.p
    if n_donors > params.n_units:
        raise ValueError(
            f"need {n_donors} donors but the population has {params.n_units} units"
        )
    if max(n_donor_combos, n_nondonor_combos) > cube:
        raise ValueError(
            f"need {max(n_donor_combos, n_nondonor_combos)} combinations "
            f"but the cube has {cube}"
        )
    rng_units = substream(seed, "design", "donors")
    donor_ids = np.sort(rng_units.choice(params.n_units, size=n_donors, replace=False))
    rng_donor = substream(seed, "design", "donor-combos")
    donor_combos = np.sort(
        rng_donor.choice(cube, size=n_donor_combos, replace=False)
    ).astype(np.int64)
    rng_nondonor = substream(seed, "design", "nondonor-combos")
    nondonor_combos = np.sort(
        rng_nondonor.choice(cube, size=n_nondonor_combos, replace=False)
    ).astype(np.int64)
    return DesignPlan(
        params=params,
        donor_ids=tuple(int(u) for u in donor_ids),
        donor_combos=donor_combos,
        nondonor_combos=nondonor_combos,
    )


# ---------------------------------------------------------------------------
# checkers


@dataclass(frozen=True)
class SpanCheck:
    """Smallest singular value of each donor's restricted design.

    An empty support has nothing to identify, recorded as +inf.
    """

    values: tuple[float, ...]
    threshold: float = SPAN_PASS_FLOOR

    def __post_init__(self) -> None:
        for v in self.values:
            if math.isnan(v) or v < 0.0:
                raise ValueError("singular values must be >= 0")

    @property
    def passed(self) -> bool:
        return all(v > self.threshold for v in self.values)


def check_horizontal_span(
    alpha_supports: list[frozenset[int] | set[int] | tuple[int, ...]],
    donor_combos: np.ndarray,
) -> SpanCheck:
    """Per-donor minimum singular value of the combo-by-support matrix.

    A donor whose support has more subsets than there are combos scores
    0.0 outright: the columns cannot be independent.
    """
    combos = np.asarray(donor_combos, dtype=np.int64)
    if combos.size == 0:
        raise ValueError("donor combo set is empty")
    values = []
    for support in alpha_supports:
        bits = sorted(int(b) for b in support)
        if not bits:
            values.append(math.inf)
            continue
        if len(bits) > combos.size:
            values.append(0.0)
            continue
        mat = character_matrix(combos, bits)
        values.append(float(np.linalg.svd(mat, compute_uv=False)[-1]))
    return SpanCheck(values=tuple(values))


@dataclass(frozen=True)
class IncoherenceCheck:
    estimate: float
    threshold: float
    mode: str
    n_pairs: int | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.estimate) or self.estimate < 0.0:
            raise ValueError("estimate must be finite and >= 0")
        if not math.isfinite(self.threshold) or self.threshold <= 0.0:
            raise ValueError("threshold must be finite and positive")

    @property
    def passed(self) -> bool:
        return self.estimate <= self.threshold


def _gram_row_means(combos: np.ndarray, p: int) -> np.ndarray:
    """mean of char_T over the combos, for every subset T at once.

    The (S, S') Gram entry equals this mean at T = S xor S', so the
    whole 2^p x 2^p table folds into one length-2^p vector.
    """
    weights = np.full(combos.size, 1.0 / combos.size)
    return correlate_all_subsets(combos, weights, p)


def check_incoherence(
    donor_combos: np.ndarray,
    p: int,
    s: int,
    *,
    mode: str = "exact",
    n_pairs: int | None = None,
    cprime: float = 1.0,
    seed: int = 0,
) -> IncoherenceCheck:
    """Entrywise deviation of the design Gram from identity.

    exact mode evaluates all subset pairs (p <= 10); monte_carlo samples
    n_pairs pairs uniformly, or enumerates everything when n_pairs covers
    all 4^p ordered pairs. Repeated combos are allowed and weighted by
    multiplicity. Threshold is cprime / s.
    """
    combos = np.asarray(donor_combos, dtype=np.int64)
    if combos.size == 0:
        raise ValueError("donor combo set is empty")
    if s < 1:
        raise ValueError(f"s must be positive, got {s}")
    if cprime <= 0.0:
        raise ValueError(f"cprime must be positive, got {cprime}")
    threshold = cprime / s
    if mode == "exact":
        if p > EXACT_INCOHERENCE_MAX_P:
            raise ValueError(
                f"exact mode handles p <= {EXACT_INCOHERENCE_MAX_P}, got {p}"
            )
        means = _gram_row_means(combos, p)
        # diagonal entries are means[0] == 1 exactly; report the max of
        # the off-diagonal magnitudes and the diagonal deviation anyway
        estimate = max(float(np.max(np.abs(means[1:]))), abs(float(means[0]) - 1.0))
        return IncoherenceCheck(estimate=estimate, threshold=threshold, mode="exact")
    if mode != "monte_carlo":
        raise ValueError(f"unknown mode {mode!r}")
    if n_pairs is None or n_pairs < 1:
        raise ValueError("monte_carlo mode needs n_pairs >= 1")
    total_pairs = 4**p if p <= 15 else None
    if total_pairs is not None and n_pairs >= total_pairs:
        means = _gram_row_means(combos, p)
        estimate = max(float(np.max(np.abs(means[1:]))), abs(float(means[0]) - 1.0))
        return IncoherenceCheck(
            estimate=estimate, threshold=threshold, mode="monte_carlo", n_pairs=n_pairs
        )
    rng = substream(seed, "incoherence-pairs")
    lhs = rng.integers(0, 1 << p, size=n_pairs, dtype=np.int64)
    rhs = rng.integers(0, 1 << p, size=n_pairs, dtype=np.int64)
    diffs = np.unique(lhs ^ rhs)
    estimate = 0.0
    step = max(1, 10_000_000 // max(1, combos.size))
    for lo in range(0, diffs.size, step):
        block = diffs[lo : lo + step]
        overlap = np.bitwise_count(block[:, None] & ~combos[None, :])
        signs = 1.0 - 2.0 * (overlap & 1)
        means = signs.mean(axis=1)
        zero = block == 0
        means[zero] -= 1.0
        estimate = max(estimate, float(np.max(np.abs(means))))
    return IncoherenceCheck(
        estimate=estimate, threshold=threshold, mode="monte_carlo", n_pairs=n_pairs
    )


@dataclass(frozen=True)
class SpectrumSubspaceCheck:
    """Spectrum balance of a value panel plus per-query row-space residuals."""

    singvals: tuple[float, ...]
    spectrum_ratio: float
    frobenius_mass: float
    residuals: tuple[float, ...]
    ratio_floor: float = SPECTRUM_RATIO_FLOOR
    mass_floor: float = FROBENIUS_MASS_FLOOR
    residual_tol: float = SUBSPACE_RESIDUAL_TOL

    def __post_init__(self) -> None:
        for v in (self.spectrum_ratio, self.frobenius_mass, *self.residuals):
            if not math.isfinite(v) or v < 0.0:
                raise ValueError("reported scalars must be finite and >= 0")

    @property
    def spectrum_pass(self) -> bool:
        return (
            self.spectrum_ratio >= self.ratio_floor
            and self.frobenius_mass >= self.mass_floor
        )

    @property
    def subspace_pass(self) -> bool:
        return all(res < self.residual_tol for res in self.residuals)

    @property
    def passed(self) -> bool:
        return self.spectrum_pass and self.subspace_pass


def check_spectrum_and_subspace(
    panel: np.ndarray,
    query_columns: np.ndarray,
    r: int,
    *,
    ratio_floor: float = SPECTRUM_RATIO_FLOOR,
    mass_floor: float = FROBENIUS_MASS_FLOOR,
    residual_tol: float = SUBSPACE_RESIDUAL_TOL,
) -> SpectrumSubspaceCheck:
    """Check a noiseless donor value panel (rows = combos, cols = donors).

    Reports s_r / s_1, squared Frobenius norm per entry, and for each
    query column (donor values at an unseen combo, length = n donors)
    the relative residual after projecting onto the panel's row space.
    """
    mat = np.asarray(panel, dtype=np.float64)
    if mat.ndim != 2 or mat.size == 0:
        raise ValueError("panel must be a non-empty 2-d array")
    if not np.any(mat):
        raise ValueError("panel is identically zero")
    if r < 1:
        raise ValueError(f"r must be positive, got {r}")
    queries = np.atleast_2d(np.asarray(query_columns, dtype=np.float64))
    if queries.shape[1] != mat.shape[1]:
        raise ValueError(
            f"query columns have length {queries.shape[1]}, expected {mat.shape[1]}"
        )
    singvals = np.linalg.svd(mat, compute_uv=False)
    ratio = float(singvals[r - 1] / singvals[0]) if r <= singvals.size else 0.0
    mass = float(np.sum(mat * mat) / mat.size)
    _, svals, vt = np.linalg.svd(mat, full_matrices=False)
    rank = int(np.sum(svals > svals[0] * 1e-12))
    basis = vt[:rank]
    residuals = []
    for q in queries:
        scale = float(np.linalg.norm(q))
        if scale == 0.0:
            residuals.append(0.0)
            continue
        resid = q - basis.T @ (basis @ q)
        residuals.append(float(np.linalg.norm(resid) / scale))
    return SpectrumSubspaceCheck(
        singvals=tuple(float(s) for s in singvals),
        spectrum_ratio=ratio,
        frobenius_mass=mass,
        residuals=tuple(residuals),
        ratio_floor=ratio_floor,
        mass_floor=mass_floor,
        residual_tol=residual_tol,
    )


@dataclass(frozen=True)
class AssumptionReport:
    """Bundle of the three checker results with an aggregate verdict."""

    horizontal: SpanCheck
    incoherence: IncoherenceCheck
    vertical: SpectrumSubspaceCheck

    @property
    def all_pass(self) -> bool:
        return self.horizontal.passed and self.incoherence.passed and self.vertical.passed

    def as_dict(self) -> dict:
        return {
            "horizontal_span": {
                "values": [v if math.isfinite(v) else "inf" for v in self.horizontal.values],
                "threshold": self.horizontal.threshold,
                "passed": self.horizontal.passed,
            },
            "incoherence": {
                "estimate": self.incoherence.estimate,
                "threshold": self.incoherence.threshold,
                "mode": self.incoherence.mode,
                "passed": self.incoherence.passed,
            },
            "spectrum": {
                "ratio": self.vertical.spectrum_ratio,
                "frobenius_mass": self.vertical.frobenius_mass,
                "passed": self.vertical.spectrum_pass,
            },
            "subspace": {
                "residuals": list(self.vertical.residuals),
                "tolerance": self.vertical.residual_tol,
                "passed": self.vertical.subspace_pass,
            },
            "all_pass": self.all_pass,
        }


@dataclass(frozen=True)
class GrowthTrace:
    """Heuristic donor growth: the chosen prefix and the rank after each
    addition. No formal guarantee attaches to this rule."""

    donor_ids: tuple[int, ...]
    ranks: tuple[int, ...]
    stabilized: bool


def grow_donor_set(
    panel,
    config=None,
    *,
    stable_rounds: int = 3,
    probe_count: int = 128,
    seed: int = 0,
) -> GrowthTrace:
    """Add well-observed units one at a time until the fitted panel rank
    stops moving for `stable_rounds` consecutive additions.

    Heuristic only: units are taken in decreasing observation count, each
    gets a horizontal fit, fits are evaluated on a shared probe set of
    combinations, and the effective rank of that value matrix is tracked.
    """
    from .estimator import SynthComboConfig, _fit_horizontal

    if config is None:
        config = SynthComboConfig()
    if stable_rounds < 1:
        raise ValueError(f"stable_rounds must be positive, got {stable_rounds}")
    if probe_count < 2:
        raise ValueError(f"probe_count must be at least 2, got {probe_count}")
    min_obs = config.min_obs if config.min_obs is not None else 2 * config.cv_folds
    counts = [(panel.unit_masks[u].size, u) for u in range(panel.n_units)]
    eligible = [u for size, u in sorted(counts, key=lambda t: (-t[0], t[1])) if size >= min_obs]
    if not eligible:
        raise ValueError(f"no unit has at least {min_obs} observations")
    cube = 1 << panel.p
    rng = substream(seed, "grow-probe")
    if probe_count >= cube:
        probe = np.arange(cube, dtype=np.int64)
    else:
        probe = np.sort(rng.choice(cube, size=probe_count, replace=False)).astype(np.int64)
    rows: list[np.ndarray] = []
    ranks: list[int] = []
    chosen: list[int] = []
    unchanged = 0
    for u in eligible:
        model = _fit_horizontal(panel.sample(u), config, seed)
        rows.append(model.predict(probe))
        chosen.append(u)
        mat = np.stack(rows)
        svals = np.linalg.svd(mat, compute_uv=False)
        # fitted rows carry regression error, so the rank cut is loose on
        # purpose; this is a stabilization heuristic, not an exact rank
        rank = int(np.sum(svals > svals[0] * 1e-6)) if svals[0] > 0 else 0
        if ranks and rank == ranks[-1]:
            unchanged += 1
        else:
            unchanged = 0
        ranks.append(rank)
        if unchanged >= stable_rounds:
            return GrowthTrace(tuple(chosen), tuple(ranks), stabilized=True)
    return GrowthTrace(tuple(chosen), tuple(ranks), stabilized=False)
