"""Rankings support: pairwise-comparison encoding of permutation panels,
thin fit/predict delegates, uniform ranking draws, and a rankings CSV."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._rng import substream
from .estimator import FittedSynthCombo, Panel, SynthComboConfig, fit, predict
from .hypercube import (
    MAX_P,
    Combination,
    Permutation,
    pair_count,
    permutation_to_combination,
)


@dataclass(frozen=True)
class PermPanel:
    """Observed rankings and outcomes, one list per unit."""

    p: int
    unit_perms: tuple[tuple[Permutation, ...], ...]
    unit_outcomes: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if self.p < 2:
            raise ValueError(f"need at least 2 items, got p={self.p}")
        if pair_count(self.p) > MAX_P:
            raise ValueError(
                f"pairwise encoding needs {pair_count(self.p)} bits for p={self.p}; "
                f"cap is {MAX_P}"
            )
        if len(self.unit_perms) != len(self.unit_outcomes):
            raise ValueError("unit lists differ in length")
        coerced = []
        for u, (perms, outs) in enumerate(zip(self.unit_perms, self.unit_outcomes)):
            outs = np.asarray(outs, dtype=np.float64)
            coerced.append(outs)
            if len(perms) != outs.size:
                raise ValueError(f"unit {u}: {len(perms)} rankings vs {outs.size} outcomes")
            if outs.size and not np.all(np.isfinite(outs)):
                raise ValueError(f"unit {u} has non-finite outcomes")
            for t in perms:
                if t.p != self.p:
                    raise ValueError(f"unit {u} has a ranking of {t.p} items, expected {self.p}")
        object.__setattr__(self, "unit_outcomes", tuple(coerced))

    @property
    def n_units(self) -> int:
        return len(self.unit_perms)


def perm_to_combination_panel(perm_panel: PermPanel) -> Panel:
    """Re-express every ranking as a combination over item-pair coordinates."""
    d = pair_count(perm_panel.p)
    masks = []
    for perms in perm_panel.unit_perms:
        masks.append(
            np.array([permutation_to_combination(t).mask for t in perms], dtype=np.int64)
        )
    return Panel(d, tuple(masks), perm_panel.unit_outcomes)


def perm_fit(perm_panel: PermPanel, config: SynthComboConfig | None = None) -> FittedSynthCombo:
    """The whole pipeline, unchanged, over the encoded panel."""
    if config is None:
        config = SynthComboConfig()
    return fit(perm_to_combination_panel(perm_panel), config)


def perm_predict(model: FittedSynthCombo, unit: int, ranking: Permutation) -> float:
    return predict(model, unit, permutation_to_combination(ranking))


def all_permutations(p: int) -> list[Permutation]:
    """Every ranking of p items, lexicographic in rank tuples. p <= 8."""
    if math.factorial(p) > 50_000:
        raise ValueError(f"enumerating {p}! rankings is unreasonable")
    return [Permutation(ranks) for ranks in itertools.permutations(range(1, p + 1))]


def sample_permutations(p: int, count: int, seed: int = 0) -> list[Permutation]:
    """count i.i.d. uniform rankings (shuffle per draw; repeats possible)."""
    rng = substream(seed, "rankings")
    out = []
    for _ in range(count):
        ranks = rng.permutation(p) + 1
        out.append(Permutation(tuple(int(r) for r in ranks)))
    return out


# ---------------------------------------------------------------------------
# rankings CSV: unit,ranks,outcome with ranks like 2-1-3

RANKINGS_HEADER = ["unit", "ranks", "outcome"]


def save_rankings(path: str, perm_panel: PermPanel) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RANKINGS_HEADER)
        for u, (perms, outs) in enumerate(
            zip(perm_panel.unit_perms, perm_panel.unit_outcomes)
        ):
            for t, y in zip(perms, outs):
                writer.writerow([u, "-".join(str(r) for r in t.ranks), repr(float(y))])


def load_rankings(path: str) -> PermPanel:
    """Parse a rankings CSV; complaints carry 1-based line numbers."""
    per_unit: dict[int, list[tuple[Permutation, float]]] = {}
    p = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RANKINGS_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(RANKINGS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                unit = int(row[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad unit id {row[0]!r}") from None
            if unit < 0:
                raise ValueError(f"{path}:{lineno}: unit id must be >= 0")
            try:
                ranks = tuple(int(tok) for tok in row[1].split("-"))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad ranks field {row[1]!r}") from None
            try:
                ranking = Permutation(ranks)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if p is None:
                p = ranking.p
            elif ranking.p != p:
                raise ValueError(
                    f"{path}:{lineno}: ranking of {ranking.p} items, earlier rows had {p}"
                )
            try:
                outcome = float(row[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad outcome {row[2]!r}") from None
            per_unit.setdefault(unit, []).append((ranking, outcome))
    if not per_unit:
        raise ValueError(f"{path}: no data rows")
    n_units = max(per_unit) + 1
    perms = []
    outs = []
    for u in range(n_units):
        rows = per_unit.get(u, [])
        perms.append(tuple(t for t, _ in rows))
        outs.append(np.array([y for _, y in rows], dtype=np.float64))
    return PermPanel(p=p, unit_perms=tuple(perms), unit_outcomes=tuple(outs))
