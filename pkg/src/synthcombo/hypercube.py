"""Boolean-hypercube encodings, Fourier characters, and exact transforms.

Interventions live on the hypercube {-1,+1}^p: a combination of treatments
is a subset of [p], stored as a p-bit mask.  Real-valued outcome functions
on the cube expand in the character basis chi_S(x) = prod_{i in S} x_i,
which is orthonormal under the uniform measure.  Everything downstream
(regression, transfer, design checks) is built on the primitives here.

Characters are never materialized as a full 2^p-column matrix inside the
library; regressions evaluate them on the fly from bitmasks (popcount
parity) or go through the fast transform, which keeps memory proportional
to the sample and the active support.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

MAX_P = 30
"""Largest intervention count representable in the bitmask types."""

MAX_WHT_P = 24
"""Largest p for which dense length-2^p transforms are permitted."""


class DimensionMismatchError(ValueError):
    """Two hypercube objects with different p were combined."""


def _check_p(p: int, cap: int = MAX_P) -> None:
    if not 1 <= p <= cap:
        raise ValueError(f"p must be in [1, {cap}], got {p}")


def _check_mask(mask: int, p: int, what: str) -> None:
    if not 0 <= mask < (1 << p):
        raise ValueError(f"{what} {mask:#x} uses bits above position {p - 1}")


@dataclass(frozen=True)
class Combination:
    """A subset pi of the p interventions, bit i set iff intervention i applied.

    Intervention indices are 1-based in all user-facing text and map to bit
    i-1 of the mask.
    """

    p: int
    mask: int

    def __post_init__(self) -> None:
        _check_p(self.p)
        _check_mask(self.mask, self.p, "combination mask")

    @classmethod
    def from_items(cls, p: int, items: Iterable[int]) -> "Combination":
        mask = 0
        for i in items:
            if not 1 <= i <= p:
                raise ValueError(f"intervention index {i} outside 1..{p}")
            mask |= 1 << (i - 1)
        return cls(p, mask)

    def items(self) -> tuple[int, ...]:
        return tuple(i + 1 for i in range(self.p) if self.mask >> i & 1)

    def contains(self, i: int) -> bool:
        return bool(self.mask >> (i - 1) & 1)


@dataclass(frozen=True)
class SubsetId:
    """Index S of a Fourier character chi_S; same bit layout as Combination."""

    p: int
    bits: int

    def __post_init__(self) -> None:
        _check_p(self.p)
        _check_mask(self.bits, self.p, "subset bits")

    @classmethod
    def from_items(cls, p: int, items: Iterable[int]) -> "SubsetId":
        return cls(p, Combination.from_items(p, items).mask)

    def items(self) -> tuple[int, ...]:
        return Combination(self.p, self.bits).items()

    def order(self) -> int:
        return int(self.bits).bit_count()


class SparseFourierVector:
    """Sparse coefficient vector over characters: {subset bits -> real}.

    Entries are kept sorted by subset bits, duplicate-free, with exact zeros
    dropped.  Dense indexing, when requested, is the standard binary order:
    bit i of the index corresponds to element i+1 of the subset.
    """

    __slots__ = ("p", "_bits", "_coeffs")

    def __init__(self, p: int, entries: Mapping[int, float] | Iterable[tuple[int, float]]):
        _check_p(p)
        if isinstance(entries, Mapping):
            items = entries.items()
        else:
            items = list(entries)
            if len({b for b, _ in items}) != len(items):
                raise ValueError("duplicate subset keys in sparse vector")
        pairs = sorted((int(b), float(v)) for b, v in items if v != 0.0)
        for b, _ in pairs:
            _check_mask(b, p, "subset bits")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "_bits", np.array([b for b, _ in pairs], dtype=np.int64))
        object.__setattr__(self, "_coeffs", np.array([v for _, v in pairs], dtype=np.float64))

    def __setattr__(self, name, value):  # immutable after construction
        raise AttributeError("SparseFourierVector is immutable")

    @property
    def support_bits(self) -> np.ndarray:
        return self._bits

    @property
    def coefficients(self) -> np.ndarray:
        return self._coeffs

    @property
    def nnz(self) -> int:
        return int(self._bits.size)

    def items(self) -> Iterator[tuple[int, float]]:
        return zip((int(b) for b in self._bits), (float(v) for v in self._coeffs))

    def as_dict(self) -> dict[int, float]:
        return dict(self.items())

    def to_dense(self) -> np.ndarray:
        if self.p > MAX_WHT_P:
            raise ValueError(f"dense vector of length 2^{self.p} refused (p > {MAX_WHT_P})")
        out = np.zeros(1 << self.p)
        out[self._bits] = self._coeffs
        return out

    @classmethod
    def from_dense(cls, p: int, dense: np.ndarray, zero_tol: float = 0.0) -> "SparseFourierVector":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.shape != (1 << p,):
            raise ValueError(f"dense vector must have length 2^{p}")
        keep = np.nonzero(np.abs(dense) > zero_tol)[0]
        return cls(p, [(int(b), float(dense[b])) for b in keep])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseFourierVector):
            return NotImplemented
        return (
            self.p == other.p
            and np.array_equal(self._bits, other._bits)
            and np.array_equal(self._coeffs, other._coeffs)
        )

    def __repr__(self) -> str:
        return f"SparseFourierVector(p={self.p}, nnz={self.nnz})"


@dataclass(frozen=True)
class Permutation:
    """A ranking tau of p items; ranks[i] is the rank of item i+1, in 1..p."""

    ranks: tuple[int, ...]

    def __post_init__(self) -> None:
        p = len(self.ranks)
        if p < 2:
            raise ValueError("permutation needs at least 2 items")
        if sorted(self.ranks) != list(range(1, p + 1)):
            raise ValueError(f"ranks {self.ranks} are not a permutation of 1..{p}")

    @property
    def p(self) -> int:
        return len(self.ranks)


def encode_combination(c: Combination) -> np.ndarray:
    """Sign vector v(pi): entry i is +1 iff intervention i+1 is applied, else -1."""
    bits = (int(c.mask) >> np.arange(c.p)) & 1
    return (2 * bits - 1).astype(np.int64)


def character_value(s: SubsetId, c: Combination) -> int:
    """chi_S(pi) = prod_{i in S} v(pi)_i = (-1)^{|S \\ pi|}, via popcount parity."""
    if s.p != c.p:
        raise DimensionMismatchError(f"subset has p={s.p}, combination has p={c.p}")
    return 1 - 2 * ((s.bits & ~c.mask).bit_count() & 1)


def character_matrix(masks: Sequence[int] | np.ndarray, subset_bits: Sequence[int] | np.ndarray) -> np.ndarray:
    """Dense +-1 matrix of chi_S(pi) with rows = combinations, cols = subsets.

    Intended for small, explicitly chosen column sets (an active set or a
    recovered support), never for all 2^p columns at once.
    """
    m = np.asarray(masks, dtype=np.uint64).reshape(-1, 1)
    s = np.asarray(subset_bits, dtype=np.uint64).reshape(1, -1)
    # bits of ~m above position p-1 never intersect s, so the complement is safe
    odd = np.bitwise_count(s & ~m).astype(np.int64) & 1
    return (1.0 - 2.0 * odd).astype(np.float64)


def evaluate(alpha: SparseFourierVector, c: Combination) -> float:
    """f(pi) = sum over stored entries of coefficient * chi_S(pi)."""
    if alpha.p != c.p:
        raise DimensionMismatchError(f"vector has p={alpha.p}, combination has p={c.p}")
    if alpha.nnz == 0:
        return 0.0
    signs = character_matrix([c.mask], alpha.support_bits)[0]
    return float(signs @ alpha.coefficients)


def evaluate_many(alpha: SparseFourierVector, masks: np.ndarray) -> np.ndarray:
    """Vectorized evaluate over an array of combination masks."""
    masks = np.asarray(masks)
    if alpha.nnz == 0:
        return np.zeros(masks.shape[0])
    return character_matrix(masks, alpha.support_bits) @ alpha.coefficients


def _check_pow2(n: int) -> int:
    p = n.bit_length() - 1
    if n <= 0 or (1 << p) != n:
        raise ValueError(f"length {n} is not a power of two")
    return p


def transform_unnormalized(values: np.ndarray) -> np.ndarray:
    """Correlation transform: out[S] = sum_x values[x] * chi_S(x), in place butterflies.

    The kernel differs from the textbook +/+/+/- Hadamard butterfly because
    chi_S(x) is -1 when an element of S is absent from x; the per-bit update
    is (u, v) -> (u + v, v - u).
    """
    a = np.array(values, dtype=np.float64)
    p = _check_pow2(a.size)
    if p > MAX_WHT_P:
        raise ValueError(f"transform refused for p={p} > {MAX_WHT_P}")
    h = 1
    while h < a.size:
        a = a.reshape(-1, 2 * h)
        lo = a[:, :h].copy()
        hi = a[:, h:].copy()
        a[:, :h] = lo + hi
        a[:, h:] = hi - lo
        a = a.reshape(-1)
        h *= 2
    return a


def wht_forward(values: np.ndarray) -> np.ndarray:
    """Fourier coefficients of a dense function table: alpha_S = 2^-p sum_x f(x) chi_S(x)."""
    a = transform_unnormalized(values)
    return a / a.size


def wht_inverse(coeffs: np.ndarray) -> np.ndarray:
    """Dense function table from dense coefficients: f(x) = sum_S alpha_S chi_S(x).

    Per-bit update (u, v) -> (u - v, u + v); exact inverse of wht_forward.
    """
    a = np.array(coeffs, dtype=np.float64)
    p = _check_pow2(a.size)
    if p > MAX_WHT_P:
        raise ValueError(f"transform refused for p={p} > {MAX_WHT_P}")
    h = 1
    while h < a.size:
        a = a.reshape(-1, 2 * h)
        lo = a[:, :h].copy()
        hi = a[:, h:].copy()
        a[:, :h] = lo - hi
        a[:, h:] = lo + hi
        a = a.reshape(-1)
        h *= 2
    return a


def correlate_all_subsets(masks: np.ndarray, values: np.ndarray, p: int) -> np.ndarray:
    """out[S] = sum_i values[i] * chi_S(masks[i]) for every S, in O(p 2^p).

    Aggregates the sample onto the cube with bincount, then runs one
    unnormalized transform.  This is the matrix-free full pass used by the
    active-set Lasso and the exact incoherence checker.
    """
    if p > MAX_WHT_P:
        raise ValueError(f"full-subset correlation refused for p={p} > {MAX_WHT_P}")
    cube = np.bincount(np.asarray(masks, dtype=np.int64), weights=values, minlength=1 << p)
    return transform_unnormalized(cube)


# ---------------------------------------------------------------------------
# Permutations: pairwise-comparison encoding
# ---------------------------------------------------------------------------

def pair_count(p: int) -> int:
    return p * (p - 1) // 2


def pair_order(p: int) -> list[tuple[int, int]]:
    """Coordinate order for permutation encodings: (i, j) with i < j, lexicographic."""
    return [(i, j) for i in range(1, p + 1) for j in range(i + 1, p + 1)]


def encode_permutation(t: Permutation) -> np.ndarray:
    """Sign vector over item pairs: +1 where tau ranks i above j (i < j), else -1.

    Identity ranking gives all -1; reversing the ranking negates every
    coordinate.
    """
    p = t.p
    out = np.empty(pair_count(p), dtype=np.int64)
    k = 0
    for i in range(p):
        for j in range(i + 1, p):
            out[k] = 1 if t.ranks[i] > t.ranks[j] else -1
            k += 1
    return out


def permutation_to_combination(t: Permutation) -> Combination:
    """Map a ranking to a combination over the p(p-1)/2 pair coordinates (+1 <-> bit set)."""
    d = pair_count(t.p)
    if d > MAX_P:
        raise ValueError(
            f"pairwise encoding needs {d} bits for p={t.p}; bitmask cap is {MAX_P} (p <= 8)"
        )
    signs = encode_permutation(t)
    mask = 0
    for k, sgn in enumerate(signs):
        if sgn > 0:
            mask |= 1 << k
    return Combination(d, mask)
