"""Greedy regression tree for junta-style outcome functions.

The horizontal estimator here is honest in the two-sample sense: a tree
grown on one half of a unit's observations picks the relevant features,
and the held-out half supplies empirical Fourier coefficients over every
subset of those features.  Splitting is globally greedy on impurity
decrease; a documented extension allows zero-gain splits on impure nodes
shallower than log2(max_leaves), because pure interactions like
chi_{1,2} give every single-feature split a gain of exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from synthcombo.hypercube import SparseFourierVector, character_matrix, correlate_all_subsets
from synthcombo.sparse_regress import RegressionSample

MAX_SELECTED_FEATURES = 20


@dataclass
class CartNode:
    """One tree node: its sample slice, response summary, and split, if any.

    Features are 1-based (feature j reads bit j-1 of the mask).
    """

    node_id: int
    indices: np.ndarray
    masks: np.ndarray
    values: np.ndarray
    depth: int
    path_features: frozenset[int]
    mean: float = 0.0
    sse: float = 0.0
    feature: int | None = None
    left: int | None = None          # child where feature bit is 0
    right: int | None = None         # child where feature bit is 1

    def __post_init__(self) -> None:
        self.mean = float(self.values.mean())
        self.sse = _sse(self.values, self.mean)

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def size(self) -> int:
        return int(self.values.size)


def _sse(values: np.ndarray, mean: float) -> float:
    # exact zero for constant nodes, so the zero-gain rule sees purity exactly
    if values.size == 0 or values.max() == values.min():
        return 0.0
    d = values - mean
    return float(d @ d)


@dataclass(frozen=True)
class CartTree:
    p: int
    max_leaves: int
    nodes: list[CartNode]

    @property
    def root(self) -> CartNode:
        return self.nodes[0]

    @property
    def leaves(self) -> list[CartNode]:
        return [n for n in self.nodes if n.is_leaf]

    @property
    def features_used(self) -> frozenset[int]:
        return frozenset(n.feature for n in self.nodes if n.feature is not None)

    def predict_mask(self, mask: int) -> float:
        node = self.nodes[0]
        while not node.is_leaf:
            bit = (mask >> (node.feature - 1)) & 1
            node = self.nodes[node.right if bit else node.left]
        return node.mean


@dataclass(frozen=True)
class CartModel:
    """Selected features plus held-out-half Fourier coefficients."""

    p: int
    selected: frozenset[int]
    coeffs: SparseFourierVector
    split: tuple[np.ndarray, np.ndarray]   # (half-a indices, half-b indices)
    tree: CartTree

    def __post_init__(self) -> None:
        sel_mask = _features_to_mask(self.selected)
        for bits in self.coeffs.support_bits:
            if int(bits) & ~sel_mask:
                raise ValueError("coefficient subset escapes the selected features")


def _features_to_mask(features) -> int:
    mask = 0
    for j in features:
        mask |= 1 << (j - 1)
    return mask


def impurity_decrease(node: CartNode, feature: int) -> float:
    """Normalized SSE drop from splitting ``node`` on ``feature``.

    (1/N) * [SSE(node) - SSE(bit=1 child) - SSE(bit=0 child)], clamped at
    zero so float cancellation cannot produce a negative gain.  An empty
    child contributes zero.
    """
    if node.size == 0:
        raise ValueError("impurity decrease of an empty node")
    bit = (node.masks >> (feature - 1)) & 1
    hi = node.values[bit == 1]
    lo = node.values[bit == 0]
    sse_children = 0.0
    if hi.size:
        sse_children += _sse(hi, float(hi.mean()))
    if lo.size:
        sse_children += _sse(lo, float(lo.mean()))
    return max(0.0, (node.sse - sse_children) / node.size)


def cart_grow(sample: RegressionSample, max_leaves: int) -> CartTree:
    """Globally greedy growth to at most ``max_leaves`` leaves.

    Each round scores every (leaf, unused-feature) pair and splits the best
    one; ties go to the lowest feature index, then the oldest node.  A
    zero-gain pair is admitted only when the leaf is impure and shallower
    than log2(max_leaves).
    """
    if max_leaves < 1:
        raise ValueError("max_leaves must be >= 1")
    if sample.n == 0:
        raise ValueError("cannot grow a tree on an empty sample")
    depth_cap = math.log2(max_leaves)
    nodes: list[CartNode] = [
        CartNode(0, np.arange(sample.n), sample.masks, sample.outcomes, 0, frozenset())
    ]
    leaves = [0]
    while len(leaves) < max_leaves:
        best: tuple[float, int, int] | None = None   # (gain, feature, node_id)
        for nid in leaves:
            node = nodes[nid]
            if node.sse <= 0.0 or node.size < 2:
                continue
            zero_ok = node.depth < depth_cap
            for j in range(1, sample.p + 1):
                if j in node.path_features:
                    continue
                bit = (node.masks >> (j - 1)) & 1
                if bit.min() == bit.max():
                    continue          # constant feature cannot partition
                gain = impurity_decrease(node, j)
                if gain <= 1e-12 and not zero_ok:
                    continue
                if best is None:
                    best = (gain, j, nid)
                    continue
                if gain > best[0] + 1e-12:
                    best = (gain, j, nid)
                elif gain >= best[0] - 1e-12 and (j, nid) < (best[1], best[2]):
                    best = (max(gain, best[0]), j, nid)
        if best is None:
            break
        _, j, nid = best
        node = nodes[nid]
        bit = (node.masks >> (j - 1)) & 1
        idx_hi = node.indices[bit == 1]
        idx_lo = node.indices[bit == 0]
        children = []
        for idx in (idx_lo, idx_hi):
            child = CartNode(
                len(nodes), idx, sample.masks[idx], sample.outcomes[idx],
                node.depth + 1, node.path_features | {j},
            )
            nodes.append(child)
            children.append(child.node_id)
        node.feature = j
        node.left, node.right = children
        leaves.remove(nid)
        leaves.extend(children)
    return CartTree(p=sample.p, max_leaves=max_leaves, nodes=nodes)


def _half_split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    cut = (n + 1) // 2          # odd counts give half a the extra sample
    return np.sort(order[:cut]), np.sort(order[cut:])


def cart_fit(
    sample: RegressionSample,
    max_leaves: int,
    seed: int = 0,
    *,
    split: tuple[np.ndarray, np.ndarray] | None = None,
) -> CartModel:
    """Two-half fit: tree on half a for features, coefficients from half b.

    ``split`` overrides the seeded shuffle with explicit index halves
    (useful when both halves should be the full cube).
    """
    if sample.n < 2:
        raise ValueError("cart_fit needs at least 2 observations")
    if split is None:
        idx_a, idx_b = _half_split(sample.n, seed)
    else:
        idx_a = np.asarray(split[0], dtype=np.int64)
        idx_b = np.asarray(split[1], dtype=np.int64)
        if idx_a.size == 0 or idx_b.size == 0:
            raise ValueError("both halves must be nonempty")
    half_a = RegressionSample(sample.p, sample.masks[idx_a], sample.outcomes[idx_a])
    tree = cart_grow(half_a, max_leaves)
    selected = tree.features_used
    if len(selected) > MAX_SELECTED_FEATURES:
        raise ValueError(
            f"tree selected {len(selected)} features; coefficient table over "
            f"subsets is capped at 2^{MAX_SELECTED_FEATURES} (reduce max_leaves)"
        )
    masks_b = sample.masks[idx_b]
    values_b = sample.outcomes[idx_b]
    coeffs = _restricted_coefficients(sample.p, selected, masks_b, values_b)
    return CartModel(p=sample.p, selected=selected, coeffs=coeffs, split=(idx_a, idx_b), tree=tree)


def _restricted_coefficients(
    p: int, selected: frozenset[int], masks: np.ndarray, values: np.ndarray
) -> SparseFourierVector:
    """Empirical inner products over every subset of the selected features.

    Projects each mask onto the selected coordinates and runs one fast
    correlation pass on that small cube.
    """
    feats = sorted(selected)
    k = len(feats)
    if k == 0:
        return SparseFourierVector(p, [(0, float(values.mean()))])
    proj = np.zeros(masks.size, dtype=np.int64)
    for local, j in enumerate(feats):
        proj |= ((masks >> (j - 1)) & 1) << local
    sums = correlate_all_subsets(proj, values, k) / values.size
    entries = []
    for local_bits in range(1 << k):
        orig = 0
        for local, j in enumerate(feats):
            if local_bits >> local & 1:
                orig |= 1 << (j - 1)
        entries.append((orig, float(sums[local_bits])))
    return SparseFourierVector(p, entries)


def cart_predict(model: CartModel, masks) -> np.ndarray:
    """Fourier-side prediction sum_{S subset of selected} alpha_S chi_S."""
    masks = np.atleast_1d(np.asarray(masks, dtype=np.int64))
    if model.coeffs.nnz == 0:
        return np.zeros(masks.size)
    cols = character_matrix(masks, model.coeffs.support_bits)
    return cols @ model.coeffs.coefficients
