"""Counterfactual estimation over combinatorial interventions.

Per-unit outcome functions over all 2^p treatment combinations are learned
from sparsely observed panels in two regressions: a sparse Fourier
regression on each data-rich (donor) unit, then a principal component
regression transferring donor predictions to every data-poor unit.
Includes an experiment-design sampler with assumption checkers, Gaussian
prediction intervals for the select-then-ridge horizontal model, a
simulation benchmark with baselines, and a ranking (permutation) front end.
"""

from synthcombo.hypercube import (
    Combination,
    Permutation,
    SparseFourierVector,
    SubsetId,
    character_value,
    encode_combination,
    encode_permutation,
    evaluate,
    wht_forward,
    wht_inverse,
)

__version__ = "0.1.0"

__all__ = [
    "Combination",
    "Permutation",
    "SparseFourierVector",
    "SubsetId",
    "character_value",
    "encode_combination",
    "encode_permutation",
    "evaluate",
    "wht_forward",
    "wht_inverse",
    "__version__",
]
