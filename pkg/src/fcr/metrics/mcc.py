"""Mean correlation coefficient after optimal component matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from ..core import DimensionError


@dataclass(frozen=True)
class AssignmentResult:
    """Optimal matching between true and estimated latent components.

    ``permutation[i]`` is the estimated column matched to true column i;
    ``mcc`` is the mean absolute correlation along the matching.
    """

    permutation: np.ndarray
    correlations: np.ndarray
    mcc: float
    degenerate_columns: tuple[str, ...] = ()


def _column_ranks(a: np.ndarray) -> np.ndarray:
    return np.column_stack([rankdata(a[:, j]) for j in range(a.shape[1])])


def _abs_cross_corr(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """|corr| between every column pair; constant columns correlate as 0."""
    n = a.shape[0]
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    sa = ac.std(axis=0)
    sb = bc.std(axis=0)
    degenerate = []
    for side, s in (("true", sa), ("est", sb)):
        for j in np.flatnonzero(s < 1e-12):
            degenerate.append(f"{side}:{j}")
    denom = np.outer(np.maximum(sa, 1e-12), np.maximum(sb, 1e-12))
    corr = (ac.T @ bc) / (n * denom)
    corr[sa < 1e-12, :] = 0.0
    corr[:, sb < 1e-12] = 0.0
    return np.abs(corr), degenerate


def mcc(z_true: np.ndarray, z_est: np.ndarray,
        correlation: str = "rank") -> AssignmentResult:
    """Match components by maximum-weight assignment on absolute correlations.

    ``correlation`` selects rank-based (Spearman) or linear (Pearson)
    coefficients; the rank-based mode is invariant to strictly monotone
    per-component transforms.
    """
    z_true = np.asarray(z_true, dtype=np.float64)
    z_est = np.asarray(z_est, dtype=np.float64)
    if z_true.ndim != 2 or z_est.ndim != 2:
        raise DimensionError("latent matrices must be 2-d (cells x components)")
    if z_true.shape[0] != z_est.shape[0]:
        raise DimensionError(
            f"row counts differ: {z_true.shape[0]} vs {z_est.shape[0]}"
        )
    if z_true.shape[1] != z_est.shape[1]:
        raise DimensionError(
            f"component counts differ: {z_true.shape[1]} vs {z_est.shape[1]}"
        )
    if correlation == "rank":
        a, b = _column_ranks(z_true), _column_ranks(z_est)
    elif correlation == "linear":
        a, b = z_true, z_est
    else:
        raise ValueError(f"correlation must be 'rank' or 'linear', got {correlation!r}")
    abs_corr, degenerate = _abs_cross_corr(a, b)
    rows, cols = linear_sum_assignment(-abs_corr)
    permutation = np.empty(z_true.shape[1], dtype=int)
    permutation[rows] = cols
    return AssignmentResult(
        permutation=permutation,
        correlations=abs_corr,
        mcc=float(abs_corr[rows, cols].mean()),
        degenerate_columns=tuple(degenerate),
    )
