"""Normalized mutual information between two labelings."""
from __future__ import annotations

import numpy as np

from ..core import DimensionError


def nmi(labels_a, labels_b, with_flag: bool = False):
    """2 * MI(a, b) / (H(a) + H(b)) from empirical joint frequencies.

    A single-class labeling has zero entropy, leaving the ratio undefined;
    by convention the value is 1 when both labelings are single-class (they
    are then the same trivial partition) and 0 otherwise, with the degeneracy
    flagged when ``with_flag`` is set.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError("labelings must be 1-d and the same length")
    if a.size == 0:
        raise DimensionError("labelings must be nonempty")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    ka, kb = ai.max() + 1, bi.max() + 1
    joint = np.zeros((ka, kb))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    h_a = -np.sum(pa * np.log(pa, where=pa > 0, out=np.zeros_like(pa)))
    h_b = -np.sum(pb * np.log(pb, where=pb > 0, out=np.zeros_like(pb)))
    if h_a <= 0.0 and h_b <= 0.0:
        value, flag = 1.0, True
    elif h_a <= 0.0 or h_b <= 0.0:
        value, flag = 0.0, True
    else:
        mask = joint > 0
        mi = np.sum(joint[mask] * np.log(joint[mask] / np.outer(pa, pb)[mask]))
        value, flag = float(2.0 * mi / (h_a + h_b)), False
    return (value, flag) if with_flag else value
