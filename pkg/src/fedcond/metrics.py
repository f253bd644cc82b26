"""Clustering agreement metrics."""

from __future__ import annotations

from math import comb

import numpy as np


def compute_ari(true_ids, estimated_ids) -> float:
    """Adjusted Rand index via the pair-counting contingency formula.

    1.0 means identical partitions, ~0 chance-level agreement; the adjusted
    index can go slightly negative. Both degenerate all-in-one/all-singleton
    partitions on both sides yield 1.0 (the partitions are equal).
    """
    a = np.asarray(true_ids)
    b = np.asarray(estimated_ids)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"labelings must be equal-length 1-D, got {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")
    _, a_inv = np.unique(a, return_inverse=True)
    _, b_inv = np.unique(b, return_inverse=True)
    contingency = np.zeros((a_inv.max() + 1, b_inv.max() + 1), dtype=np.int64)
    np.add.at(contingency, (a_inv, b_inv), 1)

    sum_cells = sum(comb(int(v), 2) for v in contingency.ravel())
    sum_rows = sum(comb(int(v), 2) for v in contingency.sum(axis=1))
    sum_cols = sum(comb(int(v), 2) for v in contingency.sum(axis=0))
    total = comb(n, 2)

    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0  # both partitions degenerate and equal
    return float((sum_cells - expected) / (max_index - expected))
