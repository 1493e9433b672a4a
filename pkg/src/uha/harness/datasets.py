"""Synthetic stand-in for the a1a binary-feature dataset.

a1a rows are one-hot encodings of 14 categorical attributes over 123 binary
features. This generator reproduces that shape: features are partitioned
into 14 groups, each row activates one feature per group, and labels follow
a logistic model with roughly 30% positives.
"""
from __future__ import annotations

import numpy as np

from ..targets import SparseDataset, serialize_libsvm

A1A_FEATURES = 123
A1A_GROUPS = 14


def _group_bounds(n_features: int, n_groups: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, n_features, n_groups + 1).round().astype(int)
    return list(zip(edges[:-1], edges[1:]))


def synthetic_a1a(n_rows: int = 200, seed: int = 0, n_features: int = A1A_FEATURES,
                  n_groups: int = A1A_GROUPS) -> SparseDataset:
    gen = np.random.Generator(np.random.PCG64(seed))
    groups = _group_bounds(n_features, n_groups)
    w = gen.normal(0.0, 0.7, n_features)
    rows, labels = [], []
    for _ in range(n_rows):
        active = [int(gen.integers(lo, hi)) for lo, hi in groups]
        logit = w[active].sum() - 2.5
        y = 1 if gen.random() < 1.0 / (1.0 + np.exp(-logit)) else -1
        rows.append(tuple((i, 1.0) for i in active))
        labels.append(y)
    return SparseDataset(n_features, tuple(rows), tuple(labels))


def write_synthetic_a1a(path, n_rows: int = 200, seed: int = 0) -> SparseDataset:
    data = synthetic_a1a(n_rows, seed)
    with open(path, "w") as fh:
        fh.write(serialize_libsvm(data))
    return data
