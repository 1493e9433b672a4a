"""Unnormalized target densities, the mean-field Gaussian family, and libsvm ingestion.

All log-densities accept positions with shape ``(..., dim)`` and return
shape ``(...)``. They work on float arrays, jax arrays and tape object
arrays alike, and each target also provides its analytic position gradient
so the leapfrog integrator never needs nested differentiation.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from . import ops
from .autodiff import lgamma

__all__ = [
    "ConfigError",
    "DimensionError",
    "LibsvmParseError",
    "MeanFieldGaussian",
    "Target",
    "StudentT",
    "GaussianTarget",
    "LogisticRegression",
    "SparseDataset",
    "student_t_log_density",
    "gaussian_log_density",
    "gaussian_grad_log_density",
    "sample_q",
    "logistic_posterior_log_density",
    "parse_libsvm",
    "serialize_libsvm",
    "load_libsvm",
]


class ConfigError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class LibsvmParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class MeanFieldGaussian:
    loc: np.ndarray
    log_scale: np.ndarray

    @classmethod
    def standard(cls, dim: int) -> "MeanFieldGaussian":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return len(self.loc)


def _check_dim(z, dim: int) -> None:
    if np.shape(z)[-1] != dim:
        raise DimensionError(f"expected trailing dimension {dim}, got {np.shape(z)[-1]}")


def gaussian_log_density(z, q: MeanFieldGaussian):
    _check_dim(z, len(q.loc))
    u = (z - q.loc) * ops.exp(-q.log_scale)
    return (-q.log_scale - 0.5 * ops.LOG_2PI - 0.5 * u * u).sum(axis=-1)


def gaussian_grad_log_density(z, q: MeanFieldGaussian):
    return -(z - q.loc) * ops.exp(-2.0 * q.log_scale)


def sample_q(q: MeanFieldGaussian, xi):
    """Reparameterized draw ``loc + exp(log_scale) * xi``; returns ``(z, xi)``."""
    return q.loc + ops.exp(q.log_scale) * xi, xi


class Target:
    """Unnormalized log-density over R^dim."""

    dim: int
    known_log_z: float | None = None
    known_moments: tuple[np.ndarray, np.ndarray] | None = None

    def log_density(self, z):
        raise NotImplementedError

    def grad_log_density(self, z):
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


def student_t_log_density(z, nu: float):
    if nu <= 0:
        raise ConfigError(f"degrees of freedom must be positive, got {nu}")
    c = lgamma((nu + 1) / 2) - lgamma(nu / 2) - 0.5 * math.log(nu * math.pi)
    return (c - 0.5 * (nu + 1) * ops.log(1.0 + z * z / nu)).sum(axis=-1)


@dataclass
class StudentT(Target):
    """Factorized Student-t, location 0, scale 1. Normalized, so log Z = 0."""

    dim: int
    nu: float = 3.0

    def __post_init__(self):
        if self.nu <= 0:
            raise ConfigError(f"degrees of freedom must be positive, got {self.nu}")
        self.known_log_z = 0.0
        var = self.nu / (self.nu - 2) if self.nu > 2 else math.inf
        self.known_moments = (np.zeros(self.dim), np.full(self.dim, var))

    def log_density(self, z):
        _check_dim(z, self.dim)
        return student_t_log_density(z, self.nu)

    def grad_log_density(self, z):
        return -(self.nu + 1) * z / (self.nu + z * z)

    def describe(self) -> dict:
        return {"kind": "student_t", "dim": self.dim, "nu": self.nu}


@dataclass
class GaussianTarget(Target):
    """Diagonal Gaussian scaled by ``exp(log_z)``; mostly for tests."""

    loc: np.ndarray
    log_scale: np.ndarray
    log_z: float = 0.0

    def __post_init__(self):
        self.loc = np.asarray(self.loc, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.dim = len(self.loc)
        self.known_log_z = float(self.log_z)
        self.known_moments = (self.loc.copy(), np.exp(2 * self.log_scale))

    @classmethod
    def standard(cls, dim: int) -> "GaussianTarget":
        return cls(np.zeros(dim), np.zeros(dim))

    def as_q(self) -> MeanFieldGaussian:
        return MeanFieldGaussian(self.loc.copy(), self.log_scale.copy())

    def log_density(self, z):
        return gaussian_log_density(z, self.as_q()) + self.log_z

    def grad_log_density(self, z):
        return gaussian_grad_log_density(z, self.as_q())

    def describe(self) -> dict:
        return {"kind": "gaussian", "loc": self.loc.tolist(),
                "log_scale": self.log_scale.tolist(), "log_z": self.log_z}


@dataclass(frozen=True)
class SparseDataset:
    n_features: int
    rows: tuple[tuple[tuple[int, float], ...], ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.rows) != len(self.labels):
            raise ValueError("rows and labels differ in length")
        if not set(self.labels) <= {-1, 1}:
            raise ValueError("labels must be in {-1, +1}")
        for r, entries in enumerate(self.rows):
            prev = -1
            for idx, _ in entries:
                if idx <= prev or idx >= self.n_features:
                    raise ValueError(f"row {r}: bad feature index {idx}")
                prev = idx

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def dense(self) -> np.ndarray:
        x = np.zeros((self.n_rows, self.n_features))
        for r, entries in enumerate(self.rows):
            for idx, val in entries:
                x[r, idx] = val
        return x

    def head(self, n: int) -> "SparseDataset":
        return SparseDataset(self.n_features, self.rows[:n], self.labels[:n])


def parse_libsvm(stream: TextIO | Iterable[str], n_features: int | None = None) -> SparseDataset:
    """Parse ``<label> <idx>:<val> ...`` lines with 1-based indices.

    Labels 0/1 are mapped to -1/+1. The feature count is the largest index
    seen unless ``n_features`` overrides it.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows, labels = [], []
    max_idx = 0
    for line_no, line in enumerate(stream, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            raw = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(line_no, f"bad label {tokens[0]!r}") from None
        if raw in (0.0, -1.0):
            label = -1
        elif raw == 1.0:
            label = 1
        else:
            raise LibsvmParseError(line_no, f"label {tokens[0]!r} is not binary")
        entries = []
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise LibsvmParseError(line_no, f"bad token {tok!r}") from None
            if idx <= prev:
                raise LibsvmParseError(line_no, f"index {idx} not increasing")
            prev = idx
            entries.append((idx - 1, val))
        max_idx = max(max_idx, prev)
        rows.append(tuple(entries))
        labels.append(label)
    if n_features is None:
        n_features = max_idx
    elif max_idx > n_features:
        raise LibsvmParseError(0, f"index {max_idx} exceeds configured feature count {n_features}")
    return SparseDataset(n_features, tuple(rows), tuple(labels))


def serialize_libsvm(data: SparseDataset) -> str:
    lines = []
    for label, entries in zip(data.labels, data.rows):
        parts = [f"{label:+d}"] + [f"{i + 1}:{v!r}" for i, v in entries]
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def load_libsvm(path, n_features: int | None = None, max_rows: int | None = None) -> SparseDataset:
    with open(path) as fh:
        data = parse_libsvm(fh, n_features)
    return data.head(max_rows) if max_rows is not None else data


def logistic_posterior_log_density(w, data: SparseDataset):
    return LogisticRegression(data).log_density(w)


class LogisticRegression(Target):
    """Bayesian logistic regression, N(0, I) prior on weights, no intercept."""

    prior = "normal(0, 1), no intercept"

    def __init__(self, data: SparseDataset):
        self.data = data
        self.dim = data.n_features
        self.x = data.dense()
        self.y = np.asarray(data.labels, dtype=np.float64)
        self.yx = self.y[:, None] * self.x
        self.known_log_z = None
        self.known_moments = None

    def log_density(self, w):
        _check_dim(w, self.dim)
        margins = w @ self.yx.T
        lik = -ops.softplus(-margins).sum(axis=-1)
        return lik + (-0.5 * w * w - 0.5 * ops.LOG_2PI).sum(axis=-1)

    def grad_log_density(self, w):
        margins = w @ self.yx.T
        return ops.sigmoid(-margins) @ self.yx - w

    def describe(self) -> dict:
        return {"kind": "logistic", "rows": self.data.n_rows, "features": self.dim,
                "prior": self.prior}
