"""Hamiltonian transition kernels for annealing.

The simulator ``simulate_T`` is leapfrog followed by a momentum flip, which
makes it volume preserving and its own inverse. The corrected kernels
(Metropolis accept-reject) and their uncorrected counterparts are built from
three steps: momentum refresh, simulation, momentum reversal.

Kernels take their noise explicitly (``xi`` standard normals, ``u`` uniforms)
so a draw can be replayed exactly on any backend. Batched inputs with a
leading axis are supported throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import jax.numpy as jnp
import numpy as np

from . import ops
from .targets import ConfigError

__all__ = [
    "DynamicsDivergence",
    "MomentumSpec",
    "PhasePoint",
    "LeapfrogConfig",
    "Bridge",
    "log_S",
    "simulate_T",
    "leapfrog",
    "resample_momentum",
    "corrected_T",
    "corrected_U",
    "uncorrected_T",
    "uncorrected_U",
    "DIVERGENCE_LIMIT",
]

DIVERGENCE_LIMIT = 1e8


class DynamicsDivergence(ArithmeticError):
    def __init__(self, step: int, message: str = "trajectory diverged"):
        super().__init__(f"{message} at leapfrog step {step}")
        self.step = step


@dataclass(frozen=True)
class MomentumSpec:
    """S(rho) = N(0, diag(exp(2 * log_sigma)))."""

    log_sigma: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "MomentumSpec":
        return cls(np.zeros(dim))

    @property
    def sigma(self):
        return ops.exp(self.log_sigma)

    @property
    def inv_mass(self):
        return ops.exp(-2.0 * self.log_sigma)


@dataclass(frozen=True)
class PhasePoint:
    z: np.ndarray
    rho: np.ndarray


@dataclass(frozen=True)
class LeapfrogConfig:
    step_size: float
    n_steps: int = 1

    def __post_init__(self):
        if isinstance(self.step_size, (int, float)) and not self.step_size >= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")


@dataclass(frozen=True)
class Bridge:
    """An unnormalized log-density with its position gradient."""

    log_density: Callable
    grad: Callable


def log_S(rho, S: MomentumSpec):
    u = rho * ops.exp(-S.log_sigma)
    return (-S.log_sigma - 0.5 * ops.LOG_2PI - 0.5 * u * u).sum(axis=-1)


def _guard(step: int, *arrays) -> None:
    for a in arrays:
        v = ops.value_of(a)
        if not np.all(np.isfinite(v)):
            raise DynamicsDivergence(step, "non-finite state")
        if np.any(np.abs(v) > DIVERGENCE_LIMIT):
            raise DynamicsDivergence(step, "state exceeded divergence limit")


def leapfrog(z, rho, step_size, n_steps: int, inv_mass, grad_fn, check: bool | None = None):
    """``n_steps`` leapfrog steps then momentum negation.

    Kinetic energy is rho^T Sigma^{-1} rho / 2, so positions move by
    ``step_size * inv_mass * rho``. ``check`` enables the divergence guard;
    by default it is on except under jax tracing, where guards cannot raise.
    """
    if check is None:
        check = ops.xp_of(z, rho, step_size) is not jnp
    half = 0.5 * step_size
    g = grad_fn(z)
    for i in range(n_steps):
        rho = rho + half * g
        z = z + step_size * inv_mass * rho
        g = grad_fn(z)
        rho = rho + half * g
        if check:
            _guard(i, z, rho, g)
    return z, -rho


def simulate_T(p: PhasePoint, cfg: LeapfrogConfig, S: MomentumSpec, grad_log_bridge) -> PhasePoint:
    z, rho = leapfrog(p.z, p.rho, cfg.step_size, cfg.n_steps, S.inv_mass, grad_log_bridge)
    return PhasePoint(z, rho)


def _check_eta(eta, allow_unit: bool) -> None:
    if isinstance(eta, (int, float, np.floating)):
        hi_ok = eta <= 1.0 if allow_unit else eta < 1.0
        if not (0.0 <= eta and hi_ok):
            raise ConfigError(f"damping coefficient {eta} outside [0, 1)")


def resample_momentum(rho, eta, S: MomentumSpec, xi, allow_unit: bool = False):
    """Partial refresh rho' = eta*rho + sqrt(1-eta^2)*sigma*xi.

    ``xi`` may be an array of standard normals or a numpy Generator. This
    kernel satisfies detailed balance with respect to S, so it is also its
    own reversal. Returns ``(rho_new, xi)``.
    """
    _check_eta(eta, allow_unit)
    if isinstance(xi, np.random.Generator):
        xi = xi.standard_normal(np.shape(rho))
    if isinstance(eta, (int, float, np.floating)):
        keep = math.sqrt(max(0.0, 1.0 - eta * eta))
    else:
        keep = ops.sqrt(1.0 - eta * eta)
    return eta * rho + keep * S.sigma * xi, xi


def _bridge_energy(bridge: Bridge, S: MomentumSpec, z, rho):
    return bridge.log_density(z) + log_S(rho, S)


def _accept(log_alpha, u):
    """Metropolis test; NaN proposals are rejected."""
    return ops.log(u) < log_alpha


def _select(acc, a, b):
    cond = acc[..., None] if np.ndim(acc) else acc
    return ops.where(cond, a, b)


def _step_trace(trace, name):
    if trace is not None:
        trace.append(name)


def corrected_T(p: PhasePoint, bridge: Bridge, cfg: LeapfrogConfig, S: MomentumSpec, eta,
                xi, u, allow_unit: bool = False, trace: list | None = None):
    """Refresh, simulate with accept-reject, reverse. Returns (point, accepted)."""
    _step_trace(trace, "resample")
    rho1, _ = resample_momentum(p.rho, eta, S, xi, allow_unit)
    z1 = p.z
    _step_trace(trace, "simulate_accept")
    z2, rho2 = leapfrog(z1, rho1, cfg.step_size, cfg.n_steps, S.inv_mass, bridge.grad)
    log_alpha = _bridge_energy(bridge, S, z2, rho2) - _bridge_energy(bridge, S, z1, rho1)
    acc = _accept(log_alpha, u)
    z3, rho3 = _select(acc, z2, z1), _select(acc, rho2, rho1)
    _step_trace(trace, "negate")
    return PhasePoint(z3, -rho3), acc


def corrected_U(p: PhasePoint, bridge: Bridge, cfg: LeapfrogConfig, S: MomentumSpec, eta,
                xi, u, allow_unit: bool = False, trace: list | None = None) -> PhasePoint:
    """Reversal of ``corrected_T``: the same three steps in mirrored order."""
    _step_trace(trace, "negate")
    z3, rho3 = p.z, -p.rho
    _step_trace(trace, "simulate_accept")
    z2, rho2 = leapfrog(z3, rho3, cfg.step_size, cfg.n_steps, S.inv_mass, bridge.grad)
    log_alpha = _bridge_energy(bridge, S, z2, rho2) - _bridge_energy(bridge, S, z3, rho3)
    acc = _accept(log_alpha, u)
    z1, rho1 = _select(acc, z2, z3), _select(acc, rho2, rho3)
    _step_trace(trace, "resample")
    rho0, _ = resample_momentum(rho1, eta, S, xi, allow_unit)
    return PhasePoint(z1, rho0)


def uncorrected_T(p: PhasePoint, bridge: Bridge, cfg: LeapfrogConfig, S: MomentumSpec, eta,
                  xi, allow_unit: bool = False):
    """Refresh, simulate, reverse; no accept-reject. Returns (point, rho_prime)."""
    rho1, _ = resample_momentum(p.rho, eta, S, xi, allow_unit)
    z2, rho2 = leapfrog(p.z, rho1, cfg.step_size, cfg.n_steps, S.inv_mass, bridge.grad)
    return PhasePoint(z2, -rho2), rho1


def uncorrected_U(p: PhasePoint, bridge: Bridge, cfg: LeapfrogConfig, S: MomentumSpec, eta,
                  xi, allow_unit: bool = False) -> PhasePoint:
    z1, rho1 = leapfrog(p.z, -p.rho, cfg.step_size, cfg.n_steps, S.inv_mass, bridge.grad)
    rho0, _ = resample_momentum(rho1, eta, S, xi, allow_unit)
    return PhasePoint(z1, rho0)
