"""Gradient-based tuning of annealing parameters and the HAIS grid-search baseline."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from . import ops, rng
from .bounds import (
    GROUPS,
    AnnealParams,
    BoundSampler,
    Estimate,
    _iw_single,
    _uha_single,
    estimate_bound,
    uha_path,
)
from .autodiff import Tape, gradient
from .dynamics import DIVERGENCE_LIMIT, Bridge, LeapfrogConfig, MomentumSpec, PhasePoint, corrected_T
from .targets import Target

log = logging.getLogger(__name__)

__all__ = [
    "UsageError",
    "TrainingError",
    "CalibrationError",
    "flatten",
    "unflatten",
    "OptimizerState",
    "adam_step",
    "TrainConfig",
    "make_objective",
    "reparam_gradient",
    "frozen_objective",
    "step_noise",
    "tape_batch_gradient",
    "optimize",
    "OptimizeResult",
    "calibrate_step_size",
    "GridSpec",
    "grid_search_hais",
    "extrapolate_params",
    "ReferenceMoments",
    "moment_error",
    "long_run_hmc_moments",
]


class UsageError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


# flattening: q.loc, q.log_scale, raw_eps, raw_eta, log_sigma, raw_beta, affine_eps, affine_psi

def _components(params: AnnealParams):
    s = params.schedule
    return [
        ("q", "loc", params.q.loc),
        ("q", "log_scale", params.q.log_scale),
        ("eps", "raw_eps", params.raw_eps),
        ("eta", "raw_eta", params.raw_eta),
        ("Sigma", "log_sigma", params.momentum.log_sigma),
        ("beta", "raw_beta", s.raw_beta),
        ("eps_of_beta", "affine_eps", s.affine_eps),
        ("psi_of_beta", "affine_psi", s.affine_psi),
    ]


def _check_groups(params: AnnealParams, groups) -> frozenset:
    groups = frozenset(params.trainable if groups is None else groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise UsageError(f"unknown parameter groups {sorted(unknown)}")
    for group, name, value in _components(params):
        if group in groups and value is None:
            raise UsageError(f"group {group!r} selected but params carry no {name}")
    return groups


def flatten(params: AnnealParams, groups=None) -> np.ndarray:
    groups = _check_groups(params, groups)
    parts = [np.ravel(ops.value_of(v)) for g, _, v in _components(params) if g in groups]
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(vec, params: AnnealParams, groups=None) -> AnnealParams:
    """Inverse of :func:`flatten`; ``vec`` may be numpy, jax or a tape object array."""
    groups = _check_groups(params, groups)
    values = {}
    i = 0
    for group, name, value in _components(params):
        if group not in groups:
            continue
        shape = np.shape(value)
        n = int(np.prod(shape)) if shape else 1
        if i + n > len(vec):
            raise UsageError("vector too short for the selected groups")
        chunk = vec[i] if not shape else vec[i:i + n].reshape(shape)
        values[name] = chunk
        i += n
    if i != len(vec):
        raise UsageError(f"vector has {len(vec)} entries, groups need {i}")
    q = dataclasses.replace(params.q, **{k: values[k] for k in ("loc", "log_scale") if k in values})
    s = dataclasses.replace(params.schedule, **{k: values[k] for k in ("raw_beta", "affine_eps", "affine_psi")
                                                if k in values})
    mom = params.momentum if "log_sigma" not in values else MomentumSpec(values["log_sigma"])
    return dataclasses.replace(params, q=q, momentum=mom, schedule=s,
                               raw_eps=values.get("raw_eps", params.raw_eps),
                               raw_eta=values.get("raw_eta", params.raw_eta))


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 1e-3
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int, learning_rate: float = 1e-3) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), learning_rate)


def adam_step(state: OptimizerState, grad, x):
    """One bias-corrected Adam step in the ascent direction.

    A non-finite gradient leaves both state and parameters untouched.
    """
    grad = np.asarray(grad, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if grad.shape != x.shape or grad.shape != state.first_moment.shape:
        raise UsageError("gradient, parameters and optimizer state differ in length")
    if not np.all(np.isfinite(grad)):
        log.warning("skipping Adam step %d: non-finite gradient", state.step_count + 1)
        return dataclasses.replace(state, skipped=state.skipped + 1), x
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    x_new = x + state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return dataclasses.replace(state, first_moment=m, second_moment=v, step_count=t), x_new


@dataclass
class TrainConfig:
    method: str = "uha"
    K: int = 1
    steps: int = 5000
    batch_size: int = 16
    learning_rates: tuple = (1e-3, 1e-4, 1e-5)
    trainable: tuple = ("q", "eps", "eta")
    seed: int = 0
    eval_draws: int = 10_000

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise UsageError("steps and batch_size must be >= 1")
        if self.method not in ("uha", "iw", "plain_vi"):
            raise UsageError(f"method {self.method!r} cannot be trained by gradients")


def make_objective(method: str, template: AnnealParams, target: Target, K: int, groups,
                   batch_size: int):
    """Jitted ``(flat, step_seed) -> (mean bound, gradient)`` with frozen per-step noise.

    Draw ``b`` of a step uses the ``b``-th split of the step's key, so a
    batch of one reproduces a single frozen-noise gradient.
    """
    groups = _check_groups(template, groups)
    d = template.dim
    n_trans = K - 1 if method == "uha" else 0
    n_part = K if method == "iw" else 1

    def one(flat, key):
        params = unflatten(flat, template, groups)
        noise = rng.draw_noise(key, d, n_trans, n_part)
        if method == "iw":
            return _iw_single(params, target, noise, K)
        return _uha_single(params, target, noise)[0]

    def batch_mean(flat, step_key):
        keys = jax.random.split(step_key, batch_size)
        return jnp.mean(jax.vmap(one, in_axes=(None, 0))(flat, keys))

    vg = jax.jit(jax.value_and_grad(batch_mean))

    def objective(flat, step_seed: int):
        v, g = vg(jnp.asarray(flat), rng.key_from_seed(step_seed))
        return float(v), np.asarray(g)

    objective.value = jax.jit(batch_mean)
    return objective


def reparam_gradient(params: AnnealParams, target: Target, M: int, batch_size: int, seed: int,
                     groups=None, method: str = "uha"):
    """Unbiased reparameterization gradient of the mean bound w.r.t. trainables."""
    obj = make_objective(method, params, target, M, groups, batch_size)
    v, g = obj(flatten(params, groups), seed)
    if not math.isfinite(v) and not np.all(np.isfinite(g)):
        raise TrainingError("every draw in the batch diverged")
    return v, g


def step_noise(step_seed: int, batch_size: int, dim: int, n_transitions: int, n_particles: int = 1):
    """The per-draw noise a training step consumes, as numpy dicts."""
    keys = jax.random.split(rng.key_from_seed(step_seed), batch_size)
    return [{k: np.asarray(v) for k, v in rng.draw_noise(keys[b], dim, n_transitions, n_particles).items()}
            for b in range(batch_size)]


def frozen_objective(template: AnnealParams, target: Target, groups, noises):
    """Mean UHA bound over frozen noise as a function of the flat trainables.

    Accepts float vectors or tape object arrays, so it serves both
    :func:`check_gradient` and finite differences.
    """
    groups = _check_groups(template, groups)

    def f(vec):
        params = unflatten(vec, template, groups)
        total = 0.0
        for noise in noises:
            total = total + uha_path(params, target, noise)[0]
        return total / len(noises)

    return f


def tape_batch_gradient(params: AnnealParams, target: Target, step_seed: int, batch_size: int,
                        groups=None):
    """Same quantity as :func:`reparam_gradient`, computed on the scalar tape."""
    groups = _check_groups(params, groups)
    noises = step_noise(step_seed, batch_size, params.dim, params.n_bridges - 1)
    tape = Tape()
    leaves = tape.variables(flatten(params, groups))
    root = frozen_objective(params, target, groups, noises)(leaves)
    return float(root.value), np.asarray(gradient(root, list(leaves)))


@dataclass
class OptimizeResult:
    params: AnnealParams
    estimate: Estimate
    learning_rate: float | None
    initial_estimate: Estimate
    per_rate: list = field(default_factory=list)
    trace: dict = field(default_factory=dict)
    wall_clock: float = 0.0


def _evaluate(method, params, target, K, n, seed) -> Estimate:
    return estimate_bound(BoundSampler(method, params, target, K), n, rng.derive_seed(seed, ("eval", 0)))


def optimize(config: TrainConfig, params0: AnnealParams, target: Target) -> OptimizeResult:
    """Adam over each candidate learning rate; keep the best by a fresh evaluation.

    ``params0`` is evaluated too and wins if no trained candidate beats it, so
    the result is never worse than the starting point beyond noise.
    """
    t0 = time.perf_counter()
    groups = _check_groups(params0, config.trainable)
    K = config.K if config.method != "plain_vi" else 1
    obj = make_objective(config.method, params0, target, K, groups, config.batch_size)
    init_est = _evaluate(config.method, params0, target, K, config.eval_draws, config.seed)
    best = OptimizeResult(params0, init_est, None, init_est)
    per_rate, traces = [], {}
    for r_idx, lr in enumerate(config.learning_rates):
        run_seed = rng.derive_seed(config.seed, ("rate", r_idx))
        x = flatten(params0, groups)
        state = OptimizerState.zeros(x.size, lr)
        trace = []
        for t in range(config.steps):
            v, g = obj(x, rng.derive_seed(run_seed, ("step", t)))
            trace.append(v)
            state, x = adam_step(state, g, x)
        params = unflatten(x, params0, groups)
        est = _evaluate(config.method, params, target, K, config.eval_draws, config.seed)
        per_rate.append({"learning_rate": lr, "estimate": est.as_dict(), "skipped_steps": state.skipped,
                         "params": params.to_dict()})
        traces[str(lr)] = trace
        log.info("lr=%g: bound %.4f +- %.4f", lr, est.mean, est.stderr)
        if est.unreliable:
            continue
        if best.learning_rate is None and best.estimate.unreliable or est.mean > best.estimate.mean:
            best = OptimizeResult(params, est, lr, init_est)
    if all(r["estimate"]["unreliable"] for r in per_rate) and init_est.unreliable:
        raise TrainingError(f"every learning rate produced an unreliable evaluation: {per_rate}")
    best.per_rate = per_rate
    best.trace = traces
    best.wall_clock = time.perf_counter() - t0
    return best


# HAIS baseline

def _with_eps_eta(params: AnnealParams, eps: float, eta: float, eps_max: float) -> AnnealParams:
    eps = min(eps, eps_max * (1 - 1e-12))
    return dataclasses.replace(params, raw_eps=ops.logit(eps / eps_max), raw_eta=ops.logit(eta),
                               eps_max=eps_max)


def rejection_rate(params: AnnealParams, target: Target, pilot_draws: int, seed: int) -> float:
    """Mean rejection over all bridges of ``pilot_draws`` HAIS runs."""
    sampler = BoundSampler("hais", params, target)
    seeds = rng.derive_seeds(seed, "pilot", np.arange(pilot_draws))
    _, _, acc, _ = sampler.batch(seeds)
    return float(1.0 - acc.mean()) if acc.size else 0.0


def calibrate_step_size(target_rejection: float, eta: float, params: AnnealParams, target: Target,
                        M: int | None = None, pilot_draws: int = 64, seed: int = 0,
                        eps_lo: float = 1e-5, eps_hi: float | None = None,
                        tol: float = 0.02, max_iter: int = 30) -> tuple[float, float]:
    """Bisect (in log space) for the step size whose HAIS rejection hits the target.

    All probes share pilot seeds. Returns ``(eps, measured_rejection)``.
    """
    if not 0.0 < target_rejection < 1.0:
        raise UsageError("target rejection must lie in (0, 1)")
    if M is not None and M != params.n_bridges:
        raise UsageError("M disagrees with the schedule carried by params")
    eps_hi = params.eps_max if eps_hi is None else eps_hi
    cap = max(params.eps_max, eps_hi) * (1 + 1e-9)

    def rate(eps):
        return rejection_rate(_with_eps_eta(params, eps, eta, cap), target, pilot_draws, seed)

    lo, hi = eps_lo, eps_hi
    r_lo = rate(lo)
    if r_lo >= target_rejection - tol:
        return lo, r_lo
    r_hi = rate(hi)
    if r_hi <= target_rejection - tol:
        raise CalibrationError(f"rejection {r_hi:.3f} at eps={hi} never reaches {target_rejection}")
    eps, r = hi, r_hi
    for _ in range(max_iter):
        eps = math.sqrt(lo * hi)
        r = rate(eps)
        if abs(r - target_rejection) <= tol:
            break
        if r < target_rejection:
            lo = eps
        else:
            hi = eps
    return eps, r


@dataclass(frozen=True)
class GridSpec:
    etas: tuple = (0.5, 0.9, 0.99)
    target_rejection_rates: tuple = (0.05, 0.25, 0.5)

    def __post_init__(self):
        if not all(0.0 < r < 1.0 for r in self.target_rejection_rates):
            raise UsageError("rejection targets must lie in (0, 1)")


def grid_search_hais(grid: GridSpec, params: AnnealParams, target: Target, M: int | None = None,
                     eval_draws: int = 10_000, pilot_draws: int = 64, seed: int = 0,
                     eps_hi: float = 4.0) -> dict:
    """Calibrate eps for every (rejection target, eta) cell and evaluate it.

    HAIS needs no cap for stability, so calibration may search up to
    ``eps_hi``. Failed cells are recorded and skipped.
    """
    cap = max(eps_hi, params.eps_max) * (1 + 1e-9)
    cells = []
    best = None
    for i, rej in enumerate(grid.target_rejection_rates):
        for j, eta in enumerate(grid.etas):
            cell = {"target_rejection": rej, "eta": eta}
            try:
                eps, measured = calibrate_step_size(rej, eta, params, target, M, pilot_draws,
                                                    rng.derive_seed(seed, ("calibrate", 3 * i + j)),
                                                    eps_hi=eps_hi)
            except CalibrationError as exc:
                cell.update(status="failed", error=str(exc))
                cells.append(cell)
                continue
            p = _with_eps_eta(params, eps, eta, cap)
            est = _evaluate("hais", p, target, p.n_bridges, eval_draws, seed)
            cell.update(status="ok", eps=eps, measured_rejection=measured, estimate=est.as_dict())
            cells.append(cell)
            if best is None or est.mean > best[2].mean:
                best = (eps, eta, est, p)
    if best is None:
        raise CalibrationError("every grid cell failed to calibrate")
    return {"eps": best[0], "eta": best[1], "estimate": best[2], "params": best[3], "cells": cells}


def extrapolate_params(params: AnnealParams, K1: int) -> AnnealParams:
    """Carry parameters tuned with K2 = ``params.n_bridges`` bridges over to K1.

    The step size scales by log K2 / log K1 and beta is resampled at k/K1
    through the piecewise-linear map through (k/K2, beta_k). Everything else
    is copied unchanged.
    """
    K2 = params.n_bridges
    if K1 < 2 or K2 < 2:
        raise UsageError("extrapolation needs K1, K2 >= 2")
    eps = float(ops.value_of(params.eps)) * math.log(K2) / math.log(K1)
    if eps >= params.eps_max:
        log.warning("extrapolated eps %.4g clipped below cap %.4g", eps, params.eps_max)
        eps = params.eps_max * (1 - 1e-9)
    beta2 = ops.value_of(params.beta)
    beta1 = np.interp(np.arange(K1 + 1) / K1, np.arange(K2 + 1) / K2, beta2)
    beta1[0], beta1[-1] = 0.0, 1.0
    inc = np.diff(beta1)
    raw_beta = np.log(inc[:-1]) - np.log(inc[-1])
    if K1 == K2:
        raw_beta = np.array(ops.value_of(params.schedule.raw_beta), dtype=np.float64)
    sched = dataclasses.replace(params.schedule, raw_beta=raw_beta)
    return dataclasses.replace(params, raw_eps=ops.logit(eps / params.eps_max), schedule=sched)


# posterior moment diagnostics

@dataclass(frozen=True)
class ReferenceMoments:
    mean: np.ndarray
    var_diag: np.ndarray
    source: str = ""

    def checksum(self) -> str:
        payload = json.dumps({"mean": [float(v) for v in self.mean],
                              "var_diag": [float(v) for v in self.var_diag],
                              "source": self.source}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps({"mean": [float(v) for v in self.mean],
                           "var_diag": [float(v) for v in self.var_diag],
                           "source": self.source, "checksum": self.checksum()})

    @classmethod
    def from_json(cls, text: str) -> "ReferenceMoments":
        d = json.loads(text)
        ref = cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["var_diag"], dtype=np.float64),
                  d.get("source", ""))
        if d.get("checksum") != ref.checksum():
            raise UsageError("reference moments checksum mismatch")
        return ref

    @classmethod
    def from_target(cls, target: Target) -> "ReferenceMoments":
        if target.known_moments is None:
            raise UsageError("target has no analytic moments; supply a reference file")
        mean, var = target.known_moments
        return cls(np.asarray(mean), np.asarray(var), "analytic")


def final_states(params: AnnealParams, target: Target, n_samples: int, seed: int,
                 method: str = "uha") -> np.ndarray:
    """z_M from ``n_samples`` forward annealing runs."""
    sampler = BoundSampler(method, params, target)
    seeds = rng.derive_seeds(seed, "moment", np.arange(n_samples))
    step = sampler.chunk_size()
    out = []
    for i in range(0, n_samples, step):
        _, bad, _, z = sampler.batch(seeds[i:i + step])
        out.append(z[~bad])
    return np.concatenate(out)


def moment_error(params: AnnealParams, target: Target, M: int | None, n_samples: int,
                 reference: ReferenceMoments | None = None, seed: int = 0,
                 samples: np.ndarray | None = None) -> tuple[float, float]:
    """Mean absolute error of the sample mean and per-coordinate variance."""
    if reference is None:
        reference = ReferenceMoments.from_target(target)
    if samples is None:
        if M is not None and M != params.n_bridges:
            raise UsageError("M disagrees with the schedule carried by params")
        samples = final_states(params, target, n_samples, seed)
    mean = samples.mean(axis=0)
    var = samples.var(axis=0)
    return (float(np.mean(np.abs(mean - reference.mean))),
            float(np.mean(np.abs(var - reference.var_diag))))


def long_run_hmc_moments(target: Target, n_chains: int = 64, n_steps: int = 5000, burn_in: int = 1000,
                         step_size: float = 0.1, n_leapfrog: int = 10, seed: int = 0) -> ReferenceMoments:
    """Reference moments from parallel corrected-HMC chains targeting p itself."""
    d = target.dim
    S = MomentumSpec.identity(d)
    bridge = Bridge(target.log_density, target.grad_log_density)
    cfg = LeapfrogConfig(step_size, n_leapfrog)

    @jax.jit
    def step(z, key):
        k1, k2 = jax.random.split(key)
        xi = rng.normal(k1, z.shape)
        u = rng.uniform(k2, (z.shape[0],))
        p, _ = corrected_T(PhasePoint(z, jnp.zeros_like(z)), bridge, cfg, S, 0.0, xi, u)
        return p.z

    key = rng.key_from_seed(seed)
    z = jnp.zeros((n_chains, d))
    total = np.zeros(d)
    total_sq = np.zeros(d)
    count = 0
    for t in range(n_steps):
        z = step(z, jax.random.fold_in(key, t))
        if t >= burn_in:
            zn = np.asarray(z)
            total += zn.sum(0)
            total_sq += (zn * zn).sum(0)
            count += n_chains
    mean = total / count
    return ReferenceMoments(mean, total_sq / count - mean ** 2,
                            f"corrected HMC: {n_chains} chains x {n_steps} steps, eps={step_size}, "
                            f"L={n_leapfrog}, seed={seed}")
