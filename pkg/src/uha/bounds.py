"""Annealed variational bounds on log Z.

Four estimators share one parameter container and one bridging path:

* plain ELBO (``uha_bound_sample`` with M=1 or ``iw_bound_sample`` with K=1)
* importance weighting, log-mean-exp of K weights
* Hamiltonian AIS with Metropolis-corrected kernels (not differentiable)
* uncorrected Hamiltonian annealing (UHA), differentiable end to end

Each estimator exists in two forms. The sequential form (``*_bound_sample``)
runs one draw on numpy floats or on the autodiff tape and reports per-bridge
increments. The batched form (:class:`BoundSampler`) runs many draws at once
under ``jax.jit`` and is what evaluation and training use. Both consume the
same seed-derived noise, so they agree draw for draw.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from . import ops, rng
from .autodiff import Tape, TapeValue
from .dynamics import (
    DIVERGENCE_LIMIT,
    Bridge,
    DynamicsDivergence,
    LeapfrogConfig,
    MomentumSpec,
    PhasePoint,
    corrected_T,
    log_S,
    uncorrected_T,
)
from .targets import MeanFieldGaussian, Target, gaussian_grad_log_density, gaussian_log_density

__all__ = [
    "GROUPS",
    "BridgeSchedule",
    "AnnealParams",
    "BoundRun",
    "Estimate",
    "BoundSampler",
    "realize_beta",
    "bridge_log_density",
    "uha_bound_sample",
    "uha_path",
    "hais_bound_sample",
    "iw_bound_sample",
    "estimate_bound",
    "pool_estimates",
]

GROUPS = ("q", "eps", "eta", "Sigma", "beta", "eps_of_beta", "psi_of_beta")

_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class BridgeSchedule:
    """Learnable annealing schedule.

    ``raw_beta`` has length M-1. ``affine_eps`` is (slope, intercept) and
    ``affine_psi`` stacks (loc slope, loc intercept, log-scale slope,
    log-scale intercept) as a (4, dim) array.
    """

    raw_beta: np.ndarray
    affine_eps: np.ndarray | None = None
    affine_psi: np.ndarray | None = None


@dataclass(frozen=True)
class AnnealParams:
    q: MeanFieldGaussian
    momentum: MomentumSpec
    raw_eps: float
    raw_eta: float
    schedule: BridgeSchedule
    eps_max: float = 0.5
    trainable: frozenset = frozenset()

    @classmethod
    def initial(cls, dim: int, K: int, eps: float = 0.05, eta: float = 0.5,
                q: MeanFieldGaussian | None = None, eps_max: float = 0.5,
                trainable=("q", "eps", "eta")) -> "AnnealParams":
        """Uniform beta grid, identity momentum covariance, given eps and eta."""
        if not 0 < eps < eps_max:
            raise ValueError(f"eps must lie in (0, {eps_max})")
        return cls(
            q=q if q is not None else MeanFieldGaussian.standard(dim),
            momentum=MomentumSpec.identity(dim),
            raw_eps=ops.logit(eps / eps_max),
            raw_eta=ops.logit(eta),
            schedule=BridgeSchedule(np.zeros(max(K - 1, 0))),
            eps_max=eps_max,
            trainable=frozenset(trainable),
        ).with_groups(trainable)

    @property
    def dim(self) -> int:
        return len(self.q.loc)

    @property
    def n_bridges(self) -> int:
        """M, the number of annealing steps (K = M likelihood evaluations)."""
        return len(self.schedule.raw_beta) + 1

    @property
    def eps(self):
        return self.eps_max * ops.sigmoid(self.raw_eps)

    @property
    def eta(self):
        return ops.sigmoid(self.raw_eta)

    @property
    def beta(self):
        return realize_beta(self.schedule.raw_beta)

    def with_groups(self, groups) -> "AnnealParams":
        """Materialize absent optional components for the selected groups.

        ``eps_of_beta`` starts at zero slope/intercept and ``psi_of_beta`` at
        zero slopes with intercepts equal to q, so both start out identical to
        the plain schedule.
        """
        groups = frozenset(groups)
        sched = self.schedule
        if "eps_of_beta" in groups and sched.affine_eps is None:
            sched = dataclasses.replace(sched, affine_eps=np.zeros(2))
        if "psi_of_beta" in groups and sched.affine_psi is None:
            d = self.dim
            psi = np.stack([np.zeros(d), np.asarray(self.q.loc, dtype=np.float64),
                            np.zeros(d), np.asarray(self.q.log_scale, dtype=np.float64)])
            sched = dataclasses.replace(sched, affine_psi=psi)
        return dataclasses.replace(self, schedule=sched, trainable=groups)

    def realized(self) -> dict:
        """Plain-float view of every realized quantity, for records."""
        out = {
            "q_loc": ops.value_of(self.q.loc).tolist(),
            "q_scale": np.exp(ops.value_of(self.q.log_scale)).tolist(),
            "eps": float(ops.value_of(self.eps)),
            "eta": float(ops.value_of(self.eta)),
            "sigma": np.exp(ops.value_of(self.momentum.log_sigma)).tolist(),
            "beta": ops.value_of(self.beta).tolist(),
        }
        if self.schedule.affine_eps is not None:
            out["eps_of_beta"] = ops.value_of(self.step_sizes()).tolist()
        if self.schedule.affine_psi is not None:
            out["psi"] = ops.value_of(self.schedule.affine_psi).tolist()
        return out

    def step_sizes(self, beta=None):
        """Step size for each beta_m (a broadcast scalar when eps(beta) is off)."""
        if beta is None:
            beta = self.beta
        if self.schedule.affine_eps is None:
            return self.eps + 0.0 * beta
        a = self.schedule.affine_eps
        return self.eps * ops.softplus(a[0] * beta + a[1]) / _LOG2

    def bridge_q(self, beta_m) -> MeanFieldGaussian:
        psi = self.schedule.affine_psi
        if psi is None:
            return self.q
        return MeanFieldGaussian(psi[0] * beta_m + psi[1], psi[2] * beta_m + psi[3])

    # serialization of the unconstrained state
    def to_dict(self) -> dict:
        s = self.schedule
        return {
            "q_loc": ops.value_of(self.q.loc).tolist(),
            "q_log_scale": ops.value_of(self.q.log_scale).tolist(),
            "log_sigma": ops.value_of(self.momentum.log_sigma).tolist(),
            "raw_eps": float(ops.value_of(self.raw_eps)),
            "raw_eta": float(ops.value_of(self.raw_eta)),
            "raw_beta": ops.value_of(s.raw_beta).tolist(),
            "affine_eps": None if s.affine_eps is None else ops.value_of(s.affine_eps).tolist(),
            "affine_psi": None if s.affine_psi is None else ops.value_of(s.affine_psi).tolist(),
            "eps_max": self.eps_max,
            "trainable": sorted(self.trainable),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnealParams":
        arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)  # noqa: E731
        return cls(
            q=MeanFieldGaussian(arr(d["q_loc"]), arr(d["q_log_scale"])),
            momentum=MomentumSpec(arr(d["log_sigma"])),
            raw_eps=float(d["raw_eps"]),
            raw_eta=float(d["raw_eta"]),
            schedule=BridgeSchedule(arr(d["raw_beta"]).reshape(-1), arr(d.get("affine_eps")),
                                    arr(d.get("affine_psi"))),
            eps_max=float(d.get("eps_max", 0.5)),
            trainable=frozenset(d.get("trainable", ())),
        )


for _cls, _data, _meta in [
    (MeanFieldGaussian, ["loc", "log_scale"], []),
    (MomentumSpec, ["log_sigma"], []),
    (BridgeSchedule, ["raw_beta", "affine_eps", "affine_psi"], []),
    (AnnealParams, ["q", "momentum", "raw_eps", "raw_eta", "schedule"], ["eps_max", "trainable"]),
]:
    jax.tree_util.register_dataclass(_cls, data_fields=_data, meta_fields=_meta)


def realize_beta(raw_beta):
    """beta_0 = 0 < beta_1 < ... < beta_M = 1 from M-1 unconstrained values.

    Increments are softmax(raw_beta ++ [0]); beta is their running sum.
    """
    logits = ops.concatenate([raw_beta, np.zeros(1)])
    if ops.xp_of(logits) is jnp:
        shift = jax.lax.stop_gradient(jnp.max(logits))
    else:
        shift = float(np.max(ops.value_of(logits)))
    w = ops.exp(logits - shift)
    inc = w / w.sum()
    inner = ops.cumsum(inc[:-1])
    return ops.concatenate([np.zeros(1), inner, np.ones(1)])


def _make_bridge(beta_m, params: AnnealParams, target: Target) -> Bridge:
    qb = params.bridge_q(beta_m)

    def log_density(z):
        return (1.0 - beta_m) * gaussian_log_density(z, qb) + beta_m * target.log_density(z)

    def grad(z):
        return (1.0 - beta_m) * gaussian_grad_log_density(z, qb) + beta_m * target.grad_log_density(z)

    return Bridge(log_density, grad)


def bridge_log_density(z, beta_m, params: AnnealParams, target: Target):
    """(1 - beta) log q(z) + beta log p(z), with q optionally following psi(beta)."""
    return _make_bridge(beta_m, params, target).log_density(z)


@dataclass
class BoundRun:
    value: float
    increments: np.ndarray
    log_q_init: float
    log_p_final: float
    seed: int
    accept_flags: np.ndarray | None = None
    diverged: bool = False
    z_final: np.ndarray | None = None
    tape_value: TapeValue | None = field(default=None, repr=False)
    tape_params: AnnealParams | None = field(default=None, repr=False)

    def reconstruct(self) -> float:
        total = -self.log_q_init
        for inc in self.increments:
            total = total + inc
        return total + self.log_p_final


# one annealing step per estimator, shared by the sequential and jitted paths

def _uha_transition(z, rho, xi, beta_m, eps_m, params: AnnealParams, target: Target):
    bridge = _make_bridge(beta_m, params, target)
    S = params.momentum
    p, rho_prime = uncorrected_T(PhasePoint(z, rho), bridge, LeapfrogConfig(eps_m), S,
                                 params.eta, xi)
    return p.z, p.rho, log_S(p.rho, S) - log_S(rho_prime, S)


def _hais_transition(z, rho, xi, u, beta_m, eps_m, params: AnnealParams, target: Target):
    bridge = _make_bridge(beta_m, params, target)
    S = params.momentum
    p, acc = corrected_T(PhasePoint(z, rho), bridge, LeapfrogConfig(eps_m), S, params.eta, xi, u)
    before = bridge.log_density(z) + log_S(rho, S)
    after = bridge.log_density(p.z) + log_S(p.rho, S)
    return p.z, p.rho, before - after, acc


def _lift_to_tape(params: AnnealParams, tape: Tape) -> AnnealParams:
    def lift(x):
        if x is None:
            return None
        if np.ndim(x) == 0:
            return tape.variable(float(x))
        return tape.variables(x)

    return jax.tree_util.tree_map(lift, params, is_leaf=lambda x: x is None)


def _initial_state(params: AnnealParams, noise: dict):
    z1 = params.q.loc + ops.exp(params.q.log_scale) * noise["xi_q"][0]
    rho1 = params.momentum.sigma * noise["xi_rho"]
    return z1, rho1


def uha_bound_sample(params: AnnealParams, target: Target, M: int | None = None, seed: int = 0,
                     on_tape: bool = False, noise: dict | None = None) -> BoundRun:
    """One draw of the UHA bound.

    Starts from -log q(z_1) (the log S(rho_1) term cancels), adds
    log S(rho_{m+1}) - log S(rho'_m) for each uncorrected transition, and
    finishes with log p(z_M). With ``on_tape`` every parameter becomes a tape
    variable; gradients come from ``gradient(run.tape_value, ...)`` on
    ``run.tape_params``.
    """
    M = params.n_bridges if M is None else M
    if M != params.n_bridges:
        raise ValueError(f"params carry {params.n_bridges} bridges, asked for {M}")
    if noise is None:
        noise = rng.noise_for_seed(seed, params.dim, M - 1)
    tape_params = None
    if on_tape:
        params = tape_params = _lift_to_tape(params, Tape())
    try:
        total, incs, log_q, log_p, z = uha_path(params, target, noise)
    except DynamicsDivergence as exc:
        incs, log_q = exc.partial
        return BoundRun(math.nan, np.array([float(ops.value_of(i)) for i in incs]),
                        float(ops.value_of(log_q)), math.nan, seed, diverged=True)
    return BoundRun(
        value=float(ops.value_of(total)),
        increments=np.array([float(ops.value_of(i)) for i in incs]),
        log_q_init=float(ops.value_of(log_q)),
        log_p_final=float(ops.value_of(log_p)),
        seed=seed,
        z_final=ops.value_of(z),
        tape_value=total if on_tape else None,
        tape_params=tape_params,
    )


def uha_path(params: AnnealParams, target: Target, noise: dict):
    """Sequential UHA draw on frozen noise: (total, increments, log q(z_1), log p(z_M), z_M).

    Works on floats and on tape values alike. A divergence is re-raised
    with ``partial = (increments so far, log q(z_1))`` attached.
    """
    z, rho = _initial_state(params, noise)
    log_q = gaussian_log_density(z, params.q)
    beta = params.beta
    eps = params.step_sizes(beta)
    total = -log_q
    incs = []
    try:
        for m in range(1, params.n_bridges):
            z, rho, inc = _uha_transition(z, rho, noise["xi_mom"][m - 1], beta[m], eps[m],
                                          params, target)
            total = total + inc
            incs.append(inc)
    except DynamicsDivergence as exc:
        exc.partial = (incs, log_q)
        raise
    log_p = target.log_density(z)
    return total + log_p, incs, log_q, log_p, z


def hais_bound_sample(params: AnnealParams, target: Target, M: int | None = None, seed: int = 0,
                      noise: dict | None = None) -> BoundRun:
    """One draw of the Hamiltonian AIS bound with accept-reject kernels."""
    M = params.n_bridges if M is None else M
    if M != params.n_bridges:
        raise ValueError(f"params carry {params.n_bridges} bridges, asked for {M}")
    if noise is None:
        noise = rng.noise_for_seed(seed, params.dim, M - 1)
    S = params.momentum
    z, rho = _initial_state(params, noise)
    log_q = float(gaussian_log_density(z, params.q) + log_S(rho, S))
    beta = params.beta
    eps = params.step_sizes(beta)
    total = -log_q
    incs, flags = [], []
    for m in range(1, M):
        z, rho, inc, acc = _hais_transition(z, rho, noise["xi_mom"][m - 1], noise["u_accept"][m - 1],
                                            beta[m], eps[m], params, target)
        total = total + float(inc)
        incs.append(float(inc))
        flags.append(bool(acc))
    log_p = float(target.log_density(z) + log_S(rho, S))
    total = total + log_p
    return BoundRun(total, np.array(incs), log_q, log_p, seed, accept_flags=np.array(flags, dtype=bool),
                    z_final=np.asarray(z))


def iw_bound_sample(q: MeanFieldGaussian, target: Target, K: int, seed: int = 0,
                    on_tape: bool = False, noise: dict | None = None):
    """log (1/K) sum_k p(z_k)/q(z_k) over K reparameterized draws.

    Returns a float, or ``(TapeValue, taped q)`` when ``on_tape``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if noise is None:
        noise = rng.noise_for_seed(seed, len(q.loc), 0, n_particles=K)
    if on_tape:
        tape = Tape()
        q = MeanFieldGaussian(tape.variables(q.loc), tape.variables(q.log_scale))
    z = q.loc + ops.exp(q.log_scale) * noise["xi_q"]
    log_w = target.log_density(z) - gaussian_log_density(z, q)
    val = ops.logsumexp(log_w, axis=-1) - math.log(K)
    return (val, q) if on_tape else float(val)


# batched evaluation under jit

class Estimate(NamedTuple):
    mean: float
    stderr: float
    n: int
    diverged: int = 0
    m2: float = 0.0

    @property
    def unreliable(self) -> bool:
        total = self.n + self.diverged
        return total > 0 and self.diverged > 0.01 * total

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, "diverged": self.diverged,
                "unreliable": self.unreliable}


def _uha_single(params: AnnealParams, target: Target, noise: dict):
    """jax version of one UHA draw: (value, max |z| along the path, z_M)."""
    z, rho = _initial_state(params, noise)
    log_q = gaussian_log_density(z, params.q)
    beta = params.beta
    eps = params.step_sizes(beta)

    def body(carry, xs):
        z, rho, total, zmax = carry
        xi, b, e = xs
        z, rho, inc = _uha_transition(z, rho, xi, b, e, params, target)
        return (z, rho, total + inc, jnp.maximum(zmax, jnp.max(jnp.abs(z)))), None

    carry = (z, rho, -log_q, jnp.max(jnp.abs(z)))
    if noise["xi_mom"].shape[0] > 0:
        carry, _ = jax.lax.scan(body, carry, (noise["xi_mom"], beta[1:-1], eps[1:-1]))
    z, rho, total, zmax = carry
    return total + target.log_density(z), zmax, z


def _hais_single(params: AnnealParams, target: Target, noise: dict):
    S = params.momentum
    z, rho = _initial_state(params, noise)
    total = -(gaussian_log_density(z, params.q) + log_S(rho, S))
    beta = params.beta
    eps = params.step_sizes(beta)

    def body(carry, xs):
        z, rho, total = carry
        xi, u, b, e = xs
        z, rho, inc, acc = _hais_transition(z, rho, xi, u, b, e, params, target)
        return (z, rho, total + inc), acc

    accs = jnp.zeros((0,), dtype=bool)
    if noise["xi_mom"].shape[0] > 0:
        (z, rho, total), accs = jax.lax.scan(
            body, (z, rho, total), (noise["xi_mom"], noise["u_accept"], beta[1:-1], eps[1:-1]))
    return total + target.log_density(z) + log_S(rho, S), accs, z


def _iw_single(params: AnnealParams, target: Target, noise: dict, K: int):
    q = params.q
    z = q.loc + jnp.exp(q.log_scale) * noise["xi_q"]
    log_w = target.log_density(z) - gaussian_log_density(z, q)
    return ops.logsumexp(log_w, axis=-1) - math.log(K)


_JIT_CACHE: dict = {}


class BoundSampler:
    """Batched draws of one estimator for fixed params and target.

    ``method`` is one of ``uha``, ``hais``, ``iw`` or ``plain_vi``; ``K`` is
    the number of likelihood evaluations (bridges for UHA/HAIS, particles for
    IW).
    """

    def __init__(self, method: str, params: AnnealParams, target: Target, K: int | None = None):
        if method not in ("uha", "hais", "iw", "plain_vi"):
            raise ValueError(f"unknown method {method!r}")
        self.method = method
        self.params = params
        self.target = target
        if method == "plain_vi":
            K = 1
        self.K = params.n_bridges if K is None else K
        if method in ("uha", "hais") and self.K != params.n_bridges:
            raise ValueError("K must equal the number of bridges carried by params")

    @property
    def n_transitions(self) -> int:
        return self.K - 1 if self.method in ("uha", "hais") else 0

    @property
    def n_particles(self) -> int:
        return self.K if self.method == "iw" else 1

    def _fn(self):
        key = (self.method, self.K, id(self.target), self.params.dim)
        hit = _JIT_CACHE.get(key)
        if hit is not None and hit[0] is self.target:
            return hit[1]
        target, method, K = self.target, self.method, self.K
        d, nt, npart = self.params.dim, self.n_transitions, self.n_particles

        def one(params, seed_key):
            noise = rng.draw_noise(seed_key, d, nt, npart)
            if method in ("uha", "plain_vi"):
                v, zmax, z = _uha_single(params, target, noise)
                return v, zmax, z, jnp.zeros((max(nt, 0),), dtype=bool)
            if method == "hais":
                v, accs, z = _hais_single(params, target, noise)
                return v, jnp.max(jnp.abs(z)), z, accs
            v = _iw_single(params, target, noise, K)
            return v, jnp.float64(0.0), noise["xi_q"][0], jnp.zeros((0,), dtype=bool)

        fn = jax.jit(jax.vmap(one, in_axes=(None, 0)))
        _JIT_CACHE[key] = (target, fn)
        return fn

    def chunk_size(self) -> int:
        work = self.params.dim * max(self.K, 1)
        return int(max(1, min(4096, 4_000_000 // work)))

    def batch(self, seeds: np.ndarray):
        """Values, divergence mask, accept flags and final states for ``seeds``."""
        seeds = np.asarray(seeds, dtype=np.uint64)
        fn = self._fn()
        keys = rng.key_from_seed(seeds)
        v, zmax, z, acc = fn(self.params, keys)
        v, zmax = np.asarray(v), np.asarray(zmax)
        diverged = ~np.isfinite(v) | (zmax > DIVERGENCE_LIMIT)
        return v, diverged, np.asarray(acc), np.asarray(z)

    def __call__(self, seed: int) -> BoundRun:
        if self.method in ("uha", "plain_vi"):
            return uha_bound_sample(self.params, self.target, seed=seed)
        if self.method == "hais":
            return hais_bound_sample(self.params, self.target, seed=seed)
        v = iw_bound_sample(self.params.q, self.target, self.K, seed=seed)
        return BoundRun(v, np.zeros(0), math.nan, math.nan, seed)


def _merge(a: Estimate, n: int, mean: float, m2: float) -> tuple[int, float, float]:
    """Chan et al. pairwise merge of (count, mean, M2)."""
    if n == 0:
        return a.n, a.mean, a.m2
    tot = a.n + n
    delta = mean - a.mean
    return tot, a.mean + delta * n / tot, a.m2 + m2 + delta * delta * a.n * n / tot


def _finish(n: int, mean: float, m2: float, diverged: int) -> Estimate:
    if n < 2:
        return Estimate(mean if n else math.nan, math.nan, n, diverged, m2)
    var = m2 / (n - 1)
    return Estimate(float(mean), float(math.sqrt(var / n)), n, diverged, float(m2))


def estimate_bound(sampler, n_draws: int, base_seed: int = 0) -> Estimate:
    """Mean and standard error over ``n_draws`` independently seeded draws.

    Draw ``i`` uses ``derive_seed(base_seed, ("draw", i))``. Diverged draws
    are excluded and counted. ``sampler`` is either a :class:`BoundSampler`
    or any callable mapping a seed to a float or :class:`BoundRun`.
    """
    if n_draws < 2:
        raise ValueError("n_draws must be >= 2")
    seeds = rng.derive_seeds(base_seed, "draw", np.arange(n_draws))
    acc = Estimate(0.0, 0.0, 0, 0, 0.0)
    diverged = 0
    if isinstance(sampler, BoundSampler):
        step = sampler.chunk_size()
        chunks = (sampler.batch(seeds[i:i + step])[:2] for i in range(0, n_draws, step))
    else:
        def single():
            for s in seeds:
                out = sampler(int(s))
                if isinstance(out, BoundRun):
                    yield np.array([out.value]), np.array([out.diverged or not math.isfinite(out.value)])
                else:
                    yield np.array([float(out)]), np.array([not math.isfinite(float(out))])
        chunks = single()
    for values, bad in chunks:
        good = values[~bad]
        diverged += int(bad.sum())
        if good.size:
            mean = float(good.mean())
            m2 = float(((good - mean) ** 2).sum())
            n, mu, m2 = _merge(acc, good.size, mean, m2)
            acc = Estimate(mu, 0.0, n, 0, m2)
    return _finish(acc.n, acc.mean, acc.m2, diverged)


def pool_estimates(estimates) -> Estimate:
    """Treat several estimates (e.g. one per seed) as one pooled sample."""
    acc = Estimate(0.0, 0.0, 0, 0, 0.0)
    diverged = 0
    for e in estimates:
        diverged += e.diverged
        if e.n:
            n, mu, m2 = _merge(acc, e.n, e.mean, e.m2)
            acc = Estimate(mu, 0.0, n, 0, m2)
    return _finish(acc.n, acc.mean, acc.m2, diverged)
