"""Seed derivation and reproducible Gaussian/uniform noise.

Seeds are 64-bit integers mixed with splitmix64. Each draw's seed becomes a
threefry-2x32 key (counter-based, splittable) and standard normals come from
Box-Muller on 64-bit uniforms, so every draw is replayable from its seed
alone regardless of how draws are batched.
"""
from __future__ import annotations

import math
from typing import Iterable

import jax
import jax.numpy as jnp
import numpy as np

RNG_ALGORITHM = "threefry2x32+boxmuller/splitmix64-derive"

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def derive_seed(base: int, *labels: tuple[str, int]) -> int:
    """Mix ``base`` with (kind, index) labels; order-sensitive and platform-stable."""
    h = splitmix64(int(base) & _MASK)
    for kind, index in labels:
        h = splitmix64(h ^ _fnv1a(kind))
        h = splitmix64(h ^ (int(index) & _MASK))
    return h


def _splitmix64_np(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seeds(base: int, kind: str, indices: Iterable[int], prefix: tuple = ()) -> np.ndarray:
    """Vectorized ``derive_seed(base, *prefix, (kind, i))`` for many ``i``."""
    h = derive_seed(base, *prefix)
    idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices,
                     dtype=np.uint64)
    z = _splitmix64_np(np.full(idx.shape, h ^ _fnv1a(kind), dtype=np.uint64))
    return _splitmix64_np(z ^ idx)


def key_from_seed(seed):
    """Threefry key carrying all 64 seed bits (works on scalars and uint64 arrays)."""
    seed = np.asarray(seed, dtype=np.uint64)
    hi = (seed >> np.uint64(32)).astype(np.uint32)
    lo = (seed & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    return jnp.stack([jnp.asarray(hi), jnp.asarray(lo)], axis=-1)


def uniform(key, shape) -> jax.Array:
    return jax.random.uniform(key, shape, dtype=jnp.float64)


def normal(key, shape) -> jax.Array:
    """Box-Muller standard normals."""
    n = math.prod(shape)
    half = (n + 1) // 2
    u = jax.random.uniform(key, (2, half), dtype=jnp.float64)
    r = jnp.sqrt(-2.0 * jnp.log1p(-u[0]))
    theta = 2.0 * jnp.pi * u[1]
    z = jnp.concatenate([r * jnp.cos(theta), r * jnp.sin(theta)])[:n]
    return z.reshape(shape)


# fold-in tags for each noise role in a bound draw
Q_NOISE, RHO_NOISE, MOMENTUM_NOISE, ACCEPT_NOISE = 0, 1, 2, 3


def draw_noise(key, dim: int, n_bridges: int, n_particles: int = 1) -> dict:
    """All randomness consumed by one bound draw.

    ``xi_q`` has shape (n_particles, dim); the UHA/HAIS samplers use row 0,
    importance weighting uses all rows, so matched seeds share ``z_1``.
    """
    return {
        "xi_q": normal(jax.random.fold_in(key, Q_NOISE), (n_particles, dim)),
        "xi_rho": normal(jax.random.fold_in(key, RHO_NOISE), (dim,)),
        "xi_mom": normal(jax.random.fold_in(key, MOMENTUM_NOISE), (n_bridges, dim)),
        "u_accept": uniform(jax.random.fold_in(key, ACCEPT_NOISE), (n_bridges,)),
    }


def noise_for_seed(seed: int, dim: int, n_bridges: int, n_particles: int = 1) -> dict:
    """Numpy copy of the noise for one draw, for the sequential code paths."""
    out = draw_noise(key_from_seed(seed), dim, n_bridges, n_particles)
    return {k: np.asarray(v) for k, v in out.items()}
