"""Array-namespace dispatch shared by the numpy, jax and tape code paths.

Sampler code is written once against these helpers. Inputs may be float64
numpy arrays, jax arrays (possibly tracers under ``jit``/``grad``), or numpy
object arrays holding :class:`~uha.autodiff.TapeValue` scalars.
"""
from __future__ import annotations

import math

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp as _jax_logsumexp

from .autodiff import TapeValue, _sigmoid, _softplus

LOG_2PI = math.log(2.0 * math.pi)

TAPE = "tape"


def xp_of(*xs):
    """Pick the namespace for a mix of operands: jax wins, then tape, then numpy."""
    tape = False
    for x in xs:
        if isinstance(x, (jax.Array, jax.core.Tracer)):
            return jnp
        if isinstance(x, TapeValue) or (isinstance(x, np.ndarray) and x.dtype == object):
            tape = True
    return TAPE if tape else np


def on_tape(*xs) -> bool:
    return xp_of(*xs) is TAPE


def _elementwise(fn):
    return np.frompyfunc(fn, 1, 1)


_tape_softplus = _elementwise(lambda v: v.softplus() if isinstance(v, TapeValue) else _softplus(float(v)))
_tape_sigmoid = _elementwise(lambda v: v.sigmoid() if isinstance(v, TapeValue) else _sigmoid(float(v)))
# object arrays may mix TapeValues with plain floats
_tape_exp = _elementwise(lambda v: v.exp() if isinstance(v, TapeValue) else math.exp(v))
_tape_log = _elementwise(lambda v: v.log() if isinstance(v, TapeValue) else math.log(v))
_tape_sqrt = _elementwise(lambda v: v.sqrt() if isinstance(v, TapeValue) else math.sqrt(v))


def exp(x):
    xp = xp_of(x)
    return _tape_exp(x) if xp is TAPE else xp.exp(x)


def log(x):
    xp = xp_of(x)
    return _tape_log(x) if xp is TAPE else xp.log(x)


def sqrt(x):
    xp = xp_of(x)
    return _tape_sqrt(x) if xp is TAPE else xp.sqrt(x)


def softplus(x):
    xp = xp_of(x)
    if xp is TAPE:
        return _tape_softplus(x)
    if xp is jnp:
        return jax.nn.softplus(x)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    xp = xp_of(x)
    if xp is TAPE:
        return _tape_sigmoid(x)
    if xp is jnp:
        return jax.nn.sigmoid(x)
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def log_sigmoid(x):
    return -softplus(-x)


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def logsumexp(x, axis: int = -1):
    """Max-shifted log-sum-exp. On the tape the shift is a constant."""
    xp = xp_of(x)
    if xp is jnp:
        return _jax_logsumexp(x, axis=axis)
    if xp is TAPE:
        vals = np.vectorize(float, otypes=[np.float64])(x)
        m = np.max(vals, axis=axis, keepdims=True)
        s = np.sum(exp(x - m), axis=axis)
        return log(s) + np.squeeze(m, axis=axis)
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.sum(np.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)


def cumsum(x, axis: int = -1):
    xp = xp_of(x)
    return np.cumsum(x, axis=axis) if xp is TAPE else xp.cumsum(x, axis=axis)


def concatenate(xs, axis: int = -1):
    xp = xp_of(*xs)
    if xp is TAPE:
        return np.concatenate([np.asarray(a, dtype=object) for a in xs], axis=axis)
    return xp.concatenate(xs, axis=axis)


def stack(xs, axis: int = 0):
    xp = xp_of(*xs)
    if xp is TAPE:
        return np.stack([np.asarray(a, dtype=object) for a in xs], axis=axis)
    return xp.stack(xs, axis=axis)


def where(cond, a, b):
    xp = xp_of(cond, a, b)
    return np.where(cond, a, b) if xp is TAPE else xp.where(cond, a, b)


def value_of(x):
    """Plain float64 view of any operand (TapeValues are unwrapped)."""
    if xp_of(x) is TAPE:
        return np.vectorize(float, otypes=[np.float64])(x)
    return np.asarray(x, dtype=np.float64)
