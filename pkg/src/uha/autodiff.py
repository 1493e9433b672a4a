"""Scalar reverse-mode automatic differentiation on a per-evaluation tape.

A :class:`Tape` is an append-only record of scalar operations. Every
:class:`TapeValue` produced by an operation stores its node index; parents
always precede children, so a single backward sweep over the node list
yields exact gradients.

TapeValues behave like floats and can be placed in numpy ``object`` arrays,
which is how the vectorized sampler code runs on the tape: numpy's object
loops dispatch ``+``, ``*`` and the ``exp``/``log``/``sqrt``/``tanh`` methods
element by element.
"""
from __future__ import annotations

import math
from numbers import Real
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "TapeValue",
    "TapeDomainError",
    "TapeUsageError",
    "GradientCheckFailure",
    "gradient",
    "check_gradient",
    "lgamma",
]


class TapeDomainError(ArithmeticError):
    """Raised when a primitive is evaluated outside its domain."""

    def __init__(self, op: str, node: int, value: float):
        super().__init__(f"{op} undefined at {value!r} (node {node})")
        self.op = op
        self.node = node
        self.value = value


class TapeUsageError(ValueError):
    pass


class GradientCheckFailure(ArithmeticError):
    def __init__(self, coordinate: int, message: str):
        super().__init__(f"coordinate {coordinate}: {message}")
        self.coordinate = coordinate


def lgamma(x: float) -> float:
    """Log-gamma for constants only; it is never recorded on a tape."""
    return math.lgamma(x)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


# Forward rules used both when recording and when replaying. Each takes the
# parent values and the node constant.
_FORWARD: dict[str, Callable] = {
    "add": lambda v, c: v[0] + v[1],
    "sub": lambda v, c: v[0] - v[1],
    "mul": lambda v, c: v[0] * v[1],
    "div": lambda v, c: v[0] / v[1],
    "addc": lambda v, c: v[0] + c,
    "subc": lambda v, c: v[0] - c,
    "rsubc": lambda v, c: c - v[0],
    "mulc": lambda v, c: v[0] * c,
    "divc": lambda v, c: v[0] / c,
    "rdivc": lambda v, c: c / v[0],
    "neg": lambda v, c: -v[0],
    "exp": lambda v, c: math.exp(v[0]),
    "log": lambda v, c: math.log(v[0]),
    "sqrt": lambda v, c: math.sqrt(v[0]),
    "tanh": lambda v, c: math.tanh(v[0]),
    "sigmoid": lambda v, c: _sigmoid(v[0]),
    "softplus": lambda v, c: _softplus(v[0]),
    "powc": lambda v, c: v[0] ** c,
    "sum": lambda v, c: math.fsum(v) if c else sum(v),
    "dot": lambda v, c: sum(a * b for a, b in zip(v, c)),
}


class Tape:
    """Append-only list of scalar nodes in topological order."""

    __slots__ = ("kinds", "parents", "partials", "consts", "values")

    def __init__(self) -> None:
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []
        self.consts: list[object] = []
        self.values: list[float] = []

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, kind, parents, partials, value, const=None) -> "TapeValue":
        idx = len(self.values)
        self.kinds.append(kind)
        self.parents.append(parents)
        self.partials.append(partials)
        self.consts.append(const)
        self.values.append(value)
        return TapeValue(self, idx, value)

    def variable(self, value: float) -> "TapeValue":
        return self._push("leaf", (), (), float(value))

    def variables(self, values) -> np.ndarray:
        """Register an array of input variables; returns an object array."""
        flat = np.asarray(values, dtype=np.float64)
        out = np.empty(flat.shape, dtype=object)
        for i, v in np.ndenumerate(flat):
            out[i] = self.variable(float(v))
        return out

    def replay(self, leaves: dict[int, float] | None = None) -> list[float]:
        """Recompute every node from the leaves (optionally with new leaf values)."""
        vals: list[float] = []
        for idx, kind in enumerate(self.kinds):
            if kind == "leaf":
                vals.append(self.values[idx] if leaves is None else leaves.get(idx, self.values[idx]))
            else:
                pv = [vals[p] for p in self.parents[idx]]
                vals.append(_FORWARD[kind](pv, self.consts[idx]))
        return vals


def _is_const(x) -> bool:
    return isinstance(x, Real) and not isinstance(x, bool) or isinstance(x, np.floating)


class TapeValue:
    """A float recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value: float):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self) -> str:
        return f"TapeValue({self.value!r}, node={self.index})"

    def __float__(self) -> float:
        return float(self.value)

    # comparisons act on values; they are used only for shifts and guards
    def __lt__(self, other):
        return self.value < float(other)

    def __le__(self, other):
        return self.value <= float(other)

    def __gt__(self, other):
        return self.value > float(other)

    def __ge__(self, other):
        return self.value >= float(other)

    def _binary(self, other, kind, partials_fn, ckind, cpartial, cfwd):
        if isinstance(other, TapeValue):
            if other.tape is not self.tape:
                raise TapeUsageError("operands live on different tapes")
            a, b = self.value, other.value
            value = _FORWARD[kind]([a, b], None)
            return self.tape._push(kind, (self.index, other.index), partials_fn(a, b), value)
        if _is_const(other):
            c = float(other)
            value = cfwd(self.value, c)
            return self.tape._push(ckind, (self.index,), (cpartial(self.value, c),), value, c)
        return NotImplemented

    def __add__(self, other):
        return self._binary(other, "add", lambda a, b: (1.0, 1.0), "addc",
                            lambda a, c: 1.0, lambda a, c: a + c)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return self._binary(other, "sub", lambda a, b: (1.0, -1.0), "subc",
                            lambda a, c: 1.0, lambda a, c: a - c)

    def __rsub__(self, other):
        if _is_const(other):
            c = float(other)
            return self.tape._push("rsubc", (self.index,), (-1.0,), c - self.value, c)
        return NotImplemented

    def __mul__(self, other):
        return self._binary(other, "mul", lambda a, b: (b, a), "mulc",
                            lambda a, c: c, lambda a, c: a * c)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, TapeValue) and other.value == 0.0:
            raise TapeDomainError("div", other.index, 0.0)
        if _is_const(other) and float(other) == 0.0:
            raise TapeDomainError("div", self.index, 0.0)
        return self._binary(other, "div", lambda a, b: (1.0 / b, -a / (b * b)), "divc",
                            lambda a, c: 1.0 / c, lambda a, c: a / c)

    def __rtruediv__(self, other):
        if _is_const(other):
            if self.value == 0.0:
                raise TapeDomainError("div", self.index, 0.0)
            c = float(other)
            return self.tape._push("rdivc", (self.index,), (-c / (self.value * self.value),),
                                   c / self.value, c)
        return NotImplemented

    def __neg__(self):
        return self.tape._push("neg", (self.index,), (-1.0,), -self.value)

    def __pos__(self):
        return self

    def __pow__(self, c):
        if not _is_const(c):
            return NotImplemented
        c = float(c)
        a = self.value
        if a <= 0.0 and c != int(c):
            raise TapeDomainError("pow", self.index, a)
        if a == 0.0 and c < 1.0:
            raise TapeDomainError("pow", self.index, a)
        return self.tape._push("powc", (self.index,), (c * a ** (c - 1.0),), a ** c, c)

    # unary primitives; numpy object loops call these by name
    def exp(self):
        v = math.exp(self.value)
        return self.tape._push("exp", (self.index,), (v,), v)

    def log(self):
        if self.value <= 0.0:
            raise TapeDomainError("log", self.index, self.value)
        return self.tape._push("log", (self.index,), (1.0 / self.value,), math.log(self.value))

    def sqrt(self):
        if self.value <= 0.0:
            raise TapeDomainError("sqrt", self.index, self.value)
        v = math.sqrt(self.value)
        return self.tape._push("sqrt", (self.index,), (0.5 / v,), v)

    def tanh(self):
        v = math.tanh(self.value)
        return self.tape._push("tanh", (self.index,), (1.0 - v * v,), v)

    def sigmoid(self):
        s = _sigmoid(self.value)
        return self.tape._push("sigmoid", (self.index,), (s * (1.0 - s),), s)

    def softplus(self):
        return self.tape._push("softplus", (self.index,), (_sigmoid(self.value),),
                               _softplus(self.value))


def tape_sum(items: Sequence) -> TapeValue | float:
    """Sum as a single n-ary node (cheaper than a chain of adds)."""
    tvs = [x for x in items if isinstance(x, TapeValue)]
    if not tvs:
        return float(sum(float(x) for x in items))
    tape = tvs[0].tape
    const = sum(float(x) for x in items if not isinstance(x, TapeValue))
    node = tape._push("sum", tuple(x.index for x in tvs), (1.0,) * len(tvs),
                      sum(x.value for x in tvs), False)
    return node + const if const != 0.0 else node


def tape_dot(items: Sequence[TapeValue], weights: Sequence[float]) -> TapeValue:
    tape = items[0].tape
    w = tuple(float(c) for c in weights)
    value = sum(a.value * b for a, b in zip(items, w))
    return tape._push("dot", tuple(x.index for x in items), w, value, w)


def gradient(root: TapeValue, leaves: Sequence[TapeValue]) -> list[float]:
    """d root / d leaf for each leaf, by one reverse sweep."""
    tape = root.tape
    for leaf in leaves:
        if not isinstance(leaf, TapeValue) or leaf.tape is not tape:
            raise TapeUsageError("leaf is not on the root's tape")
    adj = [0.0] * (root.index + 1)
    adj[root.index] = 1.0
    parents, partials = tape.parents, tape.partials
    for i in range(root.index, -1, -1):
        a = adj[i]
        if a == 0.0:
            continue
        for p, d in zip(parents[i], partials[i]):
            adj[p] += a * d
    return [adj[leaf.index] if leaf.index <= root.index else 0.0 for leaf in leaves]


def check_gradient(f: Callable, x, step: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps a 1-d array (floats, or TapeValues in an object array) to a
    scalar and must be deterministic. Returns
    ``max_i |ad_i - fd_i| / (|fd_i| + 1e-10)``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    tape = Tape()
    leaves = tape.variables(x)
    root = f(leaves)
    if not isinstance(root, TapeValue):
        raise TapeUsageError("f did not produce a taped value")
    ad = np.asarray(gradient(root, list(leaves)))
    worst = 0.0
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        fp, fm = float(f(xp)), float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradientCheckFailure(i, "non-finite objective at perturbed point")
        fd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(ad[i] - fd) / (abs(fd) + 1e-10))
    return worst
