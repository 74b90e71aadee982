"""Scalar reverse-mode differentiation and a central-difference checker.

The cost model is written against plain arithmetic, so the same code runs on
floats (fast evaluation) and on :class:`Var` nodes (gradients).  A ``Var``
records its parents together with the local partial derivative; ``backward``
replays the chain rule in reverse creation order.
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()

# Branch decisions (argmax picks, threshold tests) are appended here while a
# recording is active; fd_check uses them to spot non-smooth points.
_branch_log: list | None = None


def _log_branch(decision) -> None:
    if _branch_log is not None:
        _branch_log.append(decision)


@contextmanager
def record_branches():
    global _branch_log
    saved, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = saved


class Var:
    __slots__ = ("value", "parents", "grad", "uid")

    def __init__(self, value: float, parents: tuple = ()):
        self.value = float(value)
        self.parents = parents
        self.grad = 0.0
        self.uid = next(_ids)

    def __repr__(self) -> str:
        return f"Var({self.value!r})"

    def __add__(self, other):
        if isinstance(other, Var):
            return Var(self.value + other.value, ((self, 1.0), (other, 1.0)))
        return Var(self.value + other, ((self, 1.0),))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return Var(self.value - other.value, ((self, 1.0), (other, -1.0)))
        return Var(self.value - other, ((self, 1.0),))

    def __rsub__(self, other):
        return Var(other - self.value, ((self, -1.0),))

    def __neg__(self):
        return Var(-self.value, ((self, -1.0),))

    def __mul__(self, other):
        if isinstance(other, Var):
            return Var(self.value * other.value,
                       ((self, other.value), (other, self.value)))
        return Var(self.value * other, ((self, float(other)),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            inv = 1.0 / other.value
            out = self.value * inv
            return Var(out, ((self, inv), (other, -out * inv)))
        return Var(self.value / other, ((self, 1.0 / other),))

    def __rtruediv__(self, other):
        out = other / self.value
        return Var(out, ((self, -out / self.value),))

    def __pow__(self, exponent):
        if isinstance(exponent, Var):
            out = self.value ** exponent.value
            return Var(out, ((self, exponent.value * self.value ** (exponent.value - 1)),
                             (exponent, out * math.log(self.value))))
        return Var(self.value ** exponent,
                   ((self, exponent * self.value ** (exponent - 1)),))

    # Comparisons act on primal values; the outcome is logged as a branch.
    def __gt__(self, other):
        res = self.value > _val(other)
        _log_branch(res)
        return res

    def __lt__(self, other):
        res = self.value < _val(other)
        _log_branch(res)
        return res

    def __ge__(self, other):
        res = self.value >= _val(other)
        _log_branch(res)
        return res

    def __le__(self, other):
        res = self.value <= _val(other)
        _log_branch(res)
        return res

    __hash__ = object.__hash__

    def backward(self, seed: float = 1.0) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        order = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if node.uid in seen:
                continue
            seen.add(node.uid)
            order.append(node)
            for parent, _ in node.parents:
                if parent.uid not in seen:
                    stack.append(parent)
        order.sort(key=lambda n: n.uid, reverse=True)
        for node in order:
            node.grad = 0.0
        self.grad = seed
        for node in order:
            g = node.grad
            if g == 0.0:
                continue
            for parent, local in node.parents:
                parent.grad += g * local


def _val(x) -> float:
    return x.value if isinstance(x, Var) else x


def value(x) -> float:
    """Primal value of a Var or a plain number."""
    return x.value if isinstance(x, Var) else float(x)


def exp(x):
    if isinstance(x, Var):
        out = math.exp(x.value)
        return Var(out, ((x, out),))
    return math.exp(x)


def log(x):
    if isinstance(x, Var):
        return Var(math.log(x.value), ((x, 1.0 / x.value),))
    return math.log(x)


def sqrt(x):
    if isinstance(x, Var):
        out = math.sqrt(x.value)
        return Var(out, ((x, 0.5 / out),))
    return math.sqrt(x)


def maximum(items: Sequence):
    """Max over a sequence; gradient goes to the first maximal entry."""
    best = 0
    best_val = _val(items[0])
    for j in range(1, len(items)):
        v = _val(items[j])
        if v > best_val:
            best, best_val = j, v
    _log_branch(("max", best))
    return items[best]


def minimum(items: Sequence):
    best = 0
    best_val = _val(items[0])
    for j in range(1, len(items)):
        v = _val(items[j])
        if v < best_val:
            best, best_val = j, v
    _log_branch(("min", best))
    return items[best]


def relu(x):
    """max(x, 0) with zero slope at the hinge."""
    if _val(x) > 0:
        _log_branch(("relu", True))
        return x
    _log_branch(("relu", False))
    return 0.0


def vsum(items: Iterable):
    total = 0.0
    for x in items:
        total = total + x
    return total


def vprod(items: Iterable):
    total = 1.0
    for x in items:
        total = total * x
    return total


def softmax(logits: Sequence) -> list:
    shift = max(_val(z) for z in logits)
    exps = [exp(z - shift) for z in logits]
    denom = vsum(exps)
    return [e / denom for e in exps]


def grad(objective: Callable[[list], object], point: Sequence[float]) -> np.ndarray:
    """Gradient of a scalar objective at ``point`` by one reverse sweep."""
    leaves = [Var(x) for x in point]
    out = objective(leaves)
    if not isinstance(out, Var):
        return np.zeros(len(leaves))
    out.backward()
    return np.array([leaf.grad for leaf in leaves])


def value_and_grad(objective, point):
    leaves = [Var(x) for x in point]
    out = objective(leaves)
    if not isinstance(out, Var):
        return float(out), np.zeros(len(leaves))
    out.backward()
    return out.value, np.array([leaf.grad for leaf in leaves])


def fd_check(objective, point, h=None, rel_step=1e-4, atol=None):
    """Compare reverse-mode gradients with central differences.

    Returns ``(errors, excluded)``: per-coordinate relative errors and a
    boolean mask of coordinates whose +/-h probes take different branches
    (a max/min switch or threshold crossing lies inside the stencil).
    """
    point = np.asarray(point, dtype=float)
    with record_branches() as b_mid:
        f0, g = value_and_grad(objective, point)
    if atol is None:
        # Central differences carry roundoff of order eps*|f|/h, which swamps
        # partials that are exactly zero; below this floor they count as zero.
        atol = 1e-6 * max(1.0, abs(f0))
    errors = np.zeros(len(point))
    excluded = np.zeros(len(point), dtype=bool)
    for j in range(len(point)):
        step = h if h is not None else rel_step * max(abs(point[j]), 1e-12)
        hi, lo = point.copy(), point.copy()
        hi[j] += step
        lo[j] -= step
        with record_branches() as b_hi:
            f_hi = value(objective([Var(x) for x in hi]))
        with record_branches() as b_lo:
            f_lo = value(objective([Var(x) for x in lo]))
        if b_hi != b_mid or b_lo != b_mid:
            excluded[j] = True
        fd = (f_hi - f_lo) / (2.0 * step)
        errors[j] = abs(g[j] - fd) / max(abs(g[j]), abs(fd), atol)
    return errors, excluded


class Adam:
    """Adam over a flat numpy parameter vector."""

    def __init__(self, lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
