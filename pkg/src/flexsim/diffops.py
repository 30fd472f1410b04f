"""Finite-difference stencils on dimensionless node offsets.

A stencil with nodes ``c_j`` and weights ``w_j`` estimates a scaled derivative

    sum_j w_j * u(t0 + c_j * h)  ~  h**i * u^(i)(t0)

so weights never depend on ``h``.  Weights come from the Taylor-moment system
``sum_j w_j c_j**m / m! = delta(m, i)``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import InvalidStencilError, StencilRangeError

MOMENT_TOL = 1e-12


@dataclass(frozen=True)
class StencilOperator:
    derivative_order: int
    nodes: tuple[float, ...]
    weights: tuple[float, ...]
    accuracy_order: int

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def center_index(self) -> int | None:
        """Index of the node at offset zero, or None for center-free stencils."""
        for j, c in enumerate(self.nodes):
            if c == 0.0:
                return j
        return None

    def moment_residual(self, m: int) -> float:
        c = np.asarray(self.nodes)
        w = np.asarray(self.weights)
        target = 1.0 if m == self.derivative_order else 0.0
        return float(np.sum(w * c**m) / math.factorial(m) - target)


def _measure_accuracy(nodes: np.ndarray, weights: np.ndarray, i: int) -> int:
    # Largest p with exact moments for m = 0 .. i+p-1.
    scale = max(1.0, float(np.max(np.abs(nodes))))
    p = 0
    for m in range(0, i + len(nodes) + 3):
        target = 1.0 if m == i else 0.0
        mom = float(np.sum(weights * nodes**m)) / math.factorial(m)
        tol = MOMENT_TOL * max(1.0, scale**m / math.factorial(m))
        if abs(mom - target) > tol:
            break
        p = m + 1 - i
    return max(p, 0)


_cache_lock = threading.Lock()


@lru_cache(maxsize=None)
def _solve_weights(nodes: tuple[float, ...], i: int) -> tuple[float, ...]:
    c = np.asarray(nodes, dtype=float)
    n = len(c)
    m = np.arange(n)
    fact = np.array([math.factorial(k) for k in range(n)], dtype=float)
    # Row m: sum_j w_j c_j^m / m! = delta(m, i)
    V = c[None, :] ** m[:, None] / fact[:, None]
    rhs = np.zeros(n)
    rhs[i] = 1.0
    try:
        lu, piv = scipy.linalg.lu_factor(V, check_finite=True)
    except ValueError as exc:
        raise InvalidStencilError(f"non-finite stencil nodes {nodes}") from exc
    if np.min(np.abs(np.diag(lu))) < 1e-14 * np.max(np.abs(np.diag(lu))):
        raise InvalidStencilError(f"singular moment system for nodes {nodes}")
    return tuple(float(v) for v in scipy.linalg.lu_solve((lu, piv), rhs))


def generate_weights(nodes, derivative_order: int) -> StencilOperator:
    """Build the stencil for ``derivative_order`` on the given offsets.

    The accuracy order is measured from the moment conditions rather than
    predicted, so symmetric stencils report their parity bonus correctly.
    """
    nodes = tuple(float(c) for c in nodes)
    i = int(derivative_order)
    if i < 0:
        raise InvalidStencilError("derivative_order must be non-negative")
    if len(set(nodes)) != len(nodes):
        raise InvalidStencilError(f"duplicate stencil nodes {nodes}")
    if i >= len(nodes):
        raise InvalidStencilError(
            f"{len(nodes)} nodes cannot approximate a derivative of order {i}"
        )
    with _cache_lock:
        weights = _solve_weights(nodes, i)
    acc = _measure_accuracy(np.asarray(nodes), np.asarray(weights), i)
    return StencilOperator(i, nodes, weights, acc)


@lru_cache(maxsize=None)
def default_stencil(derivative_order: int, q_max: int) -> StencilOperator:
    """Stencil used by the derivative cascade for order ``derivative_order``.

    Order 0 is the identity sample.  Higher orders use the centered integer
    stencil ``{-m, ..., m}`` with the smallest ``m >= 2`` whose measured
    accuracy reaches ``q_max - derivative_order``.  The center sample always
    equals the order-0 evaluation, so each order costs ``2m`` new evaluations
    (4 for ``q_max <= 5``).
    """
    i = int(derivative_order)
    if i < 0 or i > q_max - 1:
        raise StencilRangeError(
            f"derivative order {i} outside [0, {q_max - 1}] for q_max={q_max}"
        )
    if i == 0:
        return StencilOperator(0, (0.0,), (1.0,), q_max)
    m = 2
    while True:
        if 2 * m + 1 > i:
            op = generate_weights(range(-m, m + 1), i)
            if op.accuracy_order >= q_max - i:
                return op
        m += 1


def apply_scaled(op: StencilOperator, samples) -> np.ndarray:
    """Return ``sum_j w_j f_j``, the estimate of ``h**i f^(i)(t0)``."""
    if len(samples) != op.size:
        raise ValueError(f"expected {op.size} samples, got {len(samples)}")
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
        squeeze = True
    else:
        squeeze = False
    if arr.ndim != 2:
        raise ValueError("samples must be a list of equal-length vectors")
    out = np.asarray(op.weights) @ arr
    return out[0] if squeeze else out


def evaluation_cost(q: int, q_max: int) -> int:
    """Number of f evaluations needed by a cascade that reaches order ``q``."""
    total = 1
    for i in range(1, q):
        op = default_stencil(i, q_max)
        total += op.size - (1 if op.center_index is not None else 0)
    return total
