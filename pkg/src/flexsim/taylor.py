"""Taylor coefficient containers, the Taylor step and order/step control."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalBlowupError


@dataclass(frozen=True)
class TaylorCoefficients:
    """Normalized coefficients ``c_k = x^(k)(t0) / k!`` for ``k = 0..order``."""

    t0: float
    coeffs: np.ndarray  # shape (order + 1, n)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("coeffs must have shape (order + 1, n)")
        object.__setattr__(self, "coeffs", c)

    @property
    def order(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]

    def derivative_norm(self, k: int) -> float:
        """Infinity norm of the k-th derivative ``k! * c_k``."""
        return math.factorial(k) * float(np.max(np.abs(self.coeffs[k]), initial=0.0))

    def derivative(self, dt: float, up_to: int) -> np.ndarray:
        """Time derivative of the degree-``up_to`` polynomial at ``t0 + dt``."""
        out = np.zeros(self.dim)
        for k in range(up_to, 0, -1):
            out = out * dt + k * self.coeffs[k]
        return out


def horner(coeffs: np.ndarray, dt: float) -> np.ndarray:
    out = np.array(coeffs[-1], dtype=float, copy=True)
    for c in coeffs[-2::-1]:
        out = out * dt + c
    return out


def eval_poly(tc: TaylorCoefficients, dt: float, up_to: int) -> np.ndarray:
    if not 0 <= up_to <= tc.order:
        raise ValueError(f"up_to={up_to} outside [0, {tc.order}]")
    if not math.isfinite(dt):
        raise ValueError("dt must be finite")
    return horner(tc.coeffs[: up_to + 1], dt)


def advance_state(tc: TaylorCoefficients, h_step: float, q: int) -> np.ndarray:
    """Truncated Taylor step ``x + sum_{i=1..q} c_i h**i``."""
    return eval_poly(tc, h_step, q)


def truncation_error(q: int, norm_xq: float, h_step: float) -> float:
    """Estimated error of a q-th order step, ``(|x^(q)|/q!)**((q+1)/q) h**(q+1)``."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if norm_xq == 0.0:
        return 0.0
    return (norm_xq / math.factorial(q)) ** ((q + 1) / q) * h_step ** (q + 1)


@dataclass(frozen=True)
class StepController:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    q_min: int = 2
    q_max: int = 5
    safety: float = 0.8
    h_min: float = 1e-15
    h_max: float = math.inf
    reject_factor: float = 1.0
    feedback_check: bool = True

    def __post_init__(self):
        if not 2 <= self.q_min <= self.q_max:
            raise ValueError("need 2 <= q_min <= q_max")
        if not 0.0 < self.safety <= 1.0:
            raise ValueError("safety must lie in (0, 1]")
        if not 0.0 < self.h_min <= self.h_max:
            raise ValueError("need 0 < h_min <= h_max")
        if self.rel_tol < 0 or self.abs_tol < 0 or self.rel_tol + self.abs_tol == 0:
            raise ValueError("tolerances must be non-negative and not both zero")

    def tolerance(self, x: np.ndarray) -> float:
        """Mixed per-step tolerance ``abs_tol + rel_tol * |x|_inf``."""
        return self.abs_tol + self.rel_tol * float(np.max(np.abs(x), initial=0.0))


def step_for_order(q: int, norm_xq: float, tok: float, safety: float) -> float:
    if norm_xq == 0.0:
        return math.inf
    return safety * tok ** (1.0 / (q + 1)) * (math.factorial(q) / norm_xq) ** (1.0 / q)


def select_order_and_step(tc: TaylorCoefficients, ctrl: StepController,
                          cost_per_order, h_cap: float, tok: float | None = None):
    """Pick ``(q, h_step)`` maximizing advance per unit cost.

    Each candidate step inverts the truncation-error estimate at ``tok`` and is
    clipped to ``[h_min, h_cap]``; ties go to the lower order.  Returns the
    chosen order and step; ``h_step`` may fall below ``h_min`` only if even the
    best order cannot meet the tolerance, which the caller treats as stiffness.
    """
    if tc.order < ctrl.q_max:
        raise ValueError("coefficients do not reach q_max")
    if not h_cap > 0:
        raise ValueError("h_cap must be positive")
    if tok is None:
        tok = ctrl.tolerance(tc.coeffs[0])
    h_cap = min(h_cap, ctrl.h_max)
    best = None
    for q in range(ctrl.q_min, ctrl.q_max + 1):
        norm = tc.derivative_norm(q)
        if not math.isfinite(norm):
            continue
        h = min(step_for_order(q, norm, tok, ctrl.safety), h_cap)
        score = h / cost_per_order(q)
        if best is None or score > best[0]:
            best = (score, q, h)
    if best is None:
        raise NumericalBlowupError("all derivative norms are non-finite")
    return best[1], best[2]
