"""Hybrid PWL / nonlinear system model and the decoupled derivative cascade.

The PWL part obeys, for the active switch topology ``k``::

    dx1/dt = A x1 + B1 u1 + B2 y
    u      = C x1 + D1 u1 + D2 y

and the nonlinear part ``dxn/dt = f(xn, u)``, ``y = g(xn, u)``.  Time
derivatives of the PWL side follow exactly from the matrices; those of the
nonlinear side are estimated by finite-difference stencils applied along the
Taylor polynomials built so far.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffops import apply_scaled, default_stencil
from .errors import CascadeError, LoopFailureError
from .taylor import horner

LOOP_TOL = 1e-10
LOOP_MAX_ITER = 50
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class NonlinearBlock:
    """One nonlinear component (or several concatenated into one)."""

    name: str
    n_states: int
    n_inputs: int
    n_outputs: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    g: Callable[[np.ndarray, np.ndarray], np.ndarray]
    depends_on_input: bool = False
    x0: tuple = ()
    state_names: tuple = ()
    input_names: tuple = ()
    output_names: tuple = ()

    def __post_init__(self):
        if not self.x0:
            object.__setattr__(self, "x0", (0.0,) * self.n_states)
        if len(self.x0) != self.n_states:
            raise ValueError(f"block {self.name}: x0 has wrong length")
        for attr, n, prefix in (("state_names", self.n_states, "x"),
                                ("input_names", self.n_inputs, "u"),
                                ("output_names", self.n_outputs, "y")):
            names = getattr(self, attr)
            if not names:
                object.__setattr__(self, attr, tuple(f"{self.name}.{prefix}{j}" for j in range(n)))
            elif len(names) != n:
                raise ValueError(f"block {self.name}: {attr} has wrong length")


def concat_blocks(blocks) -> NonlinearBlock:
    """Block-diagonal concatenation of several blocks into one view."""
    blocks = list(blocks)
    if len(blocks) == 1:
        return blocks[0]

    xs = np.cumsum([0] + [b.n_states for b in blocks])
    us = np.cumsum([0] + [b.n_inputs for b in blocks])

    def f(x, u):
        return np.concatenate([np.atleast_1d(b.f(x[xs[j]:xs[j + 1]], u[us[j]:us[j + 1]]))
                               for j, b in enumerate(blocks)] or [np.zeros(0)])

    def g(x, u):
        return np.concatenate([np.atleast_1d(b.g(x[xs[j]:xs[j + 1]], u[us[j]:us[j + 1]]))
                               for j, b in enumerate(blocks)] or [np.zeros(0)])

    return NonlinearBlock(
        name="+".join(b.name for b in blocks) or "empty",
        n_states=int(xs[-1]), n_inputs=int(us[-1]),
        n_outputs=sum(b.n_outputs for b in blocks),
        f=f, g=g,
        depends_on_input=any(b.depends_on_input for b in blocks),
        x0=tuple(v for b in blocks for v in b.x0),
        state_names=tuple(n for b in blocks for n in b.state_names),
        input_names=tuple(n for b in blocks for n in b.input_names),
        output_names=tuple(n for b in blocks for n in b.output_names),
    )


@dataclass(frozen=True)
class TopologyMatrices:
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray

    @classmethod
    def empty(cls, n1=0, l1=0, m_nl=0, l_nl=0):
        z = np.zeros
        return cls(z((n1, n1)), z((n1, l1)), z((n1, m_nl)), z((l_nl, n1)),
                   z((l_nl, l1)), z((l_nl, m_nl)))

    @property
    def shapes(self):
        return self.A.shape[0], self.B1.shape[1], self.B2.shape[1], self.C.shape[0]

    def has_loop(self) -> bool:
        return self.D2.size > 0 and bool(np.any(self.D2 != 0.0))


@dataclass
class Counters:
    """Work counters threaded through a simulation."""

    f_evals: int = 0
    g_evals: int = 0
    loop_iters: int = 0
    matrix_steps: int = 0

    def snapshot(self):
        return (self.f_evals, self.g_evals, self.loop_iters, self.matrix_steps)


@dataclass
class HybridSystem:
    """Sizes, the nonlinear block and a topology lookup ``mask -> matrices``."""

    n1: int
    l1: int
    block: NonlinearBlock | None
    topology: Callable[[int], TopologyMatrices]
    sources: object = None
    x1_names: tuple = ()
    x1_0: tuple = ()

    def __post_init__(self):
        if self.block is None:
            self.block = NonlinearBlock("none", 0, 0, 0, _no_f, _no_f)
        if not self.x1_names:
            self.x1_names = tuple(f"x{j}" for j in range(self.n1))
        if not self.x1_0:
            self.x1_0 = (0.0,) * self.n1

    @property
    def n_nl(self):
        return self.block.n_states

    @property
    def state_names(self):
        return tuple(self.x1_names) + tuple(self.block.state_names)

    def initial_state(self, t0=0.0, mask=0) -> "HybridState":
        return HybridState(t0, np.array(self.x1_0, dtype=float),
                           np.array(self.block.x0, dtype=float), mask)


def _no_f(x, u):
    return np.zeros(0)


@dataclass
class HybridState:
    t: float
    x1: np.ndarray
    xnl: np.ndarray
    mask: int = 0

    @property
    def x(self):
        return np.concatenate([self.x1, self.xnl])


@dataclass
class LoopResult:
    y: np.ndarray
    u: np.ndarray
    iterations: int = 0
    residual: float = 0.0


@dataclass
class LoopJacobianCache:
    """Finite-difference loop Jacobian reused across the samples of one cascade."""

    jac: np.ndarray | None = None


def _loop_residual(y, xnl, base, mats, block, counters):
    u = base + mats.D2 @ y
    gy = np.atleast_1d(block.g(xnl, u))
    if counters is not None:
        counters.g_evals += 1
    return y - gy, u


def solve_algebraic_loop(xnl, x1, u1, mats: TopologyMatrices, block: NonlinearBlock,
                         warm_start=None, counters: Counters | None = None,
                         jac_cache: LoopJacobianCache | None = None,
                         loop_tol: float = LOOP_TOL, max_iter: int = LOOP_MAX_ITER) -> LoopResult:
    """Solve ``y = g(xn, C x1 + D1 u1 + D2 y)`` for the interface outputs.

    Without a loop (``D2 == 0`` or ``g`` independent of its input) the answer
    is a single evaluation.  Otherwise damped Newton with a finite-difference
    Jacobian is iterated until the update stalls near machine precision, and
    the result is accepted if the residual meets ``loop_tol * (1 + |y|)``.
    """
    base = mats.C @ x1 + mats.D1 @ u1
    if block.n_outputs == 0:
        return LoopResult(np.zeros(0), base)
    if not (block.depends_on_input and mats.has_loop()):
        y = np.atleast_1d(block.g(xnl, base)).astype(float)
        if counters is not None:
            counters.g_evals += 1
        return LoopResult(y, base + mats.D2 @ y)

    m = block.n_outputs
    y = (np.zeros(m) if warm_start is None else np.array(warm_start, dtype=float))
    r, u = _loop_residual(y, xnl, base, mats, block, counters)
    rnorm = float(np.max(np.abs(r)))
    jac = None if jac_cache is None else jac_cache.jac
    fresh = False
    it = 0
    while it < max_iter:
        tol = loop_tol * (1.0 + float(np.max(np.abs(y))))
        if rnorm <= 4 * _EPS * (1.0 + float(np.max(np.abs(y)))):
            break
        if jac is None:
            jac = _fd_loop_jacobian(y, r, xnl, base, mats, block, counters)
            fresh = True
        try:
            dy = -np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            raise LoopFailureError("singular algebraic-loop Jacobian", rnorm)
        lam = 1.0
        improved = False
        while lam >= 1.0 / 64:
            y_try = y + lam * dy
            r_try, u_try = _loop_residual(y_try, xnl, base, mats, block, counters)
            n_try = float(np.max(np.abs(r_try)))
            if np.isfinite(n_try) and n_try < rnorm:
                improved = True
                break
            lam *= 0.5
        it += 1
        if counters is not None:
            counters.loop_iters += 1
        if not improved:
            if not fresh:
                # stale Jacobian from an earlier sample; rebuild and retry
                jac = None
                continue
            if rnorm <= tol:
                break
            raise LoopFailureError("algebraic loop line search failed", rnorm)
        step = float(np.max(np.abs(y_try - y)))
        y, r, u, rnorm = y_try, r_try, u_try, n_try
        if step <= 2 * _EPS * (1.0 + float(np.max(np.abs(y)))) and rnorm <= tol:
            break
    if rnorm > loop_tol * (1.0 + float(np.max(np.abs(y)))):
        raise LoopFailureError(f"algebraic loop did not converge in {max_iter} iterations", rnorm)
    if jac_cache is not None:
        jac_cache.jac = jac
    return LoopResult(y, u, it, rnorm)


def _fd_loop_jacobian(y, r, xnl, base, mats, block, counters):
    m = len(y)
    jac = np.empty((m, m))
    for j in range(m):
        dyj = math.sqrt(_EPS) * max(1.0, abs(y[j]))
        yp = y.copy()
        yp[j] += dyj
        rp, _ = _loop_residual(yp, xnl, base, mats, block, counters)
        jac[:, j] = (rp - r) / dyj
    return jac


@dataclass
class FirstDerivatives:
    dxnl: np.ndarray
    dx1: np.ndarray
    y: np.ndarray
    u: np.ndarray
    loop_residual: float = 0.0

    @property
    def dx(self):
        return np.concatenate([self.dx1, self.dxnl])


def first_derivatives(state: HybridState, system: HybridSystem, u1=None,
                      mats: TopologyMatrices | None = None, counters: Counters | None = None,
                      warm_start=None, jac_cache=None) -> FirstDerivatives:
    """Loop solve at the current point followed by one evaluation of ``f``."""
    if mats is None:
        mats = system.topology(state.mask)
    if u1 is None:
        u1 = np.zeros(system.l1)
    block = system.block
    lr = solve_algebraic_loop(state.xnl, state.x1, u1, mats, block, warm_start,
                              counters, jac_cache)
    if block.n_states:
        dxnl = np.atleast_1d(block.f(state.xnl, lr.u)).astype(float)
        if counters is not None:
            counters.f_evals += 1
    else:
        dxnl = np.zeros(0)
    dx1 = mats.A @ state.x1 + mats.B1 @ u1 + mats.B2 @ lr.y
    return FirstDerivatives(dxnl, dx1, lr.y, lr.u, lr.residual)


@dataclass
class DerivativeSet:
    """Normalized Taylor coefficients of every signal at the expansion point."""

    x1: np.ndarray   # (q + 1, n1)
    xnl: np.ndarray  # (q + 1, n_nl)
    u: np.ndarray    # (q, l_nl)
    y: np.ndarray    # (q, m_nl)
    u1: np.ndarray   # (q, l1)
    h: float
    f_evals: int = 0
    g_evals: int = 0
    matrix_steps: int = 0
    loop_residual: float = 0.0

    @property
    def order(self):
        return self.x1.shape[0] - 1

    def state_coeffs(self) -> np.ndarray:
        return np.concatenate([self.x1, self.xnl], axis=1)


class DerivativeCascade:
    """Incremental form of the decoupled derivative cascade.

    Each call of :meth:`extend` runs one pass ``i`` of the cascade: (1) ``y``
    order ``i`` from the stencil applied to the loop-solved output along the
    degree-``i`` paths; (2) ``u`` order ``i`` from the PWL output equation;
    (3) ``xn`` order ``i+1`` from the stencil on ``f`` and ``x1`` order
    ``i+1`` from the state matrices.  The zero-offset sample of every stencil
    equals the order-0 evaluation and is reused.  Stencils depend only on
    ``q_max``, so stopping early yields exactly the leading coefficients of a
    full cascade.
    """

    def __init__(self, state: HybridState, system: HybridSystem, h: float, u1_coeffs,
                 q_max: int, order0: FirstDerivatives | None = None,
                 mats: TopologyMatrices | None = None, counters: Counters | None = None):
        if not h > 0:
            raise ValueError("differentiation step must be positive")
        self.system = system
        self.h = float(h)
        self.q_max = int(q_max)
        self.mats = system.topology(state.mask) if mats is None else mats
        self.counters = Counters() if counters is None else counters
        self._start = self.counters.snapshot()
        u1c = np.asarray(u1_coeffs, dtype=float)
        if u1c.shape[0] < q_max:
            raise ValueError("u1_coeffs must provide orders 0..q_max-1")
        block = system.block
        n1, nn = len(state.x1), len(state.xnl)
        self.X1 = np.zeros((q_max + 1, n1))
        self.XN = np.zeros((q_max + 1, nn))
        self.U = np.zeros((q_max, block.n_inputs))
        self.Y = np.zeros((q_max, block.n_outputs))
        self.U1 = u1c[:q_max].reshape(q_max, system.l1)
        self.X1[0] = state.x1
        self.XN[0] = state.xnl
        if order0 is None:
            order0 = first_derivatives(state, system, self.U1[0], self.mats, self.counters)
        self.order0 = order0
        self.Y[0], self.U[0] = order0.y, order0.u
        self.order = 0  # highest state coefficient available
        self._jac_cache = LoopJacobianCache()

    @property
    def f_evals(self) -> int:
        return self.counters.f_evals - self._start[0]

    def state_coeffs(self, q: int | None = None) -> np.ndarray:
        q = self.order if q is None else q
        return np.concatenate([self.X1[: q + 1], self.XN[: q + 1]], axis=1)

    def extend(self) -> int:
        """Compute the next state coefficient; returns the new order."""
        i = self.order
        if i >= self.q_max:
            raise ValueError("cascade already at q_max")
        block, mats, h = self.system.block, self.mats, self.h
        X1, XN, U, Y, U1 = self.X1, self.XN, self.U, self.Y, self.U1
        nn = XN.shape[1]
        op = None
        if i > 0:
            op = default_stencil(i, self.q_max)
            scale = h**i
            if block.n_outputs:
                samples = []
                for c in op.nodes:
                    if c == 0.0:
                        samples.append(Y[0])
                        continue
                    t = c * h
                    try:
                        lr = solve_algebraic_loop(
                            horner(XN[: i + 1], t), horner(X1[: i + 1], t),
                            horner(U1[: i + 1], t), mats, block,
                            warm_start=horner(Y[:i], t), counters=self.counters,
                            jac_cache=self._jac_cache)
                    except LoopFailureError as exc:
                        raise CascadeError(f"loop failure at stencil node {c}: {exc}", i) from exc
                    samples.append(lr.y)
                Y[i] = apply_scaled(op, samples) / (scale * math.factorial(i))
            U[i] = mats.C @ X1[i] + mats.D1 @ U1[i] + mats.D2 @ Y[i]

        if nn:
            if i == 0:
                F = self.order0.dxnl
            else:
                samples = []
                for c in op.nodes:
                    if c == 0.0:
                        samples.append(self.order0.dxnl)
                        continue
                    t = c * h
                    samples.append(np.atleast_1d(block.f(horner(XN[: i + 1], t),
                                                         horner(U[: i + 1], t))))
                    self.counters.f_evals += 1
                F = apply_scaled(op, samples) / scale
            XN[i + 1] = F / math.factorial(i + 1)
        if X1.shape[1]:
            X1[i + 1] = (mats.A @ X1[i] + mats.B1 @ U1[i] + mats.B2 @ Y[i]) / (i + 1)
            self.counters.matrix_steps += 1
        if not (np.all(np.isfinite(XN[i + 1])) and np.all(np.isfinite(X1[i + 1]))
                and np.all(np.isfinite(Y[i]))):
            raise CascadeError("non-finite derivative", i)
        self.order = i + 1
        return self.order

    def result(self) -> "DerivativeSet":
        q = self.order
        end = self.counters.snapshot()
        return DerivativeSet(self.X1[: q + 1].copy(), self.XN[: q + 1].copy(),
                             self.U[:q].copy(), self.Y[:q].copy(), self.U1[:q].copy(), self.h,
                             f_evals=end[0] - self._start[0], g_evals=end[1] - self._start[1],
                             matrix_steps=end[3] - self._start[3],
                             loop_residual=self.order0.loop_residual)


def derivative_cascade(state: HybridState, system: HybridSystem, q: int, h: float,
                       u1_coeffs, q_max: int | None = None,
                       order0: FirstDerivatives | None = None,
                       mats: TopologyMatrices | None = None,
                       counters: Counters | None = None) -> DerivativeSet:
    """Coefficients of ``x1, xn`` to order ``q`` and of ``u, y`` to ``q - 1``.

    Stencils are the defaults for ``q_max`` (``q`` when omitted); with them a
    cascade of order ``q`` costs ``1 + 4 (q - 1)`` evaluations of ``f``
    including the order-0 evaluation.
    """
    if q_max is None:
        q_max = q
    if q > q_max:
        raise ValueError("q exceeds q_max")
    u1c = np.asarray(u1_coeffs, dtype=float)
    if u1c.shape[0] < q:
        raise ValueError("u1_coeffs must provide orders 0..q-1")
    if u1c.shape[0] < q_max:
        u1c = np.vstack([u1c, np.zeros((q_max - u1c.shape[0], system.l1))])
    counters = Counters() if counters is None else counters
    start = counters.snapshot()
    cas = DerivativeCascade(state, system, h, u1c, q_max, order0, mats, counters)
    while cas.order < q:
        cas.extend()
    ds = cas.result()
    # include the order-0 evaluation when it happened inside this call
    end = counters.snapshot()
    ds.f_evals, ds.g_evals = end[0] - start[0], end[1] - start[1]
    return ds
