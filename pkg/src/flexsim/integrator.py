"""Variable-order, variable-step Taylor integration of hybrid systems.

Per step: loop solve and first derivatives, differentiation step, derivative
cascade to ``q_max``, order/step selection capped at the next scheduled
event, Taylor advance, dense recording, and event handling at the step end.
"""

from __future__ import annotations

import logging
import math
import time
from collections import Counter as Histogram
from dataclasses import dataclass, field, replace

import numpy as np

from .diffops import evaluation_cost
from .errors import NumericalBlowupError, StiffnessError
from .hybrid import (Counters, DerivativeCascade, HybridState, HybridSystem,
                     first_derivatives, solve_algebraic_loop)
from .sources import EventSchedule, SourceSet, u1_derivatives
from .taylor import (StepController, TaylorCoefficients, advance_state, step_for_order,
                     truncation_error)
from .waveform import Waveform

log = logging.getLogger(__name__)

QUIESCENT_NORM = 1e-12
# differentiation step never drops below this fraction of the previous step
DIFF_STEP_FRACTION = 0.05
# a step following a feedback-checked step grows at most by this factor
GROWTH_MAX = 5.0


@dataclass
class SimulationRun:
    system: HybridSystem
    schedule: EventSchedule
    controller: StepController
    t_span: tuple
    output_period: float
    signals: tuple = ()
    initial_mask: int = 0

    def __post_init__(self):
        t0, t1 = map(float, self.t_span)
        if not t1 > t0:
            raise ValueError("t_span must be increasing")
        if not self.output_period > 0:
            raise ValueError("output period must be positive")
        self.t_span = (t0, t1)
        if not self.signals:
            self.signals = self.system.state_names


@dataclass
class EventRecord:
    """One processed event.

    ``jump`` is the max-norm difference between the state that ended the step
    into the event and the state the next step expands from.
    """

    time: float
    mask_before: int
    mask_after: int
    jump: float
    loop_residual: float


@dataclass
class RunStats:
    solver: str = "taylor"
    accepted: int = 0
    rejected: int = 0
    f_evals: int = 0
    g_evals: int = 0
    loop_iters: int = 0
    order_hist: dict = field(default_factory=dict)
    wall_ms: float = 0.0
    step_f_evals: list = field(default_factory=list)
    check_f_evals: int = 0
    events: list = field(default_factory=list)

    @property
    def avg_order(self) -> float:
        n = sum(self.order_hist.values())
        return sum(q * c for q, c in self.order_hist.items()) / n if n else 0.0

    def as_dict(self):
        return {
            "solver": self.solver, "accepted_steps": self.accepted,
            "rejected_steps": self.rejected, "f_evals": self.f_evals,
            "g_evals": self.g_evals, "loop_iters": self.loop_iters,
            "order_histogram": {str(k): v for k, v in sorted(self.order_hist.items())},
            "avg_order": self.avg_order, "wall_ms": self.wall_ms,
            "check_f_evals": self.check_f_evals, "events": len(self.events),
        }


def diff_step(tok: float, first_derivs, h_max: float = math.inf) -> float:
    """Differentiation step ``Tok / max(|dx_nl|_inf, |dx_1|_inf)``."""
    if not tok > 0:
        raise ValueError("Tok must be positive")
    norms = [float(np.max(np.abs(d), initial=0.0)) for d in first_derivs]
    if not all(math.isfinite(n) for n in norms):
        raise NumericalBlowupError("non-finite first derivatives")
    top = max(norms, default=0.0)
    if top < QUIESCENT_NORM:
        return h_max
    return min(tok / top, h_max)


def output_grid(t_span, period):
    t0, t1 = t_span
    n = int(math.floor((t1 - t0) / period * (1 + 1e-12)))
    grid = t0 + period * np.arange(n + 1)
    if t1 - grid[-1] > 1e-9 * period:
        grid = np.append(grid, t1)
    else:
        grid[-1] = min(grid[-1], t1)
    return grid


class Recorder:
    """Collects named signals on the output grid from (t, x, mask) samples."""

    def __init__(self, run: SimulationRun):
        sysm = run.system
        self.run = run
        self.grid = output_grid(run.t_span, run.output_period)
        self.next = 0
        names = list(run.signals)
        states = list(sysm.state_names)
        inputs = list(sysm.block.input_names)
        outputs = list(sysm.block.output_names)
        srcs = list(sysm.sources.names) if sysm.sources is not None else []
        self.plan = []
        for n in names:
            if n in states:
                self.plan.append(("x", states.index(n)))
            elif n in inputs:
                self.plan.append(("u", inputs.index(n)))
            elif n in outputs:
                self.plan.append(("y", outputs.index(n)))
            elif n in srcs:
                self.plan.append(("s", srcs.index(n)))
            else:
                raise KeyError(f"unknown signal {n!r}")
        self.needs_loop = any(kind in ("u", "y") for kind, _ in self.plan)
        self.data = np.full((len(self.grid), len(names)), np.nan)

    def pending(self, t_end, inclusive=False):
        """Grid indices in [current, t_end) (or up to t_end when inclusive)."""
        out = []
        while self.next < len(self.grid):
            tg = self.grid[self.next]
            if tg < t_end or (inclusive and tg <= t_end):
                out.append(self.next)
                self.next += 1
            else:
                break
        return out

    def sample(self, k, t, x, mask):
        sysm = self.run.system
        u1 = (u1_derivatives(sysm.sources, t, 0, side="+")[0]
              if sysm.sources is not None and len(sysm.sources) else np.zeros(sysm.l1))
        if self.needs_loop:
            lr = solve_algebraic_loop(x[sysm.n1:], x[:sysm.n1], u1, sysm.topology(mask),
                                      sysm.block)
        for j, (kind, i) in enumerate(self.plan):
            if kind == "x":
                self.data[k, j] = x[i]
            elif kind == "u":
                self.data[k, j] = lr.u[i]
            elif kind == "y":
                self.data[k, j] = lr.y[i]
            else:
                self.data[k, j] = u1[i]

    def waveform(self):
        return Waveform(self.grid, {n: self.data[:, j] for j, n in enumerate(self.run.signals)})


def _u1(system: HybridSystem, t, order, side):
    if system.sources is None or len(system.sources) == 0:
        return np.zeros((order + 1, system.l1))
    return u1_derivatives(system.sources, t, order, side)


def _split(system, x):
    return x[:system.n1], x[system.n1:]


def _event_plan(run: SimulationRun):
    t0, t1 = run.t_span
    mask = run.schedule.initial_mask(t0, run.initial_mask)
    events = [e for e in run.schedule.events if t0 < e.time < t1]
    return mask, events


def _initial_scale(x, dx) -> float:
    """Time scale ``0.01 |x| / |x'|`` used to floor the first differentiation step."""
    nx = float(np.max(np.abs(x), initial=0.0))
    ndx = float(np.max(np.abs(dx), initial=0.0))
    if nx == 0.0 or ndx < QUIESCENT_NORM:
        return 0.0
    return 0.01 * nx / ndx


def _select_incremental(cas: DerivativeCascade, ctrl: StepController, cost, h_cap, tok):
    """Extend the cascade order by order and pick ``(q, h_step, h_natural)``.

    Scores are ``min(h_q, h_cap) / cost(q)`` as in ``select_order_and_step``.
    Because ``cost`` grows with ``q``, no higher order can score above
    ``h_cap / cost(q + 1)``; once that bound is not better than the best score
    the remaining orders are skipped, which leaves the choice unchanged.
    """
    h_cap = min(h_cap, ctrl.h_max)
    best = None
    while cas.order < ctrl.q_max:
        q = cas.extend()
        if q < ctrl.q_min:
            continue
        norm = math.factorial(q) * float(np.max(np.abs(cas.state_coeffs(q)[q]), initial=0.0))
        if math.isfinite(norm):
            h_nat = step_for_order(q, norm, tok, ctrl.safety)
            score = min(h_nat, h_cap) / cost(q)
            if best is None or score > best[0]:
                best = (score, q, min(h_nat, h_cap), h_nat)
        if best is not None and q < ctrl.q_max and h_cap / cost(q + 1) <= best[0]:
            break
    if best is None:
        raise NumericalBlowupError("all derivative norms are non-finite")
    return best[1], best[2], best[3]


def integrate(run: SimulationRun, forced_order: int | None = None):
    """Flexible Taylor integration; returns ``(Waveform, RunStats)``.

    ``forced_order`` pins ``q_min = q_max`` to a single order.
    """
    wall0 = time.perf_counter()
    sysm, ctrl = run.system, run.controller
    if forced_order is not None:
        ctrl = replace(ctrl, q_min=forced_order, q_max=forced_order)
    q_max = ctrl.q_max
    t0, t1 = run.t_span
    counters = Counters()
    stats = RunStats("taylor")
    hist = Histogram()
    rec = Recorder(run)
    mask, events = _event_plan(run)
    state = sysm.initial_state(t0, mask)
    has_nl = sysm.n_nl > 0
    has_pwl = sysm.n1 > 0

    def cost(q):
        return (evaluation_cost(q, q_max) if has_nl else 0) + (q if has_pwl else 0)

    t = t0
    x = state.x
    k_ev = 0
    fd = None
    h_ref = None
    trust = 1.0
    h_grow = math.inf
    while t < t1:
        t_next = events[k_ev].time if k_ev < len(events) else t1
        h_cap = min(t_next - t, h_grow)
        mats = sysm.topology(mask)
        U1 = _u1(sysm, t, q_max, "+")
        x1, xnl = _split(sysm, x)
        st = HybridState(t, x1, xnl, mask)
        if fd is None:
            fd = first_derivatives(st, sysm, U1[0], mats, counters)

        tok = ctrl.tolerance(x)
        h_k = diff_step(tok, (fd.dxnl, fd.dx1), ctrl.h_max)
        if h_ref is None:
            h_ref = _initial_scale(x, fd.dx)
        h_k = max(h_k, DIFF_STEP_FRACTION * h_ref)
        h_k = min(h_k, h_cap / 4, DIFF_STEP_FRACTION * (t1 - t0))
        f_cascade = counters.f_evals
        cas = DerivativeCascade(st, sysm, h_k, U1, q_max, order0=fd, mats=mats,
                                counters=counters)
        q, h, h_nat = _select_incremental(cas, ctrl, cost, h_cap, tok / trust)
        # a step shortened by the next event or the span end is not a stiffness symptom
        if h < ctrl.h_min and h < t_next - t:
            raise StiffnessError(f"step {h:.3e} s below h_min at t={t:.9g}; "
                                 f"system too stiff for explicit Taylor steps", t, x.copy())
        step_f = counters.f_evals - f_cascade + (1 if has_nl else 0)
        tc = TaylorCoefficients(t, cas.state_coeffs())

        while True:
            at_event = h >= t_next - t
            dt = t_next - t if at_event else h
            t_new = t_next if at_event else t + dt
            if t_new <= t:
                raise StiffnessError(f"step underflow at t={t:.17g}", t, x.copy())
            x_new = advance_state(tc, dt, q)
            if not np.all(np.isfinite(x_new)):
                raise NumericalBlowupError(f"non-finite state after step at t={t:.9g}")
            fd_new = None
            # steps shortened by an event or by the span end are not re-checked
            if ctrl.feedback_check and dt >= h_nat:
                x1_new, nl_new = _split(sysm, x_new)
                u1_end = _u1(sysm, t_new, 0, "-")[0]
                fd_new = first_derivatives(HybridState(t_new, x1_new, nl_new, mask), sysm,
                                           u1_end, mats, counters, warm_start=fd.y)
                slope = tc.derivative(dt, q)
                err = dt * float(np.max(np.abs(fd_new.dx - slope), initial=0.0)) / (q + 1)
                if err > ctrl.reject_factor * tok and dt / 2 >= ctrl.h_min:
                    stats.rejected += 1
                    stats.check_f_evals += 1 if has_nl else 0
                    h = h_nat = dt / 2
                    continue
                # When the measured error exceeds the a-priori estimate for this
                # step (typically near a stability limit), the estimates of every
                # order are scaled down by the same factor on the next selection.
                predicted = truncation_error(q, tc.derivative_norm(q), dt)
                trust = max(1.0, err / predicted) if predicted > 0 else 1.0
                h_grow = GROWTH_MAX * dt
            else:
                h_grow = math.inf
            break

        for k in rec.pending(t_new, inclusive=t_new >= t1):
            rec.sample(k, rec.grid[k], advance_state(tc, rec.grid[k] - t, q), mask)
        stats.accepted += 1
        hist[q] += 1
        stats.step_f_evals.append(step_f)
        h_ref = h_nat if math.isfinite(h_nat) else max(dt, h_ref or 0.0)
        t, x = t_new, x_new
        fd = fd_new

        if at_event and k_ev < len(events):
            ev = events[k_ev]
            k_ev += 1
            mask_before, x_left = mask, x.copy()
            mask = ev.apply(mask)
            x1, xnl = _split(sysm, x)
            # re-solve the interface for the new topology; the state is untouched
            st_right = HybridState(t, x1, xnl, mask)
            res = first_derivatives(st_right, sysm, _u1(sysm, t, 0, "+")[0],
                                    sysm.topology(mask), None,
                                    warm_start=None if fd is None else fd.y).loop_residual
            if mask != mask_before or ev.source_step:
                fd = None
            jump = float(np.max(np.abs(st_right.x - x_left), initial=0.0))
            stats.events.append(EventRecord(t, mask_before, mask, jump, res))
    if fd is not None and has_nl:
        stats.check_f_evals += 1  # end-of-span check evaluation never used as expansion

    stats.f_evals, stats.g_evals, stats.loop_iters = (counters.f_evals, counters.g_evals,
                                                      counters.loop_iters)
    stats.order_hist = dict(hist)
    stats.wall_ms = (time.perf_counter() - wall0) * 1e3
    return rec.waveform(), stats
