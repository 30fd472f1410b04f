"""Embedded Runge-Kutta oracles, the relative-error metric and the bench harness.

Both oracles drive the same hybrid system, topology cache and event schedule
as the Taylor integrator: every right-hand-side evaluation is a loop solve
followed by one call of ``f`` and the PWL state equation, and steps are
truncated so that they end exactly on scheduled events.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalBlowupError, SimulationError, StiffnessError
from .hybrid import Counters, HybridState, first_derivatives
from .integrator import (EventRecord, Recorder, RunStats, SimulationRun, _event_plan,
                         _split, _u1, integrate)
from .waveform import Waveform

log = logging.getLogger(__name__)

__all__ = ["Tableau", "DORMAND_PRINCE", "BOGACKI_SHAMPINE", "rk45_dp", "rk23_bs",
           "run_rk", "relative_error", "bench", "BenchCell", "write_bench",
           "reference_run", "Waveform"]


@dataclass(frozen=True)
class Tableau:
    """Explicit FSAL pair with an interpolant ``x + h * sum_j k_j * (P[j] @ s^(1..))``."""

    name: str
    order: int
    c: np.ndarray
    a: tuple
    b: np.ndarray
    e: np.ndarray  # b - b_hat
    p: np.ndarray  # dense-output polynomial coefficients per stage

    @property
    def stages(self):
        return len(self.b)


DORMAND_PRINCE = Tableau(
    "dp45", 5,
    c=np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1]),
    a=((),
       (1 / 5,),
       (3 / 40, 9 / 40),
       (44 / 45, -56 / 15, 32 / 9),
       (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
       (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
       (35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)),
    b=np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0]),
    e=np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40]),
    p=np.array([
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933,
         87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408,
         701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]),
)

BOGACKI_SHAMPINE = Tableau(
    "bs23", 3,
    c=np.array([0, 1 / 2, 3 / 4, 1]),
    a=((), (1 / 2,), (0, 3 / 4), (2 / 9, 1 / 3, 4 / 9)),
    b=np.array([2 / 9, 1 / 3, 4 / 9, 0]),
    e=np.array([5 / 72, -1 / 12, -1 / 9, 1 / 8]),
    p=np.array([[1, -4 / 3, 5 / 9], [0, 1, -2 / 3], [0, 4 / 3, -8 / 9], [0, -1, 1]]),
)

SAFETY = 0.9
FAC_MIN, FAC_MAX = 0.2, 5.0


def _dense(tab: Tableau, x, k, h, theta):
    powers = theta ** np.arange(1, tab.p.shape[1] + 1)
    return x + h * (tab.p @ powers) @ k


def _initial_step(rhs, t, x, f0, order, rtol, atol, h_cap):
    """Standard starting-step heuristic from the derivative magnitudes."""
    scale = atol + rtol * np.abs(x)
    d0 = float(np.max(np.abs(x) / scale, initial=0.0))
    d1 = float(np.max(np.abs(f0) / scale, initial=0.0))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, h_cap)
    f1 = rhs(t + h0, x + h0 * f0)
    d2 = float(np.max(np.abs(f1 - f0) / scale, initial=0.0)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1, h_cap)


def run_rk(run: SimulationRun, tab: Tableau, h0: float | None = None,
           fixed_step: bool = False):
    """Integrate ``run`` with the explicit pair ``tab``; returns ``(Waveform, RunStats)``.

    With ``fixed_step`` the step ``h0`` is used throughout (apart from event
    truncation) and the embedded error estimate is ignored.
    """
    wall0 = time.perf_counter()
    sysm, ctrl = run.system, run.controller
    rtol, atol = ctrl.rel_tol, ctrl.abs_tol
    t0, t1 = run.t_span
    counters = Counters()
    stats = RunStats(tab.name)
    rec = Recorder(run)
    mask, events = _event_plan(run)
    x = sysm.initial_state(t0, mask).x
    n = len(x)
    y_warm = [None]

    def rhs(t, xs, side="+"):
        x1, xnl = _split(sysm, xs)
        fd = first_derivatives(HybridState(t, x1, xnl, mask), sysm, _u1(sysm, t, 0, side)[0],
                               sysm.topology(mask), counters, warm_start=y_warm[0])
        y_warm[0] = fd.y
        return fd.dx

    t = t0
    k_ev = 0
    f0 = rhs(t, x)
    fresh_evals = 1
    err_prev = 1.0
    h = h0
    k = np.zeros((tab.stages, n))
    while t < t1:
        t_next = events[k_ev].time if k_ev < len(events) else t1
        h_cap = t_next - t
        if h is None:
            h = _initial_step(rhs, t, x, f0, tab.order, rtol, atol, h_cap)
            fresh_evals += 1
        accepted = False
        while not accepted:
            at_event = h >= h_cap
            dt = h_cap if at_event else h
            # the proposed step is judged, not the one shortened by an event
            if h < ctrl.h_min or t + dt <= t:
                raise StiffnessError(f"{tab.name}: step {h:.3e} s below h_min at t={t:.9g}",
                                     t, x.copy())
            k[0] = f0
            for s in range(1, tab.stages):
                xs = x + dt * (np.asarray(tab.a[s]) @ k[:s])
                ts = t_next if (at_event and tab.c[s] == 1) else t + tab.c[s] * dt
                k[s] = rhs(ts, xs, "-" if tab.c[s] == 1 else "+")
                fresh_evals += 1
            x_new = x + dt * (tab.b @ k)
            if not np.all(np.isfinite(x_new)):
                raise NumericalBlowupError(f"{tab.name}: non-finite state at t={t:.9g}")
            if fixed_step:
                break
            err_vec = dt * (tab.e @ k)
            scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
            err = float(np.max(np.abs(err_vec) / scale, initial=0.0))
            if err <= 1.0:
                alpha, beta = 0.7 / tab.order, 0.4 / tab.order
                fac = SAFETY * max(err, 1e-10) ** -alpha * err_prev ** beta
                err_prev = max(err, 1e-4)
                h_next = dt * min(FAC_MAX, max(FAC_MIN, fac))
                accepted = True
            else:
                stats.rejected += 1
                fac = SAFETY * err ** (-1.0 / (tab.order + 1))
                h = dt * max(FAC_MIN, fac)
        t_new = t_next if at_event else t + dt
        for j in rec.pending(t_new, inclusive=t_new >= t1):
            theta = (rec.grid[j] - t) / dt
            rec.sample(j, rec.grid[j], _dense(tab, x, k, dt, theta), mask)
        stats.accepted += 1
        stats.step_f_evals.append(fresh_evals)
        fresh_evals = 0
        t, x = t_new, x_new
        f0 = k[-1].copy()  # first same as last
        if not fixed_step:
            h = h_next if not at_event else max(h_next, h)
        if at_event and k_ev < len(events):
            ev = events[k_ev]
            k_ev += 1
            mask_before, x_left = mask, x.copy()
            mask = ev.apply(mask)
            if mask != mask_before or ev.source_step:
                f0 = rhs(t, x)  # topology changed: the FSAL stage is stale
                fresh_evals += 1
            x1, xnl = _split(sysm, x)
            st_right = HybridState(t, x1, xnl, mask)
            res = first_derivatives(st_right, sysm, _u1(sysm, t, 0, "+")[0],
                                    sysm.topology(mask), None, y_warm[0]).loop_residual
            jump = float(np.max(np.abs(st_right.x - x_left), initial=0.0))
            stats.events.append(EventRecord(t, mask_before, mask, jump, res))

    stats.f_evals, stats.g_evals, stats.loop_iters = (counters.f_evals, counters.g_evals,
                                                      counters.loop_iters)
    stats.order_hist = {tab.order: stats.accepted}
    stats.wall_ms = (time.perf_counter() - wall0) * 1e3
    return rec.waveform(), stats


def rk45_dp(run: SimulationRun, **kw):
    """Dormand-Prince 5(4) with FSAL, PI control and event truncation."""
    return run_rk(run, DORMAND_PRINCE, **kw)


def rk23_bs(run: SimulationRun, **kw):
    """Bogacki-Shampine 3(2) with FSAL, PI control and event truncation."""
    return run_rk(run, BOGACKI_SHAMPINE, **kw)


SOLVERS = {"taylor": integrate, "dp45": rk45_dp, "bs23": rk23_bs}


def relative_error(sim: Waveform, ref: Waveform, abs_tol: float, signals=None) -> float:
    """Mean of ``|y_sim - y_ref| / max(|y_ref|, abs_tol)`` over points, then over signals.

    The reference is linearly interpolated onto the simulation grid, and only
    the reference magnitude enters the normalization.
    """
    if not abs_tol > 0:
        raise ValueError("abs_tol must be positive")
    if signals is None:
        signals = sim.names
    span = ref.t[-1] - ref.t[0]
    slack = 1e-9 * max(span, 1e-300)
    if sim.t[0] < ref.t[0] - slack or sim.t[-1] > ref.t[-1] + slack:
        raise ValueError("simulation grid leaves the reference time span")
    if len(signals) == 0:
        raise ValueError("no signals to compare")
    tt = np.clip(sim.t, ref.t[0], ref.t[-1])
    per_signal = []
    for name in signals:
        if name not in sim.columns or name not in ref.columns:
            raise KeyError(f"unknown signal {name!r}")
        y_ref = np.interp(tt, ref.t, ref[name]) if len(ref.t) > 1 else np.full_like(tt, ref[name][0])
        denom = np.maximum(np.abs(y_ref), abs_tol)
        per_signal.append(float(np.mean(np.abs(sim[name] - y_ref) / denom)))
    return float(np.mean(per_signal))


def reference_run(run: SimulationRun, rel_tol: float = 1e-10, abs_tol: float | None = None):
    """Tight-tolerance DP45 trajectory used as ground truth."""
    atol = min(run.controller.abs_tol, 1e-10) if abs_tol is None else abs_tol
    ctrl = replace(run.controller, rel_tol=rel_tol, abs_tol=atol)
    return rk45_dp(replace(run, controller=ctrl))


@dataclass
class BenchCell:
    solver: str
    rel_tol: float
    steps: int | None = None
    f_evals: int | None = None
    avg_order: float | None = None
    wall_ms: float | None = None
    err_rel: float | None = None
    error: str = ""

    def as_dict(self):
        return {"solver": self.solver, "rel_tol": self.rel_tol, "steps": self.steps,
                "f_evals": self.f_evals, "avg_order": self.avg_order,
                "wall_ms": self.wall_ms, "err_rel": self.err_rel, "error": self.error}


def bench(run: SimulationRun, tolerances, solvers=("taylor", "dp45", "bs23"),
          metric_abs_tol: float | None = None, reference=None):
    """Tolerance sweep for each solver against a DP45 reference.

    Returns a list of ``BenchCell``; a failing cell keeps its error message
    and the sweep continues.
    """
    if reference is None:
        reference, _ = reference_run(run)
    atol_metric = run.controller.abs_tol if metric_abs_tol is None else metric_abs_tol
    cells = []
    for name in solvers:
        if name not in SOLVERS:
            raise ValueError(f"unknown solver {name!r}")
        for tol in tolerances:
            cell = BenchCell(name, float(tol))
            try:
                ctrl = replace(run.controller, rel_tol=float(tol))
                wf, st = SOLVERS[name](replace(run, controller=ctrl))
                cell.steps, cell.f_evals = st.accepted, st.f_evals
                cell.avg_order, cell.wall_ms = st.avg_order, st.wall_ms
                cell.err_rel = relative_error(wf, reference, atol_metric)
            except (SimulationError, ValueError, ArithmeticError) as exc:
                log.warning("bench cell %s @ %g failed: %s", name, tol, exc)
                cell.error = f"{type(exc).__name__}: {exc}"
            cells.append(cell)
    return cells


def write_bench(cells, json_path, csv_path=None):
    rows = [c.as_dict() for c in cells]
    with open(json_path, "w") as fh:
        json.dump(rows, fh, indent=2)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["solver"])
            w.writeheader()
            w.writerows(rows)
