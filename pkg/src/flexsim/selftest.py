"""Invariant battery run by ``flexsim selftest``.

Every check returns ``(passed, detail)``; the detail strings contain no
timings so two runs print identical tables.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .diffops import apply_scaled, default_stencil
from .hybrid import (HybridState, HybridSystem, NonlinearBlock, TopologyMatrices,
                     derivative_cascade)
from .integrator import SimulationRun, integrate
from .reference import relative_error
from .scenario import load_shipped
from .sources import EventSchedule
from .taylor import StepController, TaylorCoefficients, advance_state
from .waveform import Waveform

EPS = np.finfo(float).eps


def _square_system():
    blk = NonlinearBlock("sq", 1, 0, 0, lambda x, u: x * x, lambda x, u: np.zeros(0),
                         x0=(1.0,))
    return HybridSystem(0, 0, blk, lambda m: TopologyMatrices.empty())


def check_stencil_moments(inject_fault=False):
    worst = 0.0
    for q_max in range(2, 6):
        for i in range(q_max):
            op = default_stencil(i, q_max)
            if inject_fault and i == 1 and q_max == 5:
                w = list(op.weights)
                w[0] += 1e-3
                op = replace(op, weights=tuple(w))
            for m in range(i + op.accuracy_order):
                worst = max(worst, op.moment_residual(m))
    return worst <= 1e-12, f"max moment residual {worst:.1e}"


def roundoff_floor(i: int, h: float, q_max: int = 5, scale: float = 1.0) -> float:
    """Error level below which the i-th cascade derivative is roundoff-dominated."""
    total = 0.0
    for k in range(1, i + 1):
        op = default_stencil(k - 1, q_max)
        total += float(np.sum(np.abs(op.weights))) * math.factorial(k) / h ** (k - 1)
    return 8 * EPS * scale * total


def derivative_orders(q_max=5, hs=None):
    """Observed convergence order of each cascade derivative on ``x' = x**2``.

    Returns ``{i: (min_pairwise_order or None, errors)}``; ``None`` means every
    error sits below the roundoff floor, i.e. the estimate is exact.
    """
    sysm = _square_system()
    state = sysm.initial_state()
    if hs is None:
        hs = [1e-2 / 2 ** k for k in range(7)]
        hs.append(1e-4)
    errs = {i: [] for i in range(1, q_max)}
    for h in hs:
        ds = derivative_cascade(state, sysm, q_max, h, np.zeros((q_max, 0)), q_max)
        for i in errs:
            est = ds.xnl[i, 0] * math.factorial(i)
            errs[i].append(abs(est - math.factorial(i)))
    out = {}
    for i, e in errs.items():
        floors = [roundoff_floor(i, h, q_max, math.factorial(i)) for h in hs]
        orders = [math.log(e[k] / e[k + 1]) / math.log(hs[k] / hs[k + 1])
                  for k in range(len(hs) - 1)
                  if e[k] > floors[k] and e[k + 1] > floors[k + 1]]
        out[i] = (min(orders) if orders else None, e)
    return out


def check_convergence(q_max=5):
    res = derivative_orders(q_max)
    parts, ok = [], True
    for i, (order, _) in res.items():
        need = q_max - i - 0.5
        if order is None:
            parts.append(f"i={i}: exact")
        else:
            parts.append(f"i={i}: {order:.2f}")
            ok &= order >= need
    return ok, ", ".join(parts)


def check_table_costs():
    counts = []
    sysm = _square_system()
    blk = replace(sysm.block, f=lambda x, u: -x)
    sysm = HybridSystem(0, 0, blk, lambda m: TopologyMatrices.empty())
    for q in (5, 3):
        run = SimulationRun(sysm, EventSchedule(), StepController(feedback_check=False),
                            (0.0, 1.0), 0.5)
        _, st = integrate(run, forced_order=q)
        per_step = set(st.step_f_evals)
        counts.append((q, per_step, st.f_evals == sum(st.step_f_evals)))
    ok = counts[0][1] == {17} and counts[1][1] == {9} and all(c[2] for c in counts)
    return ok, "; ".join(f"q={q}: {sorted(s)}" for q, s, _ in counts)


def check_pwl_exactness():
    A = np.array([[-1.0, -1.0], [1.0, -0.5]])
    mats = TopologyMatrices(A, np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((0, 2)),
                            np.zeros((0, 0)), np.zeros((0, 0)))
    sysm = HybridSystem(2, 0, None, lambda m: mats, x1_0=(1.0, 0.3))
    ds = derivative_cascade(sysm.initial_state(), sysm, 5, 1e-3, np.zeros((5, 0)), 5)
    x, worst = np.array([1.0, 0.3]), 0.0
    for k in range(6):
        expect = np.linalg.matrix_power(A, k) @ x / math.factorial(k)
        worst = max(worst, float(np.max(np.abs(ds.x1[k] - expect) / np.maximum(
            np.abs(expect), 1e-300))))
    return worst <= 1e-12, f"max relative deviation {worst:.1e}"


def check_stability_identity():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        z = 2.0 * math.sqrt(rng.random()) * np.exp(2j * math.pi * rng.random())
        for q in range(2, 6):
            coeffs = np.array([[z ** k / math.factorial(k)] for k in range(q + 1)])
            tc = TaylorCoefficients(0.0, coeffs.real)
            tci = TaylorCoefficients(0.0, coeffs.imag)
            got = advance_state(tc, 1.0, q)[0] + 1j * advance_state(tci, 1.0, q)[0]
            expect = sum(z ** k / math.factorial(k) for k in range(q + 1))
            worst = max(worst, abs(got - expect))
    return worst <= 1e-14, f"max deviation {worst:.1e}"


def check_event_continuity():
    sc = load_shipped("buck_pv")
    _, st = integrate(sc.run(t_end=5e-4))
    jumps = max((e.jump for e in st.events), default=0.0)
    res = max((e.loop_residual for e in st.events), default=0.0)
    ok = bool(st.events) and jumps == 0.0 and res <= 1e-10
    return ok, f"{len(st.events)} events, max jump {jumps:.1e}, max residual {res:.1e}"


def check_metric():
    ref = Waveform([0.0, 1.0], {"y": [1.0, 1.0], "z": [0.0, 0.0]})
    sim = Waveform([0.0, 1.0], {"y": [1.1, 0.9], "z": [1e-7, -1e-7]})
    a = relative_error(ref, ref, 1e-6, ["y"])
    b = relative_error(sim, ref, 1e-6, ["y"])
    c = relative_error(sim, ref, 1e-6, ["z"])
    ok = a == 0.0 and abs(b - 0.1) < 1e-12 and abs(c - 0.1) < 1e-12
    return ok, f"identity {a:g}, examples {b:.6f} {c:.6f}"


def check_stencil_apply():
    op = default_stencil(2, 5)
    h = 0.1
    got = apply_scaled(op, [(c * h) ** 2 for c in op.nodes])
    return abs(got - 2 * h * h) < 1e-15, f"h^2 u'' estimate {got:.15f}"


CHECKS = [
    ("stencil moment conditions", check_stencil_moments),
    ("stencil application", check_stencil_apply),
    ("derivative convergence orders", check_convergence),
    ("cost per step (17 / 9)", check_table_costs),
    ("PWL cascade exactness", check_pwl_exactness),
    ("Taylor stability identity", check_stability_identity),
    ("event continuity (buck_pv)", check_event_continuity),
    ("relative error metric", check_metric),
]


def run_selftest(inject_fault=False, out=print):
    """Run every check, print a table and return the number of failures."""
    failures = 0
    width = max(len(n) for n, _ in CHECKS)
    for name, fn in CHECKS:
        try:
            if fn is check_stencil_moments:
                ok, detail = fn(inject_fault)
            else:
                ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failures += not ok
        out(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    out(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return failures
