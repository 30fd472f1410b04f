"""Acceptance criteria 1 to 10.

Each test records one PASS/FAIL line through the ``acceptance`` fixture
before asserting, so the summary at the end of the pytest run lists every
criterion whether or not it held.  Run this file directly for the same
summary without the rest of the suite.
"""

import cmath
import math
import time

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from flexsim.hybrid import (HybridState, HybridSystem, NonlinearBlock, TopologyMatrices,
                            derivative_cascade, first_derivatives)
from flexsim.integrator import integrate
from flexsim.models import (BatteryParams, MotorParams, PvParams, battery_fg,
                            battery_voltage_charge, battery_voltage_discharge, motor_f, pv_f)
from flexsim.reference import bench, reference_run, relative_error
from flexsim.scenario import load_shipped
from flexsim.selftest import roundoff_floor
from flexsim.taylor import TaylorCoefficients, advance_state
from flexsim.waveform import Waveform

Q_MAX = 5


def _scalar_system(f, x0):
    blk = NonlinearBlock("ode", 1, 0, 0, f, lambda x, u: np.zeros(0), x0=(x0,))
    return HybridSystem(0, 0, blk, lambda m: TopologyMatrices.empty())


def _observed_orders(hs, errs, floors):
    """Pairwise log-log slopes over pairs whose errors both exceed the floor."""
    return [math.log(errs[k] / errs[k + 1]) / math.log(hs[k] / hs[k + 1])
            for k in range(len(hs) - 1)
            if errs[k] > floors[k] and errs[k + 1] > floors[k + 1]]


def _cascade_errors(sysm, exact, hs):
    state = sysm.initial_state()
    errs = {i: [] for i in range(1, Q_MAX)}
    for h in hs:
        ds = derivative_cascade(state, sysm, Q_MAX, h, np.zeros((Q_MAX, 0)), Q_MAX)
        for i in errs:
            errs[i].append(abs(ds.xnl[i, 0] * math.factorial(i) - exact(i)))
    return errs


# -- 1 ------------------------------------------------------------------------

def test_criterion_01_derivative_convergence(acceptance):
    hs = [1e-2 / 2**k for k in range(8)]  # 1e-2 down to 7.8e-5
    t0 = time.perf_counter()
    sysm = _scalar_system(lambda x, u: x * x, 1.0)
    errs = _cascade_errors(sysm, math.factorial, hs)
    elapsed = time.perf_counter() - t0

    ok, parts = elapsed < 1.0, []
    for i, e in errs.items():
        floors = [roundoff_floor(i, h, Q_MAX, math.factorial(i)) for h in hs]
        orders = _observed_orders(hs, e, floors)
        need = Q_MAX - i - 0.5
        if orders:
            ok &= min(orders) >= need
            parts.append(f"i={i} order {min(orders):.2f} (need {need})")
        else:
            # every error sits at round-off level: the estimate is exact
            ok &= max(e) <= max(floors)
            parts.append(f"i={i} exact (max err {max(e):.1e})")
    acceptance(1, ok, "; ".join(parts) + f"; {elapsed * 1e3:.0f} ms")
    assert ok


def test_criterion_01_supplementary_nonpolynomial():
    # x' = exp(-x), x(0) = 0 has x(t) = log(1 + t), so x^(k)(0) = (-1)^(k-1) (k-1)!.
    # Unlike x' = x**2 the stencils are not exact here, so the orders are visible.
    hs = [1e-1 / 2**k for k in range(7)]
    sysm = _scalar_system(lambda x, u: np.exp(-x), 0.0)
    errs = _cascade_errors(sysm, lambda k: (-1) ** (k - 1) * math.factorial(k - 1), hs)
    for i in range(2, Q_MAX):
        floors = [roundoff_floor(i, h, Q_MAX, math.factorial(i)) for h in hs]
        orders = _observed_orders(hs, errs[i], floors)
        assert orders, f"i={i}: no error above round-off"
        assert min(orders) >= Q_MAX - i - 0.5


# -- 2 ------------------------------------------------------------------------

def test_criterion_02_pwl_exactness(acceptance):
    # series RLC with a parallel load: R=0.5, L=1e-3, C=1e-4, Rp=20
    A = np.array([[-0.5 / 1e-3, -1.0 / 1e-3],
                  [1.0 / 1e-4, -1.0 / (20.0 * 1e-4)]])
    mats = TopologyMatrices(A, np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((0, 2)),
                            np.zeros((0, 0)), np.zeros((0, 0)))
    x0 = np.array([0.7, -3.0])
    sysm = HybridSystem(2, 0, None, lambda m: mats, x1_0=tuple(x0))
    t0 = time.perf_counter()
    ds = derivative_cascade(sysm.initial_state(), sysm, Q_MAX, 1e-6,
                            np.zeros((Q_MAX, 0)), Q_MAX)
    elapsed = time.perf_counter() - t0
    worst = 0.0
    for k in range(Q_MAX + 1):
        expect = np.linalg.matrix_power(A, k) @ x0 / math.factorial(k)
        worst = max(worst, float(np.max(np.abs(ds.x1[k] - expect) / np.abs(expect))))
    ok = worst <= 1e-12 and elapsed < 1.0
    acceptance(2, ok, f"max relative deviation {worst:.1e} for k<=5; {elapsed * 1e3:.1f} ms")
    assert ok


# -- 3 ------------------------------------------------------------------------

def test_criterion_03_cost_per_step(acceptance):
    sc = load_shipped("pv_rc")
    assert sc.system.n_nl == 1
    seen = {}
    for q in (5, 3):
        _, st = integrate(sc.run(), forced_order=q)
        seen[q] = (set(st.step_f_evals), st.f_evals == sum(st.step_f_evals) + st.check_f_evals)
    ok = seen[5] == ({17}, True) and seen[3] == ({9}, True)
    acceptance(3, ok, f"per-step f-evals q=5: {sorted(seen[5][0])}, q=3: {sorted(seen[3][0])}; "
                      f"totals reconcile: {seen[5][1] and seen[3][1]}")
    assert ok


# -- 4 ------------------------------------------------------------------------

def test_criterion_04_combined_step_order(acceptance):
    sysm = load_shipped("pv_rc").system
    state = sysm.initial_state()

    def rhs(t, x):
        st = HybridState(t, x[:sysm.n1], x[sysm.n1:], 0)
        return first_derivatives(st, sysm, np.zeros(0)).dx

    def exact(h):
        return solve_ivp(rhs, (0.0, h), state.x, method="DOP853",
                         rtol=2.5e-14, atol=1e-14).y[:, -1]

    floor = 1e-13 * float(np.max(np.abs(state.x)))
    ok, parts = True, []
    for q, h0 in ((2, 4e-6), (3, 4e-6), (4, 8e-6), (5, 1.6e-5)):
        hs = [h0 / 2**k for k in range(6)]
        errs = []
        for h in hs:
            # adaptivity off: the differentiation step is tied to the step size
            ds = derivative_cascade(state, sysm, Q_MAX, h, np.zeros((Q_MAX, 0)), Q_MAX)
            tc = TaylorCoefficients(0.0, ds.state_coeffs())
            errs.append(float(np.max(np.abs(advance_state(tc, h, q) - exact(h)))))
        orders = _observed_orders(hs, errs, [floor] * len(hs))
        ok &= bool(orders) and min(orders) >= q + 0.5
        parts.append(f"q={q} order {min(orders):.2f}")
    acceptance(4, ok, "; ".join(parts))
    assert ok


# -- 5 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def buck_pv():
    sc = load_shipped("buck_pv")
    ref, _ = reference_run(sc.run(), rel_tol=1e-10)
    return sc, ref


def test_criterion_05_oracle_equivalence(acceptance, buck_pv):
    sc, ref = buck_pv
    run = sc.run(rel_tol=1e-6)
    t0 = time.perf_counter()
    wf, st = integrate(run)
    elapsed = time.perf_counter() - t0
    err = relative_error(wf, ref, sc.metric_abs_tol)
    ok = err <= 1e-4 and elapsed < 30.0
    acceptance(5, ok, f"buck_pv error {err:.2e} vs DP45 at 1e-10; flexible run {elapsed:.1f} s, "
                      f"{st.accepted} steps, {len(st.events)} events")
    assert ok


# -- 6 ------------------------------------------------------------------------

def test_criterion_06_efficiency(acceptance):
    sc = load_shipped("inverter_motor")
    run = sc.run()
    ref, _ = reference_run(run)
    tols = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7]
    cells = bench(run, tols, ("taylor", "dp45"), sc.metric_abs_tol, ref)
    assert not [c for c in cells if c.error]
    by = {(c.solver, c.rel_tol): c for c in cells}

    def cheapest(solver):
        good = [by[solver, r] for r in tols if by[solver, r].err_rel <= 1e-4]
        return min(good, key=lambda c: c.f_evals) if good else None

    ty, dp = cheapest("taylor"), cheapest("dp45")
    order_lo, order_hi = by["taylor", 1e-3].avg_order, by["taylor", 1e-7].avg_order
    dp_orders = {by["dp45", r].avg_order for r in tols}
    ok = (ty is not None and dp is not None and ty.f_evals <= dp.f_evals
          and order_hi > order_lo and dp_orders == {5.0})
    acceptance(6, ok, (f"f-evals at error <= 1e-4: flexible {ty.f_evals if ty else 'none'} "
                       f"(rel_tol {ty.rel_tol if ty else '-'}), DP45 {dp.f_evals if dp else 'none'} "
                       f"(rel_tol {dp.rel_tol if dp else '-'}); flexible avg order "
                       f"{order_lo:.3f} -> {order_hi:.3f}; DP45 orders {sorted(dp_orders)}"))
    assert ok


# -- 7 ------------------------------------------------------------------------

def test_criterion_07_stability_identity(acceptance):
    rng = np.random.default_rng(20261016)
    worst = 0.0
    for _ in range(20):
        z = 2.0 * math.sqrt(rng.random()) * cmath.exp(2j * math.pi * rng.random())
        x0 = 1.0
        for q in range(2, Q_MAX + 1):
            # exact recursion for x' = lam x with h = 1: c_k = z^k / k! * x0
            c = np.array([[z**k / math.factorial(k) * x0] for k in range(q + 1)])
            step = (advance_state(TaylorCoefficients(0.0, c.real), 1.0, q)[0]
                    + 1j * advance_state(TaylorCoefficients(0.0, c.imag), 1.0, q)[0])
            expect = x0 * sum(z**k / math.factorial(k) for k in range(q + 1))
            worst = max(worst, abs(step - expect))
    ok = worst <= 8 * np.finfo(float).eps
    acceptance(7, ok, f"max deviation {worst:.1e} over 20 samples, q=2..5")
    assert ok


# -- 8 ------------------------------------------------------------------------

def test_criterion_08_event_continuity(acceptance):
    parts, ok = [], True
    for name, t_end in (("buck_pv", None), ("inverter_motor", 5e-3)):
        sc = load_shipped(name)
        _, st = integrate(sc.run(t_end=t_end))
        gates = [e for e in st.events if e.mask_before != e.mask_after]
        jump = max(e.jump for e in st.events)
        res = max(e.loop_residual for e in st.events)
        ok &= bool(gates) and jump == 0.0 and res <= 1e-10
        parts.append(f"{name}: {len(gates)} gate events, max jump {jump:.1e}, "
                     f"max residual {res:.1e}")
    acceptance(8, ok, "; ".join(parts))
    assert ok


# -- 9 ------------------------------------------------------------------------

def _pv_oracle(I_m, S, T, V, p):
    # independent transcription: thermal voltage form
    vt = p.A_ideality * p.k_B * T / p.q_e
    shunt = p.R_sh / (p.R_s + p.R_sh)
    v_d = shunt * (p.R_s * I_m + V / p.N_s)
    i_ph = p.I_sc0 * S / p.S_0 + p.C_t * (T - p.T_ref)
    i_0 = p.I_s0 * (T / p.T_ref) ** 3 * math.exp(p.E_g / (p.A_ideality * p.k_B / p.q_e)
                                                 * (1 / p.T_ref - 1 / T))
    return (i_ph - i_0 * math.expm1(v_d / vt) - I_m) / p.t_d


def _battery_oracle(c, i_star, p):
    k = p.K_pol * p.Q
    pol = k / (p.Q - c) if i_star >= 0 else k / (0.1 * p.Q + c)
    return p.E_0 - pol * i_star - k * c / (p.Q - c) + p.A_exp * math.exp(-p.B_exp * c)


def _motor_oracle(x, u_sd, u_sq, p):
    i_d, i_q, f_d, f_q, w = x
    tr = p.L_r / p.r_r
    sig = 1 - p.L_m**2 / (p.L_s * p.L_r)
    a = p.L_m / (sig * p.L_s * p.L_r)
    damp = p.r_s / (sig * p.L_s) + p.r_r * p.L_s / (sig * p.L_r**2)
    di_d = a / tr * f_d + a * w * f_q - damp * i_d + u_sd / (sig * p.L_s)
    di_q = a / tr * f_q - a * w * f_d - damp * i_q + u_sq / (sig * p.L_s)
    df_d = (p.L_m * i_d - f_d) / tr - w * f_q
    df_q = (p.L_m * i_q - f_q) / tr + w * f_d
    dw = (p.torque_sign * p.p_0**2 * p.L_m * (i_q * f_d - i_d * f_q) - p.p_0 * p.L_r * p.T_L) \
        / (p.J * p.L_r)
    return np.array([di_d, di_q, df_d, df_q, dw])


def test_criterion_09_models(acceptance):
    rng = np.random.default_rng(9)
    bp = BatteryParams()
    cont = max(abs(battery_voltage_discharge(c, 0.0, bp) - battery_voltage_charge(c, 0.0, bp))
               for c in rng.uniform(0.0, 0.9 * bp.Q, 100))

    pp = PvParams()
    v_short = -pp.N_s * pp.R_s * pp.I_sc0  # makes v_d vanish at I_m = I_sc0
    pv_eq = abs(pv_f(pp.I_sc0, pp.S_0, pp.T_ref, v_short, pp))
    mp = MotorParams()
    motor_eq = float(np.max(np.abs(motor_f(np.zeros(5), 0.0, 0.0, mp))))

    pv_dev = bat_dev = mot_dev = 0.0
    for _ in range(50):
        I_m, S = rng.uniform(0, 9), rng.uniform(100, 1200)
        T, V = rng.uniform(270, 330), rng.uniform(0, 22)
        ref = _pv_oracle(I_m, S, T, V, pp)
        pv_dev = max(pv_dev, abs(pv_f(I_m, S, T, V, pp) - ref) / max(1.0, abs(ref)))
        c, i_star = rng.uniform(0, 0.9 * bp.Q), rng.uniform(-20, 20)
        e = battery_fg(c, i_star, 0.0, bp)[2]
        bat_dev = max(bat_dev, abs(e - _battery_oracle(c, i_star, bp)))
        mp_r = MotorParams(r_s=rng.uniform(0.5, 2), r_r=rng.uniform(0.5, 2),
                           L_m=0.17, L_s=0.18, L_r=rng.uniform(0.175, 0.19),
                           p_0=int(rng.integers(1, 4)), J=rng.uniform(0.01, 0.1),
                           T_L=rng.uniform(-5, 5))
        x = rng.normal(size=5) * np.array([10, 10, 1, 1, 100])
        u = rng.normal(size=2) * 100
        got, want = motor_f(x, *u, mp_r), _motor_oracle(x, *u, mp_r)
        mot_dev = max(mot_dev, float(np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want)))))

    ok = (cont == 0.0 and pv_eq <= 1e-12 and motor_eq == 0.0
          and max(pv_dev, bat_dev, mot_dev) <= 1e-12)
    acceptance(9, ok, f"battery branch gap {cont:.1e}; PV short-circuit dI/dt {pv_eq:.1e}; "
                      f"motor origin {motor_eq:.1e}; oracle deviations pv {pv_dev:.1e}, "
                      f"battery {bat_dev:.1e}, motor {mot_dev:.1e}")
    assert ok


# -- 10 -----------------------------------------------------------------------

def test_criterion_10_metric(acceptance):
    rng = np.random.default_rng(10)
    t = np.linspace(0.0, 1.0, 11)
    wf = Waveform(t, {"a": rng.normal(size=11), "b": np.zeros(11)})
    identity = relative_error(wf, wf, 1e-6)
    ref = Waveform([0.0, 1.0], {"y": [1.0, 1.0], "z": [0.0, 0.0]})
    sim = Waveform([0.0, 1.0], {"y": [1.1, 0.9], "z": [1e-7, -1e-7]})
    ex1 = relative_error(sim, ref, 1e-6, ["y"])
    ex2 = relative_error(sim, ref, 1e-6, ["z"])
    # "exactly" up to the representation error of 1.1, 0.9 and 1e-7 in binary
    ok = identity == 0.0 and ex1 == pytest.approx(0.1, abs=1e-15) \
        and ex2 == pytest.approx(0.1, abs=1e-15)
    acceptance(10, ok, f"identity {identity}; examples {ex1!r}, {ex2!r}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-rA"]))
