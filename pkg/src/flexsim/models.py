"""Smooth nonlinear component models: PV array, battery, induction motor.

Each model comes as plain functions plus a ``*_block`` factory returning a
``NonlinearBlock`` wired for the circuit interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ModelDomainError
from .hybrid import NonlinearBlock

Q_E = 1.602176634e-19
K_B = 1.380649e-23
EXP_CLAMP = 500.0
SQRT3 = math.sqrt(3.0)


# -- Clarke transform --------------------------------------------------------

def clarke(abc):
    """Amplitude-invariant abc -> (alpha, beta)."""
    a, b, c = abc
    return (2.0 * a - b - c) / 3.0, (b - c) / SQRT3


def inverse_clarke(alpha, beta):
    """(alpha, beta) -> balanced abc triple."""
    return (alpha,
            -0.5 * alpha + 0.5 * SQRT3 * beta,
            -0.5 * alpha - 0.5 * SQRT3 * beta)


# -- PV array ----------------------------------------------------------------

@dataclass(frozen=True)
class PvParams:
    N_s: int = 36
    S_0: float = 1000.0
    T_ref: float = 298.15
    R_s: float = 0.005
    R_sh: float = 10.0
    I_s0: float = 1.2e-7
    I_sc0: float = 8.0
    E_g: float = 1.12
    A_ideality: float = 1.3
    C_t: float = 0.003
    K_s: float = 0.0  # not used by the state equation
    t_d: float = 2e-5
    q_e: float = Q_E
    k_B: float = K_B

    def __post_init__(self):
        if not (self.t_d > 0 and self.R_s > 0 and self.R_sh > 0 and self.N_s >= 1):
            raise ValueError("PV parameters need t_d, R_s, R_sh > 0 and N_s >= 1")


def pv_diode_voltage(I_m, V, p: PvParams):
    """Per-cell voltage across the controlled current source."""
    rp = p.R_s + p.R_sh
    return p.R_s * p.R_sh / rp * I_m + p.R_sh / (p.N_s * rp) * V


def pv_f(I_m, S, T, V, p: PvParams, full_output=False):
    """dI_m/dt of the PV array; with ``full_output`` also a saturation flag."""
    if not T > 0:
        raise ModelDomainError(f"PV temperature must be positive, got {T}")
    v_d = pv_diode_voltage(I_m, V, p)
    thermal = (p.q_e * p.E_g / (p.A_ideality * p.k_B)) * (1.0 / p.T_ref - 1.0 / T)
    arg = p.q_e * v_d / (p.A_ideality * p.k_B * T)
    saturated = arg > EXP_CLAMP
    if saturated:
        arg = EXP_CLAMP
    i_diode = p.I_s0 * (T / p.T_ref) ** 3 * math.exp(thermal) * (math.exp(arg) - 1.0)
    rate = (p.I_sc0 * (S / p.S_0) + p.C_t * (T - p.T_ref) - i_diode - I_m) / p.t_d
    return (rate, saturated) if full_output else rate


def pv_terminal_current(I_m, V, p: PvParams):
    """Current delivered at the terminals: source current minus shunt leakage."""
    return I_m - pv_diode_voltage(I_m, V, p) / p.R_sh


def pv_block(p: PvParams, S=1000.0, T=298.15, name="pv", I_m0=None, output="terminal"):
    """PV array block with input terminal voltage V.

    ``output="terminal"`` delivers the terminal current ``I_m - v_d/R_sh``,
    which depends on V, so a resistive port closes an algebraic loop.
    ``output="source"`` delivers the controlled source current ``I_m`` itself,
    for netlists that model the shunt and series resistances explicitly.
    """
    if output not in ("terminal", "source"):
        raise ValueError("output must be 'terminal' or 'source'")

    def f(x, u):
        return np.array([pv_f(x[0], S, T, u[0], p)])

    if output == "terminal":
        def g(x, u):
            return np.array([pv_terminal_current(x[0], u[0], p)])
    else:
        def g(x, u):
            return np.array([x[0]])

    return NonlinearBlock(name, 1, 1, 1, f, g, depends_on_input=output == "terminal",
                          x0=(p.I_sc0 if I_m0 is None else float(I_m0),),
                          state_names=(f"{name}.I_m",), input_names=(f"{name}.V",),
                          output_names=(f"{name}.I",))


# -- Battery -----------------------------------------------------------------

@dataclass(frozen=True)
class BatteryParams:
    E_0: float = 12.6
    K_pol: float = 0.01
    Q: float = 10.0      # Ah
    A_exp: float = 0.6
    B_exp: float = 3.0   # 1/Ah
    T_lp: float = 0.03
    verbatim_filter: bool = False

    def __post_init__(self):
        if not (self.Q > 0 and self.T_lp > 0):
            raise ValueError("battery needs Q > 0 and T_lp > 0")


def battery_voltage_discharge(c, i_star, p: BatteryParams):
    return (p.E_0 - p.K_pol * p.Q / (p.Q - c) * i_star - p.K_pol * p.Q / (p.Q - c) * c
            + p.A_exp * math.exp(-p.B_exp * c))


def battery_voltage_charge(c, i_star, p: BatteryParams):
    return (p.E_0 - p.K_pol * p.Q / (0.1 * p.Q + c) * i_star - p.K_pol * p.Q / (p.Q - c) * c
            + p.A_exp * math.exp(-p.B_exp * c))


def battery_fg(c, i_star, i_out, p: BatteryParams):
    """Return ``(dc/dt, di*/dt, E_batt)``; ``c`` in Ah, currents in A."""
    if not 0.0 <= c <= 0.95 * p.Q:
        raise ModelDomainError(f"extracted capacity {c} Ah outside [0, {0.95 * p.Q}]")
    dc = i_out / 3600.0
    if p.verbatim_filter:
        di = (i_star - i_out) / p.T_lp
    else:
        di = (i_out - i_star) / p.T_lp
    if i_star >= 0.0:
        e = battery_voltage_discharge(c, i_star, p)
    else:
        e = battery_voltage_charge(c, i_star, p)
    return dc, di, e


def battery_block(p: BatteryParams, c0=0.0, i0=0.0, name="bat"):
    """Battery block: input terminal current (discharge positive), output E_batt."""
    def f(x, u):
        dc, di, _ = battery_fg(x[0], x[1], u[0], p)
        return np.array([dc, di])

    def g(x, u):
        return np.array([battery_fg(x[0], x[1], 0.0, p)[2]])

    return NonlinearBlock(name, 2, 1, 1, f, g, depends_on_input=False,
                          x0=(float(c0), float(i0)),
                          state_names=(f"{name}.c", f"{name}.i_star"),
                          input_names=(f"{name}.i_out",), output_names=(f"{name}.E",))


# -- Induction motor ---------------------------------------------------------

@dataclass(frozen=True)
class MotorParams:
    r_s: float = 1.405
    r_r: float = 1.395
    L_m: float = 0.1722
    L_s: float = 0.178
    L_r: float = 0.178
    p_0: int = 2
    J: float = 0.0131
    T_L: float = 0.0
    torque_sign: float = 1.0

    def __post_init__(self):
        if min(self.r_s, self.r_r, self.L_m, self.L_s, self.L_r, self.J) <= 0:
            raise ValueError("motor resistances, inductances and inertia must be positive")
        if not 0.0 < self.sigma < 1.0:
            raise ValueError("leakage coefficient must lie in (0, 1)")

    @property
    def T_r(self):
        return self.L_r / self.r_r

    @property
    def sigma(self):
        return (self.L_s * self.L_r - self.L_m**2) / (self.L_s * self.L_r)


def motor_f(x, u_sd, u_sq, p: MotorParams) -> np.ndarray:
    """Stationary-frame motor state derivatives for ``(i_sd, i_sq, psi_rd, psi_rq, w2)``."""
    i_sd, i_sq, psi_d, psi_q, w = x
    s, Ls, Lr, Lm, Tr = p.sigma, p.L_s, p.L_r, p.L_m, p.T_r
    k_psi = Lm / (s * Ls * Lr * Tr)
    k_w = Lm / (s * Ls * Lr)
    k_i = (p.r_s * Lr**2 + p.r_r * Ls**2) / (s * Ls * Lr**2)
    return np.array([
        k_psi * psi_d + k_w * w * psi_q - k_i * i_sd + u_sd / (s * Ls),
        k_psi * psi_q - k_w * w * psi_d - k_i * i_sq + u_sq / (s * Ls),
        -psi_d / Tr - w * psi_q + Lm / Tr * i_sd,
        -psi_q / Tr + w * psi_d + Lm / Tr * i_sq,
        p.torque_sign * p.p_0**2 * Lm / (p.J * Lr) * (i_sq * psi_d - i_sd * psi_q)
        - p.p_0 / p.J * p.T_L,
    ])


def motor_block(p: MotorParams, name="motor", x0=(0.0, 0.0, 0.0, 0.0, 0.0)):
    """Motor block: inputs phase voltages (a, b, c), outputs phase currents (a, b, c)."""
    def f(x, u):
        u_sd, u_sq = clarke(u)
        return motor_f(x, u_sd, u_sq, p)

    def g(x, u):
        return np.array(inverse_clarke(x[0], x[1]))

    return NonlinearBlock(name, 5, 3, 3, f, g, depends_on_input=False, x0=tuple(x0),
                          state_names=tuple(f"{name}.{s}" for s in
                                            ("i_sd", "i_sq", "psi_rd", "psi_rq", "w2")),
                          input_names=tuple(f"{name}.v_{ph}" for ph in "abc"),
                          output_names=tuple(f"{name}.i_{ph}" for ph in "abc"))
