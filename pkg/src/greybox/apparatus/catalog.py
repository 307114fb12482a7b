"""Bundled apparatus kinds.

Every kind is written in admittance causality: the terminal voltage ``v``
(dq, global synchronous frame) is the input and the current flowing INTO the
apparatus is the output.  Impedances, inductances and capacitances are per
unit at the base frequency ``w0``; time is in seconds.  The state equations
are written out in ``docs/apparatus.md``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

J = np.array([[0.0, -1.0], [1.0, 0.0]])


def rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


class InfeasibleSetpointError(ValueError):
    pass


@dataclass(frozen=True)
class Param:
    default: float | None
    lo: float
    hi: float
    unit: str
    doc: str


@dataclass(frozen=True)
class Kind:
    """One catalog entry.

    ``f(x, v, p, ref, w0)`` and ``g(x, v, p, ref, w0)`` give the state
    derivative and the terminal current.  ``references`` fixes internal set
    points from the terminal set point; ``guess`` gives a Newton start.
    """

    name: str
    states: Callable[[dict], tuple[str, ...]]
    params: dict[str, Param]
    f: Callable
    g: Callable
    references: Callable
    guess: Callable
    doc: str = ""
    optional: frozenset = field(default_factory=frozenset)


# -- rl_branch ----------------------------------------------------------------

def _rl_f(x, v, p, ref, w0):
    return (w0 / p["L"]) * (v - p["R"] * x) - w0 * (J @ x)


def _rl_g(x, v, p, ref, w0):
    return x


def _rl_guess(p, ref, v0, w0):
    return np.linalg.solve(p["R"] * np.eye(2) + p["L"] * J, v0)


RL_BRANCH = Kind(
    name="rl_branch",
    states=lambda p: ("i_d", "i_q"),
    params={
        "R": Param(None, 0.0, 1e3, "pu", "series resistance"),
        "L": Param(None, 1e-6, 1e3, "pu", "series inductance (reactance at w0)"),
    },
    f=_rl_f,
    g=_rl_g,
    references=lambda p, sp, v0, w0: {},
    guess=_rl_guess,
    doc="series R-L to ground",
)


# -- swing_sg -------------------------------------------------------------------

def _sg_emf(x, p):
    mag = x[4] if "K_F" in p else p["E_prime"]
    return mag * np.array([np.cos(x[0]), np.sin(x[0])])


def _sg_f(x, v, p, ref, w0):
    delta, omega, i = x[0], x[1], x[2:4]
    e = _sg_emf(x, p)
    p_e = e @ i
    out = [
        w0 * omega,
        (ref["P_m"] - p_e - p["D_damp"] * omega) / (2 * p["H"]),
    ]
    di = (w0 / p["X_prime"]) * (e - v - p["R_s"] * i) - w0 * (J @ i)
    out.extend(di)
    if "K_F" in p:
        vmag = np.sqrt(v[0] ** 2 + v[1] ** 2)
        out.append((p["E_prime"] + p["K_F"] * (ref["V_ref"] - vmag) - x[4]) / p["T_A"])
    return np.array(out)


def _sg_g(x, v, p, ref, w0):
    return -x[2:4]


def _sg_refs(p, sp, v0, w0):
    vmag = float(np.hypot(*v0))
    limit = p["E_prime"] * vmag / p["X_prime"]
    if abs(sp.p) > limit:
        raise InfeasibleSetpointError(
            f"swing_sg: |P|={abs(sp.p):.4g} exceeds E'V/X'={limit:.4g}")
    return {"P_m": sp.p, "V_ref": vmag}


def _sg_guess(p, ref, v0, w0):
    vmag = np.hypot(*v0)
    delta = np.arctan2(v0[1], v0[0]) + np.arcsin(ref["P_m"] * p["X_prime"] / (p["E_prime"] * vmag))
    e = p["E_prime"] * np.array([np.cos(delta), np.sin(delta)])
    i = np.linalg.solve(p["R_s"] * np.eye(2) + p["X_prime"] * J, e - v0)
    x = [delta, 0.0, i[0], i[1]]
    if "K_F" in p:
        x.append(p["E_prime"])
    return np.array(x)


SWING_SG = Kind(
    name="swing_sg",
    states=lambda p: ("delta", "omega", "i_d", "i_q") + (("e_mag",) if "K_F" in p else ()),
    params={
        "H": Param(None, 1e-3, 100.0, "s", "inertia constant"),
        "D_damp": Param(None, 0.0, 1e3, "pu", "damping torque coefficient"),
        "X_prime": Param(None, 1e-3, 10.0, "pu", "transient reactance"),
        "E_prime": Param(None, 0.1, 5.0, "pu", "EMF set point behind X'"),
        "R_s": Param(0.0, 0.0, 1.0, "pu", "stator resistance"),
        "K_F": Param(None, 0.0, 1e3, "pu", "voltage regulator gain (optional)"),
        "T_A": Param(0.1, 1e-3, 10.0, "s", "voltage regulator time constant"),
    },
    f=_sg_f,
    g=_sg_g,
    references=_sg_refs,
    guess=_sg_guess,
    doc="classical swing machine behind transient reactance, optional first-order AVR",
    optional=frozenset({"K_F"}),
)


# -- gfl_inverter ---------------------------------------------------------------

def _gfl_gains(p, w0):
    wi = 2 * np.pi * p["f_i"]
    wp = 2 * np.pi * p["f_pll"]
    lf = p["L_f"] / w0
    return wi * lf, wi * wi * lf / 4, 2 * 0.707 * wp, wp * wp


def _gfl_f(x, v, p, ref, w0):
    i, xi, theta, xpll = x[0:2], x[2:4], x[4], x[5]
    kpi, kii, kpp, kip = _gfl_gains(p, w0)
    back = rot(-theta)
    v_loc = back @ v
    i_loc = back @ i
    err = ref["i_ref"] - i_loc
    u = rot(theta) @ (kpi * err + xi)
    di = (w0 / p["L_f"]) * (u - v - p["R_f"] * i) - w0 * (J @ i)
    return np.concatenate([di, kii * err, [kpp * v_loc[1] + xpll, kip * v_loc[1]]])


def _gfl_g(x, v, p, ref, w0):
    return -x[0:2]


def _gfl_refs(p, sp, v0, w0):
    vmag = float(np.hypot(*v0))
    return {"i_ref": np.array([sp.p / vmag, -sp.q / vmag])}


def _gfl_guess(p, ref, v0, w0):
    theta = np.arctan2(v0[1], v0[0])
    i_loc = ref["i_ref"]
    i = rot(theta) @ i_loc
    xi = rot(-theta) @ v0 + p["R_f"] * i_loc
    return np.concatenate([i, xi, [theta, 0.0]])


GFL_INVERTER = Kind(
    name="gfl_inverter",
    states=lambda p: ("i_d", "i_q", "xi_d", "xi_q", "theta_pll", "x_pll"),
    params={
        "f_i": Param(None, 1.0, 1e4, "Hz", "current-loop bandwidth"),
        "f_pll": Param(None, 0.1, 1e3, "Hz", "PLL bandwidth"),
        "L_f": Param(None, 1e-4, 10.0, "pu", "filter inductance"),
        "R_f": Param(0.01, 0.0, 1.0, "pu", "filter resistance"),
    },
    f=_gfl_f,
    g=_gfl_g,
    references=_gfl_refs,
    guess=_gfl_guess,
    doc="grid-following inverter: L filter, PI current control (no dq decoupling), second-order PLL",
)


# -- gfm_droop ------------------------------------------------------------------

def _gfm_f(x, v, p, ref, w0):
    theta, p_f, i_f, v_c, i = x[0], x[1], x[2:4], x[4:6], x[6:8]
    wv = 2 * np.pi * p["f_v"]
    wp = 2 * np.pi * p["f_p"]
    cf = p["C_f"] / w0
    v_ref = ref["V_ref"] * np.array([np.cos(theta), np.sin(theta)])
    i_f_ref = i + p["C_f"] * (J @ v_c) + cf * wv * (v_ref - v_c)
    u = v_c + 5 * wv * (p["L_f"] / w0) * (i_f_ref - i_f)
    return np.concatenate([
        [w0 * p["K_D"] * (ref["P_set"] - p_f), wp * (v_c @ i - p_f)],
        (w0 / p["L_f"]) * (u - v_c - p["R_f"] * i_f) - w0 * (J @ i_f),
        (w0 / p["C_f"]) * (i_f - i) - w0 * (J @ v_c),
        (w0 / p["L_g"]) * (v_c - v - p["R_f"] * i) - w0 * (J @ i),
    ])


def _gfm_g(x, v, p, ref, w0):
    return -x[6:8]


def _gfm_refs(p, sp, v0, w0):
    vmag = float(np.hypot(*v0))
    limit = vmag * vmag / p["L_g"]
    if abs(sp.p) >= limit:
        raise InfeasibleSetpointError(f"gfm_droop: |P|={abs(sp.p):.4g} exceeds V^2/L_g={limit:.4g}")
    return {"P_set": sp.p, "V_ref": vmag}


def _gfm_guess(p, ref, v0, w0):
    vmag = np.hypot(*v0)
    theta = np.arctan2(v0[1], v0[0]) + np.arcsin(ref["P_set"] * p["L_g"] / vmag ** 2)
    v_c = ref["V_ref"] * np.array([np.cos(theta), np.sin(theta)])
    i = np.linalg.solve(p["R_f"] * np.eye(2) + p["L_g"] * J, v_c - v0)
    i_f = i + p["C_f"] * (J @ v_c)
    return np.concatenate([[theta, v_c @ i], i_f, v_c, i])


GFM_DROOP = Kind(
    name="gfm_droop",
    states=lambda p: ("theta", "p_f", "if_d", "if_q", "vc_d", "vc_q", "i_d", "i_q"),
    params={
        "K_D": Param(None, 1e-4, 10.0, "pu", "frequency droop gain (dw/w0 per pu P)"),
        "f_v": Param(None, 1.0, 1e4, "Hz", "voltage-loop bandwidth"),
        "L_f": Param(None, 1e-4, 10.0, "pu", "converter-side filter inductance"),
        "C_f": Param(None, 1e-4, 10.0, "pu", "filter capacitance (susceptance at w0)"),
        "L_g": Param(0.05, 1e-4, 10.0, "pu", "grid-side coupling inductance"),
        "R_f": Param(0.01, 0.0, 1.0, "pu", "resistance of each inductor"),
        "f_p": Param(10.0, 0.1, 1e3, "Hz", "power measurement filter bandwidth"),
    },
    f=_gfm_f,
    g=_gfm_g,
    references=_gfm_refs,
    guess=_gfm_guess,
    doc="droop-controlled grid-forming inverter with LCL filter",
)


# -- placeholder for passive nodes ----------------------------------------------

PLACEHOLDER = Kind(
    name="placeholder",
    states=lambda p: (),
    params={"R": Param(1e6, 1.0, 1e12, "pu", "placeholder resistance")},
    f=lambda x, v, p, ref, w0: np.zeros(0),
    g=lambda x, v, p, ref, w0: v / p["R"],
    references=lambda p, sp, v0, w0: {},
    guess=lambda p, ref, v0, w0: np.zeros(0),
    doc="high-impedance stand-in for nodes without apparatus",
)


CATALOG: dict[str, Kind] = {k.name: k for k in (RL_BRANCH, SWING_SG, GFL_INVERTER, GFM_DROOP, PLACEHOLDER)}
