"""Parameterized apparatus terminal models and their numerical linearization."""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from ..lticore import InversionError, StateSpaceForm, invert
from .catalog import CATALOG, InfeasibleSetpointError, Kind

__all__ = [
    "ApparatusError",
    "ApparatusModel",
    "CATALOG",
    "Equilibrium",
    "EquilibriumError",
    "ImpedanceSensitivity",
    "OrientationError",
    "Setpoint",
    "find_equilibrium",
    "impedance_at",
    "impedance_parameter_sensitivity",
    "jacobian",
    "linearize_admittance",
    "linearize_impedance",
    "sensitivity_step",
]


class ApparatusError(ValueError):
    pass


class EquilibriumError(ApparatusError):
    def __init__(self, message: str, history: Sequence[float] = ()):
        super().__init__(message)
        self.history = list(history)


class OrientationError(ApparatusError):
    pass


@dataclass(frozen=True)
class Setpoint:
    p: float = 0.0
    q: float = 0.0
    v: float = 1.0
    angle: float = 0.0  # rad, terminal voltage angle in the global frame

    @property
    def voltage(self) -> np.ndarray:
        return self.v * np.array([np.cos(self.angle), np.sin(self.angle)])


@dataclass(frozen=True)
class ApparatusModel:
    kind: str
    params: Mapping[str, float]
    setpoint: Setpoint = Setpoint()
    omega0: float = 2 * np.pi * 50
    name: str = ""

    def __post_init__(self):
        if self.kind not in CATALOG:
            raise ApparatusError(f"unknown apparatus model {self.kind!r}; known: {sorted(CATALOG)}")
        entry = CATALOG[self.kind]
        given = dict(self.params)
        unknown = set(given) - set(entry.params)
        if unknown:
            raise ApparatusError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        full = {}
        for key, prm in entry.params.items():
            if key in given:
                val = float(given[key])
                if not (prm.lo <= val <= prm.hi):
                    raise ApparatusError(
                        f"{self.kind}: parameter {key}={val} outside [{prm.lo}, {prm.hi}]")
                full[key] = val
            elif prm.default is not None:
                full[key] = float(prm.default)
            elif key not in entry.optional:
                raise ApparatusError(f"{self.kind}: missing parameter {key!r}")
        object.__setattr__(self, "params", MappingProxyType(full))

    @property
    def entry(self) -> Kind:
        return CATALOG[self.kind]

    @property
    def state_names(self) -> tuple[str, ...]:
        return self.entry.states(self.params)

    @property
    def parameter_names(self) -> tuple[str, ...]:
        return tuple(self.params)

    def with_param(self, name: str, value: float) -> "ApparatusModel":
        if name not in self.params:
            raise ApparatusError(f"{self.kind}: no parameter {name!r}")
        params = dict(self.params)
        params[name] = value
        # bypass bounds: finite-difference steps may sit on a bound
        new = object.__new__(ApparatusModel)
        for fld in ("kind", "setpoint", "omega0", "name"):
            object.__setattr__(new, fld, getattr(self, fld))
        object.__setattr__(new, "params", MappingProxyType(params))
        return new

    def references(self, v0) -> dict:
        try:
            return self.entry.references(self.params, self.setpoint, np.asarray(v0, float), self.omega0)
        except InfeasibleSetpointError as exc:
            raise EquilibriumError(str(exc)) from None

    def f(self, x, v, refs) -> np.ndarray:
        return self.entry.f(np.asarray(x), np.asarray(v), self.params, refs, self.omega0)

    def g(self, x, v, refs) -> np.ndarray:
        return self.entry.g(np.asarray(x), np.asarray(v), self.params, refs, self.omega0)


@dataclass(frozen=True, eq=False)
class Equilibrium:
    x: np.ndarray
    v: np.ndarray
    refs: dict
    iterations: int
    history: list = field(default_factory=list)

    @property
    def residual(self) -> float:
        return self.history[-1] if self.history else 0.0


def jacobian(fun, x, rel_step: float = 1e-7) -> np.ndarray:
    """Central-difference Jacobian with step ``rel_step * (1 + |x_j|)``.

    Function values are computed in extended precision (``np.longdouble``)
    where the platform has it: at this step size, double-precision rounding in
    ``f`` would otherwise leave relative errors near 1e-9 in the entries,
    which dominates parameter sensitivities taken by differencing two
    linearizations.
    """
    x = np.asarray(x, dtype=np.longdouble)
    f0 = np.asarray(fun(x))
    out = np.zeros((f0.size, x.size))
    for j in range(x.size):
        h = np.longdouble(rel_step) * (1 + abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        out[:, j] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (xp[j] - xm[j])
    return out


def find_equilibrium(app: ApparatusModel, terminal_voltage=None, x_init=None,
                     tol: float = 1e-10, max_iter: int = 50) -> Equilibrium:
    """Newton solve of ``f(x, v0) = 0`` at the given terminal voltage."""
    v0 = app.setpoint.voltage if terminal_voltage is None else np.asarray(terminal_voltage, float)
    refs = app.references(v0)
    x = app.entry.guess(app.params, refs, v0, app.omega0) if x_init is None else np.array(x_init, float)
    fun = lambda xx: app.f(xx, v0, refs)
    history = []
    if x.size == 0:
        return Equilibrium(x, v0, refs, 0, [0.0])
    for it in range(max_iter + 1):
        r = fun(x)
        nr = float(np.max(np.abs(r)))
        history.append(nr)
        if not np.isfinite(nr):
            break
        if nr <= tol:
            return Equilibrium(x, v0, refs, it, history)
        if it == max_iter:
            break
        try:
            dx = np.linalg.solve(jacobian(fun, x), -r)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        while True:
            xn = x + step * dx
            if np.max(np.abs(fun(xn))) < nr or step < 1e-4:
                break
            step /= 2
        x = xn
    raise EquilibriumError(
        f"{app.kind}: Newton did not converge (residual history {history[-5:]})", history)


def linearize_admittance(app: ApparatusModel, eq: Equilibrium) -> StateSpaceForm:
    """Linear model from terminal voltage to current into the apparatus."""
    x0, v0, refs = eq.x, eq.v, eq.refs
    A = jacobian(lambda x: app.f(x, v0, refs), x0) if x0.size else np.zeros((0, 0))
    B = jacobian(lambda v: app.f(x0, v, refs), v0) if x0.size else np.zeros((0, 2))
    C = jacobian(lambda x: app.g(x, v0, refs), x0) if x0.size else np.zeros((2, 0))
    D = jacobian(lambda v: app.g(x0, v, refs), v0)
    return StateSpaceForm(A, B, C, D)


def linearize_impedance(app: ApparatusModel, eq: Equilibrium) -> StateSpaceForm:
    """Impedance ``dv = Z di`` with current flowing into the apparatus."""
    try:
        return invert(linearize_admittance(app, eq))
    except InversionError as exc:
        raise OrientationError(
            f"{app.kind}: admittance cannot be inverted to an impedance ({exc}); "
            "use the admittance form") from None


def impedance_at(admittance: StateSpaceForm, s) -> np.ndarray:
    """``Z(s)`` for one ``s`` (2-D result) or many (3-D result) via ``Y(s)^{-1}``."""
    scalar = np.ndim(s) == 0
    Y = admittance.freqresp(np.atleast_1d(s))
    Z = np.linalg.inv(Y)
    return Z[0] if scalar else Z


def sensitivity_step(value: float, scale: float = 1e-5) -> float:
    return scale * (1 + abs(value))


@dataclass(frozen=True, eq=False)
class ImpedanceSensitivity:
    parameter: str
    s: np.ndarray | complex
    matrix: np.ndarray
    step: float


def impedance_parameter_sensitivity(app: ApparatusModel, eq: Equilibrium | None, name: str,
                                    lam, scale: float = 1e-5) -> ImpedanceSensitivity:
    """Forward difference ``(Z_{rho + d} - Z_rho) / d`` with ``d = scale * (1 + |rho|)``.

    The perturbed impedance is linearized at its own, re-solved equilibrium.
    ``lam`` may be a single complex frequency or an array of them.
    """
    if name not in app.params:
        raise ApparatusError(f"{app.kind}: no parameter {name!r}")
    if eq is None:
        eq = find_equilibrium(app)
    rho = app.params[name]
    d = sensitivity_step(rho, scale)
    pert = app.with_param(name, rho + d)
    try:
        eq_p = find_equilibrium(pert, eq.v)
    except EquilibriumError as exc:
        raise ApparatusError(f"{app.kind}: perturbed equilibrium for {name} infeasible: {exc}") from None
    z0 = impedance_at(linearize_admittance(app, eq), lam)
    z1 = impedance_at(linearize_admittance(pert, eq_p), lam)
    return ImpedanceSensitivity(name, lam, (z1 - z0) / d, d)
