"""Impedance participation factors and the grey-box participation layers.

For a simple mode ``lam`` of the whole system, the impedance participation
factor of the apparatus at node ``k`` is ``p = -(Res_lam Yhat_kk)^H``.  A small
impedance change ``dZ`` of that apparatus moves the mode by ``<p, dZ(lam)>``
to first order (Frobenius inner product, conjugate on the left).

Layers, in order of increasing transparency:

* layer 1, ``||p|| ||Z_k(lam)||``: the largest mode shift per unit relative
  impedance change;
* layer 2, ``<p, Z_k(lam)>``: the shift when the apparatus impedance is scaled
  as ``Z_k -> (1 + eps) Z_k``.  A positive real part means that raising the
  impedance (scaling the apparatus down) moves the mode to the right, so
  scaling the apparatus up is stabilizing;
* layer 3, ``<p, dZ_k(lam)/d rho>``: first-order sensitivity to each internal
  parameter ``rho``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla

from .apparatus import ApparatusError, impedance_parameter_sensitivity, sensitivity_step
from .lticore import (
    StateSpaceForm,
    feedback,
    frobenius_inner,
    frobenius_norm,
    state_participation_matrix,
)
from .netmodel import WholeSystemModel, linearize_for_frame, realization_delta, with_admittance

__all__ = [
    "AdmittanceParticipationFactor",
    "ImpedanceParticipationFactor",
    "LayerReport",
    "LemmaCheck",
    "MatchingError",
    "ShiftWarning",
    "admittance_participation_factor",
    "impedance_participation_factor",
    "impedance_sensitivity",
    "layer1_index",
    "layer2_index",
    "layer_report",
    "match_eigenvalue",
    "parameter_participation_factor",
    "parameter_shift_fd",
    "perturb_impedance",
    "perturbed_shift",
    "predict_eigenvalue_shift",
    "scaled_impedance_shift",
    "select_modes",
    "state_pf_via_chain",
    "verify_lemma_fd",
]


class MatchingError(RuntimeError):
    pass


class ShiftWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class ImpedanceParticipationFactor:
    mode: complex
    node: int
    matrix: np.ndarray      # p = -(Res Yhat_kk)^H
    residue: np.ndarray     # Res Yhat_kk at the mode
    z_at_mode: np.ndarray   # apparatus impedance Z_k(mode)

    @property
    def layer1(self) -> float:
        return layer1_index(self.matrix, self.z_at_mode)

    @property
    def layer2(self) -> complex:
        return layer2_index(self.matrix, self.z_at_mode)


@dataclass(frozen=True, eq=False)
class AdmittanceParticipationFactor:
    mode: complex
    node: int
    matrix: np.ndarray      # -(Res Zhat_kk)^H
    residue: np.ndarray
    y_at_mode: np.ndarray   # apparatus admittance Y_k(mode)


def _check_mode(model: WholeSystemModel, lam: complex) -> int:
    return model.eigensystem.index_of(complex(lam))


def impedance_participation_factor(model: WholeSystemModel, k: int, lam: complex) -> ImpedanceParticipationFactor:
    """Participation factor of the apparatus at node ``k`` in mode ``lam``."""
    ch = model.channels(k)
    es = model.eigensystem
    n = _check_mode(model, lam)
    real = model.realization
    res = np.outer(real.C[ch] @ es.right[:, n], es.left[n] @ real.B[:, ch])
    lam = complex(es.eigenvalues[n])
    return ImpedanceParticipationFactor(lam, k, -res.conj().T, res, model.apparatus_impedance_at(k, lam))


def admittance_participation_factor(model: WholeSystemModel, k: int, lam: complex) -> AdmittanceParticipationFactor:
    """Dual factor from the whole-system impedance ``Zhat = (Y_net + Y)^{-1}``.

    A small admittance change ``dY`` of apparatus ``k`` moves the mode by
    ``<p_Y, dY(lam)>``.
    """
    ch = model.channels(k)
    real = model.impedance_realization
    es = model.impedance_eigensystem
    n = es.index_of(complex(lam))
    res = np.outer(real.C[ch] @ es.right[:, n], es.left[n] @ real.B[:, ch])
    lam = complex(es.eigenvalues[n])
    y = model.apparatus_admittances[k - 1](lam)
    return AdmittanceParticipationFactor(lam, k, -res.conj().T, res, y)


def _matrix(p) -> np.ndarray:
    return p.matrix if isinstance(p, (ImpedanceParticipationFactor, AdmittanceParticipationFactor)) else np.asarray(p)


def predict_eigenvalue_shift(p, dZ) -> complex:
    """First-order mode shift ``<p, dZ>`` for an impedance change ``dZ`` at the mode."""
    dZ = np.atleast_2d(np.asarray(dZ, dtype=complex))
    pm = _matrix(p)
    shift = frobenius_inner(pm, dZ)
    if isinstance(p, ImpedanceParticipationFactor):
        via_trace = -complex(np.trace(p.residue @ dZ))
        if abs(shift - via_trace) > 1e-10 * (abs(shift) + frobenius_norm(pm) * frobenius_norm(dZ)):
            raise RuntimeError("participation factor is inconsistent with its residue")
        zn = frobenius_norm(p.z_at_mode)
        if frobenius_norm(dZ) > 0.1 * zn:
            warnings.warn(f"impedance change {frobenius_norm(dZ):.3g} exceeds 10% of |Z_k(lam)|={zn:.3g}; "
                          "the first-order prediction may be inaccurate", ShiftWarning, stacklevel=2)
    return shift


def layer1_index(p, z_at_mode) -> float:
    """``||p|| ||Z_k(lam)||``: bound on ``|dlam|`` per unit relative impedance change."""
    return frobenius_norm(_matrix(p)) * frobenius_norm(np.atleast_2d(z_at_mode))


def layer2_index(p, z_at_mode) -> complex:
    """``<p, Z_k(lam)>``: mode shift per unit proportional scaling ``Z_k -> (1+eps) Z_k``."""
    return frobenius_inner(_matrix(p), np.atleast_2d(np.asarray(z_at_mode, dtype=complex)))


def parameter_participation_factor(p, sens) -> complex:
    """``<p, dZ_k(lam)/d rho>``; ``sens`` is a sensitivity object or a matrix."""
    mat = sens.matrix if hasattr(sens, "matrix") else sens
    return frobenius_inner(_matrix(p), np.atleast_2d(mat))


# -- sensitivities --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Sensitivity:
    parameter: str
    s: object
    matrix: np.ndarray
    step: float


def impedance_sensitivity(model: WholeSystemModel, k: int, name: str, lam, scale: float = 1e-5):
    """Forward-difference ``dZ_k/d rho`` in the model's frame, at re-solved equilibria."""
    app = model.apparatus[k - 1] if model.apparatus else None
    if app is None:
        raise ApparatusError(f"node {k} has no parameterized apparatus")
    if model.frame == "dq":
        return impedance_parameter_sensitivity(app, model.equilibria[k - 1], name, lam, scale)
    if name not in app.params:
        raise ApparatusError(f"{app.kind}: no parameter {name!r}")
    rho = app.params[name]
    d = sensitivity_step(rho, scale)
    y0, _ = linearize_for_frame(app, model.frame)
    y1, _ = linearize_for_frame(app.with_param(name, rho + d), model.frame)
    lam_arr = np.atleast_1d(lam)
    z0 = np.linalg.inv(y0.freqresp(lam_arr))
    z1 = np.linalg.inv(y1.freqresp(lam_arr))
    mat = (z1 - z0) / d
    return _Sensitivity(name, lam, mat[0] if np.ndim(lam) == 0 else mat, d)


def state_pf_via_chain(model: WholeSystemModel, k: int, lam: complex, m: int,
                       rel_step: float = 1e-5) -> complex:
    """State participation of apparatus ``k``'s state ``m`` (0-based) in ``lam``.

    The diagonal entry ``a_mm`` of the apparatus state matrix is treated as a
    parameter and ``dZ_k/d a_mm`` is taken as a central difference quotient.
    Changing ``a_mm`` is a rank-one update of ``sI - A``, so each impedance
    increment is formed directly instead of by subtracting two impedances.
    """
    y = model.apparatus_admittances[k - 1]
    if not 0 <= m < y.n_states:
        raise IndexError(f"apparatus at node {k} has {y.n_states} states; got index {m}")
    pf = impedance_participation_factor(model, k, lam)
    s = pf.mode
    h = rel_step * (1 + abs(y.A[m, m]))
    R = np.linalg.inv(s * np.eye(y.n_states) - y.A)
    u = y.C @ R[:, m]
    v = R[m, :] @ y.B
    g = R[m, m]
    y0 = y(s)
    z0 = pf.z_at_mode
    incs = []
    for step in (h, -h):
        dy = (step / (1 - step * g)) * np.outer(u, v)
        z1 = np.linalg.inv(y0 + dy)
        incs.append(-z1 @ dy @ z0)
    return parameter_participation_factor(pf, (incs[0] - incs[1]) / (2 * h))


def state_participation_of_apparatus(model: WholeSystemModel, k: int, lam: complex) -> np.ndarray:
    """Eigenvector-based participation ``psi_nm phi_mn`` of apparatus ``k``'s states."""
    P = state_participation_matrix(model.eigensystem)
    n = _check_mode(model, lam)
    return P[list(model.apparatus_states(k)), n]


# -- finite-difference validation ---------------------------------------------------

def match_eigenvalue(eigenvalues: np.ndarray, target: complex, guard: float = 2.0) -> complex:
    """Eigenvalue nearest to ``target``; the runner-up must be ``guard`` times farther."""
    d = np.abs(np.asarray(eigenvalues) - target)
    order = np.argsort(d)
    if d.size > 1 and d[order[1]] <= guard * d[order[0]]:
        raise MatchingError(
            f"ambiguous match near {target!r}: {eigenvalues[order[0]]!r} and {eigenvalues[order[1]]!r}")
    return complex(eigenvalues[order[0]])


def _feedback_increments(y: StateSpaceForm, G: np.ndarray):
    # y' = y (u - G y'): increments of A, B, C, D formed without cancellation
    M = np.linalg.inv(np.eye(y.shape[0]) + y.D @ G)
    BGM = y.B @ G @ M
    MDG = M @ y.D @ G
    return -BGM @ y.C, -BGM @ y.D, -MDG @ y.C, -MDG @ y.D


def perturbed_shift(model: WholeSystemModel, k: int, increments, target: complex,
                    guard: float = 2.0) -> complex:
    """Exact shift of the mode nearest ``target`` after apparatus ``k``'s matrices change.

    The perturbed eigenvalue is located by a full eigensolve; the shift itself
    is evaluated as ``psi' dA phi / (psi' phi)`` with the perturbed left and
    unperturbed right eigenvectors, which is exact and keeps full relative
    precision for small shifts.
    """
    es = model.eigensystem
    n = int(np.argmin(np.abs(es.eigenvalues - target)))
    dA = realization_delta(model, k, *increments)
    w, vl = sla.eig(model.A + dA, left=True, right=False)
    lam_new = match_eigenvalue(w, target, guard)
    i = int(np.argmin(np.abs(w - lam_new)))
    psi = vl[:, i].conj()
    phi = es.right[:, n]
    return complex(psi @ dA @ phi / (psi @ phi))


def perturb_impedance(model: WholeSystemModel, k: int, dZ) -> WholeSystemModel:
    """Copy of ``model`` with a frequency-flat series element ``dZ`` added to apparatus ``k``."""
    dZ = np.atleast_2d(np.asarray(dZ, dtype=complex))
    y = model.apparatus_admittances[k - 1]
    return with_admittance(model, k, feedback(y, StateSpaceForm.static(dZ)))


@dataclass(frozen=True)
class LemmaCheck:
    mode: complex
    node: int
    dZ: np.ndarray
    eps: tuple[float, ...]
    predicted: tuple[complex, ...]
    observed: tuple[complex, ...]
    rel_errors: tuple[float, ...]
    orders: tuple[float, ...] = field(default=())

    @property
    def order(self) -> float:
        """Least-squares slope of ``log(error)`` against ``log(eps)``."""
        if len(self.eps) < 2:
            return float("nan")
        return float(np.polyfit(np.log(self.eps), np.log(self.rel_errors), 1)[0])


def verify_lemma_fd(model: WholeSystemModel, k: int, lam: complex, dZ,
                    eps_scales: Sequence[float] = (1e-3, 1e-4, 1e-5)) -> LemmaCheck:
    """Compare ``eps <p, dZ>`` with the recomputed mode after ``Z_k -> Z_k + eps dZ``.

    The perturbation is a series element that is constant over frequency.
    """
    pf = impedance_participation_factor(model, k, lam)
    dZ = np.atleast_2d(np.asarray(dZ, dtype=complex))
    base = pf.mode
    unit = predict_eigenvalue_shift(pf.matrix, dZ)
    y = model.apparatus_admittances[k - 1]
    preds, obs, errs = [], [], []
    for eps in eps_scales:
        pred = eps * unit
        got = perturbed_shift(model, k, _feedback_increments(y, eps * dZ), base + pred)
        preds.append(pred)
        obs.append(got)
        errs.append(abs(pred - got) / abs(got) if got != 0 else float("inf"))
    orders = tuple(
        float(np.log(errs[i] / errs[i + 1]) / np.log(eps_scales[i] / eps_scales[i + 1]))
        for i in range(len(errs) - 1)
    )
    return LemmaCheck(base, k, dZ, tuple(eps_scales), tuple(preds), tuple(obs), tuple(errs), orders)


def scaled_impedance_shift(model: WholeSystemModel, k: int, lam: complex, eps: float = 1e-4) -> complex:
    """Recomputed mode shift when ``Z_k -> (1 + eps) Z_k``."""
    lam = complex(model.eigenvalues[_check_mode(model, lam)])
    y = model.apparatus_admittances[k - 1]
    f = -eps / (1.0 + eps)
    inc = (np.zeros_like(y.A), np.zeros_like(y.B), f * y.C, f * y.D)
    return perturbed_shift(model, k, inc, lam)


def parameter_shift_fd(model: WholeSystemModel, k: int, name: str, lam: complex,
                       scale: float = 1e-4) -> tuple[float, complex]:
    """Step ``d = scale (1+|rho|)`` and the recomputed mode shift for that step.

    The perturbed apparatus is linearized at its own re-solved equilibrium.
    """
    app = model.apparatus[k - 1]
    rho = app.params[name]
    d = sensitivity_step(rho, scale)
    lam = complex(model.eigenvalues[_check_mode(model, lam)])
    y0 = model.apparatus_admittances[k - 1]
    y1, _ = linearize_for_frame(app.with_param(name, rho + d), model.frame)
    inc = (y1.A - y0.A, y1.B - y0.B, y1.C - y0.C, y1.D - y0.D)
    return d, perturbed_shift(model, k, inc, lam)


# -- reports ------------------------------------------------------------------------

def select_modes(model: WholeSystemModel, freq_window: tuple[float, float] | None = None,
                 damping_below: float | None = None) -> list[complex]:
    """Modes with ``Im >= 0`` in ascending frequency, optionally filtered.

    ``freq_window`` is in Hz; ``damping_below`` keeps modes whose damping
    ratio is below the threshold.
    """
    ev = model.eigenvalues
    ev = ev[ev.imag >= 0]
    ev = ev[np.lexsort((ev.real, ev.imag))]
    out = []
    for lam in ev:
        f = lam.imag / (2 * np.pi)
        if freq_window is not None and not (freq_window[0] <= f <= freq_window[1]):
            continue
        if damping_below is not None and damping_ratio(lam) >= damping_below:
            continue
        out.append(complex(lam))
    return out


def damping_ratio(lam: complex) -> float:
    mag = abs(lam)
    return float(-lam.real / mag) if mag > 0 else 1.0


@dataclass(frozen=True)
class LayerReport:
    modes: tuple[complex, ...]
    nodes: tuple[int, ...]
    layer1: dict           # (mode index, node) -> float
    layer2: dict           # (mode index, node) -> complex
    layer2_normalized: dict
    layer3: dict           # (mode index, node) -> {parameter: complex}


def layer_report(model: WholeSystemModel, modes: Iterable[complex], nodes: Iterable[int] | None = None,
                 parameters: bool = True) -> LayerReport:
    modes = tuple(complex(m) for m in modes)
    nodes = tuple(range(1, model.node_count + 1)) if nodes is None else tuple(nodes)
    l1, l2, l2n, l3 = {}, {}, {}, {}
    pfs = {(i, k): impedance_participation_factor(model, k, lam)
           for i, lam in enumerate(modes) for k in nodes}
    for i in range(len(modes)):
        total = sum(abs(pfs[i, k].layer2) for k in nodes)
        for k in nodes:
            pf = pfs[i, k]
            l1[i, k] = pf.layer1
            l2[i, k] = pf.layer2
            l2n[i, k] = pf.layer2 / total if total > 0 else 0j
    if parameters and modes:
        lam_arr = np.array([pfs[i, nodes[0]].mode for i in range(len(modes))])
        for k in nodes:
            app = model.apparatus[k - 1] if model.apparatus else None
            if app is None or app.kind == "placeholder":
                for i in range(len(modes)):
                    l3[i, k] = {}
                continue
            sens = {name: impedance_sensitivity(model, k, name, lam_arr).matrix for name in app.params}
            for i in range(len(modes)):
                l3[i, k] = {name: parameter_participation_factor(pfs[i, k], sens[name][i])
                            for name in app.params}
    return LayerReport(modes, nodes, l1, l2, l2n, l3)
