"""Linear time-invariant matrix transfer functions.

Two representations are used throughout the package:

* :class:`StateSpaceForm` -- ``G(s) = D + s E + C (sI - A)^{-1} B``.  The ``E``
  term is zero for proper systems; it is needed for impedances of inductive
  apparatus and for the capacitive part of nodal admittance matrices.
* :class:`PoleResidueForm` -- ``G(s) = direct + s linear + sum_n R_n / (s - p_n)``.

All arithmetic is complex.  Real matrices are accepted and embedded as-is.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
import scipy.linalg as sla


class LTIError(Exception):
    """Base class for errors raised by this module."""


class EvaluationAtPoleError(LTIError):
    def __init__(self, s: complex, pole: complex):
        super().__init__(f"cannot evaluate at s={s!r}: coincides with pole {pole!r}")
        self.s = s
        self.pole = pole


class DegenerateSpectrumError(LTIError):
    """Raised when eigenvalues (poles) are repeated or too close to separate."""

    def __init__(self, pairs: Sequence[tuple[complex, complex]], threshold: float):
        listing = ", ".join(f"({a:.6g}, {b:.6g})" for a, b in pairs)
        super().__init__(
            f"repeated or clustered eigenvalues (gap <= {threshold:.3g}): {listing}"
        )
        self.pairs = list(pairs)
        self.threshold = threshold


class NoPoleError(LTIError):
    pass


class InversionError(LTIError):
    pass


class IllPosedError(LTIError):
    pass


def _arr(x, shape=None) -> np.ndarray:
    a = np.array(x, dtype=np.result_type(np.asarray(x).dtype, np.float64))
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StateSpaceForm:
    """``G(s) = D + s E + C (sI - A)^{-1} B``; ``E`` defaults to zero."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.A)
        n = A.shape[0] if A.size else 0
        D = _arr(self.D)
        q, p = D.shape
        A = _arr(A, (n, n))
        B = _arr(self.B, (n, p))
        C = _arr(self.C, (q, n))
        E = np.zeros((q, p)) if self.E is None else self.E
        E = _arr(E, (q, p))
        if A.shape != (n, n):
            raise ValueError("A must be square")
        for name, val in (("A", A), ("B", B), ("C", C), ("D", D), ("E", E)):
            object.__setattr__(self, name, val)
            if not np.all(np.isfinite(val)):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def static(cls, gain) -> "StateSpaceForm":
        g = np.atleast_2d(np.asarray(gain))
        q, p = g.shape
        return cls(np.zeros((0, 0)), np.zeros((0, p)), np.zeros((q, 0)), g)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.D.shape

    @property
    def is_proper(self) -> bool:
        return not np.any(self.E)

    @cached_property
    def poles(self) -> np.ndarray:
        if self.n_states == 0:
            return np.zeros(0, dtype=complex)
        return sla.eigvals(self.A)

    def __call__(self, s: complex) -> np.ndarray:
        return evaluate(self, s)

    def freqresp(self, s: Sequence[complex], chunk: int = 256) -> np.ndarray:
        """Evaluate at many points; returns an array of shape ``(len(s), q, p)``."""
        s = np.asarray(s, dtype=complex).ravel()
        n = self.n_states
        out = np.empty((s.size,) + self.shape, dtype=complex)
        out[:] = self.D + s[:, None, None] * self.E
        if n == 0:
            return out
        eye = np.eye(n)
        for lo in range(0, s.size, chunk):
            ss = s[lo:lo + chunk]
            M = ss[:, None, None] * eye - self.A
            X = np.linalg.solve(M, np.broadcast_to(self.B, (ss.size,) + self.B.shape))
            out[lo:lo + chunk] += self.C @ X
        return out


@dataclass(frozen=True, eq=False)
class PoleResidueForm:
    """``G(s) = direct + s linear + sum_n residues[n] / (s - poles[n])``."""

    poles: np.ndarray
    residues: np.ndarray
    direct: np.ndarray
    linear: np.ndarray | None = None

    def __post_init__(self):
        direct = _arr(self.direct)
        poles = np.asarray(self.poles, dtype=complex).ravel()
        res = np.asarray(self.residues, dtype=complex).reshape((poles.size,) + direct.shape)
        lin = np.zeros(direct.shape) if self.linear is None else self.linear
        lin = _arr(lin, direct.shape)
        poles.setflags(write=False)
        res.setflags(write=False)
        object.__setattr__(self, "poles", poles)
        object.__setattr__(self, "residues", res)
        object.__setattr__(self, "direct", direct)
        object.__setattr__(self, "linear", lin)

    @property
    def shape(self) -> tuple[int, int]:
        return self.direct.shape

    def __call__(self, s: complex) -> np.ndarray:
        return evaluate(self, s)

    def freqresp(self, s: Sequence[complex]) -> np.ndarray:
        s = np.asarray(s, dtype=complex).ravel()
        out = self.direct + s[:, None, None] * self.linear
        if self.poles.size:
            w = 1.0 / (s[:, None] - self.poles[None, :])
            out = out + np.einsum("kn,nij->kij", w, self.residues)
        return out


Model = Union[StateSpaceForm, PoleResidueForm]


@dataclass(frozen=True, eq=False)
class EigenSystem:
    eigenvalues: np.ndarray
    right: np.ndarray  # columns are right eigenvectors (Phi)
    left: np.ndarray   # rows are left eigenvectors (Psi = Phi^{-1})

    @property
    def size(self) -> int:
        return self.eigenvalues.size

    def index_of(self, lam: complex, rtol: float = 1e-6) -> int:
        """Index of the eigenvalue matching ``lam`` within ``rtol*(1+|lam|)``."""
        if self.size == 0:
            raise NoPoleError(f"{lam!r} is not an eigenvalue (empty spectrum)")
        d = np.abs(self.eigenvalues - lam)
        i = int(np.argmin(d))
        if d[i] > rtol * (1 + abs(lam)):
            raise NoPoleError(f"{lam!r} is not an eigenvalue (nearest {self.eigenvalues[i]!r})")
        return i


@dataclass(frozen=True)
class SampledSpectrum:
    """Frequency samples of a ``q x p`` transfer matrix at ``s = j*omega``."""

    frequencies: np.ndarray  # rad/s
    samples: np.ndarray      # (n, q, p)

    def __post_init__(self):
        w = np.asarray(self.frequencies, dtype=float).ravel()
        h = np.asarray(self.samples, dtype=complex)
        if h.ndim == 1:
            h = h.reshape(-1, 1, 1)
        if w.size < 2:
            raise ValueError("a spectrum needs at least 2 samples")
        if np.any(np.diff(w) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if h.shape[0] != w.size:
            raise ValueError("sample count does not match frequency count")
        object.__setattr__(self, "frequencies", w)
        object.__setattr__(self, "samples", h)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape[1:]

    @classmethod
    def from_model(cls, model: Model, omega: Sequence[float]) -> "SampledSpectrum":
        omega = np.asarray(omega, dtype=float)
        return cls(omega, model.freqresp(1j * omega))


def evaluate(model: Model, s: complex) -> np.ndarray:
    """Evaluate a model at one complex frequency ``s`` (rad/s)."""
    s = complex(s)
    tol = 1e-12 * (1 + abs(s))
    poles = model.poles
    if poles.size:
        i = int(np.argmin(np.abs(poles - s)))
        if abs(poles[i] - s) <= tol:
            raise EvaluationAtPoleError(s, complex(poles[i]))
    if isinstance(model, PoleResidueForm):
        return model.freqresp([s])[0]
    out = model.D + s * model.E
    if model.n_states:
        try:
            x = np.linalg.solve(s * np.eye(model.n_states) - model.A, model.B)
        except np.linalg.LinAlgError:
            raise EvaluationAtPoleError(s, s) from None
        out = out + model.C @ x
    return out


def eigen_decompose(A) -> EigenSystem:
    """Eigenvalues with right eigenvectors ``Phi`` and left eigenvectors ``Psi = Phi^{-1}``.

    Raises :class:`DegenerateSpectrumError` when two eigenvalues are closer than
    ``1e-8 * ||A||``.
    """
    A = np.asarray(A)
    n = A.shape[0]
    if n == 0:
        z = np.zeros((0, 0), dtype=complex)
        return EigenSystem(np.zeros(0, dtype=complex), z, z)
    lam, phi = sla.eig(A)
    norm_a = np.linalg.norm(A, 2)
    thresh = 1e-8 * norm_a
    if n > 1:
        gap = np.abs(lam[:, None] - lam[None, :])
        gap[np.diag_indices(n)] = np.inf
        bad = np.argwhere(np.triu(gap <= thresh, 1))
        if bad.size:
            raise DegenerateSpectrumError([(lam[i], lam[j]) for i, j in bad], thresh)
    psi = np.linalg.solve(phi, np.eye(n))
    return EigenSystem(lam, phi, psi)


def ss_to_pole_residue(model: StateSpaceForm) -> PoleResidueForm:
    es = eigen_decompose(model.A)
    cphi = model.C @ es.right           # q x N
    psib = es.left @ model.B            # N x p
    res = np.einsum("in,nj->nij", cphi, psib)
    return PoleResidueForm(es.eigenvalues, res, model.D, model.E)


def residue_at(model: Model | Callable[[complex], np.ndarray], lam: complex,
               radius: float | None = None) -> np.ndarray:
    """Residue matrix of ``model`` at the simple pole ``lam``.

    State-space models use the eigenvector formula, pole-residue models look the
    pole up.  Any other callable is treated numerically with a small contour
    integral around ``lam``; ``radius`` defaults to ``1e-4 * (1 + |lam|)``.
    """
    lam = complex(lam)
    if isinstance(model, StateSpaceForm):
        es = eigen_decompose(model.A)
        n = es.index_of(lam)
        return np.outer(model.C @ es.right[:, n], es.left[n, :] @ model.B)
    if isinstance(model, PoleResidueForm):
        d = np.abs(model.poles - lam)
        hits = np.flatnonzero(d <= 1e-6 * (1 + abs(lam)))
        if hits.size == 0:
            raise NoPoleError(f"{lam!r} is not a pole of the model")
        if hits.size > 1:
            raise DegenerateSpectrumError([(model.poles[hits[0]], model.poles[hits[1]])],
                                          1e-6 * (1 + abs(lam)))
        return np.array(model.residues[hits[0]])
    r = 1e-4 * (1 + abs(lam)) if radius is None else radius
    theta = 2 * np.pi * (np.arange(64) + 0.5) / 64
    pts = r * np.exp(1j * theta)
    vals = np.array([np.atleast_2d(model(lam + z)) * z for z in pts])
    res = vals.mean(axis=0)
    # a regular point gives a contour mean that vanishes relative to the samples
    if np.linalg.norm(res) <= 1e-9 * np.max(np.linalg.norm(vals, axis=(1, 2))):
        raise NoPoleError(f"{lam!r} is not a pole of the function")
    return res


def frobenius_inner(V, W) -> complex:
    """``<V, W> = sum(conj(V) * W)``."""
    V = np.asarray(V)
    W = np.asarray(W)
    if V.shape != W.shape:
        raise ValueError(f"shape mismatch: {V.shape} vs {W.shape}")
    return complex(np.vdot(V, W))


def frobenius_norm(V) -> float:
    return float(np.sqrt(frobenius_inner(V, V).real))


def state_participation_matrix(es: EigenSystem) -> np.ndarray:
    """``P[m, n] = psi[n, m] * phi[m, n]``."""
    return es.right * es.left.T


# -- interconnection algebra -------------------------------------------------

def block_diag(models: Sequence[StateSpaceForm]) -> StateSpaceForm:
    return StateSpaceForm(
        sla.block_diag(*[m.A for m in models]) if models else np.zeros((0, 0)),
        _bd([m.B for m in models]),
        _bd([m.C for m in models]),
        _bd([m.D for m in models]),
        _bd([m.E for m in models]),
    )


def _bd(mats):
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    dtype = np.result_type(*mats) if mats else float
    out = np.zeros((rows, cols), dtype=dtype)
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def parallel(g1: StateSpaceForm, g2: StateSpaceForm) -> StateSpaceForm:
    """Sum of two systems with the same inputs and outputs."""
    if g1.shape != g2.shape:
        raise ValueError("parallel connection needs matching shapes")
    return StateSpaceForm(
        sla.block_diag(g1.A, g2.A),
        np.vstack([g1.B, g2.B]),
        np.hstack([g1.C, g2.C]),
        g1.D + g2.D,
        g1.E + g2.E,
    )


def feedback(g1: StateSpaceForm, g2: StateSpaceForm, max_cond: float = 1e12) -> StateSpaceForm:
    """Closed loop ``y = g1 (u - g2 y)``; states ordered ``[g1, g2]``."""
    if not (g1.is_proper and g2.is_proper):
        raise IllPosedError("feedback needs proper subsystems")
    q, p = g1.shape
    if g2.shape != (p, q):
        raise ValueError("feedback path shape does not match forward path")
    loop = np.eye(q) + g1.D @ g2.D
    if np.linalg.cond(loop) >= max_cond:
        raise IllPosedError("algebraic loop (I + D1 D2) is singular")
    M = np.linalg.inv(loop)
    # y = M (C1 x1 - D1 C2 x2 + D1 u); e = u - C2 x2 - D2 y
    Cy = M @ np.hstack([g1.C, -g1.D @ g2.C])
    Dy = M @ g1.D
    Ce = np.hstack([np.zeros((p, g1.n_states)), -g2.C]) - g2.D @ Cy
    De = np.eye(p) - g2.D @ Dy
    A = sla.block_diag(g1.A, g2.A) + np.vstack([g1.B @ Ce, g2.B @ Cy])
    B = np.vstack([g1.B @ De, g2.B @ Dy])
    return StateSpaceForm(A, B, Cy, Dy)


def invert(g: StateSpaceForm, max_cond: float = 1e12) -> StateSpaceForm:
    """Inverse system ``G(s)^{-1}`` in state-space form.

    Handled cases: invertible ``E`` (improper, e.g. capacitive admittance),
    ``E = 0`` with invertible ``D``, and strictly proper systems of relative
    degree one (invertible ``C B``), whose inverse carries an ``E`` term.
    """
    q, p = g.shape
    if q != p:
        raise InversionError("only square systems can be inverted")
    n = g.n_states
    if g.is_proper:
        if np.linalg.cond(g.D) < max_cond:
            Di = np.linalg.inv(g.D)
            return StateSpaceForm(g.A - g.B @ Di @ g.C, g.B @ Di, -Di @ g.C, Di)
        if np.any(g.D):
            raise InversionError("singular feedthrough with nonzero D is not supported")
        CB = g.C @ g.B
        if n == 0 or np.linalg.cond(CB) >= max_cond:
            raise InversionError("strictly proper system of relative degree > 1")
        M = np.linalg.inv(CB)
        Pi = np.eye(n) - g.B @ M @ g.C
        Q = sla.null_space(g.C)
        Qh = Q.conj().T
        CA = g.C @ g.A
        return StateSpaceForm(
            Qh @ Pi @ g.A @ Q,
            Qh @ Pi @ g.A @ g.B @ M,
            -M @ CA @ Q,
            -M @ CA @ g.B @ M,
            M,
        )
    if np.linalg.cond(g.E) >= max_cond:
        raise InversionError("singular E term; descriptor inverses are not supported")
    Ei = np.linalg.inv(g.E)
    A = np.block([[g.A, g.B], [-Ei @ g.C, -Ei @ g.D]])
    B = np.vstack([np.zeros((n, p)), Ei])
    C = np.hstack([np.zeros((p, n)), np.eye(p)])
    return StateSpaceForm(A, B, C, np.zeros((p, p)))


def subsystem(g: StateSpaceForm, rows, cols) -> StateSpaceForm:
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    return StateSpaceForm(g.A, g.B[:, cols], g.C[rows, :], g.D[np.ix_(rows, cols)],
                          g.E[np.ix_(rows, cols)])


def scale_output(g: StateSpaceForm, factor: complex) -> StateSpaceForm:
    return StateSpaceForm(g.A, g.B, factor * g.C, factor * g.D, factor * g.E)


# -- spectrum files ----------------------------------------------------------

_COL = re.compile(r"^(re|im)_(\d+)_?(\d+)?$")


def write_spectrum_csv(spectrum: SampledSpectrum, path: str | Path) -> None:
    """Write ``freq_hz`` followed by ``re_<r><c>,im_<r><c>`` pairs, row-major."""
    q, p = spectrum.shape
    sep = "_" if max(q, p) > 9 else ""
    header = ["freq_hz"]
    for r in range(q):
        for c in range(p):
            header += [f"re_{r + 1}{sep}{c + 1}", f"im_{r + 1}{sep}{c + 1}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for omega, h in zip(spectrum.frequencies, spectrum.samples):
            row = [f"{omega / (2 * np.pi):.12g}"]
            for val in h.ravel():
                row += [f"{val.real:.12g}", f"{val.imag:.12g}"]
            w.writerow(row)


class SpectrumFormatError(LTIError):
    pass


def read_spectrum_csv(path: str | Path) -> SampledSpectrum:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip() != "freq_hz":
        raise SpectrumFormatError(f"{path}: line 1: header must start with 'freq_hz'")
    header = [h.strip() for h in rows[0][1:]]
    if not header or len(header) % 2:
        raise SpectrumFormatError(f"{path}: line 1: expected re/im column pairs")
    idx = []
    for j in range(0, len(header), 2):
        m_re, m_im = _COL.match(header[j]), _COL.match(header[j + 1])
        ok = (m_re and m_im and m_re.group(1) == "re" and m_im.group(1) == "im"
              and m_re.groups()[1:] == m_im.groups()[1:])
        if not ok:
            raise SpectrumFormatError(
                f"{path}: line 1: bad column pair {header[j]!r}, {header[j + 1]!r}")
        a, b = m_re.group(2), m_re.group(3)
        if b is None:
            if len(a) != 2:
                raise SpectrumFormatError(f"{path}: line 1: ambiguous index {header[j]!r}")
            a, b = a[0], a[1]
        idx.append((int(a) - 1, int(b) - 1))
    q = max(i for i, _ in idx) + 1
    p = max(j for _, j in idx) + 1
    if len(idx) != q * p or idx != [(i, j) for i in range(q) for j in range(p)]:
        raise SpectrumFormatError(f"{path}: line 1: columns must be row-major and complete")
    freqs, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 1 + len(header):
            raise SpectrumFormatError(f"{path}: line {lineno}: expected {1 + len(header)} fields")
        try:
            vals = [float(x) for x in row]
        except ValueError as exc:
            raise SpectrumFormatError(f"{path}: line {lineno}: {exc}") from None
        freqs.append(vals[0])
        v = np.array(vals[1::2]) + 1j * np.array(vals[2::2])
        data.append(v.reshape(q, p))
    try:
        return SampledSpectrum(2 * np.pi * np.array(freqs), np.array(data))
    except ValueError as exc:
        raise SpectrumFormatError(f"{path}: {exc}") from None
