"""Rational approximation of sampled matrix spectra by relaxed vector fitting.

All matrix elements share one pole set.  Each pass fits ``sigma(s) H(s)`` and
``sigma(s)`` with a common rational basis, eliminates the element-specific
unknowns by QR, and relocates the poles to the zeros of ``sigma``.  Residues,
the direct term and the linear-in-s term are then found by linear least
squares with the final poles.

Complex poles are kept in conjugate pairs throughout: a pair ``a, conj(a)``
uses the real basis ``1/(s-a) + 1/(s-conj(a))`` and ``j/(s-a) - j/(s-conj(a))``,
so fitted residues come out exactly conjugate.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .lticore import PoleResidueForm, SampledSpectrum

__all__ = [
    "FitConfig",
    "FitError",
    "FitQuality",
    "FitResult",
    "FitWarning",
    "fit_quality",
    "initial_poles",
    "order_sweep",
    "residue_density_sensitivity",
    "result_from_dict",
    "result_to_dict",
    "vector_fit",
]


class FitError(ValueError):
    pass


class FitWarning(UserWarning):
    pass


WEIGHTINGS = ("uniform", "inverse")


@dataclass(frozen=True)
class FitConfig:
    order: int
    iterations: int = 10
    enforce_stability: bool = False
    weighting: str = "uniform"
    linear: bool = True          # fit a linear-in-s term
    damping: float = 0.01        # initial poles: -damping * beta + j beta
    tol: float = 1e-10           # relative pole change regarded as converged

    def __post_init__(self):
        if not isinstance(self.order, (int, np.integer)) or self.order < 1:
            raise FitError(f"order must be a positive integer, got {self.order!r}")
        if not isinstance(self.iterations, (int, np.integer)) or self.iterations < 1:
            raise FitError(f"iterations must be a positive integer, got {self.iterations!r}")
        if self.weighting not in WEIGHTINGS:
            raise FitError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")


@dataclass(frozen=True, eq=False)
class FitResult:
    model: PoleResidueForm
    rms_rel: float
    trajectories: tuple = field(default=())   # poles after each relocation pass
    converged: bool = True

    @property
    def poles(self) -> np.ndarray:
        return self.model.poles

    @property
    def residues(self) -> np.ndarray:
        return self.model.residues


def initial_poles(w_min: float, w_max: float, order: int, damping: float = 0.01) -> np.ndarray:
    """Log-spaced, lightly damped conjugate pairs over the band; one real pole if ``order`` is odd."""
    w_min = max(w_min, 1e-6 * w_max)
    pairs = order // 2
    poles = []
    if order % 2:
        poles.append(complex(-w_min))
    for beta in np.logspace(np.log10(w_min), np.log10(w_max), pairs) if pairs else ():
        a = complex(-damping * beta, beta)
        poles += [a, a.conjugate()]
    return np.array(poles)


# -- real basis for conjugate-closed pole sets ------------------------------------------

def _split(poles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real poles and upper-half-plane members of the pairs."""
    poles = np.asarray(poles, dtype=complex)
    real = poles[poles.imag == 0].real
    upper = poles[poles.imag > 0]
    if np.count_nonzero(poles.imag < 0) != upper.size:
        raise FitError("pole set is not closed under conjugation")
    return real, upper


def _join(real: np.ndarray, upper: np.ndarray) -> np.ndarray:
    out = [complex(a) for a in np.sort(real)]
    for a in upper[np.lexsort((upper.real, upper.imag))]:
        out += [complex(a), complex(a).conjugate()]
    return np.array(out, dtype=complex)


def _basis(s: np.ndarray, real: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Columns phi_n(s): one per real pole, two per pair."""
    cols = [1.0 / (s - a) for a in real]
    for a in upper:
        p, q = 1.0 / (s - a), 1.0 / (s - np.conj(a))
        cols += [p + q, 1j * p - 1j * q]
    return np.stack(cols, axis=1) if cols else np.zeros((s.size, 0), dtype=complex)


def _state_pair(real: np.ndarray, upper: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real realization ``(A, b)`` whose transfer to the basis coefficients is ``phi``."""
    n = real.size + 2 * upper.size
    A = np.zeros((n, n))
    b = np.zeros(n)
    for i, a in enumerate(real):
        A[i, i] = a
        b[i] = 1.0
    o = real.size
    for i, a in enumerate(upper):
        j = o + 2 * i
        A[j:j + 2, j:j + 2] = [[a.real, a.imag], [-a.imag, a.real]]
        b[j] = 2.0
    return A, b


def _stack(m: np.ndarray) -> np.ndarray:
    return np.concatenate([m.real, m.imag], axis=0)


def _weights(h: np.ndarray, weighting: str) -> np.ndarray:
    """Per-sample, per-element weights, shape ``(n, q*p)``."""
    if weighting == "uniform":
        return np.ones(h.shape)
    mag = np.abs(h)
    floor = 1e-12 * max(mag.max(), 1e-300)
    return 1.0 / np.maximum(mag, floor)


# -- pole relocation ------------------------------------------------------------------

def _relocate(s, h, w, real, upper, linear: bool) -> tuple[np.ndarray, np.ndarray]:
    phi = _basis(s, real, upper)
    ns, n = phi.shape
    ones = np.ones((ns, 1))
    own = [phi, ones] + ([s[:, None]] if linear else [])
    n_own = n + 1 + int(linear)
    blocks, rhs = [], []
    for relaxed in (True, False):
        blocks, rhs = [], []
        for e in range(h.shape[1]):
            he, we = h[:, e][:, None], w[:, e][:, None]
            shared = [-he * phi] + ([-he] if relaxed else [])
            target = np.zeros((ns, 1)) if relaxed else he
            aug = np.hstack([we * c for c in own] + [we * c for c in shared] + [we * target])
            r = np.linalg.qr(_stack(aug), mode="r")
            blocks.append(r[n_own:-1, n_own:-1])
            rhs.append(r[n_own:-1, -1])
        if relaxed:
            # sigma must stay away from the trivial zero solution
            scale = np.linalg.norm(w * h) / ns
            row = np.concatenate([phi.real.sum(axis=0), [ns]]) * scale
            blocks.append(row[None, :])
            rhs.append(np.array([ns * scale]))
        M = np.vstack(blocks)
        y = np.concatenate(rhs)
        cn = np.linalg.norm(M, axis=0)
        cn[cn == 0] = 1.0
        # near convergence some directions of sigma become redundant; the
        # minimum-norm step is the right one there
        sol = np.linalg.lstsq(M / cn, y, rcond=None)[0] / cn
        if relaxed:
            c_sig, d_sig = sol[:n], sol[n]
            if abs(d_sig) > 1e-8:
                break
        else:
            c_sig, d_sig = sol, 1.0
    A, b = _state_pair(real, upper)
    zeros = np.linalg.eigvals(A - np.outer(b, c_sig) / d_sig)
    # the eigenvalues of a real matrix come in exact conjugate pairs
    return _split(zeros)


def _fit_residues(s, h, w, real, upper, linear: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    phi = _basis(s, real, upper)
    ns, n = phi.shape
    cols = np.hstack([phi, np.ones((ns, 1))] + ([s[:, None]] if linear else []))
    coef = np.zeros((cols.shape[1], h.shape[1]))
    uniform = np.all(w == w[:, :1])
    groups = [list(range(h.shape[1]))] if uniform else [[e] for e in range(h.shape[1])]
    for g in groups:
        we = w[:, g[0]][:, None]
        M = _stack(we * cols)
        cn = np.linalg.norm(M, axis=0)
        cn[cn == 0] = 1.0
        sol, _, rank, _ = np.linalg.lstsq(M / cn, _stack(we * h[:, g]), rcond=None)
        if rank < M.shape[1]:
            raise FitError(f"residue identification is rank deficient ({rank} < {M.shape[1]}); "
                           "try a lower order")
        coef[:, g] = sol / cn[:, None]
    residues = []
    for i in range(real.size):
        residues.append(coef[i].astype(complex))
    o = real.size
    for i in range(upper.size):
        c1, c2 = coef[o + 2 * i], coef[o + 2 * i + 1]
        residues += [c1 + 1j * c2, c1 - 1j * c2]
    direct = coef[n]
    lin = coef[n + 1] if linear else np.zeros(h.shape[1])
    return np.array(residues), direct, lin


def _rms_rel(model: PoleResidueForm, spectrum: SampledSpectrum) -> float:
    fit = model.freqresp(1j * spectrum.frequencies)
    err = np.linalg.norm(fit - spectrum.samples)
    ref = np.linalg.norm(spectrum.samples)
    return float(err / ref) if ref > 0 else float(err)


def _model(real, upper, res, direct, lin, shape) -> PoleResidueForm:
    poles = []
    for a in real:
        poles.append(complex(a))
    for a in upper:
        poles += [complex(a), complex(a).conjugate()]
    q, p = shape
    return PoleResidueForm(np.array(poles), res.reshape((-1, q, p)), direct.reshape(q, p), lin.reshape(q, p))


def vector_fit(spectrum: SampledSpectrum, cfg: FitConfig, poles=None) -> FitResult:
    """Fit a common-pole rational model to ``spectrum`` (samples on ``s = j omega``)."""
    ns = spectrum.frequencies.size
    if ns < 2 * cfg.order + 2:
        raise FitError(f"{ns} samples are too few for order {cfg.order} (need {2 * cfg.order + 2})")
    w_all = spectrum.frequencies
    s = 1j * w_all
    q, p = spectrum.shape
    h = spectrum.samples.reshape(ns, q * p)
    if not np.all(np.isfinite(h)):
        raise FitError("spectrum contains non-finite samples")
    w = _weights(h, cfg.weighting)
    if poles is None:
        poles = initial_poles(max(w_all[0], 1e-3 * w_all[-1] / ns), w_all[-1], cfg.order, cfg.damping)
    real, upper = _split(poles)

    trajectories = []
    best = None
    change = np.inf
    for _ in range(cfg.iterations):
        new_real, new_upper = _relocate(s, h, w, real, upper, cfg.linear)
        if cfg.enforce_stability:
            new_real = -np.abs(new_real)
            new_upper = -np.abs(new_upper.real) + 1j * new_upper.imag
        old = _join(real, upper)
        new = _join(new_real, new_upper)
        if old.size == new.size:
            change = float(np.max(np.abs(new - old) / np.maximum(np.abs(old), 1e-300)))
        real, upper = new_real, new_upper
        trajectories.append(new)
        res, direct, lin = _fit_residues(s, h, w, real, upper, cfg.linear)
        model = _model(real, upper, res, direct, lin, (q, p))
        rms = _rms_rel(model, spectrum)
        if best is None or rms <= best[1]:
            best = (model, rms)
        if change <= cfg.tol:
            break
    converged = change <= cfg.tol or best[1] <= 1e-12
    if not converged:
        warnings.warn(f"pole relocation did not settle in {cfg.iterations} passes "
                      f"(last relative change {change:.3g}); returning the best pass", FitWarning,
                      stacklevel=2)
    return FitResult(best[0], best[1], tuple(trajectories), converged)


# -- diagnostics -----------------------------------------------------------------------

@dataclass(frozen=True)
class FitQuality:
    rms_rel: float
    max_rel: float
    bands: tuple    # (f_lo_hz, f_hi_hz, rms_rel) per decade


def fit_quality(result: FitResult | PoleResidueForm, spectrum: SampledSpectrum) -> FitQuality:
    model = result.model if isinstance(result, FitResult) else result
    if model.shape != spectrum.shape:
        raise FitError(f"model shape {model.shape} does not match spectrum shape {spectrum.shape}")
    fit = model.freqresp(1j * spectrum.frequencies)
    err = np.linalg.norm(fit - spectrum.samples, axis=(1, 2))
    ref = np.linalg.norm(spectrum.samples, axis=(1, 2))
    ok = ref > 0
    max_rel = float(np.max(err[ok] / ref[ok])) if ok.any() else float(err.max())
    f = spectrum.frequencies / (2 * np.pi)
    edges = 10.0 ** np.arange(np.floor(np.log10(f[0])), np.ceil(np.log10(f[-1])) + 1)
    bands = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (f >= lo) & (f < hi) if hi < edges[-1] else (f >= lo) & (f <= hi)
        if sel.any():
            r = np.linalg.norm(ref[sel])
            bands.append((float(lo), float(hi), float(np.linalg.norm(err[sel]) / r) if r > 0 else 0.0))
    return FitQuality(_rms_rel(model, spectrum), max_rel, tuple(bands))


def order_sweep(spectrum: SampledSpectrum, orders, cfg: FitConfig | None = None,
                knee: float = 10.0) -> tuple[int, list[tuple[int, float]]]:
    """Fit at each order; pick the lowest order within ``knee`` times the best rms."""
    table = []
    for n in orders:
        base = cfg or FitConfig(order=n)
        c = FitConfig(n, base.iterations, base.enforce_stability, base.weighting, base.linear,
                      base.damping, base.tol)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FitWarning)
            try:
                table.append((n, vector_fit(spectrum, c).rms_rel))
            except FitError:
                table.append((n, float("inf")))
    finite = [r for _, r in table if np.isfinite(r)]
    if not finite:
        raise FitError("no order in the sweep produced a fit")
    best = min(finite)
    pick = next(n for n, r in table if r <= knee * best)
    return pick, table


def residue_density_sensitivity(spectrum: SampledSpectrum, cfg: FitConfig) -> float:
    """Largest relative residue change when every other sample is dropped."""
    full = vector_fit(spectrum, cfg)
    half = SampledSpectrum(spectrum.frequencies[::2], spectrum.samples[::2])
    sparse = vector_fit(half, cfg)
    worst = 0.0
    for a, r in zip(full.poles, full.residues):
        j = int(np.argmin(np.abs(sparse.poles - a)))
        scale = max(np.linalg.norm(r), 1e-300)
        worst = max(worst, float(np.linalg.norm(sparse.residues[j] - r) / scale))
    return worst


# -- serialization ---------------------------------------------------------------------

def _cplx(z) -> dict:
    return {"re": float(np.real(z)), "im": float(np.imag(z))}


def result_to_dict(result: FitResult) -> dict:
    m = result.model
    return {
        "poles": [_cplx(a) for a in m.poles],
        "residues": [[[_cplx(v) for v in row] for row in r] for r in m.residues],
        "direct": [[float(v) for v in row] for row in np.real(m.direct)],
        "linear": [[float(v) for v in row] for row in np.real(m.linear)],
        "rms_rel": float(result.rms_rel),
    }


def result_from_dict(d: dict) -> FitResult:
    poles = np.array([complex(p["re"], p["im"]) for p in d["poles"]])
    res = np.array([[[complex(v["re"], v["im"]) for v in row] for row in r] for r in d["residues"]])
    model = PoleResidueForm(poles, res, np.array(d["direct"], float), np.array(d["linear"], float))
    return FitResult(model, float(d["rms_rel"]))
