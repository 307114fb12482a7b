"""Command-line front end: ``greybox modes | participate | fit``.

Machine-readable results go to files in ``--out``; standard output carries a
short human summary unless ``--quiet``.  Exit codes: 0 success, 2 bad input,
3 assembly failure, 4 degenerate spectrum, 5 fit failure.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .apparatus import ApparatusError, EquilibriumError
from .lticore import DegenerateSpectrumError, LTIError, SampledSpectrum, SpectrumFormatError
from .lticore import read_spectrum_csv, write_spectrum_csv
from .netmodel import AssemblyError, assemble_whole_system, whole_system_admittance_at
from .participation import damping_ratio, layer_report, select_modes, verify_lemma_fd
from .sysfile import SystemFileError, load_system
from .vecfit import FitConfig, FitError, FitWarning, fit_quality, result_to_dict, vector_fit

EXIT_OK, EXIT_INPUT, EXIT_ASSEMBLY, EXIT_DEGENERATE, EXIT_FIT = 0, 2, 3, 4, 5
LEMMA_EPS = (1e-3, 1e-4, 1e-5)
LEMMA_SEED = 20240611


class InputError(ValueError):
    pass


# -- deterministic JSON ------------------------------------------------------------

def format_float(x: float) -> str:
    """12 significant digits; always reads back as a float; no negative zero."""
    x = float(x)
    if not math.isfinite(x):
        return "null"
    if x == 0:
        return "0.0"
    s = format(x, ".12g")
    if "e" not in s and "." not in s:
        s += ".0"
    return s


def dumps(obj, indent: int = 0) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}{_string(str(k))}: {dumps(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + dumps(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return _string(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _string(s: str) -> str:
    out = s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{out}"'


def write_json(path: Path, obj) -> None:
    path.write_text(dumps(obj) + "\n")


def _cplx(z) -> dict:
    return {"re": float(np.real(z)), "im": float(np.imag(z))}


def _mode_record(i: int, lam: complex) -> dict:
    return {
        "index": i + 1,
        "lambda_re": lam.real,
        "lambda_im": lam.imag,
        "freq_hz": lam.imag / (2 * np.pi),
        "damping_ratio": damping_ratio(lam),
    }


# -- shared helpers ------------------------------------------------------------------

def _workers() -> int:
    raw = os.environ.get("GREYBOX_THREADS", "")
    if not raw:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"GREYBOX_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"GREYBOX_THREADS must be a positive integer, got {raw!r}")
    return n


def _pmap(fun, items):
    items = list(items)
    n = min(_workers(), max(len(items), 1))
    if n == 1:
        return [fun(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fun, items))


def _nodes(arg: str | None, count: int) -> list[int]:
    if arg is None:
        return list(range(1, count + 1))
    nodes = []
    for tok in arg.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            k = int(tok)
        except ValueError:
            raise InputError(f"--nodes: {tok!r} is not a node id") from None
        if not 1 <= k <= count:
            raise InputError(f"--nodes: node {k} is outside 1..{count}")
        if k not in nodes:
            nodes.append(k)
    if not nodes:
        raise InputError("--nodes selects no node")
    return nodes


def _frequency_grid(args) -> np.ndarray:
    if not (0 < args.fmin < args.fmax):
        raise InputError(f"need 0 < --fmin < --fmax, got {args.fmin} and {args.fmax}")
    if args.points < 2:
        raise InputError(f"--points must be at least 2, got {args.points}")
    return 2 * np.pi * np.logspace(np.log10(args.fmin), np.log10(args.fmax), args.points)


def _load(args):
    desc = load_system(args.config)
    model = assemble_whole_system(desc.network, desc.apparatus)
    return desc, model


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


# -- commands -----------------------------------------------------------------------

def cmd_modes(args) -> int:
    w = _frequency_grid(args)
    desc, model = _load(args)
    nodes = _nodes(args.nodes, model.node_count)
    modes = select_modes(model)
    out = _out_dir(args)
    write_json(out / "modes.json", {
        "system": desc.name,
        "n_states": int(model.A.shape[0]),
        "modes": [_mode_record(i, lam) for i, lam in enumerate(modes)],
    })

    def sweep(k):
        y = whole_system_admittance_at(model, k)
        write_spectrum_csv(SampledSpectrum(w, y.freqresp(1j * w)), out / f"spectrum_{k}.csv")

    _pmap(sweep, nodes)
    _say(args, f"{desc.name}: {model.A.shape[0]} states, {len(modes)} modes with Im >= 0")
    for i, lam in enumerate(modes):
        _say(args, f"  {i + 1:3d}  {lam.real:14.6g} {lam.imag:+14.6g}j  "
                   f"{lam.imag / (2 * np.pi):10.4g} Hz  zeta {damping_ratio(lam):.4g}")
    _say(args, f"wrote {out / 'modes.json'} and {len(nodes)} spectra")
    return EXIT_OK


def cmd_participate(args) -> int:
    desc, model = _load(args)
    nodes = _nodes(args.nodes, model.node_count)
    window = tuple(args.mode_freq) if args.mode_freq else None
    if window is not None and window[0] > window[1]:
        raise InputError(f"--mode-freq: lower bound {window[0]} exceeds upper bound {window[1]}")
    modes = select_modes(model, window, args.damping_below)
    if not modes:
        raise InputError("mode selection is empty")
    rep = layer_report(model, modes, nodes)
    records = [_mode_record(i, lam) for i, lam in enumerate(modes)]
    out = _out_dir(args)

    def table(fun):
        return {str(i + 1): {str(k): fun(i, k) for k in nodes} for i in range(len(modes))}

    write_json(out / "layer1.json", {"modes": records, "layer1": table(lambda i, k: rep.layer1[i, k])})
    write_json(out / "layer2.json", {"modes": records, "layer2": table(lambda i, k: {
        "re": rep.layer2[i, k].real, "im": rep.layer2[i, k].imag,
        "re_norm": rep.layer2_normalized[i, k].real, "im_norm": rep.layer2_normalized[i, k].imag})})
    write_json(out / "layer3.json", {"modes": records, "layer3": table(
        lambda i, k: {name: _cplx(v) for name, v in rep.layer3[i, k].items()})})

    if args.verify:
        rng = np.random.default_rng(LEMMA_SEED)
        jobs = []
        for i, lam in enumerate(modes):
            for k in nodes:
                dz = rng.normal(size=(model.block,) * 2) + 1j * rng.normal(size=(model.block,) * 2)
                jobs.append((i, k, dz / np.linalg.norm(dz)))
        checks = _pmap(lambda job: verify_lemma_fd(model, job[1], modes[job[0]], job[2], LEMMA_EPS), jobs)
        rows = []
        for (i, k, dz), chk in zip(jobs, checks):
            rows.append({
                "mode": i + 1,
                "node": k,
                "delta_z": [[_cplx(v) for v in row] for row in dz],
                "eps": list(chk.eps),
                "predicted": [_cplx(v) for v in chk.predicted],
                "observed": [_cplx(v) for v in chk.observed],
                "rel_error": list(chk.rel_errors),
                "order": chk.order,
            })
        write_json(out / "lemma_check.json", {"modes": records, "lemma_check": rows})
        orders = [r["order"] for r in rows]
        _say(args, f"lemma check: {len(rows)} cases, convergence order {min(orders):.3f}..{max(orders):.3f}")

    _say(args, f"{desc.name}: {len(modes)} modes x {len(nodes)} nodes")
    for i, lam in enumerate(modes):
        top = max(nodes, key=lambda k: rep.layer1[i, k])
        _say(args, f"  mode {i + 1:3d} {lam.real:12.5g} {lam.imag:+12.5g}j  "
                   f"largest layer-1 at node {top} ({rep.layer1[i, top]:.4g})")
    _say(args, f"wrote layer reports to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.order < 1:
        raise InputError(f"--order must be at least 1, got {args.order}")
    if args.iters < 1:
        raise InputError(f"--iters must be at least 1, got {args.iters}")
    spectrum = read_spectrum_csv(args.spectrum)
    cfg = FitConfig(args.order, args.iters, weighting=args.weighting)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FitWarning)
        result = vector_fit(spectrum, cfg)
    q = fit_quality(result, spectrum)
    doc = result_to_dict(result)
    doc["converged"] = result.converged
    doc["quality"] = {
        "rms_rel": q.rms_rel,
        "max_rel": q.max_rel,
        "bands": [{"f_lo_hz": lo, "f_hi_hz": hi, "rms_rel": r} for lo, hi, r in q.bands],
    }
    out = _out_dir(args)
    name = Path(args.spectrum).stem
    write_json(out / f"fit_{name}.json", doc)
    for wmsg in caught:
        print(f"greybox: warning: {wmsg.message}", file=sys.stderr)
    _say(args, f"order {args.order}: rms {q.rms_rel:.3g}, max {q.max_rel:.3g}")
    for a in result.poles:
        if a.imag >= 0:
            _say(args, f"  pole {a.real:14.6g} {a.imag:+14.6g}j")
    _say(args, f"wrote {out / f'fit_{name}.json'}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="greybox", description="Impedance participation analysis of power systems.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--quiet", action="store_true", help="no summary on standard output")

    p = sub.add_parser("modes", help="whole-system modes and per-node admittance spectra")
    p.add_argument("--config", required=True, help="system file, or the name of a bundled system")
    p.add_argument("--fmin", type=float, default=0.1, help="lowest sweep frequency in Hz")
    p.add_argument("--fmax", type=float, default=1e4, help="highest sweep frequency in Hz")
    p.add_argument("--points", type=int, default=2000, help="log-spaced sweep points")
    p.add_argument("--nodes", help="comma-separated node ids (default: all)")
    common(p)
    p.set_defaults(func=cmd_modes)

    p = sub.add_parser("participate", help="layer 1-3 participation reports")
    p.add_argument("--config", required=True, help="system file, or the name of a bundled system")
    p.add_argument("--mode-freq", type=float, nargs=2, metavar=("LO", "HI"), help="mode frequency window in Hz")
    p.add_argument("--damping-below", type=float, help="keep modes with damping ratio below this")
    p.add_argument("--nodes", help="comma-separated node ids (default: all)")
    p.add_argument("--verify", action="store_true", help="also run the finite-difference lemma check")
    common(p)
    p.set_defaults(func=cmd_participate)

    p = sub.add_parser("fit", help="vector fit of a sampled spectrum CSV")
    p.add_argument("spectrum", help="spectrum CSV (freq_hz, re_ij, im_ij columns)")
    p.add_argument("--order", type=int, required=True, help="number of poles")
    p.add_argument("--iters", type=int, default=10, help="pole relocation passes")
    p.add_argument("--weighting", choices=("uniform", "inverse"), default="uniform")
    common(p)
    p.set_defaults(func=cmd_fit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, SystemFileError, SpectrumFormatError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(EXIT_INPUT, exc)
    except DegenerateSpectrumError as exc:
        return _fail(EXIT_DEGENERATE, exc)
    except (AssemblyError, EquilibriumError, ApparatusError) as exc:
        return _fail(EXIT_ASSEMBLY, exc)
    except FitError as exc:
        return _fail(EXIT_FIT, exc)
    except LTIError as exc:
        return _fail(EXIT_ASSEMBLY, exc)


def _fail(code: int, exc: Exception) -> int:
    print(f"greybox: error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
