"""System description files (JSON).

Layout::

    {
      "base": {"f0_hz": 50, "s_base": 100e6, "v_base": 230e3},
      "frame": "dq",
      "nodes": [{"id": 1, "shunt": {"r": 0, "l": 0, "c": 0.05}}, ...],
      "branches": [{"from": 1, "to": 2, "r": 0.01, "l": 0.1, "c": 0.02}, ...],
      "apparatus": [{"node": 1, "model": "swing_sg", "params": {...},
                     "setpoint": {"p": 0.5, "q": 0, "v": 1, "angle": 0}}, ...]
    }

``base`` may give ``omega0`` (rad/s) instead of ``f0_hz``.  Node ids must be
``1..K``.  Apparatus parameters and setpoints are per unit in the global
synchronous frame; ``angle`` is in radians.  Nodes without an apparatus get
a high-impedance placeholder.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

from .apparatus import ApparatusError, ApparatusModel, Setpoint
from .netmodel import AssemblyError, Branch, NetworkDescription, Shunt

__all__ = ["SystemDescription", "SystemFileError", "bundled_systems", "load_system", "parse_system"]


class SystemFileError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


@dataclass(frozen=True)
class SystemDescription:
    name: str
    network: NetworkDescription
    apparatus: tuple[ApparatusModel | None, ...]


def bundled_systems() -> list[str]:
    root = resources.files("greybox") / "data"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _resolve(ref: str | Path) -> tuple[str, str]:
    path = Path(ref)
    if path.is_file():
        return path.stem, path.read_text()
    name = path.stem if path.suffix == ".json" else str(ref)
    if name in bundled_systems():
        return name, (resources.files("greybox") / "data" / f"{name}.json").read_text()
    raise SystemFileError(str(ref), "no such file or bundled system")


def load_system(ref: str | Path) -> SystemDescription:
    """Load a system file by path, or a bundled system by name."""
    name, text = _resolve(ref)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SystemFileError(f"{ref}:{exc.lineno}:{exc.colno}", exc.msg) from None
    return parse_system(raw, name)


def _number(obj: dict, key: str, where: str, default: float | None = None, lo: float | None = None) -> float:
    if key not in obj:
        if default is None:
            raise SystemFileError(f"{where}.{key}", "missing")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise SystemFileError(f"{where}.{key}", f"expected a finite number, got {val!r}")
    if lo is not None and val < lo:
        raise SystemFileError(f"{where}.{key}", f"must be >= {lo}, got {val}")
    return float(val)


def _obj(val: Any, where: str) -> dict:
    if not isinstance(val, dict):
        raise SystemFileError(where, f"expected an object, got {type(val).__name__}")
    return val


def _list(raw: dict, key: str, required: bool = True) -> list:
    if key not in raw:
        if required:
            raise SystemFileError(key, "missing")
        return []
    if not isinstance(raw[key], list):
        raise SystemFileError(key, "expected a list")
    return raw[key]


def _check_keys(obj: dict, allowed: set, where: str) -> None:
    extra = sorted(set(obj) - allowed)
    if extra:
        raise SystemFileError(where, f"unknown field(s) {extra}")


def parse_system(raw: Any, name: str = "system") -> SystemDescription:
    raw = _obj(raw, "<root>")
    _check_keys(raw, {"name", "description", "base", "frame", "nodes", "branches", "apparatus"}, "<root>")
    base = _obj(raw.get("base"), "base")
    _check_keys(base, {"f0_hz", "omega0", "s_base", "v_base"}, "base")
    if "omega0" in base:
        omega0 = _number(base, "omega0", "base", lo=0)
    else:
        omega0 = 2 * math.pi * _number(base, "f0_hz", "base", lo=0)
    s_base = _number(base, "s_base", "base", 1.0, lo=0)
    v_base = _number(base, "v_base", "base", 1.0, lo=0)
    frame = raw.get("frame", "dq")

    nodes = _list(raw, "nodes")
    shunts, ids = [], []
    for i, node in enumerate(nodes):
        where = f"nodes[{i}]"
        node = _obj(node, where)
        _check_keys(node, {"id", "name", "shunt"}, where)
        nid = node.get("id")
        if not isinstance(nid, int) or isinstance(nid, bool):
            raise SystemFileError(f"{where}.id", f"expected an integer, got {nid!r}")
        ids.append(nid)
        if "shunt" in node:
            sh = _obj(node["shunt"], f"{where}.shunt")
            _check_keys(sh, {"r", "l", "c"}, f"{where}.shunt")
            shunts.append(Shunt(nid, *(_number(sh, k, f"{where}.shunt", 0.0, lo=0) for k in "rlc")))
    if sorted(ids) != list(range(1, len(ids) + 1)):
        raise SystemFileError("nodes", f"ids must be 1..{len(ids)} without gaps, got {sorted(ids)}")

    branches = []
    for i, br in enumerate(_list(raw, "branches", required=False)):
        where = f"branches[{i}]"
        br = _obj(br, where)
        _check_keys(br, {"from", "to", "r", "l", "c"}, where)
        ends = []
        for key in ("from", "to"):
            val = br.get(key)
            if not isinstance(val, int) or isinstance(val, bool):
                raise SystemFileError(f"{where}.{key}", f"expected a node id, got {val!r}")
            ends.append(val)
        branches.append(Branch(ends[0], ends[1], *(_number(br, k, where, 0.0, lo=0) for k in "rlc")))

    try:
        net = NetworkDescription(len(ids), omega0, branches, shunts, s_base, v_base, frame)
    except AssemblyError as exc:
        raise SystemFileError("network", str(exc)) from None

    placed: list[ApparatusModel | None] = [None] * len(ids)
    for i, entry in enumerate(_list(raw, "apparatus")):
        where = f"apparatus[{i}]"
        entry = _obj(entry, where)
        _check_keys(entry, {"node", "model", "params", "setpoint", "name"}, where)
        node = entry.get("node")
        if not isinstance(node, int) or not 1 <= node <= len(ids):
            raise SystemFileError(f"{where}.node", f"expected a node id in 1..{len(ids)}, got {node!r}")
        if placed[node - 1] is not None:
            raise SystemFileError(f"{where}.node", f"node {node} already has an apparatus")
        params = _obj(entry.get("params", {}), f"{where}.params")
        values = {k: _number(params, k, f"{where}.params") for k in params}
        sp = _obj(entry.get("setpoint", {}), f"{where}.setpoint")
        _check_keys(sp, {"p", "q", "v", "angle"}, f"{where}.setpoint")
        setpoint = Setpoint(
            _number(sp, "p", f"{where}.setpoint", 0.0),
            _number(sp, "q", f"{where}.setpoint", 0.0),
            _number(sp, "v", f"{where}.setpoint", 1.0, lo=0),
            _number(sp, "angle", f"{where}.setpoint", 0.0),
        )
        try:
            placed[node - 1] = ApparatusModel(str(entry.get("model")), values, setpoint, omega0,
                                              entry.get("name", f"{entry.get('model')}@{node}"))
        except ApparatusError as exc:
            raise SystemFileError(where, str(exc)) from None
    return SystemDescription(str(raw.get("name", name)), net, tuple(placed))
