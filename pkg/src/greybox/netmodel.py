"""Network assembly and the whole-system admittance.

The network is lumped RLC in the synchronous dq frame (or, for sanity
fixtures, a single-channel "scalar" frame).  All quantities are per unit;
inductance and capacitance are given as reactance and susceptance at the base
frequency ``omega0`` and time is in seconds.

The whole-system admittance ``Yhat = (I + Y_net Z)^{-1} Y_net`` equals
``(Z + Z_net)^{-1}`` with ``Z_net = Y_net^{-1}``.  It is realized by closing
the block-diagonal apparatus admittance in feedback with ``Z_net``, which
keeps every apparatus state visible in the whole-system ``A`` matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .apparatus import (
    ApparatusModel,
    Equilibrium,
    find_equilibrium,
    linearize_admittance,
)
from .lticore import (
    EigenSystem,
    IllPosedError,
    InversionError,
    StateSpaceForm,
    block_diag,
    eigen_decompose,
    feedback,
    invert,
    parallel,
    subsystem,
)

__all__ = [
    "AssemblyError",
    "Branch",
    "NetworkDescription",
    "Shunt",
    "TopologyError",
    "WholeSystemModel",
    "assemble_whole_system",
    "build_nodal_admittance",
    "dq_block",
    "grid_impedance_seen",
    "interconnect_admittances",
    "interconnect_impedances",
    "linearize_for_frame",
    "model_from_admittances",
    "nodal_admittance_at",
    "whole_system_admittance_at",
    "whole_system_impedance_at",
    "realization_delta",
    "with_admittance",
    "with_apparatus",
]

J = np.array([[0.0, -1.0], [1.0, 0.0]])
CHECK_POINTS = 20
CHECK_RTOL = 1e-8


class AssemblyError(ValueError):
    pass


class TopologyError(AssemblyError):
    pass


@dataclass(frozen=True)
class Branch:
    from_node: int
    to_node: int
    r: float = 0.0
    l: float = 0.0
    c: float = 0.0  # total line charging, split half to each end


@dataclass(frozen=True)
class Shunt:
    """Node-to-ground element: series ``r``-``l`` path in parallel with ``c``."""

    node: int
    r: float = 0.0
    l: float = 0.0
    c: float = 0.0


@dataclass(frozen=True)
class NetworkDescription:
    node_count: int
    omega0: float
    branches: tuple[Branch, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    s_base: float = 1.0
    v_base: float = 1.0
    frame: str = "dq"

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "shunts", tuple(self.shunts))
        if self.node_count < 1:
            raise AssemblyError("network needs at least one node")
        if self.frame not in ("dq", "scalar"):
            raise AssemblyError(f"unknown frame {self.frame!r}; use 'dq' or 'scalar'")
        if not self.omega0 > 0:
            raise AssemblyError("base frequency must be positive")
        for el in self.branches + self.shunts:
            nodes = (el.from_node, el.to_node) if isinstance(el, Branch) else (el.node,)
            for n in nodes:
                if not 1 <= n <= self.node_count:
                    raise AssemblyError(f"{el}: node index {n} outside 1..{self.node_count}")
            if min(el.r, el.l, el.c) < 0:
                raise AssemblyError(f"{el}: negative r, l or c")
            if isinstance(el, Branch):
                if el.from_node == el.to_node:
                    raise AssemblyError(f"{el}: branch connects a node to itself")
                if el.r == 0 and el.l == 0:
                    raise AssemblyError(f"{el}: zero series impedance")

    @property
    def block(self) -> int:
        return 2 if self.frame == "dq" else 1

    def check_connected(self) -> None:
        k = self.node_count
        if k == 1:
            return
        rows = [b.from_node - 1 for b in self.branches]
        cols = [b.to_node - 1 for b in self.branches]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(k, k))
        count, labels = connected_components(graph, directed=False)
        if count > 1:
            main = np.bincount(labels).argmax()
            lonely = [i + 1 for i in range(k) if labels[i] != main]
            raise AssemblyError(f"network is not connected; nodes {lonely} are isolated")


def dq_block(z_phasor, s, omega0: float) -> np.ndarray:
    """Real-rational dq block of a stationary-frame scalar ``z_phasor(s)``.

    Uses the synchronous-frame shift; on the real axis this is the
    ``[[a, -b], [b, a]]`` embedding of ``z_phasor(s + j omega0)``.
    """
    zp = z_phasor(s + 1j * omega0)
    zn = z_phasor(s - 1j * omega0)
    a = 0.5 * (zp + zn)
    b = (zp - zn) / 2j
    return np.array([[a, -b], [b, a]])


def _rotation(net: NetworkDescription) -> np.ndarray:
    return J if net.frame == "dq" else np.zeros((1, 1))


def build_nodal_admittance(net: NetworkDescription) -> StateSpaceForm:
    """Nodal admittance ``Y_net`` mapping node voltages to currents into the network.

    Inductive elements contribute a current state pair; purely resistive
    elements and capacitors enter ``D`` and ``E``.
    """
    net.check_connected()
    m = net.block
    w0 = net.omega0
    Jm = _rotation(net)
    eye = np.eye(m)
    size = m * net.node_count
    D = np.zeros((size, size))
    E = np.zeros((size, size))
    a_blocks, b_rows, c_cols = [], [], []

    def node_map(pairs):
        # incidence of a two-terminal element: +I at one end, -I at the other
        P = np.zeros((size, m))
        for node, sign in pairs:
            P[m * (node - 1):m * node] += sign * eye
        return P

    elements = [(node_map([(b.from_node, 1), (b.to_node, -1)]), b.r, b.l) for b in net.branches]
    elements += [(node_map([(sh.node, 1)]), sh.r, sh.l) for sh in net.shunts if sh.r > 0 or sh.l > 0]
    for P, r, l in elements:
        if l > 0:
            a_blocks.append(-w0 * (r / l * eye + Jm))
            b_rows.append((w0 / l) * P.T)
            c_cols.append(P)
        else:
            D += P @ P.T / r
    caps = [(b.from_node, b.c / 2) for b in net.branches] + [(b.to_node, b.c / 2) for b in net.branches]
    caps += [(sh.node, sh.c) for sh in net.shunts]
    for node, c in caps:
        sl = slice(m * (node - 1), m * node)
        E[sl, sl] += (c / w0) * eye
        D[sl, sl] += c * Jm
    n = m * len(a_blocks)
    A = np.zeros((n, n))
    for i, blk in enumerate(a_blocks):
        A[m * i:m * (i + 1), m * i:m * (i + 1)] = blk
    B = np.vstack(b_rows) if b_rows else np.zeros((0, size))
    C = np.hstack(c_cols) if c_cols else np.zeros((size, 0))
    return StateSpaceForm(A, B, C, D, E)


def nodal_admittance_at(net: NetworkDescription, s: complex) -> np.ndarray:
    """Independent evaluation of ``Y_net(s)`` from phasor element formulas."""
    m = net.block
    w0 = net.omega0
    size = m * net.node_count
    Y = np.zeros((size, size), dtype=complex)

    def block(zfun):
        if m == 1:
            return np.array([[zfun(s)]])
        return dq_block(zfun, s, w0)

    def add(i, j, blk):
        Y[m * (i - 1):m * i, m * (j - 1):m * j] += blk

    for b in net.branches:
        y = np.linalg.inv(block(lambda x, b=b: b.r + x * b.l / w0))
        add(b.from_node, b.from_node, y)
        add(b.to_node, b.to_node, y)
        add(b.from_node, b.to_node, -y)
        add(b.to_node, b.from_node, -y)
        cap = block(lambda x, b=b: x * b.c / (2 * w0))
        add(b.from_node, b.from_node, cap)
        add(b.to_node, b.to_node, cap)
    for sh in net.shunts:
        if sh.r > 0 or sh.l > 0:
            add(sh.node, sh.node, np.linalg.inv(block(lambda x, sh=sh: sh.r + x * sh.l / w0)))
        add(sh.node, sh.node, block(lambda x, sh=sh: x * sh.c / w0))
    return Y


def linearize_for_frame(app: ApparatusModel, frame: str) -> tuple[StateSpaceForm, Equilibrium | None]:
    """Admittance of ``app`` in the given frame, with its equilibrium (dq only)."""
    if frame == "scalar":
        return _scalar_admittance(app), None
    eq = find_equilibrium(app)
    return linearize_admittance(app, eq), eq


def _scalar_admittance(app: ApparatusModel) -> StateSpaceForm:
    # single-channel stand-ins for the passive kinds
    p, w0 = app.params, app.omega0
    if app.kind == "rl_branch":
        return StateSpaceForm([[-w0 * p["R"] / p["L"]]], [[w0 / p["L"]]], [[1.0]], [[0.0]])
    if app.kind == "placeholder":
        return StateSpaceForm.static([[1.0 / p["R"]]])
    raise AssemblyError(f"apparatus kind {app.kind!r} has no scalar-frame form")


def _direct_whole_system(y_net: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.linalg.solve(np.eye(y_net.shape[0]) + y_net @ z, y_net)


def _check_points(omega0: float, seed: int = 20240611) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = omega0 * 10.0 ** rng.uniform(-2, 2, CHECK_POINTS)
    sign = rng.choice([-1.0, 1.0], CHECK_POINTS)
    sigma = -w * rng.uniform(0.0, 0.2, CHECK_POINTS)
    return sigma + 1j * sign * w


@dataclass(frozen=True, eq=False)
class WholeSystemModel:
    """Assembled realization of ``v_hat -> i_hat`` over all nodes.

    States are ordered as apparatus states (node order) followed by the
    network states of ``Z_net``.  The model is immutable; cached quantities
    are computed once and may be shared between threads after first use.
    """

    network: NetworkDescription | None
    y_net: StateSpaceForm
    apparatus_admittances: tuple[StateSpaceForm, ...]
    realization: StateSpaceForm
    apparatus: tuple[ApparatusModel | None, ...] = ()
    equilibria: tuple[Equilibrium | None, ...] = ()
    check_error: float = 0.0
    state_labels: tuple[str, ...] = field(default=())

    @property
    def node_count(self) -> int:
        return len(self.apparatus_admittances)

    @property
    def block(self) -> int:
        return self.apparatus_admittances[0].shape[0]

    @property
    def A(self) -> np.ndarray:
        return self.realization.A

    @cached_property
    def eigensystem(self) -> EigenSystem:
        return eigen_decompose(self.realization.A)

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eigensystem.eigenvalues

    @cached_property
    def z_net(self) -> StateSpaceForm:
        return invert(self.y_net)

    @cached_property
    def impedance_realization(self) -> StateSpaceForm:
        return whole_system_impedance_at(self)

    @cached_property
    def impedance_eigensystem(self) -> EigenSystem:
        return eigen_decompose(self.impedance_realization.A)

    @property
    def frame(self) -> str:
        return self.network.frame if self.network is not None else ("dq" if self.block == 2 else "scalar")

    @cached_property
    def state_offsets(self) -> tuple[int, ...]:
        out, pos = [], 0
        for y in self.apparatus_admittances:
            out.append(pos)
            pos += y.n_states
        return tuple(out)

    def apparatus_states(self, k: int) -> range:
        self._check_node(k)
        start = self.state_offsets[k - 1]
        return range(start, start + self.apparatus_admittances[k - 1].n_states)

    def channels(self, k: int) -> np.ndarray:
        self._check_node(k)
        m = self.block
        return np.arange(m * (k - 1), m * k)

    def _check_node(self, k: int) -> None:
        if not (isinstance(k, (int, np.integer)) and 1 <= k <= self.node_count):
            raise IndexError(f"node index {k} outside 1..{self.node_count}")

    def apparatus_impedance_at(self, k: int, s) -> np.ndarray:
        """``Z_k(s)`` as the inverse of the linearized apparatus admittance."""
        self._check_node(k)
        y = self.apparatus_admittances[k - 1]
        scalar = np.ndim(s) == 0
        Z = np.linalg.inv(y.freqresp(np.atleast_1d(s)))
        return Z[0] if scalar else Z

    def direct_formula_at(self, s: complex) -> np.ndarray:
        """``(I + Y_net Z)^{-1} Y_net`` evaluated pointwise."""
        z = _block_matrix([self.apparatus_impedance_at(k, s) for k in range(1, self.node_count + 1)])
        return _direct_whole_system(self.y_net(s), z)


def _block_matrix(blocks: Sequence[np.ndarray]) -> np.ndarray:
    m = blocks[0].shape[0]
    out = np.zeros((m * len(blocks),) * 2, dtype=complex)
    for i, b in enumerate(blocks):
        out[m * i:m * (i + 1), m * i:m * (i + 1)] = b
    return out


def interconnect_admittances(y_net: StateSpaceForm, admittances: Sequence[StateSpaceForm]) -> StateSpaceForm:
    """``(Z + Y_net^{-1})^{-1}`` from apparatus admittances; apparatus states come first."""
    try:
        z_net = invert(y_net)
    except InversionError as exc:
        raise AssemblyError(
            "nodal admittance has no proper inverse; give every node a shunt capacitance "
            f"or a resistive path to ground ({exc})") from None
    if not z_net.is_proper:
        raise AssemblyError("network impedance is improper; this interconnection is not supported")
    try:
        return feedback(block_diag(list(admittances)), z_net)
    except IllPosedError as exc:
        raise AssemblyError(f"ill-posed interconnection: {exc}") from None


def interconnect_impedances(y_net: StateSpaceForm, impedances: Sequence[StateSpaceForm]) -> StateSpaceForm:
    """``(I + Y_net Z)^{-1} Y_net`` by feedback of ``Y_net`` with proper apparatus impedances."""
    if not y_net.is_proper or not all(z.is_proper for z in impedances):
        raise AssemblyError("impedance route needs a proper Y_net and proper impedances; "
                            "use admittance-form apparatus instead")
    z = block_diag(list(impedances))
    m = impedances[0].shape[0]
    loop = np.eye(y_net.shape[0]) + y_net.D @ z.D
    if np.linalg.cond(loop) >= 1e12:
        bad = _worst_node(loop, m)
        raise AssemblyError(f"ill-posed interconnection: loop feedthrough singular near node {bad}")
    return feedback(y_net, z)


def _worst_node(loop: np.ndarray, m: int) -> int:
    _, _, vh = np.linalg.svd(loop)
    weights = np.abs(vh[-1]).reshape(-1, m).sum(axis=1)
    return int(np.argmax(weights)) + 1


def _verify(model: WholeSystemModel, omega0: float) -> None:
    worst = 0.0
    for s in _check_points(omega0):
        ref = model.direct_formula_at(s)
        got = model.realization(s)
        worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    if not worst <= CHECK_RTOL:
        raise AssemblyError(f"assembled realization deviates from the direct formula by {worst:.3g}")
    object.__setattr__(model, "check_error", worst)


def _state_labels(apparatus, admittances, net_states: int) -> tuple[str, ...]:
    labels = []
    for k, (app, y) in enumerate(zip(apparatus, admittances), start=1):
        names = app.state_names if app is not None and y.n_states == len(app.state_names) else \
            tuple(f"x{i}" for i in range(y.n_states))
        labels += [f"node{k}.{n}" for n in names]
    labels += [f"net.{i}" for i in range(net_states)]
    return tuple(labels)


def assemble_whole_system(net: NetworkDescription, apparatus: Sequence[ApparatusModel | None],
                          verify: bool = True) -> WholeSystemModel:
    """Linearize every apparatus and close the loop with the network.

    ``apparatus[k-1]`` sits at node ``k``; ``None`` is replaced by a
    high-impedance resistive placeholder.
    """
    if len(apparatus) != net.node_count:
        raise AssemblyError(f"need one apparatus per node: got {len(apparatus)} for {net.node_count} nodes")
    apps, eqs, ys = [], [], []
    for k, app in enumerate(apparatus, start=1):
        if app is None:
            app = ApparatusModel("placeholder", {}, omega0=net.omega0, name=f"placeholder@{k}")
        y, eq = linearize_for_frame(app, net.frame)
        apps.append(app)
        eqs.append(eq)
        ys.append(y)
    y_net = build_nodal_admittance(net)
    real = interconnect_admittances(y_net, ys)
    net_states = real.n_states - sum(y.n_states for y in ys)
    model = WholeSystemModel(net, y_net, tuple(ys), real, tuple(apps), tuple(eqs),
                             state_labels=_state_labels(apps, ys, net_states))
    if verify:
        _verify(model, net.omega0)
    return model


def model_from_admittances(y_net: StateSpaceForm, admittances: Sequence[StateSpaceForm],
                           omega0: float = 1.0, verify: bool = True) -> WholeSystemModel:
    """Whole-system model from already linearized apparatus admittances."""
    real = interconnect_admittances(y_net, admittances)
    net_states = real.n_states - sum(y.n_states for y in admittances)
    model = WholeSystemModel(None, y_net, tuple(admittances), real,
                             state_labels=_state_labels([None] * len(admittances), admittances, net_states))
    if verify:
        _verify(model, omega0)
    return model


def whole_system_admittance_at(model: WholeSystemModel, k: int) -> StateSpaceForm:
    """Diagonal block ``Yhat_kk``: input ``v_hat_k``, output ``i_hat_k``."""
    ch = model.channels(k)
    return subsystem(model.realization, ch, ch)


def _loaded_network(model: WholeSystemModel, skip: int | None) -> StateSpaceForm:
    m = model.block
    loads = []
    for j, y in enumerate(model.apparatus_admittances, start=1):
        loads.append(StateSpaceForm.static(np.zeros((m, m))) if j == skip else y)
    return parallel(model.y_net, block_diag(loads))


def grid_impedance_seen(model: WholeSystemModel, k: int) -> StateSpaceForm:
    """Driving-point impedance ``Z_gk`` at node ``k`` with apparatus ``k`` removed."""
    ch = model.channels(k)
    try:
        z = invert(_loaded_network(model, k))
    except InversionError as exc:
        raise TopologyError(f"removing the apparatus at node {k} leaves the network without "
                            f"a defined driving-point impedance ({exc})") from None
    return subsystem(z, ch, ch)


def whole_system_impedance_at(model: WholeSystemModel) -> StateSpaceForm:
    """``Zhat = (Y_net + Y)^{-1}``: node voltages from current injections."""
    try:
        return invert(_loaded_network(model, None))
    except InversionError as exc:
        raise AssemblyError(f"whole-system impedance is not realizable ({exc})") from None


def with_admittance(model: WholeSystemModel, k: int, admittance: StateSpaceForm) -> WholeSystemModel:
    """Copy of ``model`` with the apparatus admittance at node ``k`` replaced."""
    model._check_node(k)
    ys = list(model.apparatus_admittances)
    ys[k - 1] = admittance
    real = interconnect_admittances(model.y_net, ys)
    return WholeSystemModel(model.network, model.y_net, tuple(ys), real, model.apparatus,
                            model.equilibria, state_labels=model.state_labels)


def with_apparatus(model: WholeSystemModel, k: int, app: ApparatusModel) -> WholeSystemModel:
    """Copy of ``model`` with apparatus ``k`` replaced and re-linearized at its own equilibrium."""
    model._check_node(k)
    y, eq = linearize_for_frame(app, model.frame)
    new = with_admittance(model, k, y)
    apps = list(model.apparatus) if model.apparatus else [None] * model.node_count
    eqs = list(model.equilibria) if model.equilibria else [None] * model.node_count
    apps[k - 1], eqs[k - 1] = app, eq
    object.__setattr__(new, "apparatus", tuple(apps))
    object.__setattr__(new, "equilibria", tuple(eqs))
    return new


def realization_delta(model: WholeSystemModel, k: int, dA, dB, dC, dD) -> np.ndarray:
    """Change of the whole-system ``A`` when apparatus ``k``'s matrices change by ``dA..dD``.

    The closed loop is affine in the apparatus matrices, so the change is
    formed directly from the increments without subtracting large matrices.
    A static part in the network impedance makes the loop nonlinear in
    ``dD``; that case falls back to rebuilding the loop and subtracting.
    """
    y = model.apparatus_admittances[k - 1]
    if y.E.any():
        raise AssemblyError("apparatus admittances must be proper")
    z = model.z_net
    if z.D.any():
        moved = StateSpaceForm(y.A + dA, y.B + dB, y.C + dC, y.D + dD)
        return with_admittance(model, k, moved).A - model.A
    ch = model.channels(k)
    o = model.state_offsets[k - 1]
    n = y.n_states
    na = sum(a.n_states for a in model.apparatus_admittances)
    out = np.zeros(model.A.shape, dtype=np.result_type(dA, dB, dC, dD, float))
    sl = slice(o, o + n)
    out[sl, sl] = dA
    out[sl, na:] = -np.asarray(dB) @ z.C[ch]
    out[na:, sl] = z.B[:, ch] @ np.asarray(dC)
    out[na:, na:] = -z.B[:, ch] @ np.asarray(dD) @ z.C[ch]
    return out
