"""Network data, extended admittance assembly, Kron reduction and the post-fault SEP."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FAULT_REACTANCE = 1e-6
LOSSLESS_TOL = 1e-8
EDGE_TOL = 1e-12


class ModelError(ValueError):
    pass


class LosslessError(ModelError):
    pass


class SEPError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    load_p: float = 0.0
    load_q: float = 0.0
    is_rg: bool = False
    rg_p: float = 0.0
    rg_q: float = 0.0
    lvrt_curve: tuple[tuple[float, float], ...] | None = None
    lvrt_max: float | None = None

    @property
    def net_p(self) -> float:
        # RG injection enters as negative load
        return self.load_p - self.rg_p

    @property
    def net_q(self) -> float:
        return self.load_q - self.rg_q


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    reactance_x: float
    shunt_b: float = 0.0
    resistance_r: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    m: float
    d: float
    xd_prime: float
    e_mag: float
    p_m: float


@dataclass(frozen=True)
class NetworkModel:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def rg_buses(self) -> list[Bus]:
        return [b for b in self.buses if b.is_rg]

    def branch(self, branch_id: int) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise ModelError(f"unknown branch id {branch_id}")

    @property
    def m(self) -> np.ndarray:
        return np.array([g.m for g in self.generators])

    @property
    def d(self) -> np.ndarray:
        return np.array([g.d for g in self.generators])

    @property
    def p_m(self) -> np.ndarray:
        return np.array([g.p_m for g in self.generators])

    @property
    def e_mag(self) -> np.ndarray:
        return np.array([g.e_mag for g in self.generators])


@dataclass(frozen=True)
class Topology:
    """Branch-status overlay: tripped branches and an optional bolted fault.

    ``fault`` is ``(branch_id, location)`` with location the fraction along the
    branch measured from its ``from_bus``.
    """

    out_of_service: frozenset[int] = frozenset()
    fault: tuple[int, float] | None = None


@dataclass(frozen=True)
class ExtendedAdmittance:
    y_ext: np.ndarray
    n_gen: int
    n_bus: int
    node_ids: tuple  # bus ids, plus "fault" for a split fault node

    @property
    def y_gg(self):
        return self.y_ext[: self.n_gen, : self.n_gen]

    @property
    def y_gv(self):
        return self.y_ext[: self.n_gen, self.n_gen :]

    @property
    def y_vg(self):
        return self.y_ext[self.n_gen :, : self.n_gen]

    @property
    def y_vv(self):
        return self.y_ext[self.n_gen :, self.n_gen :]


@dataclass(frozen=True)
class ReducedModel:
    b_red: np.ndarray
    e_mag: np.ndarray
    edges: tuple[tuple[int, int], ...]
    m: np.ndarray
    d: np.ndarray
    p_m: np.ndarray

    @property
    def n(self) -> int:
        return len(self.m)

    @property
    def edge_weights(self) -> np.ndarray:
        """B_kj E_k E_j per edge."""
        return np.array([self.b_red[k, j] * self.e_mag[k] * self.e_mag[j] for k, j in self.edges])

    def electrical_power(self, delta: np.ndarray) -> np.ndarray:
        """P_e,k = sum_j B_kj E_k E_j sin(delta_k - delta_j); works on (..., n) arrays."""
        delta = np.asarray(delta, dtype=float)
        diff = delta[..., :, None] - delta[..., None, :]
        w = self.b_red * np.outer(self.e_mag, self.e_mag)
        np.fill_diagonal(w, 0.0)
        return np.sum(w * np.sin(diff), axis=-1)

    def accelerating_power(self, delta: np.ndarray) -> np.ndarray:
        """COA-frame mismatch P_m,k - m_k/M_T * sum(P_m) - P_e,k."""
        share = self.m / self.m.sum() * self.p_m.sum()
        return self.p_m - share - self.electrical_power(delta)


@dataclass(frozen=True)
class VoltageRecovery:
    p_mat: np.ndarray
    node_ids: tuple
    rg_constants: dict = field(default_factory=dict)  # bus id -> (C_i array, delta_ic array)

    def bus_row(self, bus_id) -> np.ndarray:
        return self.p_mat[list(self.node_ids).index(bus_id)]


# ---------------------------------------------------------------- loading


def _parse_curve(raw):
    if raw is None:
        return None
    return tuple((float(t), float(v)) for t, v in raw)


def model_from_dict(data: dict) -> NetworkModel:
    try:
        base = float(data.get("base_mva", 100.0))
        raw_buses = data["buses"]
        raw_branches = data["branches"]
        raw_gens = data["generators"]
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model: {exc}") from exc

    buses = []
    seen = set()
    for rb in raw_buses:
        bid = int(rb["id"])
        if bid in seen:
            raise ModelError(f"duplicate bus id {bid}")
        seen.add(bid)
        is_rg = bool(rb.get("is_rg", False))
        curve = _parse_curve(rb.get("lvrt_curve"))
        lvrt_max = rb.get("lvrt_max")
        if not is_rg and (curve is not None or lvrt_max is not None):
            raise ModelError(f"bus {bid}: LVRT data on a non-RG bus")
        if is_rg and lvrt_max is None and curve is not None:
            from .feasreg import lvrt_max_from_curve

            lvrt_max = lvrt_max_from_curve(curve)
        if lvrt_max is not None and not 0.0 < float(lvrt_max) <= 1.0:
            raise ModelError(f"bus {bid}: lvrt_max must lie in (0, 1]")
        buses.append(
            Bus(
                id=bid,
                load_p=float(rb.get("load_p", 0.0)),
                load_q=float(rb.get("load_q", 0.0)),
                is_rg=is_rg,
                rg_p=float(rb.get("rg_p", 0.0)),
                rg_q=float(rb.get("rg_q", 0.0)),
                lvrt_curve=curve,
                lvrt_max=None if lvrt_max is None else float(lvrt_max),
            )
        )

    branches = []
    for idx, rb in enumerate(raw_branches):
        x = float(rb["reactance_x"])
        r = float(rb.get("resistance_r", 0.0))
        bid = int(rb.get("id", idx))
        if x <= 0:
            raise ModelError(f"branch {bid}: reactance must be positive")
        frm, to = int(rb["from"]), int(rb["to"])
        for b in (frm, to):
            if b not in seen:
                raise ModelError(f"branch {bid} references unknown bus {b}")
        if r != 0.0:
            warnings.warn(f"branch {bid}: resistance {r} zeroed (lossless model)", stacklevel=2)
            r = 0.0
        branches.append(Branch(bid, frm, to, x, float(rb.get("shunt_b", 0.0)), r))
    if len({b.id for b in branches}) != len(branches):
        raise ModelError("duplicate branch id")

    gens = []
    for rg in raw_gens:
        g = Generator(
            bus=int(rg["bus"]),
            m=float(rg["m"]),
            d=float(rg["d"]),
            xd_prime=float(rg["xd_prime"]),
            e_mag=float(rg["e_mag"]),
            p_m=float(rg["p_m"]),
        )
        if g.bus not in seen:
            raise ModelError(f"generator on unknown bus {g.bus}")
        if g.m <= 0:
            raise ModelError("generator inertia must be positive")
        if g.d <= 0:
            raise ModelError("generator damping must be positive")
        if g.e_mag <= 0:
            raise ModelError("generator EMF must be positive")
        if g.xd_prime <= 0:
            raise ModelError("generator transient reactance must be positive")
        gens.append(g)
    if not gens:
        raise ModelError("model has no generators")
    return NetworkModel(base, tuple(buses), tuple(branches), tuple(gens))


def load_model(path) -> NetworkModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"cannot parse {path}: {exc}") from exc
    return model_from_dict(data)


def model_to_dict(model: NetworkModel) -> dict:
    buses = []
    for b in model.buses:
        rb = {"id": b.id, "load_p": b.load_p, "load_q": b.load_q, "is_rg": b.is_rg,
              "rg_p": b.rg_p, "rg_q": b.rg_q}
        if b.lvrt_curve is not None:
            rb["lvrt_curve"] = [list(p) for p in b.lvrt_curve]
        if b.lvrt_max is not None:
            rb["lvrt_max"] = b.lvrt_max
        buses.append(rb)
    return {
        "base_mva": model.base_mva,
        "buses": buses,
        "branches": [
            {"id": br.id, "from": br.from_bus, "to": br.to_bus, "reactance_x": br.reactance_x,
             "shunt_b": br.shunt_b, "resistance_r": br.resistance_r}
            for br in model.branches
        ],
        "generators": [
            {"bus": g.bus, "m": g.m, "d": g.d, "xd_prime": g.xd_prime, "e_mag": g.e_mag, "p_m": g.p_m}
            for g in model.generators
        ],
    }


# ---------------------------------------------------------------- admittance


def _add_series(y, a, b, adm):
    y[a, a] += adm
    y[b, b] += adm
    y[a, b] -= adm
    y[b, a] -= adm


def build_extended_admittance(
    model: NetworkModel,
    topology: Topology | None = None,
    bus_voltage: dict | None = None,
) -> ExtendedAdmittance:
    """Assemble Y_ext over [generator internal nodes | buses (| fault node)].

    Loads and RG negative loads become constant shunts conj(S)/|v|^2, using the
    bus voltage magnitudes in ``bus_voltage`` (defaults to the pre-fault power
    flow solution).
    """
    topology = topology or Topology()
    if bus_voltage is None:
        bus_voltage = prefault_voltages(model)
    n = model.n_gen
    ids = list(model.bus_ids)
    fault = topology.fault
    split = fault is not None and 0.0 < fault[1] < 1.0
    node_ids = tuple(ids + (["fault"] if split else []))
    nb = len(node_ids)
    y = np.zeros((n + nb, n + nb), dtype=complex)
    pos = {bid: n + i for i, bid in enumerate(ids)}

    for k, g in enumerate(model.generators):
        _add_series(y, k, pos[g.bus], 1.0 / (1j * g.xd_prime))

    for br in model.branches:
        if br.id in topology.out_of_service:
            continue
        a, b = pos[br.from_bus], pos[br.to_bus]
        if split and br.id == fault[0]:
            f = n + nb - 1
            loc = fault[1]
            _add_series(y, a, f, 1.0 / (1j * br.reactance_x * loc))
            _add_series(y, f, b, 1.0 / (1j * br.reactance_x * (1.0 - loc)))
        else:
            _add_series(y, a, b, 1.0 / (1j * br.reactance_x))
        y[a, a] += 0.5j * br.shunt_b
        y[b, b] += 0.5j * br.shunt_b

    for bus in model.buses:
        s = complex(bus.net_p, bus.net_q)
        if s != 0:
            vm = bus_voltage[bus.id]
            y[pos[bus.id], pos[bus.id]] += np.conj(s) / vm**2

    if fault is not None:
        model.branch(fault[0])  # validates id
        ground = 1.0 / (1j * FAULT_REACTANCE)
        if split:
            y[n + nb - 1, n + nb - 1] += ground
        else:
            br = model.branch(fault[0])
            node = br.from_bus if fault[1] <= 0.0 else br.to_bus
            y[pos[node], pos[node]] += ground

    ext = ExtendedAdmittance(y, n, nb, node_ids)
    _check_connected(ext)
    return ext


def _check_connected(ext: ExtendedAdmittance):
    """Raise when the generators do not all sit in one connected island."""
    if ext.n_gen < 2:
        return
    adj = np.abs(ext.y_ext) > 0
    seen = {0}
    stack = [0]
    while stack:
        a = stack.pop()
        for b in np.nonzero(adj[a])[0]:
            if int(b) not in seen:
                seen.add(int(b))
                stack.append(int(b))
    missing = [k for k in range(ext.n_gen) if k not in seen]
    if missing:
        raise ModelError(f"singular network: islanded generator(s) {missing}")


def kron_reduce(ext: ExtendedAdmittance, model: NetworkModel) -> ReducedModel:
    try:
        solved = np.linalg.solve(ext.y_vv, ext.y_vg)
    except np.linalg.LinAlgError as exc:
        raise ModelError("singular bus admittance block") from exc
    if np.linalg.cond(ext.y_vv) > 1e14:
        raise ModelError("singular bus admittance block")
    y_red = ext.y_gg - ext.y_gv @ solved
    g_max = np.max(np.abs(y_red.real))
    if g_max > LOSSLESS_TOL:
        raise LosslessError(f"reduced network has conductance {g_max:.3e} pu; model is not lossless")
    b_red = y_red.imag
    b_red = 0.5 * (b_red + b_red.T)
    n = ext.n_gen
    scale = max(1.0, np.max(np.abs(b_red)))
    edges = tuple((k, j) for k in range(n) for j in range(k + 1, n) if abs(b_red[k, j]) > EDGE_TOL * scale)
    return ReducedModel(b_red, model.e_mag, edges, model.m, model.d, model.p_m)


def voltage_recovery_matrix(ext: ExtendedAdmittance, model: NetworkModel | None = None) -> VoltageRecovery:
    try:
        p_mat = -np.linalg.solve(ext.y_vv, ext.y_vg)
    except np.linalg.LinAlgError as exc:
        raise ModelError("singular bus admittance block") from exc
    consts = {}
    if model is not None:
        e = model.e_mag
        for bus in model.rg_buses:
            row = p_mat[list(ext.node_ids).index(bus.id)]
            consts[bus.id] = (e * np.abs(row), np.angle(row))
    return VoltageRecovery(p_mat, ext.node_ids, consts)


def bus_voltages(vr: VoltageRecovery, e_mag: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Complex bus voltages v = P (E e^{j delta})."""
    return vr.p_mat @ (e_mag * np.exp(1j * np.asarray(delta)))


# ---------------------------------------------------------------- equilibrium


def _power_jacobian(reduced: ReducedModel, delta):
    w = reduced.b_red * np.outer(reduced.e_mag, reduced.e_mag)
    np.fill_diagonal(w, 0.0)
    c = w * np.cos(delta[:, None] - delta[None, :])
    jac = -c
    np.fill_diagonal(jac, c.sum(axis=1))
    return jac  # dP_e / d delta


def coa_normalize(delta, m):
    delta = np.asarray(delta, dtype=float)
    return delta - np.dot(m, delta) / m.sum()


def manifold_basis(m: np.ndarray) -> np.ndarray:
    """Orthonormal basis (n x n-1) of {x : m . x = 0}."""
    n = len(m)
    q, _ = np.linalg.qr(np.column_stack([m, np.eye(n)[:, : n - 1]]))
    basis = q[:, 1:n]
    return basis


def sep_eigenvalues(reduced: ReducedModel, delta) -> np.ndarray:
    """Eigenvalues of the linearized swing dynamics restricted to the COA manifold."""
    n = reduced.n
    if n == 1:
        return np.array([])
    u = manifold_basis(reduced.m)
    jac = _power_jacobian(reduced, delta)
    r = u.T @ (jac / reduced.m[:, None]) @ u
    lam = u.T @ np.diag(reduced.d / reduced.m) @ u
    zero = np.zeros((n - 1, n - 1))
    lin = np.block([[zero, np.eye(n - 1)], [-r, -lam]])
    return np.linalg.eigvals(lin)


def compute_sep(reduced: ReducedModel, delta0=None, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Damped Newton on angles relative to machine 0, then COA-normalized."""
    n = reduced.n
    if n == 1:
        return np.zeros(1)
    delta = np.zeros(n) if delta0 is None else np.asarray(delta0, dtype=float) - delta0[0]

    def mismatch(d):
        return reduced.accelerating_power(d)[1:]

    f = mismatch(delta)
    for _ in range(max_iter):
        if np.max(np.abs(f)) <= tol * 1e-2:
            break
        jac = -_power_jacobian(reduced, delta)[1:, 1:]
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise SEPError("singular Jacobian in SEP Newton iteration") from exc
        t = 1.0
        norm0 = np.linalg.norm(f)
        while t > 1e-6:
            trial = delta.copy()
            trial[1:] += t * step
            ft = mismatch(trial)
            if np.linalg.norm(ft) < (1 - 1e-4 * t) * norm0 or norm0 < 1e-14:
                break
            t *= 0.5
        else:
            raise SEPError("Newton line search failed; no equilibrium found")
        delta, f = trial, ft
    resid = np.max(np.abs(reduced.accelerating_power(delta)))
    if resid > tol:
        raise SEPError(f"SEP Newton did not converge (residual {resid:.2e})")
    delta = coa_normalize(delta, reduced.m)
    eig = sep_eigenvalues(reduced, delta)
    if np.any(eig.real >= -1e-9):
        raise SEPError("equilibrium found is not stable (saddle/UEP)")
    return delta


def prefault_voltages(model: NetworkModel, tol: float = 1e-12, max_iter: int = 200) -> dict:
    """Bus voltage magnitudes at nominal (all branches in) conditions.

    Constant-power loads are re-expressed as admittances at the current voltage
    estimate and the network equilibrium re-solved until the magnitudes settle.
    """
    vm = {b.id: 1.0 for b in model.buses}
    if not any(b.net_p or b.net_q for b in model.buses):
        ext = build_extended_admittance(model, Topology(), vm)
        return _voltage_map(model, ext, vm)
    delta = None
    for _ in range(max_iter):
        ext = build_extended_admittance(model, Topology(), vm)
        red = kron_reduce(ext, model)
        delta = compute_sep(red, delta)
        vr = voltage_recovery_matrix(ext)
        v = np.abs(bus_voltages(vr, model.e_mag, delta))
        new = {bid: float(v[i]) for i, bid in enumerate(model.bus_ids)}
        change = max(abs(new[k] - vm[k]) for k in vm)
        vm = new
        if change < tol:
            return vm
    raise ModelError("pre-fault voltage fixed point did not converge")


def _voltage_map(model, ext, vm):
    red = kron_reduce(ext, model)
    delta = compute_sep(red)
    vr = voltage_recovery_matrix(ext)
    v = np.abs(bus_voltages(vr, model.e_mag, delta))
    return {bid: float(v[i]) for i, bid in enumerate(model.bus_ids)}


def prefault_sep(model: NetworkModel, bus_voltage: dict | None = None) -> np.ndarray:
    bus_voltage = bus_voltage or prefault_voltages(model)
    ext = build_extended_admittance(model, Topology(), bus_voltage)
    return compute_sep(kron_reduce(ext, model))


def with_generator(model: NetworkModel, k: int, **changes) -> NetworkModel:
    gens = list(model.generators)
    gens[k] = replace(gens[k], **changes)
    return replace(model, generators=tuple(gens))
