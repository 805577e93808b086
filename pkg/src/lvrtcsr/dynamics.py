"""COA-frame deviation dynamics of the lossless classical multi-machine model."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .integrate import StepSizeUnderflow, integrate_batch
from .netmodel import (
    ModelError,
    NetworkModel,
    ReducedModel,
    Topology,
    build_extended_admittance,
    compute_sep,
    kron_reduce,
    prefault_voltages,
)

RTOL = 1e-8
ATOL = 1e-10


class SimulationError(RuntimeError):
    def __init__(self, msg, t=None, state=None):
        super().__init__(msg)
        self.t = t
        self.state = state


@dataclass(frozen=True)
class COAState:
    x1: np.ndarray
    x2: np.ndarray

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1] // 2
        return cls(x[..., :n], x[..., n:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.x1, self.x2], axis=-1)


def as_vector(x) -> np.ndarray:
    if isinstance(x, COAState):
        return x.vector()
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class StateMatrices:
    a_mat: np.ndarray
    b_mat: np.ndarray
    c_mat: np.ndarray
    g_mat: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    sin_star: np.ndarray
    delta_star: np.ndarray  # COA SEP angles
    edges: tuple
    m: np.ndarray
    damping_ratio: float
    edge_weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.m)

    @property
    def edge_star(self) -> np.ndarray:
        return np.array([self.delta_star[k] - self.delta_star[j] for k, j in self.edges])

    @property
    def c1(self) -> np.ndarray:
        return self.c_mat[:, : self.n]


@dataclass(frozen=True)
class FaultScenario:
    faulted_branch: int
    fault_location: float = 0.5
    clearing_time: float = 0.2
    clearing_action: str = "trip-branch"

    def __post_init__(self):
        if self.clearing_time < 0:
            raise ValueError("clearing_time must be nonnegative")
        if not 0.0 <= self.fault_location <= 1.0:
            raise ValueError("fault_location must lie in [0, 1]")
        if self.clearing_action not in ("trip-branch", "restore"):
            raise ValueError(f"unknown clearing action {self.clearing_action!r}")

    def post_fault_topology(self) -> Topology:
        if self.clearing_action == "trip-branch":
            return Topology(frozenset({self.faulted_branch}))
        return Topology()

    def fault_on_topology(self) -> Topology:
        return Topology(fault=(self.faulted_branch, self.fault_location))

    def to_dict(self) -> dict:
        return {
            "faulted_branch": self.faulted_branch,
            "fault_location": self.fault_location,
            "clearing_time": self.clearing_time,
            "clearing_action": self.clearing_action,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaultScenario":
        try:
            return cls(
                int(d["faulted_branch"]),
                float(d.get("fault_location", 0.5)),
                float(d.get("clearing_time", 0.2)),
                str(d.get("clearing_action", "trip-branch")),
            )
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed fault scenario: {exc}") from exc

    @classmethod
    def load(cls, path) -> "FaultScenario":
        import json

        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: {exc}") from exc


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (T, 2n)
    feasible_lvrt: np.ndarray
    inside_pi: np.ndarray

    def to_csv(self, path):
        n = self.states.shape[1] // 2
        header = ["time"] + [f"x1_{i + 1}" for i in range(n)] + [f"x2_{i + 1}" for i in range(n)]
        header += ["feasible_lvrt", "inside_pi"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, x, a, b in zip(self.times, self.states, self.feasible_lvrt, self.inside_pi):
                w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in x] + [int(a), int(b)])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(data[:, 0], data[:, 1:-2], data[:, -2].astype(bool), data[:, -1].astype(bool))


# ---------------------------------------------------------------- matrices


def check_uniform_damping(m, d, tol=1e-9) -> float:
    ratio = np.asarray(d) / np.asarray(m)
    if np.max(ratio) - np.min(ratio) > tol * max(1.0, np.max(ratio)):
        raise ModelError("non-uniform damping: d_k/m_k must be equal across machines")
    return float(ratio[0])


def build_state_matrices(reduced: ReducedModel, delta_star) -> StateMatrices:
    delta_star = np.asarray(delta_star, dtype=float)
    n = reduced.n
    if delta_star.shape != (n,):
        raise ValueError(f"delta_star has shape {delta_star.shape}, expected ({n},)")
    lam = check_uniform_damping(reduced.m, reduced.d)
    edges = reduced.edges
    ne = len(edges)
    w = reduced.edge_weights if ne else np.zeros(0)
    m = reduced.m

    a = np.zeros((2 * n, 2 * n))
    a[:n, n:] = np.eye(n)
    a[n:, n:] = -np.diag(reduced.d / m)

    c1 = np.zeros((ne, n))
    for e, (k, j) in enumerate(edges):
        c1[e, k] = 1.0
        c1[e, j] = -1.0
    c = np.hstack([c1, np.zeros((ne, n))])
    # signed incidence: edge e pushes +w/m_k on machine k, -w/m_j on machine j
    gamma2 = (c1.T * w[None, :]) / m[:, None]
    # total electrical power deviation (sum over ordered pairs), spread uniformly: identically zero
    gamma1 = np.ones((n, 1)) @ (np.ones((1, n)) @ (m[:, None] * gamma2)) / m.sum()
    b = np.vstack([np.zeros((n, ne)), -gamma1 + gamma2])
    g = c @ a
    sin_star = np.sin(c1 @ delta_star)
    return StateMatrices(a, b, c, g, gamma1, gamma2, sin_star, delta_star, edges, m, lam, w)


def nonlinearity_f(x, mats: StateMatrices) -> np.ndarray:
    """sin(delta_kj) - sin(delta_kj*) per edge; accepts (..., 2n) arrays."""
    x = as_vector(x)
    y = x[..., : mats.n] @ mats.c1.T
    return np.sin(mats.edge_star + y) - mats.sin_star


def vector_field(x, mats: StateMatrices) -> np.ndarray:
    x = as_vector(x)
    return x @ mats.a_mat.T - nonlinearity_f(x, mats) @ mats.b_mat.T


def vector_field_direct(x, mats: StateMatrices, reduced: ReducedModel) -> np.ndarray:
    """Machine-by-machine evaluation of the COA swing deviation equations (test oracle)."""
    x = as_vector(x)
    n = mats.n
    delta = mats.delta_star + x[:n]
    ds = mats.delta_star
    w = reduced.b_red * np.outer(reduced.e_mag, reduced.e_mag)
    out = np.zeros(2 * n)
    out[:n] = x[n:]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += w[i, j] * (np.sin(delta[i] - delta[j]) - np.sin(ds[i] - ds[j]))
    for k in range(n):
        s = sum(
            w[k, j] * (np.sin(delta[k] - delta[j]) - np.sin(ds[k] - ds[j])) for j in range(n) if j != k
        )
        out[n + k] = total / reduced.m.sum() - s / reduced.m[k] - reduced.d[k] / reduced.m[k] * x[n + k]
    return out


def coa_residual(x, m) -> tuple[float, float]:
    x = as_vector(x)
    n = len(m)
    return float(np.max(np.abs(x[..., :n] @ m))), float(np.max(np.abs(x[..., n:] @ m)))


def project_coa(x, m):
    """Shift angles and speeds uniformly so that the inertia-weighted means vanish."""
    n = len(m)
    x = np.array(x, dtype=float)
    x[..., :n] -= (x[..., :n] @ m / m.sum())[..., None]
    x[..., n:] -= (x[..., n:] @ m / m.sum())[..., None]
    return x


# ---------------------------------------------------------------- simulation


def simulate(x0, mats: StateMatrices, t_end: float, monitor=None, rtol=RTOL, atol=ATOL) -> Trajectory:
    """Integrate the post-fault deviation dynamics from ``x0``.

    ``monitor(states) -> (lvrt_ok, inside_pi)`` supplies per-sample
    feasibility flags (see :class:`lvrtcsr.feasreg.FeasibilityMonitor`).
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    x0 = project_coa(as_vector(x0), mats.m)
    try:
        res = integrate_batch(
            lambda y: vector_field(y, mats),
            x0,
            t_end,
            rtol=rtol,
            atol=atol,
            project=lambda y: project_coa(y, mats.m),
            record=True,
        )
    except StepSizeUnderflow as exc:
        raise SimulationError(str(exc), exc.t, exc.state) from exc
    times = np.array(res.times)
    states = np.array([s[0] for s in res.states])
    if monitor is None:
        lv = np.ones(len(times), dtype=bool)
        pi = np.ones(len(times), dtype=bool)
    else:
        lv, pi = monitor(states)
    return Trajectory(times, states, np.asarray(lv), np.asarray(pi))


def swing_rhs(reduced: ReducedModel, delta_ref):
    """Deviation-state right-hand side for an arbitrary network (e.g. fault-on),
    with deviations measured from ``delta_ref`` (the post-fault SEP)."""
    n = reduced.n
    lam = reduced.d / reduced.m
    delta_ref = np.asarray(delta_ref, dtype=float)

    def rhs(x):
        out = np.empty_like(x)
        out[..., :n] = x[..., n:]
        out[..., n:] = reduced.accelerating_power(delta_ref + x[..., :n]) / reduced.m - lam * x[..., n:]
        return out

    return rhs


@dataclass(frozen=True)
class FaultSystem:
    """Pre-fault, fault-on and post-fault networks for one fault scenario."""

    model: NetworkModel
    scenario: FaultScenario
    bus_voltage: dict
    pre: ReducedModel
    fault_on: ReducedModel
    post: ReducedModel
    pre_sep: np.ndarray
    post_sep: np.ndarray

    @classmethod
    def build(cls, model: NetworkModel, scenario: FaultScenario) -> "FaultSystem":
        vm = prefault_voltages(model)
        pre = kron_reduce(build_extended_admittance(model, Topology(), vm), model)
        pre_sep = compute_sep(pre)
        post = kron_reduce(build_extended_admittance(model, scenario.post_fault_topology(), vm), model)
        post_sep = compute_sep(post, pre_sep)
        fault_on = kron_reduce(build_extended_admittance(model, scenario.fault_on_topology(), vm), model)
        return cls(model, scenario, vm, pre, fault_on, post, pre_sep, post_sep)

    def fault_on_trajectory(self, t_end: float, rtol=RTOL, atol=ATOL):
        """Dense record of the fault-on motion as post-fault deviations."""
        n = self.post.n
        x0 = np.concatenate([self.pre_sep - self.post_sep, np.zeros(n)])
        if t_end <= 0:
            return np.array([0.0]), x0[None]
        res = integrate_batch(
            swing_rhs(self.fault_on, self.post_sep),
            x0,
            t_end,
            rtol=rtol,
            atol=atol,
            project=lambda y: project_coa(y, self.post.m),
            record=True,
        )
        return np.array(res.times), np.array([s[0] for s in res.states])


def fault_state(scenario: FaultScenario, model: NetworkModel, system: FaultSystem | None = None) -> np.ndarray:
    """Deviation from the post-fault SEP after sustaining the fault for ``clearing_time``."""
    system = system or FaultSystem.build(model, scenario)
    n = system.post.n
    x0 = np.concatenate([system.pre_sep - system.post_sep, np.zeros(n)])
    if scenario.clearing_time == 0:
        return x0
    res = integrate_batch(
        swing_rhs(system.fault_on, system.post_sep),
        x0,
        scenario.clearing_time,
        rtol=1e-10,
        atol=1e-12,
        project=lambda y: project_coa(y, system.post.m),
    )
    return res.y_final


def save_trajectory(traj: Trajectory, path) -> Path:
    path = Path(path)
    traj.to_csv(path)
    return path
