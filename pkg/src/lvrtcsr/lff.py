"""Lyapunov functions family: energy-like members, LMI search, V and its derivative.

A member is V(x) = 1/2 x'Qx - sum_e K_e (cos d_e + d_e sin d_e*) + v_offset, with
d_e the absolute COA angle difference on reduced-network edge e. The LMI is
posed on the COA tangent space; the pure-angle rows of the S-procedure block
are structurally zero there and are imposed as linear equalities.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cvxpy as cp
import numpy as np

from .dynamics import StateMatrices, as_vector, nonlinearity_f, vector_field
from .netmodel import manifold_basis

log = logging.getLogger(__name__)

EPS_Q = 1e-8
EPS_K = 1e-8


class LMIInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class LFSearchConfig:
    lmi_margin: float = 1e-9
    trace_normalization: float | None = None  # default 2n + |E|
    max_refinements: int = 5

    def __post_init__(self):
        if self.lmi_margin <= 0 or self.max_refinements <= 0:
            raise ValueError("LFSearchConfig fields must be positive")
        if self.trace_normalization is not None and self.trace_normalization <= 0:
            raise ValueError("trace_normalization must be positive")

    def normalization(self, mats: StateMatrices) -> float:
        if self.trace_normalization is not None:
            return self.trace_normalization
        return float(2 * mats.n + len(mats.edges))


@dataclass(frozen=True)
class LyapunovCandidate:
    q_mat: np.ndarray
    k_diag: np.ndarray
    h_diag: np.ndarray
    v_offset: float
    delta_star: np.ndarray
    edges: tuple
    label: str = ""
    info: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return len(self.delta_star)

    @property
    def edge_star(self) -> np.ndarray:
        return np.array([self.delta_star[k] - self.delta_star[j] for k, j in self.edges])

    def incidence(self) -> np.ndarray:
        c1 = np.zeros((len(self.edges), self.n))
        for e, (k, j) in enumerate(self.edges):
            c1[e, k], c1[e, j] = 1.0, -1.0
        return c1

    # serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "q_mat": self.q_mat.tolist(),
            "k_diag": self.k_diag.tolist(),
            "h_diag": self.h_diag.tolist(),
            "v_offset": float(self.v_offset),
            "delta_star": self.delta_star.tolist(),
            "edges": [list(e) for e in self.edges],
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LyapunovCandidate":
        return cls(
            np.array(d["q_mat"], dtype=float),
            np.array(d["k_diag"], dtype=float),
            np.array(d["h_diag"], dtype=float),
            float(d["v_offset"]),
            np.array(d["delta_star"], dtype=float),
            tuple(tuple(e) for e in d["edges"]),
            d.get("label", ""),
        )

    def save(self, path):
        from .io import dump_json

        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "LyapunovCandidate":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _offset(k, edge_star):
    return float(np.sum(k * (np.cos(edge_star) + edge_star * np.sin(edge_star))))


def edge_potential(y, edge_star):
    """cos d* - cos(d* + y) - y sin d*: the cosine part of V per unit K, zero at the SEP."""
    return np.cos(edge_star) - np.cos(edge_star + y) - y * np.sin(edge_star)


def energy_function_candidate(reduced, delta_star) -> LyapunovCandidate:
    """Classical energy function; the angle block of Q is regularized to EPS_Q * I."""
    n = reduced.n
    q = np.zeros((2 * n, 2 * n))
    q[:n, :n] = EPS_Q * np.eye(n)
    q[n:, n:] = np.diag(reduced.m)
    k = reduced.edge_weights if reduced.edges else np.zeros(0)
    delta_star = np.asarray(delta_star, dtype=float)
    edges = tuple(reduced.edges)
    edge_star = np.array([delta_star[a] - delta_star[b] for a, b in edges])
    h = np.full(len(edges), EPS_K)
    return LyapunovCandidate(q, k, h, _offset(k, edge_star), delta_star, edges, "energy")


def evaluate_v(c: LyapunovCandidate, x) -> np.ndarray:
    x = as_vector(x)
    quad = 0.5 * np.einsum("...i,ij,...j->...", x, c.q_mat, x)
    if not c.edges:
        return quad
    d = c.edge_star + x[..., : c.n] @ c.incidence().T
    return quad - (np.cos(d) + d * np.sin(c.edge_star)) @ c.k_diag + c.v_offset


def gradient_v(c: LyapunovCandidate, x) -> np.ndarray:
    x = as_vector(x)
    g = x @ c.q_mat
    if c.edges:
        c1 = c.incidence()
        d = c.edge_star + x[..., : c.n] @ c1.T
        g = g.copy()
        g[..., : c.n] += (c.k_diag * (np.sin(d) - np.sin(c.edge_star))) @ c1
    return g


def hessian_v(c: LyapunovCandidate, x) -> np.ndarray:
    x = as_vector(x)
    hess = np.array(c.q_mat, dtype=float)
    if c.edges:
        c1 = c.incidence()
        d = c.edge_star + x[: c.n] @ c1.T
        hess[: c.n, : c.n] += c1.T @ np.diag(c.k_diag * np.cos(d)) @ c1
    return hess


def evaluate_vdot(c: LyapunovCandidate, x, mats: StateMatrices) -> np.ndarray:
    """x'QAx - x'QBF + (Gx)'KF."""
    x = as_vector(x)
    f = nonlinearity_f(x, mats)
    qx = x @ c.q_mat
    return (
        np.einsum("...i,...i->...", qx, x @ mats.a_mat.T)
        - np.einsum("...i,...i->...", qx, f @ mats.b_mat.T)
        + np.einsum("...e,...e->...", (x @ mats.g_mat.T) * c.k_diag, f)
    )


def vdot_chain_rule(c: LyapunovCandidate, x, mats: StateMatrices) -> np.ndarray:
    x = as_vector(x)
    return np.einsum("...i,...i->...", gradient_v(c, x), vector_field(x, mats))


def sector_inequality_holds(delta, delta_star, slack: float = 1e-12):
    """(sin d - sin d*)^2 <= (d - d*)(sin d - sin d*) + slack; vectorized."""
    f = np.sin(delta) - np.sin(delta_star)
    return f * f <= (np.asarray(delta) - delta_star) * f + slack


# ---------------------------------------------------------------- LMI


def _reduced_blocks(mats: StateMatrices):
    n = mats.n
    u1 = manifold_basis(mats.m)
    w = np.zeros((2 * n, 2 * (n - 1)))
    w[:n, : n - 1] = u1
    w[n:, n - 1 :] = u1
    return u1, w, w.T @ mats.a_mat @ w, w.T @ mats.b_mat, mats.c_mat @ w


def lmi_block(c: LyapunovCandidate, mats: StateMatrices, tangent: bool = True) -> np.ndarray:
    """The S-procedure block matrix; on the COA tangent space when ``tangent``."""
    a, b, cm = mats.a_mat, mats.b_mat, mats.c_mat
    q = c.q_mat
    k, h = np.diag(c.k_diag), np.diag(c.h_diag)
    top = a.T @ q + q @ a
    cross = -(q @ b - (k @ cm @ a).T - cm.T @ h)
    blk = np.block([[top, cross], [cross.T, -2 * h]])
    if tangent:
        _, w, *_ = _reduced_blocks(mats)
        ne = len(c.k_diag)
        wf = np.zeros((blk.shape[0], w.shape[1] + ne))
        wf[: w.shape[0], : w.shape[1]] = w
        wf[w.shape[0] :, w.shape[1] :] = np.eye(ne)
        blk = wf.T @ blk @ wf
    return 0.5 * (blk + blk.T)


def lmi_residual(c: LyapunovCandidate, mats: StateMatrices) -> float:
    """Largest eigenvalue of the S-procedure block on the tangent space."""
    return float(np.max(np.linalg.eigvalsh(lmi_block(c, mats))))


def tangent_q_min_eig(c: LyapunovCandidate, mats: StateMatrices) -> float:
    _, w, *_ = _reduced_blocks(mats)
    return float(np.min(np.linalg.eigvalsh(w.T @ c.q_mat @ w)))


def assemble_and_solve_lmi(
    mats: StateMatrices,
    x0=None,
    config: LFSearchConfig | None = None,
    anchors=None,
    solver: str | None = None,
) -> LyapunovCandidate:
    """Search the family for (Q, K, H) satisfying the LMI with trace normalization.

    With ``x0`` the objective is V(x0) (linear in Q and K). ``anchors`` (states
    where an earlier level set stopped) switch the objective to maximizing
    min_b V(x_b) - V(x0), which pushes x0 below the level that previously bound.
    """
    config = config or LFSearchConfig()
    n, ne = mats.n, len(mats.edges)
    if n < 2 or ne == 0:
        raise ValueError("LMI search needs at least two coupled machines")
    r = n - 1
    u1, w, ar, br, cr = _reduced_blocks(mats)
    edge_star = mats.edge_star
    margin = config.lmi_margin

    qr = cp.Variable((2 * r, 2 * r), symmetric=True)
    k = cp.Variable(ne)
    h = cp.Variable(ne)
    top = ar.T @ qr + qr @ ar
    cross = -qr @ br + (cp.diag(k) @ cr @ ar).T + cr.T @ cp.diag(h)
    cons = [
        top[:r, :] == 0,
        cross[:r, :] == 0,
        qr >> EPS_Q * np.eye(2 * r),
        k >= EPS_K,
        h >= max(EPS_K, margin),
        cp.trace(qr) + cp.sum(k) == config.normalization(mats),
    ]
    lower = cp.bmat([[top[r:, r:], cross[r:, :]], [cross[r:, :].T, -2 * cp.diag(h)]])
    lower = 0.5 * (lower + lower.T)
    cons.append(lower << -margin * np.eye(r + ne))

    def v_expr(x):
        x = as_vector(x)
        z = w.T @ x
        y = mats.c1 @ x[:n]
        return 0.5 * cp.sum(cp.multiply(qr, np.outer(z, z))) + edge_potential(y, edge_star) @ k

    if anchors:
        if x0 is None:
            raise ValueError("anchors need x0")
        t = cp.Variable()
        cons += [v_expr(a) - v_expr(x0) >= t for a in anchors]
        # keep the scale of the remaining slack comparable across iterations
        objective = cp.Maximize(t)
    elif x0 is not None:
        objective = cp.Minimize(v_expr(x0))
    else:
        objective = cp.Minimize(0)
    prob = cp.Problem(objective, cons)
    solvers = [solver] if solver else ["CLARABEL", "SCS"]
    status = None
    for s in solvers:
        try:
            prob.solve(solver=s)
        except cp.error.SolverError as exc:  # pragma: no cover - solver availability
            log.warning("solver %s failed: %s", s, exc)
            continue
        status = prob.status
        if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            break
    if status == cp.UNBOUNDED:
        raise RuntimeError("LMI objective unbounded; normalization missing")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise LMIInfeasible(f"LMI infeasible or unsolved (status {status})")

    q_red = 0.5 * (qr.value + qr.value.T)
    q_full = w @ q_red @ w.T
    q_full = 0.5 * (q_full + q_full.T)
    kv = np.maximum(np.asarray(k.value, dtype=float), EPS_K)
    hv = np.maximum(np.asarray(h.value, dtype=float), max(EPS_K, margin))
    info = {"status": status, "objective": float(prob.value) if prob.value is not None else None}
    label = "lmi" if x0 is None else "lmi-refined"
    return LyapunovCandidate(q_full, kv, hv, _offset(kv, edge_star), mats.delta_star, mats.edges, label, info)
