"""Constrained stability region estimates: facet flow-out checks, level-set
expansion, Lyapunov refinement and fault assessment.

Everything is computed in tangent coordinates of the COA manifold,
x1 = U z1 and x2 = U z2 with U an orthonormal basis of {m'x = 0}.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize

from .dynamics import (
    FaultScenario,
    FaultSystem,
    StateMatrices,
    as_vector,
    build_state_matrices,
    fault_state,
    project_coa,
    swing_rhs,
)
from .feasreg import (
    FeasibilityMonitor,
    Polytope,
    assemble_acfr,
    build_lvrt_constraints,
    fit_constraint_terms,
)
from .integrate import integrate_batch
from .lff import (
    LFSearchConfig,
    LyapunovCandidate,
    assemble_and_solve_lmi,
    edge_potential,
    energy_function_candidate,
    evaluate_v,
)
from .netmodel import NetworkModel, build_extended_admittance, manifold_basis, voltage_recovery_matrix

log = logging.getLogger(__name__)

FLOW_TOL = 1e-9
OPT_TOL = 1e-8
MANIFOLD_TOL = 1e-8


# ---------------------------------------------------------------- problem


@dataclass
class CSRProblem:
    """Post-fault system, its LVRT constraints and the approximate feasibility polytope."""

    model: NetworkModel
    scenario: FaultScenario
    system: FaultSystem
    mats: StateMatrices
    constraints: list
    fits: dict
    polytope: Polytope
    monitor: FeasibilityMonitor
    n_line: int = 2

    @property
    def n(self) -> int:
        return self.mats.n


def build_problem(model: NetworkModel, scenario: FaultScenario, n_line: int = 2, seed: int = 0) -> CSRProblem:
    system = FaultSystem.build(model, scenario)
    ext = build_extended_admittance(model, scenario.post_fault_topology(), system.bus_voltage)
    vr = voltage_recovery_matrix(ext, model)
    constraints = build_lvrt_constraints(model, vr)
    fits = fit_constraint_terms(constraints, n_line, seed=seed)
    mats = build_state_matrices(system.post, system.post_sep)
    poly = assemble_acfr(constraints, fits, system.post_sep, system.post.m)
    monitor = FeasibilityMonitor(constraints, system.post_sep)
    return CSRProblem(model, scenario, system, mats, constraints, fits, poly, monitor, n_line)


class _Tangent:
    """V, its gradient and the facet data of one candidate in tangent coordinates."""

    def __init__(self, c: LyapunovCandidate, poly: Polytope, m):
        self.c = c
        self.poly = poly
        u = manifold_basis(np.asarray(m, dtype=float))
        self.u = u
        n, r = u.shape
        self.r = r
        w = np.zeros((2 * n, 2 * r))
        w[:n, :r] = u
        w[n:, r:] = u
        self.w = w
        q = w.T @ c.q_mat @ w
        self.q = 0.5 * (q + q.T)
        self.q11, self.q12, self.q22 = self.q[:r, :r], self.q[:r, r:], self.q[r:, r:]
        self.q22_inv = np.linalg.inv(self.q22)
        schur = self.q11 - self.q12 @ self.q22_inv @ self.q12.T
        self.schur = 0.5 * (schur + schur.T)
        self.cu = c.incidence() @ u if c.edges else np.zeros((0, r))
        self.l = poly.l_ineq @ u  # facet rows in z1
        self.l_const = poly.l_ineq_const
        self._hmin = {}

    def psi(self, z1):
        if not len(self.cu):
            return np.zeros(np.shape(z1)[:-1])
        return edge_potential(z1 @ self.cu.T, self.c.edge_star) @ self.c.k_diag

    def psi_grad(self, z1):
        y = z1 @ self.cu.T
        es = self.c.edge_star
        return (self.c.k_diag * (np.sin(es + y) - np.sin(es))) @ self.cu

    def h(self, z1):
        """min over z2 of V (the level-set shadow on angle space)."""
        return 0.5 * np.einsum("...i,ij,...j->...", z1, self.schur, z1) + self.psi(z1)

    def h_grad(self, z1):
        return z1 @ self.schur + self.psi_grad(z1)

    def v(self, z):
        return 0.5 * np.einsum("...i,ij,...j->...", z, self.q, z) + self.psi(z[..., : self.r])

    def v_grad(self, z):
        g = z @ self.q
        g[: self.r] += self.psi_grad(z[: self.r])
        return g

    def to_x(self, z):
        return z @ self.w.T

    def to_z(self, x):
        return as_vector(x) @ self.w

    def z2_center(self, z1):
        return -(z1 @ self.q12) @ self.q22_inv

    def hmin(self, i):
        """Lowest V on facet i of the polytope, with its minimizer (inf if the facet is empty)."""
        if i in self._hmin:
            return self._hmin[i]
        r = self.r
        li, ci = self.l[i], self.l_const[i]
        others = np.delete(np.arange(len(self.l_const)), i)
        if np.linalg.norm(li) < 1e-14:
            self._hmin[i] = (np.inf, None)
            return self._hmin[i]
        if r == 1:
            z1 = np.array([-ci / li[0]])
            if np.any(self.l[others] @ z1 + self.l_const[others] > 1e-12):
                out = (np.inf, None)
            else:
                out = (float(self.h(z1)), z1)
        else:
            # a feasible point on the facet first (LP), then convex minimization
            lp = linprog(
                np.zeros(r), A_ub=self.l[others], b_ub=-self.l_const[others], A_eq=li[None], b_eq=[-ci],
                bounds=[(None, None)] * r, method="highs",
            )
            if lp.status != 0:
                out = (np.inf, None)
            else:
                cons = [
                    {"type": "eq", "fun": lambda z: li @ z + ci, "jac": lambda z: li},
                    {"type": "ineq", "fun": lambda z: -(self.l[others] @ z + self.l_const[others]),
                     "jac": lambda z: -self.l[others]},
                ]
                res = minimize(self.h, lp.x, jac=self.h_grad, constraints=cons, method="SLSQP",
                               options={"ftol": 1e-14, "maxiter": 500})
                z1 = res.x if res.success else lp.x
                out = (float(self.h(z1)), z1)
        self._hmin[i] = out
        return out


@dataclass
class FacetCheck:
    facet: int
    status: str  # empty | safe | flow-out | uncertified
    upper: float  # certified upper bound on the facet rate (-inf when empty)
    lower: float
    witness: np.ndarray | None = None  # full COA state

    @property
    def unsafe(self) -> bool:
        return self.status in ("flow-out", "uncertified")


def _check_closed_form(tg: _Tangent, v, i, tol):
    hmin, z1 = tg.hmin(i)
    if not hmin <= v:
        return FacetCheck(i, "empty", -np.inf, -np.inf)
    a = tg.l[i]
    c = tg.z2_center(z1)
    qa = tg.q22_inv @ a
    spread = np.sqrt(max(2.0 * (v - hmin), 0.0) * (a @ qa))
    rate = float(a @ c + spread)
    z2 = c + (qa * np.sqrt(max(2.0 * (v - hmin), 0.0) / (a @ qa)) if a @ qa > 0 else 0.0)
    x = tg.to_x(np.concatenate([z1, z2]))
    status = "flow-out" if rate > tol else "safe"
    return FacetCheck(i, status, rate, rate, x if status == "flow-out" else None)


def _check_kelley(tg: _Tangent, v, i, tol, max_iter=400):
    """Outer-approximate {V <= v} by tangent cuts; the LP optimum bounds the facet rate."""
    hmin, z1c = tg.hmin(i)
    if not hmin <= v:
        return FacetCheck(i, "empty", -np.inf, -np.inf)
    r = tg.r
    li, ci = tg.l[i], tg.l_const[i]
    others = np.delete(np.arange(len(tg.l_const)), i)
    center = np.concatenate([z1c, tg.z2_center(z1c)])
    # z2 box from 1/2 z'Qz <= V <= v (the potential part is nonnegative inside the Pi box)
    s2 = tg.q22 - tg.q12.T @ np.linalg.solve(tg.q11, tg.q12)
    half = np.sqrt(2.0 * v * np.diag(np.linalg.inv(0.5 * (s2 + s2.T))))
    bounds = [(None, None)] * r + [(-b, b) for b in half]
    a_ub = [np.hstack([tg.l[k], np.zeros(r)]) for k in others]
    b_ub = [-tg.l_const[k] for k in others]
    a_eq = np.hstack([li, np.zeros(r)])[None]
    obj = np.concatenate([np.zeros(r), -li])
    best_lo, best_pt = -np.inf, None
    upper = np.inf

    def add_cut(z):
        g = tg.v_grad(z)
        a_ub.append(g)
        b_ub.append(v - float(tg.v(z)) + g @ z)

    add_cut(center + np.concatenate([np.zeros(r), half * 1e-3]))
    for _ in range(max_iter):
        lp = linprog(obj, A_ub=np.array(a_ub), b_ub=np.array(b_ub), A_eq=a_eq, b_eq=[-ci], bounds=bounds,
                     method="highs")
        if lp.status == 2:
            return FacetCheck(i, "empty", -np.inf, -np.inf)
        if lp.status != 0:
            break
        z = lp.x
        upper = float(li @ z[r:])
        if upper <= tol:
            return FacetCheck(i, "safe", upper, best_lo)
        vz = float(tg.v(z))
        if vz <= v + 1e-12:
            return FacetCheck(i, "flow-out", upper, upper, tg.to_x(z))
        # feasible point on the segment from the facet minimizer towards z
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if tg.v(center + mid * (z - center)) <= v:
                lo = mid
            else:
                hi = mid
        zf = center + lo * (z - center)
        val = float(li @ zf[r:])
        if val > best_lo:
            best_lo, best_pt = val, zf
        if best_lo > tol:
            return FacetCheck(i, "flow-out", upper, best_lo, tg.to_x(best_pt))
        if upper - best_lo <= OPT_TOL:
            status = "safe" if upper <= tol + OPT_TOL else "uncertified"
            return FacetCheck(i, status, upper, best_lo, None if best_pt is None else tg.to_x(best_pt))
        add_cut(z)
    return FacetCheck(i, "uncertified", upper, best_lo, None if best_pt is None else tg.to_x(best_pt))


def flowout_exists(candidate, v, polytope, i, m, tol: float = FLOW_TOL, method: str = "auto",
                   _tangent=None) -> FacetCheck:
    """Largest facet rate L_i x2 over {V <= v} on facet i; witness iff it exceeds ``tol``.

    ``method`` is ``closed-form`` (two machines: the facet fixes the angle),
    ``kelley`` (LP cutting planes with a feasible inner point, certified to 1e-8)
    or ``auto``.
    """
    tg = _tangent or _Tangent(candidate, polytope, m)
    if v < 0:
        raise ValueError("level value must be nonnegative")
    if method == "auto":
        method = "closed-form" if tg.r == 1 else "kelley"
    if method == "closed-form":
        if tg.r != 1:
            raise ValueError("closed form needs two machines")
        return _check_closed_form(tg, v, i, tol)
    return _check_kelley(tg, v, i, tol)


# ---------------------------------------------------------------- expansion


@dataclass
class Expansion:
    v_max: float
    v_ref: float
    dv: float
    binding: list  # FacetCheck at the first unsafe level
    steps: int
    capped: bool = False


def reference_level(candidate, polytope, m, _tangent=None) -> float:
    """Lowest V over all facets: the largest level set strictly inside the polytope."""
    tg = _tangent or _Tangent(candidate, polytope, m)
    return float(min(tg.hmin(i)[0] for i in range(polytope.n_facets)))


def _unsafe(tg, v, facets, tol, method):
    return [chk for i in facets if (chk := flowout_exists(tg.c, v, tg.poly, i, None, tol, method, tg)).unsafe]


def expand_level_set(candidate, polytope, m, dv: float | None = None, tol: float = FLOW_TOL,
                     method: str = "auto", max_steps: int = 20000) -> Expansion:
    """Linear search on v in steps of ``dv`` until a facet admits flow-out, then
    bisection down to dv/100; returns the last certified level."""
    tg = _Tangent(candidate, polytope, m)
    hmins = np.array([tg.hmin(i)[0] for i in range(polytope.n_facets)])
    v_ref = float(np.min(hmins))
    if dv is None:
        dv = v_ref / 200.0
    if not dv > 0:
        raise ValueError("dv must be positive")
    facets = np.nonzero(np.isfinite(hmins))[0]
    # levels below the lowest facet touch no facet and are certified without a check
    k = max(int(np.floor(v_ref / dv)), 0)
    safe = k * dv
    steps = 0
    while steps < max_steps:
        steps += 1
        v = (k + steps) * dv
        live = facets[hmins[facets] <= v]
        bad = _unsafe(tg, v, live, tol, method)
        if bad:
            lo, hi, hi_bad = safe, v, bad
            while hi - lo > dv / 100.0:
                mid = 0.5 * (lo + hi)
                b = _unsafe(tg, mid, facets[hmins[facets] <= mid], tol, method)
                if b:
                    hi, hi_bad = mid, b
                else:
                    lo = mid
            return Expansion(lo, v_ref, dv, hi_bad, steps)
        safe = v
    log.warning("level-set expansion hit the step cap at v=%.6g", safe)
    return Expansion(safe, v_ref, dv, [], steps, capped=True)


# ---------------------------------------------------------------- estimates


@dataclass
class CSREstimate:
    candidate: LyapunovCandidate
    v: float
    polytope: Polytope
    m: np.ndarray
    history: list = field(default_factory=list)
    binding: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "candidate": self.candidate.to_dict(),
            "v": float(self.v),
            "m": self.m.tolist(),
            "polytope": self.polytope.to_dict(),
            "history": self.history,
            "binding_facets": [b["facet"] for b in self.binding],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CSREstimate":
        return cls(
            LyapunovCandidate.from_dict(d["candidate"]),
            float(d["v"]),
            Polytope.from_dict(d["polytope"]),
            np.array(d["m"], dtype=float),
            d.get("history", []),
            [{"facet": f} for f in d.get("binding_facets", [])],
        )

    def save(self, path):
        from .io import dump_json

        return dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "CSREstimate":
        from .io import load_json

        return cls.from_dict(load_json(path))


def contains(estimate: CSREstimate, x) -> np.ndarray:
    """V(x) <= v, every polytope row holds and x is on the COA manifold (vectorized)."""
    x = as_vector(x)
    n = len(estimate.m)
    on = (np.abs(x[..., :n] @ estimate.m) <= MANIFOLD_TOL) & (np.abs(x[..., n:] @ estimate.m) <= MANIFOLD_TOL)
    inside = estimate.polytope.contains_x1(x[..., :n])
    return on & inside & (evaluate_v(estimate.candidate, x) <= estimate.v)


def _binding_info(checks, poly):
    return [
        {"facet": int(c.facet), "tag": poly.tags[c.facet], "status": c.status, "rate": float(c.upper),
         "witness": None if c.witness is None else c.witness.tolist()}
        for c in checks
    ]


def estimate_csr(problem_or_mats, x0, config: LFSearchConfig | None = None, polytope: Polytope | None = None,
                 reduced=None, dv: float | None = None, method: str = "auto") -> CSREstimate:
    """Energy function first; while x0 is outside, re-solve the LMI (minimize V(x0),
    then push the previous binding points above x0) and re-expand."""
    config = config or LFSearchConfig()
    if isinstance(problem_or_mats, CSRProblem):
        mats, polytope, reduced = problem_or_mats.mats, problem_or_mats.polytope, problem_or_mats.system.post
    else:
        mats = problem_or_mats
        if polytope is None or reduced is None:
            raise ValueError("polytope and reduced model are required with bare matrices")
    x0 = as_vector(x0)
    if max(abs(x0[: mats.n] @ mats.m), abs(x0[mats.n :] @ mats.m)) > 1e-6:
        raise ValueError("x0 is not on the COA manifold")
    x0 = project_coa(x0, mats.m)
    history, anchors = [], []
    best = None
    inside_poly = bool(polytope.contains_x1(x0[: mats.n]))
    for it in range(config.max_refinements + 1):
        if it == 0:
            cand = energy_function_candidate(reduced, mats.delta_star)
        else:
            cand = assemble_and_solve_lmi(mats, x0, config, anchors=anchors if it > 1 else None)
        exp = expand_level_set(cand, polytope, mats.m, dv, method=method)
        est = CSREstimate(cand, exp.v_max, polytope, mats.m, history, _binding_info(exp.binding, polytope))
        vx = float(evaluate_v(cand, x0))
        ok = bool(contains(est, x0))
        ratio = vx / exp.v_max if exp.v_max > 0 else np.inf
        history.append({
            "iteration": it + 1,
            "label": cand.label,
            "v_max": exp.v_max,
            "v_ref": exp.v_ref,
            "v_x0": vx,
            "ratio": ratio,
            "contained": ok,
            "binding_facets": est.binding,
        })
        log.info("iteration %d (%s): v_max=%.6g V(x0)=%.6g contained=%s", it + 1, cand.label, exp.v_max, vx, ok)
        if best is None or ok or ratio < best[0]:
            best = (ratio, est)
        if ok or not inside_poly:
            break
        anchors += [np.asarray(b["witness"]) for b in est.binding if b["witness"] is not None]
    est = best[1]
    est.history = history
    return est


# ---------------------------------------------------------------- assessment


@dataclass
class AssessmentResult:
    verdict: str  # stable | not-certified
    v_max: float
    v_at_clearing: float
    estimated_cct: float | None
    refinements_used: int
    binding_facets: list
    x0: np.ndarray
    estimate: CSREstimate

    def report(self) -> dict:
        return {
            "verdict": self.verdict,
            "v_max": self.v_max,
            "v_at_clearing": self.v_at_clearing,
            "estimated_cct": self.estimated_cct,
            "refinements": self.refinements_used,
            "binding_facets": self.binding_facets,
            "x0": self.x0.tolist(),
            "history": self.estimate.history,
        }


def estimated_cct(problem: CSRProblem, estimate: CSREstimate, t_max: float = 2.0, resolution: float = 1e-3):
    """Largest clearing time whose fault-on state, and every earlier one, is in the estimate."""
    sys = problem.system
    n = sys.post.n
    x_pre = np.concatenate([sys.pre_sep - sys.post_sep, np.zeros(n)])
    if not contains(estimate, project_coa(x_pre, sys.post.m)):
        return None
    ts = np.round(np.arange(0.0, t_max + 0.5 * resolution, resolution), 9)
    res = integrate_batch(
        swing_rhs(sys.fault_on, sys.post_sep), x_pre, t_max, rtol=1e-10, atol=1e-12,
        project=lambda y: project_coa(y, sys.post.m), t_eval=ts,
    )
    states = np.array([s[0] for s in res.states])
    inside = contains(estimate, states)
    if inside.all():
        return float(ts[-1])
    first_out = int(np.argmin(inside))
    return float(ts[first_out - 1])


def assess_fault(problem: CSRProblem, config: LFSearchConfig | None = None, dv: float | None = None,
                 t_max: float = 2.0) -> AssessmentResult:
    x0 = fault_state(problem.scenario, problem.model, problem.system)
    est = estimate_csr(problem, x0, config, dv=dv)
    ok = bool(contains(est, x0))
    cct = estimated_cct(problem, est, t_max)
    return AssessmentResult(
        "stable" if ok else "not-certified",
        float(est.v),
        float(evaluate_v(est.candidate, x0)),
        cct,
        len(est.history) - 1,
        [b["facet"] for b in est.binding],
        x0,
        est,
    )
