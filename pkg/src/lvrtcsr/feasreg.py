"""LVRT constraints, piecewise-linear lower bounds of cosine terms, and the ACFR polytope."""
from __future__ import annotations

import csv
import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .dynamics import as_vector
from .io import dump_json, load_json
from .netmodel import NetworkModel, VoltageRecovery

log = logging.getLogger(__name__)

HALF_PI = 0.5 * np.pi
FACET_CAP = 4096


class PWLFitError(RuntimeError):
    pass


class PolytopeError(ValueError):
    pass


def lvrt_max_from_curve(curve) -> float:
    """Collapse a time-varying ride-through curve to its largest voltage."""
    curve = list(curve)
    if not curve:
        raise ValueError("empty LVRT curve")
    volts = [float(v) for _, v in curve]
    if any(not 0.0 <= v <= 1.0 for v in volts):
        raise ValueError("LVRT voltages must lie in [0, 1]")
    return max(volts)


@dataclass(frozen=True)
class CosineTerm:
    pair: tuple[int, int]
    amplitude: float
    phase: float


@dataclass(frozen=True)
class LVRTConstraint:
    rg_bus: int
    lvrt_max: float
    diag: float  # sum_i C_i^2
    terms: tuple[CosineTerm, ...]
    n: int

    @property
    def threshold(self) -> float:
        return self.lvrt_max**2 - self.diag


def build_lvrt_constraints(model: NetworkModel, vr: VoltageRecovery) -> list[LVRTConstraint]:
    out = []
    n = model.n_gen
    for bus in model.rg_buses:
        if bus.lvrt_max is None:
            continue
        c, ang = vr.rg_constants[bus.id]
        terms = tuple(
            CosineTerm((i, j), float(2 * c[i] * c[j]), float(ang[i] - ang[j]))
            for i in range(n)
            for j in range(i + 1, n)
        )
        out.append(LVRTConstraint(bus.id, bus.lvrt_max, float(np.sum(c**2)), terms, n))
    return out


def voltage_sq(delta, constraint: LVRTConstraint):
    """|v_k|^2 as a function of COA rotor angles; accepts (..., n) arrays."""
    delta = np.asarray(delta, dtype=float)
    g = np.full(delta.shape[:-1], constraint.diag)
    for t in constraint.terms:
        i, j = t.pair
        g = g + t.amplitude * np.cos(delta[..., i] - delta[..., j] + t.phase)
    return g


# ---------------------------------------------------------------- PWL fit


@dataclass(frozen=True)
class PWLFit:
    phase: float
    slopes: np.ndarray
    intercepts: np.ndarray
    vertices: np.ndarray
    objective: float
    n_line: int
    repaired: bool = False

    @property
    def lines(self) -> list[tuple[float, float]]:
        return list(zip(self.slopes.tolist(), self.intercepts.tolist()))

    def evaluate(self, delta):
        delta = np.asarray(delta, dtype=float)
        return np.min(np.multiply.outer(delta, self.slopes) + self.intercepts, axis=-1)

    def max_violation(self, n_points: int = 10001) -> float:
        d = np.linspace(-HALF_PI, HALF_PI, n_points)
        return float(np.max(self.evaluate(d) - np.cos(d + self.phase)))

    def to_csv(self, path, n_points: int = 721):
        d = np.linspace(-HALF_PI, HALF_PI, n_points)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "cos_value", "approx_value"])
            for a, b, c in zip(d, np.cos(d + self.phase), self.evaluate(d)):
                w.writerow([f"{a:.17g}", f"{b:.17g}", f"{c:.17g}"])


def _lines_from_vertices(verts, phase):
    """verts (B, N+1) sorted -> slopes, intercepts (B, N); zero-length chords get +inf intercept."""
    f = np.cos(verts + phase)
    dv = np.diff(verts, axis=-1)
    df = np.diff(f, axis=-1)
    ok = dv > 1e-9
    a = np.where(ok, df / np.where(ok, dv, 1.0), 0.0)
    b = np.where(ok, f[..., :-1] - a * verts[..., :-1], np.inf)
    return a, b


_PROBE = np.array([-2e-3, -1e-3, -1e-4, -1e-6, 1e-6, 1e-4, 1e-3, 2e-3])


def _batch_objective(verts, phase, grid, target):
    a, b = _lines_from_vertices(verts, phase)
    approx = np.min(a[..., :, None] * grid + b[..., :, None], axis=-2)
    gap = target - approx
    feasible = np.all(gap >= -1e-12, axis=-1)
    # violations next to a vertex can be narrower than the sample spacing
    probe = np.clip(verts[..., :, None] + _PROBE, -HALF_PI, HALF_PI).reshape(verts.shape[:-1] + (-1,))
    near = np.cos(probe + phase) - np.min(a[..., :, None] * probe[..., None, :] + b[..., :, None], axis=-2)
    feasible &= np.all(near >= -1e-12, axis=-1)
    return np.where(feasible, np.sum(gap * gap, axis=-1), np.inf)


def _inflection_starts(phase, n_line):
    """Vertex sets with a vertex on every inflection point of cos(. + phase) in the window.

    A chord over a convex stretch lies above the curve, so each convex piece
    needs at least two segments: their extensions cover each other.
    """
    infl = [x for x in (HALF_PI - phase + k * np.pi for k in range(-3, 4)) if -HALF_PI < x < HALF_PI]
    if not infl:
        return []
    knots = np.array([-HALF_PI] + sorted(infl) + [HALF_PI])
    lengths = np.diff(knots)
    convex = np.cos(0.5 * (knots[:-1] + knots[1:]) + phase) < 0
    share = np.where(convex, 2, 1)
    extra = n_line - share.sum()
    if extra < 0:
        return []
    # spread the rest in proportion to length
    add = np.floor(lengths / lengths.sum() * extra).astype(int)
    add[np.argsort(-lengths)[: extra - add.sum()]] += 1
    share = share + add
    verts = [knots[0]]
    for lo, hi, s in zip(knots[:-1], knots[1:], share):
        verts.extend(np.linspace(lo, hi, s + 1)[1:])
    return [np.array(verts)]


def _coordinate_descent(starts, phase, grid, target, n_grid=9, max_sweeps=20):
    verts = np.array(starts, dtype=float)
    best = _batch_objective(verts, phase, grid, target)
    n_free = verts.shape[1] - 2
    for _ in range(max_sweeps):
        before = best.copy()
        for i in range(1, n_free + 1):
            lo, hi = verts[:, i - 1], verts[:, i + 1]
            left, right = lo, hi
            for zoom in range(4):
                if zoom:
                    span = (right - left) / (n_grid - 1)
                    left = np.maximum(lo, verts[:, i] - span)
                    right = np.minimum(hi, verts[:, i] + span)
                cand = left[:, None] + (right - left)[:, None] * np.linspace(0, 1, n_grid)[None]
                trial = np.repeat(verts[:, None, :], n_grid, axis=1)
                trial[:, :, i] = cand
                obj = _batch_objective(trial, phase, grid, target)
                k = np.argmin(obj, axis=1)
                val = obj[np.arange(len(k)), k]
                better = val < best
                verts[better, i] = cand[better, k[better]]
                best = np.where(better, val, best)
        finite = np.isfinite(best)
        if not finite.any() or np.all(before[finite] - best[finite] <= 1e-12 * np.maximum(1.0, best[finite])):
            break
    return verts, best


def _exhaustive(n_free, phase, grid, target, n_cand):
    cand = np.linspace(-HALF_PI, HALF_PI, n_cand)
    combos = np.array(list(itertools.combinations_with_replacement(cand, n_free)))
    verts = np.column_stack([np.full(len(combos), -HALF_PI), combos, np.full(len(combos), HALF_PI)])
    best_obj, best_v = np.inf, None
    for chunk in np.array_split(verts, max(1, len(verts) // 2048)):
        obj = _batch_objective(chunk, phase, grid, target)
        k = int(np.argmin(obj))
        if obj[k] < best_obj:
            best_obj, best_v = obj[k], chunk[k]
    return best_v, best_obj


@lru_cache(maxsize=4096)
def _fit_cached(phase: float, n_line: int, n_samples: int, seed: int) -> PWLFit:
    grid = np.linspace(-HALF_PI, HALF_PI, n_samples)
    target = np.cos(grid + phase)
    n_free = n_line - 1
    if n_free == 0:
        verts = np.array([-HALF_PI, HALF_PI])
        obj = float(_batch_objective(verts[None], phase, grid, target)[0])
    else:
        rng = np.random.default_rng(seed)
        starts = [
            np.linspace(-HALF_PI, HALF_PI, n_line + 1),
            -HALF_PI * np.cos(np.linspace(0, np.pi, n_line + 1)),
        ]
        # the half-resolution fit with duplicated vertices reproduces its own lines
        coarse = None
        if n_line > 1:
            try:
                coarse = _fit_cached(phase, max(1, n_line // 2), n_samples, seed)
            except PWLFitError:
                coarse = None
        if coarse is not None:
            pad = np.full(n_line + 1 - len(coarse.vertices), coarse.vertices[0])
            starts.append(np.sort(np.concatenate([coarse.vertices, pad])))
        if n_free <= 2:
            v, _ = _exhaustive(n_free, phase, grid, target, 721 if n_free == 1 else 121)
            if v is not None:
                starts.append(v)
        while len(starts) < 8:
            inner = np.sort(rng.uniform(-HALF_PI, HALF_PI, n_free))
            starts.append(np.concatenate([[-HALF_PI], inner, [HALF_PI]]))
        starts += _inflection_starts(phase, n_line)
        starts = np.array(starts)
        exact = _batch_objective(starts, phase, grid, target)
        feas = np.isfinite(exact)
        if feas.any():
            refined, robj = _coordinate_descent(starts[feas], phase, grid, target)
            cands = np.vstack([starts, refined])
            objs = np.concatenate([exact, robj])
        else:
            cands, objs = starts, exact
    fit = _first_sound(cands if n_free else verts[None], objs if n_free else np.array([obj]), phase, grid, target, n_line, n_samples)
    if fit is None:
        raise PWLFitError(f"no feasible vertex placement for phase {phase:.4f} with n_line={n_line}")
    if n_free and coarse is not None and coarse.objective <= fit.objective:
        # never worse than the coarser fit: reuse its lines through duplicated vertices
        pad = np.full(n_line + 1 - len(coarse.vertices), coarse.vertices[0])
        fit = replace(coarse, vertices=np.sort(np.concatenate([coarse.vertices, pad])), n_line=n_line)
    return fit


def _first_sound(cands, objs, phase, grid, target, n_line, n_samples):
    """Cheapest finite candidate that also holds on a dense verification grid;
    if none does, the cheapest one with intercepts lowered by its violation."""
    n_check = max(10001, 10 * (n_samples - 1) + 1)
    fallback = None
    for k in np.argsort(objs)[:16]:
        if not np.isfinite(objs[k]):
            break
        a, b = _lines_from_vertices(cands[k][None], phase)
        keep = np.isfinite(b[0])
        fit = PWLFit(phase, a[0][keep], b[0][keep], cands[k], float(objs[k]), n_line)
        viol = fit.max_violation(n_check)
        if viol <= 1e-10:
            return fit
        if fallback is None:
            fallback = (fit, viol)
    if fallback is None:
        return None
    fit, viol = fallback
    log.warning("PWL fit violates the lower bound by %.3e between samples; lowering intercepts", viol)
    lowered = fit.intercepts - viol - 1e-10
    approx = np.min(fit.slopes[:, None] * grid + lowered[:, None], axis=0)
    obj = float(np.sum((target - approx) ** 2))
    return PWLFit(phase, fit.slopes, lowered, fit.vertices, obj, n_line, repaired=True)


def fit_pwl_lower(phase: float, n_line: int, n_samples: int = 721, seed: int = 0) -> PWLFit:
    """Lower-bound cos(delta + phase) on [-pi/2, pi/2] by the minimum of chord lines
    through ``n_line + 1`` points on the curve (endpoints pinned at +-pi/2)."""
    if n_line < 1:
        raise ValueError("n_line must be >= 1")
    if n_samples < 101:
        raise ValueError("n_samples must be >= 101")
    return _fit_cached(float(phase), int(n_line), int(n_samples), int(seed))


def fit_objective_grid(phase, verts, n_samples=721):
    """Objective for explicit vertex sets (used by oracles and plots)."""
    grid = np.linspace(-HALF_PI, HALF_PI, n_samples)
    return _batch_objective(np.atleast_2d(verts), phase, grid, np.cos(grid + phase))


# ---------------------------------------------------------------- polytope


@dataclass
class Polytope:
    l_ineq: np.ndarray  # (N, n) acting on x1
    l_ineq_const: np.ndarray
    tags: list
    l_eq: np.ndarray  # (2, 2n)
    l_eq_const: np.ndarray
    delta_star: np.ndarray
    lines: list = field(default_factory=list)  # per row: generating (pair, amplitude, slope, intercept)

    @property
    def n_facets(self) -> int:
        return len(self.l_ineq_const)

    def slack(self, x1):
        """Row values L x1 + l; <= 0 inside."""
        return np.asarray(x1) @ self.l_ineq.T + self.l_ineq_const

    def contains_x1(self, x1, tol: float = 0.0):
        return np.all(self.slack(x1) <= tol, axis=-1)

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"coeffs": self.l_ineq[i].tolist(), "const": float(self.l_ineq_const[i]), "tag": self.tags[i],
                 "lines": self.lines[i] if self.lines else []}
                for i in range(self.n_facets)
            ],
            "l_eq": self.l_eq.tolist(),
            "l_eq_const": self.l_eq_const.tolist(),
            "delta_star": self.delta_star.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Polytope":
        rows = d["rows"]
        return cls(
            np.array([r["coeffs"] for r in rows], dtype=float),
            np.array([r["const"] for r in rows], dtype=float),
            [r["tag"] for r in rows],
            np.array(d["l_eq"], dtype=float),
            np.array(d["l_eq_const"], dtype=float),
            np.array(d["delta_star"], dtype=float),
            [r.get("lines", []) for r in rows],
        )

    def save(self, path):
        return dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "Polytope":
        return cls.from_dict(load_json(path))


def fit_constraint_terms(constraints, n_line, n_samples=721, seed=0) -> dict:
    """One fit per distinct (phase, n_line); keyed by phase."""
    fits = {}
    nl = n_line if isinstance(n_line, dict) else None
    for con in constraints:
        for t in con.terms:
            if t.amplitude <= 1e-14:
                continue
            lines = nl.get((con.rg_bus, t.pair), 2) if nl else int(n_line)
            fits[(con.rg_bus, t.pair)] = fit_pwl_lower(t.phase, lines, n_samples, seed)
    return fits


def assemble_acfr(constraints, fits: dict, delta_star, m, facet_cap: int = FACET_CAP) -> Polytope:
    delta_star = np.asarray(delta_star, dtype=float)
    n = len(delta_star)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for i, j in pairs:
        if abs(delta_star[i] - delta_star[j]) >= HALF_PI:
            raise PolytopeError(f"SEP angle difference on pair {(i, j)} is outside (-pi/2, pi/2)")
    rows, consts, tags, gens = [], [], [], []

    for con in constraints:
        terms = [t for t in con.terms if t.amplitude > 1e-14]
        choices = [list(range(len(fits[(con.rg_bus, t.pair)].slopes))) for t in terms]
        count = int(np.prod([len(c) for c in choices])) if choices else 1
        if count > facet_cap:
            warnings.warn(f"RG bus {con.rg_bus}: {count} LVRT facets exceed cap {facet_cap}; reduce n_line",
                          stacklevel=2)
        for combo in itertools.product(*choices):
            coeff = np.zeros(n)
            value = con.diag - con.lvrt_max**2
            used = []
            for t, kline in zip(terms, combo):
                fit = fits[(con.rg_bus, t.pair)]
                a, b = fit.slopes[kline], fit.intercepts[kline]
                i, j = t.pair
                coeff[i] -= t.amplitude * a
                coeff[j] += t.amplitude * a
                value += t.amplitude * (a * (delta_star[i] - delta_star[j]) + b)
                used.append({"pair": list(t.pair), "amplitude": t.amplitude, "slope": float(a),
                             "intercept": float(b)})
            norm = np.linalg.norm(coeff)
            if norm < 1e-14:
                if value < 0:
                    raise PolytopeError(f"RG bus {con.rg_bus}: LVRT constraint infeasible everywhere")
                continue
            rows.append(coeff / norm)
            consts.append(-value / norm)
            tags.append({"kind": "lvrt", "bus": con.rg_bus, "combination": list(combo)})
            gens.append(used)

    for i, j in pairs:
        for sign in (1, -1):
            coeff = np.zeros(n)
            coeff[i], coeff[j] = sign, -sign
            rows.append(coeff / np.sqrt(2))
            consts.append((sign * (delta_star[i] - delta_star[j]) - HALF_PI) / np.sqrt(2))
            tags.append({"kind": "pi-box", "pair": [i, j], "sign": sign})
            gens.append([])

    l_ineq = np.array(rows).reshape(-1, n)
    l_const = np.array(consts)
    if np.any(l_const >= 0):
        bad = [tags[k] for k in np.nonzero(l_const >= 0)[0]]
        raise PolytopeError(f"SEP infeasible for facets {bad}")
    m = np.asarray(m, dtype=float)
    l_eq = np.zeros((2, 2 * n))
    l_eq[0, :n] = m
    l_eq[1, n:] = m
    return Polytope(l_ineq, l_const, tags, l_eq, np.zeros(2), delta_star, gens)


@dataclass(frozen=True)
class FacetClass:
    kind: str  # flow-in | flow-out | semi-saddle
    rate: float


def classify_facet_point(poly: Polytope, i: int, x, tol: float = 1e-9, on_tol: float = 1e-8) -> FacetClass:
    x = as_vector(x)
    n = poly.l_ineq.shape[1]
    s = poly.slack(x[:n])
    if abs(s[i]) > on_tol or np.any(np.delete(s, i) > on_tol):
        raise ValueError(f"state is not on facet {i}")
    rate = float(poly.l_ineq[i] @ x[n:])
    if rate > tol:
        return FacetClass("flow-out", rate)
    if rate < -tol:
        return FacetClass("flow-in", rate)
    return FacetClass("semi-saddle", rate)


# ---------------------------------------------------------------- monitors


class FeasibilityMonitor:
    """True LVRT margins and Pi-box margins on deviation states (>= 0 feasible)."""

    def __init__(self, constraints, delta_star):
        self.constraints = list(constraints)
        self.delta_star = np.asarray(delta_star, dtype=float)
        n = len(self.delta_star)
        self.n = n
        self.pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    @property
    def n_lvrt(self) -> int:
        return len(self.constraints)

    def lvrt_margin(self, x):
        x = np.asarray(x)
        delta = self.delta_star + x[..., : self.n]
        if not self.constraints:
            return np.zeros(x.shape[:-1] + (0,))
        return np.stack([voltage_sq(delta, c) - c.lvrt_max**2 for c in self.constraints], axis=-1)

    def pi_margin(self, x):
        x = np.asarray(x)
        delta = self.delta_star + x[..., : self.n]
        if not self.pairs:
            return np.zeros(x.shape[:-1] + (0,))
        return np.stack([HALF_PI - np.abs(delta[..., i] - delta[..., j]) for i, j in self.pairs], axis=-1)

    def margins(self, x):
        return np.concatenate([self.lvrt_margin(x), self.pi_margin(x)], axis=-1)

    def __call__(self, states):
        lv = np.all(self.lvrt_margin(states) >= 0, axis=-1)
        pi = np.all(self.pi_margin(states) >= 0, axis=-1)
        return lv, pi
