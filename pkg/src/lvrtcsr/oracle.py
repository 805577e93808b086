"""Brute-force ground truth by simulation: actual CSR on a grid, true CCT, audits."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dynamics import fault_state, project_coa, vector_field
from .integrate import StepSizeUnderflow, integrate_batch

log = logging.getLogger(__name__)

IN_CSR, EXITS_FR, DIVERGES, INCONCLUSIVE = 0, 1, 2, 3
CLASS_NAMES = ("in-CSR", "exits-FR", "diverges", "inconclusive")
CONVERGED_TOL = 1e-3
SETTLED_TOL = 1e-6  # retired as converged once this close to the SEP


class GridTooLarge(ValueError):
    pass


def relative_to_coa(r, m):
    """Relative coordinates (x_k - x_n for k < n, angles then speeds) -> COA deviations."""
    r = np.asarray(r, dtype=float)
    m = np.asarray(m, dtype=float)
    n = len(m)
    out = []
    for part in (r[..., : n - 1], r[..., n - 1 :]):
        last = -(part @ m[:-1]) / m.sum()
        out.append(np.concatenate([part + last[..., None], last[..., None]], axis=-1))
    return np.concatenate(out, axis=-1)


def coa_to_relative(x, m):
    x = np.asarray(x, dtype=float)
    n = len(m)
    return np.concatenate([x[..., : n - 1] - x[..., n - 1 : n], x[..., n : 2 * n - 1] - x[..., 2 * n - 1 :]], axis=-1)


@dataclass(frozen=True)
class GridSpec:
    """Axis ranges in relative coordinates; None picks the Pi slice (angles) and a
    speed span from the largest potential energy inside Pi."""

    shape: tuple = (201, 201)
    angle_range: tuple | None = None
    speed_range: tuple | None = None
    horizon: float = 20.0
    rtol: float = 1e-8
    atol: float = 1e-10
    max_dims: int = 2  # guard on n - 1

    def axes(self, mats):
        n = mats.n
        if n - 1 > self.max_dims:
            raise GridTooLarge(f"{n} machines exceed the oracle guard (n - 1 <= {self.max_dims})")
        dims = 2 * (n - 1)
        shape = tuple(self.shape)
        if len(shape) != dims:
            if len(shape) == 2 and dims > 2:
                shape = (shape[0],) * dims
            else:
                raise ValueError(f"grid shape {shape} does not match {dims} coordinates")
        if np.prod(shape) > 5_000_000:
            raise GridTooLarge(f"grid of {int(np.prod(shape))} cells is too large")
        ds = mats.delta_star
        axes = []
        for k in range(n - 1):
            lo, hi = self.angle_range or (-0.5 * np.pi - (ds[k] - ds[-1]), 0.5 * np.pi - (ds[k] - ds[-1]))
            axes.append(np.linspace(lo, hi, shape[k]))
        w_max = default_speed_span(mats)
        for k in range(n - 1):
            lo, hi = self.speed_range or (-w_max, w_max)
            axes.append(np.linspace(lo, hi, shape[n - 1 + k]))
        return axes


def default_speed_span(mats) -> float:
    """Relative speed whose kinetic energy matches the largest edge potential inside Pi."""
    from .lff import edge_potential

    m = mats.m
    m_eq = min(m[k] * m[-1] / (m[k] + m[-1]) for k in range(len(m) - 1))
    pot = 0.0
    for k, es in zip(mats.edge_weights, mats.edge_star):
        y = np.linspace(-0.5 * np.pi - es, 0.5 * np.pi - es, 401)
        pot += k * float(np.max(edge_potential(y, es)))
    return float(np.sqrt(2.0 * pot / m_eq))


@dataclass
class OracleGrid:
    axes: list
    coords: np.ndarray  # (N, 2(n-1)) relative coordinates
    states: np.ndarray  # (N, 2n) COA deviations
    classes: np.ndarray  # (N,) codes
    spec: GridSpec

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    def counts(self) -> dict:
        return {name: int(np.sum(self.classes == k)) for k, name in enumerate(CLASS_NAMES)}

    def to_csv(self, path):
        dims = self.coords.shape[1]
        half = dims // 2
        header = [f"angle{k + 1}" for k in range(half)] + [f"speed{k + 1}" for k in range(half)] + ["class"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for c, k in zip(self.coords, self.classes):
                w.writerow([f"{v:.17g}" for v in c] + [CLASS_NAMES[k]])
        return Path(path)

    @staticmethod
    def read_csv(path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        coords = np.array([[float(v) for v in r[:-1]] for r in rows[1:]])
        classes = np.array([CLASS_NAMES.index(r[-1]) for r in rows[1:]])
        return coords, classes


def _classify_chunk(chunk, mats, monitor, horizon, rtol, atol):
    n = mats.n
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    ds = mats.delta_star

    def diverged(y):
        d = ds + y[..., :n]
        return np.any(np.stack([np.abs(d[..., i] - d[..., j]) > np.pi for i, j in pairs], axis=-1), axis=-1)

    def stop(y):
        return diverged(y) | (np.max(np.abs(y), axis=-1) < SETTLED_TOL)

    cls = np.full(len(chunk), INCONCLUSIVE)
    try:
        res = integrate_batch(
            lambda y: vector_field(y, mats),
            chunk,
            horizon,
            rtol=rtol,
            atol=atol,
            project=lambda y: project_coa(y, mats.m),
            events=monitor.margins,
            stop=stop,
            terminal_events=True,
        )
    except StepSizeUnderflow as exc:  # pragma: no cover - stiff corner cases
        log.warning("integration failed (%s); chunk marked inconclusive", exc)
        return cls, np.full(len(chunk), np.inf)
    exited = np.isfinite(res.event_time).any(axis=1)
    div = diverged(res.y_final) & ~exited
    conv = (np.max(np.abs(res.y_final), axis=-1) < CONVERGED_TOL) & ~exited & ~div
    cls[conv] = IN_CSR
    cls[div] = DIVERGES
    cls[exited] = EXITS_FR
    first = np.min(res.event_time, axis=1) if res.event_time.size else np.full(len(chunk), np.inf)
    return cls, first


def classify_states(states, mats, monitor, horizon: float = 20.0, rtol: float = 1e-8, atol: float = 1e-10,
                    batch: int = 4096, jobs: int = 1, return_times: bool = False):
    """Simulate each post-fault deviation state and classify it.

    Feasibility is monitored on the dense output with sign-change event
    location (true LVRT margins and the Pi box). |delta_kj| > pi stops a run
    as diverged. ``jobs > 1`` maps batches over a process pool; the result
    does not depend on the pool size because batches are fixed.
    """
    states = project_coa(np.atleast_2d(np.asarray(states, dtype=float)), mats.m)
    chunks = [states[k : k + batch] for k in range(0, len(states), batch)]
    args = (mats, monitor, horizon, rtol, atol)
    if jobs > 1 and len(chunks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_classify_chunk, chunks, *[[a] * len(chunks) for a in args]))
    else:
        parts = [_classify_chunk(c, *args) for c in chunks]
    if not parts:
        empty = np.zeros(0, dtype=int)
        return (empty, np.zeros(0)) if return_times else empty
    out = np.concatenate([p[0] for p in parts])
    exit_time = np.concatenate([p[1] for p in parts])
    return (out, exit_time) if return_times else out


def brute_force_csr(mats, monitor, spec: GridSpec | None = None, jobs: int = 1) -> OracleGrid:
    spec = spec or GridSpec()
    axes = spec.axes(mats)
    coords = np.array(list(itertools.product(*axes)))
    states = relative_to_coa(coords, mats.m)
    classes = classify_states(states, mats, monitor, spec.horizon, spec.rtol, spec.atol, jobs=jobs)
    log.info("oracle grid %s: %s", tuple(len(a) for a in axes), {k: int(np.sum(classes == i)) for i, k in enumerate(CLASS_NAMES)})
    return OracleGrid(axes, coords, states, classes, spec)


def is_stable_clearing(problem, clearing_time: float, horizon: float = 20.0) -> bool:
    scen = replace(problem.scenario, clearing_time=float(clearing_time))
    x0 = fault_state(scen, problem.model, problem.system)
    return bool(classify_states(x0[None], problem.mats, problem.monitor, horizon)[0] == IN_CSR)


def true_cct(problem, horizon: float = 20.0, t_max: float = 2.0, tol: float = 1e-3) -> float:
    """Bisection on the clearing time; the stable side uses the oracle criteria."""
    if not is_stable_clearing(problem, 0.0, horizon):
        raise ValueError("scenario is not stable even with instantaneous clearing")
    if is_stable_clearing(problem, t_max, horizon):
        return float(t_max)
    lo, hi = 0.0, float(t_max)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if is_stable_clearing(problem, mid, horizon):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class AuditReport:
    n_cells: int
    n_contained: int
    n_in_csr: int
    soundness_violations: int
    violation_cells: list
    coverage: float

    def to_dict(self) -> dict:
        return {
            "n_cells": self.n_cells,
            "n_contained": self.n_contained,
            "n_in_csr": self.n_in_csr,
            "soundness_violations": self.soundness_violations,
            "violation_cells": self.violation_cells,
            "coverage": self.coverage,
        }


def audit_estimate(estimate, grid: OracleGrid) -> AuditReport:
    from .csr import contains

    if len(estimate.m) != grid.states.shape[1] // 2:
        raise ValueError("estimate and oracle grid belong to different systems")
    inside = contains(estimate, grid.states)
    truth = grid.classes == IN_CSR
    bad = np.nonzero(inside & ~truth)[0]
    n_true = int(truth.sum())
    coverage = float(np.sum(inside & truth) / n_true) if n_true else 0.0
    return AuditReport(
        len(grid.classes),
        int(inside.sum()),
        n_true,
        len(bad),
        [grid.coords[k].tolist() + [CLASS_NAMES[grid.classes[k]]] for k in bad[:50]],
        coverage,
    )
