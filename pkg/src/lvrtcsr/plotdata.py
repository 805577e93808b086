"""Phase-plane data for two-machine cases: vector field, V contours, feasibility
boundaries, flow-out facet segments and region masks. Rendering is left to the
reader's plotting tool of choice."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .csr import contains
from .dynamics import fault_state, simulate, vector_field
from .feasreg import voltage_sq
from .io import dump_json
from .lff import energy_function_candidate, evaluate_v
from .oracle import CLASS_NAMES, GridSpec, brute_force_csr, relative_to_coa

log = logging.getLogger(__name__)


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, (float, np.floating)) else v for v in r])
    return Path(path)


def true_boundary_angles(problem, n_scan: int = 2001):
    """Relative angle deviations where some LVRT margin crosses zero (two machines)."""
    ds = problem.mats.delta_star
    y = np.linspace(-0.5 * np.pi - (ds[0] - ds[1]), 0.5 * np.pi - (ds[0] - ds[1]), n_scan)
    out = []
    for con in problem.constraints:
        def g(v, con=con):
            x1 = relative_to_coa(np.array([v, 0.0]), problem.mats.m)[:2]
            return float(voltage_sq(ds + x1, con) - con.lvrt_max**2)

        vals = np.array([g(v) for v in y])
        for k in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]:
            out.append((con.rg_bus, brentq(g, y[k], y[k + 1], xtol=1e-14)))
    return out


def emit(problem, cfg, estimate) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    x0 = fault_state(problem.scenario, problem.model, problem.system)
    traj = simulate(x0, problem.mats, cfg.horizon, monitor=problem.monitor)
    traj.to_csv(out / "trajectory_postfault.csv")
    bundle = {"n_machines": problem.n, "x0": x0.tolist(), "v_max": estimate.v,
              "files": ["trajectory_postfault.csv"]}
    if problem.n != 2:
        bundle["guard"] = "phase-plane data needs two machines; only trajectory and report emitted"
        dump_json(bundle, out / "bundle.json")
        return bundle

    mats = problem.mats
    spec = GridSpec(cfg.grid, horizon=cfg.horizon)
    y_ax, w_ax = spec.axes(mats)

    # vector field on a coarse grid
    yy, ww = np.meshgrid(np.linspace(y_ax[0], y_ax[-1], 41), np.linspace(w_ax[0], w_ax[-1], 41), indexing="ij")
    rel = np.stack([yy.ravel(), ww.ravel()], axis=-1)
    xs = relative_to_coa(rel, mats.m)
    f = vector_field(xs, mats)
    _write(out / "vector_field.csv", ["angle", "speed", "d_angle", "d_speed"],
           [(a, b, c[0] - c[1], c[2] - c[3]) for (a, b), c in zip(rel, f)])

    # V contours of the energy function and the final candidate
    yy, ww = np.meshgrid(np.linspace(y_ax[0], y_ax[-1], 121), np.linspace(w_ax[0], w_ax[-1], 121), indexing="ij")
    rel = np.stack([yy.ravel(), ww.ravel()], axis=-1)
    xs = relative_to_coa(rel, mats.m)
    energy = energy_function_candidate(problem.system.post, mats.delta_star)
    inside = contains(estimate, xs)
    _write(out / "v_contour.csv", ["angle", "speed", "v_energy", "v_final", "estimated_csr"],
           [(a, b, ve, vf, int(k)) for (a, b), ve, vf, k in
            zip(rel, evaluate_v(energy, xs), evaluate_v(estimate.candidate, xs), inside)])

    # feasibility boundaries: true (LVRT roots and Pi box) and approximate (polytope facets)
    ds = mats.delta_star
    edges = [("true-fb", f"lvrt bus {bus}", y, w_ax[0], w_ax[-1]) for bus, y in true_boundary_angles(problem)]
    for s in (1, -1):
        edges.append(("true-fb", f"pi-box {s:+d}", s * 0.5 * np.pi - (ds[0] - ds[1]), w_ax[0], w_ax[-1]))
    poly = estimate.polytope
    segs = []
    for i in range(poly.n_facets):
        # on the manifold each row acts on the relative angle alone
        coef = poly.l_ineq[i] @ relative_to_coa(np.array([1.0, 0.0]), mats.m)[:2]
        if abs(coef) < 1e-14:
            continue
        y_f = -poly.l_ineq_const[i] / coef
        tag = poly.tags[i]
        label = f"{tag['kind']} {tag.get('bus', tag.get('pair'))} {tag.get('combination', tag.get('sign'))}"
        edges.append(("acfb", label, y_f, w_ax[0], w_ax[-1]))
        # rate L x2 = coef * relative speed: flow-out where it is positive
        if coef > 0:
            segs.append((label, y_f, 0.0, w_ax[-1], "flow-out"))
            segs.append((label, y_f, w_ax[0], 0.0, "flow-in"))
        else:
            segs.append((label, y_f, w_ax[0], 0.0, "flow-out"))
            segs.append((label, y_f, 0.0, w_ax[-1], "flow-in"))
    _write(out / "polytope_edges.csv", ["kind", "tag", "angle", "speed_lo", "speed_hi"], edges)
    _write(out / "flowout_segments.csv", ["tag", "angle", "speed_lo", "speed_hi", "class"], segs)

    grid = brute_force_csr(mats, problem.monitor, spec, jobs=cfg.jobs)
    est_mask = contains(estimate, grid.states)
    _write(out / "region_masks.csv", ["angle", "speed", "oracle_class", "estimated_csr"],
           [(c[0], c[1], CLASS_NAMES[k], int(e)) for c, k, e in zip(grid.coords, grid.classes, est_mask)])
    bundle["files"] += ["vector_field.csv", "v_contour.csv", "polytope_edges.csv", "flowout_segments.csv",
                        "region_masks.csv"]
    bundle["oracle_counts"] = grid.counts()
    dump_json(bundle, out / "bundle.json")
    return bundle
