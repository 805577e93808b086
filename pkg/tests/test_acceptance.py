"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line (also collected in
the terminal summary) before asserting."""
import time

import numpy as np
import pytest

from conftest import record
from lvrtcsr.csr import CSREstimate, assess_fault, build_problem, contains, expand_level_set
from lvrtcsr.dynamics import build_state_matrices, project_coa, simulate, vector_field
from lvrtcsr.feasreg import classify_facet_point, fit_pwl_lower, voltage_sq
from lvrtcsr.integrate import integrate_batch
from lvrtcsr.lff import (
    EPS_Q,
    assemble_and_solve_lmi,
    energy_function_candidate,
    evaluate_v,
    evaluate_vdot,
    lmi_residual,
    sector_inequality_holds,
)
from lvrtcsr.netmodel import manifold_basis
from lvrtcsr.oracle import (
    IN_CSR,
    GridSpec,
    audit_estimate,
    brute_force_csr,
    classify_states,
    relative_to_coa,
    true_cct,
)
from lvrtcsr.synth import perturbed_variants, random_reduced_model, ring_network


def _pi_manifold_states(rng, mats, count, speed_scale=2.0):
    """Uniform-ish in-Pi angle deviations on the manifold with Gaussian speeds."""
    n = mats.n
    u = manifold_basis(mats.m)
    ds = mats.delta_star
    out = []
    while sum(len(o) for o in out) < count:
        x1 = rng.uniform(-np.pi, np.pi, (4 * count, n - 1)) @ u.T
        d = ds + x1
        ok = np.all([np.abs(d[:, a] - d[:, b]) <= 0.5 * np.pi for a in range(n) for b in range(a + 1, n)], axis=0)
        out.append(x1[ok])
    x1 = np.concatenate(out)[:count]
    x2 = (speed_scale * rng.normal(size=(count, n - 1))) @ u.T
    return np.hstack([x1, x2])


# 1 ----------------------------------------------------------------------------
def test_c1_sector_lemma():
    t0 = time.perf_counter()
    d_star = np.linspace(-0.5 * np.pi, 0.5 * np.pi, 316)
    s = np.linspace(-np.pi, np.pi, 317)  # s = delta + delta*
    ds, ss = np.meshgrid(d_star, s, indexing="ij")
    delta = ss - ds
    f = np.sin(delta) - np.sin(ds)
    slack = (delta - ds) * f - f * f
    inside_ok = bool(np.all(sector_inequality_holds(delta, ds, slack=1e-12)))
    # just outside: |delta + delta*| = pi + eps
    violated, total = 0, 0
    for eps in (1e-3, 1e-2):
        for sign in (1, -1):
            dd = sign * (np.pi + eps) - d_star[1:-1]
            total += len(dd)
            violated += int(np.sum(~sector_inequality_holds(dd, d_star[1:-1], slack=0.0)))
    elapsed = time.perf_counter() - t0
    ok = inside_ok and violated > 0 and elapsed < 1.0
    record(1, ok, f"{delta.size} points, min slack {slack.min():.2e}; "
                  f"outside violations {violated}/{total}; {elapsed:.3f} s")
    assert delta.size >= 100_000
    assert inside_ok and slack.min() >= -1e-12
    assert violated > 0
    assert elapsed < 1.0


# 2 ----------------------------------------------------------------------------
def test_c2_lmi_certificate(problem, x0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    systems = [("committed", problem.mats, x0)]
    for k in range(20):
        n = int(rng.integers(2, 5))
        red, ds = random_reduced_model(rng, n)
        mats = build_state_matrices(red, ds)
        xr = _pi_manifold_states(rng, mats, 1, speed_scale=0.5)[0]
        systems.append((f"random-{k}-n{n}", mats, xr))
    worst_eig, worst_vdot = -np.inf, -np.inf
    for name, mats, xo in systems:
        for obj in (None, xo):
            c = assemble_and_solve_lmi(mats, obj)
            worst_eig = max(worst_eig, lmi_residual(c, mats))
            xs = _pi_manifold_states(rng, mats, 10_000)
            worst_vdot = max(worst_vdot, float(np.max(evaluate_vdot(c, xs, mats))))
    elapsed = time.perf_counter() - t0
    ok = worst_eig <= 1e-8 and worst_vdot <= 1e-9 and elapsed < 60
    record(2, ok, f"{len(systems)} systems x 2 objectives: max eig {worst_eig:.2e}, "
                  f"max Vdot {worst_vdot:.2e}; {elapsed:.1f} s")
    assert worst_eig <= 1e-8
    assert worst_vdot <= 1e-9
    assert elapsed < 60


# 3 ----------------------------------------------------------------------------
def test_c3_energy_decay(problem):
    mats = problem.mats
    c = energy_function_candidate(problem.system.post, mats.delta_star)
    rng = np.random.default_rng(3)
    d = problem.system.post.d
    worst_rise, worst_gap, used = -np.inf, 0.0, 0
    while used < 50:
        x = _pi_manifold_states(rng, mats, 1, speed_scale=1.0)[0] * rng.uniform(0.05, 0.6)
        traj = simulate(x, mats, 3.0, monitor=problem.monitor)
        if not traj.inside_pi.all():
            continue
        used += 1
        v = evaluate_v(c, traj.states)
        worst_rise = max(worst_rise, float(np.max(np.diff(v))))
        n = mats.n
        x1, x2 = traj.states[:, :n], traj.states[:, n:]
        vdot = evaluate_vdot(c, traj.states, mats)
        expected = -np.sum(d * x2**2, axis=1)
        allowed = EPS_Q * np.abs(np.sum(x1 * x2, axis=1)) + 1e-12
        worst_gap = max(worst_gap, float(np.max(np.abs(vdot - expected) - allowed)))
    ok = worst_rise <= 1e-6 and worst_gap <= 0
    record(3, ok, f"50 in-Pi trajectories: max V increase {worst_rise:.2e}, "
                  f"Vdot vs -sum d w^2 excess {worst_gap:.2e}")
    assert worst_rise <= 1e-6
    assert worst_gap <= 0


# 4 ----------------------------------------------------------------------------
def test_c4_pwl_soundness_and_refinement():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    phases = rng.uniform(-0.25 * np.pi, 0.25 * np.pi, 20)
    worst, monotone = -np.inf, True
    for ph in phases:
        objs = []
        for n_line in (1, 2, 4, 8):
            fit = fit_pwl_lower(float(ph), n_line)
            worst = max(worst, fit.max_violation(10_001))
            objs.append(fit.objective)
        monotone &= bool(np.all(np.diff(objs) <= 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and monotone and elapsed < 30
    record(4, ok, f"20 phases x n_line {{1,2,4,8}}: max violation {worst:.2e}, "
                  f"monotone={monotone}; {elapsed:.1f} s")
    assert worst <= 1e-10
    assert monotone
    assert elapsed < 30


# 5 ----------------------------------------------------------------------------
def _rejection_sample_polytope(rng, problem, count):
    mats, poly = problem.mats, problem.polytope
    u = manifold_basis(mats.m)
    out, tries = [], 0
    while sum(len(o) for o in out) < count:
        tries += 1
        x1 = rng.uniform(-np.pi, np.pi, (20_000, mats.n - 1)) @ u.T
        out.append(x1[poly.contains_x1(x1)])
    return np.concatenate(out)[:count]


def test_c5_acfr_inner_approximation(problem):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    cases = [("committed", problem), ("3-machine ring", build_problem(ring_network(3), problem.scenario))]
    bad, total = 0, 0
    for _, prob in cases:
        x1 = _rejection_sample_polytope(rng, prob, 10_000)
        delta = prob.mats.delta_star + x1
        n = prob.mats.n
        for con in prob.constraints:
            bad += int(np.sum(voltage_sq(delta, con) < con.lvrt_max**2))
        for a in range(n):
            for b in range(a + 1, n):
                bad += int(np.sum(np.abs(delta[:, a] - delta[:, b]) > 0.5 * np.pi))
        total += len(x1)
    elapsed = time.perf_counter() - t0
    lv = problem.constraints[0].lvrt_max
    ok = bad == 0 and elapsed < 30 and lv == 0.85
    record(5, ok, f"{total} polytope samples (LVRT_max {lv}): {bad} violations; {elapsed:.1f} s")
    assert lv == 0.85
    assert bad == 0
    assert elapsed < 30


# 6 ----------------------------------------------------------------------------
@pytest.mark.slow
def test_c6_csr_soundness(problem, assessment):
    t0 = time.perf_counter()
    est = assessment.estimate
    mats = problem.mats
    rng = np.random.default_rng(6)
    y_ax, w_ax = GridSpec().axes(mats)
    pts = []
    while sum(len(p) for p in pts) < 500:
        rel = np.column_stack([rng.uniform(y_ax[0], y_ax[-1], 20_000), rng.uniform(w_ax[0], w_ax[-1], 20_000)])
        xs = relative_to_coa(rel, mats.m)
        pts.append(xs[contains(est, xs)])
    xs = np.concatenate(pts)[:500]
    cls = classify_states(xs, mats, problem.monitor, horizon=20.0)
    sampled_bad = int(np.sum(cls != IN_CSR))
    grid = brute_force_csr(mats, problem.monitor, GridSpec((201, 201), horizon=20.0))
    audit = audit_estimate(est, grid)
    elapsed = time.perf_counter() - t0
    ok = sampled_bad == 0 and audit.soundness_violations == 0 and elapsed < 600
    record(6, ok, f"500 contained samples: {sampled_bad} not in-CSR; 201x201 audit: "
                  f"{audit.soundness_violations} violations, {audit.n_contained} contained cells, "
                  f"coverage {audit.coverage:.3f}; {elapsed:.0f} s")
    assert sampled_bad == 0
    assert audit.soundness_violations == 0
    assert audit.n_contained > 0
    assert elapsed < 600


# 7 ----------------------------------------------------------------------------
def test_c7_refinement_beats_closest_uep(problem, assessment, x0):
    mats = problem.mats
    assert problem.scenario.clearing_time == 0.2
    energy = energy_function_candidate(problem.system.post, mats.delta_star)
    exp = expand_level_set(energy, problem.polytope, mats.m)
    energy_est = CSREstimate(energy, exp.v_max, problem.polytope, mats.m)
    energy_has = bool(contains(energy_est, x0))
    refined_has = bool(contains(assessment.estimate, x0))
    oracle_in = int(classify_states(x0[None], mats, problem.monitor, horizon=20.0)[0]) == IN_CSR
    ok = (not energy_has) and refined_has and oracle_in
    record(7, ok, f"energy estimate contains x0: {energy_has} (V/v_max "
                  f"{float(evaluate_v(energy, x0)) / exp.v_max:.3f}); refined contains x0: {refined_has} "
                  f"(label {assessment.estimate.candidate.label}); oracle in-CSR: {oracle_in}")
    assert not energy_has
    assert refined_has
    assert oracle_in


# 8 ----------------------------------------------------------------------------
@pytest.mark.slow
def test_c8_cct_conservative(case, problem, assessment):
    t0 = time.perf_counter()
    model, scenario = case
    rows = [("committed", assessment.estimated_cct, true_cct(problem))]
    for name, m, s in perturbed_variants(model, scenario):
        p = build_problem(m, s)
        rows.append((name, assess_fault(p).estimated_cct, true_cct(p)))
    elapsed = time.perf_counter() - t0
    good = [est is not None and 0 < est <= tc for _, est, tc in rows]
    ok = all(good) and elapsed < 300
    detail = ", ".join(f"{n} {e} <= {t:.3f}" for n, e, t in rows)
    record(8, ok, f"{detail}; {elapsed:.0f} s")
    assert all(good), rows
    assert elapsed < 300


# 9 ----------------------------------------------------------------------------
def test_c9_flow_classification(problem):
    mats, poly = problem.mats, problem.polytope
    n = mats.n
    u = manifold_basis(mats.m)
    rng = np.random.default_rng(9)
    pts, facets = [], []
    while len(pts) < 100:
        i = int(rng.integers(poly.n_facets))
        # a point on facet i: move a random in-box angle along the facet normal
        z = rng.uniform(-1.5, 1.5, n - 1)
        row = poly.l_ineq[i] @ u
        x1 = u @ (z - (row @ z + poly.l_ineq_const[i]) / (row @ row) * row)
        if np.any(np.delete(poly.slack(x1), i) > 0):
            continue
        x2 = u @ rng.normal(scale=0.5, size=n - 1)
        pts.append(np.concatenate([x1, x2]))
        facets.append(i)
    xs = np.array(pts)
    h = 1e-4
    common = dict(rtol=1e-12, atol=1e-14, project=lambda y: project_coa(y, mats.m))
    fwd = integrate_batch(lambda y: vector_field(y, mats), xs, h, **common).y_final
    bwd = integrate_batch(lambda y: -vector_field(y, mats), xs, h, **common).y_final
    worst, disagree = 0.0, 0
    for k, i in enumerate(facets):
        fd = (poly.slack(fwd[k, :n])[i] - poly.slack(bwd[k, :n])[i]) / (2 * h)
        cls = classify_facet_point(poly, i, xs[k], tol=1e-6)
        worst = max(worst, abs(fd - cls.rate))
        sign_fd = "flow-out" if fd > 1e-6 else "flow-in" if fd < -1e-6 else "semi-saddle"
        disagree += int(sign_fd != cls.kind)
    ok = worst <= 1e-6 and disagree == 0
    record(9, ok, f"100 facet points: max |rate - finite difference| {worst:.2e}, {disagree} sign disagreements")
    assert worst <= 1e-6
    assert disagree == 0
