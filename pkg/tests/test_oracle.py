from dataclasses import replace

import numpy as np
import pytest

from lvrtcsr.csr import CSREstimate
from lvrtcsr.oracle import (
    EXITS_FR,
    IN_CSR,
    GridSpec,
    GridTooLarge,
    OracleGrid,
    audit_estimate,
    brute_force_csr,
    classify_states,
    coa_to_relative,
    is_stable_clearing,
    relative_to_coa,
    true_cct,
)
from lvrtcsr.synth import ring_network


@pytest.fixture(scope="module")
def small_grid(problem):
    return brute_force_csr(problem.mats, problem.monitor, GridSpec((21, 21)))


@pytest.fixture(scope="module")
def cct(problem):
    return true_cct(problem)


def test_relative_coordinates_round_trip():
    m = np.array([0.2, 0.4, 0.9])
    r = np.random.default_rng(0).normal(size=(10, 4))
    x = relative_to_coa(r, m)
    assert np.allclose(x[:, :3] @ m, 0) and np.allclose(x[:, 3:] @ m, 0)
    assert np.allclose(coa_to_relative(x, m), r)


def test_sep_is_in_csr(problem):
    assert classify_states(np.zeros((1, 4)), problem.mats, problem.monitor)[0] == IN_CSR


def test_infeasible_start_exits_immediately(problem):
    x = relative_to_coa(np.array([2.0, 0.0]), problem.mats.m)
    cls, t = classify_states(x[None], problem.mats, problem.monitor, return_times=True)
    assert cls[0] == EXITS_FR and t[0] == 0.0


def test_grid_counts_and_shape(small_grid):
    assert small_grid.shape == (21, 21)
    counts = small_grid.counts()
    assert sum(counts.values()) == 441 and counts["in-CSR"] > 0
    # the SEP is the centre angle row with zero speed; nearby cells converge
    k = int(np.argmin(np.linalg.norm(small_grid.states, axis=1)))
    assert small_grid.classes[k] == IN_CSR


def test_parallel_matches_serial(problem):
    rng = np.random.default_rng(1)
    xs = relative_to_coa(rng.uniform([-1, -3], [1, 3], (64, 2)), problem.mats.m)
    a = classify_states(xs, problem.mats, problem.monitor, horizon=5.0, batch=16)
    b = classify_states(xs, problem.mats, problem.monitor, horizon=5.0, batch=16, jobs=2)
    assert np.array_equal(a, b)


def test_grid_csv_round_trip(small_grid, tmp_path):
    small_grid.to_csv(tmp_path / "g.csv")
    coords, classes = OracleGrid.read_csv(tmp_path / "g.csv")
    assert np.array_equal(coords, small_grid.coords)
    assert np.array_equal(classes, small_grid.classes)


def test_grid_guard():
    from lvrtcsr.csr import build_problem
    from lvrtcsr.dynamics import FaultScenario

    p = build_problem(ring_network(4), FaultScenario(0, 0.5, 0.1))
    with pytest.raises(GridTooLarge):
        GridSpec((5, 5)).axes(p.mats)
    with pytest.raises(GridTooLarge):
        GridSpec((3000, 3000)).axes(ring3_mats())


def ring3_mats():
    from lvrtcsr.dynamics import build_state_matrices
    from lvrtcsr.netmodel import build_extended_admittance, compute_sep, kron_reduce

    model = ring_network(3)
    red = kron_reduce(build_extended_admittance(model), model)
    return build_state_matrices(red, compute_sep(red))


def test_true_cct_bracket(problem, cct):
    assert cct > 0.2
    assert is_stable_clearing(problem, cct - 2e-3)
    assert not is_stable_clearing(problem, cct + 2e-3)


def test_clearing_after_cct_leaves_csr(problem, cct):
    from lvrtcsr.dynamics import fault_state

    x = fault_state(replace(problem.scenario, clearing_time=cct + 0.01), problem.model, problem.system)
    assert classify_states(x[None], problem.mats, problem.monitor)[0] != IN_CSR


def test_audit_of_valid_estimate(assessment, small_grid):
    rep = audit_estimate(assessment.estimate, small_grid)
    assert rep.soundness_violations == 0
    assert 0 < rep.coverage <= 1


def test_audit_detects_inflated_estimate(assessment, small_grid):
    est = assessment.estimate
    bad = CSREstimate(est.candidate, 10 * est.v, est.polytope, est.m)
    rep = audit_estimate(bad, small_grid)
    assert rep.soundness_violations > 0
    assert len(rep.violation_cells) == min(50, rep.soundness_violations)
