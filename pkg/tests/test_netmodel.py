import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lvrtcsr.netmodel import (
    LosslessError,
    ModelError,
    ReducedModel,
    Topology,
    build_extended_admittance,
    bus_voltages,
    compute_sep,
    kron_reduce,
    load_model,
    manifold_basis,
    model_from_dict,
    model_to_dict,
    prefault_voltages,
    voltage_recovery_matrix,
)


def _gen(bus, m=1.0, p=0.0, xd=0.5, e=1.0):
    return {"bus": bus, "m": m, "d": 2 * m, "xd_prime": xd, "e_mag": e, "p_m": p}


def _single():
    return model_from_dict({"buses": [{"id": 1}], "branches": [], "generators": [_gen(1)]})


def test_single_machine_model():
    model = _single()
    assert model.n_gen == 1
    ext = build_extended_admittance(model, Topology(), {1: 1.0})
    assert ext.y_ext.shape == (2, 2)
    assert ext.y_ext[0, 1] == pytest.approx(-1.0 / 0.5j)
    red = kron_reduce(ext, model)
    assert red.edges == ()
    vr = voltage_recovery_matrix(ext)
    assert np.allclose(vr.p_mat, [[1.0]])


def test_committed_model_loads(case):
    model, _ = case
    assert model.n_gen == 2 and len(model.buses) == 3
    assert [b.id for b in model.rg_buses] == [3]
    assert model.rg_buses[0].lvrt_max == 0.85


def test_resistance_zeroed_with_warning():
    data = {"buses": [{"id": 1}, {"id": 2}],
            "branches": [{"from": 1, "to": 2, "reactance_x": 0.2, "resistance_r": 0.01}],
            "generators": [_gen(1), _gen(2)]}
    with pytest.warns(UserWarning, match="zeroed"):
        model = model_from_dict(data)
    assert model.branches[0].resistance_r == 0.0


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d["branches"][0].update(reactance_x=-0.1), "reactance"),
    (lambda d: d["generators"][0].update(m=0.0), "inertia"),
    (lambda d: d["branches"][0].update(to=9), "unknown bus"),
    (lambda d: d["buses"].append({"id": 1}), "duplicate"),
    (lambda d: d["buses"][0].update(lvrt_max=0.8), "non-RG"),
    (lambda d: d.pop("generators"), "malformed"),
])
def test_model_errors(mutate, match):
    data = {"buses": [{"id": 1}, {"id": 2}], "branches": [{"from": 1, "to": 2, "reactance_x": 0.2}],
            "generators": [_gen(1), _gen(2)]}
    mutate(data)
    with pytest.raises(ModelError, match=match):
        model_from_dict(data)


def test_model_round_trip(case, tmp_path):
    model, _ = case
    path = tmp_path / "m.json"
    path.write_text(json.dumps(model_to_dict(model)))
    assert load_model(path) == model


def test_committed_admittance_symmetric(case):
    model, scen = case
    ext = build_extended_admittance(model)
    assert ext.y_ext.shape == (5, 5)
    assert np.allclose(ext.y_ext, ext.y_ext.T)
    # lossless: purely imaginary entries
    assert np.max(np.abs(ext.y_ext.real)) < 1e-12
    # hand assembly of the generator-bus coupling
    assert ext.y_ext[0, 2] == pytest.approx(-1.0 / 0.1j)
    y12 = 1.0 / 0.3j
    assert ext.y_ext[2, 3] == pytest.approx(-y12)


def test_fault_node_has_large_shunt(case):
    model, scen = case
    vm = prefault_voltages(model)
    ext = build_extended_admittance(model, scen.fault_on_topology(), vm)
    assert ext.y_ext.shape == (6, 6)
    assert ext.node_ids[-1] == "fault"
    assert abs(ext.y_ext[-1, -1]) > 1e5
    # the faulted branch halves land on the fault node
    assert ext.y_ext[2, 5] == pytest.approx(-1.0 / (0.3j * 0.5))


def test_direct_connection_needs_no_reduction():
    model = model_from_dict({"buses": [{"id": 1}, {"id": 2}], "branches": [{"from": 1, "to": 2, "reactance_x": 0.4}],
                             "generators": [_gen(1, xd=0.3), _gen(2, xd=0.3)]})
    red = kron_reduce(build_extended_admittance(model, Topology(), {1: 1.0, 2: 1.0}), model)
    assert red.b_red[0, 1] == pytest.approx(1.0 / (0.3 + 0.4 + 0.3))


@given(st.floats(0.05, 2.0), st.floats(0.05, 2.0))
@settings(max_examples=30, deadline=None)
def test_series_chain(x1, x2):
    model = model_from_dict({"buses": [{"id": 1}, {"id": 2}, {"id": 3}],
                             "branches": [{"from": 1, "to": 3, "reactance_x": x1},
                                          {"from": 3, "to": 2, "reactance_x": x2}],
                             "generators": [_gen(1, xd=1e-3), _gen(2, xd=1e-3)]})
    red = kron_reduce(build_extended_admittance(model, Topology(), {1: 1, 2: 1, 3: 1}), model)
    assert red.b_red[0, 1] == pytest.approx(1.0 / (x1 + x2 + 2e-3), rel=1e-10)


def test_committed_kron_matches_schur(case):
    model, _ = case
    ext = build_extended_admittance(model)
    red = kron_reduce(ext, model)
    y = ext.y_ext
    schur = y[:2, :2] - y[:2, 2:] @ np.linalg.inv(y[2:, 2:]) @ y[2:, :2]
    assert np.allclose(red.b_red, schur.imag, atol=1e-12)
    assert red.b_red.shape == (2, 2) and red.b_red[0, 1] > 0


def test_lossy_reduction_rejected(case):
    model, _ = case
    vm = {1: 1.0, 2: 1.0, 3: 1.0}
    bad = model_to_dict(model)
    bad["buses"][2]["rg_p"] = 0.0  # net resistive load
    with pytest.raises(LosslessError):
        kron_reduce(build_extended_admittance(model_from_dict(bad), Topology(), vm), model)


def test_voltage_recovery_matches_phasor_solve(case):
    model, _ = case
    vm = prefault_voltages(model)
    ext = build_extended_admittance(model, Topology(), vm)
    red = kron_reduce(ext, model)
    delta = compute_sep(red)
    vr = voltage_recovery_matrix(ext, model)
    assert vr.p_mat.shape == (3, 2)
    # independent solve: all node equations with generator EMFs imposed
    e = model.e_mag * np.exp(1j * delta)
    y = ext.y_ext
    v_direct = np.linalg.solve(y[2:, 2:], -y[2:, :2] @ e)
    assert np.allclose(bus_voltages(vr, model.e_mag, delta), v_direct, atol=1e-8)
    # the fixed point reproduces its own magnitudes
    assert np.allclose(np.abs(v_direct), [vm[b] for b in model.bus_ids], atol=1e-8)
    # RG constants: C_i = E_i |p_ki|, delta_ic = angle p_ki
    c, ang = vr.rg_constants[3]
    row = vr.bus_row(3)
    assert np.allclose(c, model.e_mag * np.abs(row)) and np.allclose(ang, np.angle(row))


def _two_machine(p, b=1.0):
    return ReducedModel(np.array([[-b, b], [b, -b]]), np.ones(2), ((0, 1),), np.ones(2), np.ones(2) * 2,
                        np.array([p, -p]))


def test_sep_zero_transfer():
    assert np.allclose(compute_sep(_two_machine(0.0)), 0.0, atol=1e-12)


def test_sep_asin_half():
    ds = compute_sep(_two_machine(0.5))
    assert ds[0] - ds[1] == pytest.approx(np.arcsin(0.5), abs=1e-9)
    # COA normalized
    assert abs(ds.sum()) < 1e-12


def test_sep_current_residual(case):
    model, _ = case
    red = kron_reduce(build_extended_admittance(model), model)
    ds = compute_sep(red)
    assert np.max(np.abs(red.accelerating_power(ds))) < 1e-10


def test_sep_fails_beyond_transfer_limit():
    from lvrtcsr.netmodel import SEPError

    with pytest.raises(SEPError):
        compute_sep(_two_machine(1.5))


def test_islanded_generator_rejected():
    model = model_from_dict({"buses": [{"id": 1}, {"id": 2}], "branches": [],
                             "generators": [_gen(1), _gen(2)]})
    with pytest.raises(ModelError, match="island"):
        build_extended_admittance(model, Topology(), {1: 1.0, 2: 1.0})


@given(st.lists(st.floats(0.1, 5.0), min_size=2, max_size=6))
def test_manifold_basis_orthonormal(m):
    m = np.array(m)
    u = manifold_basis(m)
    assert u.shape == (len(m), len(m) - 1)
    assert np.allclose(u.T @ u, np.eye(len(m) - 1), atol=1e-10)
    assert np.allclose(m @ u, 0.0, atol=1e-10)
