"""Randomized lossless test systems for property checks and experiment scripts."""
from __future__ import annotations

import numpy as np

from .netmodel import ReducedModel, SEPError, compute_sep, model_from_dict


def random_reduced_model(rng: np.random.Generator, n: int, density: float = 1.0,
                         max_tries: int = 50) -> tuple[ReducedModel, np.ndarray]:
    """A connected n-machine reduced model with uniform damping and a stable SEP.

    Returns the model and its COA-frame SEP. Transfers are kept moderate so
    that the SEP sits well inside the |delta_kj| < pi/2 box.
    """
    for _ in range(max_tries):
        m = rng.uniform(0.1, 1.0, n)
        lam = rng.uniform(0.5, 3.0)
        e = rng.uniform(0.95, 1.1, n)
        b = np.zeros((n, n))
        # spanning path plus random chords keeps the graph connected
        order = rng.permutation(n)
        for a, c in zip(order[:-1], order[1:]):
            b[a, c] = b[c, a] = rng.uniform(1.0, 4.0)
        for a in range(n):
            for c in range(a + 1, n):
                if b[a, c] == 0.0 and rng.random() < density:
                    b[a, c] = b[c, a] = rng.uniform(0.5, 3.0)
        edges = tuple((a, c) for a in range(n) for c in range(a + 1, n) if b[a, c] > 0)
        np.fill_diagonal(b, -b.sum(axis=1))
        p = rng.uniform(-1.0, 1.0, n)
        p -= p.mean()
        p *= rng.uniform(0.1, 0.5) * min(b[a, c] for a, c in edges) / max(np.max(np.abs(p)), 1e-12)
        red = ReducedModel(b, e, edges, m, lam * m, p)
        try:
            ds = compute_sep(red)
        except SEPError:
            continue
        if all(abs(ds[a] - ds[c]) < 0.6 * np.pi / 2 for a, c in edges):
            return red, ds
    raise RuntimeError("could not draw a system with a well-interior SEP")


def ring_network_dict(n: int, rg_bus: bool = True, p_scale: float = 0.3) -> dict:
    """n generator buses on a ring, plus an RG bus tapped between buses 1 and 2."""
    gens = []
    p = np.linspace(1.0, -1.0, n) * p_scale
    for k in range(n):
        m = 0.2 + 0.1 * k
        gens.append({"bus": k + 1, "m": m, "d": 2.0 * m, "xd_prime": 0.1, "e_mag": 1.0 + 0.02 * (k % 2),
                     "p_m": float(p[k])})
    buses = [{"id": k + 1} for k in range(n)]
    branches = [{"id": k, "from": k + 1, "to": (k + 1) % n + 1, "reactance_x": 0.3} for k in range(n)]
    if rg_bus:
        rid = n + 1
        buses.append({"id": rid, "load_p": 0.3, "load_q": 0.1, "is_rg": True, "rg_p": 0.3, "rg_q": 0.1,
                      "lvrt_max": 0.85})
        branches += [{"id": n, "from": 1, "to": rid, "reactance_x": 0.15},
                     {"id": n + 1, "from": rid, "to": 2, "reactance_x": 0.15}]
    return {"base_mva": 100, "buses": buses, "branches": branches, "generators": gens}


def ring_network(n: int, rg_bus: bool = True, p_scale: float = 0.3):
    return model_from_dict(ring_network_dict(n, rg_bus, p_scale))


def scaled_dispatch(model, factor: float):
    """Copy of ``model`` with every mechanical power multiplied by ``factor``."""
    from .netmodel import model_to_dict

    d = model_to_dict(model)
    for g in d["generators"]:
        g["p_m"] *= factor
    return model_from_dict(d)


def perturbed_variants(model, scenario) -> list:
    """(name, model, scenario) perturbations of a base case used for CCT checks."""
    from dataclasses import replace

    return [
        ("fault-location-0.25", model, replace(scenario, fault_location=0.25)),
        ("fault-location-0.8", model, replace(scenario, fault_location=0.8)),
        ("restore-on-clearing", model, replace(scenario, clearing_action="restore")),
        ("dispatch-0.9", scaled_dispatch(model, 0.9), scenario),
        ("fault-on-branch-1", model, replace(scenario, faulted_branch=1)),
    ]
