"""End-to-end case study on the committed two-machine scenario.

Energy estimate vs refined estimate, estimated and true CCT, and an oracle audit.
Writes a JSON summary plus the estimate files into --out.
"""
import argparse
import time
from pathlib import Path

from lvrtcsr.csr import CSREstimate, assess_fault, build_problem, contains, expand_level_set
from lvrtcsr.data import load_case
from lvrtcsr.io import dump_json
from lvrtcsr.lff import energy_function_candidate, evaluate_v
from lvrtcsr.oracle import GridSpec, audit_estimate, brute_force_csr, classify_states, coa_to_relative, true_cct


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("out/case_study"))
    ap.add_argument("--grid", type=int, default=201, help="oracle grid points per axis")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    model, scen = load_case()
    problem = build_problem(model, scen)
    mats = problem.mats
    t0 = time.perf_counter()
    res = assess_fault(problem)
    t_assess = time.perf_counter() - t0

    energy = energy_function_candidate(problem.system.post, mats.delta_star)
    exp = expand_level_set(energy, problem.polytope, mats.m)
    energy_est = CSREstimate(energy, exp.v_max, problem.polytope, mats.m)
    x0 = res.x0

    t0 = time.perf_counter()
    tc = true_cct(problem)
    t_cct = time.perf_counter() - t0
    t0 = time.perf_counter()
    grid = brute_force_csr(mats, problem.monitor, GridSpec((args.grid, args.grid)), jobs=args.jobs)
    t_grid = time.perf_counter() - t0

    summary = {
        "x0_relative": coa_to_relative(x0, mats.m).tolist(),
        "oracle_class_x0": int(classify_states(x0[None], mats, problem.monitor)[0]),
        "energy": {"v_max": exp.v_max, "v_x0": float(evaluate_v(energy, x0)),
                   "contains_x0": bool(contains(energy_est, x0)),
                   "audit": audit_estimate(energy_est, grid).to_dict()},
        "refined": {**{k: v for k, v in res.report().items() if k != "history"},
                    "audit": audit_estimate(res.estimate, grid).to_dict()},
        "true_cct": tc,
        "oracle_counts": grid.counts(),
        "seconds": {"assess": t_assess, "true_cct": t_cct, "oracle_grid": t_grid},
    }
    dump_json(summary, args.out / "case_study.json")
    res.estimate.save(args.out / "estimate_refined.json")
    energy_est.save(args.out / "estimate_energy.json")
    grid.to_csv(args.out / "oracle_grid.csv")
    print(f"energy contains x0: {summary['energy']['contains_x0']}  refined verdict: {res.verdict}")
    print(f"estimated CCT {res.estimated_cct}  true CCT {tc:.4f}")
    print(f"audit violations: energy {summary['energy']['audit']['soundness_violations']}, "
          f"refined {summary['refined']['audit']['soundness_violations']}")


if __name__ == "__main__":
    main()
