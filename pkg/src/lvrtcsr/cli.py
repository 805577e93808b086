"""Command-line front end: ``lvrtcsr <command> [flags]``.

Exit codes: 0 stable / success, 2 not certified, 3 soundness violation, 1 error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .io import dump_json

log = logging.getLogger("lvrtcsr")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CERTIFIED, EXIT_UNSOUND = 0, 1, 2, 3


@dataclass(frozen=True)
class RunConfig:
    model: Path
    scenario: Path | None = None
    n_line: int = 2
    dv: float | None = None
    seed: int = 0
    out: Path = Path("out")
    jobs: int = 1
    grid: tuple = (201, 201)
    horizon: float = 20.0
    clearing_time: float | None = None
    estimate: Path | None = None
    max_refinements: int = 5

    def __post_init__(self):
        if not Path(self.model).is_file():
            raise FileNotFoundError(f"model file not found: {self.model}")
        if self.scenario is not None and not Path(self.scenario).is_file():
            raise FileNotFoundError(f"scenario file not found: {self.scenario}")
        for name in ("n_line", "jobs", "horizon", "max_refinements"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dv is not None and self.dv <= 0:
            raise ValueError("dv must be positive")
        if any(g < 2 for g in self.grid):
            raise ValueError("grid needs at least 2 points per axis")


def _parse_grid(text: str) -> tuple:
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 201x201, got {text!r}") from None
    if len(parts) < 2:
        raise argparse.ArgumentTypeError("grid needs at least two axes")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, type=Path, help="network model JSON")
    common.add_argument("--scenario", type=Path, help="fault scenario JSON")
    common.add_argument("--nline", type=int, default=2, help="lines per cosine term in the PWL fit")
    common.add_argument("--dv", type=float, default=None, help="level-set search step (default v_ref/200)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("--jobs", type=int, default=1, help="worker processes for the oracle")
    common.add_argument("--grid", type=_parse_grid, default=(201, 201), help="oracle grid, e.g. 201x201")
    common.add_argument("--horizon", type=float, default=20.0, help="oracle simulation horizon (s)")
    common.add_argument("--clearing-time", type=float, default=None, help="override the scenario clearing time")
    common.add_argument("--estimate", type=Path, default=None, help="audit this estimate JSON instead of computing one")
    common.add_argument("--max-refinements", type=int, default=5)

    parser = argparse.ArgumentParser(prog="lvrtcsr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("sep", "pre- and post-fault equilibria"),
        ("polytope", "LVRT constraints, PWL fits and the feasibility polytope"),
        ("lff", "energy and LMI Lyapunov candidates"),
        ("estimate", "CSR estimate for the fault-cleared state"),
        ("assess", "fault assessment with estimated CCT"),
        ("oracle", "brute-force CSR grid and audit of the estimate"),
        ("plotdata", "data behind the phase-plane figures"),
    ]:
        sub.add_parser(name, parents=[common], help=text)
    return parser


def config_from_args(args) -> RunConfig:
    return RunConfig(
        model=args.model,
        scenario=args.scenario,
        n_line=args.nline,
        dv=args.dv,
        seed=args.seed,
        out=args.out,
        jobs=args.jobs,
        grid=args.grid,
        horizon=args.horizon,
        clearing_time=args.clearing_time,
        estimate=args.estimate,
        max_refinements=args.max_refinements,
    )


# ---------------------------------------------------------------- helpers


def _load(cfg: RunConfig, need_scenario: bool = True):
    from .dynamics import FaultScenario
    from .netmodel import load_model

    model = load_model(cfg.model)
    scen = None
    if cfg.scenario is not None:
        scen = FaultScenario.load(cfg.scenario)
    elif need_scenario:
        raise ValueError("--scenario is required for this command")
    if scen is not None and cfg.clearing_time is not None:
        scen = replace(scen, clearing_time=cfg.clearing_time)
    return model, scen


def _problem(cfg: RunConfig):
    from .csr import build_problem

    model, scen = _load(cfg)
    return build_problem(model, scen, cfg.n_line, cfg.seed)


def _search_config(cfg: RunConfig):
    from .lff import LFSearchConfig

    return LFSearchConfig(max_refinements=cfg.max_refinements)


def _simulate_and_save(problem, x0, horizon, path):
    from .dynamics import simulate

    traj = simulate(x0, problem.mats, horizon, monitor=problem.monitor)
    traj.to_csv(path)
    return traj


def _fault_on_csv(problem, clearing_time, path):
    from .dynamics import Trajectory

    times, states = problem.system.fault_on_trajectory(clearing_time)
    lv, pi = problem.monitor(states)
    Trajectory(times, states, lv, pi).to_csv(path)


# ---------------------------------------------------------------- commands


def cmd_sep(cfg: RunConfig) -> int:
    from .dynamics import FaultSystem
    from .netmodel import prefault_sep, sep_eigenvalues

    model, scen = _load(cfg, need_scenario=False)
    out = {"prefault_sep": prefault_sep(model).tolist()}
    if scen is not None:
        sys_ = FaultSystem.build(model, scen)
        out.update(
            postfault_sep=sys_.post_sep.tolist(),
            postfault_eigenvalues=np.real_if_close(sep_eigenvalues(sys_.post, sys_.post_sep)).real.tolist(),
            scenario=scen.to_dict(),
        )
    dump_json(out, cfg.out / "sep.json")
    return EXIT_OK


def cmd_polytope(cfg: RunConfig) -> int:
    problem = _problem(cfg)
    problem.polytope.save(cfg.out / "polytope.json")
    cons = [
        {"rg_bus": c.rg_bus, "lvrt_max": c.lvrt_max, "threshold": c.threshold,
         "terms": [{"pair": list(t.pair), "amplitude": t.amplitude, "phase": t.phase} for t in c.terms]}
        for c in problem.constraints
    ]
    dump_json({"constraints": cons}, cfg.out / "lvrt_constraints.json")
    for (bus, pair), fit in problem.fits.items():
        fit.to_csv(cfg.out / f"pwl_bus{bus}_pair{pair[0]}-{pair[1]}.csv")
    return EXIT_OK


def cmd_lff(cfg: RunConfig) -> int:
    from .dynamics import fault_state
    from .lff import assemble_and_solve_lmi, energy_function_candidate, lmi_residual

    problem = _problem(cfg)
    energy = energy_function_candidate(problem.system.post, problem.mats.delta_star)
    energy.save(cfg.out / "lff_energy.json")
    x0 = fault_state(problem.scenario, problem.model, problem.system)
    lmi = assemble_and_solve_lmi(problem.mats, x0, _search_config(cfg))
    lmi.save(cfg.out / "lff_lmi.json")
    dump_json(
        {"energy_residual": lmi_residual(energy, problem.mats), "lmi_residual": lmi_residual(lmi, problem.mats)},
        cfg.out / "lff_residuals.json",
    )
    return EXIT_OK


def cmd_estimate(cfg: RunConfig) -> int:
    from .csr import contains, estimate_csr
    from .dynamics import fault_state

    problem = _problem(cfg)
    x0 = fault_state(problem.scenario, problem.model, problem.system)
    est = estimate_csr(problem, x0, _search_config(cfg), dv=cfg.dv)
    est.save(cfg.out / "estimate.json")
    return EXIT_OK if contains(est, x0) else EXIT_NOT_CERTIFIED


def cmd_assess(cfg: RunConfig) -> int:
    from .csr import assess_fault

    problem = _problem(cfg)
    res = assess_fault(problem, _search_config(cfg), dv=cfg.dv)
    dump_json(res.report(), cfg.out / "assessment.json")
    res.estimate.save(cfg.out / "estimate.json")
    _fault_on_csv(problem, problem.scenario.clearing_time, cfg.out / "trajectory_faulton.csv")
    _simulate_and_save(problem, res.x0, cfg.horizon, cfg.out / "trajectory_postfault.csv")
    print(f"verdict: {res.verdict}  V(x0)={res.v_at_clearing:.6g}  v_max={res.v_max:.6g}  "
          f"estimated_cct={res.estimated_cct}")
    return EXIT_OK if res.verdict == "stable" else EXIT_NOT_CERTIFIED


def _estimate_for(cfg, problem):
    from .csr import CSREstimate, estimate_csr
    from .dynamics import fault_state

    if cfg.estimate is not None:
        return CSREstimate.load(cfg.estimate)
    x0 = fault_state(problem.scenario, problem.model, problem.system)
    return estimate_csr(problem, x0, _search_config(cfg), dv=cfg.dv)


def cmd_oracle(cfg: RunConfig) -> int:
    from .oracle import GridSpec, audit_estimate, brute_force_csr

    problem = _problem(cfg)
    est = _estimate_for(cfg, problem)
    grid = brute_force_csr(problem.mats, problem.monitor, GridSpec(cfg.grid, horizon=cfg.horizon), jobs=cfg.jobs)
    grid.to_csv(cfg.out / "oracle_grid.csv")
    audit = audit_estimate(est, grid)
    report = audit.to_dict()
    report["counts"] = grid.counts()
    dump_json(report, cfg.out / "audit.json")
    print(f"soundness violations: {audit.soundness_violations}  coverage: {audit.coverage:.4f}")
    return EXIT_UNSOUND if audit.soundness_violations else EXIT_OK


def cmd_plotdata(cfg: RunConfig) -> int:
    from . import plotdata

    problem = _problem(cfg)
    plotdata.emit(problem, cfg, _estimate_for(cfg, problem))
    return EXIT_OK


COMMANDS = {
    "sep": cmd_sep,
    "polytope": cmd_polytope,
    "lff": cmd_lff,
    "estimate": cmd_estimate,
    "assess": cmd_assess,
    "oracle": cmd_oracle,
    "plotdata": cmd_plotdata,
}


def _setup_logging():
    level = os.environ.get("LVRTCSR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg)
    except Exception as exc:  # every pipeline failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"lvrtcsr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
