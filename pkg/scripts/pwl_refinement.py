"""PWL lower-bound quality versus the number of lines, over a range of phases."""
import argparse
from pathlib import Path

import numpy as np

from lvrtcsr.feasreg import PWLFitError, fit_pwl_lower
from lvrtcsr.io import dump_json


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("out/pwl_refinement.json"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    phases = np.linspace(-np.pi, np.pi, 13)
    rows = []
    for ph in phases:
        row = {"phase": float(ph)}
        for n_line in (1, 2, 4, 8):
            try:
                fit = fit_pwl_lower(float(ph), n_line, seed=args.seed)
                row[f"n{n_line}"] = {"objective": fit.objective, "max_violation": fit.max_violation(),
                                     "repaired": fit.repaired}
            except PWLFitError:
                row[f"n{n_line}"] = None
        rows.append(row)
        cells = [f"{row[f'n{k}']['objective']:.4g}" if row[f"n{k}"] else "infeasible" for k in (1, 2, 4, 8)]
        print(f"phase {ph:+.3f}: " + "  ".join(cells))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dump_json({"fits": rows}, args.out)


if __name__ == "__main__":
    main()
