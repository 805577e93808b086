"""Phase-plane data bundle for the committed scenario (thin wrapper over the CLI)."""
import sys

from lvrtcsr.cli import main
from lvrtcsr.data import CASE_FAULT, CASE_MODEL

if __name__ == "__main__":
    extra = sys.argv[1:] or ["--out", "out/plotdata", "--grid", "201x201"]
    sys.exit(main(["plotdata", "--model", str(CASE_MODEL), "--scenario", str(CASE_FAULT), *extra]))
