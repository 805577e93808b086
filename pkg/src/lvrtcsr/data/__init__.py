"""Committed desk-scale scenario."""
from pathlib import Path

DATA_DIR = Path(__file__).resolve().parent
CASE_MODEL = DATA_DIR / "case_2m3b.json"
CASE_FAULT = DATA_DIR / "case_2m3b_fault.json"


def load_case():
    from ..dynamics import FaultScenario
    from ..netmodel import load_model

    return load_model(CASE_MODEL), FaultScenario.load(CASE_FAULT)
