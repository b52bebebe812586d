import json
from pathlib import Path

import pytest

from drs_trainer import load_plan, load_samples

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def plan():
    return load_plan(FIXTURES / "plan_default.json")


@pytest.fixture(scope="session")
def samples():
    return load_samples(FIXTURES / "artifacts.jsonl")


@pytest.fixture(scope="session")
def nll_cases():
    cases = []
    with open(FIXTURES / "nll_cases.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                cases.append(json.loads(line))
    return cases
