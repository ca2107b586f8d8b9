import numpy as np
import pytest

from ocgeom.problems import load_example
from ocgeom.pontryagin import build_hamiltonian

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def examples():
    return {name: load_example(name) for name in
            ("train", "bang_bang", "u_squared", "u_cubed", "overactuated", "toy_tilde_c")}


@pytest.fixture
def train():
    return load_example("train")


@pytest.fixture
def train_h(train):
    return build_hamiltonian(train)


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, shown in the terminal summary."""

    def record(number: int, title: str, checks: dict, detail: str = "") -> bool:
        ok = all(bool(v) for v in checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        if failed:
            line += "  [failed: " + "; ".join(failed) + "]"
        if detail:
            line += f"  ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
