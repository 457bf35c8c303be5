import numpy as np
import pytest

from plmfusion.simulation import generate_case, true_theta_oracle


@pytest.fixture(scope="session")
def case_one_200():
    return generate_case("I", 200, np.random.default_rng(20240601))


@pytest.fixture(scope="session")
def case_one_500():
    return generate_case("I", 500, np.random.default_rng(777))


@pytest.fixture(scope="session")
def oracle_case_one():
    return true_theta_oracle("I", 1_000_000, seed=0)


def wls_hat_row(z, point, b, kernel):
    """Reference local-linear row by explicit weighted least squares."""
    w = np.array([kernel((zi - point) / b) / b for zi in z])
    D = np.column_stack([np.ones_like(z), z - point])
    return np.linalg.solve(D.T @ (w[:, None] * D), D.T * w)[0]


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {title} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
