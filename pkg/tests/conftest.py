import copy

import pytest

from fdia.grid import builtin_case, case_from_dict, solve_power_flow

TWO_BUS = {
    "base_mva": 100.0,
    "reference_bus": 1,
    "buses": [
        {"id": 1, "kind": "generator", "ps": 0.0, "qs": 0.0, "tau_p": 0.0, "tau_q": 0.0,
         "sigma_p": 0.0, "sigma_q": 0.0, "gen_inertia": 10.0, "gen_damping": 1.0, "v_set": 1.0},
        {"id": 2, "kind": "load", "ps": -0.5, "qs": -0.2, "tau_p": 5.0, "tau_q": 3.0,
         "sigma_p": 1.0, "sigma_q": 1.0},
    ],
    "lines": [{"from": 1, "to": 2, "g": 1.0, "b": -10.0}],
}

THREE_BUS = {
    "base_mva": 100.0,
    "reference_bus": 1,
    "buses": [
        {"id": 1, "kind": "generator", "ps": 0.0, "qs": 0.0, "tau_p": 0.0, "tau_q": 0.0,
         "sigma_p": 0.0, "sigma_q": 0.0, "gen_inertia": 10.0, "gen_damping": 1.0, "v_set": 1.02},
        {"id": 2, "kind": "load", "ps": -0.6, "qs": -0.25, "tau_p": 4.0, "tau_q": 2.0,
         "sigma_p": 0.5, "sigma_q": 0.5},
        {"id": 3, "kind": "load", "ps": -0.4, "qs": -0.1, "tau_p": 6.0, "tau_q": 3.0,
         "sigma_p": 0.5, "sigma_q": 0.5},
    ],
    "lines": [{"from": 1, "to": 2, "g": 1.5, "b": -12.0},
              {"from": 2, "to": 3, "g": 2.0, "b": -15.0},
              {"from": 1, "to": 3, "g": 1.0, "b": -9.0, "shunt_b": 0.02}],
}


@pytest.fixture(scope="session")
def ieee39():
    return builtin_case("ieee39")


@pytest.fixture(scope="session")
def ieee39_eq(ieee39):
    return solve_power_flow(ieee39)


@pytest.fixture
def two_bus_doc():
    return copy.deepcopy(TWO_BUS)


@pytest.fixture
def three_bus_doc():
    return copy.deepcopy(THREE_BUS)


@pytest.fixture
def two_bus():
    return case_from_dict(copy.deepcopy(TWO_BUS))


@pytest.fixture
def three_bus():
    return case_from_dict(copy.deepcopy(THREE_BUS))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def record(number: int, passed: bool, detail: str):
        line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
