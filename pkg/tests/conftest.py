import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ldr_expand.deterministic import solve_deterministic  # noqa: E402
from ldr_expand.instances import load_instance  # noqa: E402
from ldr_expand.ldr import plan_values, policy_from_values, solve_primal_ldr  # noqa: E402
from ldr_expand.model import baseline_parameters  # noqa: E402
from ldr_expand.structure import build_structure  # noqa: E402


@pytest.fixture(scope="session")
def desk4():
    return load_instance("desk4")


@pytest.fixture(scope="session")
def desk4_structure(desk4):
    return build_structure(desk4.system, desk4.uncertainty)


@pytest.fixture(scope="session")
def desk4_det(desk4):
    return solve_deterministic(desk4.system, baseline_parameters(desk4.uncertainty))


@pytest.fixture(scope="session")
def desk4_det_policy(desk4_structure, desk4_det):
    return policy_from_values(desk4_structure, plan_values(desk4_structure, desk4_det), desk4_det.objective)


@pytest.fixture(scope="session")
def desk4_dro(desk4, desk4_structure):
    return solve_primal_ldr(desk4.with_risk(mode="dro"), structure=desk4_structure)


@pytest.fixture(scope="session")
def desk4_normal(desk4, desk4_structure):
    return solve_primal_ldr(desk4.with_risk(mode="normal"), structure=desk4_structure)


@pytest.fixture(scope="session")
def micro3():
    return load_instance("micro3")


@pytest.fixture(scope="session")
def micro3_dro(micro3):
    return solve_primal_ldr(micro3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
