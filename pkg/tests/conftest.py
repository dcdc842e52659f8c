import pytest

from harqsim import FblPlanner


@pytest.fixture(scope="session")
def plan_cache_dir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("plan_cache"))


@pytest.fixture(scope="session")
def default_planner(plan_cache_dir):
    # default operating point: L=2, R=1, K=50, eps_tar 1e-5, eps_drop 1e-6;
    # built once per session, curve construction dominates the cost
    return FblPlanner(2, 1.0, 50, 1e-5, 1e-6, cache_dir=plan_cache_dir)
