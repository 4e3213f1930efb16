import os
from pathlib import Path

import numpy as np
import pytest

from mphpe import _kernels

BACKENDS = _kernels.available_backends()


@pytest.fixture(params=sorted(BACKENDS))
def kernel_impl(request):
    return BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory) -> Path:
    """Persistent cache for expensive artifacts (override with MPHPE_TEST_CACHE)."""
    env = os.environ.get("MPHPE_TEST_CACHE")
    if env:
        p = Path(env)
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("cache")


@pytest.fixture(scope="session")
def tiny_bench(tmp_path_factory):
    """Eight training and four validation images rendered once per session."""
    from mphpe.synthgen import SceneSpec, generate_benchmark

    out = tmp_path_factory.mktemp("tiny_bench")
    return generate_benchmark(SceneSpec(seed=3), (8, 4), out)


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    name = mark.args[0]
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA[name] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _CRITERIA.items():
        terminalreporter.write_line(f"{status:4}  {name}" + (f"  [{detail}]" if detail else ""))
