import numpy as np
import pytest

from rlvr_lab import envs, kernels
from rlvr_lab import policy as pol

SMALL = envs.SuiteConfig(n_problems=12, n_skills=6, vocab_size=5, max_len=3, feature_dim=4)


@pytest.fixture(scope="session")
def small_suite():
    return envs.make_suite(SMALL, seed=3)


@pytest.fixture(scope="session")
def small_base(small_suite):
    base, _ = envs.pretrain_base(small_suite.new_policy(), small_suite, 200, seed=0, min_margin=float("-inf"))
    return base


@pytest.fixture(scope="session")
def default_suite():
    return envs.make_suite(envs.SuiteConfig(), seed=0)


def random_sequence_policy(seed, d=3, V=4, T=3, scale=1.0):
    rng = np.random.default_rng(seed)
    p = pol.SoftmaxPolicy.sequence(d, V, T)
    return p.with_params(scale * rng.standard_normal(p.params.shape)), rng.standard_normal(d)


@pytest.fixture(params=kernels.available_backends())
def each_backend(request):
    with kernels.using(request.param):
        yield request.param



# one line per acceptance criterion, printed after the run
_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
