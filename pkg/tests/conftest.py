import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from opebounds.mdp import MarkovDecisionProcess, MarkovTransitionModel, Policy
from opebounds.offline import OfflineDistribution

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_mtm(rng, H=3, sizes=None, A=2, sparse=False):
    sizes = tuple(sizes) if sizes is not None else tuple(int(s) for s in rng.integers(1, 4, size=H))
    trans = []
    for h in range(len(sizes) - 1):
        t = rng.dirichlet(np.ones(sizes[h + 1]), size=(sizes[h], A))
        if sparse:
            t = np.where(rng.random(t.shape) < 0.3, 0.0, t)
            t[..., 0] += 1e-3
            t /= t.sum(axis=-1, keepdims=True)
        trans.append(t)
    return MarkovTransitionModel(sizes, A, tuple(trans), rng.dirichlet(np.ones(sizes[0])))


def random_mdp(rng, H=3, sizes=None, A=2, zero_last=False):
    mtm = random_mtm(rng, H, sizes, A)
    means = [rng.uniform(-0.5, 0.5, (s, A)) for s in mtm.layer_sizes]
    if zero_last:
        means[-1][:] = 0.0
    return MarkovDecisionProcess.with_mean_rewards(mtm, means, plus_minus=True)


def random_policy(rng, sizes, A, deterministic=False):
    if deterministic:
        return Policy.from_actions([rng.integers(0, A, size=s) for s in sizes], A)
    return Policy(tuple(rng.dirichlet(np.ones(A), size=s) for s in sizes))


def random_offline(rng, sizes, A, layers=None):
    layers = len(sizes) - 1 if layers is None else layers
    return OfflineDistribution(tuple(rng.dirichlet(np.ones(sizes[h] * A)).reshape(sizes[h], A)
                                     for h in range(layers)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
