"""Shared fixtures: frozen testbeds, datasets, and finite-difference helpers."""

import numpy as np
import pytest

from stackmbrl.models import CategoricalWorldModel, mle_fit, sample_offline_dataset
from stackmbrl.testbeds import gradient_testbed, small_testbed, sparse_reward_testbed


@pytest.fixture(scope="session")
def grad_triple():
    """(mdp, policy, model) with dense generic tables; session-frozen."""
    return gradient_testbed()


@pytest.fixture(scope="session")
def small_triple():
    return small_testbed()


@pytest.fixture(scope="session")
def sparse_triple():
    return sparse_reward_testbed()


@pytest.fixture(scope="session")
def grad_dataset(grad_triple):
    """Offline dataset + smoothed MLE anchor on the dense testbed."""
    mdp, _, _ = grad_triple
    dataset = sample_offline_dataset(mdp, "uniform", n=300, seed=0)
    anchor = mle_fit(dataset, CategoricalWorldModel.uniform(mdp), alpha=0.5)
    return dataset, anchor


@pytest.fixture(scope="session")
def small_dataset(small_triple):
    mdp, _, _ = small_triple
    dataset = sample_offline_dataset(mdp, "uniform", n=200, seed=3)
    anchor = mle_fit(dataset, CategoricalWorldModel.uniform(mdp), alpha=0.5)
    return dataset, anchor


def fd_jacobian(fn, x, eps=1e-5):
    """Central finite-difference Jacobian of a vector-valued function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += eps
        down[i] -= eps
        cols.append((np.asarray(fn(up)) - np.asarray(fn(down))) / (2 * eps))
    return np.stack(cols, axis=-1)


class ScriptedRng:
    """Deterministic stand-in for a Generator: replays queued picks.

    ``integers`` pops one queued array per call; ``choice`` pops one queued
    index per call (the probability argument is ignored, which is exactly
    the point: enumeration tests weight each scripted outcome themselves).
    """

    def __init__(self, integer_queue=(), choice_queue=()):
        self._integers = [np.asarray(q, dtype=np.int64) for q in integer_queue]
        self._choices = list(choice_queue)

    def integers(self, low, high=None, size=None):
        out = self._integers.pop(0)
        if size is not None and out.shape != ((size,) if np.isscalar(size) else tuple(size)):
            raise AssertionError(f"scripted integers shape {out.shape} != {size}")
        return out

    def choice(self, n, p=None):
        return self._choices.pop(0)
