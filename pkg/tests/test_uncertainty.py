"""Tests for the uncertainty radii, set membership, and coverage rates."""

import json
import math

import numpy as np
import pytest

from stackmbrl.mdp import TabularMdp
from stackmbrl.models import (CategoricalWorldModel, DiagGaussianWorldModel,
                              OfflineDataset, mle_fit)
from stackmbrl.testbeds import small_mdp
from stackmbrl.uncertainty import (GROWTH_COEF, LEADING_COEF,
                                   MIN_COVERAGE_TRIALS, CoverageReport,
                                   coverage_check, dataset_tv_squared,
                                   epsilon_gaussian, epsilon_tabular,
                                   gaussian_cell_bound, kl_to_anchor,
                                   tabular_radius_value)

# radius for 4 cells, 100 transitions, alphabet 3, largest cell 30, delta 0.1,
# frozen from an independent evaluation of the closed-form expression
RADIUS_EXAMPLE = 0.47016980802282227

KL_EXAMPLE = 0.14384103622589042  # KL((.5,.5) || (.25,.75))


def counts_dataset(counts: dict) -> OfflineDataset:
    """Tabular dataset realizing the given {(s, a): count} occupancy."""
    states, actions = [], []
    for (s, a), count in counts.items():
        states += [s] * count
        actions += [a] * count
    n = len(states)
    return OfflineDataset(states=np.array(states), actions=np.array(actions),
                          rewards=np.zeros(n), next_states=np.zeros(n, dtype=int))


def equal_cells_dataset(n_per_cell: int, n_cells: int) -> OfflineDataset:
    """Continuous dataset with ``n_cells`` distinct (s, a) vectors, each
    repeated ``n_per_cell`` times."""
    states = np.repeat(np.arange(n_cells, dtype=float)[:, None], n_per_cell,
                       axis=0)
    actions = np.zeros_like(states)
    n = n_per_cell * n_cells
    return OfflineDataset(states=states, actions=actions, rewards=np.zeros(n),
                          next_states=states.copy())


def single_cell_pair():
    """One categorical cell: anchor (.5, .5) against model (.25, .75)."""
    anchor = CategoricalWorldModel(np.log([[[0.5, 0.5]]]),
                                   np.array([0.0, 1.0]), np.array([0, 0]))
    model = CategoricalWorldModel(np.log([[[0.25, 0.75]]]),
                                  np.array([0.0, 1.0]), np.array([0, 0]))
    dataset = OfflineDataset(states=np.array([0, 0]), actions=np.array([0, 0]),
                             rewards=np.array([0.0, 1.0]),
                             next_states=np.array([0, 0]))
    return anchor, model, dataset


# ---------------------------------------------------------------------------
# tabular radius
# ---------------------------------------------------------------------------


def test_tabular_radius_frozen_value():
    """The closed form reproduces an independently evaluated instance."""
    independent = (4 / 100) * math.log(
        2.0 * 2.93 * 3 * (3.20 * 30 / 3) ** 1.5 * 4 / 0.1)
    assert independent == RADIUS_EXAMPLE
    assert tabular_radius_value(4, 100, 3, 30, 0.1) == RADIUS_EXAMPLE


def test_epsilon_tabular_reads_counts_from_dataset():
    dataset = counts_dataset({(0, 0): 30, (0, 1): 30, (1, 0): 25, (1, 1): 15})
    assert dataset.n == 100
    assert dataset.max_cell_count() == 30
    assert epsilon_tabular(dataset, 3, 0.1) == RADIUS_EXAMPLE


def test_tabular_radius_monotonicity():
    """Radius shrinks with more data, grows with the largest cell and with a
    tighter confidence level."""
    base = tabular_radius_value(4, 100, 3, 30, 0.1)
    assert tabular_radius_value(4, 200, 3, 30, 0.1) < base
    assert tabular_radius_value(4, 100, 3, 60, 0.1) > base
    assert tabular_radius_value(4, 100, 3, 30, 0.01) > base
    assert tabular_radius_value(4, 100, 3, 30, 0.999) < tabular_radius_value(
        4, 100, 3, 30, 0.01)
    assert tabular_radius_value(8, 100, 3, 30, 0.1) > base


def test_small_alphabet_rejected():
    dataset = counts_dataset({(0, 0): 50})
    with pytest.raises(ValueError, match="< 3"):
        epsilon_tabular(dataset, 2, 0.1)


def test_validity_window_lists_offending_cells():
    """A one-sample cell caps the usable alphabet at 1*3.20/e + 2 < 4."""
    dataset = counts_dataset({(0, 0): 50, (1, 1): 1})
    assert 4 > 1 * GROWTH_COEF / math.e + 2.0
    with pytest.raises(ValueError, match=r"\(1, 1\)") as excinfo:
        epsilon_tabular(dataset, 4, 0.1)
    assert "window K <=" in str(excinfo.value)
    assert "(0, 0)" not in str(excinfo.value)
    # a larger alphabet trips the well-sampled cell too
    with pytest.raises(ValueError, match=r"2 cell\(s\)"):
        epsilon_tabular(dataset, 80, 0.1)


@pytest.mark.parametrize("delta", [0.0, 1.0, -0.2, 1.7])
def test_delta_outside_unit_interval_rejected(delta):
    dataset = counts_dataset({(0, 0): 50})
    with pytest.raises(ValueError, match="delta"):
        tabular_radius_value(4, 100, 3, 30, delta)
    with pytest.raises(ValueError, match="delta"):
        epsilon_tabular(dataset, 3, delta)
    with pytest.raises(ValueError, match="delta"):
        epsilon_gaussian(equal_cells_dataset(10, 1), 1, delta)


# ---------------------------------------------------------------------------
# Gaussian radius
# ---------------------------------------------------------------------------


def test_gaussian_cell_bound_needs_two_samples():
    with pytest.raises(ValueError, match="at least two samples"):
        gaussian_cell_bound(1, 0.1)


def test_gaussian_cell_bound_vacuous_for_tiny_cells():
    """The variance-ratio window only has a positive lower endpoint once
    n > 1 + 4 log(4/delta')."""
    with pytest.raises(ValueError, match="not positive"):
        gaussian_cell_bound(10, 0.05)
    assert 19 > 1 + 4 * math.log(4 / 0.05)
    assert gaussian_cell_bound(19, 0.05) > 0.0


def test_gaussian_cell_bound_decreasing_in_cell_count():
    for delta_prime, start in [(0.8, 8), (0.05, 19)]:
        values = [gaussian_cell_bound(n, delta_prime)
                  for n in range(start, 501)]
        assert all(b < a for a, b in zip(values, values[1:]))


def test_epsilon_gaussian_equal_cells_closed_form():
    """With equal cell counts the radius collapses to a single per-cell
    bound scaled by the output dimension."""
    dataset = equal_cells_dataset(400, 3)
    state_dim = 2
    out_dim = state_dim + 1
    delta_prime = 0.1 / (2 * 3 * out_dim)
    expected = out_dim * gaussian_cell_bound(400, delta_prime)
    assert epsilon_gaussian(dataset, state_dim, 0.1) == pytest.approx(
        expected, rel=1e-12)


def test_epsilon_gaussian_dimension_scaling_envelope():
    """Measured growth across doubled state dimension stays below 1.2x the
    advertised quadratic-rate ratio and above the linear-rate ratio."""
    dataset = equal_cells_dataset(10_000, 3)
    for d in (1, 2, 4, 8):
        lo = epsilon_gaussian(dataset, d, 0.1)
        hi = epsilon_gaussian(dataset, 2 * d, 0.1)
        measured = hi / lo
        quadratic = ((2 * d) ** 2 * math.log(3 * 2 * d / 0.1)) / (
            d ** 2 * math.log(3 * d / 0.1))
        assert measured <= 1.2 * quadratic
        assert measured > (2 * d + 1) / (d + 1)


def test_epsilon_gaussian_reward_only():
    """state_dim=0 is the one-dimensional (reward only) bound."""
    dataset = equal_cells_dataset(200, 2)
    value = epsilon_gaussian(dataset, 0, 0.2)
    assert math.isfinite(value) and value > 0.0
    assert value == pytest.approx(gaussian_cell_bound(200, 0.2 / 4), rel=1e-12)


def test_epsilon_gaussian_names_bad_cell():
    states = np.concatenate([np.zeros((40, 1)), np.ones((1, 1))])
    dataset = OfflineDataset(states=states, actions=np.zeros((41, 1)),
                             rewards=np.zeros(41),
                             next_states=np.zeros((41, 1)))
    with pytest.raises(ValueError, match="at least two samples") as excinfo:
        epsilon_gaussian(dataset, 1, 0.1)
    assert "cell ((1.0,), (0.0,))" in str(excinfo.value)
    with pytest.raises(ValueError, match="state_dim"):
        epsilon_gaussian(dataset, -1, 0.1)


# ---------------------------------------------------------------------------
# membership statistic
# ---------------------------------------------------------------------------


def test_kl_to_anchor_zero_exactly_at_anchor(small_dataset):
    dataset, anchor = small_dataset
    assert kl_to_anchor(dataset, anchor, anchor) <= 1e-12
    # a constant logit shift is a gauge move and must keep the KL at zero
    gauge = anchor.with_params(anchor.params.values + 0.05)
    assert kl_to_anchor(dataset, gauge, anchor) <= 1e-12
    bump = np.zeros(anchor.n_params)
    bump[0] = 0.05
    assert kl_to_anchor(dataset, anchor.with_params(
        anchor.params.values + bump), anchor) > 1e-5


def test_kl_to_anchor_single_cell_example():
    anchor, model, dataset = single_cell_pair()
    assert kl_to_anchor(dataset, model, anchor) == pytest.approx(
        KL_EXAMPLE, abs=1e-12)


def test_kl_to_anchor_layout_mismatch_rejected(small_dataset):
    dataset, anchor = small_dataset
    gaussian = DiagGaussianWorldModel(np.zeros((2, 3)), np.zeros(2),
                                      state_dim=1, action_dim=1)
    with pytest.raises(ValueError, match="layout"):
        kl_to_anchor(dataset, gaussian, anchor)


def test_kl_to_anchor_gaussian_matches_monte_carlo():
    """Closed-form dataset KL agrees with a 1e5-sample estimate of
    E[log anchor - log model] under the anchor, within four standard errors."""
    rng = np.random.default_rng(42)
    anchor = DiagGaussianWorldModel(rng.standard_normal((2, 3)) * 0.4,
                                    np.log([0.5, 0.8]), state_dim=1,
                                    action_dim=1)
    model = DiagGaussianWorldModel(rng.standard_normal((2, 3)) * 0.4,
                                   np.log([0.7, 0.6]), state_dim=1,
                                   action_dim=1)
    states = rng.standard_normal((5, 1))
    actions = rng.standard_normal((5, 1))
    dataset = OfflineDataset(states=states, actions=actions,
                             rewards=np.zeros(5),
                             next_states=np.zeros((5, 1)))
    closed = kl_to_anchor(dataset, model, anchor)

    n_per_row = 20_000
    feats = np.hstack([states, actions, np.ones((5, 1))])
    mu_a = feats @ anchor.weights.T
    mu_m = feats @ model.weights.T
    sd_a = np.exp(anchor.log_std)
    sd_m = np.exp(model.log_std)
    draws = mu_a[:, None, :] + sd_a * rng.standard_normal((5, n_per_row, 2))
    log_ratio = (  # log N(y|a) - log N(y|m), summed over output dims
        np.log(sd_m / sd_a)
        + (draws - mu_m[:, None, :]) ** 2 / (2 * sd_m ** 2)
        - (draws - mu_a[:, None, :]) ** 2 / (2 * sd_a ** 2)).sum(axis=2)
    estimate = log_ratio.mean()
    stderr = math.sqrt(log_ratio.var(axis=1, ddof=1).mean()
                       / (5 * n_per_row))
    assert abs(estimate - closed) <= 4 * stderr


def test_tv_squared_single_cell_example():
    anchor, model, dataset = single_cell_pair()
    assert dataset_tv_squared(dataset, model, anchor) == pytest.approx(
        0.25 ** 2, abs=1e-15)


def test_tv_jensen_pinsker_chain(small_dataset):
    """(mean TV)^2 <= mean TV^2 <= KL/2 on a thousand random models, so any
    model inside the KL ball keeps its dataset-weighted squared TV inside
    the same radius."""
    dataset, anchor = small_dataset
    counts = dataset.cell_counts()
    anc = anchor.probs_all()
    rng = np.random.default_rng(2718)
    for _ in range(1000):
        model = anchor.with_params(
            anchor.params.values + rng.normal(scale=0.8,
                                              size=anchor.n_params))
        mod = model.probs_all()
        mean_tv = sum(count / dataset.n * 0.5 * np.abs(anc[s, a] - mod[s, a]).sum()
                      for (s, a), count in counts.items())
        tv_sq = dataset_tv_squared(dataset, model, anchor)
        kl = kl_to_anchor(dataset, model, anchor)
        assert mean_tv ** 2 <= tv_sq + 1e-15
        assert tv_sq <= 0.5 * kl + 1e-15


# ---------------------------------------------------------------------------
# coverage
# ---------------------------------------------------------------------------


def test_coverage_requires_enough_trials():
    assert MIN_COVERAGE_TRIALS == 100
    with pytest.raises(ValueError, match="99"):
        coverage_check(small_mdp(), "uniform", 50, 0.2, 99)


def test_coverage_vacuous_radius_covers_everything():
    report = coverage_check(small_mdp(), "uniform", 60, 0.2, 100,
                            epsilon_fn=lambda dataset: 1e6)
    assert report.coverage == 1.0
    assert report.mean_epsilon == 1e6
    assert report.passed


def test_coverage_zero_radius_covers_nothing():
    """The MLE essentially never coincides with the generating model, so a
    zero radius drives coverage to the floor."""
    report = coverage_check(small_mdp(), "uniform", 60, 0.2, 100,
                            epsilon_fn=lambda dataset: 0.0)
    assert report.coverage <= 0.02
    assert not report.passed
    assert report.mean_statistic > 0.0


def test_coverage_real_radius_meets_target():
    report = coverage_check(small_mdp(), "uniform", 200, 0.2, 150, seed=5)
    assert report.target == pytest.approx(0.9)
    assert report.binomial_std == pytest.approx(
        math.sqrt(0.9 * 0.1 / 150), rel=1e-12)
    assert report.passed
    assert report.coverage >= report.threshold
    assert report.mean_statistic < report.mean_epsilon


def test_coverage_deterministic_and_worker_invariant():
    kwargs = dict(n_transitions=120, delta=0.2, n_trials=100, seed=11)
    serial = coverage_check(small_mdp(), "uniform", **kwargs)
    again = coverage_check(small_mdp(), "uniform", **kwargs)
    threaded = coverage_check(small_mdp(), "uniform", n_workers=4, **kwargs)
    assert serial.to_dict() == again.to_dict() == threaded.to_dict()


def test_coverage_report_arithmetic_and_roundtrip(tmp_path):
    report = CoverageReport(delta=0.2, trials=400, coverage=0.86, target=0.9,
                            binomial_std=0.015, mean_epsilon=0.5,
                            mean_statistic=0.1)
    assert report.threshold == pytest.approx(0.855)
    assert report.passed
    failing = CoverageReport(delta=0.2, trials=400, coverage=0.85, target=0.9,
                             binomial_std=0.015, mean_epsilon=0.5,
                             mean_statistic=0.1)
    assert not failing.passed

    path = tmp_path / "coverage.json"
    report.save(path)
    loaded = json.loads(path.read_text())
    assert loaded == report.to_dict()
    assert set(loaded) == {"delta", "trials", "coverage", "target",
                           "binomial_std", "threshold", "passed",
                           "mean_epsilon", "mean_statistic"}
