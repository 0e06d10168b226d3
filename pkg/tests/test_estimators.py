"""Sampled estimators: advantages, masks, factor assembly, unbiasedness."""

import numpy as np
import pytest
from conftest import ScriptedRng

from stackmbrl.estimators import (ESTIMATOR_NAMES, dataset_dual_coupling,
                                  dataset_kl, discounted_weights,
                                  exact_estimator_targets, factors_from_batch,
                                  generalized_advantages,
                                  masked_surrogate_gradient, mc_estimator_stats,
                                  model_gradient, model_penalty_gradient,
                                  policy_gradient, psi_gradients, ratio_masks,
                                  step_scores_model, step_scores_policy)
from stackmbrl.mdp import dp_values, sample_tabular_batch
from stackmbrl.models import DiagGaussianWorldModel
from stackmbrl.oracles import (central_difference, enumerate_paths,
                               exact_expectations, exact_grad_lagrangian_model,
                               exact_penalty_terms)


# ---------------------------------------------------------------------------
# weights, surrogate gradients
# ---------------------------------------------------------------------------


def test_discounted_weights_geometric():
    w = discounted_weights(np.ones((1, 3)), 0.5)
    assert np.allclose(w, [[1.75, 0.75, 0.25]], atol=1e-15)


def test_psi_gradient_forward_backward_swap(small_triple):
    """Sum_t w_t s_t equals sum_j gamma^j r_j (prefix score sum)_j exactly."""
    mdp, policy, model = small_triple
    batch = sample_tabular_batch(mdp, policy, model, n=64, seed=11)
    weights = discounted_weights(batch["rewards"], mdp.gamma)
    scores = step_scores_policy(policy, batch["states"], batch["actions"])
    forward = psi_gradients(weights, scores)
    disc = batch["rewards"] * mdp.gamma ** np.arange(mdp.horizon)
    prefix = scores.cumsum(axis=1)
    backward = np.einsum("nh,nhp->np", disc, prefix)
    assert np.abs(forward - backward).max() <= 1e-12


def test_plain_gradients_average_per_trajectory_terms(small_triple):
    mdp, policy, model = small_triple
    batch = sample_tabular_batch(mdp, policy, model, n=16, seed=5)
    weights = discounted_weights(batch["rewards"], mdp.gamma)
    th = step_scores_policy(policy, batch["states"], batch["actions"])
    ph = step_scores_model(model, batch["states"], batch["actions"],
                           batch["outcomes"])
    assert np.allclose(policy_gradient(weights, th),
                       psi_gradients(weights, th).mean(axis=0), atol=1e-15)
    assert np.allclose(model_gradient(weights, ph),
                       psi_gradients(weights, ph).mean(axis=0), atol=1e-15)


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------


def test_advantages_with_full_mixing_telescope():
    """zeta=1 collapses to discounted reward-to-go plus boundary values."""
    rng = np.random.default_rng(3)
    n, h, gamma = 5, 6, 0.9
    rewards = rng.uniform(0, 1, size=(n, h))
    values = rng.standard_normal((n, h + 1))
    tail = rng.standard_normal(n)
    adv = generalized_advantages(rewards, values, tail, gamma, zeta=1.0)
    for t in range(h):
        togo = (rewards[:, t:] * gamma ** np.arange(h - t)).sum(axis=1)
        expected = togo + gamma ** (h - t) * tail - values[:, t]
        assert np.allclose(adv[:, t], expected, atol=1e-12)


def test_advantages_zero_inputs_zero_output():
    adv = generalized_advantages(np.zeros((3, 4)), np.zeros((3, 5)),
                                 np.zeros(3), 0.9, zeta=0.7)
    assert np.all(adv == 0.0)


def test_advantages_no_mixing_is_one_step_residual():
    rng = np.random.default_rng(8)
    rewards = rng.uniform(size=(2, 4))
    values = rng.standard_normal((2, 5))
    tail = rng.standard_normal(2)
    adv = generalized_advantages(rewards, values, tail, 0.8, zeta=0.0)
    v_eff = values.copy()
    v_eff[:, 4] = tail
    deltas = rewards + 0.8 * v_eff[:, 1:] - v_eff[:, :-1]
    assert np.allclose(adv, deltas, atol=1e-12)


def test_advantages_segment_length_validation():
    rewards, values, tail = np.zeros((1, 3)), np.zeros((1, 4)), np.zeros(1)
    out = generalized_advantages(rewards, values, tail, 0.9, length=1)
    assert out.shape == (1, 1)
    for bad in (0, 4, -1):
        with pytest.raises(ValueError):
            generalized_advantages(rewards, values, tail, 0.9, length=bad)


# ---------------------------------------------------------------------------
# ratio masks
# ---------------------------------------------------------------------------


def test_masks_all_active_on_first_pass():
    logp = np.log(np.random.default_rng(0).uniform(0.1, 1.0, size=(4, 5)))
    adv = np.random.default_rng(1).standard_normal((4, 5))
    assert np.all(ratio_masks(logp, logp, adv, clip=0.2) == 1.0)


def test_masks_drop_overshooting_positive_steps():
    clip = 0.2
    logp_old = np.zeros((1, 1))
    logp_new = np.log([[1.0 + 2 * clip]])
    assert ratio_masks(logp_new, logp_old, np.array([[1.0]]), clip) == 0.0
    assert ratio_masks(logp_new, logp_old, np.array([[-1.0]]), clip) == 1.0


def test_masks_drop_undershooting_negative_steps():
    clip = 0.2
    logp_old = np.zeros((1, 1))
    logp_new = np.log([[1.0 - 2 * clip]])
    assert ratio_masks(logp_new, logp_old, np.array([[-1.0]]), clip) == 0.0
    assert ratio_masks(logp_new, logp_old, np.array([[1.0]]), clip) == 1.0


def test_masks_infinite_clip_keeps_everything():
    rng = np.random.default_rng(2)
    logp_new = rng.standard_normal((6, 3))
    logp_old = rng.standard_normal((6, 3))
    adv = rng.standard_normal((6, 3))
    assert np.all(ratio_masks(logp_new, logp_old, adv, clip=np.inf) == 1.0)


# ---------------------------------------------------------------------------
# masked surrogate gradient
# ---------------------------------------------------------------------------


def test_masked_gradient_reduces_to_plain_estimator(small_triple):
    """Zero critic + full mixing + open masks = the return-weighted score."""
    mdp, policy, model = small_triple
    batch = sample_tabular_batch(mdp, policy, model, n=32, seed=7)
    weights = discounted_weights(batch["rewards"], mdp.gamma)
    scores = step_scores_policy(policy, batch["states"], batch["actions"])
    n, h = weights.shape
    adv = generalized_advantages(batch["rewards"], np.zeros((n, h + 1)),
                                 np.zeros(n), mdp.gamma, zeta=1.0)
    masks = np.ones((n, h))
    reduced = masked_surrogate_gradient(scores, masks, adv, mdp.gamma)
    assert np.abs(reduced - policy_gradient(weights, scores)).max() <= 1e-12


def test_masked_gradient_zero_when_all_masked(small_triple):
    mdp, policy, model = small_triple
    batch = sample_tabular_batch(mdp, policy, model, n=8, seed=9)
    scores = step_scores_policy(policy, batch["states"], batch["actions"])
    adv = np.ones((8, mdp.horizon))
    out = masked_surrogate_gradient(scores, np.zeros((8, mdp.horizon)), adv,
                                    mdp.gamma)
    assert np.all(out == 0.0)


def _value_table_for(batch_states, v_steps):
    n, h_plus_1 = batch_states.shape
    return v_steps[np.arange(h_plus_1)[None, :], batch_states]


def test_value_baseline_keeps_estimator_unbiased_enumeration(small_triple):
    """Expectation of the value-baselined surrogate equals the exact gradient."""
    mdp, policy, model = small_triple
    exp = exact_expectations(mdp, policy, model)
    v_steps, _ = dp_values(model.probs_all(), model.outcome_rewards,
                           model.outcome_next_states, policy.probs_all(),
                           mdp.gamma, mdp.horizon)
    acc = np.zeros(policy.n_params)
    for prob, states, actions, outcomes, rewards in enumerate_paths(mdp, policy, model):
        scores = step_scores_policy(policy, states[None, :], actions[None, :])
        values = _value_table_for(states[None, :], v_steps)
        adv = generalized_advantages(rewards[None, :], values, np.zeros(1),
                                     mdp.gamma, zeta=1.0)
        term = masked_surrogate_gradient(scores, np.ones((1, mdp.horizon)),
                                         adv, mdp.gamma)
        acc += prob * term
    assert np.abs(acc - exp.grad_policy).max() <= 1e-10


def test_value_baseline_sampled_mean_and_variance(small_triple):
    """Sampled baselined gradients stay within 4 SE of the exact gradient and
    shrink the per-coordinate variance against the plain estimator."""
    mdp, policy, model = small_triple
    exp = exact_expectations(mdp, policy, model)
    n = 30_000
    batch = sample_tabular_batch(mdp, policy, model, n=n, seed=123)
    weights = discounted_weights(batch["rewards"], mdp.gamma)
    scores = step_scores_policy(policy, batch["states"], batch["actions"])
    v_steps, _ = dp_values(model.probs_all(), model.outcome_rewards,
                           model.outcome_next_states, policy.probs_all(),
                           mdp.gamma, mdp.horizon)
    values = _value_table_for(batch["states"], v_steps)
    adv = generalized_advantages(batch["rewards"], values, np.zeros(n),
                                 mdp.gamma, zeta=1.0)
    per_traj = np.einsum("nh,nhp->np", adv * mdp.gamma ** np.arange(mdp.horizon),
                         scores)
    mean = per_traj.mean(axis=0)
    se = per_traj.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(mean - exp.grad_policy) <= 4.0 * se + 1e-12)
    plain = psi_gradients(weights, scores)
    assert per_traj.var(axis=0).sum() < plain.var(axis=0).sum()


# ---------------------------------------------------------------------------
# dataset-side closed forms
# ---------------------------------------------------------------------------


def test_dataset_kl_and_coupling_match_enumeration(small_triple, small_dataset):
    _, _, model = small_triple
    dataset, anchor = small_dataset
    pen = exact_penalty_terms(dataset, model, anchor)
    assert dataset_kl(dataset, model, anchor) == pytest.approx(pen.kl_mean, abs=1e-12)
    coupling = dataset_dual_coupling(dataset, model, anchor)
    assert np.abs(coupling + pen.score_mean).max() <= 1e-12


def test_gaussian_dataset_kl_gradient_matches_coupling():
    """FD of the dataset KL equals the coupling vector for the Gaussian family."""
    rng = np.random.default_rng(12)
    anchor = DiagGaussianWorldModel(rng.standard_normal((2, 3)) * 0.3,
                                    np.log([0.4, 0.7]), state_dim=1, action_dim=1)
    model = DiagGaussianWorldModel(rng.standard_normal((2, 3)) * 0.3,
                                   np.log([0.5, 0.6]), state_dim=1, action_dim=1)
    from stackmbrl.models import OfflineDataset
    states = rng.standard_normal((6, 1))
    actions = rng.standard_normal((6, 1))
    dataset = OfflineDataset(states=states, actions=actions,
                             rewards=rng.uniform(size=6),
                             next_states=rng.standard_normal((6, 1)))
    coupling = dataset_dual_coupling(dataset, model, anchor)
    fd = central_difference(
        lambda phi: dataset_kl(dataset, model.with_params(phi), anchor),
        model.params.values)
    assert np.abs(fd - coupling).max() <= 1e-6


def test_penalized_model_gradient_expectation(small_triple, small_dataset):
    """Enumerated expectation of the penalized estimator equals the exact
    penalized gradient."""
    mdp, policy, model = small_triple
    dataset, anchor = small_dataset
    lam = 0.8
    acc = np.zeros(model.n_params)
    for prob, states, actions, outcomes, rewards in enumerate_paths(mdp, policy, model):
        weights = discounted_weights(rewards[None, :], mdp.gamma)
        ph = step_scores_model(model, states[None, :], actions[None, :],
                               outcomes[None, :])
        acc += prob * model_penalty_gradient(weights, ph, dataset, model,
                                             anchor, lam)
    target = exact_grad_lagrangian_model(mdp, policy, model, anchor, dataset, lam)
    assert np.abs(acc - target).max() <= 1e-10


# ---------------------------------------------------------------------------
# factor assembly
# ---------------------------------------------------------------------------


def _path_batch(model, policy, states, actions, outcomes, rewards, gamma):
    weights = discounted_weights(rewards[None, :], gamma)
    ph = step_scores_model(model, states[None, :], actions[None, :],
                           outcomes[None, :])
    th = step_scores_policy(policy, states[None, :], actions[None, :])
    return weights, ph, th.sum(axis=1)


def test_factor_columns_use_documented_scalings(small_triple, small_dataset):
    mdp, policy, model = small_triple
    dataset, anchor = small_dataset
    batch = sample_tabular_batch(mdp, policy, model, n=2, seed=31)
    weights = discounted_weights(batch["rewards"], mdp.gamma)
    ph = step_scores_model(model, batch["states"], batch["actions"],
                           batch["outcomes"])
    th_traj = step_scores_policy(policy, batch["states"],
                                 batch["actions"]).sum(axis=1)
    lam = 0.7
    rng = ScriptedRng(integer_queue=[[1, 0], [2, 0], [5]], choice_queue=[3])
    factors = factors_from_batch(weights, ph, th_traj, dataset, model, anchor,
                                 lam=lam, epsilon=0.1, rng=rng,
                                 n_step_cols=2, n_penalty_cols=1)
    m, h = weights.shape
    psi = psi_gradients(weights, ph)
    assert np.allclose(factors.u, psi.T / np.sqrt(m), atol=1e-15)
    assert np.allclose(factors.v, ph.sum(axis=1).T / np.sqrt(m), atol=1e-15)
    assert np.allclose(factors.w, th_traj.T / np.sqrt(m), atol=1e-15)
    scale = np.sqrt(h / 2)
    assert np.allclose(factors.y[:, 0], ph[1, 2] * scale, atol=1e-15)
    assert np.allclose(factors.y[:, 1], ph[0, 0] * scale, atol=1e-15)
    assert np.allclose(factors.x[:, 0], ph[1, 2] * scale * weights[1, 2], atol=1e-15)
    s, a = int(dataset.states[5]), int(dataset.actions[5])
    assert np.allclose(factors.z[:, 0],
                       model.score(s, a, 3) * np.sqrt(lam), atol=1e-15)
    assert factors.lam == lam


def test_factor_zero_multiplier_zeroes_penalty_columns(small_triple, small_dataset):
    mdp, policy, model = small_triple
    dataset, anchor = small_dataset
    batch = sample_tabular_batch(mdp, policy, model, n=4, seed=17)
    weights = discounted_weights(batch["rewards"], mdp.gamma)
    ph = step_scores_model(model, batch["states"], batch["actions"],
                           batch["outcomes"])
    th_traj = step_scores_policy(policy, batch["states"],
                                 batch["actions"]).sum(axis=1)
    factors = factors_from_batch(weights, ph, th_traj, dataset, model, anchor,
                                 lam=0.0, epsilon=0.1,
                                 rng=np.random.default_rng(0))
    assert np.all(factors.z == 0.0)
    assert factors.lam == 0.0


def test_factor_expectation_matches_curvature_surrogate(small_triple, small_dataset):
    """Enumerate every rollout with scripted column picks covering each step
    once: E[UV^T - XY^T] equals the exact score-product curvature and
    E[UW^T] the exact mixed derivative."""
    mdp, policy, model = small_triple
    dataset, anchor = small_dataset
    exp = exact_expectations(mdp, policy, model)
    h = mdp.horizon
    n_phi = model.n_params
    ridge = 1e-3
    acc = np.zeros((n_phi, n_phi))
    acc_mixed = np.zeros((n_phi, policy.n_params))
    eye = np.eye(n_phi)
    for prob, states, actions, outcomes, rewards in enumerate_paths(mdp, policy, model):
        weights, ph, th_traj = _path_batch(model, policy, states, actions,
                                           outcomes, rewards, mdp.gamma)
        rng = ScriptedRng(integer_queue=[np.zeros(h), np.arange(h), [0]],
                          choice_queue=[0])
        factors = factors_from_batch(weights, ph, th_traj, dataset, model,
                                     anchor, lam=0.0, epsilon=0.0, rng=rng,
                                     n_step_cols=h, n_penalty_cols=1,
                                     ridge=ridge)
        acc += prob * (factors.dense() - ridge * eye)
        acc_mixed += prob * factors.dense_mixed()
    assert np.abs(acc - exp.fim_hess_j).max() <= 1e-10
    assert np.abs(acc_mixed - exp.mixed).max() <= 1e-10


def test_penalty_factor_expectation_matches_fim(small_triple, small_dataset):
    """Enumerate (cell, outcome) pairs through the scripted generator:
    E[ZZ^T] equals lam times the anchor-averaged score product."""
    mdp, policy, model = small_triple
    dataset, anchor = small_dataset
    lam = 0.9
    ridge = 1e-3
    pen = exact_penalty_terms(dataset, model, anchor)
    anc_probs = anchor.probs_all()
    n_phi = model.n_params
    eye = np.eye(n_phi)
    # one representative dataset row per visited cell
    cells = {}
    for row in range(dataset.n):
        cells.setdefault((int(dataset.states[row]), int(dataset.actions[row])), row)
    counts = dataset.cell_counts()
    weights = np.zeros((1, 1))
    ph = np.zeros((1, 1, n_phi))
    th_traj = np.zeros((1, policy.n_params))
    acc = np.zeros((n_phi, n_phi))
    for (s, a), row in cells.items():
        for k in range(model.num_outcomes):
            rng = ScriptedRng(integer_queue=[[0], [0], [row]], choice_queue=[k])
            factors = factors_from_batch(weights, ph, th_traj, dataset, model,
                                         anchor, lam=lam, epsilon=0.0, rng=rng,
                                         n_step_cols=1, n_penalty_cols=1,
                                         ridge=ridge)
            weight = (counts[(s, a)] / dataset.n) * anc_probs[s, a, k]
            acc += weight * (factors.dense() - ridge * eye)
    assert np.abs(acc - lam * pen.fim_mean).max() <= 1e-10


def test_factor_sampled_penalty_statistics(small_triple, small_dataset):
    """exact_penalty=False swaps the closed forms for the scripted draws."""
    mdp, policy, model = small_triple
    dataset, anchor = small_dataset
    batch = sample_tabular_batch(mdp, policy, model, n=2, seed=41)
    weights = discounted_weights(batch["rewards"], mdp.gamma)
    ph = step_scores_model(model, batch["states"], batch["actions"],
                           batch["outcomes"])
    th_traj = step_scores_policy(policy, batch["states"],
                                 batch["actions"]).sum(axis=1)
    row, k, eps = 7, 2, 0.3
    rng = ScriptedRng(integer_queue=[[0, 0], [0, 0], [row]], choice_queue=[k])
    factors = factors_from_batch(weights, ph, th_traj, dataset, model, anchor,
                                 lam=0.5, epsilon=eps, rng=rng,
                                 n_step_cols=2, n_penalty_cols=1,
                                 exact_penalty=False)
    s, a = int(dataset.states[row]), int(dataset.actions[row])
    from stackmbrl.models import categorical_kl
    expected_gap = categorical_kl(anchor.probs(s, a), model.probs(s, a)) - eps
    assert factors.dual_slope == pytest.approx(expected_gap, abs=1e-12)
    assert np.allclose(factors.dual_coupling, -model.score(s, a, k), atol=1e-12)


# ---------------------------------------------------------------------------
# Monte-Carlo estimator statistics
# ---------------------------------------------------------------------------


def test_estimator_stats_cover_every_name_and_hit_targets(small_triple, small_dataset):
    mdp, policy, model = small_triple
    dataset, anchor = small_dataset
    lam, eps = 0.6, 0.2
    stats = mc_estimator_stats(mdp, policy, model, dataset, anchor, lam, eps,
                               n_samples=40_000, seed=2024)
    targets = exact_estimator_targets(mdp, policy, model, dataset, anchor,
                                      lam, eps)
    assert set(stats) == set(ESTIMATOR_NAMES) == set(targets)
    total, hits = 0, 0
    for name in ESTIMATOR_NAMES:
        mean, se = stats[name]
        diff = np.abs(mean - targets[name])
        ok = diff <= 4.0 * se + 1e-12
        hits += int(ok.sum())
        total += ok.size
    assert hits / total >= 0.95, f"{hits}/{total} coordinates within 4 SE"


def test_estimator_stats_deterministic(small_triple, small_dataset):
    mdp, policy, model = small_triple
    dataset, anchor = small_dataset
    a = mc_estimator_stats(mdp, policy, model, dataset, anchor, 0.5, 0.1,
                           n_samples=2000, seed=7)
    b = mc_estimator_stats(mdp, policy, model, dataset, anchor, 0.5, 0.1,
                           n_samples=2000, seed=7)
    for name in ESTIMATOR_NAMES:
        assert np.array_equal(a[name][0], b[name][0])
        assert np.array_equal(a[name][1], b[name][1])


def test_constraint_gap_target_at_anchor(small_triple, small_dataset):
    mdp, policy, _ = small_triple
    dataset, anchor = small_dataset
    eps = 0.35
    targets = exact_estimator_targets(mdp, policy, anchor, dataset, anchor,
                                      1.0, eps)
    assert targets["constraint_gap"][0] == pytest.approx(-eps, abs=1e-12)
    assert np.abs(targets["dual_coupling"]).max() <= 1e-12
