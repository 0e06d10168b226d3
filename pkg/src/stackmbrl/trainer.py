"""Offline robust training loop: segments, critics, masks, and dual ascent.

The iteration alternates three phases over a shared state (policy, world
model, multiplier): the policy ascends a curvature-corrected total
derivative assembled from low-rank factors, the model descends its
penalized objective, and the multiplier takes projected ascent steps on
the anchored-KL constraint gap. Updates within an iteration run on primed
copies and are committed together at the end, so a failed phase never
leaves the state half-stepped.

Rollouts are short imagined segments started from dataset states and
bootstrapped with a critic Q-tail; a clipped-ratio mask gates every step's
contribution, which makes the first epoch of each phase exactly the plain
estimator. ``algorithm="vanilla"`` replaces all of this with full-horizon
score-function estimators and a single coupled-dynamics step per
iteration, for A/B comparisons against the segment machinery.
"""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import LearningRates, MULTIPLIER_INIT
from .estimators import (
    dataset_dual_coupling,
    dataset_kl,
    discounted_weights,
    factors_from_batch,
    generalized_advantages,
    masked_surrogate_gradient,
    model_gradient,
    policy_gradient,
    ratio_masks,
    step_log_probs_model,
    step_log_probs_policy,
    step_scores_model,
    step_scores_policy,
)
from .mdp import (
    ContinuousMdp,
    NoisyDeployment,
    SamplingError,
    TabularMdp,
    dp_values,
    exact_return,
    sample_tabular_batch,
    sample_trajectory,
)
from .models import (
    CategoricalWorldModel,
    DiagGaussianPolicy,
    OfflineDataset,
    SoftmaxPolicy,
)
from .woodbury import (
    RIDGE_DEFAULT,
    HessianOperator,
    IllConditionedError,
    SingularScalarError,
    WoodburySolver,
    leader_gradient,
)

ALGORITHMS = ("segments", "vanilla")
DYNAMICS_MODES = ("naive", "stackelberg", "constrained")

# Sub-stream tags for seeded generators, so every phase of every iteration
# draws from its own reproducible stream.
_COLLECT_STREAM = 0
_CRITIC_STREAM = 1
_POLICY_STREAM = 2
_MODEL_STREAM = 3
_DUAL_STREAM = 4
_EVAL_STREAM = 5
_WORST_CASE_STREAM = 6

_ABORT_ERRORS = (SingularScalarError, IllConditionedError, FloatingPointError,
                 SamplingError, np.linalg.LinAlgError)


def _stream(seed, *tags) -> np.random.Generator:
    return np.random.default_rng((seed,) + tags)


# ---------------------------------------------------------------------------
# critics
# ---------------------------------------------------------------------------


@dataclass
class TabularCritic:
    """Table-backed Q/V pair with a slow-moving target value table."""

    q_table: np.ndarray        # (S, A)
    v_table: np.ndarray        # (S,)
    target_v_table: np.ndarray  # (S,)

    @staticmethod
    def zeros(num_states: int, num_actions: int) -> "TabularCritic":
        return TabularCritic(np.zeros((num_states, num_actions)),
                             np.zeros(num_states), np.zeros(num_states))

    def state_values(self, states: np.ndarray) -> np.ndarray:
        return self.v_table[states]

    def target_state_values(self, states: np.ndarray) -> np.ndarray:
        return self.target_v_table[states]

    def tail_values(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.q_table[states, actions]

    def fit_epoch(self, policy, model, gamma: float, transitions, rng) -> None:
        """One exact fit: Q from the model's closed-form one-step target,
        V from the policy mixture of the fresh Q. No sampling involved."""
        cont = model.outcome_rewards + gamma * self.target_v_table[
            model.outcome_next_states]
        self.q_table = model.probs_all() @ cont
        self.v_table = (policy.probs_all() * self.q_table).sum(axis=1)

    def mix_target(self, mix: float) -> None:
        self.target_v_table = (mix * self.v_table
                               + (1.0 - mix) * self.target_v_table)

    def to_dict(self) -> dict:
        return {"kind": "tabular", "q": self.q_table.tolist(),
                "v": self.v_table.tolist(),
                "target_v": self.target_v_table.tolist()}


@dataclass
class LinearCritic:
    """Affine-in-state V and affine-in-(state, action) Q for continuous tasks."""

    v_weights: np.ndarray        # (d + 1,)
    q_weights: np.ndarray        # (d + a + 1,)
    target_v_weights: np.ndarray  # (d + 1,)

    @staticmethod
    def zeros(state_dim: int, action_dim: int) -> "LinearCritic":
        return LinearCritic(np.zeros(state_dim + 1),
                            np.zeros(state_dim + action_dim + 1),
                            np.zeros(state_dim + 1))

    def state_values(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        return states @ self.v_weights[:-1] + self.v_weights[-1]

    def target_state_values(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        return states @ self.target_v_weights[:-1] + self.target_v_weights[-1]

    def tail_values(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        feats = np.concatenate([np.asarray(states, dtype=float),
                                np.asarray(actions, dtype=float)], axis=-1)
        return feats @ self.q_weights[:-1] + self.q_weights[-1]

    def fit_epoch(self, policy, model, gamma: float, transitions: dict,
                  rng: np.random.Generator, batch_size: int = 256) -> None:
        """One least-squares refit on a fresh minibatch.

        Q regresses on single-sample targets redrawn through the *current*
        model; V regresses on Q at a fresh policy action, so both stay tied
        to the present (policy, model) pair rather than to stale rollouts.
        """
        n = len(transitions["rewards"])
        idx = rng.integers(0, n, size=min(batch_size, n))
        states = np.asarray(transitions["states"], dtype=float)[idx]
        actions = np.asarray(transitions["actions"], dtype=float)[idx]

        next_states = np.empty_like(states)
        rewards = np.empty(len(idx))
        for i in range(len(idx)):
            next_states[i], rewards[i] = model.sample(states[i], actions[i], rng)
        q_targets = rewards + gamma * self.target_state_values(next_states)
        feats_q = np.concatenate(
            [states, actions, np.ones((len(idx), 1))], axis=1)
        self.q_weights = np.linalg.lstsq(feats_q, q_targets, rcond=None)[0]

        fresh_actions = np.array([policy.sample(s, rng) for s in states])
        v_targets = self.tail_values(states, fresh_actions)
        feats_v = np.concatenate([states, np.ones((len(idx), 1))], axis=1)
        self.v_weights = np.linalg.lstsq(feats_v, v_targets, rcond=None)[0]

    def mix_target(self, mix: float) -> None:
        self.target_v_weights = (mix * self.v_weights
                                 + (1.0 - mix) * self.target_v_weights)

    def to_dict(self) -> dict:
        return {"kind": "linear", "q": self.q_weights.tolist(),
                "v": self.v_weights.tolist(),
                "target_v": self.target_v_weights.tolist()}


def critic_from_dict(payload: dict):
    if payload["kind"] == "tabular":
        return TabularCritic(np.array(payload["q"]), np.array(payload["v"]),
                             np.array(payload["target_v"]))
    if payload["kind"] == "linear":
        return LinearCritic(np.array(payload["v"]), np.array(payload["q"]),
                            np.array(payload["target_v"]))
    raise ValueError(f"unknown critic kind {payload['kind']!r}")


def critic_loss(critic, transitions: dict, gamma: float) -> float:
    """Mean squared one-step Bellman residual against the target values."""
    if transitions is None or len(transitions["rewards"]) == 0:
        return float("nan")
    preds = critic.tail_values(transitions["states"], transitions["actions"])
    targets = (transitions["rewards"]
               + gamma * critic.target_state_values(transitions["next_states"]))
    return float(np.mean((preds - targets) ** 2))


def train_critic(critic, buffer: "ReplayBuffer", policy, model, gamma: float,
                 epochs: int, target_mix: float, rng: np.random.Generator,
                 batch_size: int = 256) -> float:
    """Run ``epochs`` fitting passes, then fold V into the target table once.

    Returns the pre-update Bellman residual over the buffer as a loss
    diagnostic. With zero epochs the critic (target included) is untouched.
    """
    transitions = buffer.transitions() if len(buffer) else None
    loss = critic_loss(critic, transitions, gamma)
    if epochs == 0:
        return loss
    if isinstance(critic, LinearCritic) and transitions is None:
        return loss
    for _ in range(epochs):
        critic.fit_epoch(policy, model, gamma, transitions, rng)
    critic.mix_target(target_mix)
    return loss


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """FIFO store of rollout batches, each stamped with the iteration that
    produced it. Capacity counts whole batches, not transitions."""

    def __init__(self, capacity: int = 10):
        if capacity < 1:
            raise ValueError("buffer capacity must be at least one batch")
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)

    def add(self, batch: dict, snapshot_id: int) -> None:
        self._entries.append((snapshot_id, batch))

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> list:
        return list(self._entries)

    def snapshot_ids(self) -> list:
        return [sid for sid, _ in self._entries]

    def latest(self) -> dict:
        if not self._entries:
            raise IndexError("buffer is empty")
        return self._entries[-1][1]

    def transitions(self) -> dict:
        """All stored (s, a, r, s') rows flattened across batches,
        respecting per-rollout valid lengths and skipping bootstrap
        actions."""
        states, actions, rewards, nexts = [], [], [], []
        for _, batch in self._entries:
            lengths = batch["lengths"]
            n, n_steps = batch["rewards"].shape
            valid = np.arange(n_steps)[None, :] < lengths[:, None]
            states.append(batch["states"][:, :-1][valid])
            actions.append(batch["actions"][:, :n_steps][valid])
            rewards.append(batch["rewards"][valid])
            nexts.append(batch["states"][:, 1:][valid])
        return {"states": np.concatenate(states),
                "actions": np.concatenate(actions),
                "rewards": np.concatenate(rewards),
                "next_states": np.concatenate(nexts)}


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainerConfig:
    """Everything a run needs besides the environment, dataset and anchor."""

    n_iterations: int = 50
    segment_length: int = 4
    rollouts_per_iter: int = 32
    critic_epochs: int = 2
    policy_epochs: int = 2
    model_epochs: int = 2
    dual_epochs: int = 1
    minibatch_size: int = 16
    penalty_batch_size: int = 64
    step_columns: int = 64
    target_mix: float = 0.5
    advantage_decay: float = 0.95
    clip: float = 0.2
    ridge: float = RIDGE_DEFAULT
    epsilon: float = 0.1
    lam_init: float = MULTIPLIER_INIT
    rates: LearningRates = field(default_factory=LearningRates)
    seed: int = 0
    algorithm: str = "segments"
    dynamics: str = "constrained"
    exact_kl: bool = True
    buffer_capacity: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be non-negative")
        if self.segment_length < 1:
            raise ValueError("segment_length must be at least 1")
        for name in ("critic_epochs", "policy_epochs", "model_epochs",
                     "dual_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("rollouts_per_iter", "minibatch_size",
                     "penalty_batch_size", "step_columns", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.target_mix <= 1.0:
            raise ValueError("target_mix must lie in [0, 1]")
        if not 0.0 <= self.advantage_decay <= 1.0:
            raise ValueError("advantage_decay must lie in [0, 1]")
        if self.clip <= 0.0:
            raise ValueError("clip must be positive (inf disables masking)")
        if self.ridge < 0.0:
            raise ValueError("ridge must be non-negative")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.lam_init < 0.0:
            raise ValueError("lam_init must be non-negative")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.dynamics not in DYNAMICS_MODES:
            raise ValueError(f"dynamics must be one of {DYNAMICS_MODES}")

    def to_dict(self) -> dict:
        out = {
            name: getattr(self, name)
            for name in ("n_iterations", "segment_length", "rollouts_per_iter",
                         "critic_epochs", "policy_epochs", "model_epochs",
                         "dual_epochs", "minibatch_size", "penalty_batch_size",
                         "step_columns", "target_mix", "advantage_decay",
                         "clip", "ridge", "epsilon", "lam_init", "seed",
                         "algorithm", "dynamics", "exact_kl",
                         "buffer_capacity", "checkpoint_every")
        }
        out["rates"] = dict(self.rates.to_dict(),
                            enforce_ordering=self.rates.enforce_ordering)
        return out

    @staticmethod
    def from_dict(payload: dict) -> "TrainerConfig":
        payload = dict(payload)
        rates = payload.pop("rates", None)
        if rates is not None:
            payload["rates"] = LearningRates(**rates)
        return TrainerConfig(**payload)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1,
                                         sort_keys=True))

    @staticmethod
    def load(path) -> "TrainerConfig":
        return TrainerConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainState:
    """Committed parameters plus the mutable training machinery.

    The buffer and critic advance during an iteration even if a later phase
    aborts; only (policy, model, lam) carry the commit-at-end guarantee.
    """

    policy: object
    model: object
    lam: float
    critic: object
    buffer: ReplayBuffer
    iteration: int = 0


TRACE_COLUMNS = ("iteration", "return_estimate", "exact_objective",
                 "exact_env_return", "kl", "lam", "mask_rate_policy",
                 "mask_rate_model", "critic_loss", "aborted")


@dataclass
class TrainingTrace:
    """Per-iteration diagnostics, one row per committed iteration."""

    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append({name: row.get(name, float("nan"))
                          for name in TRACE_COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        if name not in TRACE_COLUMNS:
            raise KeyError(name)
        return np.array([row[name] for row in self.rows])

    def save_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(TRACE_COLUMNS)
            for row in self.rows:
                writer.writerow([repr(row[name]) if isinstance(row[name], float)
                                 else row[name] for name in TRACE_COLUMNS])


# ---------------------------------------------------------------------------
# rollout collection
# ---------------------------------------------------------------------------


def collect_rollouts(env, policy, model, dataset: OfflineDataset,
                     n_rollouts: int, length: int, seed) -> dict:
    """Imagined segments under (policy, model) from dataset start states.

    Start states are drawn uniformly from the dataset's state column. Each
    segment runs ``length`` steps and carries one trailing bootstrap action
    for the critic's Q-tail. Log-probabilities are the sampler's own
    evaluations at generation time, so later ratio masks start at exactly
    one.

    Continuous rollouts that hit a non-finite emission are truncated at the
    last finite step and padded (states frozen, fresh policy actions, zero
    rewards); their true step counts land in ``lengths`` and the batch-level
    ``truncated`` flag is raised. A rollout with no finite step at all
    raises ``SamplingError``.
    """
    if length < 1:
        raise ValueError("segment length must be at least 1")
    if n_rollouts < 1:
        raise ValueError("need at least one rollout")
    from .mdp import _as_rng

    rng = _as_rng(seed)
    start_idx = rng.integers(0, dataset.n, size=n_rollouts)

    if isinstance(env, TabularMdp):
        from .mdp import _draw_categorical_rows, _policy_probs

        starts = np.asarray(dataset.states)[start_idx].astype(np.int64)
        batch = sample_tabular_batch(env, policy, model, n=n_rollouts,
                                     horizon=length, seed=rng,
                                     init_states=starts)
        probs = _policy_probs(policy, env)
        last_states = batch["states"][:, -1]
        boot = _draw_categorical_rows(probs[last_states], rng)
        with np.errstate(divide="ignore"):
            boot_logp = np.log(probs)[last_states, boot]
        batch["actions"] = np.column_stack([batch["actions"], boot])
        batch["logp_policy"] = np.column_stack([batch["logp_policy"],
                                                boot_logp])
        batch["lengths"] = np.full(n_rollouts, length, dtype=np.int64)
        batch["tabular"] = True
        batch["truncated"] = False
        return batch

    states = np.empty((n_rollouts, length + 1, env.state_dim))
    actions = np.empty((n_rollouts, length + 1, env.action_dim))
    rewards = np.zeros((n_rollouts, length))
    logp_policy = np.zeros((n_rollouts, length + 1))
    logp_model = np.zeros((n_rollouts, length))
    lengths = np.empty(n_rollouts, dtype=np.int64)
    starts = np.asarray(dataset.states, dtype=float)[start_idx]
    truncated = False
    for i in range(n_rollouts):
        traj = sample_trajectory(env, policy, model=model, horizon=length,
                                 seed=rng, init_state=starts[i],
                                 bootstrap_action=True)
        steps = traj.n_steps
        lengths[i] = steps
        truncated = truncated or traj.truncated_early
        states[i, :steps + 1] = traj.states
        states[i, steps + 1:] = traj.states[-1]
        actions[i, :len(traj.actions)] = traj.actions
        logp_policy[i, :len(traj.actions)] = traj.logp_policy
        rewards[i, :steps] = traj.rewards
        logp_model[i, :steps] = traj.logp_model
        # Truncated rows still need actions at the frozen tail states so a
        # shortened segment keeps a well-defined Q-tail input.
        frozen = traj.states[-1]
        for t in range(len(traj.actions), length + 1):
            pad_action = policy.sample(frozen, rng)
            actions[i, t] = pad_action
            logp_policy[i, t] = policy.log_prob(frozen, pad_action)
    return {"states": states, "actions": actions, "rewards": rewards,
            "logp_policy": logp_policy, "logp_model": logp_model,
            "lengths": lengths, "tabular": False, "truncated": truncated}


def _batch_subset(batch: dict, idx: np.ndarray) -> dict:
    out = {key: (value[idx] if isinstance(value, np.ndarray) else value)
           for key, value in batch.items()}
    return out


def _policy_log_probs(policy, batch: dict, n_steps: int) -> np.ndarray:
    if batch["tabular"]:
        return step_log_probs_policy(policy, batch["states"][:, :n_steps + 1],
                                     batch["actions"][:, :n_steps])
    n = batch["states"].shape[0]
    out = np.empty((n, n_steps))
    for i in range(n):
        for t in range(n_steps):
            out[i, t] = policy.log_prob(batch["states"][i, t],
                                        batch["actions"][i, t])
    return out


def _policy_scores(policy, batch: dict, n_steps: int) -> np.ndarray:
    if batch["tabular"]:
        return step_scores_policy(policy, batch["states"][:, :n_steps + 1],
                                  batch["actions"][:, :n_steps])
    n = batch["states"].shape[0]
    out = np.empty((n, n_steps, policy.n_params))
    for i in range(n):
        for t in range(n_steps):
            out[i, t] = policy.score(batch["states"][i, t],
                                     batch["actions"][i, t])
    return out


def _model_emission(batch: dict, i: int, t: int) -> np.ndarray:
    return np.append(batch["states"][i, t + 1], batch["rewards"][i, t])


def _model_log_probs(model, batch: dict, n_steps: int) -> np.ndarray:
    if batch["tabular"]:
        return step_log_probs_model(model, batch["states"][:, :n_steps + 1],
                                    batch["actions"][:, :n_steps],
                                    batch["outcomes"][:, :n_steps])
    n = batch["states"].shape[0]
    out = np.empty((n, n_steps))
    for i in range(n):
        for t in range(n_steps):
            out[i, t] = model.log_prob(batch["states"][i, t],
                                       batch["actions"][i, t],
                                       _model_emission(batch, i, t))
    return out


def _model_scores(model, batch: dict, n_steps: int) -> np.ndarray:
    if batch["tabular"]:
        return step_scores_model(model, batch["states"][:, :n_steps + 1],
                                 batch["actions"][:, :n_steps],
                                 batch["outcomes"][:, :n_steps])
    n = batch["states"].shape[0]
    out = np.empty((n, n_steps, model.n_params))
    for i in range(n):
        for t in range(n_steps):
            out[i, t] = model.score(batch["states"][i, t],
                                    batch["actions"][i, t],
                                    _model_emission(batch, i, t))
    return out


def _segment_returns(batch: dict, gamma: float) -> float:
    n_steps = batch["rewards"].shape[1]
    disc = gamma ** np.arange(n_steps)
    valid = np.arange(n_steps)[None, :] < batch["lengths"][:, None]
    return float((batch["rewards"] * valid * disc).sum(axis=1).mean())


def _dataset_subset(dataset: OfflineDataset, size: int,
                    rng: np.random.Generator) -> OfflineDataset:
    idx = dataset.minibatch_indices(min(size, dataset.n), rng)
    return OfflineDataset(states=np.asarray(dataset.states)[idx],
                          actions=np.asarray(dataset.actions)[idx],
                          rewards=np.asarray(dataset.rewards)[idx],
                          next_states=np.asarray(dataset.next_states)[idx])


# ---------------------------------------------------------------------------
# one training iteration
# ---------------------------------------------------------------------------


def _advantages_for(critic, batch: dict, gamma: float, decay: float,
                    n_steps: int) -> np.ndarray:
    values = critic.state_values(batch["states"][:, :n_steps + 1])
    tails = critic.tail_values(batch["states"][:, n_steps],
                               batch["actions"][:, n_steps])
    return generalized_advantages(batch["rewards"][:, :n_steps], values,
                                  tails, gamma, zeta=decay, length=n_steps)


def _minibatch(batch: dict, size: int, rng: np.random.Generator) -> dict:
    """Fresh with-replacement rollout minibatch; the whole batch, in order,
    when ``size`` covers it (keeps small-batch runs exactly reproducible
    against the unbatched estimators)."""
    n = batch["rewards"].shape[0]
    if size >= n:
        return batch
    return _batch_subset(batch, rng.integers(0, n, size=size))


def _policy_phase(state: TrainState, batch: dict, dataset, anchor,
                  config: TrainerConfig, gamma: float, rate: float,
                  iteration: int) -> tuple[object, float]:
    """Ascend the masked total derivative; returns (new policy, first-epoch
    mask rate). The model and multiplier stay at their committed values."""
    policy_new = state.policy
    first_mask_rate = float("nan")
    for epoch in range(config.policy_epochs):
        rng = _stream(config.seed, _POLICY_STREAM, iteration, epoch)
        sub = _minibatch(batch, config.minibatch_size, rng)
        n_steps = int(sub["lengths"].min())
        adv = _advantages_for(state.critic, sub, gamma,
                              config.advantage_decay, n_steps)
        logp_new = _policy_log_probs(policy_new, sub, n_steps)
        masks = ratio_masks(logp_new, sub["logp_policy"][:, :n_steps], adv,
                            clip=config.clip)
        if epoch == 0:
            first_mask_rate = float(masks.mean())
        theta_scores = _policy_scores(policy_new, sub, n_steps)
        grad_policy = masked_surrogate_gradient(theta_scores, masks, adv,
                                                gamma)
        if config.dynamics == "naive":
            total = grad_policy
        else:
            phi_scores = _model_scores(state.model, sub, n_steps)
            weights = masks * adv * gamma ** np.arange(n_steps)
            grad_model = masked_surrogate_gradient(phi_scores, masks, adv,
                                                   gamma)
            factors = factors_from_batch(
                weights, phi_scores, theta_scores.sum(axis=1), dataset,
                state.model, anchor, state.lam, config.epsilon, rng,
                n_step_cols=config.step_columns,
                n_penalty_cols=config.penalty_batch_size,
                ridge=config.ridge, exact_penalty=config.exact_kl)
            use_dual = config.dynamics == "constrained"
            operator = HessianOperator(WoodburySolver(factors))
            total = leader_gradient(grad_policy, grad_model, factors,
                                    operator=operator, use_dual_row=use_dual)
        policy_new = policy_new.with_params(policy_new.params.values
                                            + rate * total)
    return policy_new, first_mask_rate


def _model_phase(state: TrainState, batch: dict, dataset, anchor,
                 config: TrainerConfig, gamma: float, rate: float,
                 iteration: int) -> tuple[object, float]:
    """Descend the masked penalized objective at the committed policy and
    multiplier; returns (new model, first-epoch mask rate)."""
    model_new = state.model
    first_mask_rate = float("nan")
    for epoch in range(config.model_epochs):
        rng = _stream(config.seed, _MODEL_STREAM, iteration, epoch)
        sub = _minibatch(batch, config.minibatch_size, rng)
        n_steps = int(sub["lengths"].min())
        adv = _advantages_for(state.critic, sub, gamma,
                              config.advantage_decay, n_steps)
        logp_new = _model_log_probs(model_new, sub, n_steps)
        masks = ratio_masks(logp_new, sub["logp_model"][:, :n_steps], adv,
                            clip=config.clip)
        if epoch == 0:
            first_mask_rate = float(masks.mean())
        phi_scores = _model_scores(model_new, sub, n_steps)
        grad_objective = masked_surrogate_gradient(phi_scores, masks, adv,
                                                   gamma)
        penalty_data = (dataset if config.exact_kl else
                        _dataset_subset(dataset, config.penalty_batch_size,
                                        rng))
        coupling = dataset_dual_coupling(penalty_data, model_new, anchor)
        model_new = model_new.with_params(
            model_new.params.values
            - rate * (grad_objective + state.lam * coupling))
    return model_new, first_mask_rate


def _dual_phase(state: TrainState, dataset, anchor, config: TrainerConfig,
                rate: float, iteration: int) -> float:
    """Projected ascent on the constraint gap of the committed model."""
    lam_new = state.lam
    for epoch in range(config.dual_epochs):
        if config.exact_kl:
            gap = dataset_kl(dataset, state.model, anchor) - config.epsilon
        else:
            rng = _stream(config.seed, _DUAL_STREAM, iteration, epoch)
            sub = _dataset_subset(dataset, config.penalty_batch_size, rng)
            gap = dataset_kl(sub, state.model, anchor) - config.epsilon
        lam_new = max(0.0, lam_new + rate * gap)
    return lam_new


def _vanilla_updates(state: TrainState, batch: dict, dataset, anchor,
                     config: TrainerConfig, gamma: float,
                     rates: LearningRates, iteration: int):
    """One coupled-dynamics step from full-horizon plain estimators."""
    n_steps = int(batch["lengths"].min())
    weights = discounted_weights(batch["rewards"][:, :n_steps], gamma)
    theta_scores = _policy_scores(state.policy, batch, n_steps)
    phi_scores = _model_scores(state.model, batch, n_steps)
    grad_policy_plain = policy_gradient(weights, theta_scores)
    grad_model_objective = model_gradient(weights, phi_scores)

    if config.dynamics == "naive":
        total = grad_policy_plain
    else:
        rng = _stream(config.seed, _POLICY_STREAM, iteration, 0)
        factors = factors_from_batch(
            weights, phi_scores, theta_scores.sum(axis=1), dataset,
            state.model, anchor, state.lam, config.epsilon, rng,
            n_step_cols=config.step_columns,
            n_penalty_cols=config.penalty_batch_size,
            ridge=config.ridge, exact_penalty=config.exact_kl)
        total = leader_gradient(grad_policy_plain, grad_model_objective,
                                factors,
                                use_dual_row=config.dynamics == "constrained")
    policy_new = state.policy.with_params(state.policy.params.values
                                          + rates.policy * total)

    penalty_data = dataset
    if not config.exact_kl:
        rng_m = _stream(config.seed, _MODEL_STREAM, iteration, 0)
        penalty_data = _dataset_subset(dataset, config.penalty_batch_size,
                                       rng_m)
    coupling = dataset_dual_coupling(penalty_data, state.model, anchor)
    model_new = state.model.with_params(
        state.model.params.values
        - rates.model * (grad_model_objective + state.lam * coupling))

    lam_new = state.lam
    if config.dynamics == "constrained":
        if config.exact_kl:
            gap = dataset_kl(dataset, state.model, anchor) - config.epsilon
        else:
            rng_d = _stream(config.seed, _DUAL_STREAM, iteration, 0)
            sub = _dataset_subset(dataset, config.penalty_batch_size, rng_d)
            gap = dataset_kl(sub, state.model, anchor) - config.epsilon
        lam_new = max(0.0, lam_new + rates.dual * gap)
    return policy_new, model_new, lam_new


def train_iteration(state: TrainState, env, dataset: OfflineDataset, anchor,
                    config: TrainerConfig) -> tuple[TrainState, dict]:
    """Collect, fit the critic, run the three phases, then commit.

    Parameter updates happen on primed copies and land together at the end.
    If any phase aborts (singular curvature, ill-conditioned solve,
    non-finite iterates, or a dead rollout), the committed (policy, model,
    multiplier) are kept, a warning records the iteration, and training can
    continue; the buffer and critic may already have advanced.
    """
    k = state.iteration
    gamma = env.gamma
    rates = config.rates.at(k)
    record = {"iteration": k, "aborted": 0}
    policy_new, model_new, lam_new = state.policy, state.model, state.lam
    try:
        length = (env.horizon if config.algorithm == "vanilla"
                  else config.segment_length)
        batch = collect_rollouts(env, state.policy, state.model, dataset,
                                 config.rollouts_per_iter, length,
                                 _stream(config.seed, _COLLECT_STREAM, k))
        state.buffer.add(batch, snapshot_id=k)
        record["return_estimate"] = _segment_returns(batch, gamma)
        if config.algorithm == "vanilla":
            record["critic_loss"] = float("nan")
            record["mask_rate_policy"] = 1.0
            record["mask_rate_model"] = 1.0
            policy_new, model_new, lam_new = _vanilla_updates(
                state, batch, dataset, anchor, config, gamma, rates, k)
        else:
            record["critic_loss"] = train_critic(
                state.critic, state.buffer, state.policy, state.model, gamma,
                config.critic_epochs, config.target_mix,
                _stream(config.seed, _CRITIC_STREAM, k))
            policy_new, mask_pi = _policy_phase(
                state, batch, dataset, anchor, config, gamma, rates.policy, k)
            model_new, mask_mod = _model_phase(
                state, batch, dataset, anchor, config, gamma, rates.model, k)
            if config.dynamics == "constrained":
                lam_new = _dual_phase(state, dataset, anchor, config,
                                      rates.dual, k)
            record["mask_rate_policy"] = mask_pi
            record["mask_rate_model"] = mask_mod
        if not (np.isfinite(policy_new.params.values).all()
                and np.isfinite(model_new.params.values).all()
                and np.isfinite(lam_new)):
            raise FloatingPointError("updated parameters are non-finite")
    except _ABORT_ERRORS as err:
        warnings.warn(f"iteration {k} aborted ({err}); keeping committed "
                      "parameters")
        record["aborted"] = 1
        policy_new, model_new, lam_new = state.policy, state.model, state.lam

    state = replace(state, policy=policy_new, model=model_new, lam=lam_new,
                    iteration=k + 1)
    record["lam"] = state.lam
    record["kl"] = dataset_kl(dataset, state.model, anchor)
    if isinstance(env, TabularMdp):
        record["exact_objective"] = exact_return(env, state.policy,
                                                 state.model)
        record["exact_env_return"] = exact_return(env, state.policy, "true")
    return state, record


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


def code_version() -> str:
    """Order-stable digest of the package sources, for run manifests."""
    root = Path(__file__).resolve().parent
    digest = hashlib.sha256()
    for path in sorted(root.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def initial_state(env, anchor, config: TrainerConfig, policy_init=None,
                  model_init=None) -> TrainState:
    """Fresh state: uniform/zero policy, model at the anchor, zero critic."""
    if isinstance(env, TabularMdp):
        policy = (policy_init if policy_init is not None
                  else SoftmaxPolicy.zeros(env.num_states, env.num_actions))
        critic = TabularCritic.zeros(env.num_states, env.num_actions)
    else:
        policy = (policy_init if policy_init is not None
                  else DiagGaussianPolicy.zeros(env.state_dim, env.action_dim))
        critic = LinearCritic.zeros(env.state_dim, env.action_dim)
    model = (model_init if model_init is not None
             else anchor.with_params(anchor.params))
    return TrainState(policy=policy, model=model, lam=config.lam_init,
                      critic=critic, buffer=ReplayBuffer(config.buffer_capacity))


def save_checkpoint(state: TrainState, path) -> None:
    payload = {
        "iteration": state.iteration,
        "lam": state.lam,
        "policy": state.policy.params.to_dict(),
        "model": state.model.params.to_dict(),
        "critic": state.critic.to_dict(),
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_checkpoint(path, policy_template, model_template) -> dict:
    """Rehydrate a checkpoint against templates carrying the right shapes."""
    payload = json.loads(Path(path).read_text())
    return {
        "iteration": int(payload["iteration"]),
        "lam": float(payload["lam"]),
        "policy": policy_template.with_params(
            np.array(payload["policy"]["values"])),
        "model": model_template.with_params(
            np.array(payload["model"]["values"])),
        "critic": critic_from_dict(payload["critic"]),
    }


def write_manifest(out_dir, config: TrainerConfig, env,
                   dataset: OfflineDataset, state: TrainState) -> None:
    """Reproducibility record: every hyperparameter, the seed, and a source
    digest. Deliberately no wall-clock content (that goes to run.log), so
    repeated runs are byte-identical."""
    if isinstance(env, TabularMdp):
        env_label = f"tabular:{env.num_states}x{env.num_actions}"
    else:
        env_label = f"continuous:{env.name or 'anonymous'}"
    manifest = {
        "config": config.to_dict(),
        "code_version": code_version(),
        "environment": env_label,
        "dataset_rows": dataset.n,
        "iterations_run": state.iteration,
    }
    (Path(out_dir) / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True))


def train(env, dataset: OfflineDataset, anchor, config: TrainerConfig,
          out_dir=None, policy_init=None,
          model_init=None) -> tuple[TrainState, TrainingTrace]:
    """Run the configured number of iterations from a fresh state.

    With ``out_dir`` set, writes periodic and final checkpoints, the trace
    CSV, a manifest, and a run.log sidecar (the only file carrying timing).
    ``n_iterations=0`` returns the untouched initial state and an empty
    trace.
    """
    started = time.time()
    state = initial_state(env, anchor, config, policy_init, model_init)
    trace = TrainingTrace()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for _ in range(config.n_iterations):
        state, record = train_iteration(state, env, dataset, anchor, config)
        trace.append(record)
        if (out is not None and config.checkpoint_every
                and state.iteration % config.checkpoint_every == 0):
            save_checkpoint(state,
                            out / f"checkpoint_{state.iteration:04d}.json")
    if out is not None:
        save_checkpoint(state, out / "checkpoint_final.json")
        trace.save_csv(out / "trace.csv")
        write_manifest(out, config, env, dataset, state)
        (out / "run.log").write_text(
            f"finished {state.iteration} iterations in "
            f"{time.time() - started:.2f}s\n")
    return state, trace


# ---------------------------------------------------------------------------
# evaluation: inner minimization and noisy deployment
# ---------------------------------------------------------------------------


def exact_return_model_gradient(mdp: TabularMdp, policy,
                                model: CategoricalWorldModel) -> np.ndarray:
    """Gradient of the exact model return with respect to the model logits.

    Forward pass accumulates the discounted state distribution, the backward
    pass reuses the value recursion; the per-cell softmax Jacobian folds the
    outcome-probability gradient back to logits. Flat, matching
    ``model.params.values``.
    """
    from .mdp import _policy_probs

    probs = model.probs_all()
    pi = _policy_probs(policy, mdp)
    out_r = model.outcome_rewards
    out_s = model.outcome_next_states
    values, _ = dp_values(probs, out_r, out_s, pi, mdp.gamma, mdp.horizon)

    n_states, _, n_outcomes = probs.shape
    step_mass = np.einsum("sa,sak->sk", pi, probs)
    kernel = np.zeros((n_states, n_states))
    for k in range(n_outcomes):
        kernel[:, out_s[k]] += step_mass[:, k]

    grads = np.zeros_like(probs)
    dist = mdp.init_dist.copy()
    for t in range(mdp.horizon):
        continuation = out_r + mdp.gamma * values[t + 1][out_s]
        grads += (mdp.gamma ** t) * dist[:, None, None] * pi[:, :, None] \
            * continuation[None, None, :]
        dist = dist @ kernel

    inner = (probs * grads).sum(axis=-1, keepdims=True)
    return (probs * (grads - inner)).ravel()


def _pulled_into_ball(model: CategoricalWorldModel,
                      anchor: CategoricalWorldModel, dataset: OfflineDataset,
                      epsilon: float,
                      n_bisect: int = 60) -> CategoricalWorldModel:
    """Shrink the model toward the anchor (straight line in logit space)
    until the dataset-weighted anchored KL is within the budget."""
    def at(t: float) -> CategoricalWorldModel:
        logits = anchor.logits + t * (model.logits - anchor.logits)
        return CategoricalWorldModel(logits, anchor.outcome_rewards,
                                     anchor.outcome_next_states)

    if dataset_kl(dataset, model, anchor) <= epsilon:
        return model
    lo, hi = 0.0, 1.0
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        if dataset_kl(dataset, at(mid), anchor) <= epsilon:
            lo = mid
        else:
            hi = mid
    return at(lo)


def worst_case_return(mdp: TabularMdp, policy,
                      anchor: CategoricalWorldModel, dataset: OfflineDataset,
                      epsilon: float, n_starts: int = 4, n_steps: int = 200,
                      step_size: float = 0.5,
                      seed=0) -> tuple[float, CategoricalWorldModel]:
    """Approximate inner minimum of the exact return over the anchored ball.

    Multi-start projected gradient descent: normalized gradient steps on the
    model logits with a 1/sqrt decay, each followed by a bisection pull back
    into ``{KL(anchor || model) <= epsilon}``. Returns the lowest return
    seen and the model that achieved it. A heuristic certificate: it lower-
    bounds nothing formally, but the multi-start spread plus the anchor
    start make it a strong adversary on small problems.
    """
    best_value = exact_return(mdp, policy, anchor)
    best_model = anchor
    for start in range(n_starts):
        rng = _stream(seed, _WORST_CASE_STREAM, start)
        logits = anchor.logits.copy()
        if start > 0:
            logits = logits + 0.5 * rng.standard_normal(logits.shape)
        model = _pulled_into_ball(
            CategoricalWorldModel(logits, anchor.outcome_rewards,
                                  anchor.outcome_next_states),
            anchor, dataset, epsilon)
        for step in range(n_steps):
            value = exact_return(mdp, policy, model)
            if value < best_value:
                best_value, best_model = value, model
            grad = exact_return_model_gradient(mdp, policy, model)
            norm = np.linalg.norm(grad)
            if norm < 1e-14:
                break
            delta = (step_size / np.sqrt(1.0 + step)) * grad / norm
            logits = model.logits - delta.reshape(model.logits.shape)
            model = _pulled_into_ball(
                CategoricalWorldModel(logits, anchor.outcome_rewards,
                                      anchor.outcome_next_states),
                anchor, dataset, epsilon)
        value = exact_return(mdp, policy, model)
        if value < best_value:
            best_value, best_model = value, model
    return best_value, best_model


def episode_returns(env: ContinuousMdp, policy, noise_fraction: float,
                    n_episodes: int, seed=0) -> np.ndarray:
    """Per-episode discounted returns under relative transition noise.

    Every episode uses three sub-streams (environment, noise, policy) keyed
    only by the seed and episode index, so runs at different noise fractions
    stay draw-for-draw coupled and the aggregate does not depend on the
    order episodes are evaluated in.
    """
    deploy = NoisyDeployment(env, noise_fraction)
    returns = np.empty(n_episodes)
    for episode in range(n_episodes):
        rng_env = _stream(seed, _EVAL_STREAM, episode, 0)
        rng_noise = _stream(seed, _EVAL_STREAM, episode, 1)
        rng_policy = _stream(seed, _EVAL_STREAM, episode, 2)
        s = deploy.reset(rng_env)
        episode_return = 0.0
        for t in range(env.horizon):
            a = policy.sample(s, rng_policy)
            s, reward = deploy.step(s, a, rng_env, rng_noise)
            episode_return += env.gamma ** t * reward
        returns[episode] = episode_return
    return returns


def deployment_return(env: ContinuousMdp, policy, noise_fraction: float,
                      n_episodes: int, seed=0) -> float:
    """Mean discounted return under relative transition noise."""
    return float(episode_returns(env, policy, noise_fraction, n_episodes,
                                 seed).mean())


def robust_evaluate(env: ContinuousMdp, policy, noise_fraction: float,
                    n_episodes: int = 200, seed=0) -> dict:
    """Paired clean/noisy evaluation with coupled random streams."""
    if not isinstance(env, ContinuousMdp):
        raise TypeError("noisy deployment wraps continuous environments only")
    clean = deployment_return(env, policy, 0.0, n_episodes, seed)
    noisy = deployment_return(env, policy, noise_fraction, n_episodes, seed)
    return {"clean": clean, "noisy": noisy, "degradation": clean - noisy}
