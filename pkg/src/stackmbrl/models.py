"""Parameter vectors, policies, world models, offline datasets, MLE fitting.

All score/gradient functions return dense vectors in the model's flat
parameter layout. Models are value objects: ``with_params`` returns a new
instance, nothing mutates in place.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import TabularMdp

# Softmax logits this low make the associated probability underflow to an
# exact IEEE zero while keeping every parameter entry finite.
LOGIT_FLOOR = -700.0
VAR_FLOOR = 1e-4


class SupportError(ValueError):
    """An observed outcome is impossible under the model's support."""


# ---------------------------------------------------------------------------
# parameter vectors
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """Flat parameter vector plus a named-slice layout.

    layout: tuple of (name, start, stop) covering [0, len(values)) without
    gaps or overlaps, in ascending order.
    """

    values: np.ndarray
    layout: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("parameter values must be a flat vector")
        if not np.isfinite(self.values).all():
            raise ValueError("parameter values must all be finite")
        cursor = 0
        for name, start, stop in self.layout:
            if start != cursor or stop < start:
                raise ValueError(f"layout slice {name!r} breaks contiguity")
            cursor = stop
        if cursor != self.values.size:
            raise ValueError("layout does not cover the value vector")

    def get(self, name: str) -> np.ndarray:
        for key, start, stop in self.layout:
            if key == name:
                return self.values[start:stop]
        raise KeyError(name)

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=float).copy(), self.layout)

    @property
    def size(self) -> int:
        return self.values.size

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "layout": [[name, start, stop] for name, start, stop in self.layout],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @staticmethod
    def load(path: str | Path) -> "ParamVector":
        d = json.loads(Path(path).read_text())
        layout = tuple((n, int(a), int(b)) for n, a, b in d["layout"])
        return ParamVector(np.array(d["values"]), layout)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


# ---------------------------------------------------------------------------
# tabular families
# ---------------------------------------------------------------------------


@dataclass
class SoftmaxPolicy:
    """Tabular softmax policy with one logit per (state, action)."""

    logits: np.ndarray  # (S, A)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.ndim != 2:
            raise ValueError("policy logits must be (S, A)")

    @staticmethod
    def zeros(num_states: int, num_actions: int) -> "SoftmaxPolicy":
        return SoftmaxPolicy(np.zeros((num_states, num_actions)))

    @property
    def num_states(self) -> int:
        return self.logits.shape[0]

    @property
    def num_actions(self) -> int:
        return self.logits.shape[1]

    @property
    def n_params(self) -> int:
        return self.logits.size

    def probs_all(self) -> np.ndarray:
        return _softmax(self.logits)

    def probs(self, s: int) -> np.ndarray:
        return _softmax(self.logits[s])

    def log_prob(self, s: int, a: int) -> float:
        return float(_log_softmax(self.logits[s])[a])

    def score(self, s: int, a: int) -> np.ndarray:
        """d log pi(a|s) / d logits, flattened to the full parameter layout."""
        grad = np.zeros_like(self.logits)
        grad[s] = -self.probs(s)
        grad[s, a] += 1.0
        return grad.ravel()

    def sample(self, s: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.num_actions, p=self.probs(s)))

    @property
    def params(self) -> ParamVector:
        return ParamVector(self.logits.ravel().copy(),
                           (("logits", 0, self.logits.size),))

    def with_params(self, params: ParamVector | np.ndarray) -> "SoftmaxPolicy":
        values = params.values if isinstance(params, ParamVector) else params
        return SoftmaxPolicy(np.asarray(values, dtype=float)
                             .reshape(self.logits.shape).copy())


@dataclass
class CategoricalWorldModel:
    """Joint-categorical world model over a global (reward, next state) alphabet."""

    logits: np.ndarray  # (S, A, K)
    outcome_rewards: np.ndarray  # (K,)
    outcome_next_states: np.ndarray  # (K,) int

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        self.outcome_rewards = np.asarray(self.outcome_rewards, dtype=float)
        self.outcome_next_states = np.asarray(self.outcome_next_states,
                                              dtype=np.int64)
        if self.logits.ndim != 3:
            raise ValueError("model logits must be (S, A, K)")
        k = self.logits.shape[2]
        if self.outcome_rewards.shape != (k,) or self.outcome_next_states.shape != (k,):
            raise ValueError("outcome table must match the logit alphabet")
        self._outcome_index = {
            (float(r), int(s)): i
            for i, (r, s) in enumerate(zip(self.outcome_rewards,
                                           self.outcome_next_states))
        }

    @staticmethod
    def from_mdp(mdp: TabularMdp) -> "CategoricalWorldModel":
        """The true environment expressed in the model family (floored logits)."""
        joint = mdp.joint_outcome_probs()
        with np.errstate(divide="ignore"):
            logits = np.log(joint)
        logits = np.maximum(logits, LOGIT_FLOOR)
        rewards, nexts = mdp.outcome_table()
        return CategoricalWorldModel(logits, rewards, nexts)

    @staticmethod
    def uniform(mdp: TabularMdp) -> "CategoricalWorldModel":
        rewards, nexts = mdp.outcome_table()
        shape = (mdp.num_states, mdp.num_actions, mdp.num_outcomes)
        return CategoricalWorldModel(np.zeros(shape), rewards, nexts)

    @property
    def num_states(self) -> int:
        return self.logits.shape[0]

    @property
    def num_actions(self) -> int:
        return self.logits.shape[1]

    @property
    def num_outcomes(self) -> int:
        return self.logits.shape[2]

    @property
    def n_params(self) -> int:
        return self.logits.size

    def probs_all(self) -> np.ndarray:
        return _softmax(self.logits)

    def probs(self, s: int, a: int) -> np.ndarray:
        return _softmax(self.logits[s, a])

    def outcome_index(self, reward: float, s_next: int) -> int:
        key = (float(reward), int(s_next))
        if key not in self._outcome_index:
            raise SupportError(
                f"observed outcome (r={reward!r}, s'={s_next}) is not in the "
                f"model's outcome alphabet")
        return self._outcome_index[key]

    def log_prob(self, s: int, a: int, k: int) -> float:
        p = self.probs(s, a)[k]
        if p == 0.0:
            raise SupportError(
                f"outcome k={k} has zero probability at (s={s}, a={a})")
        return float(_log_softmax(self.logits[s, a])[k])

    def score(self, s: int, a: int, k: int) -> np.ndarray:
        """d log P(k|s,a) / d logits over the full flat layout."""
        grad = np.zeros_like(self.logits)
        grad[s, a] = -self.probs(s, a)
        grad[s, a, k] += 1.0
        return grad.ravel()

    def sample(self, s: int, a: int,
               rng: np.random.Generator) -> tuple[float, int, int]:
        k = int(rng.choice(self.num_outcomes, p=self.probs(s, a)))
        return float(self.outcome_rewards[k]), int(self.outcome_next_states[k]), k

    @property
    def params(self) -> ParamVector:
        return ParamVector(self.logits.ravel().copy(),
                           (("logits", 0, self.logits.size),))

    def with_params(self, params: ParamVector | np.ndarray) -> "CategoricalWorldModel":
        values = params.values if isinstance(params, ParamVector) else params
        return CategoricalWorldModel(
            np.asarray(values, dtype=float).reshape(self.logits.shape).copy(),
            self.outcome_rewards, self.outcome_next_states)


# ---------------------------------------------------------------------------
# continuous families (diagonal Gaussians with affine features)
# ---------------------------------------------------------------------------


def affine_features(x: np.ndarray) -> np.ndarray:
    """Raw vector with a trailing constant 1."""
    return np.append(np.asarray(x, dtype=float).ravel(), 1.0)


def _gaussian_log_prob(y: np.ndarray, mean: np.ndarray,
                       log_std: np.ndarray) -> float:
    z = (y - mean) / np.exp(log_std)
    return float(-0.5 * (z ** 2).sum() - log_std.sum()
                 - 0.5 * y.size * np.log(2.0 * np.pi))


@dataclass
class DiagGaussianPolicy:
    """Gaussian policy: action mean affine in the state, learned diagonal std."""

    weights: np.ndarray  # (action_dim, state_dim + 1)
    log_std: np.ndarray  # (action_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)
        if self.weights.ndim != 2 or self.log_std.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (action_dim, state_dim + 1) with "
                             "matching log_std")

    @staticmethod
    def zeros(state_dim: int, action_dim: int,
              log_std: float = 0.0) -> "DiagGaussianPolicy":
        return DiagGaussianPolicy(np.zeros((action_dim, state_dim + 1)),
                                  np.full(action_dim, log_std))

    @property
    def action_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.log_std.size

    def mean(self, s: np.ndarray) -> np.ndarray:
        return self.weights @ affine_features(s)

    def log_prob(self, s: np.ndarray, a: np.ndarray) -> float:
        return _gaussian_log_prob(np.asarray(a, dtype=float).ravel(),
                                  self.mean(s), self.log_std)

    def score(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        feats = affine_features(s)
        a = np.asarray(a, dtype=float).ravel()
        std = np.exp(self.log_std)
        z = (a - self.mean(s)) / std
        grad_w = (z / std)[:, None] * feats[None, :]
        grad_log_std = z ** 2 - 1.0
        return np.concatenate([grad_w.ravel(), grad_log_std])

    def sample(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.mean(s) + np.exp(self.log_std) * rng.standard_normal(
            self.action_dim)

    @property
    def params(self) -> ParamVector:
        nw = self.weights.size
        values = np.concatenate([self.weights.ravel(), self.log_std])
        return ParamVector(values, (("weights", 0, nw),
                                    ("log_std", nw, nw + self.log_std.size)))

    def with_params(self, params: ParamVector | np.ndarray) -> "DiagGaussianPolicy":
        values = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=float)
        nw = self.weights.size
        return DiagGaussianPolicy(values[:nw].reshape(self.weights.shape).copy(),
                                  values[nw:].copy())


@dataclass
class DiagGaussianWorldModel:
    """Gaussian world model: joint (s', r) mean affine in (s, a), diagonal std."""

    weights: np.ndarray  # (state_dim + 1, state_dim + action_dim + 1)
    log_std: np.ndarray  # (state_dim + 1,)
    state_dim: int
    action_dim: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)
        out, feat = self.state_dim + 1, self.state_dim + self.action_dim + 1
        if self.weights.shape != (out, feat) or self.log_std.shape != (out,):
            raise ValueError("weights must be (d+1, d+adim+1) with matching log_std")

    @staticmethod
    def zeros(state_dim: int, action_dim: int,
              log_std: float = 0.0) -> "DiagGaussianWorldModel":
        return DiagGaussianWorldModel(
            np.zeros((state_dim + 1, state_dim + action_dim + 1)),
            np.full(state_dim + 1, log_std), state_dim, action_dim)

    @property
    def n_params(self) -> int:
        return self.weights.size + self.log_std.size

    def _features(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return affine_features(np.concatenate([np.asarray(s, dtype=float).ravel(),
                                               np.asarray(a, dtype=float).ravel()]))

    def mean(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self.weights @ self._features(s, a)

    def log_prob(self, s: np.ndarray, a: np.ndarray, y: np.ndarray) -> float:
        """y is the joint observation (s', r), reward last."""
        return _gaussian_log_prob(np.asarray(y, dtype=float).ravel(),
                                  self.mean(s, a), self.log_std)

    def score(self, s: np.ndarray, a: np.ndarray, y: np.ndarray) -> np.ndarray:
        feats = self._features(s, a)
        y = np.asarray(y, dtype=float).ravel()
        std = np.exp(self.log_std)
        z = (y - self.mean(s, a)) / std
        grad_w = (z / std)[:, None] * feats[None, :]
        grad_log_std = z ** 2 - 1.0
        return np.concatenate([grad_w.ravel(), grad_log_std])

    def sample(self, s: np.ndarray, a: np.ndarray,
               rng: np.random.Generator) -> tuple[np.ndarray, float]:
        mean = self.mean(s, a)
        if not np.isfinite(mean).all():
            from .mdp import SamplingError
            raise SamplingError("world model produced a non-finite mean")
        draw = mean + np.exp(self.log_std) * rng.standard_normal(mean.size)
        return draw[:-1], float(draw[-1])

    @property
    def params(self) -> ParamVector:
        nw = self.weights.size
        values = np.concatenate([self.weights.ravel(), self.log_std])
        return ParamVector(values, (("weights", 0, nw),
                                    ("log_std", nw, nw + self.log_std.size)))

    def with_params(self, params: ParamVector | np.ndarray) -> "DiagGaussianWorldModel":
        values = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=float)
        nw = self.weights.size
        return DiagGaussianWorldModel(
            values[:nw].reshape(self.weights.shape).copy(), values[nw:].copy(),
            self.state_dim, self.action_dim)


# ---------------------------------------------------------------------------
# offline datasets
# ---------------------------------------------------------------------------


def _cell_key(s, a):
    if np.ndim(s) == 0 and np.ndim(a) == 0:
        return (int(s), int(a))
    # plain-float tuples so keys print cleanly in error messages
    return (tuple(map(float, np.round(np.atleast_1d(np.asarray(s, dtype=float)), 12))),
            tuple(map(float, np.round(np.atleast_1d(np.asarray(a, dtype=float)), 12))))


@dataclass
class OfflineDataset:
    """Bag of (s, a, r, s') transitions collected by a behavior policy."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=float)
        n = len(self.rewards)
        if not (len(self.states) == len(self.actions) == len(self.next_states) == n):
            raise ValueError("dataset columns must have equal length")
        if n == 0:
            raise ValueError("dataset must contain at least one transition")

    @property
    def n(self) -> int:
        return len(self.rewards)

    @property
    def is_tabular(self) -> bool:
        return np.ndim(self.states[0]) == 0 and not isinstance(
            self.states[0], (float, np.floating))

    def cell_counts(self) -> dict:
        counts: dict = {}
        for s, a in zip(self.states, self.actions):
            key = _cell_key(s, a)
            counts[key] = counts.get(key, 0) + 1
        return counts

    def max_cell_count(self) -> int:
        return max(self.cell_counts().values())

    def num_cells(self) -> int:
        return len(self.cell_counts())

    def minibatch_indices(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.n, size=size)

    def save_csv(self, path: str | Path) -> None:
        from .mdp import _format_state
        with open(path, "w", newline="") as fh:
            import csv as _csv
            writer = _csv.writer(fh)
            writer.writerow(["episode", "t", "s", "a", "r", "s_next",
                             "logp_policy", "logp_model"])
            for i in range(self.n):
                writer.writerow([0, i, _format_state(self.states[i]),
                                 _format_state(self.actions[i]),
                                 repr(float(self.rewards[i])),
                                 _format_state(self.next_states[i]),
                                 repr(0.0), repr(0.0)])

    @staticmethod
    def load_csv(path: str | Path) -> "OfflineDataset":
        from .mdp import load_transitions_csv
        rows = load_transitions_csv(path)
        if not rows:
            raise ValueError(f"no transitions in {path}")
        return OfflineDataset(
            states=np.array([r["s"] for r in rows]),
            actions=np.array([r["a"] for r in rows]),
            rewards=np.array([r["r"] for r in rows]),
            next_states=np.array([r["s_next"] for r in rows]),
        )

    @staticmethod
    def from_trajectories(trajectories) -> "OfflineDataset":
        states, actions, rewards, nexts = [], [], [], []
        for tr in trajectories:
            for t in range(tr.n_steps):
                states.append(tr.states[t])
                actions.append(tr.actions[t])
                rewards.append(tr.rewards[t])
                nexts.append(tr.states[t + 1])
        return OfflineDataset(np.array(states), np.array(actions),
                              np.array(rewards), np.array(nexts))


# ---------------------------------------------------------------------------
# divergences
# ---------------------------------------------------------------------------


def categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with the 0 log 0 = 0 convention; infinite if q misses p's support."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if (q[mask] == 0).any():
        return float("inf")
    return float((p[mask] * (np.log(p[mask]) - np.log(q[mask]))).sum())


def categorical_tv(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def gaussian_kl(mean_p: np.ndarray, var_p: np.ndarray, mean_q: np.ndarray,
                var_q: np.ndarray) -> float:
    """KL between diagonal Gaussians, summed over dimensions."""
    mean_p, var_p = np.atleast_1d(mean_p), np.atleast_1d(var_p)
    mean_q, var_q = np.atleast_1d(mean_q), np.atleast_1d(var_q)
    ratio = var_p / var_q
    return float(0.5 * (ratio - np.log(ratio) - 1.0
                        + (mean_q - mean_p) ** 2 / var_q).sum())


# ---------------------------------------------------------------------------
# maximum likelihood
# ---------------------------------------------------------------------------


def mle_fit(dataset: OfflineDataset, template, alpha: float = 0.0,
            var_floor: float = VAR_FLOOR):
    """Fit the template's family to the dataset by maximum likelihood.

    Categorical models use per-cell empirical frequencies (optional additive
    smoothing ``alpha``; default 0 so oracle tests see the exact MLE).
    Gaussian models use least squares for the affine mean and the biased
    residual variance per output dimension, floored at ``var_floor``.
    """
    if isinstance(template, CategoricalWorldModel):
        return _mle_categorical(dataset, template, alpha)
    if isinstance(template, DiagGaussianWorldModel):
        return _mle_linear_gaussian(dataset, template, var_floor)
    raise TypeError(f"no MLE recipe for {type(template).__name__}")


def _mle_categorical(dataset: OfflineDataset, template: CategoricalWorldModel,
                     alpha: float) -> CategoricalWorldModel:
    s_dim, a_dim, k_dim = template.logits.shape
    counts = np.zeros((s_dim, a_dim, k_dim))
    for s, a, r, s2 in zip(dataset.states, dataset.actions, dataset.rewards,
                           dataset.next_states):
        k = template.outcome_index(float(r), int(s2))
        counts[int(s), int(a), k] += 1.0
    counts += alpha
    totals = counts.sum(axis=-1, keepdims=True)
    unvisited = np.nonzero(totals[..., 0] == 0)
    if unvisited[0].size:
        # No observations at all for these cells: fall back to the uniform prior
        cells = list(zip(*[idx.tolist() for idx in unvisited]))
        warnings.warn(f"MLE fallback to uniform at unvisited cells {cells}")
        counts[totals[..., 0] == 0] = 1.0
        totals = counts.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        logits = np.log(counts / totals)
    logits = np.maximum(logits, LOGIT_FLOOR)
    return CategoricalWorldModel(logits, template.outcome_rewards,
                                 template.outcome_next_states)


def _mle_linear_gaussian(dataset: OfflineDataset,
                         template: DiagGaussianWorldModel,
                         var_floor: float) -> DiagGaussianWorldModel:
    feats = np.array([template._features(s, a)
                      for s, a in zip(dataset.states, dataset.actions)])
    targets = np.array([np.append(np.atleast_1d(s2).astype(float), r)
                        for s2, r in zip(dataset.next_states, dataset.rewards)])
    if dataset.n < 2:
        warnings.warn("Gaussian MLE on fewer than 2 transitions is degenerate")
    if np.linalg.matrix_rank(feats) < feats.shape[1]:
        warnings.warn("Gaussian MLE design matrix is rank-deficient; "
                      "using the least-norm solution")
    weights, *_ = np.linalg.lstsq(feats, targets, rcond=None)
    residuals = targets - feats @ weights
    variance = np.maximum((residuals ** 2).mean(axis=0), var_floor)
    return DiagGaussianWorldModel(weights.T, 0.5 * np.log(variance),
                                  template.state_dim, template.action_dim)


@dataclass
class GaussianCells:
    """Per-cell diagonal Gaussians keyed by exact (s, a) cells.

    Used when the same state-action pair is probed repeatedly: each cell gets
    its own mean/variance over the (d+1)-dimensional joint (s', r) outcome,
    which is what the per-cell concentration radius reasons about.
    """

    cells: dict  # key -> (mean (d+1,), var (d+1,))

    def kl_per_cell(self, other: "GaussianCells") -> dict:
        out = {}
        for key, (mean_p, var_p) in self.cells.items():
            mean_q, var_q = other.cells[key]
            out[key] = gaussian_kl(mean_p, var_p, mean_q, var_q)
        return out


def mle_fit_cells(dataset: OfflineDataset, var_floor: float = VAR_FLOOR,
                  min_count: int = 2) -> GaussianCells:
    """Per-cell Gaussian MLE: sample mean and biased sample variance."""
    groups: dict = {}
    for s, a, r, s2 in zip(dataset.states, dataset.actions, dataset.rewards,
                           dataset.next_states):
        key = _cell_key(s, a)
        y = np.append(np.atleast_1d(s2).astype(float), r)
        groups.setdefault(key, []).append(y)
    cells = {}
    for key, ys in groups.items():
        if len(ys) < min_count:
            warnings.warn(f"cell {key} has n={len(ys)} < {min_count}; "
                          "fit is degenerate")
        arr = np.array(ys)
        mean = arr.mean(axis=0)
        var = np.maximum(((arr - mean) ** 2).mean(axis=0), var_floor)
        cells[key] = (mean, var)
    return GaussianCells(cells)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def sample_offline_dataset(mdp: TabularMdp, policy, n: int, seed=0,
                           state_dist: np.ndarray | None = None) -> OfflineDataset:
    """I.i.d. behavior dataset: s from ``state_dist`` (uniform by default),
    a from the behavior policy, (r, s') from the true environment."""
    from .mdp import _as_rng, _draw_categorical_rows, _policy_probs

    rng = _as_rng(seed)
    if state_dist is None:
        state_dist = np.full(mdp.num_states, 1.0 / mdp.num_states)
    states = rng.choice(mdp.num_states, size=n, p=state_dist)
    actions = _draw_categorical_rows(_policy_probs(policy, mdp)[states], rng)
    outcomes = _draw_categorical_rows(
        mdp.joint_outcome_probs()[states, actions], rng)
    rewards_tab, nexts_tab = mdp.outcome_table()
    return OfflineDataset(states=states, actions=actions,
                          rewards=rewards_tab[outcomes],
                          next_states=nexts_tab[outcomes])


def rollout_dataset(env, policy, n_episodes: int, seed=0) -> OfflineDataset:
    """Offline transitions collected by rolling a behavior policy in the true
    environment (one shared seed stream, one sub-seed per episode)."""
    from .mdp import sample_trajectory

    trajectories = [sample_trajectory(env, policy, seed=(seed, episode))
                    for episode in range(n_episodes)]
    return OfflineDataset.from_trajectories(trajectories)
