"""Fixed test environments with independently known answers.

Every instance here is frozen: probabilities or model parameters are either
literal or derived from a hard-coded seed, so oracle values computed against
them stay valid. Nothing in this module is tuned to make a test pass; the
closed-form rest points are hand-derived from first-order conditions and the
layered MDP's zero-error property follows from its structure (every rollout
pays exactly one terminal reward, so per-cell continuation values are
constant).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dynamics import SmoothGame
from .mdp import ContinuousMdp, TabularMdp
from .models import (LOGIT_FLOOR, CategoricalWorldModel, DiagGaussianPolicy,
                     DiagGaussianWorldModel, SoftmaxPolicy)

# ---------------------------------------------------------------------------
# tabular instances
# ---------------------------------------------------------------------------


def gradient_mdp() -> TabularMdp:
    """3-state / 2-action / horizon-3 MDP with dense generic tables."""
    transition = np.array([
        [[0.50, 0.30, 0.20], [0.10, 0.60, 0.30]],
        [[0.25, 0.25, 0.50], [0.40, 0.20, 0.40]],
        [[0.30, 0.45, 0.25], [0.20, 0.30, 0.50]],
    ])
    reward_probs = np.array([
        [[0.70, 0.30], [0.45, 0.55]],
        [[0.20, 0.80], [0.60, 0.40]],
        [[0.35, 0.65], [0.50, 0.50]],
    ])
    return TabularMdp(transition=transition,
                      reward_values=np.array([0.2, 0.9]),
                      reward_probs=reward_probs,
                      init_dist=np.array([0.5, 0.3, 0.2]),
                      gamma=0.9, horizon=3)


def gradient_testbed() -> tuple[TabularMdp, SoftmaxPolicy, CategoricalWorldModel]:
    """The (environment, policy, model) triple used by the gradient oracles.

    The policy is generic (no symmetry), and the model is the true
    environment's table nudged by a seeded perturbation so that model and
    environment disagree everywhere.
    """
    mdp = gradient_mdp()
    policy = SoftmaxPolicy(np.array([[0.3, -0.4], [-0.2, 0.5], [0.1, -0.1]]))
    base = CategoricalWorldModel.from_mdp(mdp)
    rng = np.random.default_rng(20240517)
    logits = base.logits + 0.3 * rng.standard_normal(base.logits.shape)
    model = CategoricalWorldModel(logits, base.outcome_rewards,
                                  base.outcome_next_states)
    return mdp, policy, model


def small_mdp() -> TabularMdp:
    """2-state / 2-action / horizon-3 MDP (4-letter outcome alphabet)."""
    transition = np.array([
        [[0.70, 0.30], [0.35, 0.65]],
        [[0.50, 0.50], [0.20, 0.80]],
    ])
    reward_probs = np.array([
        [[0.60, 0.40], [0.30, 0.70]],
        [[0.80, 0.20], [0.45, 0.55]],
    ])
    return TabularMdp(transition=transition,
                      reward_values=np.array([0.1, 0.8]),
                      reward_probs=reward_probs,
                      init_dist=np.array([0.6, 0.4]),
                      gamma=0.9, horizon=3)


def small_testbed() -> tuple[TabularMdp, SoftmaxPolicy, CategoricalWorldModel]:
    mdp = small_mdp()
    policy = SoftmaxPolicy(np.array([[0.2, -0.3], [-0.1, 0.4]]))
    base = CategoricalWorldModel.from_mdp(mdp)
    rng = np.random.default_rng(777)
    logits = base.logits + 0.25 * rng.standard_normal(base.logits.shape)
    model = CategoricalWorldModel(logits, base.outcome_rewards,
                                  base.outcome_next_states)
    return mdp, policy, model


def sparse_reward_testbed() -> tuple[TabularMdp, SoftmaxPolicy,
                                     CategoricalWorldModel]:
    """Layered MDP whose only reward is the final transition into absorption.

    States: 0 start, 1-2 middle layer, 3-4 pre-terminal layer, 5 absorbing.
    Every trajectory of horizon 3 collects reward 1.0 exactly once, on the
    step from the pre-terminal layer into the absorbing state. Because each
    cell's outcomes all share the same continuation value, the score-product
    substitution for the log-density Hessian is exact here (up to the
    floor-probability dust of impossible outcomes).
    """
    s_n, a_n = 6, 2
    transition = np.zeros((s_n, a_n, s_n))
    transition[0, 0, [1, 2]] = [0.55, 0.45]
    transition[0, 1, [1, 2]] = [0.30, 0.70]
    transition[1, 0, [3, 4]] = [0.60, 0.40]
    transition[1, 1, [3, 4]] = [0.25, 0.75]
    transition[2, 0, [3, 4]] = [0.50, 0.50]
    transition[2, 1, [3, 4]] = [0.80, 0.20]
    transition[3, :, 5] = 1.0
    transition[4, :, 5] = 1.0
    transition[5, :, 5] = 1.0
    reward_probs = np.zeros((s_n, a_n, 2))
    reward_probs[:, :, 0] = 1.0          # reward 0 everywhere ...
    reward_probs[[3, 4]] = [0.0, 1.0]    # ... except leaving the pre-layer
    mdp = TabularMdp(transition=transition,
                     reward_values=np.array([0.0, 1.0]),
                     reward_probs=reward_probs,
                     init_dist=np.array([1.0, 0, 0, 0, 0, 0]),
                     gamma=0.9, horizon=3)
    rng = np.random.default_rng(4242)
    policy = SoftmaxPolicy(0.4 * rng.standard_normal((s_n, a_n)))
    base = CategoricalWorldModel.from_mdp(mdp)
    live = base.logits > 0.5 * LOGIT_FLOOR
    logits = base.logits + live * 0.35 * rng.standard_normal(base.logits.shape)
    model = CategoricalWorldModel(logits, base.outcome_rewards,
                                  base.outcome_next_states)
    return mdp, policy, model


# ---------------------------------------------------------------------------
# scalar games with hand-derived rest points
# ---------------------------------------------------------------------------

_GENERIC_CHECK = ((np.array([0.4]), np.array([0.9]), 1.3),)


def matching_game(anchor: float = 0.3, radius: float = 0.04) -> SmoothGame:
    """J = -(theta - phi)^2 with constraint gap (phi - anchor)^2 - radius.

    The leader chases the adversary; the adversary flees within a ball
    around the anchor. Good for the fixed-multiplier dynamics; see
    ``matching_boundary_kkt`` for why the constrained dynamics cannot
    settle at this game's boundary rest candidates.
    """

    def objective(theta, phi):
        return -float((theta[0] - phi[0]) ** 2)

    def gap(phi):
        return float((phi[0] - anchor) ** 2 - radius)

    return SmoothGame(
        objective=objective,
        constraint_gap=gap,
        grad_theta=lambda t, p: np.array([-2.0 * (t[0] - p[0])]),
        grad_phi_objective=lambda t, p: np.array([2.0 * (t[0] - p[0])]),
        grad_phi_gap=lambda p: np.array([2.0 * (p[0] - anchor)]),
        hess_phi_lagrangian=lambda t, p, lam: np.array([[2.0 * lam - 2.0]]),
        mixed_hessian=lambda t, p, lam: np.array([[2.0]]),
        check_points=_GENERIC_CHECK,
    )


def matching_lse(anchor: float = 0.3) -> tuple[float, float]:
    """Rest point of the corrected dynamics with the multiplier frozen at 2.

    Follower response: phi(theta) = 2*anchor - theta; the leader's corrected
    payoff -4 (theta - anchor)^2 peaks at theta = anchor, where the response
    returns to the anchor as well.
    """
    return anchor, anchor


def matching_boundary_kkt(anchor: float = 0.3, radius: float = 0.04,
                          side: int = 1) -> tuple[float, float, float]:
    """First-order boundary triple (anchor, anchor +/- sqrt(radius), 1).

    This satisfies stationarity of the penalized adversary, feasibility, and
    complementary slackness, but it is NOT a fixed point of the constrained
    update: with a single adversary parameter pinned to an active boundary,
    the leader's corrected direction degenerates to the raw partial
    -2(theta - phi) = -/+ 2 sqrt(radius) != 0. The only exact fixed points of
    the constrained stepper on this game form the degenerate interior family
    {theta = phi, |phi - anchor| <= sqrt(radius), multiplier = 0}, and those
    are unstable to rounding noise, so no initialization-robust convergence
    target exists here. Kept for the documented negative test.
    """
    return anchor, anchor + side * float(np.sqrt(radius)), 1.0


def coupling_game(anchor: float = 0.7, radius: float = 0.16,
                  coupling: float = 1.0) -> SmoothGame:
    """J = -theta^2 + 2 c theta phi, gap = (phi - anchor)^2 - radius.

    Linear adversary influence keeps the penalized adversary strictly convex
    for every positive multiplier, and the active boundary point is unique,
    so the constrained dynamics has a regular attractor (unlike the matching
    game). This is the canonical quadratic testbed for convergence checks.
    """
    c = float(coupling)

    def objective(theta, phi):
        return float(-theta[0] ** 2 + 2.0 * c * theta[0] * phi[0])

    def gap(phi):
        return float((phi[0] - anchor) ** 2 - radius)

    return SmoothGame(
        objective=objective,
        constraint_gap=gap,
        grad_theta=lambda t, p: np.array([-2.0 * t[0] + 2.0 * c * p[0]]),
        grad_phi_objective=lambda t, p: np.array([2.0 * c * t[0]]),
        grad_phi_gap=lambda p: np.array([2.0 * (p[0] - anchor)]),
        hess_phi_lagrangian=lambda t, p, lam: np.array([[2.0 * lam]]),
        mixed_hessian=lambda t, p, lam: np.array([[2.0 * c]]),
        check_points=_GENERIC_CHECK,
    )


def coupling_lse(anchor: float = 0.7, lam_fixed: float = 2.0,
                 coupling: float = 1.0) -> tuple[float, float]:
    """Fixed-multiplier rest point of the corrected dynamics.

    Follower response phi(theta) = anchor - c theta / lam; substituting into
    J and maximizing gives theta* = c * anchor * lam / (lam + 2 c^2).
    """
    c = float(coupling)
    theta = c * anchor * lam_fixed / (lam_fixed + 2.0 * c * c)
    return theta, anchor - c * theta / lam_fixed


def coupling_kkt(anchor: float = 0.7, radius: float = 0.16,
                 coupling: float = 1.0) -> tuple[float, float, float]:
    """Constrained rest point (c(anchor - r), anchor - r, c^2(anchor - r)/r)
    with r = sqrt(radius); requires anchor > sqrt(radius) > 0.

    The adversary (for positive theta) pushes phi to the lower boundary;
    adversary stationarity fixes the multiplier; at an exactly-active
    constraint the leader's corrected direction reduces to the raw partial
    -2 theta + 2 c phi, which vanishes at theta = c phi. All three updates
    are simultaneously stationary, and the point is attracting.
    """
    root = float(np.sqrt(radius))
    if not anchor > root > 0.0:
        raise ValueError("need anchor > sqrt(radius) > 0 for a unique "
                         "active boundary point")
    c = float(coupling)
    phi = anchor - root
    return c * phi, phi, c * c * phi / root


def follower_best_response(theta: float, anchor: float, lam: float,
                           coupling: float = 1.0) -> float:
    """Minimizer of the coupling game's penalized adversary objective."""
    if lam <= 0.0:
        raise ValueError("the penalized adversary objective is only convex "
                         "for positive multipliers")
    return anchor - coupling * theta / lam


def bilinear_game() -> SmoothGame:
    """J = theta * phi, no constraint: the classic non-converging example."""

    def objective(theta, phi):
        return float(theta[0] * phi[0])

    return SmoothGame(
        objective=objective,
        constraint_gap=lambda p: 0.0,
        grad_theta=lambda t, p: np.array([p[0]]),
        grad_phi_objective=lambda t, p: np.array([t[0]]),
        grad_phi_gap=lambda p: np.array([0.0]),
        hess_phi_lagrangian=lambda t, p, lam: np.array([[0.0]]),
        mixed_hessian=lambda t, p, lam: np.array([[1.0]]),
        check_points=_GENERIC_CHECK,
    )


def saddle_game() -> SmoothGame:
    """J = -theta^2 + theta*phi + phi^2: strongly convex for the follower,
    strongly concave along the follower's response; rest point (0, 0)."""

    def objective(theta, phi):
        return float(-theta[0] ** 2 + theta[0] * phi[0] + phi[0] ** 2)

    return SmoothGame(
        objective=objective,
        constraint_gap=lambda p: 0.0,
        grad_theta=lambda t, p: np.array([-2.0 * t[0] + p[0]]),
        grad_phi_objective=lambda t, p: np.array([t[0] + 2.0 * p[0]]),
        grad_phi_gap=lambda p: np.array([0.0]),
        hess_phi_lagrangian=lambda t, p, lam: np.array([[2.0]]),
        mixed_hessian=lambda t, p, lam: np.array([[1.0]]),
        check_points=_GENERIC_CHECK,
    )


# ---------------------------------------------------------------------------
# continuous tracking task
# ---------------------------------------------------------------------------

TRACKING_DEFAULTS = {
    "target": 1.0,
    "peak_width": 0.12,
    "state_std": 0.05,
    "reward_std": 0.02,
    "start": -1.0,
    "start_std": 0.05,
    "gamma": 0.95,
    "horizon": 8,
}


def tracking_mdp(**overrides) -> ContinuousMdp:
    """1-D position tracking with a narrow reward peak.

    The state moves by exactly the chosen action (plus emission noise); the
    reward is a Gaussian bump around the target. Reaching the peak fast needs
    large moves, but under movement-proportional deployment noise large moves
    overshoot the narrow peak — which is what separates cautious from
    aggressive policies in the robustness study.
    """
    p = dict(TRACKING_DEFAULTS)
    p.update(overrides)
    target, width = float(p["target"]), float(p["peak_width"])

    def mean_fn(s: np.ndarray, a: np.ndarray) -> np.ndarray:
        pos = s[0] + a[0]
        reward = np.exp(-0.5 * ((pos - target) / width) ** 2)
        return np.array([pos, reward])

    return ContinuousMdp(
        state_dim=1, action_dim=1, mean_fn=mean_fn,
        std=np.array([p["state_std"], p["reward_std"]]),
        init_mean=np.array([p["start"]]), init_std=np.array([p["start_std"]]),
        gamma=float(p["gamma"]), horizon=int(p["horizon"]),
        name="tracking", params=p)


def tracking_behavior_policy(mdp: ContinuousMdp) -> DiagGaussianPolicy:
    """Exploratory proportional controller used to collect offline data."""
    target = float(mdp.params["target"])
    gain = 0.5
    weights = np.array([[-gain, gain * target]])  # action = gain*(target - s)
    return DiagGaussianPolicy(weights, np.log([0.4]))


def tracking_model_template(mdp: ContinuousMdp) -> DiagGaussianWorldModel:
    """Zero-initialized linear-Gaussian world model shaped for the task."""
    return DiagGaussianWorldModel.zeros(mdp.state_dim, mdp.action_dim)


# ---------------------------------------------------------------------------
# registry and environment I/O
# ---------------------------------------------------------------------------

CONTINUOUS_TESTBEDS = {
    "tracking": tracking_mdp,
}


def continuous_from_dict(payload: dict) -> ContinuousMdp:
    name = payload.get("name")
    if name not in CONTINUOUS_TESTBEDS:
        raise ValueError(f"unknown continuous environment {name!r}; "
                         f"registered: {sorted(CONTINUOUS_TESTBEDS)}")
    return CONTINUOUS_TESTBEDS[name](**payload.get("params", {}))


def load_environment(path) -> TabularMdp | ContinuousMdp:
    """Load either environment kind from its JSON file."""
    payload = json.loads(Path(path).read_text())
    kind = payload.get("kind")
    if kind == "tabular":
        return TabularMdp.load(path)
    if kind == "continuous":
        return continuous_from_dict(payload)
    raise ValueError(f"unrecognized environment kind {kind!r}")


TABULAR_TESTBEDS = {
    "gradient": gradient_testbed,
    "small": small_testbed,
    "sparse": sparse_reward_testbed,
}
