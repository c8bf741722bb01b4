"""Soft actor-critic with a separate soft state-value network.

Networks: a squashed-Gaussian actor, two Q critics with slowly blended
target copies, and a state-value network ``V``.  Per gradient step the
value net, the critics, the actor, the target critics and the temperature
are updated in that order.

Target blending follows ``target <- tau * target + (1 - tau) * online``, so
``tau`` close to one means slow tracking.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .neuralnet import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    SQUASH_EPS,
    GaussianPolicyOutput,
    Network,
    OptimizerState,
    adam_update,
    backward,
    forward,
    mlp,
    note_branch,
    predict,
    sample_squashed_action,
)

log = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class InvalidTrainerConfig(ValueError):
    pass


# ------------------------------------------------------------------ #
# Configuration
# ------------------------------------------------------------------ #
@dataclass
class TrainerConfig:
    gamma: float = 0.99
    tau: float = 0.995
    buffer_capacity: int = 1_000_000
    batch_size: int = 256
    gradient_steps: int = 1
    actor_lr: Tuple[float, float] = (3e-4, 3e-5)
    critic_lr: Tuple[float, float] = (3e-4, 3e-5)
    value_lr: Tuple[float, float] = (3e-4, 3e-5)
    alpha_lr: Tuple[float, float] = (3e-4, 3e-5)
    initial_alpha: float = 0.2
    target_entropy: Optional[float] = None  # None -> minus the action dimension
    exploration_noise: float = 0.1
    hidden_sizes: Tuple[int, ...] = (256, 256)
    episodes: int = 40_000
    warmup_steps: int = 1_000
    update_after: int = 1_000
    eval_every: int = 40
    eval_trials: int = 5
    eval_episode_length: Optional[int] = None
    scale_inputs: bool = True  # use the environment's observation_scale, if it has one
    seed: int = 0

    def validate(self) -> "TrainerConfig":
        def bad(name, why):
            raise InvalidTrainerConfig(f"trainer.{name}: {why}")

        if not 0.0 < self.gamma <= 1.0:
            bad("gamma", "must lie in (0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            bad("tau", "must lie in [0, 1]")
        if self.buffer_capacity < 1:
            bad("buffer_capacity", "must be >= 1")
        if not 1 <= self.batch_size <= self.buffer_capacity:
            bad("batch_size", "must be between 1 and buffer_capacity")
        if self.gradient_steps < 0:
            bad("gradient_steps", "must be >= 0")
        for name in ("actor_lr", "critic_lr", "value_lr", "alpha_lr"):
            pair = getattr(self, name)
            if len(pair) != 2 or min(pair) <= 0:
                bad(name, "need [initial, final] with both > 0")
        if not self.initial_alpha > 0:
            bad("initial_alpha", "must be > 0")
        if self.exploration_noise < 0:
            bad("exploration_noise", "must be >= 0")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            bad("hidden_sizes", "need at least one positive width")
        if self.episodes < 1:
            bad("episodes", "must be >= 1")
        if self.warmup_steps < 0 or self.update_after < 0:
            bad("warmup_steps", "must be >= 0")
        if self.eval_every < 1 or self.eval_trials < 1:
            bad("eval_every", "eval cadence and trials must be >= 1")
        if self.eval_episode_length is not None and self.eval_episode_length < 1:
            bad("eval_episode_length", "must be >= 1")
        if not isinstance(self.scale_inputs, bool):
            bad("scale_inputs", "must be true or false")
        return self

    def entropy_target(self, action_dim: int) -> float:
        return -float(action_dim) if self.target_entropy is None else float(self.target_entropy)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise InvalidTrainerConfig(f"trainer.{unknown[0]}: unknown key")
        kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise InvalidTrainerConfig(f"trainer: {exc}") from None
        return cfg.validate()


# ------------------------------------------------------------------ #
# Replay buffer
# ------------------------------------------------------------------ #
@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored in flat arrays."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> "ReplayBuffer":
        if not np.isfinite(t.r):
            raise ValueError("transition reward must be finite")
        i = self.cursor
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = t.s, t.a, t.r, t.s2, float(t.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return self

    def indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n > self.size:
            raise InsufficientDataError(f"asked for {n} transitions, buffer holds {self.size}")
        return rng.choice(self.size, size=n, replace=False)

    def sample(self, n: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        idx = self.indices(n, rng)
        return self.gather(idx)

    def gather(self, idx: np.ndarray) -> Dict[str, np.ndarray]:
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx],
                "s2": self.s2[idx], "done": self.done[idx]}

    def transition(self, i: int) -> Transition:
        return Transition(self.s[i].copy(), self.a[i].copy(), float(self.r[i]),
                          self.s2[i].copy(), bool(self.done[i]))

    def oldest_first(self) -> List[Transition]:
        start = self.cursor if self.size == self.capacity else 0
        return [self.transition((start + k) % self.capacity) for k in range(self.size)]


def buffer_push(buf: ReplayBuffer, t: Transition) -> ReplayBuffer:
    return buf.push(t)


def buffer_sample(buf: ReplayBuffer, n: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return buf.sample(n, rng)


# ------------------------------------------------------------------ #
# Networks
# ------------------------------------------------------------------ #
NET_NAMES = ("actor", "critic1", "critic2", "target1", "target2", "value")
TRAINED_NETS = ("actor", "critic1", "critic2", "value")


@dataclass
class NetworksBundle:
    actor: Network
    critic1: Network
    critic2: Network
    target1: Network
    target2: Network
    value: Network
    log_alpha: float
    optimizers: Dict[str, OptimizerState] = field(default_factory=dict)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    @property
    def action_dim(self) -> int:
        return self.actor.out_dim // 2

    @property
    def obs_dim(self) -> int:
        return self.actor.in_dim

    def networks(self) -> Dict[str, Network]:
        return {name: getattr(self, name) for name in NET_NAMES}

    def copy(self) -> "NetworksBundle":
        return NetworksBundle(
            *(getattr(self, n).copy() for n in NET_NAMES), self.log_alpha,
            {k: v.copy() for k, v in self.optimizers.items()},
        )


def make_bundle(obs_dim: int, action_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                initial_alpha: float = 0.2, obs_scale: Optional[np.ndarray] = None) -> NetworksBundle:
    """Fresh networks; ``obs_scale`` becomes the fixed input scale of every network."""
    hidden = list(hidden)
    sa_scale = None if obs_scale is None else np.concatenate([obs_scale, np.ones(action_dim)])
    actor = mlp([obs_dim, *hidden, 2 * action_dim], rng, out_scale=0.01, input_scale=obs_scale)
    critic1 = mlp([obs_dim + action_dim, *hidden, 1], rng, input_scale=sa_scale)
    critic2 = mlp([obs_dim + action_dim, *hidden, 1], rng, input_scale=sa_scale)
    value = mlp([obs_dim, *hidden, 1], rng, input_scale=obs_scale)
    bundle = NetworksBundle(actor, critic1, critic2, critic1.copy(), critic2.copy(), value,
                            math.log(initial_alpha))
    for name in TRAINED_NETS:
        bundle.optimizers[name] = OptimizerState.for_params(getattr(bundle, name).params())
    bundle.optimizers["log_alpha"] = OptimizerState.for_params([np.zeros(1)])
    return bundle


# ------------------------------------------------------------------ #
# Policy sampling with everything needed for the reparameterised gradient
# ------------------------------------------------------------------ #
@dataclass
class PolicySample:
    action: np.ndarray
    log_prob: np.ndarray
    noise: np.ndarray
    out: GaussianPolicyOutput
    cache: object


def policy_sample(actor: Network, s: np.ndarray, noise: np.ndarray) -> PolicySample:
    raw, cache = forward(actor, s)
    out = GaussianPolicyOutput.from_network_output(raw)
    a, logp = sample_squashed_action(out, noise)
    return PolicySample(a, logp, noise, out, cache)


def deterministic_action(actor: Network, s: np.ndarray) -> np.ndarray:
    raw = predict(actor, s)
    return np.tanh(raw[..., : actor.out_dim // 2])


def _q_min(c1: Network, c2: Network, sa: np.ndarray) -> np.ndarray:
    q1, q2 = predict(c1, sa)[:, 0], predict(c2, sa)[:, 0]
    note_branch(q1 <= q2)
    return np.minimum(q1, q2)


# ------------------------------------------------------------------ #
# Losses
# ------------------------------------------------------------------ #
def value_loss_and_grads(
    bundle: NetworksBundle, batch: Dict[str, np.ndarray], alpha: float,
    noise: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None,
    sample: Optional[PolicySample] = None, use_target_critics: bool = True,
) -> Tuple[float, List[np.ndarray]]:
    """Half mean-squared error between ``V(s)`` and the soft value estimate.

    The estimate is ``min_j Q_j(s, a) - alpha * log pi(a|s)`` with ``a`` drawn
    fresh from the current policy; only the value network receives
    gradients.  ``use_target_critics`` selects the slowly blended critic
    copies for the estimate.
    """
    s = batch["s"]
    if sample is None:
        if noise is None:
            noise = (rng or np.random.default_rng()).standard_normal((len(s), bundle.action_dim))
        sample = policy_sample(bundle.actor, s, noise)
    c1, c2 = (bundle.target1, bundle.target2) if use_target_critics else (bundle.critic1, bundle.critic2)
    target = _q_min(c1, c2, np.hstack([s, sample.action])) - alpha * sample.log_prob
    v, cache = forward(bundle.value, s)
    diff = v[:, 0] - target
    n = len(s)
    grads, _ = backward(bundle.value, cache, (diff / n)[:, None])
    return 0.5 * float(np.mean(diff * diff)), grads


def critic_loss_and_grads(
    bundle: NetworksBundle, batch: Dict[str, np.ndarray], gamma: float,
) -> Tuple[Tuple[float, float], Tuple[List[np.ndarray], List[np.ndarray]]]:
    """Soft Bellman residual for each critic against ``r + gamma (1 - done) V(s')``."""
    s, a = batch["s"], batch["a"]
    y = batch["r"] + gamma * (1.0 - batch["done"]) * predict(bundle.value, batch["s2"])[:, 0]
    sa = np.hstack([s, a])
    n = len(s)
    losses, grads = [], []
    for critic in (bundle.critic1, bundle.critic2):
        q, cache = forward(critic, sa)
        diff = q[:, 0] - y
        g, _ = backward(critic, cache, (diff / n)[:, None])
        losses.append(0.5 * float(np.mean(diff * diff)))
        grads.append(g)
    return (losses[0], losses[1]), (grads[0], grads[1])


def policy_loss_and_grads(
    bundle: NetworksBundle, batch: Dict[str, np.ndarray], alpha: float,
    noise: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None,
    sample: Optional[PolicySample] = None,
) -> Tuple[float, List[np.ndarray]]:
    """``mean(alpha * log pi(a|s) - min_j Q_j(s, a))`` with reparameterised ``a``."""
    s = batch["s"]
    n, k = len(s), bundle.action_dim
    if sample is None:
        if noise is None:
            noise = (rng or np.random.default_rng()).standard_normal((n, k))
        sample = policy_sample(bundle.actor, s, noise)
    a, out = sample.action, sample.out
    sa = np.hstack([s, a])
    q1, cache1 = forward(bundle.critic1, sa)
    q2, cache2 = forward(bundle.critic2, sa)
    q1, q2 = q1[:, 0], q2[:, 0]
    note_branch(q1 <= q2)
    pick1 = (q1 <= q2).astype(float)
    loss = float(np.mean(alpha * sample.log_prob - np.where(pick1 > 0, q1, q2)))

    # dJ/da through the smaller critic
    _, dsa1 = backward(bundle.critic1, cache1, (-pick1 / n)[:, None], param_grads=False)
    _, dsa2 = backward(bundle.critic2, cache2, (-(1.0 - pick1) / n)[:, None], param_grads=False)
    da = dsa1[:, -k:] + dsa2[:, -k:]

    one_minus_a2 = 1.0 - a * a
    std = np.exp(out.log_std)
    # d log pi / du for u = mean + noise * std, squash term only
    dlogp_du = 2.0 * a * one_minus_a2 / (one_minus_a2 + SQUASH_EPS)
    du = da * one_minus_a2 + (alpha / n) * dlogp_du
    d_mean = du
    d_log_std = du * sample.noise * std - alpha / n
    inside = (out.raw_log_std > LOG_STD_MIN) & (out.raw_log_std < LOG_STD_MAX)
    d_log_std = d_log_std * inside
    grads, _ = backward(bundle.actor, sample.cache, np.hstack([d_mean, d_log_std]))
    return loss, grads


def temperature_loss_and_grads(
    bundle: NetworksBundle, batch: Dict[str, np.ndarray], target_entropy: float,
    noise: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None,
    sample: Optional[PolicySample] = None,
) -> Tuple[float, float]:
    """``mean(-alpha * (log pi + H_target))``; gradient w.r.t. ``log alpha``."""
    if sample is None:
        s = batch["s"]
        if noise is None:
            noise = (rng or np.random.default_rng()).standard_normal((len(s), bundle.action_dim))
        sample = policy_sample(bundle.actor, s, noise)
    alpha = bundle.alpha
    loss = float(np.mean(-alpha * (sample.log_prob + target_entropy)))
    # d/d(log alpha) of -alpha * c is -alpha * c, i.e. the loss itself
    return loss, loss


def soft_update(target: Sequence[np.ndarray], online: Sequence[np.ndarray], tau: float) -> Sequence[np.ndarray]:
    """In place ``target <- tau * target + (1 - tau) * online``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if len(target) != len(online):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= tau
        t += (1.0 - tau) * o
    return target


def linear_lr(step: int, total_steps: int, lr_initial: float, lr_final: float) -> float:
    if total_steps <= 0:
        return lr_initial
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_initial + (lr_final - lr_initial) * step / total_steps


# ------------------------------------------------------------------ #
# One full gradient step
# ------------------------------------------------------------------ #
@dataclass
class UpdateStats:
    value_loss: float
    critic1_loss: float
    critic2_loss: float
    policy_loss: float
    alpha_loss: float
    alpha: float


def sac_update(bundle: NetworksBundle, batch: Dict[str, np.ndarray], cfg: TrainerConfig,
               noise: np.ndarray, lrs: Dict[str, float], target_entropy: float) -> UpdateStats:
    alpha = bundle.alpha
    opt = bundle.optimizers
    sample = policy_sample(bundle.actor, batch["s"], noise)

    jv, gv = value_loss_and_grads(bundle, batch, alpha, sample=sample)
    adam_update(opt["value"], bundle.value.params(), gv, lrs["value"])

    (jq1, jq2), (g1, g2) = critic_loss_and_grads(bundle, batch, cfg.gamma)
    adam_update(opt["critic1"], bundle.critic1.params(), g1, lrs["critic"])
    adam_update(opt["critic2"], bundle.critic2.params(), g2, lrs["critic"])

    jpi, gpi = policy_loss_and_grads(bundle, batch, alpha, sample=sample)
    adam_update(opt["actor"], bundle.actor.params(), gpi, lrs["actor"])

    soft_update(bundle.target1.params(), bundle.critic1.params(), cfg.tau)
    soft_update(bundle.target2.params(), bundle.critic2.params(), cfg.tau)

    ja, ga = temperature_loss_and_grads(bundle, batch, target_entropy, sample=sample)
    la = np.array([bundle.log_alpha])
    adam_update(opt["log_alpha"], [la], [np.array([ga])], lrs["alpha"])
    bundle.log_alpha = float(la[0])
    return UpdateStats(jv, jq1, jq2, jpi, ja, alpha)


# ------------------------------------------------------------------ #
# Evaluation
# ------------------------------------------------------------------ #
@dataclass
class EvalReport:
    mean_reward: float
    reward_std: float
    success_rate: float
    episodes: int
    velocity_cap: float
    rewards: List[float] = field(default_factory=list, repr=False)

    def as_row(self) -> dict:
        return {"velocity_cap": self.velocity_cap, "mean_reward": self.mean_reward,
                "reward_std": self.reward_std, "success_rate": self.success_rate,
                "episodes": self.episodes}


def episode_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def as_policy(policy) -> Callable[[np.ndarray], np.ndarray]:
    """Accept an actor network, a bundle or a plain ``obs -> action`` callable."""
    if isinstance(policy, NetworksBundle):
        policy = policy.actor
    if isinstance(policy, Network):
        actor = policy
        return lambda obs: deterministic_action(actor, obs)
    return policy


def _default_env_factory(env_config):
    from .environment import PreGraspEnv
    return PreGraspEnv(env_config)


def run_episode(policy, env, seed: int, on_step=None) -> Tuple[float, bool, int]:
    act = as_policy(policy)
    obs = env.reset(seed)
    total, success, steps = 0.0, False, 0
    while True:
        action = np.clip(act(obs), -1.0, 1.0)
        obs, reward, terminated, truncated, info = env.step(action)
        total += reward
        steps += 1
        success = bool(info.get("success", False))
        if on_step is not None:
            on_step(env, action, obs, reward, info)
        if terminated or truncated:
            return total, success, steps


def evaluate(policy, env_config, n_episodes: int, velocity_cap: Optional[float] = None,
             seed: int = 0, env_factory=None) -> EvalReport:
    """Noise-free rollouts of ``tanh(mean)`` actions."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if velocity_cap is not None:
        env_config = dataclasses.replace(env_config, max_relative_speed=float(velocity_cap))
    env = (env_factory or _default_env_factory)(env_config)
    rewards, successes = [], []
    for i in range(n_episodes):
        total, ok, _ = run_episode(policy, env, episode_seed(seed, i))
        rewards.append(total)
        successes.append(ok)
    cap = getattr(env_config, "max_relative_speed", float("nan")) if velocity_cap is None else velocity_cap
    return EvalReport(float(np.mean(rewards)), float(np.std(rewards)), float(np.mean(successes)),
                      n_episodes, float(cap), rewards)


def velocity_sweep(policy, env_config, caps: Sequence[float], n_episodes: int, seed: int = 0,
                   env_factory=None) -> List[EvalReport]:
    if not len(caps):
        raise ValueError("need at least one velocity cap")
    return [evaluate(policy, env_config, n_episodes, cap, seed, env_factory) for cap in caps]


# ------------------------------------------------------------------ #
# Training loop
# ------------------------------------------------------------------ #
@dataclass
class MetricsRow:
    episode: int
    reward_total: float
    reward_rd: float
    reward_rtheta: float
    reward_rtop: float
    reward_pf: float
    success: bool
    alpha: float
    lr: float
    wall_time_s: float


@dataclass
class TrainState:
    """Everything needed to continue a run from an episode boundary."""

    bundle: NetworksBundle
    episode: int
    total_steps: int
    rng_state: dict
    best_score: Tuple[float, float] = (-math.inf, -math.inf)


@dataclass
class TrainReport:
    bundle: NetworksBundle
    metrics: List[MetricsRow]
    evals: List[Tuple[int, EvalReport]]
    best_actor: Optional[Network]
    best_eval: Optional[EvalReport]
    buffer: ReplayBuffer
    state: TrainState


def train(env_config, config: TrainerConfig, env_factory=None, *,
          on_episode: Optional[Callable[[MetricsRow], None]] = None,
          on_best: Optional[Callable[[TrainState, EvalReport], None]] = None,
          on_progress: Optional[Callable[[TrainState], None]] = None,
          resume: Optional[TrainState] = None, deterministic: bool = False) -> TrainReport:
    """Collect experience and run SAC updates until ``config.episodes`` is reached.

    ``env_factory(env_config)`` builds the environment (the grasp task by
    default).  ``on_best`` fires whenever a periodic evaluation beats the best
    success rate so far (ties broken by mean reward); ``on_progress`` fires
    after every evaluation so callers can persist a resumable state.  In
    deterministic mode the wall-clock column is left at zero.
    """
    config.validate()
    factory = env_factory or _default_env_factory
    env = factory(env_config)
    obs_dim, act_dim = env.observation_dim, env.action_dim
    target_entropy = config.entropy_target(act_dim)

    if resume is None:
        rng = np.random.default_rng(config.seed)
        scale = getattr(env, "observation_scale", None) if config.scale_inputs else None
        bundle = make_bundle(obs_dim, act_dim, config.hidden_sizes, rng, config.initial_alpha, scale)
        state = TrainState(bundle, 0, 0, rng.bit_generator.state)
    else:
        state = resume
        bundle = state.bundle
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        if bundle.obs_dim != obs_dim or bundle.action_dim != act_dim:
            raise InvalidTrainerConfig("resumed networks do not match the environment dimensions")

    buffer = ReplayBuffer(config.buffer_capacity, obs_dim, act_dim)
    eval_len = config.eval_episode_length
    eval_config = env_config
    if eval_len is not None and hasattr(env_config, "episode_length"):
        eval_config = dataclasses.replace(env_config, episode_length=eval_len)
    episode_len = getattr(env_config, "episode_length", None) or env.episode_length
    total_planned = config.episodes * episode_len

    metrics: List[MetricsRow] = []
    evals: List[Tuple[int, EvalReport]] = []
    best_actor, best_eval = None, None
    start = time.perf_counter()
    lr_now = config.actor_lr[0]

    for episode in range(state.episode, config.episodes):
        obs = env.reset(int(rng.integers(2**31)))
        sums = np.zeros(5)
        success = False
        while True:
            t = state.total_steps
            if t < config.warmup_steps:
                action = rng.uniform(-1.0, 1.0, act_dim)
            else:
                noise = rng.standard_normal(act_dim)
                ps = policy_sample(bundle.actor, obs[None, :], noise[None, :])
                action = ps.action[0] + config.exploration_noise * rng.standard_normal(act_dim)
                action = np.clip(action, -1.0, 1.0)
            obs2, reward, terminated, truncated, info = env.step(action)
            buffer.push(Transition(obs, action, reward, obs2, terminated))
            terms = info.get("reward_terms")
            sums[0] += reward
            if terms is not None:
                sums[1:] += (terms.r_d, terms.r_theta, terms.r_top, terms.p_f)
            success = bool(info.get("success", False))
            obs = obs2
            state.total_steps += 1

            frac_step = min(state.total_steps, total_planned)
            lrs = {
                "actor": linear_lr(frac_step, total_planned, *config.actor_lr),
                "critic": linear_lr(frac_step, total_planned, *config.critic_lr),
                "value": linear_lr(frac_step, total_planned, *config.value_lr),
                "alpha": linear_lr(frac_step, total_planned, *config.alpha_lr),
            }
            lr_now = lrs["actor"]
            if state.total_steps >= config.update_after and len(buffer) >= config.batch_size:
                for _ in range(config.gradient_steps):
                    batch = buffer.sample(config.batch_size, rng)
                    noise = rng.standard_normal((config.batch_size, act_dim))
                    stats = sac_update(bundle, batch, config, noise, lrs, target_entropy)
                    losses = (stats.value_loss, stats.critic1_loss, stats.critic2_loss,
                              stats.policy_loss, stats.alpha_loss)
                    if not all(math.isfinite(x) for x in losses) or not math.isfinite(bundle.log_alpha):
                        raise TrainingDivergedError(
                            f"non-finite loss at episode {episode}, env step {state.total_steps}: "
                            f"value={losses[0]} critics={losses[1:3]} policy={losses[3]} alpha={losses[4]}")
            if terminated or truncated:
                break

        row = MetricsRow(episode, float(sums[0]), *map(float, sums[1:]), success,
                         bundle.alpha, lr_now, 0.0 if deterministic else time.perf_counter() - start)
        metrics.append(row)
        if on_episode is not None:
            on_episode(row)

        state.episode = episode + 1
        if state.episode % config.eval_every == 0 or state.episode == config.episodes:
            report = evaluate(bundle.actor, eval_config, config.eval_trials, None,
                              seed=config.seed + 7919 * state.episode, env_factory=factory)
            evals.append((state.episode, report))
            log.info("episode %d: eval success %.2f mean reward %.1f alpha %.4f",
                     state.episode, report.success_rate, report.mean_reward, bundle.alpha)
            score = (report.success_rate, report.mean_reward)
            state.rng_state = rng.bit_generator.state
            if score > tuple(state.best_score):
                state.best_score = score
                best_actor, best_eval = bundle.actor.copy(), report
                if on_best is not None:
                    on_best(state, report)
            if on_progress is not None:
                on_progress(state)

    state.rng_state = rng.bit_generator.state
    return TrainReport(bundle, metrics, evals, best_actor, best_eval, buffer, state)
