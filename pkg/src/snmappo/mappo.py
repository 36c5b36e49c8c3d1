"""Multi-agent PPO with a shared decentralized actor and a centralized critic.

The critic sees the global state and predicts one value per timestep (the
reward is shared by the team). Critic layers listed by the variant are
spectrally normalized; every critic layer's singular value is tracked so it
can be logged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from ._accel import njit
from .errors import ConfigError, NumericError
from .nn_core import (
    MLP,
    Adam,
    FrameStackPolicy,
    RecurrentPolicy,
    clip_global_norm,
    masked_categorical,
    masked_log_probs,
    sample_categorical,
)
from .spectral_norm import SpectralNorm

VARIANTS: dict[str, tuple[int, ...]] = {
    "none": (),
    "FullSN": (1, 2, 3),
    "MidSN": (2,),
    "LastSN": (3,),
}
# variants that normalize critic targets unless overridden
NORMALIZED_RETURN_VARIANTS = ("FullSN", "LastSN")


@dataclass
class PpoConfig:
    gamma: float = 0.99
    clip_epsilon: float = 0.2
    kl_beta: float = 0.0
    entropy_coef: float = 0.01
    td_steps: int = 10
    rollout_length: int = 1024
    epochs: int = 4
    minibatches: int = 2
    learning_rate: float = 5e-4
    max_grad_norm: float = 10.0
    variant: str = "none"
    normalize_returns: bool | None = None
    hidden_dim: int = 64
    recurrent: bool = True
    chunk_length: int = 64
    activation: str = "relu"
    sn_mode: str = "plain"
    sn_k: float = 1.0
    sn_iters: int = 1
    actor_sn: bool = False
    standardize_advantages: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.clip_epsilon <= 0:
            raise ConfigError("clip_epsilon must be positive")
        if self.kl_beta < 0 or self.entropy_coef < 0:
            raise ConfigError("kl_beta and entropy_coef must be non-negative")
        if self.td_steps < 1:
            raise ConfigError("td_steps must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {list(VARIANTS)}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_grad_norm <= 0:
            raise ConfigError("max_grad_norm must be positive")
        for name in ("rollout_length", "epochs", "minibatches", "hidden_dim", "chunk_length", "sn_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.rollout_length % self.chunk_length:
            raise ConfigError("rollout_length must be a multiple of chunk_length")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("activation must be 'relu' or 'tanh'")

    @property
    def sn_layers(self) -> tuple[int, ...]:
        return VARIANTS[self.variant]

    @property
    def use_return_normalization(self) -> bool:
        if self.normalize_returns is None:
            return self.variant in NORMALIZED_RETURN_VARIANTS
        return self.normalize_returns

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ReturnNormalizer:
    """Running mean/variance of critic targets (parallel-variance merge)."""

    mean: float = 0.0
    var: float = 1.0
    count: float = 0.0
    eps: float = 1e-8

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        b_mean, b_var, b_count = float(x.mean()), float(x.var()), float(x.size)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, b_count
            return
        total = self.count + b_count
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * b_count + delta * delta * self.count * b_count / total
        self.mean += delta * b_count / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / np.sqrt(self.var + self.eps)

    def denormalize(self, v: np.ndarray) -> np.ndarray:
        return self.mean + np.sqrt(self.var + self.eps) * np.asarray(v)


class ActorCritic:
    """Shared actor (all agents) and centralized critic, each with its own Adam state."""

    def __init__(self, obs_dim: int, state_dim: int, n_actions: int, config: PpoConfig, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        h = config.hidden_dim
        policy_cls = RecurrentPolicy if config.recurrent else FrameStackPolicy
        self.actor = policy_cls(obs_dim, n_actions, hidden=h, rng=rng, activation=config.activation)
        self.critic = MLP.build([state_dim, h, h, 1], rng, hidden_activation=config.activation)
        self.config = config
        self.critic_sn = [
            SpectralNorm(layer, active=i in config.sn_layers, seed=seed + i, mode=config.sn_mode,
                         k_floor=config.sn_k, iters_per_update=config.sn_iters)
            for i, layer in enumerate(self.critic.layers, start=1)
        ]
        for hook in self.critic_sn:
            hook.converge()
        self.actor_sn: list[SpectralNorm] = []
        if config.actor_sn:
            dense = self.actor.net.layers if isinstance(self.actor, FrameStackPolicy) else [self.actor.fc, self.actor.head]
            self.actor_sn = [SpectralNorm(layer, seed=seed + 100 + i, mode=config.sn_mode, k_floor=config.sn_k,
                                          iters_per_update=config.sn_iters) for i, layer in enumerate(dense)]
            for hook in self.actor_sn:
                hook.converge()
        self.actor_opt = Adam(self.actor.parameters(), lr=config.learning_rate)
        self.critic_opt = Adam(self.critic.parameters(), lr=config.learning_rate)

    def values(self, states: np.ndarray) -> np.ndarray:
        return self.critic.forward(states)[:, 0]

    def sigma_hats(self) -> list[float]:
        return [hook.sigma_hat for hook in self.critic_sn]

    def greedy_actions(self, obs: np.ndarray, state: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, state = self.actor.step(obs, state)
        return np.argmax(np.where(masks, logits, -np.inf), axis=-1), state


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (T, n, obs_dim)
    states: np.ndarray  # (T, state_dim)
    next_states: np.ndarray  # (T, state_dim), state after step t (pre-reset)
    actions: np.ndarray  # (T, n)
    log_probs: np.ndarray  # (T, n) behaviour log-probabilities
    probs: np.ndarray  # (T, n, A) behaviour distributions
    masks: np.ndarray  # (T, n, A)
    rewards: np.ndarray  # (T,)
    terminals: np.ndarray  # (T,) true environment termination
    dones: np.ndarray  # (T,) termination or timeout
    episode_starts: np.ndarray  # (T,)
    actor_states: np.ndarray  # (T, n, state) recurrent state before step t
    values: np.ndarray = None  # (T,) critic output for states
    next_values: np.ndarray = None  # (T,) critic output for next_states
    episodes: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_agents(self) -> int:
        return self.actions.shape[1]


@dataclass
class EpisodeStats:
    ret: float
    length: int
    deliveries: int
    enemies_killed: int
    allies_dead: int
    won: bool


class RolloutWorker:
    """Steps one environment with the current policy, carrying episodes across rollouts."""

    def __init__(self, env, actor_critic: ActorCritic, config: PpoConfig, rng: np.random.Generator,
                 seed: int | None = None) -> None:
        self.env = env
        self.ac = actor_critic
        self.config = config
        self.rng = rng
        self.result = env.reset(seed=seed)
        self.actor_state = actor_critic.actor.initial_state(env.n_agents)
        self.episode_start = True
        self.episode_return = 0.0
        self.episode_length = 0

    def collect(self) -> RolloutBatch:
        env, ac, T = self.env, self.ac, self.config.rollout_length
        n, spec = env.n_agents, env.spec
        obs = np.empty((T, n, spec.observation_dim))
        states = np.empty((T, spec.global_state_dim))
        next_states = np.empty_like(states)
        actions = np.empty((T, n), dtype=np.int64)
        log_probs = np.empty((T, n))
        probs = np.empty((T, n, spec.n_actions))
        masks = np.empty((T, n, spec.n_actions), dtype=bool)
        rewards = np.empty(T)
        terminals = np.zeros(T, dtype=bool)
        dones = np.zeros(T, dtype=bool)
        starts = np.zeros(T, dtype=bool)
        actor_states = np.empty((T, n) + self.actor_state.shape[1:])
        episodes = []
        rows = np.arange(n)
        res = self.result
        for t in range(T):
            if self.episode_start:
                self.actor_state = ac.actor.initial_state(n)
            starts[t] = self.episode_start
            actor_states[t] = self.actor_state
            obs[t] = res.observations
            states[t] = res.state
            masks[t] = res.action_masks
            logits, self.actor_state = ac.actor.step(res.observations, self.actor_state)
            p = masked_categorical(logits, res.action_masks)
            a = sample_categorical(p, self.rng)
            probs[t] = p
            actions[t] = a
            log_probs[t] = np.log(p[rows, a])
            res = env.step(a)
            rewards[t] = res.reward
            next_states[t] = res.state
            terminals[t] = res.terminated
            dones[t] = res.done
            self.episode_return += res.reward
            self.episode_length += 1
            self.episode_start = res.done
            if res.done:
                info = res.info
                episodes.append(EpisodeStats(self.episode_return, self.episode_length, info["deliveries"],
                                             info["enemies_killed"], info["allies_dead"], bool(info["battle_won"])))
                self.episode_return = 0.0
                self.episode_length = 0
                res = env.reset()
        self.result = res
        batch = RolloutBatch(obs, states, next_states, actions, log_probs, probs, masks, rewards, terminals,
                             dones, starts, actor_states, episodes=episodes)
        batch.values = ac.values(states)
        batch.next_values = ac.values(next_states)
        return batch


def collect_rollout(env, actor_critic: ActorCritic, config: PpoConfig, rng: np.random.Generator,
                    seed: int | None = None) -> RolloutBatch:
    """Reset ``env`` and gather ``config.rollout_length`` steps."""
    return RolloutWorker(env, actor_critic, config, rng, seed=seed).collect()


@njit
def nstep_returns_kernel(rewards, next_values, terminals, dones, gamma, td_steps):
    T = rewards.shape[0]
    out = np.empty(T)
    for t in range(T):
        g = 0.0
        disc = 1.0
        k = t
        while True:
            g += disc * rewards[k]
            disc *= gamma
            if terminals[k]:
                break
            if dones[k] or k == T - 1 or k - t + 1 == td_steps:
                g += disc * next_values[k]
                break
            k += 1
        out[t] = g
    return out


def compute_nstep_returns(batch: RolloutBatch, config: PpoConfig, normalizer: ReturnNormalizer | None = None
                          ) -> np.ndarray:
    """``G_t = sum_{j<m} gamma^j r_{t+j} + gamma^m V(s_{t+m})`` with ``m`` capped by ``td_steps``,
    the episode end and the batch end. Terminal steps are not bootstrapped; timeouts are.
    """
    next_values = batch.next_values if normalizer is None else normalizer.denormalize(batch.next_values)
    return nstep_returns_kernel(batch.rewards.astype(np.float64), np.asarray(next_values, dtype=np.float64),
                                batch.terminals, batch.dones, float(config.gamma), int(config.td_steps))


def standardize(x: np.ndarray) -> np.ndarray:
    std = x.std()
    return (x - x.mean()) / std if std >= 1e-8 else x - x.mean()


def compute_advantages(batch: RolloutBatch, returns: np.ndarray, normalizer: ReturnNormalizer | None = None,
                       standardize_result: bool = True) -> np.ndarray:
    """``A_t = G_t - V(s_t)`` broadcast over agents, optionally standardized over the batch."""
    values = batch.values if normalizer is None else normalizer.denormalize(batch.values)
    adv = np.repeat((returns - values)[:, None], batch.n_agents, axis=1)
    return standardize(adv) if standardize_result else adv


def clipped_surrogate(ratio, advantage, clip_epsilon: float):
    """``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`` elementwise."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage)


def policy_loss_and_grad(logits: np.ndarray, masks: np.ndarray, actions: np.ndarray, old_log_probs: np.ndarray,
                         old_probs: np.ndarray, advantages: np.ndarray, config: PpoConfig
                         ) -> tuple[float, np.ndarray, dict]:
    """PPO loss over ``N`` samples and its gradient w.r.t. ``logits`` (N, A).

    ``loss = -mean(clipped surrogate) + beta * mean KL(old || new) - c * mean entropy``.
    """
    N = logits.shape[0]
    rows = np.arange(N)
    logp_all = masked_log_probs(logits, masks)
    p = np.exp(logp_all)
    logp = logp_all[rows, actions]
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - old_log_probs)
    if not np.all(np.isfinite(ratio)):
        raise NumericError("non-finite probability ratio")
    eps = config.clip_epsilon
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    surrogate = np.minimum(unclipped, clipped)
    plogp = np.where(masks, p * np.where(masks, logp_all, 0.0), 0.0)
    entropy = -plogp.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        old_logp_all = np.where(old_probs > 0, np.log(np.where(old_probs > 0, old_probs, 1.0)), 0.0)
    kl = np.sum(np.where(old_probs > 0, old_probs * (old_logp_all - np.where(masks, logp_all, 0.0)), 0.0), axis=1)
    loss = -surrogate.mean() + config.kl_beta * kl.mean() - config.entropy_coef * entropy.mean()

    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    # derivative of the min flows through the unclipped branch only where it is selected
    active = (unclipped <= clipped).astype(np.float64)
    d_logp = -(active * unclipped) / N
    grad = d_logp[:, None] * (onehot - p)
    grad += (config.kl_beta / N) * (p - old_probs)
    logp_safe = np.where(masks, logp_all, 0.0)
    grad += (config.entropy_coef / N) * p * (logp_safe + entropy[:, None])
    grad = np.where(masks, grad, 0.0)
    stats = {
        "policy_loss": float(loss),
        "mean_ratio": float(ratio.mean()),
        "mean_kl": float(kl.mean()),
        "entropy": float(entropy.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    return float(loss), grad, stats


def critic_loss_and_grad(values: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    diff = values - targets
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _chunk(x: np.ndarray, L: int) -> np.ndarray:
    """(T, n, ...) -> (L, C, ...) with chunks ordered (time block, agent)."""
    T, n = x.shape[:2]
    rest = x.shape[2:]
    return x.reshape((T // L, L, n) + rest).swapaxes(0, 1).reshape((L, (T // L) * n) + rest)


@dataclass
class ChunkedBatch:
    """Rollout rearranged into per-agent sequence chunks for recurrent minibatching."""

    obs: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    probs: np.ndarray
    advantages: np.ndarray
    resets: np.ndarray
    state0: np.ndarray

    @classmethod
    def build(cls, batch: RolloutBatch, advantages: np.ndarray, L: int) -> "ChunkedBatch":
        n = batch.n_agents
        starts = np.repeat(batch.episode_starts[:, None], n, axis=1)
        return cls(
            obs=_chunk(batch.obs, L),
            masks=_chunk(batch.masks, L),
            actions=_chunk(batch.actions, L),
            log_probs=_chunk(batch.log_probs, L),
            probs=_chunk(batch.probs, L),
            advantages=_chunk(advantages, L),
            resets=_chunk(starts, L),
            state0=_chunk(batch.actor_states, L)[0],
        )

    @property
    def n_chunks(self) -> int:
        return self.obs.shape[1]

    def policy_loss(self, actor, config: PpoConfig, idx: np.ndarray | None = None, backward: bool = False
                    ) -> tuple[float, dict]:
        idx = np.arange(self.n_chunks) if idx is None else idx
        logits = actor.forward_sequence(self.obs[:, idx], self.state0[idx], self.resets[:, idx])
        L, B, A = logits.shape
        loss, grad, stats = policy_loss_and_grad(
            logits.reshape(L * B, A), self.masks[:, idx].reshape(L * B, A), self.actions[:, idx].reshape(-1),
            self.log_probs[:, idx].reshape(-1), self.probs[:, idx].reshape(L * B, A),
            self.advantages[:, idx].reshape(-1), config)
        if backward:
            actor.backward_sequence(grad.reshape(L, B, A))
        return loss, stats


def ppo_policy_loss(batch: RolloutBatch, actor, advantages: np.ndarray, config: PpoConfig) -> tuple[float, dict]:
    """Policy loss of ``actor`` over the whole batch (no parameter update)."""
    chunks = ChunkedBatch.build(batch, advantages, config.chunk_length)
    return chunks.policy_loss(actor, config)


def critic_targets(returns: np.ndarray, normalizer: ReturnNormalizer | None) -> np.ndarray:
    return returns if normalizer is None else normalizer.normalize(returns)


def critic_loss(batch: RolloutBatch, critic: MLP, returns: np.ndarray, normalizer: ReturnNormalizer | None,
                config: PpoConfig | None = None) -> float:
    """Mean squared error between the critic output and the (possibly normalized) targets."""
    values = critic.forward(batch.states)[:, 0]
    return critic_loss_and_grad(values, critic_targets(returns, normalizer))[0]


def update(ac: ActorCritic, batch: RolloutBatch, config: PpoConfig, rng: np.random.Generator,
           normalizer: ReturnNormalizer | None = None, record_grads: bool = False) -> dict:
    """Run ``epochs`` x ``minibatches`` actor and critic steps on one rollout.

    Returns averaged losses, KL, entropy, the mean pre-clip critic gradient norm
    and its log10, per-layer sigma estimates and the per-step norm histories.
    """
    use_norm = config.use_return_normalization
    norm = normalizer if use_norm else None
    if use_norm and normalizer is None:
        raise ConfigError("return normalization requires a ReturnNormalizer")
    returns = compute_nstep_returns(batch, config, norm)
    advantages = compute_advantages(batch, returns, norm, config.standardize_advantages)
    if use_norm:
        normalizer.update(returns)
    targets = critic_targets(returns, norm)

    chunks = ChunkedBatch.build(batch, advantages, config.chunk_length)
    T = batch.length
    hist = {k: [] for k in ("policy_loss", "value_loss", "mean_kl", "entropy", "critic_norm", "critic_norm_post",
                            "actor_norm")}
    stored = []
    for _ in range(config.epochs):
        chunk_perm = np.array_split(rng.permutation(chunks.n_chunks), config.minibatches)
        time_perm = np.array_split(rng.permutation(T), config.minibatches)
        for cidx, tidx in zip(chunk_perm, time_perm):
            if len(cidx) == 0 or len(tidx) == 0:
                continue
            ac.actor.zero_grad()
            loss, stats = chunks.policy_loss(ac.actor, config, cidx, backward=True)
            grads = [p.grad for p in ac.actor.parameters()]
            _, a_norm = clip_global_norm(grads, config.max_grad_norm)
            if not (np.isfinite(loss) and np.isfinite(a_norm)):
                raise NumericError(f"non-finite actor loss/gradient (loss={loss}, norm={a_norm})")
            ac.actor_opt.step()
            for hook in ac.actor_sn:
                hook.update()

            ac.critic.zero_grad()
            values = ac.critic.forward(batch.states[tidx])[:, 0]
            v_loss, d_values = critic_loss_and_grad(values, targets[tidx])
            ac.critic.backward(d_values[:, None])
            grads = [p.grad for p in ac.critic.parameters()]
            if record_grads:
                stored.append([g.copy() for g in grads])
            _, c_norm = clip_global_norm(grads, config.max_grad_norm)
            if not (np.isfinite(v_loss) and np.isfinite(c_norm)):
                raise NumericError(f"non-finite critic loss/gradient (loss={v_loss}, norm={c_norm})")
            hist["critic_norm_post"].append(float(np.sqrt(sum(float(np.sum(g * g)) for g in grads))))
            ac.critic_opt.step()
            for hook in ac.critic_sn:
                hook.update()

            hist["policy_loss"].append(loss)
            hist["value_loss"].append(v_loss)
            hist["mean_kl"].append(stats["mean_kl"])
            hist["entropy"].append(stats["entropy"])
            hist["critic_norm"].append(c_norm)
            hist["actor_norm"].append(a_norm)

    critic_norm = float(np.mean(hist["critic_norm"]))
    out = {
        "policy_loss": float(np.mean(hist["policy_loss"])),
        "value_loss": float(np.mean(hist["value_loss"])),
        "mean_kl": float(np.mean(hist["mean_kl"])),
        "entropy": float(np.mean(hist["entropy"])),
        "critic_grad_norm_preclip": critic_norm,
        "log10_critic_grad_norm": float(np.log10(critic_norm)) if critic_norm > 0 else float("-inf"),
        "sigma_hat": ac.sigma_hats(),
        "critic_norm_history": hist["critic_norm"],
        "critic_norm_post_history": hist["critic_norm_post"],
        "actor_norm_history": hist["actor_norm"],
    }
    if record_grads:
        out["critic_grads"] = stored
    return out


def evaluate_policy(env, ac: ActorCritic, episodes: int, seed: int | None = None, greedy: bool = True,
                    rng: np.random.Generator | None = None) -> dict:
    """Run ``episodes`` full episodes without learning; greedy picks the argmax legal action."""
    if rng is None:
        rng = np.random.default_rng(seed)
    n = env.n_agents
    stats = []
    res = env.reset(seed=seed)
    for _ in range(episodes):
        state = ac.actor.initial_state(n)
        ret = 0.0
        while True:
            if greedy:
                a, state = ac.greedy_actions(res.observations, state, res.action_masks)
            else:
                logits, state = ac.actor.step(res.observations, state)
                a = sample_categorical(masked_categorical(logits, res.action_masks), rng)
            res = env.step(a)
            ret += res.reward
            if res.done:
                break
        stats.append((ret, res.info["deliveries"], res.info["enemies_killed"], res.info["battle_won"]))
        res = env.reset()
    arr = np.array(stats, dtype=np.float64)
    return {
        "episodes": episodes,
        "mean_return": float(arr[:, 0].mean()),
        "deliveries": float(arr[:, 1].mean()),
        "dead_enemies": float(arr[:, 2].mean()),
        "dead_enemies_total": int(arr[:, 2].sum()),
        "win_rate": float(arr[:, 3].mean()),
    }


def random_policy_baseline(env, episodes: int, seed: int | None = None) -> dict:
    """Same statistics as :func:`evaluate_policy` for a uniform policy over legal actions."""
    rng = np.random.default_rng(seed)
    stats = []
    res = env.reset(seed=seed)
    for _ in range(episodes):
        ret = 0.0
        while True:
            m = res.action_masks
            p = m / m.sum(axis=1, keepdims=True)
            res = env.step(sample_categorical(p, rng))
            ret += res.reward
            if res.done:
                break
        stats.append((ret, res.info["deliveries"], res.info["enemies_killed"], res.info["battle_won"]))
        res = env.reset()
    arr = np.array(stats, dtype=np.float64)
    return {
        "episodes": episodes,
        "mean_return": float(arr[:, 0].mean()),
        "deliveries": float(arr[:, 1].mean()),
        "dead_enemies": float(arr[:, 2].mean()),
        "dead_enemies_total": int(arr[:, 2].sum()),
        "win_rate": float(arr[:, 3].mean()),
    }
