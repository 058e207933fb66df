"""Proximal policy optimization with generalized advantage estimation for
three trainable actors: the differentiable Koopman-MPC policy (refining the
surrogate model end to end), and model-free MLP policies for the tracking
and demand-response tasks. Includes the critic, rollout collection, the
clipped-surrogate update with global gradient clipping, and running-score
best-agent selection.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics
from .environments import EnmpcEnv, EnmpcObs, NmpcEnv, NmpcObs, PRICE_WINDOW
from .koopman import KoopmanModel
from .mpc_policy import KoopmanMpcPolicy, OcpConfig, PolicyInput, backward as mpc_backward, gaussian_log_prob
from .nn_core import (
    AdamState,
    Mlp,
    NonFiniteGradient,
    adam_step,
    global_norm_clip,
    mlp_backward,
    mlp_forward,
)

__all__ = [
    "PpoConfig",
    "RolloutBuffer",
    "compute_gae",
    "ppo_update",
    "train",
    "TrainResult",
    "KoopmanActor",
    "MlpActor",
    "BranchedMlp",
    "CriticNet",
    "make_actor",
    "make_env",
    "obs_vector",
]


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    steps_per_update: int = 2048
    epochs: int = 10
    minibatch: int = 64
    clip_norm: float = 0.5
    sigma_init_frac: float = 0.1
    sigma_final_frac: float = 0.02
    sigma_decay_portion: float = 0.5
    total_episodes: int = 500
    n_envs: int = 1
    running_window: int = 30
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must be in (0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.steps_per_update < self.minibatch:
            raise ValueError("steps_per_update must be at least one minibatch")
        if self.steps_per_update % self.n_envs != 0:
            raise ValueError("steps_per_update must divide evenly across envs")

    def sigma_frac(self, episode: int) -> float:
        decay_eps = max(1, int(self.sigma_decay_portion * self.total_episodes))
        t = min(1.0, episode / decay_eps)
        return self.sigma_init_frac + t * (self.sigma_final_frac - self.sigma_init_frac)


@dataclass
class RolloutBuffer:
    """Per-step records for one update; row-major per environment so the GAE
    recursion runs over contiguous per-env segments."""

    capacity: int
    n_envs: int
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def add(self, obs, action, log_prob, reward, value, done, sigma):
        self.obs.append(obs)
        self.actions.append(np.asarray(action, dtype=float))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))
        self.sigmas.append(np.asarray(sigma, dtype=float))

    def __len__(self):
        return len(self.rewards)

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity


def compute_gae(
    buffer: RolloutBuffer, gamma: float, lam: float, bootstrap_value: float | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """delta_t = r_t + gamma V_{t+1} (1 - done) - V_t;
    A_t = delta_t + gamma lam (1 - done) A_{t+1}; returns = A + V.

    The buffer is interpreted as n_envs contiguous segments of equal length;
    bootstrap_value supplies V of the observation following each segment.
    """
    T = len(buffer)
    if T == 0:
        raise ValueError("empty buffer")
    n_envs = buffer.n_envs
    if T % n_envs != 0:
        raise ValueError("buffer length must divide across envs")
    seg = T // n_envs
    boot = np.broadcast_to(np.asarray(bootstrap_value, dtype=float), (n_envs,))
    rewards = np.asarray(buffer.rewards)
    values = np.asarray(buffer.values)
    dones = np.asarray(buffer.dones, dtype=float)
    advantages = np.empty(T)
    for e in range(n_envs):
        lo = e * seg
        a_next = 0.0
        v_next = boot[e]
        for t in range(seg - 1, -1, -1):
            i = lo + t
            nonterm = 1.0 - dones[i]
            delta = rewards[i] + gamma * v_next * nonterm - values[i]
            a_next = delta + gamma * lam * nonterm * a_next
            advantages[i] = a_next
            v_next = values[i]
    returns = advantages + values
    buffer.advantages = advantages
    buffer.returns = returns
    return advantages, returns


# ---------------------------------------------------------------------------
# Observation encodings
# ---------------------------------------------------------------------------

_STATE_LO = np.array([dynamics.C_BOUNDS[0], dynamics.T_BOUNDS[0]])
_STATE_W = np.array(
    [dynamics.C_BOUNDS[1] - dynamics.C_BOUNDS[0], dynamics.T_BOUNDS[1] - dynamics.T_BOUNDS[0]]
)


def obs_vector(obs, kind: str, price_scale: float = 1.0) -> np.ndarray:
    """Normalized observation vector.

    kind 'nmpc_actor': (c, T); 'nmpc_critic': (c, T, rho_ext);
    'enmpc': (c, T, storage, 9 prices).
    """
    x = (obs.state.as_array() - _STATE_LO) / _STATE_W
    if isinstance(obs, NmpcObs):
        if kind == "nmpc_actor":
            return x
        rho_n = (obs.rho_ext - dynamics.RHO_BOUNDS[0]) / (
            dynamics.RHO_BOUNDS[1] - dynamics.RHO_BOUNDS[0]
        )
        return np.concatenate([x, [rho_n]])
    if isinstance(obs, EnmpcObs):
        return np.concatenate(
            [x, [obs.storage / dynamics.STORAGE_CAPACITY], obs.prices / price_scale]
        )
    raise TypeError(f"unknown observation type {type(obs)!r}")


# ---------------------------------------------------------------------------
# Actors
# ---------------------------------------------------------------------------

class KoopmanActor:
    """Differentiable Koopman-MPC actor; parameters are the model's."""

    def __init__(self, model: KoopmanModel, task: str, ocp_cfg: OcpConfig):
        self.model = model
        self.task = task
        self.policy = KoopmanMpcPolicy(model, ocp_cfg)
        if task == "nmpc":
            self.control_lb = np.array([dynamics.F_BOUNDS[0]])
            self.control_ub = np.array([dynamics.F_BOUNDS[1]])
        else:
            self.control_lb = np.array([dynamics.RHO_BOUNDS[0], dynamics.F_BOUNDS[0]])
            self.control_ub = np.array([dynamics.RHO_BOUNDS[1], dynamics.F_BOUNDS[1]])

    @property
    def control_range(self) -> np.ndarray:
        return self.control_ub - self.control_lb

    def params(self) -> list[np.ndarray]:
        return self.model.params()

    def snapshot(self):
        return [p.copy() for p in self.model.params()]

    def load_snapshot(self, snap):
        for p, s in zip(self.model.params(), snap):
            p[:] = s

    def _policy_input(self, obs) -> PolicyInput:
        if self.task == "nmpc":
            return PolicyInput(state=obs.state, rho_ext=obs.rho_ext)
        return PolicyInput(state=obs.state, storage=obs.storage, prices=obs.prices)

    def mean_output(self, obs):
        return self.policy.act(self._policy_input(obs))

    def mean(self, obs) -> np.ndarray:
        return self.mean_output(obs).u_star

    def grads_from(self, out, dloss_du) -> list[np.ndarray]:
        grads, _ = mpc_backward(out, dloss_du)
        return grads.params()

    @property
    def fallback_count(self) -> int:
        return self.policy.fallback_count

    @property
    def degenerate_count(self) -> int:
        return self.policy.degenerate_count


@dataclass
class BranchedMlp:
    """Separate input branches concatenated into a trunk (demand-response
    policy: state, storage level, and price window enter separately)."""

    branches: list[Mlp]
    trunk: Mlp
    splits: list[int]  # input dimension per branch

    @classmethod
    def create(cls, rng, branch_specs: list[tuple[int, int]], trunk_sizes: list[int]):
        branches = [
            Mlp.create([d_in, d_out], rng, hidden_activation="tanh", output_activation="tanh")
            for d_in, d_out in branch_specs
        ]
        concat = sum(d_out for _, d_out in branch_specs)
        trunk = Mlp.create([concat, *trunk_sizes], rng, output_activation="tanh")
        return cls(branches=branches, trunk=trunk, splits=[d for d, _ in branch_specs])

    @property
    def in_dim(self) -> int:
        return sum(self.splits)

    @property
    def out_dim(self) -> int:
        return self.trunk.out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for b in self.branches:
            out += b.params()
        return out + self.trunk.params()

    def copy(self) -> "BranchedMlp":
        return BranchedMlp([b.copy() for b in self.branches], self.trunk.copy(), list(self.splits))

    def forward(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        parts, tapes, off = [], [], 0
        for b, d in zip(self.branches, self.splits):
            y, tape = mlp_forward(b, x[:, off : off + d])
            parts.append(y)
            tapes.append(tape)
            off += d
        concat = np.concatenate(parts, axis=1)
        y, t_tape = mlp_forward(self.trunk, concat)
        return y, (tapes, t_tape)

    def backward(self, tape, gy: np.ndarray):
        tapes, t_tape = tape
        g_concat, trunk_grads = mlp_backward(self.trunk, t_tape, np.atleast_2d(gy))
        grads = []
        off = 0
        widths = [b.out_dim for b in self.branches]
        for b, bt, w in zip(self.branches, tapes, widths):
            _, bg = mlp_backward(b, bt, g_concat[:, off : off + w])
            grads += bg.params()
            off += w
        return grads + trunk_grads.params()


class MlpActor:
    """Model-free policy: tanh network whose output is affinely mapped onto
    the control box."""

    def __init__(self, net, task: str, price_scale: float = 1.0):
        self.net = net
        self.task = task
        self.price_scale = price_scale
        if task == "nmpc":
            self.control_lb = np.array([dynamics.F_BOUNDS[0]])
            self.control_ub = np.array([dynamics.F_BOUNDS[1]])
        else:
            self.control_lb = np.array([dynamics.RHO_BOUNDS[0], dynamics.F_BOUNDS[0]])
            self.control_ub = np.array([dynamics.RHO_BOUNDS[1], dynamics.F_BOUNDS[1]])

    @classmethod
    def create(cls, rng, task: str, price_scale: float = 1.0) -> "MlpActor":
        if task == "nmpc":
            net = Mlp.create([2, 256, 256, 1], rng, output_activation="tanh")
        else:
            net = BranchedMlp.create(
                rng,
                branch_specs=[(2, 100), (1, 56), (PRICE_WINDOW, 100)],
                trunk_sizes=[256, 256, 2],
            )
        return cls(net, task, price_scale)

    @property
    def control_range(self) -> np.ndarray:
        return self.control_ub - self.control_lb

    def params(self) -> list[np.ndarray]:
        return self.net.params()

    def snapshot(self):
        return [p.copy() for p in self.net.params()]

    def load_snapshot(self, snap):
        for p, s in zip(self.net.params(), snap):
            p[:] = s

    def _obs_vec(self, obs) -> np.ndarray:
        kind = "nmpc_actor" if self.task == "nmpc" else "enmpc"
        return obs_vector(obs, kind, self.price_scale)

    def _map_to_controls(self, y: np.ndarray) -> np.ndarray:
        return self.control_lb + (y + 1.0) * 0.5 * self.control_range

    def mean_batch(self, obs_list):
        X = np.stack([self._obs_vec(o) for o in obs_list])
        if isinstance(self.net, BranchedMlp):
            y, tape = self.net.forward(X)
        else:
            y, tape = mlp_forward(self.net, X)
        return self._map_to_controls(y), tape

    def mean(self, obs) -> np.ndarray:
        u, _ = self.mean_batch([obs])
        return u[0]

    def grads_from_batch(self, tape, dloss_du: np.ndarray) -> list[np.ndarray]:
        gy = dloss_du * 0.5 * self.control_range
        if isinstance(self.net, BranchedMlp):
            return self.net.backward(tape, gy)
        _, grads = mlp_backward(self.net, tape, gy)
        return grads.params()


class CriticNet:
    """State-value MLP sharing the actor's observation (plus task extras)."""

    def __init__(self, net: Mlp, kind: str, price_scale: float = 1.0):
        self.net = net
        self.kind = kind
        self.price_scale = price_scale

    @classmethod
    def create(cls, rng, task: str, hidden=(64, 64), price_scale: float = 1.0) -> "CriticNet":
        obs_dim = 3 if task == "nmpc" else 3 + PRICE_WINDOW
        net = Mlp.create([obs_dim, *hidden, 1], rng)
        kind = "nmpc_critic" if task == "nmpc" else "enmpc"
        return cls(net, kind, price_scale)

    def params(self) -> list[np.ndarray]:
        return self.net.params()

    def value(self, obs) -> float:
        v, _ = mlp_forward(self.net, obs_vector(obs, self.kind, self.price_scale))
        return float(v[0])

    def value_batch(self, obs_list):
        X = np.stack([obs_vector(o, self.kind, self.price_scale) for o in obs_list])
        v, tape = mlp_forward(self.net, X)
        return v[:, 0], tape


# ---------------------------------------------------------------------------
# Update
# ---------------------------------------------------------------------------

@dataclass
class UpdateStats:
    actor_loss: float = 0.0
    critic_loss: float = 0.0
    clip_fraction: float = 0.0
    skipped_minibatches: int = 0
    mean_ratio: float = 1.0


def _actor_minibatch_grads(actor, buffer, idx, cfg):
    """Clipped-surrogate loss value and parameter gradients on one minibatch."""
    adv = buffer.advantages[idx]
    std = adv.std()
    adv = (adv - adv.mean()) / (std + 1e-8)
    actions = [buffer.actions[i] for i in idx]
    sigmas = [buffer.sigmas[i] for i in idx]
    old_lp = np.array([buffer.log_probs[i] for i in idx])
    M = len(idx)

    grad_accum = None
    loss = 0.0
    clipped = 0
    ratios = np.empty(M)
    if isinstance(actor, KoopmanActor):
        outs = [actor.mean_output(buffer.obs[i]) for i in idx]
        means = [o.u_star for o in outs]
    else:
        means_arr, tape = actor.mean_batch([buffer.obs[i] for i in idx])
        means = list(means_arr)
        dloss_dmean = np.zeros_like(means_arr)

    for j in range(M):
        u, mu, sig = actions[j], means[j], sigmas[j]
        lp_new = gaussian_log_prob(u, mu, sig)
        ratio = float(np.exp(lp_new - old_lp[j]))
        ratios[j] = ratio
        a = float(adv[j])
        unclipped = ratio * a
        clip_ratio = float(np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps))
        surrogate = min(unclipped, clip_ratio * a)
        loss += -surrogate / M
        use_unclipped = unclipped <= clip_ratio * a
        if not use_unclipped:
            clipped += 1
        dL_dratio = (-a / M) if use_unclipped else 0.0
        dL_dlp = dL_dratio * ratio
        dL_dmu = dL_dlp * (u - mu) / (sig**2)
        if isinstance(actor, KoopmanActor):
            g = actor.grads_from(outs[j], dL_dmu)
            if grad_accum is None:
                grad_accum = g
            else:
                for acc, gi in zip(grad_accum, g):
                    acc += gi
        else:
            dloss_dmean[j] = dL_dmu
    if not isinstance(actor, KoopmanActor):
        grad_accum = actor.grads_from_batch(tape, dloss_dmean)
    return loss, grad_accum, clipped / M, float(np.mean(ratios))


def ppo_update(actor, critic, buffer: RolloutBuffer, cfg: PpoConfig,
               actor_opt: AdamState, critic_opt: AdamState, rng) -> UpdateStats:
    """K epochs of clipped-surrogate minibatch updates for the actor and MSE
    updates for the critic, with global gradient clipping before Adam."""
    if buffer.advantages is None:
        raise ValueError("compute_gae must run before ppo_update")
    T = len(buffer)
    stats = UpdateStats()
    n_batches = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(T)
        for i0 in range(0, T, cfg.minibatch):
            idx = order[i0 : i0 + cfg.minibatch]
            if idx.size < 2:
                continue
            loss, grads, clip_frac, mean_ratio = _actor_minibatch_grads(actor, buffer, idx, cfg)
            try:
                if not np.isfinite(loss):
                    raise NonFiniteGradient("non-finite actor loss")
                global_norm_clip(grads, cfg.clip_norm)
                adam_step(actor.params(), grads, actor_opt)
            except NonFiniteGradient:
                stats.skipped_minibatches += 1
                continue
            # critic on the same minibatch
            obs_mb = [buffer.obs[i] for i in idx]
            targets = buffer.returns[idx]
            v, tape = critic.value_batch(obs_mb)
            resid = v - targets
            closs = float(np.mean(resid**2))
            dv = (2.0 / idx.size) * resid
            _, cgrads = mlp_backward(critic.net, tape, dv[:, None])
            cglist = cgrads.params()
            try:
                if not np.isfinite(closs):
                    raise NonFiniteGradient("non-finite critic loss")
                global_norm_clip(cglist, cfg.clip_norm)
                adam_step(critic.params(), cglist, critic_opt)
            except NonFiniteGradient:
                stats.skipped_minibatches += 1
                continue
            stats.actor_loss += loss
            stats.critic_loss += closs
            stats.clip_fraction += clip_frac
            stats.mean_ratio += mean_ratio - 1.0
            n_batches += 1
    if n_batches:
        stats.actor_loss /= n_batches
        stats.critic_loss /= n_batches
        stats.clip_fraction /= n_batches
        stats.mean_ratio = 1.0 + stats.mean_ratio / n_batches
    return stats


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_params: list
    best_score: float
    best_episode: int
    score_history: list
    running_history: list
    episode_log: list
    update_log: list
    fallback_count: int = 0
    degenerate_count: int = 0


def make_env(task: str, seed: int, prices=None, price_scale=None, episode_steps=72):
    if task == "nmpc":
        return NmpcEnv(seed=seed, episode_steps=episode_steps)
    if prices is None:
        raise ValueError("enmpc environments require a price series")
    return EnmpcEnv(prices, seed=seed, episode_steps=episode_steps, price_scale=price_scale)


def make_actor(kind: str, task: str, rng, model: KoopmanModel | None = None,
               ocp_cfg: OcpConfig | None = None, price_scale: float = 1.0):
    if kind == "koopman":
        if model is None:
            raise ValueError("koopman actor requires an SI-initialized model")
        if ocp_cfg is None:
            ocp_cfg = OcpConfig.nmpc() if task == "nmpc" else OcpConfig.enmpc(price_scale=price_scale)
        return KoopmanActor(model, task, ocp_cfg)
    if kind == "mlp":
        return MlpActor.create(rng, task, price_scale)
    raise ValueError(f"unknown actor kind {kind!r}")


def train(
    actor,
    critic: CriticNet,
    cfg: PpoConfig,
    task: str,
    prices=None,
    price_scale: float | None = None,
    out_dir=None,
    log_every: int = 10,
) -> TrainResult:
    """Rollout -> GAE -> clipped update loop with best-running-score
    snapshotting. Deterministic for a fixed seed at n_envs = 1.
    """
    seeds = np.random.SeedSequence(cfg.seed)
    env_seed, noise_seed, shuffle_seed = seeds.spawn(3)
    envs = [
        make_env(task, seed=s, prices=prices, price_scale=price_scale)
        for s in env_seed.spawn(cfg.n_envs)
    ]
    noise_rng = np.random.default_rng(noise_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)

    actor_opt = AdamState.init(actor.params(), lr=cfg.actor_lr)
    critic_opt = AdamState.init(critic.params(), lr=cfg.critic_lr)

    obs = [env.reset() if task == "nmpc" else env.reset("train") for env in envs]
    ep_return = [0.0] * cfg.n_envs

    score_history: list[float] = []
    running_history: list[float] = []
    episode_log, update_log = [], []
    best_score = -np.inf
    best_params = actor.snapshot()
    best_episode = -1
    episodes_done = 0
    steps_per_env = cfg.steps_per_update // cfg.n_envs

    def running_score() -> float:
        w = score_history[-cfg.running_window :]
        return float(np.mean(w)) if w else -np.inf

    while episodes_done < cfg.total_episodes:
        buffer = RolloutBuffer(capacity=cfg.steps_per_update, n_envs=cfg.n_envs)
        sigma = cfg.sigma_frac(episodes_done) * actor.control_range
        stop_collecting = False
        for e, env in enumerate(envs):
            for _ in range(steps_per_env):
                if isinstance(actor, KoopmanActor):
                    out = actor.policy.act(
                        actor._policy_input(obs[e]), stochastic=True, sigma=sigma, rng=noise_rng
                    )
                    u, lp = out.u_sampled, out.log_prob
                else:
                    mu = actor.mean(obs[e])
                    u = mu + sigma * noise_rng.standard_normal(mu.shape[0])
                    lp = gaussian_log_prob(u, mu, sigma)
                value = critic.value(obs[e])
                nxt, reward, done, _info = envs[e].step(u if u.size > 1 else float(u[0]))
                buffer.add(obs[e], u, lp, reward, value, done, sigma)
                ep_return[e] += reward
                if done:
                    episodes_done += 1
                    score_history.append(ep_return[e])
                    rs = running_score()
                    running_history.append(rs)
                    if rs > best_score:
                        best_score = rs
                        best_params = actor.snapshot()
                        best_episode = episodes_done - 1
                    episode_log.append({
                        "episode": episodes_done - 1,
                        "score": ep_return[e],
                        "running_score": rs,
                        "sigma_frac": cfg.sigma_frac(episodes_done - 1),
                        "fallbacks": getattr(actor, "fallback_count", 0),
                    })
                    ep_return[e] = 0.0
                    nxt = envs[e].reset() if task == "nmpc" else envs[e].reset("train")
                    if episodes_done >= cfg.total_episodes:
                        stop_collecting = True
                obs[e] = nxt
                if stop_collecting:
                    break
            if stop_collecting:
                break
        if stop_collecting and not buffer.full:
            break
        bootstrap = np.array([critic.value(o) for o in obs])
        compute_gae(buffer, cfg.gamma, cfg.gae_lambda, bootstrap)
        stats = ppo_update(actor, critic, buffer, cfg, actor_opt, critic_opt, shuffle_rng)
        update_log.append({
            "episodes_done": episodes_done,
            "actor_loss": stats.actor_loss,
            "critic_loss": stats.critic_loss,
            "clip_fraction": stats.clip_fraction,
            "skipped": stats.skipped_minibatches,
        })

    result = TrainResult(
        best_params=best_params,
        best_score=best_score,
        best_episode=best_episode,
        score_history=score_history,
        running_history=running_history,
        episode_log=episode_log,
        update_log=update_log,
        fallback_count=getattr(actor, "fallback_count", 0),
        degenerate_count=getattr(actor, "degenerate_count", 0),
    )
    if out_dir is not None:
        _write_training_log(Path(out_dir), result)
    return result


def save_policy(path, actor: MlpActor) -> None:
    """Checkpoint a model-free policy (plain or branched) bit-exactly."""
    from .nn_core import mlp_state, save_checkpoint

    if isinstance(actor.net, BranchedMlp):
        arrays, meta = {}, {"branches": [], "splits": actor.net.splits}
        for i, b in enumerate(actor.net.branches):
            a, m = mlp_state(b, f"branch{i}")
            arrays.update(a)
            meta["branches"].append(m)
        a, m = mlp_state(actor.net.trunk, "trunk")
        arrays.update(a)
        meta["trunk"] = m
        kind = "branched_policy"
    else:
        arrays, m = mlp_state(actor.net, "net")
        meta = {"net": m}
        kind = "mlp_policy"
    meta["task"] = actor.task
    meta["price_scale"] = actor.price_scale
    save_checkpoint(path, kind, arrays, meta)


def load_policy(path) -> MlpActor:
    from .nn_core import load_checkpoint, mlp_from_state

    kind, arrays, meta = load_checkpoint(path)
    if kind == "mlp_policy":
        net = mlp_from_state(arrays, meta["net"], "net")
    elif kind == "branched_policy":
        branches = [
            mlp_from_state(arrays, m, f"branch{i}") for i, m in enumerate(meta["branches"])
        ]
        trunk = mlp_from_state(arrays, meta["trunk"], "trunk")
        net = BranchedMlp(branches=branches, trunk=trunk, splits=list(meta["splits"]))
    else:
        raise ValueError(f"checkpoint kind {kind!r} is not a policy")
    return MlpActor(net, meta["task"], price_scale=float(meta["price_scale"]))


def _write_training_log(out_dir: Path, result: TrainResult) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "training_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["episode", "score", "running_score", "sigma_frac", "fallbacks"]
        )
        writer.writeheader()
        writer.writerows(result.episode_log)
    with open(out_dir / "update_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["episodes_done", "actor_loss", "critic_loss", "clip_fraction", "skipped"],
        )
        writer.writeheader()
        writer.writerows(result.update_log)
