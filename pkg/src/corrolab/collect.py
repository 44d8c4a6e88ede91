"""Per-task SAC training that produces offline datasets and behavior checkpoints.

The replay buffer, in collection order, becomes the task's offline dataset.
Actor snapshots taken every checkpoint_interval updates form the pool of
behavior policies used by the out-of-distribution evaluation protocol.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from corrolab import envs, sacnets
from corrolab.data import Context, OfflineDataset
from corrolab.errors import DimensionMismatch, NonFiniteError
from corrolab.numcore import AdamOptimizer, ParamVector, TapeParams, init_params
from corrolab.numcore import tensor as T


@dataclass
class SacConfig:
    gamma: float = 0.9
    alpha: float | str = 0.2  # entropy coefficient, or "auto"
    tau: float = 0.005  # target smoothing
    batch_size: int = 256
    training_steps: int = 1000
    checkpoint_interval: int = 100
    dataset_size: int = 2100
    warmup_steps: int = 300
    hidden: tuple = (32, 32)
    learning_rate: float = 3e-4

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0,1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0,1], got {self.tau}")
        if self.batch_size <= 0 or self.checkpoint_interval <= 0:
            raise ValueError("batch_size and checkpoint_interval must be positive")
        if self.training_steps < 0:
            raise ValueError("training_steps must be nonnegative")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")
        if self.dataset_size < self.warmup_steps:
            raise ValueError(
                f"dataset_size {self.dataset_size} smaller than warmup_steps {self.warmup_steps}"
            )
        if isinstance(self.alpha, str) and self.alpha != "auto":
            raise ValueError(f"alpha must be a number or 'auto', got {self.alpha!r}")
        self.hidden = tuple(int(h) for h in self.hidden)


def default_sac_config(family):
    if family == envs.POINT_ROBOT:
        return SacConfig(gamma=0.9, warmup_steps=300)
    # line-vel and point-robot-dyn use larger desk-scale budgets
    return SacConfig(
        gamma=0.95 if family == envs.LINE_VEL else 0.9,
        training_steps=20_000,
        checkpoint_interval=2_000,
        dataset_size=10_000,
        warmup_steps=1_000,
    )


@dataclass(frozen=True)
class CheckpointEntry:
    task_index: int
    epoch: int
    actor: ParamVector


class CheckpointPool:
    """Behavior-policy snapshots indexed by (task, training epoch)."""

    def __init__(self, entries, n_train_tasks=None):
        self.entries = list(entries)
        if not self.entries:
            raise ValueError("checkpoint pool is empty")
        if n_train_tasks is not None:
            covered = {e.task_index for e in self.entries}
            missing = set(range(n_train_tasks)) - covered
            if missing:
                raise ValueError(f"pool missing checkpoints for tasks {sorted(missing)}")

    def __len__(self):
        return len(self.entries)

    def sample(self, rng):
        return self.entries[int(rng.integers(0, len(self.entries)))]


def save_checkpoint(path, entry):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", entry.task_index, entry.epoch))
        fh.write(entry.actor.to_bytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    task_index, epoch = struct.unpack_from("<II", blob, 0)
    return CheckpointEntry(task_index, epoch, ParamVector.from_bytes(blob[8:]))


def sac_critic_target(r, s_next, done, gamma, alpha, target_q_min, log_pi_next):
    """Soft TD target: y = r + gamma * (1 - done) * (min target Q - alpha * log pi)."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0,1), got {gamma}")
    r = np.asarray(r, dtype=np.float64)
    mask = 1.0 - np.asarray(done, dtype=np.float64)
    return r + gamma * mask * (np.asarray(target_q_min) - alpha * np.asarray(log_pi_next))


def sample_context(dataset, length, rng):
    """A contiguous section of the dataset, start drawn uniformly."""
    if length <= 0:
        raise ValueError("context length must be positive")
    if dataset.size < length:
        raise ValueError(f"dataset has {dataset.size} tuples, need {length}")
    j = int(rng.integers(0, dataset.size - length + 1))
    return dataset.slice_context(j, length)


class _SacNets:
    """Actor, twin critics, their targets, and per-net Adam state."""

    def __init__(self, obs_dim, act_dim, cfg, rng):
        self.aspec = sacnets.actor_spec(obs_dim, act_dim, cfg.hidden)
        self.cspec = sacnets.critic_spec(obs_dim, act_dim, cfg.hidden)
        self.actor = init_params(self.aspec, rng)
        self.q1 = init_params(self.cspec, rng)
        self.q2 = init_params(self.cspec, rng)
        self.q1_targ = self.q1.copy()
        self.q2_targ = self.q2.copy()
        self.opt_actor = AdamOptimizer(self.actor, cfg.learning_rate)
        self.opt_q1 = AdamOptimizer(self.q1, cfg.learning_rate)
        self.opt_q2 = AdamOptimizer(self.q2, cfg.learning_rate)
        self.log_alpha = np.log(0.2)
        self.opt_alpha = AdamOptimizer(ParamVector(np.zeros(1), [("log_alpha", (1,))]), cfg.learning_rate)
        self.act_dim = act_dim

    def alpha_value(self, cfg):
        return float(np.exp(self.log_alpha)) if cfg.alpha == "auto" else float(cfg.alpha)


def _sac_update(nets, cfg, scale, s, a, r, sn, d, rng, step):
    alpha = nets.alpha_value(cfg)
    next_a, next_logp = sacnets.sample_action_logp(nets.aspec, nets.actor, sn, scale, rng)
    q1t = sacnets.critic_value(nets.cspec, nets.q1_targ, np.concatenate([sn, next_a], axis=1))
    q2t = sacnets.critic_value(nets.cspec, nets.q2_targ, np.concatenate([sn, next_a], axis=1))
    y = sac_critic_target(r, sn, d, cfg.gamma, alpha, np.minimum(q1t, q2t), next_logp)

    sa = np.concatenate([s, a], axis=1)
    tp1, tp2 = TapeParams(nets.q1), TapeParams(nets.q2)
    q1v = sacnets.critic_value_t(nets.cspec, tp1, T.Tensor(sa))
    q2v = sacnets.critic_value_t(nets.cspec, tp2, T.Tensor(sa))
    y_t = T.Tensor(y)
    critic_loss = T.add(T.mean(T.square(T.sub(q1v, y_t))), T.mean(T.square(T.sub(q2v, y_t))))
    if not np.isfinite(critic_loss.data):
        raise NonFiniteError("critic loss", step)
    T.backward(critic_loss)
    nets.q1 = nets.opt_q1.update(nets.q1, tp1.grad_vector("critic"))
    nets.q2 = nets.opt_q2.update(nets.q2, tp2.grad_vector("critic"))

    tpa = TapeParams(nets.actor)
    noise = rng.standard_normal((s.shape[0], nets.act_dim))
    act_t, logp_t = sacnets.actor_sample_t(nets.aspec, tpa, s, scale, noise)
    qin = T.concat([T.Tensor(s), act_t], axis=1)
    fq1 = TapeParams(nets.q1, requires_grad=False)
    fq2 = TapeParams(nets.q2, requires_grad=False)
    qmin = T.minimum(
        sacnets.critic_value_t(nets.cspec, fq1, qin), sacnets.critic_value_t(nets.cspec, fq2, qin)
    )
    actor_loss = T.mean(T.sub(T.mul(logp_t, T.Tensor(alpha)), qmin))
    if not np.isfinite(actor_loss.data):
        raise NonFiniteError("actor loss", step)
    T.backward(actor_loss)
    nets.actor = nets.opt_actor.update(nets.actor, tpa.grad_vector("actor"))

    if cfg.alpha == "auto":
        target_entropy = -float(nets.act_dim)
        grad = -np.exp(nets.log_alpha) * float(np.mean(logp_t.data + target_entropy))
        pv = ParamVector(np.array([nets.log_alpha]), [("log_alpha", (1,))])
        pv = nets.opt_alpha.update(pv, ParamVector(np.array([grad]), pv.layout))
        nets.log_alpha = float(pv.values[0])

    nets.q1_targ = sacnets.polyak(nets.q1_targ, nets.q1, cfg.tau)
    nets.q2_targ = sacnets.polyak(nets.q2_targ, nets.q2, cfg.tau)
    return float(critic_loss.data), float(actor_loss.data)


def train_behavior_policy(task, cfg, rng, task_index=0):
    """Run SAC from scratch on one task.

    Returns (checkpoints, dataset) where the dataset is the full replay
    buffer in collection order and checkpoints are actor snapshots taken at
    update counts 0, interval, 2*interval, ...
    """
    family = task.family
    od, ad = envs.obs_dim(family), envs.action_dim(family)
    scale = envs.action_scale(family)
    nets = _SacNets(od, ad, cfg, rng)

    cap = cfg.dataset_size
    buf_s = np.empty((cap, od))
    buf_a = np.empty((cap, ad))
    buf_r = np.empty(cap)
    buf_sn = np.empty((cap, od))
    buf_d = np.zeros(cap, dtype=bool)
    filled = 0
    state = envs.env_reset(task)

    def env_step_record(action):
        nonlocal filled, state
        res = envs.env_step(task, state, action)
        buf_s[filled] = state.observation
        buf_a[filled] = np.clip(action, -scale, scale)
        buf_r[filled] = res.reward
        buf_sn[filled] = res.next_observation
        buf_d[filled] = res.done
        filled += 1
        state = envs.next_state(state, res) if not res.done else envs.env_reset(task)

    for _ in range(cfg.warmup_steps):
        env_step_record(rng.uniform(-scale, scale, ad))

    checkpoints = [CheckpointEntry(task_index, 0, nets.actor.copy())]
    span = cfg.dataset_size - cfg.warmup_steps
    for t in range(1, cfg.training_steps + 1):
        target_fill = cfg.warmup_steps + (span * t) // cfg.training_steps
        while filled < target_fill:
            env_step_record(sacnets.sample_action(nets.aspec, nets.actor, state.observation, scale, rng))
        idx = rng.integers(0, filled, cfg.batch_size)
        _sac_update(nets, cfg, scale, buf_s[idx], buf_a[idx], buf_r[idx], buf_sn[idx], buf_d[idx], rng, t)
        if t % cfg.checkpoint_interval == 0:
            checkpoints.append(CheckpointEntry(task_index, t, nets.actor.copy()))

    dataset = OfflineDataset(task, buf_s[:filled], buf_a[:filled], buf_r[:filled], buf_sn[:filled], buf_d[:filled])
    return checkpoints, dataset
