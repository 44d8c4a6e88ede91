"""Offline training of the z-conditioned actor/critic and the aggregator.

One trainer serves four representation-learning modes that share identical
RL updates and differ only in the encoder loss and in whether the
transition encoder is trainable:

* corro          transition encoder frozen (contrastively pretrained),
                 aggregator trained through the critic loss
* offline-pearl  whole encoder trained through the critic loss only
* focal          adds a distance-metric loss over per-context embeddings
* supervised     adds an L2 loss to projected ground-truth task parameters
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from corrolab import bundle, envs, sacnets, taskenc
from corrolab.collect import sac_critic_target
from corrolab.errors import DimensionMismatch, NonFiniteError
from corrolab.numcore import AdamOptimizer, MlpSpec, ParamVector, TapeParams, init_params, mlp_forward
from corrolab.numcore import tensor as T
from corrolab.numcore.mlp import mlp_fused_t

MODE_KINDS = ("corro", "offline-pearl", "focal", "supervised")


@dataclass
class ReprMode:
    kind: str
    focal_beta: float = 1.0
    focal_n: float = 2.0
    focal_eps: float = 0.1

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown representation mode {self.kind!r} (known: {MODE_KINDS})")
        if self.focal_eps <= 0:
            raise ValueError("focal_eps must be positive")

    @property
    def trains_theta1(self):
        return self.kind != "corro"


@dataclass
class MetaConfig:
    training_steps: int = 6000
    task_batch_size: int = 16
    rl_batch_size: int = 256  # total rows per update, split across the task batch
    context_length: int = 200
    gamma: float = 0.9
    alpha: float = 0.2
    tau: float = 0.005
    learning_rate: float = 3e-4
    rl_hidden: tuple = (64, 64)
    latent_dim: int = 5
    enc_hidden: tuple = (64, 64)
    agg_hidden: tuple = (64,)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0,1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0,1], got {self.tau}")
        for name in ("task_batch_size", "rl_batch_size", "context_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class MetaPolicyParams:
    encoder: taskenc.EncoderParams
    q1: ParamVector
    q2: ParamVector
    q1_targ: ParamVector
    q2_targ: ParamVector
    actor: ParamVector
    actor_spec: MlpSpec
    critic_spec: MlpSpec
    mode: ReprMode
    family: str

    @property
    def latent_dim(self):
        return self.encoder.latent_dim


# ------------------------------------------------------------ mode losses


def focal_dml_loss(q_i, q_j, same_task, beta=1.0, n=2.0, eps=0.1):
    """Distance-metric pair loss: pull same-task embeddings, push others."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    q_i = np.asarray(q_i, dtype=np.float64)
    q_j = np.asarray(q_j, dtype=np.float64)
    if q_i.shape != q_j.shape:
        raise DimensionMismatch("embedding shapes", q_i.shape, q_j.shape)
    d2 = float(np.sum((q_i - q_j) ** 2))
    if same_task:
        return d2
    return beta / (d2 ** (n / 2.0) + eps)


def descriptor_projection(descriptor, latent_dim):
    """Identity on the first min(latent_dim, len(descriptor)) coordinates."""
    descriptor = np.asarray(descriptor, dtype=np.float64).ravel()
    out = np.zeros(latent_dim)
    k = min(latent_dim, descriptor.size)
    out[:k] = descriptor[:k]
    return out


def supervised_encoder_loss(z, task_descriptor):
    """Squared L2 distance between z and the projected task descriptor."""
    z = np.asarray(z, dtype=np.float64).ravel()
    target = descriptor_projection(task_descriptor, z.size)
    return float(np.sum((z - target) ** 2))


# ------------------------------------------------------------------ acting


def act(params, s, z, deterministic, rng=None):
    """Policy action for state s under task representation z, in env units."""
    obs = np.concatenate([np.asarray(s, dtype=np.float64).ravel(), np.asarray(z, dtype=np.float64).ravel()])
    if obs.size != params.actor_spec.input_dim:
        raise DimensionMismatch("actor input dim", params.actor_spec.input_dim, obs.size)
    scale = envs.action_scale(params.family)
    if deterministic:
        return sacnets.deterministic_action(params.actor_spec, params.actor, obs, scale)
    return sacnets.sample_action(params.actor_spec, params.actor, obs, scale, rng)


# ---------------------------------------------------------------- training


def _aggregate_batch_t(encoder, tape_theta2, latents, n_ctx, k):
    """Batched softmax-weighted sums for n_ctx equal-length contexts."""
    latent_dim = encoder.latent_dim
    logits = mlp_fused_t(encoder.agg_spec, tape_theta2, latents)  # (n*k, 1)
    w = T.softmax(T.reshape(logits, (n_ctx, k)), axis=1)
    lat3 = T.reshape(latents, (n_ctx, k, latent_dim))
    return T.sum_(T.mul(T.reshape(w, (n_ctx, k, 1)), lat3), axis=1)  # (n_ctx, L)


def _focal_loss_t(z_batch, task_ids, mode):
    a = z_batch.data.shape[0]
    same = (task_ids[:, None] == task_ids[None, :]) & ~np.eye(a, dtype=bool)
    diff = (task_ids[:, None] != task_ids[None, :])
    latent = z_batch.data.shape[1]
    z1 = T.reshape(z_batch, (a, 1, latent))
    z2 = T.reshape(z_batch, (1, a, latent))
    d2 = T.sum_(T.square(T.sub(z1, z2)), axis=2)  # (a, a)
    pow_term = d2 if mode.focal_n == 2.0 else T.pow_const(d2, mode.focal_n / 2.0)
    push = T.div(T.Tensor(np.full((a, a), mode.focal_beta)), T.add(pow_term, T.Tensor(mode.focal_eps)))
    pair_terms = T.add(T.mul(d2, T.Tensor(same.astype(float))), T.mul(push, T.Tensor(diff.astype(float))))
    n_pairs = a * (a - 1)
    return T.mul(T.sum_(pair_terms), T.Tensor(1.0 / n_pairs))


def train_meta_policy(datasets, mode, pretrained_encoder, cfg, rng, metrics=None, trace=None):
    """Offline SAC over z-augmented states, with mode-specific encoder losses.

    corro mode requires a pretrained encoder whose transition half stays
    bit-identical; other modes train the whole encoder end to end and may
    start from a fresh one (pretrained_encoder None).
    """
    if not datasets:
        raise ValueError("train_meta_policy needs at least one dataset")
    family = datasets[0].task.family
    if mode.kind == "corro" and pretrained_encoder is None:
        raise ValueError("corro mode requires a pretrained transition encoder")

    if pretrained_encoder is not None:
        encoder = pretrained_encoder.copy()
    else:
        encoder = taskenc.make_encoder(family, rng, cfg.latent_dim, cfg.enc_hidden, cfg.agg_hidden)
    if np.array_equal(encoder.input_scale, np.ones(encoder.enc_spec.input_dim)):
        encoder.input_mean, encoder.input_scale = taskenc.fit_input_normalization(datasets)

    od, ad = envs.obs_dim(family), envs.action_dim(family)
    latent = encoder.latent_dim
    scale = envs.action_scale(family)
    aspec = sacnets.actor_spec(od + latent, ad, cfg.rl_hidden)
    cspec = sacnets.critic_spec(od + latent, ad, cfg.rl_hidden)
    actor = init_params(aspec, rng)
    q1 = init_params(cspec, rng)
    q2 = init_params(cspec, rng)
    q1_targ, q2_targ = q1.copy(), q2.copy()

    opt_actor = AdamOptimizer(actor, cfg.learning_rate)
    opt_q1 = AdamOptimizer(q1, cfg.learning_rate)
    opt_q2 = AdamOptimizer(q2, cfg.learning_rate)
    opt_t2 = AdamOptimizer(encoder.theta2, cfg.learning_rate)
    opt_t1 = AdamOptimizer(encoder.theta1, cfg.learning_rate) if mode.trains_theta1 else None

    n_tasks = len(datasets)
    ctx_len = min(cfg.context_length, min(d.size for d in datasets))
    a_batch = cfg.task_batch_size
    b = max(1, cfg.rl_batch_size // cfg.task_batch_size)  # rows per task
    descriptors = np.stack(
        [descriptor_projection(envs.task_descriptor(d.task), latent) for d in datasets]
    )
    # frozen transition encoder: embed every dataset tuple once up front
    cached_latents = None
    if not mode.trains_theta1:
        cached_latents = [taskenc.encode_rows(encoder, d.tuple_matrix()) for d in datasets]

    for step in range(1, cfg.training_steps + 1):
        task_ids = rng.integers(0, n_tasks, a_batch)
        ctx_parts, s_parts, a_parts, r_parts, sn_parts, d_parts, firsts = [], [], [], [], [], [], []
        for tid in task_ids:
            ds = datasets[tid]
            j = int(rng.integers(0, ds.size - ctx_len + 1))
            if cached_latents is not None:
                ctx_parts.append(cached_latents[tid][j : j + ctx_len])
            else:
                ctx_parts.append(ds.slice_context(j, ctx_len).matrix())
            idx = rng.integers(0, ds.size, b)
            firsts.append(int(idx[0]))
            s_parts.append(ds.s[idx])
            a_parts.append(ds.a[idx])
            r_parts.append(ds.r[idx])
            sn_parts.append(ds.s_next[idx])
            d_parts.append(ds.done[idx])
        if trace is not None:
            trace.append((tuple(int(t) for t in task_ids), tuple(firsts)))

        s_all = np.vstack(s_parts)
        a_all = np.vstack(a_parts)
        r_all = np.concatenate(r_parts)
        sn_all = np.vstack(sn_parts)
        d_all = np.concatenate(d_parts)

        tp_t2 = TapeParams(encoder.theta2)
        tp_t1 = TapeParams(encoder.theta1) if mode.trains_theta1 else None
        if tp_t1 is not None:
            latents = mlp_fused_t(encoder.enc_spec, tp_t1, encoder.normalize(np.vstack(ctx_parts)))
        else:
            latents = T.Tensor(np.vstack(ctx_parts))
        z_batch = _aggregate_batch_t(encoder, tp_t2, latents, a_batch, ctx_len)  # (A, L)
        z_rep = T.repeat_rows(z_batch, b)  # (A*B, L)
        z_np = np.repeat(z_batch.data, b, axis=0)

        # critic targets use the target networks and a detached z
        next_in = np.concatenate([sn_all, z_np], axis=1)
        next_a, next_logp = sacnets.sample_action_logp(aspec, actor, next_in, scale, rng)
        tin = np.concatenate([next_in, next_a], axis=1)
        q_min = np.minimum(
            sacnets.critic_value(cspec, q1_targ, tin), sacnets.critic_value(cspec, q2_targ, tin)
        )
        y = sac_critic_target(r_all, sn_all, d_all, cfg.gamma, cfg.alpha, q_min, next_logp)

        tp_q1, tp_q2 = TapeParams(q1), TapeParams(q2)
        critic_in = T.concat([T.Tensor(s_all), z_rep, T.Tensor(a_all)], axis=1)
        y_t = T.Tensor(y)
        q1v = sacnets.critic_value_t(cspec, tp_q1, critic_in)
        q2v = sacnets.critic_value_t(cspec, tp_q2, critic_in)
        critic_loss = T.add(T.mean(T.square(T.sub(q1v, y_t))), T.mean(T.square(T.sub(q2v, y_t))))

        enc_loss = None
        if mode.kind == "focal":
            enc_loss = _focal_loss_t(z_batch, task_ids, mode)
        elif mode.kind == "supervised":
            targets = descriptors[task_ids]
            enc_loss = T.mean(T.sum_(T.square(T.sub(z_batch, T.Tensor(targets))), axis=1))
        total = critic_loss if enc_loss is None else T.add(critic_loss, enc_loss)
        if not np.isfinite(total.data):
            raise NonFiniteError("critic/encoder loss", step)
        T.backward(total)
        q1 = opt_q1.update(q1, tp_q1.grad_vector("critic"))
        q2 = opt_q2.update(q2, tp_q2.grad_vector("critic"))
        encoder.theta2 = opt_t2.update(encoder.theta2, tp_t2.grad_vector("aggregator"))
        if tp_t1 is not None:
            encoder.theta1 = opt_t1.update(encoder.theta1, tp_t1.grad_vector("encoder"))

        # actor update against frozen critics and detached z
        actor_in = np.concatenate([s_all, z_np], axis=1)
        tp_a = TapeParams(actor)
        noise = rng.standard_normal((s_all.shape[0], ad))
        act_t, logp_t = sacnets.actor_sample_t(aspec, tp_a, actor_in, scale, noise)
        q_in = T.concat([T.Tensor(actor_in), act_t], axis=1)
        fq1 = TapeParams(q1, requires_grad=False)
        fq2 = TapeParams(q2, requires_grad=False)
        q_pi = T.minimum(
            sacnets.critic_value_t(cspec, fq1, q_in), sacnets.critic_value_t(cspec, fq2, q_in)
        )
        actor_loss = T.mean(T.sub(T.mul(logp_t, T.Tensor(cfg.alpha)), q_pi))
        if not np.isfinite(actor_loss.data):
            raise NonFiniteError("actor loss", step)
        T.backward(actor_loss)
        actor = opt_actor.update(actor, tp_a.grad_vector("actor"))

        q1_targ = sacnets.polyak(q1_targ, q1, cfg.tau)
        q2_targ = sacnets.polyak(q2_targ, q2, cfg.tau)

        if metrics is not None and (step % 100 == 0 or step == 1):
            metrics.append((step, "critic_loss", float(critic_loss.data)))
            metrics.append((step, "actor_loss", float(actor_loss.data)))
            if enc_loss is not None:
                metrics.append((step, f"{mode.kind}_loss", float(enc_loss.data)))

    return MetaPolicyParams(encoder, q1, q2, q1_targ, q2_targ, actor, aspec, cspec, mode, family)


# ------------------------------------------------------------ persistence


def save_policy(path, params):
    from corrolab.taskenc import _norm_pv, spec_to_str

    bundle.write_bundle(
        path,
        {
            "theta1": params.encoder.theta1,
            "theta2": params.encoder.theta2,
            "input_norm": _norm_pv(params.encoder),
            "q1": params.q1,
            "q2": params.q2,
            "q1_targ": params.q1_targ,
            "q2_targ": params.q2_targ,
            "actor": params.actor,
        },
        {
            "enc_spec": spec_to_str(params.encoder.enc_spec),
            "agg_spec": spec_to_str(params.encoder.agg_spec),
            "actor_spec": spec_to_str(params.actor_spec),
            "critic_spec": spec_to_str(params.critic_spec),
            "mode": params.mode.kind,
            "focal_beta": repr(params.mode.focal_beta),
            "focal_n": repr(params.mode.focal_n),
            "focal_eps": repr(params.mode.focal_eps),
            "family": params.family,
        },
    )


def load_policy(path):
    from corrolab.taskenc import spec_from_str

    tagged, meta = bundle.read_bundle(path)
    norm = tagged["input_norm"]
    encoder = taskenc.EncoderParams(
        tagged["theta1"],
        tagged["theta2"],
        spec_from_str(meta["enc_spec"]),
        spec_from_str(meta["agg_spec"]),
        norm.get("mean").copy(),
        norm.get("scale").copy(),
    )
    mode = ReprMode(
        meta["mode"], float(meta["focal_beta"]), float(meta["focal_n"]), float(meta["focal_eps"])
    )
    return MetaPolicyParams(
        encoder,
        tagged["q1"],
        tagged["q2"],
        tagged["q1_targ"],
        tagged["q2_targ"],
        tagged["actor"],
        spec_from_str(meta["actor_spec"]),
        spec_from_str(meta["critic_spec"]),
        mode,
        meta["family"],
    )
