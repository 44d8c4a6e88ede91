"""Contrastive training of the transition encoder.

The encoder is trained with a (1 + negatives)-way InfoNCE classification
loss: for an anchor tuple x and a positive x' from the same task, the
negatives replace the anchor's outcome (r, s') with counterfactuals from
other tasks. Four generators for those counterfactuals are provided:

* generative  sample (r, s') from a conditional VAE fit on all datasets
* randomize   perturb the anchor's reward with Gaussian noise
* relabel     predict (r, s') with per-task reward/transition models
* none        raw tuples from other tasks, (s, a) unconstrained

An exact enumeration oracle over finite tabulated instances computes the
true mutual information between representation and task and the InfoNCE
lower bound, so the bound can be verified without sampling error.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from corrolab import envs, taskenc
from corrolab.data import TransitionTuple
from corrolab.errors import NonFiniteError, StrategyError, TabulationError
from corrolab.numcore import AdamOptimizer, MlpSpec, ParamVector, TapeParams, init_params, mlp_forward
from corrolab.numcore import tensor as T
from corrolab.numcore.mlp import mlp_fused_t


@dataclass
class ContrastConfig:
    task_batch_size: int = 16
    contrastive_batch_size: int = 64
    negatives_per_anchor: int = 16
    training_steps: int = 6000
    # 0.1 sharpens the cosine logits enough for the encoder to actually
    # separate tasks at this scale; 1.0 is the raw similarity.
    temperature: float = 0.1
    learning_rate: float = 1e-3
    standardize_inputs: bool = True

    def __post_init__(self):
        for name in ("task_batch_size", "contrastive_batch_size", "negatives_per_anchor", "training_steps"):
            if getattr(self, name) < 0 or (name != "training_steps" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


# ------------------------------------------------------------------- InfoNCE


def info_nce_loss(anchor_z, positive_z, negatives, temperature=1.0):
    """-log( e^{S(z,z')} / (e^{S(z,z')} + sum_i e^{S(z,z*_i)}) ).

    Zero when the negative set is empty: the classification then has a
    single candidate, the positive itself.
    """
    s_pos = taskenc.score(anchor_z, positive_z, temperature)
    scores = [s_pos] + [taskenc.score(anchor_z, z, temperature) for z in negatives]
    m = max(scores)
    return float(-s_pos + m + math.log(sum(math.exp(s - m) for s in scores)))


def _info_nce_batch_t(z_all, n_anchors, n_neg, temperature):
    """Tape InfoNCE over stacked embeddings [anchors; positives; negatives]."""
    norms_data = np.sqrt((z_all.data * z_all.data).sum(axis=1))
    if np.any(norms_data == 0.0):
        from corrolab.errors import DegenerateRepresentation

        raise DegenerateRepresentation("degenerate representation: zero-norm latent in batch")
    norms = T.sqrt(T.sum_(T.square(z_all), axis=1, keepdims=True))
    unit = T.div(z_all, norms)
    latent = z_all.data.shape[1]
    na = T.slice_rows(unit, 0, n_anchors)
    npos = T.slice_rows(unit, n_anchors, 2 * n_anchors)
    inv_tau = 1.0 / temperature
    s_pos = T.mul(T.sum_(T.mul(na, npos), axis=1), T.Tensor(inv_tau))  # (B,)
    if n_neg > 0:
        nneg = T.reshape(T.slice_rows(unit, 2 * n_anchors, 2 * n_anchors + n_anchors * n_neg), (n_anchors, n_neg, latent))
        na3 = T.reshape(na, (n_anchors, 1, latent))
        s_neg = T.mul(T.sum_(T.mul(na3, nneg), axis=2), T.Tensor(inv_tau))  # (B, n_neg)
        scores = T.concat([T.reshape(s_pos, (n_anchors, 1)), s_neg], axis=1)
    else:
        scores = T.reshape(s_pos, (n_anchors, 1))
    return T.mean(T.sub(T.logsumexp(scores, axis=1), s_pos))


# ---------------------------------------------------------------------- CVAE


@dataclass
class CvaeParams:
    omega: ParamVector  # probabilistic encoder q(z | s, a, r, s')
    xi: ParamVector  # generator p(r, s' | s, a, z)
    enc_spec: MlpSpec
    dec_spec: MlpSpec
    latent_dim: int


@dataclass
class CvaeConfig:
    latent_dim: int = 5
    hidden: tuple = (64, 64)
    training_steps: int = 6000
    batch_size: int = 256
    learning_rate: float = 3e-4


def make_cvae(family, rng, latent_dim=5, hidden=(64, 64)):
    ds, da = envs.obs_dim(family), envs.action_dim(family)
    enc_spec = MlpSpec(2 * ds + da + 1, 2 * latent_dim, tuple(hidden), "tanh", "identity")
    dec_spec = MlpSpec(ds + da + latent_dim, 1 + ds, tuple(hidden), "tanh", "identity")
    return CvaeParams(init_params(enc_spec, rng), init_params(dec_spec, rng), enc_spec, dec_spec, latent_dim)


def _cvae_loss_t(params, tp_omega, tp_xi, rows, sa_cols, target_cols, noise):
    """Reconstruction NLL (unit output variance) + KL to the standard normal."""
    n = rows.shape[0]
    latent = params.latent_dim
    enc_out = mlp_fused_t(params.enc_spec, tp_omega, rows)
    mu = T.slice_cols(enc_out, 0, latent)
    logvar = T.slice_cols(enc_out, latent, 2 * latent)
    z = T.add(mu, T.mul(T.exp(T.mul(logvar, T.Tensor(0.5))), T.Tensor(noise)))
    dec_in = T.concat([T.Tensor(rows[:, sa_cols]), z], axis=1)
    pred = mlp_fused_t(params.dec_spec, tp_xi, dec_in)
    target = T.Tensor(rows[:, target_cols])
    d_out = len(target_cols)
    nll = T.add(
        T.mul(T.sum_(T.square(T.sub(target, pred)), axis=1), T.Tensor(0.5)),
        T.Tensor(0.5 * d_out * np.log(2.0 * np.pi)),
    )
    kl = T.mul(
        T.sum_(T.sub(T.sub(T.add(T.square(mu), T.exp(logvar)), logvar), T.Tensor(1.0)), axis=1),
        T.Tensor(0.5),
    )
    return T.mean(T.add(nll, kl))


def _tuple_cols(family):
    ds, da = envs.obs_dim(family), envs.action_dim(family)
    sa = list(range(ds + da))
    target = list(range(ds + da, 2 * ds + da + 1))  # (r, s')
    return sa, target


def cvae_loss(params, batch, family, rng=None, noise=None):
    """Mean single-sample ELBO loss over a batch of transition tuples.

    batch is a list of TransitionTuple or a (n, tuple_dim) matrix. noise
    overrides the reparameterization draw (for gradient checks).
    """
    rows = batch if isinstance(batch, np.ndarray) else np.stack([taskenc.tuple_vector(t) for t in batch])
    if rows.shape[0] == 0:
        raise ValueError("cvae_loss needs a non-empty batch")
    if noise is None:
        noise = rng.standard_normal((rows.shape[0], params.latent_dim))
    sa, target = _tuple_cols(family)
    loss = _cvae_loss_t(
        params, TapeParams(params.omega, requires_grad=False), TapeParams(params.xi, requires_grad=False),
        rows, sa, target, noise,
    )
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError("cvae loss")
    return value


def union_sample_indices(sizes, batch, rng):
    """Uniform draw over the union: dataset picked proportionally to size.

    Returns (dataset_index, row_index) arrays for one minibatch.
    """
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = rng.integers(0, offsets[-1], batch)
    which = np.searchsorted(offsets, flat, side="right") - 1
    return which, flat - offsets[which]


def cvae_loss_gradients(params, batch, family, noise):
    """Loss and analytic gradients for a frozen reparameterization draw."""
    rows = batch if isinstance(batch, np.ndarray) else np.stack([taskenc.tuple_vector(t) for t in batch])
    sa, target = _tuple_cols(family)
    tpo, tpx = TapeParams(params.omega), TapeParams(params.xi)
    loss = _cvae_loss_t(params, tpo, tpx, rows, sa, target, noise)
    T.backward(loss)
    return float(loss.data), tpo.grad_vector("cvae"), tpx.grad_vector("cvae")


def train_cvae(datasets, cfg, rng, metrics=None):
    """Fit the CVAE on the union of all datasets by Adam on minibatches."""
    if not datasets:
        raise ValueError("train_cvae needs at least one dataset")
    family = datasets[0].task.family
    params = make_cvae(family, rng, cfg.latent_dim, cfg.hidden)
    union = np.vstack([d.tuple_matrix() for d in datasets])
    sa, target = _tuple_cols(family)
    opt_omega = AdamOptimizer(params.omega, cfg.learning_rate)
    opt_xi = AdamOptimizer(params.xi, cfg.learning_rate)
    for step in range(1, cfg.training_steps + 1):
        rows = union[rng.integers(0, union.shape[0], cfg.batch_size)]
        noise = rng.standard_normal((cfg.batch_size, params.latent_dim))
        tpo, tpx = TapeParams(params.omega), TapeParams(params.xi)
        loss = _cvae_loss_t(params, tpo, tpx, rows, sa, target, noise)
        if not np.isfinite(loss.data):
            raise NonFiniteError("cvae loss", step)
        T.backward(loss)
        params.omega = opt_omega.update(params.omega, tpo.grad_vector("cvae"))
        params.xi = opt_xi.update(params.xi, tpx.grad_vector("cvae"))
        if metrics is not None and (step % 100 == 0 or step == 1):
            metrics.append((step, "cvae_loss", float(loss.data)))
    return params


def cvae_generate(params, s_rows, a_rows, family, rng, generation_noise=0.1):
    """Sample (r, s') from the generator at given (s, a), z from the prior.

    Gaussian noise of std generation_noise is added to the generated reward
    (and to s' for transition-varying families) to preserve diversity when
    the generator is nearly deterministic. Set it to 0 to disable.
    """
    n = s_rows.shape[0]
    z = rng.standard_normal((n, params.latent_dim))
    pred = mlp_forward(params.dec_spec, params.xi, np.concatenate([s_rows, a_rows, z], axis=1))
    r = pred[:, 0]
    s_next = pred[:, 1:]
    if generation_noise > 0:
        r = r + generation_noise * rng.standard_normal(n)
        if envs.transition_varying(family):
            s_next = s_next + generation_noise * rng.standard_normal(s_next.shape)
    return r, s_next


# ------------------------------------------------------------ relabel models


@dataclass
class RelabelModels:
    """Per-task reward and transition predictors fit on single-task datasets."""

    reward_specs: list
    reward_params: list
    trans_specs: list
    trans_params: list

    def __len__(self):
        return len(self.reward_params)

    def predict(self, task_index, s_rows, a_rows):
        x = np.concatenate([s_rows, a_rows], axis=1)
        r = mlp_forward(self.reward_specs[task_index], self.reward_params[task_index], x)[:, 0]
        s_next = mlp_forward(self.trans_specs[task_index], self.trans_params[task_index], x)
        return r, s_next


@dataclass
class RelabelConfig:
    hidden: tuple = (32, 32)
    training_steps: int = 1500
    batch_size: int = 128
    learning_rate: float = 3e-4


def _fit_regressor(x, y, spec, cfg, rng):
    params = init_params(spec, rng)
    opt = AdamOptimizer(params, cfg.learning_rate)
    for step in range(1, cfg.training_steps + 1):
        idx = rng.integers(0, x.shape[0], cfg.batch_size)
        tp = TapeParams(params)
        pred = mlp_fused_t(spec, tp, x[idx])
        loss = T.mean(T.sum_(T.square(T.sub(pred, T.Tensor(y[idx]))), axis=1))
        if not np.isfinite(loss.data):
            raise NonFiniteError("relabel model loss", step)
        T.backward(loss)
        params = opt.update(params, tp.grad_vector("relabel"))
    return params


def train_relabel_models(datasets, cfg, rng):
    """Separately fit a reward model and a transition model on each dataset."""
    family = datasets[0].task.family
    ds, da = envs.obs_dim(family), envs.action_dim(family)
    rspec = MlpSpec(ds + da, 1, tuple(cfg.hidden), "tanh", "identity")
    tspec = MlpSpec(ds + da, ds, tuple(cfg.hidden), "tanh", "identity")
    out = RelabelModels([], [], [], [])
    for d in datasets:
        x = np.concatenate([d.s, d.a], axis=1)
        out.reward_specs.append(rspec)
        out.reward_params.append(_fit_regressor(x, d.r[:, None], rspec, cfg, rng))
        out.trans_specs.append(tspec)
        out.trans_params.append(_fit_regressor(x, d.s_next, tspec, cfg, rng))
    return out


# --------------------------------------------------------- negative sampling


STRATEGY_KINDS = ("generative", "randomize", "relabel", "none")


@dataclass
class NegativeStrategy:
    kind: str
    negatives_per_anchor: int = 16
    noise_std: float = 0.5  # randomize: reward perturbation scale
    cvae: CvaeParams | None = None
    relabel: RelabelModels | None = None
    generation_noise: float = 0.1  # generative: decoder output noise

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise StrategyError(f"unknown strategy {self.kind!r} (known: {STRATEGY_KINDS})")
        if self.negatives_per_anchor < 1:
            raise StrategyError("negatives_per_anchor must be at least 1")


def default_strategy_kind(family):
    return {envs.POINT_ROBOT: "randomize", envs.LINE_VEL: "generative", envs.POINT_ROBOT_DYN: "none"}[family]


def negative_rows(strategy, s_rows, a_rows, r_vals, sn_rows, task_ids, datasets, rng):
    """Batched negative generation.

    For B anchors returns a (B * n, tuple_dim) matrix of negatives, n per
    anchor, grouped anchor-major. n is strategy.negatives_per_anchor except
    for "none" with a single dataset, where no negatives exist (n = 0).
    """
    family = datasets[0].task.family
    n_tasks = len(datasets)
    b = s_rows.shape[0]
    n = strategy.negatives_per_anchor
    kind = strategy.kind

    if kind == "randomize":
        if envs.transition_varying(family):
            raise StrategyError(f"strategy inapplicable: randomize perturbs rewards but {family} varies in transition")
        nu = rng.normal(0.0, strategy.noise_std, (b, n))
        r_star = (r_vals[:, None] + nu).reshape(b * n)
        s_rep = np.repeat(s_rows, n, axis=0)
        a_rep = np.repeat(a_rows, n, axis=0)
        sn_rep = np.repeat(sn_rows, n, axis=0)
        return np.concatenate([s_rep, a_rep, r_star[:, None], sn_rep], axis=1)

    if kind == "generative":
        if strategy.cvae is None:
            raise StrategyError("generative strategy requires a trained CVAE")
        s_rep = np.repeat(s_rows, n, axis=0)
        a_rep = np.repeat(a_rows, n, axis=0)
        r_star, sn_star = cvae_generate(strategy.cvae, s_rep, a_rep, family, rng, strategy.generation_noise)
        return np.concatenate([s_rep, a_rep, r_star[:, None], sn_star], axis=1)

    if kind == "relabel":
        if strategy.relabel is None or len(strategy.relabel) == 0:
            raise StrategyError("relabel strategy requires per-task models")
        if len(strategy.relabel) != n_tasks:
            raise StrategyError(f"relabel has {len(strategy.relabel)} models for {n_tasks} datasets")
        if n_tasks < 2:
            raise StrategyError("relabel needs at least two tasks")
        offs = rng.integers(0, n_tasks - 1, (b, n))
        others = (np.repeat(task_ids[:, None], n, axis=1) + 1 + offs) % n_tasks
        s_rep = np.repeat(s_rows, n, axis=0)
        a_rep = np.repeat(a_rows, n, axis=0)
        flat = others.reshape(b * n)
        r_star = np.empty(b * n)
        sn_star = np.empty((b * n, sn_rows.shape[1]))
        for j in range(n_tasks):
            mask = flat == j
            if mask.any():
                r_star[mask], sn_star[mask] = strategy.relabel.predict(j, s_rep[mask], a_rep[mask])
        return np.concatenate([s_rep, a_rep, r_star[:, None], sn_star], axis=1)

    # kind == "none": raw tuples from other tasks, (s, a) unconstrained
    if n_tasks < 2:
        return np.empty((0, 2 * sn_rows.shape[1] + a_rows.shape[1] + 1))
    offs = rng.integers(0, n_tasks - 1, (b, n))
    others = (np.repeat(task_ids[:, None], n, axis=1) + 1 + offs) % n_tasks
    u = rng.random((b, n))
    flat = others.reshape(b * n)
    uf = u.reshape(b * n)
    rows = np.empty((b * n, 2 * sn_rows.shape[1] + a_rows.shape[1] + 1))
    for j in range(n_tasks):
        mask = flat == j
        if mask.any():
            idx = np.floor(uf[mask] * datasets[j].size).astype(int)
            rows[mask] = datasets[j].tuple_matrix()[idx]
    return rows


def generate_negatives(strategy, anchor, all_datasets, rng, anchor_task=0):
    """Negatives for a single anchor tuple, as TransitionTuples."""
    rows = negative_rows(
        strategy,
        anchor.s[None, :],
        anchor.a[None, :],
        np.array([anchor.r]),
        anchor.s_next[None, :],
        np.array([anchor_task]),
        all_datasets,
        rng,
    )
    ds = anchor.s.shape[0]
    da = anchor.a.shape[0]
    return [
        TransitionTuple(row[:ds], row[ds : ds + da], row[ds + da], row[ds + da + 1 :]) for row in rows
    ]


# ------------------------------------------------------------- encoder train


def train_transition_encoder(datasets, strategy, cfg, rng, encoder, metrics=None):
    """InfoNCE training of the transition encoder.

    Each step samples task_batch_size tasks; each task contributes
    contrastive_batch_size / task_batch_size (anchor, positive) pairs drawn
    independently from its dataset, and every anchor gets its own negatives.
    Returns a new EncoderParams with the trained theta1 and, unless
    disabled, input standardization fitted on the dataset union.
    """
    if not datasets:
        raise ValueError("train_transition_encoder needs at least one dataset")
    out = encoder.copy()
    if cfg.standardize_inputs:
        out.input_mean, out.input_scale = taskenc.fit_input_normalization(datasets)
    theta1 = out.theta1
    opt = AdamOptimizer(theta1, cfg.learning_rate)
    n_tasks = len(datasets)
    per_task = max(1, cfg.contrastive_batch_size // cfg.task_batch_size)
    mats = [d.tuple_matrix() for d in datasets]

    for step in range(1, cfg.training_steps + 1):
        task_ids = rng.integers(0, n_tasks, cfg.task_batch_size)
        anchors, positives, anchor_tasks = [], [], []
        for tid in task_ids:
            idx = rng.integers(0, datasets[tid].size, 2 * per_task)
            anchors.append(mats[tid][idx[:per_task]])
            positives.append(mats[tid][idx[per_task:]])
            anchor_tasks.extend([tid] * per_task)
        anchors = np.vstack(anchors)
        positives = np.vstack(positives)
        anchor_tasks = np.asarray(anchor_tasks)
        ds_dim, da_dim = envs.obs_dim(datasets[0].task.family), envs.action_dim(datasets[0].task.family)
        negs = negative_rows(
            strategy,
            anchors[:, :ds_dim],
            anchors[:, ds_dim : ds_dim + da_dim],
            anchors[:, ds_dim + da_dim],
            anchors[:, ds_dim + da_dim + 1 :],
            anchor_tasks,
            datasets,
            rng,
        )
        b = anchors.shape[0]
        n_neg = negs.shape[0] // b if b else 0
        stacked = np.vstack([anchors, positives, negs]) if negs.size else np.vstack([anchors, positives])
        tp = TapeParams(theta1)
        z_all = mlp_fused_t(encoder.enc_spec, tp, out.normalize(stacked))
        loss = _info_nce_batch_t(z_all, b, n_neg, cfg.temperature)
        if not np.isfinite(loss.data):
            raise NonFiniteError("contrastive loss", step)
        T.backward(loss)
        theta1 = opt.update(theta1, tp.grad_vector("contrastive"))
        if metrics is not None and (step % 100 == 0 or step == 1):
            metrics.append((step, "info_nce", float(loss.data)))
    out.theta1 = theta1
    return out


# ------------------------------------------------------- enumeration oracle


class OracleTabulation:
    """A fully tabulated finite instance: tasks, tuple distributions, encoder.

    Plain-text line format (# starts a comment):

        tasks N
        task  i prob                      one line per task
        tuple i s a r s2 prob             P(x | task i), x = (s, a, r, s2)
        enc   s a r s2 z prob             P(z | x)

    s, a, s2, z are nonnegative integers; r and probabilities are floats.
    Every distribution must sum to 1. Tasks must share the (s, a) marginal,
    and each task's reward at a given (s, a) must be unique.
    """

    def __init__(self, task_probs, tuple_tables, encoder_table):
        self.task_probs = np.asarray(task_probs, dtype=np.float64)
        self.tuple_tables = tuple_tables  # list of dicts x -> prob
        self.encoder_table = encoder_table  # dict x -> dict z -> prob
        self._validate()

    @property
    def n_tasks(self):
        return len(self.task_probs)

    def _validate(self):
        if abs(self.task_probs.sum() - 1.0) > 1e-9 or np.any(self.task_probs < 0):
            raise TabulationError("non-normalized input distributions: task probabilities")
        if len(self.tuple_tables) != self.n_tasks:
            raise TabulationError(f"expected {self.n_tasks} tuple tables, got {len(self.tuple_tables)}")
        marginals = []
        for i, table in enumerate(self.tuple_tables):
            if not table:
                raise TabulationError(f"task {i} has an empty tuple distribution")
            total = sum(table.values())
            if abs(total - 1.0) > 1e-9 or any(p < 0 for p in table.values()):
                raise TabulationError(f"non-normalized input distributions: tuples of task {i}")
            sa_marg, rewards = {}, {}
            for (s, a, r, s2), p in table.items():
                sa_marg[(s, a)] = sa_marg.get((s, a), 0.0) + p
                if (s, a) in rewards and rewards[(s, a)] != r:
                    raise TabulationError(f"task {i} has two rewards at (s={s}, a={a})")
                rewards[(s, a)] = r
            marginals.append(sa_marg)
        base = marginals[0]
        for i, m in enumerate(marginals[1:], start=1):
            if set(m) != set(base) or any(abs(m[k] - base[k]) > 1e-9 for k in base):
                raise TabulationError(f"task {i} does not share the (s,a) marginal of task 0")
        for i, table in enumerate(self.tuple_tables):
            for x in table:
                if x not in self.encoder_table:
                    raise TabulationError(f"encoder table missing tuple {x} from task {i}")
        for x, dist in self.encoder_table.items():
            total = sum(dist.values())
            if abs(total - 1.0) > 1e-9 or any(p < 0 for p in dist.values()):
                raise TabulationError(f"non-normalized input distributions: encoder row for {x}")

    # ------------------------------------------------------------- parsing

    @classmethod
    def parse(cls, text):
        n_tasks = None
        task_probs = {}
        tuples = {}
        enc = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "tasks" and len(parts) == 2:
                    n_tasks = int(parts[1])
                elif parts[0] == "task" and len(parts) == 3:
                    task_probs[int(parts[1])] = float(parts[2])
                elif parts[0] == "tuple" and len(parts) == 7:
                    i = int(parts[1])
                    x = (int(parts[2]), int(parts[3]), float(parts[4]), int(parts[5]))
                    tuples.setdefault(i, {})[x] = float(parts[6])
                elif parts[0] == "enc" and len(parts) == 7:
                    x = (int(parts[1]), int(parts[2]), float(parts[3]), int(parts[4]))
                    enc.setdefault(x, {})[int(parts[5])] = float(parts[6])
                else:
                    raise TabulationError(f"unrecognized line {line!r}", lineno)
            except (ValueError, IndexError) as exc:
                if isinstance(exc, TabulationError):
                    raise
                raise TabulationError(f"malformed entry {line!r} ({exc})", lineno) from None
        if n_tasks is None:
            raise TabulationError("missing 'tasks N' header")
        if set(task_probs) != set(range(n_tasks)):
            raise TabulationError(f"task probabilities cover {sorted(task_probs)}, expected 0..{n_tasks - 1}")
        if set(tuples) != set(range(n_tasks)):
            raise TabulationError(f"tuple tables cover {sorted(tuples)}, expected 0..{n_tasks - 1}")
        probs = [task_probs[i] for i in range(n_tasks)]
        tables = [tuples[i] for i in range(n_tasks)]
        return cls(probs, tables, enc)

    def format(self):
        lines = [f"tasks {self.n_tasks}"]
        for i, p in enumerate(self.task_probs):
            lines.append(f"task {i} {float(p)!r}")
        for i, table in enumerate(self.tuple_tables):
            for (s, a, r, s2), p in sorted(table.items()):
                lines.append(f"tuple {i} {s} {a} {float(r)!r} {s2} {float(p)!r}")
        for x, dist in sorted(self.encoder_table.items()):
            s, a, r, s2 = x
            for z, p in sorted(dist.items()):
                lines.append(f"enc {s} {a} {float(r)!r} {s2} {z} {float(p)!r}")
        return "\n".join(lines) + "\n"


def mi_oracle(tab):
    """Exact I(z; M) and the exact InfoNCE lower-bound value.

    Everything is enumerated: the representation's joint with the task, and
    the expectation of log( h(x,z) / sum_task h(x*,z) ) with h the true
    density ratio P(z|x)/P(z), anchors drawn fresh from the task, and each
    counterfactual x* sharing the anchor's (s, a).
    """
    n = tab.n_tasks
    z_symbols = sorted({z for dist in tab.encoder_table.values() for z in dist})
    z_index = {z: k for k, z in enumerate(z_symbols)}
    nz = len(z_symbols)

    rows = {}
    for x, dist in tab.encoder_table.items():
        row = np.zeros(nz)
        for z, p in dist.items():
            row[z_index[z]] = p
        rows[x] = row

    def enc_row(x):
        return rows[x]

    # P(z | task) and P(z); iteration sorted so results do not depend on
    # table insertion order
    pz_task = np.zeros((n, nz))
    for i, table in enumerate(tab.tuple_tables):
        for x, px in sorted(table.items()):
            pz_task[i] += px * enc_row(x)
    pz = tab.task_probs @ pz_task

    exact_mi = 0.0
    for i in range(n):
        for k in range(nz):
            joint = tab.task_probs[i] * pz_task[i, k]
            if joint > 0:
                exact_mi += joint * math.log(pz_task[i, k] / pz[k])

    # per-task structure at each shared (s, a): reward and s' distribution
    sa_support = sorted({(s, a) for (s, a, _, _) in tab.tuple_tables[0]})
    reward = [dict() for _ in range(n)]
    trans = [dict() for _ in range(n)]
    q_sa = {}
    for i, table in enumerate(tab.tuple_tables):
        for (s, a, r, s2), p in sorted(table.items()):
            reward[i][(s, a)] = r
            trans[i].setdefault((s, a), []).append((s2, p))
    for sa in sa_support:
        q_sa[sa] = sum(p for _, p in trans[0][sa])
        for i in range(n):
            total = sum(p for _, p in trans[i][sa])
            trans[i][sa] = [(s2, p / total) for s2, p in trans[i][sa]]

    bound = 0.0
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for s, a in sa_support:
            qsa = q_sa[(s, a)]
            if qsa == 0:
                continue
            for s2, t_anchor in trans[i][(s, a)]:
                x = (s, a, reward[i][(s, a)], s2)
                h_anchor = enc_row(x) / pz  # over z
                combos = itertools.product(*(trans[j][(s, a)] for j in others))
                for combo in combos:
                    pc = qsa * t_anchor
                    h_sum = h_anchor.copy()
                    for j, (s2j, tj) in zip(others, combo):
                        pc *= tj
                        h_sum += enc_row((s, a, reward[j][(s, a)], s2j)) / pz
                    if pc == 0:
                        continue
                    for k in range(nz):
                        w = tab.task_probs[i] * pz_task[i, k] * pc
                        if w > 0:
                            bound += w * (
                                math.log(h_anchor[k] / h_sum[k]) if h_anchor[k] > 0 else -math.inf
                            )
    return exact_mi, bound


def random_tabulation(rng, n_tasks=4, n_sa=2, n_s2=3, n_z=6):
    """A random strictly-positive stochastic instance with shared (s,a) marginal."""
    task_probs = rng.dirichlet(np.ones(n_tasks))
    q = rng.dirichlet(np.ones(n_sa))
    rewards = np.round(rng.uniform(-1, 1, (n_tasks, n_sa)), 6)
    tables = []
    enc = {}
    for i in range(n_tasks):
        table = {}
        for sa in range(n_sa):
            t = rng.dirichlet(np.ones(n_s2))
            for s2 in range(n_s2):
                x = (0, sa, float(rewards[i, sa]), s2)
                table[x] = q[sa] * t[s2]
                if x not in enc:
                    enc[x] = {z: p for z, p in enumerate(rng.dirichlet(np.ones(n_z)))}
        tables.append(table)
    return OracleTabulation(task_probs, tables, enc)
