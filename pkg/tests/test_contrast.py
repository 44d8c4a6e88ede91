"""InfoNCE loss, negative-pair strategies, and CVAE training."""

import numpy as np
import pytest

from corrolab import collect, contrast, envs, taskenc
from corrolab.data import OfflineDataset, TransitionTuple
from corrolab.errors import StrategyError
from corrolab.numcore import finite_diff_gradient, max_relative_error, mlp_forward


def make_datasets(goals=((0.8, 0.8), (-0.8, -0.8)), seed=10, **overrides):
    cfg_kwargs = dict(training_steps=300, checkpoint_interval=100, dataset_size=900, warmup_steps=300)
    cfg_kwargs.update(overrides)
    cfg = collect.SacConfig(**cfg_kwargs)
    tasks = [envs.TaskSpec(envs.POINT_ROBOT, g) for g in goals]
    return [collect.train_behavior_policy(t, cfg, np.random.default_rng(seed + i))[1] for i, t in enumerate(tasks)]


@pytest.fixture(scope="module")
def two_datasets():
    return make_datasets()


def random_tuple(rng):
    return TransitionTuple(rng.normal(size=2), rng.normal(size=2), rng.normal(), rng.normal(size=2))


# --------------------------------------------------------------- info_nce


def test_info_nce_no_negatives_is_zero():
    z = np.array([0.3, -0.7])
    assert contrast.info_nce_loss(z, np.array([1.0, 0.2]), []) == 0.0


def test_info_nce_symmetric_two_way():
    # one negative scoring exactly like the positive -> log 2
    anchor = np.array([1.0, 0.0])
    loss = contrast.info_nce_loss(anchor, np.array([0.5, 0.5]), [np.array([0.5, 0.5])])
    assert abs(loss - np.log(2.0)) < 1e-12


def test_info_nce_closed_form():
    # positive score 1, negative score -1 at temperature 1
    anchor = np.array([1.0, 0.0])
    loss = contrast.info_nce_loss(anchor, np.array([1.0, 0.0]), [np.array([-1.0, 0.0])])
    assert abs(loss - np.log(1.0 + np.exp(-2.0))) < 1e-12
    assert abs(loss - 0.12693) < 1e-5


def test_info_nce_nonnegative_and_monotone():
    rng = np.random.default_rng(0)
    negatives = [rng.normal(size=3) for _ in range(5)]
    anchor = np.array([1.0, 0.0, 0.0])
    losses = []
    for angle in np.linspace(0.0, np.pi * 0.9, 8):
        positive = np.array([np.cos(angle), np.sin(angle), 0.0])
        losses.append(contrast.info_nce_loss(anchor, positive, negatives))
    assert all(l >= 0.0 for l in losses)
    assert all(a < b for a, b in zip(losses, losses[1:]))  # score down -> loss up


# ------------------------------------------------------------------- cvae


def test_cvae_kl_zero_when_encoder_outputs_zero():
    from corrolab.numcore.mlp import zero_params

    rng = np.random.default_rng(0)
    cvae = contrast.make_cvae(envs.POINT_ROBOT, rng, latent_dim=2, hidden=(4,))
    cvae.omega = zero_params(cvae.enc_spec)  # mean 0, logvar 0 -> KL = 0
    cvae.xi = zero_params(cvae.dec_spec)  # prediction 0
    # targets (r, s') all zero -> perfect reconstruction too
    x = TransitionTuple([0.3, -0.1], [0.05, 0.02], 0.0, [0.0, 0.0])
    d = 3  # r plus two next-state coordinates
    expected = 0.5 * d * np.log(2.0 * np.pi)
    noise = np.zeros((1, 2))
    val = contrast.cvae_loss(cvae, [x], envs.POINT_ROBOT, noise=noise)
    assert abs(val - expected) < 1e-12


def test_cvae_loss_rejects_empty_batch():
    cvae = contrast.make_cvae(envs.POINT_ROBOT, np.random.default_rng(0))
    with pytest.raises(ValueError):
        contrast.cvae_loss(cvae, np.zeros((0, 7)), envs.POINT_ROBOT, rng=np.random.default_rng(0))


def test_cvae_loss_matches_monte_carlo_elbo():
    rng = np.random.default_rng(3)
    cvae = contrast.make_cvae(envs.POINT_ROBOT, rng, latent_dim=2, hidden=(8,))
    batch = [random_tuple(rng) for _ in range(3)]
    rows = np.stack([taskenc.tuple_vector(t) for t in batch])

    # independent Monte-Carlo evaluation of E[loss] per tuple
    n_mc = 10_000
    mc_rng = np.random.default_rng(100)
    per_tuple_mean, per_tuple_var = [], []
    for row in rows:
        enc_out = mlp_forward(cvae.enc_spec, cvae.omega, row)
        mu, logvar = enc_out[:2], enc_out[2:]
        z = mu + np.exp(0.5 * logvar) * mc_rng.standard_normal((n_mc, 2))
        dec_in = np.concatenate([np.tile(row[:4], (n_mc, 1)), z], axis=1)
        pred = mlp_forward(cvae.dec_spec, cvae.xi, dec_in)
        target = row[4:]
        nll = 0.5 * ((target - pred) ** 2).sum(axis=1) + 0.5 * 3 * np.log(2 * np.pi)
        kl = 0.5 * np.sum(mu**2 + np.exp(logvar) - logvar - 1.0)
        per_tuple_mean.append(nll.mean() + kl)
        per_tuple_var.append(nll.var(ddof=1) / n_mc)
    oracle = float(np.mean(per_tuple_mean))
    oracle_se = float(np.sqrt(np.sum(per_tuple_var)) / 3)

    draws = 2000
    loss_rng = np.random.default_rng(200)
    vals = [contrast.cvae_loss(cvae, rows, envs.POINT_ROBOT, rng=loss_rng) for _ in range(draws)]
    loss_mean = float(np.mean(vals))
    loss_se = float(np.std(vals, ddof=1) / np.sqrt(draws))

    assert abs(loss_mean - oracle) <= 3.0 * np.sqrt(oracle_se**2 + loss_se**2)


def test_cvae_gradients_with_frozen_noise():
    rng = np.random.default_rng(4)
    cvae = contrast.make_cvae(envs.POINT_ROBOT, rng, latent_dim=2, hidden=(6,))
    rows = np.stack([taskenc.tuple_vector(random_tuple(rng)) for _ in range(3)])
    noise = rng.standard_normal((3, 2))
    _, g_omega, g_xi = contrast.cvae_loss_gradients(cvae, rows, envs.POINT_ROBOT, noise)
    num_omega = finite_diff_gradient(
        lambda pv: contrast.cvae_loss(
            contrast.CvaeParams(pv, cvae.xi, cvae.enc_spec, cvae.dec_spec, 2), rows, envs.POINT_ROBOT, noise=noise
        ),
        cvae.omega,
        1e-5,
    )
    num_xi = finite_diff_gradient(
        lambda pv: contrast.cvae_loss(
            contrast.CvaeParams(cvae.omega, pv, cvae.enc_spec, cvae.dec_spec, 2), rows, envs.POINT_ROBOT, noise=noise
        ),
        cvae.xi,
        1e-5,
    )
    assert max_relative_error(g_omega, num_omega) <= 1e-4
    assert max_relative_error(g_xi, num_xi) <= 1e-4


def test_train_cvae_zero_steps_returns_init():
    ds = make_datasets(goals=((0.5, 0.5),), seed=30, training_steps=20, dataset_size=300, warmup_steps=100)
    cfg = contrast.CvaeConfig(training_steps=0, latent_dim=2, hidden=(4,))
    a = contrast.train_cvae(ds, cfg, np.random.default_rng(1))
    b = contrast.make_cvae(envs.POINT_ROBOT, np.random.default_rng(1), latent_dim=2, hidden=(4,))
    assert a.omega.values.tobytes() == b.omega.values.tobytes()
    assert a.xi.values.tobytes() == b.xi.values.tobytes()


def test_union_sampling_proportional_to_size():
    which, rows = contrast.union_sample_indices([100, 300], 40_000, np.random.default_rng(5))
    frac = (which == 1).mean()
    assert abs(frac - 0.75) < 0.01
    assert rows[which == 1].max() < 300 and rows[which == 0].max() < 100


def test_cvae_learns_bimodal_rewards():
    # two tasks sharing one (s, a) with rewards +3/-3: generated rewards
    # must form two clusters near the true modes
    task = envs.TaskSpec(envs.POINT_ROBOT, (0.0, 0.0))
    n = 400
    s = np.zeros((n, 2))
    a = np.full((n, 2), 0.05)
    sn = np.full((n, 2), 0.05)
    mk = lambda r: OfflineDataset(task, s, a, np.full(n, r), sn, np.zeros(n, bool))
    cfg = contrast.CvaeConfig(latent_dim=2, hidden=(32, 32), training_steps=4000, batch_size=128)
    cvae = contrast.train_cvae([mk(3.0), mk(-3.0)], cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    r, _ = contrast.cvae_generate(cvae, np.zeros((4000, 2)), np.full((4000, 2), 0.05), envs.POINT_ROBOT, rng)
    hi, lo = r[r > 0], r[r <= 0]
    assert len(hi) > 500 and len(lo) > 500
    assert abs(hi.mean() - 3.0) < 0.6
    assert abs(lo.mean() + 3.0) < 0.6


# -------------------------------------------------------------- strategies


def test_randomize_zero_noise_reproduces_anchor(two_datasets):
    strat = contrast.NegativeStrategy("randomize", negatives_per_anchor=4, noise_std=1e-300)
    anchor = two_datasets[0].tuple_at(5)
    negs = contrast.generate_negatives(strat, anchor, two_datasets, np.random.default_rng(0), 0)
    assert len(negs) == 4
    for x in negs:
        assert np.array_equal(x.s, anchor.s) and np.array_equal(x.a, anchor.a)
        assert np.array_equal(x.s_next, anchor.s_next)
        assert abs(x.r - anchor.r) < 1e-12


def test_randomize_noise_scale_and_default_count(two_datasets):
    strat = contrast.NegativeStrategy("randomize")
    assert strat.negatives_per_anchor == 16
    assert strat.noise_std == 0.5
    anchor = two_datasets[0].tuple_at(10)
    rng = np.random.default_rng(1)
    deltas = []
    for _ in range(400):
        negs = contrast.generate_negatives(strat, anchor, two_datasets, rng, 0)
        deltas.extend(x.r - anchor.r for x in negs)
    deltas = np.array(deltas)
    se_mean = 0.5 / np.sqrt(deltas.size)
    assert abs(deltas.mean()) < 3 * se_mean
    assert abs(deltas.std() - 0.5) < 0.01


def test_randomize_rejects_transition_varying_family():
    task = envs.TaskSpec(envs.POINT_ROBOT_DYN, (1.2, 0.1))
    rng = np.random.default_rng(2)
    ds = OfflineDataset(task, rng.normal(size=(50, 2)), rng.normal(size=(50, 2)), rng.normal(size=50),
                        rng.normal(size=(50, 2)), np.zeros(50, bool))
    strat = contrast.NegativeStrategy("randomize")
    with pytest.raises(StrategyError, match="strategy inapplicable"):
        contrast.generate_negatives(strat, ds.tuple_at(0), [ds, ds], rng, 0)


def test_generative_preserves_state_action(two_datasets):
    cfg = contrast.CvaeConfig(latent_dim=2, hidden=(8,), training_steps=50, batch_size=32)
    cvae = contrast.train_cvae(two_datasets, cfg, np.random.default_rng(3))
    strat = contrast.NegativeStrategy("generative", negatives_per_anchor=5, cvae=cvae)
    anchor = two_datasets[1].tuple_at(7)
    negs = contrast.generate_negatives(strat, anchor, two_datasets, np.random.default_rng(4), 1)
    assert len(negs) == 5
    for x in negs:
        assert np.array_equal(x.s, anchor.s) and np.array_equal(x.a, anchor.a)


def test_generative_requires_cvae(two_datasets):
    strat = contrast.NegativeStrategy("generative")
    with pytest.raises(StrategyError, match="CVAE"):
        contrast.generate_negatives(strat, two_datasets[0].tuple_at(0), two_datasets, np.random.default_rng(0), 0)


def test_relabel_preserves_state_action_and_uses_other_tasks(two_datasets):
    cfg = contrast.RelabelConfig(hidden=(8,), training_steps=100, batch_size=32)
    models = contrast.train_relabel_models(two_datasets, cfg, np.random.default_rng(5))
    strat = contrast.NegativeStrategy("relabel", negatives_per_anchor=6, relabel=models)
    anchor = two_datasets[0].tuple_at(3)
    negs = contrast.generate_negatives(strat, anchor, two_datasets, np.random.default_rng(6), 0)
    assert len(negs) == 6
    r1, s1 = models.predict(1, anchor.s[None, :], anchor.a[None, :])
    for x in negs:
        assert np.array_equal(x.s, anchor.s) and np.array_equal(x.a, anchor.a)
        # with two tasks every relabel target is task 1
        assert abs(x.r - r1[0]) < 1e-12
        assert np.allclose(x.s_next, s1[0])


def test_relabel_without_models_errors(two_datasets):
    strat = contrast.NegativeStrategy("relabel")
    with pytest.raises(StrategyError, match="models"):
        contrast.generate_negatives(strat, two_datasets[0].tuple_at(0), two_datasets, np.random.default_rng(0), 0)


def test_none_strategy_samples_other_tasks(two_datasets):
    strat = contrast.NegativeStrategy("none", negatives_per_anchor=8)
    anchor = two_datasets[0].tuple_at(0)
    negs = contrast.generate_negatives(strat, anchor, two_datasets, np.random.default_rng(7), 0)
    other = two_datasets[1].tuple_matrix()
    assert len(negs) == 8
    for x in negs:
        row = np.concatenate([x.s, x.a, [x.r], x.s_next])
        assert any(np.array_equal(row, r) for r in other)


def test_unknown_strategy_rejected():
    with pytest.raises(StrategyError, match="unknown strategy"):
        contrast.NegativeStrategy("mixup")


def test_default_strategy_kinds():
    assert contrast.default_strategy_kind(envs.POINT_ROBOT) == "randomize"
    assert contrast.default_strategy_kind(envs.LINE_VEL) == "generative"
    assert contrast.default_strategy_kind(envs.POINT_ROBOT_DYN) == "none"


# ----------------------------------------------------------- encoder train


def test_encoder_zero_steps_unchanged(two_datasets):
    enc = taskenc.make_encoder(envs.POINT_ROBOT, np.random.default_rng(8))
    cfg = contrast.ContrastConfig(training_steps=0)
    out = contrast.train_transition_encoder(two_datasets, contrast.NegativeStrategy("randomize"), cfg,
                                            np.random.default_rng(9), enc)
    assert out.theta1.values.tobytes() == enc.theta1.values.tobytes()
    # standardization is fitted even with zero steps
    assert not np.array_equal(out.input_mean, np.zeros(7))


def test_single_task_none_strategy_is_inert(two_datasets):
    enc = taskenc.make_encoder(envs.POINT_ROBOT, np.random.default_rng(10))
    cfg = contrast.ContrastConfig(training_steps=25, task_batch_size=4, contrastive_batch_size=8)
    out = contrast.train_transition_encoder([two_datasets[0]], contrast.NegativeStrategy("none"), cfg,
                                            np.random.default_rng(11), enc)
    assert out.theta1.values.tobytes() == enc.theta1.values.tobytes()


def test_untrained_loss_calibrates_to_log17(two_datasets):
    rng = np.random.default_rng(12)
    strat = contrast.NegativeStrategy("randomize")
    for seed in (0, 1, 2):
        enc = taskenc.make_encoder(envs.POINT_ROBOT, np.random.default_rng(seed))
        losses = []
        for _ in range(256):
            i = int(rng.integers(0, 2))
            ds = two_datasets[i]
            anchor = ds.tuple_at(int(rng.integers(0, ds.size)))
            positive = ds.tuple_at(int(rng.integers(0, ds.size)))
            negs = contrast.generate_negatives(strat, anchor, two_datasets, rng, i)
            za = taskenc.encode_transition(enc, anchor)
            zp = taskenc.encode_transition(enc, positive)
            zn = [taskenc.encode_transition(enc, x) for x in negs]
            losses.append(contrast.info_nce_loss(za, zp, zn, 1.0))
        mean = float(np.mean(losses))
        assert abs(mean - np.log(17.0)) <= 0.1 * np.log(17.0)


def test_two_task_probe_separates_held_out_pairs():
    datasets = [
        collect.train_behavior_policy(envs.TaskSpec(envs.POINT_ROBOT, g), collect.default_sac_config(envs.POINT_ROBOT),
                                      np.random.default_rng(10 + i))[1]
        for i, g in enumerate(((0.8, 0.8), (-0.8, -0.8)))
    ]
    enc0 = taskenc.make_encoder(envs.POINT_ROBOT, np.random.default_rng(1))
    enc = contrast.train_transition_encoder(datasets, contrast.NegativeStrategy("randomize"),
                                            contrast.ContrastConfig(training_steps=2000),
                                            np.random.default_rng(101), enc0)
    rng = np.random.default_rng(2)
    wins, total = 0, 400
    for _ in range(total):
        i = int(rng.integers(0, 2))
        j = 1 - i
        za = taskenc.encode_transition(enc, datasets[i].tuple_at(int(rng.integers(0, datasets[i].size))))
        zb = taskenc.encode_transition(enc, datasets[i].tuple_at(int(rng.integers(0, datasets[i].size))))
        zc = taskenc.encode_transition(enc, datasets[j].tuple_at(int(rng.integers(0, datasets[j].size))))
        wins += taskenc.score(za, zb) > taskenc.score(za, zc)
    assert wins / total >= 0.90
