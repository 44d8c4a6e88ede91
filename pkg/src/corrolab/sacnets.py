"""Soft actor-critic building blocks shared by data collection and meta training.

The actor is a tanh-squashed diagonal Gaussian scaled to the action box; the
critics are scalar-output MLPs over (obs, action) or (obs, action, z). Every
function exists in a fast numpy form (no gradients, used for rollouts and
target computation) and a tape form (used inside updates); both evaluate the
same expressions.
"""

from __future__ import annotations

import numpy as np

from corrolab.numcore import MlpSpec, TapeParams, mlp_forward
from corrolab.numcore.mlp import mlp_fused_t
from corrolab.numcore import tensor as T

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
LOG2 = np.log(2.0)


def actor_spec(obs_dim, act_dim, hidden):
    return MlpSpec(obs_dim, 2 * act_dim, tuple(hidden), "tanh", "identity")


def critic_spec(obs_dim, act_dim, hidden):
    return MlpSpec(obs_dim + act_dim, 1, tuple(hidden), "tanh", "identity")


def _squash_log_std(raw):
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(raw) + 1.0)


def actor_mean_log_std(spec, params, obs):
    """Numpy path: returns (mean, log_std) with the log_std softly bounded."""
    out = mlp_forward(spec, params, obs)
    d = spec.output_dim // 2
    return out[..., :d], _squash_log_std(out[..., d:])


def deterministic_action(spec, params, obs, scale):
    mean, _ = actor_mean_log_std(spec, params, obs)
    return scale * np.tanh(mean)


def sample_action(spec, params, obs, scale, rng):
    mean, log_std = actor_mean_log_std(spec, params, obs)
    u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return scale * np.tanh(u)


def sample_action_logp(spec, params, obs, scale, rng):
    """Numpy path used for critic targets: sampled action and its log-prob."""
    mean, log_std = actor_mean_log_std(spec, params, obs)
    noise = rng.standard_normal(mean.shape)
    u = mean + np.exp(log_std) * noise
    action = scale * np.tanh(u)
    logp = _gauss_tanh_logp_np(noise, log_std, u, scale)
    return action, logp


def _gauss_tanh_logp_np(noise, log_std, u, scale):
    base = -0.5 * noise * noise - log_std - _HALF_LOG_2PI
    # log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u)), numerically stable
    sp = np.maximum(-2.0 * u, 0.0) + np.log1p(np.exp(-np.abs(2.0 * u)))
    correction = np.log(scale) + 2.0 * (LOG2 - u - sp)
    return (base - correction).sum(axis=-1)


def actor_sample_t(spec, tape_params, obs, scale, noise):
    """Tape path: reparameterized sample and log-prob for a fixed noise draw.

    obs is a constant array or Tensor of shape (n, obs_dim); noise has shape
    (n, act_dim). Returns (action, logp) Tensors with shapes (n, act_dim)
    and (n,).
    """
    out = mlp_fused_t(spec, tape_params, obs)
    return squash_sample_t(out, scale, noise)


def squash_sample_t(out, scale, noise):
    """Fused squashed-Gaussian head over raw net output (n, 2d).

    Forward matches the numpy path; the analytic backward uses
      d logp / d u      = 2 tanh(u)
      d logp / d lambda = -1 + 2 tanh(u) sigma eps   (lambda = log std)
      d action / d u    = scale (1 - tanh(u)^2)
    and the chain through the soft log-std bound.
    """
    data = out.data
    d = noise.shape[1]
    mean = data[:, :d]
    raw = data[:, d:]
    th_raw = np.tanh(raw)
    lam = _squash_log_std_from_tanh(th_raw)
    sigma = np.exp(lam)
    se = sigma * noise
    u = mean + se
    th_u = np.tanh(u)
    action_data = scale * th_u
    sp = np.maximum(-2.0 * u, 0.0) + np.log1p(np.exp(-np.abs(2.0 * u)))
    logp_data = (
        -0.5 * noise * noise - lam - _HALF_LOG_2PI - np.log(scale) - 2.0 * (LOG2 - u - sp)
    ).sum(axis=1)

    dlam_draw = 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - th_raw * th_raw)
    dadu = scale * (1.0 - th_u * th_u)

    def bw_action(g):
        du = g * dadu
        T.acc(out, np.concatenate([du, du * se * dlam_draw], axis=1))

    def bw_logp(g):
        gc = g[:, None]
        du = gc * (2.0 * th_u)
        dlam = gc * -1.0 + du * se
        T.acc(out, np.concatenate([du, dlam * dlam_draw], axis=1))

    action = T.custom(action_data, (out,), bw_action)
    logp = T.custom(logp_data, (out,), bw_logp)
    return action, logp


def _squash_log_std_from_tanh(th_raw):
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (th_raw + 1.0)


def critic_value(spec, params, obs_action):
    return mlp_forward(spec, params, obs_action)[..., 0]


def critic_value_t(spec, tape_params, obs_action):
    out = mlp_fused_t(spec, tape_params, obs_action)
    return T.reshape(out, (out.data.shape[0],))


def polyak(target, online, tau):
    """target <- (1 - tau) * target + tau * online, as a new ParamVector."""
    return target.with_values((1.0 - tau) * target.values + tau * online.values)
