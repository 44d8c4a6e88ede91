"""The bi-level task encoder.

A transition encoder maps one (s, a, r, s') tuple to a latent vector; an
attention-style aggregator turns any number of per-tuple latents into a
single task representation via a softmax-weighted sum. The cosine score
between representations (divided by a temperature) is the similarity used
by the contrastive objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from corrolab import bundle, envs
from corrolab.errors import DegenerateRepresentation, DimensionMismatch
from corrolab.numcore import MlpSpec, ParamVector, TapeParams, init_params, mlp_forward, mlp_forward_t
from corrolab.numcore import tensor as T


@dataclass
class EncoderParams:
    theta1: ParamVector  # transition encoder
    theta2: ParamVector  # aggregator's per-element scoring MLP
    enc_spec: MlpSpec
    agg_spec: MlpSpec
    # fixed input standardization (identity until a trainer fits it from data)
    input_mean: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        d = self.enc_spec.input_dim
        if self.input_mean is None:
            self.input_mean = np.zeros(d)
        if self.input_scale is None:
            self.input_scale = np.ones(d)

    @property
    def latent_dim(self):
        return self.enc_spec.output_dim

    def normalize(self, rows):
        return (rows - self.input_mean) / self.input_scale

    def copy(self):
        return EncoderParams(
            self.theta1.copy(), self.theta2.copy(), self.enc_spec, self.agg_spec,
            self.input_mean.copy(), self.input_scale.copy(),
        )


def fit_input_normalization(datasets):
    """Per-feature mean and scale of the tuple union, for encoder inputs."""
    union = np.vstack([d.tuple_matrix() for d in datasets])
    return union.mean(axis=0), union.std(axis=0) + 1e-8


def tuple_input_dim(family):
    return 2 * envs.obs_dim(family) + envs.action_dim(family) + 1


def make_encoder(family, rng, latent_dim=5, enc_hidden=(64, 64), agg_hidden=(64,)):
    enc_spec = MlpSpec(tuple_input_dim(family), latent_dim, tuple(enc_hidden), "tanh", "identity")
    # the scorer feeds a softmax, where an output bias would be unidentifiable
    agg_spec = MlpSpec(latent_dim, 1, tuple(agg_hidden), "tanh", "identity", final_bias=False)
    return EncoderParams(init_params(enc_spec, rng), init_params(agg_spec, rng), enc_spec, agg_spec)


def tuple_vector(x):
    return np.concatenate([x.s, x.a, [x.r], x.s_next])


def encode_transition(encoder, x):
    """Latent representation of a single transition tuple."""
    v = tuple_vector(x)
    if v.size != encoder.enc_spec.input_dim:
        raise DimensionMismatch("transition tuple dim", encoder.enc_spec.input_dim, v.size)
    return mlp_forward(encoder.enc_spec, encoder.theta1, encoder.normalize(v))


def encode_rows(encoder, rows):
    """Batched transition encoding of a (n, tuple_dim) matrix."""
    return mlp_forward(encoder.enc_spec, encoder.theta1, encoder.normalize(rows))


def aggregation_weights(encoder, latents):
    logits = mlp_forward(encoder.agg_spec, encoder.theta2, latents)[:, 0]
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def aggregate(encoder, latents):
    """Softmax-weighted sum of per-tuple latents."""
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if latents.shape[0] < 1:
        raise ValueError("aggregate needs at least one latent")
    if latents.shape[1] != encoder.latent_dim:
        raise DimensionMismatch("latent dim", encoder.latent_dim, latents.shape[1])
    w = aggregation_weights(encoder, latents)
    return w @ latents


def encode_context(encoder, context):
    """Compose per-tuple encoding with aggregation over the whole context."""
    return aggregate(encoder, encode_rows(encoder, context.matrix()))


def score(z1, z2, temperature=1.0):
    """Cosine similarity divided by the temperature."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateRepresentation("degenerate representation: zero-norm latent")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return float(z1 @ z2 / (n1 * n2)) / temperature


# ------------------------------------------------------------- tape variants


def encode_rows_t(encoder, tape_theta1, rows):
    from corrolab.numcore.mlp import mlp_fused_t

    return mlp_fused_t(encoder.enc_spec, tape_theta1, encoder.normalize(rows))


def aggregate_t(encoder, tape_theta2, latents_t):
    """Tape aggregation; latents_t is a (k, latent_dim) Tensor. Returns (latent_dim,)."""
    from corrolab.numcore.mlp import mlp_fused_t

    logits = mlp_fused_t(encoder.agg_spec, tape_theta2, latents_t)  # (k, 1)
    w = T.softmax(logits, axis=0)
    return T.sum_(T.mul(w, latents_t), axis=0)


def encode_context_t(encoder, tape_theta1, tape_theta2, context):
    rows = context.matrix()
    latents = (
        encode_rows_t(encoder, tape_theta1, rows)
        if tape_theta1 is not None
        else T.Tensor(encode_rows(encoder, rows))
    )
    return aggregate_t(encoder, tape_theta2, latents)


# ------------------------------------------------------------ serialization


def spec_to_str(spec):
    hidden = ",".join(str(w) for w in spec.hidden_widths)
    return (
        f"in:{spec.input_dim};out:{spec.output_dim};hidden:{hidden};"
        f"act:{spec.activation};tf:{spec.output_transform};fb:{int(spec.final_bias)}"
    )


def spec_from_str(text):
    fields = dict(part.split(":", 1) for part in text.split(";"))
    hidden = tuple(int(w) for w in fields["hidden"].split(",") if w)
    return MlpSpec(
        int(fields["in"]), int(fields["out"]), hidden, fields["act"], fields["tf"],
        final_bias=bool(int(fields.get("fb", "1"))),
    )


def _norm_pv(encoder):
    return ParamVector.from_arrays([("mean", encoder.input_mean), ("scale", encoder.input_scale)])


def save_encoder(path, encoder):
    bundle.write_bundle(
        path,
        {"theta1": encoder.theta1, "theta2": encoder.theta2, "input_norm": _norm_pv(encoder)},
        {"enc_spec": spec_to_str(encoder.enc_spec), "agg_spec": spec_to_str(encoder.agg_spec)},
    )


def load_encoder(path):
    params, meta = bundle.read_bundle(path)
    norm = params["input_norm"]
    return EncoderParams(
        params["theta1"],
        params["theta2"],
        spec_from_str(meta["enc_spec"]),
        spec_from_str(meta["agg_spec"]),
        norm.get("mean").copy(),
        norm.get("scale").copy(),
    )
