"""MLP definitions, initialization, forward passes, and gradient checking.

Two forward paths exist: a plain-numpy path for inference and a tape path
for training. Both evaluate the same numpy expressions in the same order,
so their outputs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from corrolab.errors import DimensionMismatch, NonFiniteError
from corrolab.numcore import tensor as T
from corrolab.numcore.params import ParamVector

ACTIVATIONS = ("tanh", "relu")
OUTPUT_TRANSFORMS = ("identity", "tanh-squash", "softmax")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_widths: tuple = ()
    activation: str = "tanh"
    output_transform: str = "identity"
    # Set False where the output bias would be unidentifiable (e.g. scores
    # fed to a softmax); a dead parameter breaks finite-difference checks.
    final_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ValueError(f"dims must be positive, got {self.input_dim}, {self.output_dim}")
        if any(w <= 0 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_transform not in OUTPUT_TRANSFORMS:
            raise ValueError(f"unknown output transform {self.output_transform!r}")
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        layout = []
        last = len(dims) - 2
        for i in range(len(dims) - 1):
            layout.append((f"w{i}", (dims[i], dims[i + 1])))
            if i < last or self.final_bias:
                layout.append((f"b{i}", (dims[i + 1],)))
        object.__setattr__(self, "_layer_dims", dims)
        object.__setattr__(self, "_layout", tuple(layout))

    @property
    def layer_dims(self):
        return self._layer_dims

    def param_layout(self):
        return self._layout

    def param_count(self):
        return sum(int(np.prod(s)) for _, s in self.param_layout())


def init_params(spec, rng):
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    arrays = []
    for name, shape in spec.param_layout():
        if name.startswith("w"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays.append((name, rng.uniform(-bound, bound, shape)))
        else:
            arrays.append((name, np.zeros(shape)))
    return ParamVector.from_arrays(arrays)


def zero_params(spec):
    layout = spec.param_layout()
    total = sum(int(np.prod(s)) for _, s in layout)
    return ParamVector(np.zeros(total), layout)


def _check_input(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != spec.input_dim:
            raise DimensionMismatch("mlp input dim", spec.input_dim, x.shape[0])
    elif x.ndim == 2:
        if x.shape[1] != spec.input_dim:
            raise DimensionMismatch("mlp input dim", spec.input_dim, x.shape[1])
    else:
        raise DimensionMismatch("mlp input rank", "1 or 2", x.ndim)
    return x


def _check_params(spec, params):
    if params.layout != spec.param_layout():
        raise DimensionMismatch("mlp param layout", spec.param_layout(), params.layout)


def mlp_forward(spec, params, x):
    """Plain-numpy forward pass; accepts a single input or a batch."""
    x = _check_input(spec, x)
    _check_params(spec, params)
    single = x.ndim == 1
    h = x[None, :] if single else x
    n_layers = len(spec.layer_dims) - 1
    act = np.tanh if spec.activation == "tanh" else lambda v: v * (v > 0)
    for i in range(n_layers):
        h = h @ params.get(f"w{i}")
        if i < n_layers - 1 or spec.final_bias:
            h = h + params.get(f"b{i}")
        if i < n_layers - 1:
            h = act(h)
    if spec.output_transform == "tanh-squash":
        h = np.tanh(h)
    elif spec.output_transform == "softmax":
        e = np.exp(h - h.max(axis=-1, keepdims=True))
        h = e / e.sum(axis=-1, keepdims=True)
    return h[0] if single else h


class TapeParams:
    """One tape Tensor per layout entry, viewing a ParamVector's storage."""

    def __init__(self, pv, requires_grad=True):
        self.pv = pv
        self.tensors = {}
        for name, _ in pv.layout:
            t = T.Tensor(pv.get(name), requires_grad=requires_grad)
            self.tensors[name] = t

    def __getitem__(self, name):
        return self.tensors[name]

    def grad_vector(self, check_finite_name=None):
        """Assemble accumulated gradients into a ParamVector (zeros if unset)."""
        parts = []
        for name, shape in self.pv.layout:
            g = self.tensors[name].grad
            if g is None:
                g = np.zeros(shape)
            elif check_finite_name is not None and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"{check_finite_name} gradient for {name}")
            parts.append(g.ravel())
        return ParamVector._shared(np.concatenate(parts), self.pv)


def mlp_fused_t(spec, tape_params, x):
    """Whole-MLP tape node with hand-rolled layer backprop.

    Matches mlp_forward_t exactly but builds one graph node instead of one
    per layer, which matters in tight training loops. Identity output
    transform only.
    """
    if spec.output_transform != "identity":
        raise ValueError("mlp_fused_t supports identity output transform only")
    xt = x if isinstance(x, T.Tensor) else T.Tensor(_check_input(spec, x))
    n_layers = len(spec.layer_dims) - 1
    ws = [tape_params[f"w{i}"] for i in range(n_layers)]
    bs = [
        tape_params[f"b{i}"] if (i < n_layers - 1 or spec.final_bias) else None
        for i in range(n_layers)
    ]
    tanh_act = spec.activation == "tanh"

    acts = [xt.data]  # inputs to each affine layer
    h = xt.data
    for i in range(n_layers):
        h = h @ ws[i].data
        if bs[i] is not None:
            h = h + bs[i].data
        if i < n_layers - 1:
            h = np.tanh(h) if tanh_act else h * (h > 0)
            acts.append(h)

    def bw(g):
        gz = g
        for i in range(n_layers - 1, -1, -1):
            a_in = acts[i]
            T.acc(ws[i], a_in.T @ gz)
            if bs[i] is not None:
                T.acc(bs[i], gz.sum(axis=0))
            if i == 0:
                if xt.requires_grad:
                    T.acc(xt, gz @ ws[i].data.T)
                break
            gh = gz @ ws[i].data.T
            post = acts[i]
            gz = gh * (1.0 - post * post) if tanh_act else gh * (post > 0)

    parents = (xt, *ws, *(b for b in bs if b is not None))
    return T.custom(h, parents, bw)


def mlp_forward_t(spec, tape_params, x):
    """Tape forward pass. x may be a Tensor or an array (treated constant)."""
    if not isinstance(x, T.Tensor):
        x = T.Tensor(_check_input(spec, x))
    h = x if x.data.ndim == 2 else T.reshape(x, (1, spec.input_dim))
    squeeze = x.data.ndim == 1
    n_layers = len(spec.layer_dims) - 1
    act = T.tanh if spec.activation == "tanh" else T.relu
    for i in range(n_layers):
        if i < n_layers - 1 or spec.final_bias:
            h = T.affine(h, tape_params[f"w{i}"], tape_params[f"b{i}"])
        else:
            h = T.matmul(h, tape_params[f"w{i}"])
        if i < n_layers - 1:
            h = act(h)
    if spec.output_transform == "tanh-squash":
        h = T.tanh(h)
    elif spec.output_transform == "softmax":
        h = T.softmax(h, axis=-1)
    if squeeze:
        h = T.reshape(h, (spec.output_dim,))
    return h


def loss_gradients(spec, params, loss_fn, batch):
    """Gradient of the mean per-sample loss with respect to every parameter.

    loss_fn maps one output row (a Tensor of length output_dim) to a scalar
    Tensor and must be built from tape ops.
    """
    batch = _check_input(spec, np.atleast_2d(np.asarray(batch, dtype=np.float64)))
    tp = TapeParams(params)
    out = mlp_forward_t(spec, tp, batch)
    losses = []
    for i in range(batch.shape[0]):
        row = T.reshape(T.slice_rows(out, i, i + 1), (spec.output_dim,))
        losses.append(T.reshape(loss_fn(row), (1,)))
    total = T.mean(T.concat(losses, axis=0))
    if not np.isfinite(total.data):
        raise NonFiniteError("loss")
    T.backward(total)
    return tp.grad_vector(check_finite_name="loss")


def mean_batch_loss(spec, params, loss_fn, batch):
    """The scalar objective that loss_gradients differentiates."""
    batch = _check_input(spec, np.atleast_2d(np.asarray(batch, dtype=np.float64)))
    tp = TapeParams(params, requires_grad=False)
    out = mlp_forward_t(spec, tp, batch)
    vals = []
    for i in range(batch.shape[0]):
        row = T.reshape(T.slice_rows(out, i, i + 1), (spec.output_dim,))
        vals.append(float(loss_fn(row).data))
    return float(np.mean(vals))


def finite_diff_gradient(f, params, h):
    """Central-difference gradient of a scalar function of a ParamVector."""
    if h <= 0:
        raise ValueError("nonpositive step size")
    base = params.values
    grad = np.zeros_like(base)
    for i in range(base.size):
        up = base.copy()
        up[i] += h
        dn = base.copy()
        dn[i] -= h
        grad[i] = (f(params.with_values(up)) - f(params.with_values(dn))) / (2.0 * h)
    return params.with_values(grad)


def max_relative_error(analytic, numeric):
    a = analytic.values if isinstance(analytic, ParamVector) else np.asarray(analytic)
    n = numeric.values if isinstance(numeric, ParamVector) else np.asarray(numeric)
    return float(np.max(np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)))


def grad_check(spec, params, loss_fn, batch, h):
    """Max relative error between analytic and central-difference gradients."""
    if h <= 0:
        raise ValueError("nonpositive step size")
    analytic = loss_gradients(spec, params, loss_fn, batch)
    numeric = finite_diff_gradient(lambda p: mean_batch_loss(spec, p, loss_fn, batch), params, h)
    return max_relative_error(analytic, numeric)
