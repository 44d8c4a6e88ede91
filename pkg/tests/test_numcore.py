"""ParamVector, MLP forward/gradients, Adam, and the gradient checker."""

import numpy as np
import pytest

from corrolab.errors import DimensionMismatch, NonFiniteError
from corrolab.numcore import (
    AdamState,
    MlpSpec,
    ParamVector,
    adam_step,
    grad_check,
    init_adam,
    init_params,
    loss_gradients,
    mlp_forward,
)
from corrolab.numcore import tensor as T
from corrolab.numcore.mlp import zero_params


# ------------------------------------------------------------- ParamVector


def test_paramvector_layout_partitions_values():
    pv = ParamVector(np.arange(10.0), [("w", (2, 3)), ("b", (4,))])
    assert pv.get("w").shape == (2, 3)
    assert np.array_equal(pv.get("b"), [6.0, 7.0, 8.0, 9.0])


def test_paramvector_rejects_bad_length_and_shape():
    with pytest.raises(DimensionMismatch):
        ParamVector(np.zeros(5), [("w", (2, 3))])
    with pytest.raises(ValueError):
        ParamVector(np.zeros(0), [("w", (0,))])


def test_paramvector_views_read_only():
    pv = ParamVector(np.zeros(4), [("b", (4,))])
    with pytest.raises(ValueError):
        pv.get("b")[0] = 1.0


def test_paramvector_roundtrip_bit_exact():
    rng = np.random.default_rng(3)
    pv = ParamVector(rng.normal(size=17), [("weights", (3, 4)), ("bias", (4,)), ("s", (1,))])
    back = ParamVector.from_bytes(pv.to_bytes())
    assert back.layout == pv.layout
    assert back.values.tobytes() == pv.values.tobytes()


def test_paramvector_file_roundtrip(tmp_path):
    pv = ParamVector(np.linspace(-1, 1, 6), [("w", (2, 3))])
    path = tmp_path / "p.pv"
    pv.save(path)
    assert ParamVector.load(path).values.tobytes() == pv.values.tobytes()


# ------------------------------------------------------------- mlp_forward


def test_forward_zero_params_zero_output():
    spec = MlpSpec(3, 2, (4,), "tanh", "identity")
    out = mlp_forward(spec, zero_params(spec), np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(out, np.zeros(2))


def test_forward_identity_linear_layer():
    spec = MlpSpec(3, 3)
    pv = ParamVector.from_arrays([("w0", np.eye(3)), ("b0", np.zeros(3))])
    v = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(mlp_forward(spec, pv, v), v)


def test_forward_hand_evaluated_two_layer():
    # Hand calculation with scalar arithmetic (convention: h = x @ W + b):
    #   x = (1, -1), W0 = [[0.5, -1.0], [0.25, 0.5]], b0 = (0.1, -0.2)
    #   pre = (0.5 - 0.25 + 0.1, -1.0 - 0.5 - 0.2) = (0.35, -1.7)
    #   h = (tanh 0.35, tanh -1.7) = (0.3363755443363322, -0.935409070603099)
    #   y = 2*h1 - h2 + 0.05 = 1.6581601592757635
    spec = MlpSpec(2, 1, (2,), "tanh", "identity")
    pv = ParamVector.from_arrays(
        [
            ("w0", np.array([[0.5, -1.0], [0.25, 0.5]])),
            ("b0", np.array([0.1, -0.2])),
            ("w1", np.array([[2.0], [-1.0]])),
            ("b1", np.array([0.05])),
        ]
    )
    out = mlp_forward(spec, pv, np.array([1.0, -1.0]))
    assert abs(out[0] - 1.6581601592757635) < 1e-12


def test_forward_dim_mismatch_names_dims():
    spec = MlpSpec(3, 2, (4,))
    with pytest.raises(DimensionMismatch) as ei:
        mlp_forward(spec, init_params(spec, np.random.default_rng(0)), np.zeros(4))
    assert ei.value.expected == 3 and ei.value.actual == 4


def test_forward_batch_matches_rows():
    spec = MlpSpec(3, 2, (5,), "relu")
    pv = init_params(spec, np.random.default_rng(1))
    batch = np.random.default_rng(2).normal(size=(6, 3))
    out = mlp_forward(spec, pv, batch)
    for i in range(6):
        # batched and single-row BLAS paths may differ in the last bits
        assert np.max(np.abs(out[i] - mlp_forward(spec, pv, batch[i]))) < 1e-13


def test_init_reproducible_and_bounded():
    spec = MlpSpec(4, 3, (8,))
    a = init_params(spec, np.random.default_rng(42))
    b = init_params(spec, np.random.default_rng(42))
    assert a.values.tobytes() == b.values.tobytes()
    bound = np.sqrt(6.0 / (4 + 8))
    assert np.all(np.abs(a.get("w0")) <= bound)
    assert np.array_equal(a.get("b0"), np.zeros(8))


# ---------------------------------------------------------- loss_gradients


def test_constant_loss_zero_gradient():
    spec = MlpSpec(2, 2, (3,))
    pv = init_params(spec, np.random.default_rng(0))
    g = loss_gradients(spec, pv, lambda out: T.Tensor(1.5), np.zeros((4, 2)))
    assert np.array_equal(g.values, np.zeros(len(pv)))


def test_linear_quadratic_outer_product_gradient():
    # loss = 0.5 ||y||^2 on y = W^T-free linear layer, single input x:
    # dL/dW = outer(x, y), dL/db = y.
    spec = MlpSpec(3, 2)
    rng = np.random.default_rng(5)
    pv = init_params(spec, rng)
    x = rng.normal(size=3)
    y = mlp_forward(spec, pv, x)
    g = loss_gradients(spec, pv, lambda out: T.mul(T.sum_(T.square(out)), T.Tensor(0.5)), x[None, :])
    assert np.allclose(g.get("w0"), np.outer(x, y), atol=1e-12)
    assert np.allclose(g.get("b0"), y, atol=1e-12)


def test_random_net_matches_finite_differences():
    spec = MlpSpec(4, 3, (8, 6), "tanh", "identity")
    rng = np.random.default_rng(11)
    pv = init_params(spec, rng)
    batch = rng.normal(size=(5, 4))
    loss = lambda out: T.sum_(T.square(out))
    assert grad_check(spec, pv, loss, batch, 1e-5) <= 1e-4


def test_nonfinite_loss_raises():
    spec = MlpSpec(2, 1)
    pv = init_params(spec, np.random.default_rng(0))
    with pytest.raises(NonFiniteError):
        loss_gradients(spec, pv, lambda out: T.log(T.Tensor(np.array(-1.0))), np.ones((1, 2)))


# -------------------------------------------------------------- adam_step


def _state_with(lr=0.1, n=3):
    return init_adam(n, learning_rate=lr)


def test_adam_zero_gradient_fixed_point():
    pv = ParamVector(np.array([1.0, -2.0, 3.0]), [("p", (3,))])
    st = _state_with()
    new_pv, new_st = adam_step(st, pv, pv.zeros_like())
    assert np.array_equal(new_pv.values, pv.values)
    assert new_st.step_count == 1
    assert st.step_count == 0  # input state untouched


def test_adam_first_step_is_signed_learning_rate():
    pv = ParamVector(np.array([0.0, 0.0]), [("p", (2,))])
    st = init_adam(2, learning_rate=0.01, epsilon=1e-12)
    g = ParamVector(np.array([4.0, -0.003]), [("p", (2,))])
    new_pv, _ = adam_step(st, pv, g)
    assert np.allclose(new_pv.values, [-0.01, 0.01], rtol=1e-6)


def test_adam_matches_scalar_reference_ten_steps():
    # Independent scalar implementation of bias-corrected Adam on f(x)=x^2.
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    x_ref, m_ref, v_ref = 1.0, 0.0, 0.0
    trajectory = []
    for t in range(1, 11):
        g = 2.0 * x_ref
        m_ref = b1 * m_ref + (1 - b1) * g
        v_ref = b2 * v_ref + (1 - b2) * g * g
        x_ref = x_ref - lr * (m_ref / (1 - b1**t)) / (np.sqrt(v_ref / (1 - b2**t)) + eps)
        trajectory.append(x_ref)

    pv = ParamVector(np.array([1.0]), [("x", (1,))])
    st = AdamState(np.zeros(1), np.zeros(1), 0, lr, b1, b2, eps)
    for t in range(10):
        g = ParamVector(2.0 * pv.values, pv.layout)
        pv, st = adam_step(st, pv, g)
        assert abs(pv.values[0] - trajectory[t]) < 1e-12
    assert st.step_count == 10


def test_adam_rejects_nonfinite_and_mismatch():
    pv = ParamVector(np.zeros(2), [("p", (2,))])
    st = init_adam(2)
    with pytest.raises(NonFiniteError):
        adam_step(st, pv, ParamVector(np.array([np.nan, 0.0]), pv.layout))
    with pytest.raises(DimensionMismatch):
        adam_step(st, pv, ParamVector(np.zeros(3), [("p", (3,))]))


def test_adam_per_coordinate_independence():
    # A coordinate's update depends only on its own gradient history.
    pv = ParamVector(np.zeros(2), [("p", (2,))])
    st = init_adam(2, learning_rate=0.2)
    g1 = ParamVector(np.array([1.0, 5.0]), pv.layout)
    g2 = ParamVector(np.array([1.0, -7.0]), pv.layout)
    a, st_a = adam_step(st, pv, g1)
    a, _ = adam_step(st_a, a, g2)

    pv1 = ParamVector(np.zeros(1), [("p", (1,))])
    st1 = init_adam(1, learning_rate=0.2)
    b, st_b = adam_step(st1, pv1, ParamVector(np.array([1.0]), pv1.layout))
    b, _ = adam_step(st_b, b, ParamVector(np.array([1.0]), pv1.layout))
    assert abs(a.values[0] - b.values[0]) < 1e-15


# -------------------------------------------------------------- grad_check


def test_grad_check_exact_for_quadratic_on_linear():
    spec = MlpSpec(3, 2)
    rng = np.random.default_rng(9)
    pv = init_params(spec, rng)
    batch = rng.normal(size=(4, 3))
    loss = lambda out: T.sum_(T.square(out))
    assert grad_check(spec, pv, loss, batch, 1e-5) <= 1e-9


def test_grad_check_two_hidden_tanh():
    spec = MlpSpec(3, 2, (6, 6), "tanh")
    rng = np.random.default_rng(13)
    pv = init_params(spec, rng)
    batch = rng.normal(size=(3, 3))
    loss = lambda out: T.mean(T.square(out))
    assert grad_check(spec, pv, loss, batch, 1e-5) <= 1e-4


def test_grad_check_rejects_nonpositive_h():
    spec = MlpSpec(2, 1)
    pv = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError, match="nonpositive step size"):
        grad_check(spec, pv, lambda out: T.sum_(out), np.ones((1, 2)), 0.0)


def test_gradient_correctness_random_small_nets():
    # Any random net below ~1e3 parameters passes at h=1e-5.
    rng = np.random.default_rng(21)
    for activation in ("tanh", "relu"):
        spec = MlpSpec(5, 4, (12, 10), activation)
        pv = init_params(spec, rng)
        batch = rng.normal(size=(4, 5))
        loss = lambda out: T.mean(T.square(out))
        assert spec.param_count() <= 1000
        assert grad_check(spec, pv, loss, batch, 1e-5) <= 1e-4
