"""MLP forward/gradient checks and the Adam update rule."""

import numpy as np
import pytest

from itogen import autodiff as ad
from itogen import nn
from itogen.errors import TrainingDivergenceError

from test_autodiff import assert_grads_close, finite_diff


def test_zero_weights_give_zero_output():
    params = nn.MlpParams(weights=[np.zeros((3, 4)), np.zeros((4, 2))],
                          biases=[np.zeros(4), np.zeros(2)])
    out = nn.mlp_forward(params, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.all(out == 0.0)


def test_identity_single_layer():
    params = nn.MlpParams(weights=[np.eye(3)], biases=[np.zeros(3)])
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.allclose(nn.mlp_forward(params, x), x)


def test_forward_matches_hand_rolled_evaluation():
    rng = np.random.default_rng(7)
    params = nn.init_mlp(rng, 4, [6], 3)
    x = rng.normal(size=(5, 4))
    out = nn.mlp_forward(params, x)
    # independent straightforward evaluation
    h = np.maximum(x @ params.weights[0] + params.biases[0], 0.0)
    expected = h @ params.weights[1] + params.biases[1]
    assert np.max(np.abs(out - expected)) <= 1e-12


def test_forward_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = nn.init_mlp(rng, 3, [5], 2)
    x = rng.normal(size=(4, 3))

    def closure(ps):
        out = nn.mlp_forward(params, x, param_nodes=ps)
        return ad.mean_all(ad.square(out))

    arrays = params.arrays()
    g_ad = ad.grad(closure, [a.copy() for a in arrays])
    g_fd = finite_diff(lambda ps: float(ad.value_of(closure(ps))),
                       [a.copy() for a in arrays])
    assert_grads_close(g_ad, g_fd)


def test_dropout_eval_mode_is_identity():
    rng = np.random.default_rng(2)
    params = nn.init_mlp(rng, 3, [8], 2)
    x = rng.normal(size=(6, 3))
    assert np.array_equal(nn.mlp_forward(params, x),
                          nn.mlp_forward(params, x, dropout_masks=None))
    assert nn.dropout_masks(rng, 0.0, 6, [8]) is None


def test_dropout_mask_scaling_is_unbiased():
    rng = np.random.default_rng(5)
    masks = nn.dropout_masks(rng, 0.1, 200000, [4])[0]
    assert set(np.round(np.unique(masks), 12)) <= {0.0, np.round(1 / 0.9, 12)}
    assert abs(masks.mean() - 1.0) < 5e-3


def test_output_clamp():
    params = nn.MlpParams(weights=[np.eye(2)], biases=[np.zeros(2)],
                          output_clamp=0.5)
    out = nn.mlp_forward(params, np.array([[3.0, -2.0]]))
    assert np.allclose(out, [[0.5, -0.5]])


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        nn.MlpParams(weights=[np.zeros((3, 4))], biases=[np.zeros(5)])
    params = nn.init_mlp(np.random.default_rng(0), 3, [4], 2)
    with pytest.raises(ValueError):
        nn.mlp_forward(params, np.zeros((2, 7)))


class TestAdam:
    def test_zero_grad_no_decay_leaves_params(self):
        p = [np.array([1.0, 2.0])]
        state = nn.AdamState.for_params(p, weight_decay=0.0)
        nn.adam_step(state, p, [np.zeros(2)])
        assert np.allclose(p[0], [1.0, 2.0])
        assert state.step == 1

    def test_first_step_hand_formula(self):
        # single scalar w=1, grad=1, lr=0.001, defaults, first step:
        # m_hat = v_hat = 1, so w <- (1 - lr*wd) - lr / (1 + eps)
        p = [np.array([1.0])]
        state = nn.AdamState.for_params(p, lr=0.001, weight_decay=0.0005)
        nn.adam_step(state, p, [np.array([1.0])])
        expected = (1.0 - 0.001 * 0.0005) - 0.001 / (1.0 + state.eps)
        assert abs(p[0][0] - expected) < 1e-15

    def test_quadratic_loss_decreases_monotonically(self):
        w = [np.array([4.0])]
        state = nn.AdamState.for_params(w, lr=0.05, weight_decay=0.0)
        losses = []
        for _ in range(3):
            losses.append(float((w[0][0] - 3.0) ** 2))
            nn.adam_step(state, w, [np.array([2.0 * (w[0][0] - 3.0)])])
        losses.append(float((w[0][0] - 3.0) ** 2))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_lr_zero_decay_zero_fixes_params(self):
        p = [np.array([1.5, -0.5])]
        state = nn.AdamState.for_params(p, lr=0.0, weight_decay=0.0)
        for _ in range(3):
            nn.adam_step(state, p, [np.array([1.0, -2.0])])
        assert np.allclose(p[0], [1.5, -0.5])

    def test_nan_gradient_raises(self):
        p = [np.array([1.0])]
        state = nn.AdamState.for_params(p)
        with pytest.raises(TrainingDivergenceError):
            nn.adam_step(state, p, [np.array([np.nan])])
