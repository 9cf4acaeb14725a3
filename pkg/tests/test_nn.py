"""Finite-difference validation of the transformer-block kernel."""

import numpy as np
import pytest

from dualspace import nn


def _numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = f()
        flat[i] = orig - eps
        lm = f()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * eps)
    return g


@pytest.fixture()
def small_block():
    rng = np.random.default_rng(7)
    p = nn.init_block_params(rng, dim=8, num_heads=2, mlp_ratio=2.0, std=0.3)
    x = rng.normal(size=(2, 5, 8))
    target = rng.normal(size=(2, 5, 8))
    return p, x, target


def _loss_and_grads(p, x, target, num_heads=2):
    y, cache = nn.block_forward(x, p, num_heads)
    diff = y - target
    loss = np.sum(diff * diff)
    dx, grads = nn.block_backward(2.0 * diff, cache, p)
    return loss, dx, grads


def test_param_gradients_match_finite_differences(small_block):
    p, x, target = small_block
    _, _, grads = _loss_and_grads(p, x, target)

    def loss_fn():
        y, _ = nn.block_forward(x, p, 2)
        d = y - target
        return np.sum(d * d)

    for name in nn.BLOCK_PARAM_NAMES:
        num = _numeric_grad(loss_fn, p[name])
        scale = max(1.0, np.abs(num).max())
        assert np.allclose(grads[name], num, atol=5e-6 * scale), name


def test_input_gradient_matches_finite_differences(small_block):
    p, x, target = small_block
    _, dx, _ = _loss_and_grads(p, x, target)

    def loss_fn():
        y, _ = nn.block_forward(x, p, 2)
        d = y - target
        return np.sum(d * d)

    num = _numeric_grad(loss_fn, x)
    assert np.allclose(dx, num, atol=5e-6 * max(1.0, np.abs(num).max()))


def test_standardize_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, 6))
    t = rng.normal(size=(2, 4, 6))
    y, cache = nn.standardize_forward(x)
    dx = nn.standardize_backward(2.0 * (y - t), cache)

    def loss_fn():
        z, _ = nn.standardize_forward(x)
        d = z - t
        return np.sum(d * d)

    num = _numeric_grad(loss_fn, x)
    assert np.allclose(dx, num, atol=1e-5)


def test_gelu_grad_matches_finite_differences():
    x = np.linspace(-4, 4, 41)
    num = (nn.gelu(x + 1e-6) - nn.gelu(x - 1e-6)) / 2e-6
    assert np.allclose(nn.gelu_grad(x), num, atol=1e-7)


def test_layer_norm_output_is_standardized():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(4, 7, 16))
    y, _ = nn.layer_norm_forward(x, np.ones(16), np.zeros(16))
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(y.std(axis=-1), 1.0, atol=1e-3)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    s = nn.softmax(rng.normal(size=(3, 2, 5, 5)) * 50)
    assert np.allclose(s.sum(axis=-1), 1.0)
    assert np.all(s >= 0)


def test_dropout_masks_change_training_path_only():
    rng = np.random.default_rng(5)
    p = nn.init_block_params(rng, dim=8, num_heads=2, std=0.1)
    x = rng.normal(size=(3, 4, 8))
    y_eval, _ = nn.block_forward(x, p, 2)
    y_eval2, _ = nn.block_forward(x, p, 2)
    assert np.array_equal(y_eval, y_eval2)
    y_drop, _ = nn.block_forward(x, p, 2, dropout_rate=0.5, rng=np.random.default_rng(9))
    assert not np.allclose(y_drop, y_eval)
    with pytest.raises(ValueError):
        nn.block_forward(x, p, 2, dropout_rate=0.5)


def test_dropout_gradients_match_finite_differences():
    # Fixed masks via identical rng stream on every forward evaluation.
    rng = np.random.default_rng(11)
    p = nn.init_block_params(rng, dim=4, num_heads=2, mlp_ratio=2.0, std=0.3)
    x = rng.normal(size=(2, 3, 4))
    t = rng.normal(size=(2, 3, 4))

    def run():
        return nn.block_forward(x, p, 2, dropout_rate=0.3, rng=np.random.default_rng(42))

    y, cache = run()
    _, grads = nn.block_backward(2.0 * (y - t), cache, p)

    def loss_fn():
        z, _ = run()
        d = z - t
        return np.sum(d * d)

    for name in ("w1", "wo", "ln1_g"):
        num = _numeric_grad(loss_fn, p[name])
        assert np.allclose(grads[name], num, atol=5e-6 * max(1.0, np.abs(num).max())), name


def test_adam_descends_quadratic():
    rng = np.random.default_rng(2)
    params = {"w": rng.normal(size=(5,))}
    target = np.arange(5.0)
    opt = nn.Adam(params, lr=0.05)
    first = np.sum((params["w"] - target) ** 2)
    for _ in range(400):
        opt.step({"w": 2.0 * (params["w"] - target)})
    assert np.sum((params["w"] - target) ** 2) < 1e-3 * first
