import math

import numpy as np
import pytest

from gaprune.errors import ConfigError, NumericError, ShapeError, UsageError
from gaprune.nn import (
    MLP,
    Linear,
    OptimizerConfig,
    ReLU,
    backward,
    finite_diff_grad,
    forward,
    lr_at,
    reset_momentum,
    sgd_step,
)

from conftest import random_batch


def square_model(w):
    # f(w) = w^2 via a 1x1 linear layer, input 1, target 0, squared loss
    return MLP([Linear("fc0", np.array([[w]]), np.zeros(1))], loss="mse")


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


# forward ---------------------------------------------------------------------

def test_identity_weights_equal_logits_give_ln2():
    model = MLP([Linear("fc0", np.eye(2), np.zeros(2))])
    loss, _ = forward(model, np.array([[0.7, 0.7]]), np.array([1]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("n_classes", [2, 3, 10])
def test_zero_weights_give_ln_c(n_classes):
    model = MLP.from_sizes([5, 4, n_classes], seed=0)
    for lin in model.linears():
        lin.weight[...] = 0.0
    x, y = random_batch(5, n_classes)
    loss, _ = forward(model, x, y)
    assert loss == pytest.approx(math.log(n_classes), abs=1e-12)


def test_forward_matches_straight_line_recomputation():
    model = MLP.from_sizes([4, 8, 3], seed=11)
    x, y = random_batch(4, 3, n=9, seed=5)
    loss, _ = forward(model, x, y)

    w0, w1 = model.layer("fc0").weight, model.layer("fc1").weight
    b0, b1 = model.layer("fc0").bias, model.layer("fc1").bias
    total = 0.0
    for xi, yi in zip(x, y):
        hidden = [max(0.0, sum(w0[j, k] * xi[k] for k in range(4)) + b0[j]) for j in range(8)]
        logits = [sum(w1[c, j] * hidden[j] for j in range(8)) + b1[c] for c in range(3)]
        total += math.log(sum(math.exp(z) for z in logits)) - logits[yi]
    assert loss == pytest.approx(total / len(y), rel=1e-12)


def test_forward_shape_errors():
    model = MLP.from_sizes([4, 3], seed=0)
    with pytest.raises(ShapeError):
        forward(model, np.zeros((2, 5)), np.array([0, 1]))
    with pytest.raises(ShapeError):
        forward(model, np.zeros((2, 4)), np.array([0]))
    with pytest.raises(ShapeError):
        forward(model, np.zeros((2, 4)), np.array([0, 3]))


def test_forward_non_finite_raises():
    model = MLP.from_sizes([2, 2], seed=0)
    model.layer("fc0").weight[0, 0] = np.inf
    with pytest.raises(NumericError):
        forward(model, np.ones((1, 2)), np.array([0]))


def test_adjacent_dimensions_checked():
    with pytest.raises(ShapeError):
        MLP([Linear("a", np.zeros((3, 2)), np.zeros(3)), ReLU(), Linear("b", np.zeros((2, 4)), np.zeros(2))])


# backward --------------------------------------------------------------------

def test_square_surrogate_gradient():
    model = square_model(3.0)
    loss, cache = forward(model, np.ones((1, 1)), np.zeros((1, 1)))
    assert loss == 9.0
    assert backward(cache)["fc0.weight"][0, 0] == pytest.approx(6.0)


def test_softmax_bias_gradient_rows_sum_to_zero():
    model = MLP.from_sizes([3, 4], seed=2)
    x, y = random_batch(3, 4, n=5)
    _, cache = forward(model, x, y)
    grads = backward(cache)
    assert grads["fc0.bias"].sum() == pytest.approx(0.0, abs=1e-15)


def test_backward_matches_finite_differences():
    model = MLP.from_sizes([5, 4, 3], seed=8)
    x, y = random_batch(5, 3, n=6, seed=1)
    _, cache = forward(model, x, y)
    grads = backward(cache)
    numeric = finite_diff_grad(model, x, y, 1e-5)
    for key in grads:
        assert max_rel_err(grads[key], numeric[key]) < 1e-6, key


def test_stale_cache_rejected():
    model = MLP.from_sizes([3, 2], seed=0)
    x, y = random_batch(3, 2)
    _, cache = forward(model, x, y)
    model.touch()
    with pytest.raises(UsageError):
        backward(cache)


def test_cache_single_use():
    model = MLP.from_sizes([3, 2], seed=0)
    _, cache = forward(model, *random_batch(3, 2))
    backward(cache)
    with pytest.raises(UsageError):
        backward(cache)


# finite differences -----------------------------------------------------------

def test_finite_diff_square():
    fd = finite_diff_grad(square_model(3.0), np.ones((1, 1)), np.zeros((1, 1)), 1e-4)
    assert fd["fc0.weight"][0, 0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant_loss_is_zero():
    # zero input and zero first layer: loss does not depend on fc0
    model = MLP.from_sizes([3, 2], seed=0)
    fd = finite_diff_grad(model, np.zeros((4, 3)), np.array([0, 1, 0, 1]), 1e-5)
    np.testing.assert_allclose(fd["fc0.weight"], 0.0, atol=1e-9)


def test_finite_diff_rejects_bad_epsilon():
    with pytest.raises(ConfigError):
        finite_diff_grad(square_model(1.0), np.ones((1, 1)), np.zeros((1, 1)), 0.0)


# sgd ---------------------------------------------------------------------------

def one_layer(w):
    return MLP([Linear("fc0", np.array([w], dtype=float), np.zeros(1))])


def test_masked_entry_frozen():
    model = one_layer([1.0, 0.0])
    grads = {"fc0.weight": np.array([[0.5, 0.3]]), "fc0.bias": np.zeros(1)}
    sgd_step(model, grads, {"fc0": np.array([[True, False]])}, OptimizerConfig(0.1), 0.1)
    np.testing.assert_array_equal(model.layer("fc0").weight, [[0.95, 0.0]])


def test_all_ones_mask_is_plain_sgd():
    opt = OptimizerConfig(0.1, momentum=0.9, weight_decay=0.01)
    a = MLP.from_sizes([4, 3, 2], seed=1)
    b = a.copy()
    x, y = random_batch(4, 2)
    masks = {lin.name: np.ones(lin.weight.shape, dtype=bool) for lin in a.linears()}
    for _ in range(5):
        _, ca = forward(a, x, y)
        sgd_step(a, backward(ca), masks, opt, 0.1)
        _, cb = forward(b, x, y)
        sgd_step(b, backward(cb), {}, opt, 0.1)
    for key, pa in a.parameters().items():
        assert pa.tobytes() == b.parameters()[key].tobytes()


def test_momentum_recurrence():
    model = one_layer([2.0])
    opt = OptimizerConfig(0.1, momentum=0.9)
    grads = {"fc0.weight": np.array([[1.0]]), "fc0.bias": np.zeros(1)}
    w = [2.0]
    for _ in range(2):
        sgd_step(model, grads, {}, opt, 0.1)
        w.append(model.layer("fc0").weight[0, 0])
    assert w[0] - w[1] == pytest.approx(0.1)
    assert w[1] - w[2] == pytest.approx(0.19)


def test_weight_decay_skips_bias():
    model = MLP([Linear("fc0", np.array([[1.0]]), np.array([1.0]))])
    zero = {"fc0.weight": np.zeros((1, 1)), "fc0.bias": np.zeros(1)}
    sgd_step(model, zero, {}, OptimizerConfig(0.1, weight_decay=0.5), 0.1)
    assert model.layer("fc0").weight[0, 0] == pytest.approx(0.95)
    assert model.layer("fc0").bias[0] == 1.0


def test_mask_freezing_over_many_steps():
    opt = OptimizerConfig(0.2, momentum=0.9, weight_decay=1e-3)
    model = MLP.from_sizes([5, 6, 3], seed=4)
    rng = np.random.default_rng(0)
    masks = {lin.name: rng.random(lin.weight.shape) < 0.5 for lin in model.linears()}
    for name, m in masks.items():
        model.layer(name).weight[~m] = 0.0
    for i in range(20):
        x, y = random_batch(5, 3, seed=i)
        _, cache = forward(model, x, y)
        sgd_step(model, backward(cache), masks, opt, 0.2)
    for name, m in masks.items():
        frozen = model.layer(name).weight[~m]
        assert np.all(frozen == 0.0) and not np.any(np.signbit(frozen))
        assert np.all(model.velocity[f"{name}.weight"][~m] == 0.0)


def test_sgd_shape_mismatch():
    model = one_layer([1.0, 2.0])
    grads = {"fc0.weight": np.zeros((1, 2)), "fc0.bias": np.zeros(1)}
    with pytest.raises(ShapeError):
        sgd_step(model, grads, {"fc0": np.ones((2, 1), dtype=bool)}, OptimizerConfig(0.1), 0.1)


def test_reset_momentum():
    model = one_layer([1.0])
    grads = {"fc0.weight": np.ones((1, 1)), "fc0.bias": np.zeros(1)}
    sgd_step(model, grads, {}, OptimizerConfig(0.1, momentum=0.5), 0.1)
    assert model.velocity
    reset_momentum(model)
    assert not model.velocity


def test_determinism_bit_identical():
    def run():
        model = MLP.from_sizes([4, 5, 2], seed=9)
        opt = OptimizerConfig(0.1, momentum=0.9)
        for i in range(10):
            _, cache = forward(model, *random_batch(4, 2, seed=i))
            sgd_step(model, backward(cache), {}, opt, 0.1)
        return b"".join(p.tobytes() for p in model.parameters().values())

    assert run() == run()


# learning-rate schedule -------------------------------------------------------

def test_constant_schedule():
    opt = OptimizerConfig(0.3)
    assert all(lr_at(opt, e, 7) == 0.3 for e in range(7))


def test_cosine_midpoint():
    opt = OptimizerConfig(0.4, schedule="cosine")
    assert lr_at(opt, 5, 10) == pytest.approx(0.2)
    assert lr_at(opt, 0, 10) == pytest.approx(0.4)


def test_warmup_ramp_boundary():
    opt = OptimizerConfig(0.4, schedule="cosine", warmup_epochs=2)
    assert lr_at(opt, 0, 10) == pytest.approx(0.2)
    assert lr_at(opt, 1, 10) == pytest.approx(0.4)
    # cosine restarts from the full rate right after warm-up
    assert lr_at(opt, 2, 10) == pytest.approx(0.4)


def test_lr_at_errors():
    with pytest.raises(UsageError):
        lr_at(OptimizerConfig(0.1), 0, 0)
    with pytest.raises(ConfigError):
        OptimizerConfig(0.0)
