import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_fd, rel_err
from helpers import fixed_logit_model, tiny_model
from ulab import autodiff as ad
from ulab.errors import DimensionError, InputError, LabelError
from ulab.nn import (ModelParams, TrainConfig, cross_entropy, default_dims, forward, grad, init_model,
                     l1_norm, mean_ce, predict, sample_extractor, sgd_step, train, tree_leaves, tree_map,
                     tree_unflatten, value_and_grad)


def test_init_is_deterministic_and_fan_in_bounded():
    a = init_model((8, 64, 64, 5), seed=3)
    b = init_model((8, 64, 64, 5), seed=3)
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        np.testing.assert_array_equal(wa, wb)
        np.testing.assert_array_equal(ba, bb)
    for w, _ in a.layers:
        assert np.abs(w).max() <= 1 / np.sqrt(w.shape[0])
    assert a.dims == (8, 64, 64, 5)
    assert a.n_params() == 8 * 64 + 64 + 64 * 64 + 64 + 64 * 5 + 5


def test_default_dims_and_extractor_shape():
    assert default_dims(8, 5) == (8, 64, 64, 5)
    ext = sample_extractor(0, n_inputs=8)
    assert ext.dims == (8, 32, 16)
    assert forward(ext, np.zeros((3, 8))).shape == (3, 16)


def test_forward_rejects_wrong_width():
    with pytest.raises(DimensionError):
        forward(tiny_model(d=4), np.zeros((2, 5)))


def test_incompatible_layers_rejected():
    with pytest.raises(DimensionError):
        ModelParams(((np.zeros((2, 3)), np.zeros(3)), (np.zeros((4, 2)), np.zeros(2))), ("tanh",))


def test_cross_entropy_reference_value():
    # log(e + e^2 + e^3) - 1, computed at 40 digits
    ce = cross_entropy(np.array([[1.0, 2.0, 3.0]]), np.array([0]))
    assert ce[0] == pytest.approx(2.40760596444438, abs=1e-14)


def test_cross_entropy_label_errors():
    with pytest.raises(LabelError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(DimensionError):
        cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    logits = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 2])
    g = ad.Var(logits)
    ad.sum(cross_entropy(g, y)).backward()
    fd = central_fd(lambda v: float(cross_entropy(v, y).sum()), logits)
    assert rel_err(g.grad, fd) <= 1e-7


def test_network_gradient_matches_fd(rng):
    model = tiny_model(seed=1)
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, size=6)
    g = grad(lambda m: mean_ce(m, x, y), model)
    leaves = tree_leaves(model)
    for k, (leaf, gl) in enumerate(zip(leaves, tree_leaves(g))):
        def f(v, k=k):
            ls = list(leaves)
            ls[k] = v
            return float(mean_ce(tree_unflatten(model, ls), x, y))

        assert rel_err(gl, central_fd(f, leaf)) <= 1e-6


def test_l1_gradient_is_sign():
    model = tiny_model(seed=2)
    g = grad(l1_norm, model)
    for p, gp in zip(tree_leaves(model), tree_leaves(g)):
        np.testing.assert_array_equal(gp, np.sign(p))


def test_constant_objective_gives_zero_gradient():
    model = tiny_model()
    val, g = value_and_grad(lambda m: 3.0, model)
    assert val == 3.0
    assert all(np.all(x == 0) for x in tree_leaves(g))


def test_tree_map_requires_congruent_trees():
    a, b = tiny_model(hidden=(8,)), tiny_model(hidden=(8, 8))
    with pytest.raises(DimensionError):
        tree_map(lambda x, y: x + y, a, b)


def test_predict_ties_go_to_lowest_index():
    model = fixed_logit_model([0.0, 0.0, 0.0, 0.0, 0.0])
    assert np.all(predict(model, np.zeros((10, 2))) == 0)


def test_train_reduces_loss_and_is_deterministic(rng):
    x = np.concatenate([rng.normal(-3, 1, size=(40, 4)), rng.normal(3, 1, size=(40, 4))])
    y = np.repeat([0, 1], 40)
    m0 = init_model((4, 8, 2), 0)
    cfg = TrainConfig(lr=0.1, epochs=5, batch_size=16, seed=7)
    m1, hist = train(m0, x, y, cfg)
    m2, hist2 = train(m0, x, y, cfg)
    assert hist == hist2
    assert hist[-1] < hist[0]
    assert np.mean(predict(m1, x) == y) == 1.0
    for a, b in zip(tree_leaves(m1), tree_leaves(m2)):
        np.testing.assert_array_equal(a, b)


def test_train_rejects_empty_split():
    with pytest.raises(InputError):
        train(tiny_model(), np.zeros((0, 4)), np.zeros(0, dtype=int), TrainConfig())


def test_train_config_validation():
    with pytest.raises(InputError):
        TrainConfig(lr=0)


@given(st.integers(0, 2**31 - 1))
def test_cross_entropy_nonnegative(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(scale=30, size=(5, 4))
    assert np.all(cross_entropy(logits, r.integers(0, 4, size=5)) >= 0)


def test_cross_entropy_two_logit_reference():
    # logits (1, 0): label 0 costs ln(1 + e) - 1, label 1 costs ln(1 + e)
    ce = cross_entropy(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0, 1]))
    np.testing.assert_allclose(ce, [0.3132616875182228, 1.3132616875182228], rtol=1e-14)


def test_two_sgd_steps_on_a_parabola():
    w = np.array([1.0])
    for _ in range(2):
        w = sgd_step(w, grad(lambda v: ad.sum(ad.square(v)), w), 0.05)
    assert w[0] == pytest.approx(0.81, rel=1e-14)


def test_small_mlp_separates_two_blobs():
    r = np.random.default_rng(11)
    x = np.concatenate([r.normal(-2, 0.5, size=(50, 2)), r.normal(2, 0.5, size=(50, 2))])
    y = np.repeat([0, 1], 50)
    model, _ = train(init_model((2, 16, 2), 0), x, y, TrainConfig(epochs=30, seed=0))
    assert np.mean(predict(model, x) == y) == 1.0
