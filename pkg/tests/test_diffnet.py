import math
import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from transrank import diffnet, zoo
from transrank.diffnet import Conv2D, Dense, Flatten, Network, ReLU
from transrank.errors import DomainError, ShapeError

from conftest import finite_difference_check, random_net


def test_identity_dense_forward():
    net = Network([Dense(2, 2, np.eye(2), np.zeros(2))], (2,), 2)
    np.testing.assert_allclose(diffnet.forward(net, np.array([0.3, 0.7])), [0.3, 0.7], atol=1e-7)


def test_zero_weight_net_gives_zero_logits():
    net = Network([Flatten(1, 4, 4), Dense(16, 3)], (1, 4, 4), 3)
    x = np.random.default_rng(0).uniform(size=(1, 4, 4))
    assert np.array_equal(diffnet.forward(net, x), np.zeros(3))


def test_forward_matches_naive_loops():
    rng = np.random.default_rng(3)
    w1, b1 = rng.normal(size=(5, 4)), rng.normal(size=5)
    w2, b2 = rng.normal(size=(3, 5)), rng.normal(size=3)
    net = Network([Dense(4, 5, w1, b1), ReLU(), Dense(5, 3, w2, b2)], (4,), 3)
    x = rng.uniform(size=4)
    # recompute from the stored float32 weights with explicit python loops
    W1, B1 = net.layers[0].params
    W2, B2 = net.layers[2].params
    hidden = [max(0.0, sum(float(W1[j, i]) * x[i] for i in range(4)) + float(B1[j])) for j in range(5)]
    expected = [sum(float(W2[k, j]) * hidden[j] for j in range(5)) + float(B2[k]) for k in range(3)]
    np.testing.assert_allclose(diffnet.forward(net, x), expected, atol=1e-5)


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(4)
    conv = Conv2D(2, 6, 7, 3, 3, 2, rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    x = rng.uniform(size=(1, 2, 6, 7))
    y, _ = conv.forward(x)
    w, b = conv.params
    ho, wo = (6 - 3) // 2 + 1, (7 - 3) // 2 + 1
    for o in range(3):
        for i in range(ho):
            for j in range(wo):
                ref = float(b[o]) + sum(float(w[o, c, a, d]) * x[0, c, 2 * i + a, 2 * j + d]
                                        for c in range(2) for a in range(3) for d in range(3))
                assert y[0, o, i, j] == pytest.approx(ref, abs=1e-9)


def test_input_shape_mismatch():
    net = zoo.build("mlp-narrow", (1, 4, 4), 3, 0)
    with pytest.raises(ShapeError):
        diffnet.forward(net, np.zeros((4, 4)))


def test_network_shape_composition_checked():
    with pytest.raises(ShapeError):
        Network([Dense(4, 3)], (4,), 2)


def test_forward_is_pure_and_thread_safe():
    net = zoo.build("cnn-pool", (1, 8, 8), 4, 1)
    x = np.random.default_rng(1).uniform(size=(32, 1, 8, 8))
    ref = diffnet.forward(net, x)
    results = [None] * 8

    def work(i):
        results[i] = (diffnet.forward(net, x), diffnet.grad_input(net, x, np.zeros(32, int)))

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for logits, _ in results:
        assert logits.tobytes() == ref.tobytes()
    assert all(r[1].tobytes() == results[0][1].tobytes() for r in results)


def test_softmax_uniform():
    np.testing.assert_allclose(diffnet.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    p = diffnet.softmax([1000.0, 0.0])
    assert np.isfinite(p).all()
    assert p[0] == pytest.approx(1.0) and p[1] < 1e-300 + 1e-400


def test_softmax_matches_high_precision():
    mpmath.mp.dps = 50
    z = [1.0, 2.0, 3.0]
    denom = sum(mpmath.e ** v for v in z)
    expected = [float(mpmath.e ** v / denom) for v in z]
    np.testing.assert_allclose(diffnet.softmax(z), expected, atol=1e-6)
    np.testing.assert_allclose(diffnet.softmax(z), expected, rtol=1e-14)


def test_softmax_empty():
    with pytest.raises(DomainError):
        diffnet.softmax([])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e4, 1e4)), st.randoms())
def test_softmax_sums_to_one_and_is_permutation_equivariant(z, rnd):
    p = diffnet.softmax(z)
    assert abs(p.sum() - 1) <= 1e-6
    perm = list(range(len(z)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(diffnet.softmax(z[perm]), p[perm], atol=1e-12)


def test_cross_entropy_confident():
    expected = math.log1p(math.exp(-20.0))
    assert diffnet.cross_entropy([10.0, -10.0], 0) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(2.06e-9, rel=1e-2)


@pytest.mark.parametrize("c", [2, 3, 7])
def test_cross_entropy_uniform(c):
    assert diffnet.cross_entropy(np.zeros(c), c - 1) == pytest.approx(math.log(c), rel=1e-12)


def test_cross_entropy_two_way_tie():
    assert diffnet.cross_entropy([0.0, 0.0], 1) == pytest.approx(0.6931, abs=1e-4)


def test_cross_entropy_label_range():
    with pytest.raises(DomainError):
        diffnet.cross_entropy([0.0, 1.0], 2)
    with pytest.raises(DomainError):
        diffnet.cross_entropy([0.0, 1.0], -1)


def test_zero_weight_gradient_is_zero():
    net = Network([Flatten(1, 4, 4), Dense(16, 3)], (1, 4, 4), 3)
    g = diffnet.grad_input(net, np.full((1, 4, 4), 0.5), 1)
    assert np.array_equal(g, np.zeros((1, 4, 4)))


def test_logistic_input_gradient_closed_form():
    # logits (0, w x): p(class 1) = sigmoid(w x)
    w = 2.0
    net = Network([Dense(1, 2, np.array([[0.0], [w]]), np.zeros(2))], (1,), 2)
    x = 0.5
    sigmoid = 1 / (1 + math.exp(w * x))  # sigma(-w x)
    assert diffnet.grad_input(net, np.array([x]), 1)[0] == pytest.approx(-w * sigmoid, rel=1e-12)


def test_batch_input_gradient_is_per_sample():
    net = zoo.build("mlp-deep", (5,), 3, 2)
    x = np.random.default_rng(0).uniform(size=(4, 5))
    y = np.array([0, 1, 2, 1])
    batch = diffnet.grad_input(net, x, y)
    for i in range(4):
        np.testing.assert_allclose(batch[i], diffnet.grad_input(net, x[i], y[i]), atol=1e-12)


def test_param_grad_zero_input():
    rng = np.random.default_rng(0)
    net = Network([Dense(3, 4, rng.normal(size=(4, 3)), rng.normal(size=4))], (3,), 4)
    gw, gb = diffnet.grad_params(net, np.zeros(3), 2)
    assert np.array_equal(gw, np.zeros((4, 3)))
    onehot = np.eye(4)[2]
    np.testing.assert_allclose(gb, diffnet.softmax(diffnet.forward(net, np.zeros(3))) - onehot, atol=1e-12)


def test_param_grad_batch_average():
    net = zoo.build("cnn-small", (1, 6, 6), 3, 5)
    x = np.random.default_rng(2).uniform(size=(1, 6, 6))
    single = diffnet.grad_params(net, x, 1)
    double = diffnet.grad_params(net, np.stack([x, x]), np.array([1, 1]))
    for a, b in zip(single, double):
        np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("kind", ["mlp", "conv", "pool"])
@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(1000 + seed)
    net = random_net(rng, kind)
    x = rng.uniform(0, 1, net.input_shape)
    worst, checked, skipped = finite_difference_check(net, x, int(rng.integers(net.num_classes)))
    assert worst <= 1.0
    assert skipped <= 0.05 * (checked + skipped)


def test_conv_stride_and_kernel_validation():
    with pytest.raises(ShapeError):
        Conv2D(1, 4, 4, 2, 5)
    with pytest.raises(ShapeError):
        Conv2D(1, 4, 4, 2, 3, stride=0)


def test_layer_equality_is_bitwise():
    a = Dense(2, 2, np.eye(2), np.zeros(2))
    b = Dense(2, 2, np.eye(2), np.zeros(2))
    assert a == b
    b.params[0][0, 0] = np.nextafter(np.float32(1), np.float32(2))
    assert a != b
