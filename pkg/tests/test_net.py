import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fqtlab.batched import backward_fqt_batch
from fqtlab.net import (
    Linear,
    Network,
    QuantScheme,
    ReLU,
    Tape,
    backward_fqt,
    backward_qat,
    forward_exact,
    forward_quantized,
    gamma,
    jacobians,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
)
from fqtlab.rng import Substream


def one_hot(ids, c):
    return np.eye(c)[ids]


def problem(dims=(5, 7, 3), n=4, seed=0):
    net = Network.mlp(dims, seed)
    rng = np.random.default_rng(seed + 100)
    x = rng.standard_normal((n, dims[0]))
    y = one_hot(rng.integers(0, dims[-1], n), dims[-1])
    return net, x, y


def ste_loss(net, tape, params, y):
    """Loss of the quantized forward with every quantizer frozen as an additive
    offset, which is what a straight-through estimator differentiates."""
    h = tape.inputs[0]
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Linear):
            h = h + (tape.inputs[i] - tape.h[i]) if i else h
            h = h @ params[i]
        else:
            h = np.maximum(h, 0.0)
    return loss_and_grad(h, y)[0]


# -- forward ---------------------------------------------------------------------


def test_identity_linear():
    net = Network([Linear(3, 3)], [np.eye(3)])
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(forward_exact(net, x)[0], x)


def test_relu_negative_input():
    net = Network([Linear(2, 2), ReLU()], [-np.eye(2), None])
    assert np.array_equal(forward_exact(net, np.ones((3, 2)))[0], np.zeros((3, 2)))


def test_two_layer_matches_composition():
    net, x, _ = problem()
    w0, w2 = net.params[0], net.params[2]
    np.testing.assert_allclose(forward_exact(net, x)[0], np.maximum(x @ w0, 0) @ w2, rtol=1e-14)


def test_grid_aligned_forward_is_exact():
    # integers 0..255 already sit on the 8-bit grid of their range
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, (4, 3)).astype(float)
    x[0, 0], x[0, 1] = 0.0, 255.0
    w = rng.integers(0, 256, (3, 2)).astype(float)
    w[0, 0], w[0, 1] = 0.0, 255.0
    net = Network([Linear(3, 2)], [w])
    assert np.array_equal(forward_quantized(net, x, QuantScheme())[0], forward_exact(net, x)[0])


def test_quantized_forward_deterministic_and_close():
    net, x, _ = problem((16, 32, 32, 4), n=8)
    a, ta = forward_quantized(net, x, QuantScheme())
    b, tb = forward_quantized(net, x, QuantScheme())
    assert np.array_equal(a, b)
    assert all(np.array_equal(u, v) for u, v in zip(ta.h, tb.h))
    exact = forward_exact(net, x)[0]
    # tolerance set empirically: observed relative error about 1.5e-2
    assert np.linalg.norm(a - exact) / np.linalg.norm(exact) < 0.05


def test_shape_errors():
    with pytest.raises(ValueError):
        Network([Linear(3, 2)], [np.eye(3)])
    with pytest.raises(ValueError):
        Network([Linear(3, 2), ReLU(), Linear(3, 2)], [np.ones((3, 2)), None, np.ones((3, 2))])
    net, _, _ = problem()
    with pytest.raises(ValueError):
        forward_exact(net, np.ones((2, 4)))


# -- loss ------------------------------------------------------------------------


def test_loss_confident_row_has_zero_gradient():
    _, g = loss_and_grad(np.array([[800.0, 0.0, 0.0]]), np.array([[1.0, 0, 0]]))
    assert np.abs(g).max() == 0.0


def test_loss_uniform_two_classes():
    loss, g = loss_and_grad(np.zeros((1, 2)), np.array([[0.0, 1.0]]))
    assert loss == pytest.approx(np.log(2))
    # descent direction convention: softmax - y
    np.testing.assert_array_equal(g, [[0.5, -0.5]])


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(3)
    h = rng.standard_normal((5, 4))
    y = one_hot(rng.integers(0, 4, 5), 4)
    _, g = loss_and_grad(h, y)
    eps = 1e-6
    fd = np.zeros_like(h)
    for idx in np.ndindex(h.shape):
        hp, hm = h.copy(), h.copy()
        hp[idx] += eps
        hm[idx] -= eps
        fd[idx] = (loss_and_grad(hp, y)[0] - loss_and_grad(hm, y)[0]) / (2 * eps)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_loss_rejects_soft_labels():
    with pytest.raises(ValueError):
        loss_and_grad(np.zeros((1, 2)), np.array([[0.5, 0.5]]))


# -- QAT backward ------------------------------------------------------------------


def test_single_linear_identity_input():
    net = Network([Linear(3, 2)], [np.ones((3, 2))])
    _, tape = forward_exact(net, np.eye(3))
    g = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(backward_qat(net, tape, g).params[0], g)


def test_qat_matches_ste_finite_difference():
    net, x, y = problem((4, 6, 5, 3), n=5, seed=2)
    pred, tape = forward_quantized(net, x, QuantScheme(forward_bits=4))
    _, top = loss_and_grad(pred, y)
    grads = backward_qat(net, tape, top)
    eps = 1e-6
    for i in net.linear_indices:
        fd = np.zeros_like(tape.weights[i])
        for idx in np.ndindex(fd.shape):
            pp = list(tape.weights)
            plus, minus = pp[i].copy(), pp[i].copy()
            plus[idx] += eps
            minus[idx] -= eps
            fd[idx] = (
                ste_loss(net, tape, pp[:i] + [plus] + pp[i + 1 :], y)
                - ste_loss(net, tape, pp[:i] + [minus] + pp[i + 1 :], y)
            ) / (2 * eps)
        np.testing.assert_allclose(grads.params[i], fd, rtol=1e-6, atol=1e-8)


def test_qat_deterministic():
    net, x, y = problem()
    pred, tape = forward_quantized(net, x, QuantScheme())
    top = loss_and_grad(pred, y)[1]
    a, b = backward_qat(net, tape, top), backward_qat(net, tape, top)
    assert all(p is None or np.array_equal(p, q) for p, q in zip(a.params, b.params))


# -- FQT backward ------------------------------------------------------------------


def test_fqt_identity_scheme_is_qat_bit_exact():
    net, x, y = problem((6, 8, 8, 3))
    scheme = QuantScheme(8, None, None)
    pred, tape = forward_quantized(net, x, scheme)
    top = loss_and_grad(pred, y)[1]
    a = backward_qat(net, tape, top)
    b = backward_fqt(net, tape, top, scheme, Substream(1))
    for p, q in zip(a.params, b.params):
        assert (p is None and q is None) or np.array_equal(p, q)
    assert np.array_equal(a.input, b.input)


def test_fqt_grid_aligned_gradients_match_qat():
    # a single linear layer whose incoming gradient is on every grid
    net = Network([Linear(2, 3)], [np.ones((2, 3))])
    _, tape = forward_exact(net, np.eye(2))
    # every row spans 0..255, so per-tensor and per-row grids are the integers
    top = np.array([[0.0, 255.0, 17.0], [0.0, 128.0, 255.0]])
    for v in ("ptq", "psq"):
        b = backward_fqt(net, tape, top, QuantScheme(None, 8, 8, v), Substream(5))
        np.testing.assert_allclose(b.params[0], top, rtol=0, atol=1e-12)
        np.testing.assert_allclose(b.input, top @ net.params[0].T, rtol=0, atol=1e-10)


def test_fqt_seed_contract():
    net, x, y = problem((6, 8, 8, 3))
    scheme = QuantScheme(8, 4, 4, "psq")
    pred, tape = forward_quantized(net, x, scheme)
    top = loss_and_grad(pred, y)[1]
    a = backward_fqt(net, tape, top, scheme, Substream(7, 3))
    b = backward_fqt(net, tape, top, scheme, Substream(7, 3))
    c = backward_fqt(net, tape, top, scheme, Substream(8, 3))
    assert np.array_equal(a.params[0], b.params[0])
    assert not np.array_equal(a.params[0], c.params[0])


@pytest.mark.parametrize("variant", ["ptq", "psq", "bhq"])
def test_batched_matches_single_trials(variant):
    net, x, y = problem((5, 6, 6, 3))
    scheme = QuantScheme(8, 4, 4, variant)
    pred, tape = forward_quantized(net, x, scheme)
    top = loss_and_grad(pred, y)[1]
    batch, _ = backward_fqt_batch(net, tape, top, scheme, 11, np.arange(4))
    for t in range(4):
        single = backward_fqt(net, tape, top, scheme, Substream(11, t))
        for i in net.linear_indices:
            np.testing.assert_allclose(batch[i][t], single.params[i], rtol=0, atol=1e-12)


def test_single_layer_fqt_mean_is_qat():
    net = Network.mlp((4, 3), seed=4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 4))
    scheme = QuantScheme(8, 4, 4, "ptq")
    _, tape = forward_quantized(net, x, scheme)
    top = rng.standard_normal((6, 3))
    qat = backward_qat(net, tape, top).params[0]
    draws, _ = backward_fqt_batch(net, tape, top, scheme, 0, np.arange(100_000))
    d = draws[0]
    se = d.std(axis=0, ddof=1) / np.sqrt(d.shape[0])
    assert np.all(np.abs(d.mean(axis=0) - qat) <= 4 * se + 1e-12)


# -- Jacobians -----------------------------------------------------------------------


def test_scalar_jacobian():
    net = Network([Linear(1, 1)], [np.array([[3.0]])])
    _, tape = forward_exact(net, np.array([[2.0]]))
    j, k = jacobians(net, tape, 0)
    assert k.tolist() == [[2.0]] and j.tolist() == [[3.0]]
    assert gamma(net, tape, 0, 0).tolist() == [[2.0]]


def test_relu_jacobian_is_mask():
    net = Network([Linear(2, 2), ReLU()], [np.eye(2), None])
    _, tape = forward_exact(net, np.array([[1.0, -1.0], [0.0, 2.0]]))
    j, k = jacobians(net, tape, 1)
    np.testing.assert_array_equal(j, np.diag([1.0, 0.0, 0.0, 1.0]))
    assert k.shape == (4, 0)


def test_jacobian_size_cap():
    net = Network.mlp((70, 70), seed=0)
    _, tape = forward_exact(net, np.ones((60, 70)))
    with pytest.raises(ValueError, match="cap"):
        jacobians(net, tape, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 4))
def test_gamma_matches_recursion(seed, depth, n):
    rng = np.random.default_rng(seed)
    dims = list(rng.integers(1, 5, depth + 1))
    net = Network.mlp(dims, seed)
    x = rng.standard_normal((n, dims[0]))
    _, tape = forward_quantized(net, x, QuantScheme())
    lin = net.linear_indices
    for l in range(len(net.layers)):
        g = rng.standard_normal(tape.h[l + 1].shape)
        # recursion from layer l down with no gradient quantizers
        ref = backward_qat(Network(net.layers[: l + 1], net.params[: l + 1]), _truncate(tape, l), g)
        for k in [i for i in lin if i <= l]:
            got = g.ravel() @ gamma(net, tape, k, l)
            np.testing.assert_allclose(got, ref.params[k].ravel(), rtol=1e-8, atol=1e-12)


def _truncate(tape, l):
    return Tape(tape.h[: l + 2], tape.inputs[: l + 1], tape.weights[: l + 1])


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    net = Network.mlp((3, 5, 2), seed=9)
    path = tmp_path / "net.bin"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.layers == net.layers
    assert all(p is None or np.array_equal(p, q) for p, q in zip(net.params, back.params))
    assert path.stat().st_size == 8 + 4 + 2 * 8 + 8 * (15 + 10)


def test_checkpoint_errors(tmp_path):
    net = Network.mlp((3, 2), seed=0)
    path = tmp_path / "net.bin"
    save_checkpoint(net, path)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(ValueError, match="expected"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
