import numpy as np
import pytest

from ymir_bench import autodiff as ad


def tensor(rng, shape, requires_grad=True, scale=1.0):
    return ad.Tensor(scale * rng.standard_normal(shape), requires_grad=requires_grad)


def naive_conv2d(x, kernels, bias, stride, padding):
    """Loop-based oracle for cross-correlation."""
    n, c, h, w = x.shape
    f, _, kh, kw = kernels.shape
    oh, pt, pb = ad._pad_amounts(h, kh, stride, padding)
    ow, pl, pr = ad._pad_amounts(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[ni, fi, i, j] = np.sum(patch * kernels[fi]) + bias[fi]
    return out


# -- Forward correctness ----------------------------------------------------

def test_one_by_one_kernel_sums_channels(rng):
    x = tensor(rng, (2, 3, 4, 5), requires_grad=False)
    kernels = ad.Tensor(np.ones((1, 3, 1, 1)))
    bias = ad.Tensor(np.zeros(1))
    out = ad.conv2d(None, x, kernels, bias, 1, "same")
    assert out.data[:, 0] == pytest.approx(x.data.sum(axis=1))


def test_conv_output_geometry_for_melspec():
    x = ad.Tensor(np.zeros((1, 1, 128, 259), dtype=np.float32))
    kernels = ad.Tensor(np.zeros((64, 1, 11, 11), dtype=np.float32))
    bias = ad.Tensor(np.zeros(64, dtype=np.float32))
    out = ad.conv2d(None, x, kernels, bias, 4, "same")
    assert out.shape == (1, 64, 32, 65)


def test_conv_matches_naive_oracle_on_random_configs(rng):
    for _ in range(200):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        f = int(rng.integers(1, 5))
        kh = int(rng.integers(1, 4))
        h = int(rng.integers(kh, 8))
        w = int(rng.integers(kh, 9))
        stride = int(rng.integers(1, 3))
        padding = "same" if rng.integers(0, 2) else "valid"
        x = rng.standard_normal((n, c, h, w))
        kernels = rng.standard_normal((f, c, kh, kh))
        bias = rng.standard_normal(f)
        got = ad.conv2d(None, ad.Tensor(x), ad.Tensor(kernels), ad.Tensor(bias), stride, padding).data
        want = naive_conv2d(x, kernels, bias, stride, padding)
        assert np.abs(got - want).max() < 1e-10


def test_conv_channel_mismatch(rng):
    x = tensor(rng, (1, 3, 5, 5))
    kernels = tensor(rng, (2, 4, 3, 3))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(None, x, kernels, ad.Tensor(np.zeros(2)), 1, "same")


def test_depthwise_pointwise_identity(rng):
    c = 3
    x = tensor(rng, (2, c, 6, 6), requires_grad=False)
    depth = tensor(rng, (c, 3, 3), requires_grad=False)
    point = ad.Tensor(np.eye(c))
    out = ad.depthwise_separable_conv2d(None, x, depth, point, 1, "same")
    # pure depthwise oracle: conv each channel with its own kernel
    for ch in range(c):
        kernels = np.zeros((1, c, 3, 3))
        kernels[0, ch] = depth.data[ch]
        want = naive_conv2d(x.data, kernels, np.zeros(1), 1, "same")[:, 0]
        assert np.abs(out.data[:, ch] - want).max() < 1e-10


def test_depthwise_equals_composed_full_conv(rng):
    c, f = 3, 4
    x = tensor(rng, (2, c, 5, 5), requires_grad=False)
    depth = tensor(rng, (c, 3, 3), requires_grad=False)
    point = tensor(rng, (f, c), requires_grad=False)
    got = ad.depthwise_separable_conv2d(None, x, depth, point, 1, "same").data
    composed = np.einsum("fc,cab->fcab", point.data, depth.data)
    want = naive_conv2d(x.data, composed, np.zeros(f), 1, "same")
    assert np.abs(got - want).max() < 1e-10


def test_depthwise_parameter_count_advantage():
    c = f = 8
    k = 3
    separable = c * k * k + f * c
    full = f * c * k * k
    assert separable == 136 and full == 576 and separable < full


# -- Normalization, activations, pooling -------------------------------------

def test_batchnorm_standardizes_in_train_mode(rng):
    x = tensor(rng, (8, 3, 4, 4), requires_grad=False, scale=3.0)
    state = ad.BatchNormState(3, dtype=np.float64)
    out = ad.batchnorm2d(None, x, ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)), state, training=True)
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-10
    assert var == pytest.approx(np.ones(3), abs=2e-3)  # epsilon shrinks variance slightly


def test_batchnorm_affine_output(rng):
    x = tensor(rng, (16, 2, 5, 5), requires_grad=False)
    state = ad.BatchNormState(2, dtype=np.float64)
    out = ad.batchnorm2d(None, x, ad.Tensor(np.full(2, 2.0)), ad.Tensor(np.full(2, 3.0)), state, True)
    assert out.data.mean(axis=(0, 2, 3)) == pytest.approx(np.full(2, 3.0), abs=1e-9)
    assert out.data.std(axis=(0, 2, 3)) == pytest.approx(np.full(2, 2.0), abs=5e-3)


def test_batchnorm_eval_is_batch_size_independent(rng):
    state = ad.BatchNormState(2, dtype=np.float64)
    gamma, beta = ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2))
    ad.batchnorm2d(None, tensor(rng, (8, 2, 3, 3), requires_grad=False), gamma, beta, state, True)
    x_small = tensor(rng, (1, 2, 3, 3), requires_grad=False)
    x_large = ad.Tensor(np.concatenate([x_small.data] * 4))
    a = ad.batchnorm2d(None, x_small, gamma, beta, state, False)
    b = ad.batchnorm2d(None, x_large, gamma, beta, state, False)
    assert np.array_equal(a.data, b.data[:1])


def test_relu_clamps_and_zero_subgradient(rng):
    x = ad.Tensor(np.array([[-2.0, 0.0, 3.0]]), requires_grad=True)
    tape = ad.Tape()
    out = ad.relu(tape, x)
    assert np.array_equal(out.data, [[0.0, 0.0, 3.0]])
    tape.backward(out, seed=np.ones_like(out.data))
    assert np.array_equal(x.grad, [[0.0, 0.0, 1.0]])


def test_maxpool_constant_map_routes_to_first_index():
    x = ad.Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    tape = ad.Tape()
    out = ad.maxpool2d(tape, x, window=3, stride=2)
    assert np.all(out.data == 1.0)
    tape.backward(out, seed=np.ones_like(out.data))
    # ties break to the first window element in row-major scan
    assert x.grad[0, 0, 0, 0] == 1.0
    assert x.grad.sum() == out.data.size


def test_maxpool_window_too_large(rng):
    with pytest.raises(ad.ShapeError):
        ad.maxpool2d(None, tensor(rng, (1, 1, 2, 2)), window=3, stride=2)


def test_adaptive_pool_to_one_is_global_mean(rng):
    x = tensor(rng, (2, 3, 5, 7), requires_grad=False)
    out = ad.adaptive_avg_pool2d(None, x, 1, 1)
    assert out.data[:, :, 0, 0] == pytest.approx(x.data.mean(axis=(2, 3)))


def test_adaptive_pool_upsamples_small_maps(rng):
    out = ad.adaptive_avg_pool2d(None, tensor(rng, (1, 2, 3, 7)), 4, 4)
    assert out.shape == (1, 2, 4, 4)


# -- Loss ----------------------------------------------------------------

def test_uniform_logits_loss_is_log_k():
    logits = ad.Tensor(np.zeros((4, 5)))
    targets = np.eye(5)[[0, 1, 2, 3]]
    loss = ad.softmax_cross_entropy(None, logits, targets)
    assert float(loss.data) == pytest.approx(np.log(5.0), abs=1e-12)


def test_loss_decreases_with_logit_gap():
    losses = []
    for gap in (0.0, 10.0, 20.0):
        logits = np.zeros((1, 5))
        logits[0, 2] = gap
        loss = ad.softmax_cross_entropy(None, ad.Tensor(logits), np.eye(5)[[2]])
        losses.append(float(loss.data))
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-8


def test_loss_shift_invariance(rng):
    logits = rng.standard_normal((6, 5))
    targets = np.eye(5)[rng.integers(0, 5, 6)]
    a = ad.softmax_cross_entropy(None, ad.Tensor(logits), targets)
    b = ad.softmax_cross_entropy(None, ad.Tensor(logits + 123.0), targets)
    assert float(a.data) == pytest.approx(float(b.data), abs=1e-9)


def test_softmax_rows_sum_to_one(rng):
    probs = ad.softmax(rng.standard_normal((10, 5)) * 10)
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-12


def test_non_one_hot_target_rejected(rng):
    logits = ad.Tensor(rng.standard_normal((2, 5)))
    bad = np.full((2, 5), 0.2)
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(None, logits, bad)


# -- Gradient checks ----------------------------------------------------------------

def test_dense_grad_check(rng):
    inputs = [tensor(rng, (3, 4)), tensor(rng, (4, 5)), tensor(rng, (5,))]
    err = ad.grad_check(lambda tape, x, w, b: ad.dense(tape, x, w, b), inputs, rng=rng)
    assert err < 1e-6


def test_conv_grad_check(rng):
    inputs = [tensor(rng, (1, 2, 5, 5)), tensor(rng, (3, 2, 3, 3)), tensor(rng, (3,))]
    err = ad.grad_check(lambda tape, x, k, b: ad.conv2d(tape, x, k, b, 1, "same"), inputs, rng=rng)
    assert err < 1e-6


def test_batchnorm_train_grad_check(rng):
    inputs = [tensor(rng, (4, 3, 2, 2)), tensor(rng, (3,)), tensor(rng, (3,))]
    err = ad.grad_check(
        lambda tape, x, g, b: ad.batchnorm2d(tape, x, g, b, ad.BatchNormState(3, np.float64), True),
        inputs,
        rng=rng,
    )
    assert err < 1e-5


def test_cross_entropy_grad_check(rng):
    targets = np.eye(5)[rng.integers(0, 5, 4)]
    inputs = [tensor(rng, (4, 5))]
    err = ad.grad_check(lambda tape, x: ad.softmax_cross_entropy(tape, x, targets), inputs, rng=rng)
    assert err < 1e-6


def test_fan_out_gradients_accumulate(rng):
    x = tensor(rng, (3, 4))
    w = tensor(rng, (4, 4), requires_grad=False)
    b = ad.Tensor(np.zeros(4))
    tape = ad.Tape()
    only = ad.dense(tape, x, w, b)
    tape.backward(only, seed=np.ones_like(only.data))
    grad_once = x.grad.copy()
    x.zero_grad()

    # x consumed by two ops: both output grads are present when the walk
    # reaches their records, and x accumulates both contributions
    tape2 = ad.Tape()
    first = ad.dense(tape2, x, w, b)
    second = ad.dense(tape2, x, w, b)
    first.grad = np.ones_like(first.data)
    tape2.backward(second, seed=np.ones_like(second.data))
    assert x.grad == pytest.approx(2 * grad_once, rel=1e-6)


# -- Adam ----------------------------------------------------------------

def test_adam_first_step_magnitude(rng):
    grads = rng.standard_normal(100) * 5.0
    param = ad.Parameter(np.zeros(100), "p")
    param.tensor.grad = grads.copy()
    ad.adam_step([param], lr=1e-3)
    # with bias correction at t=1, each coordinate moves by ~lr
    assert np.abs(np.abs(param.data) - 1e-3).max() < 1e-5


def test_adam_zero_gradient_leaves_parameters(rng):
    param = ad.Parameter(rng.standard_normal(10), "p")
    before = param.data.copy()
    for _ in range(50):
        param.tensor.grad = np.zeros(10)
        ad.adam_step([param], lr=1e-2)
    assert np.array_equal(param.data, before)


def test_adam_lr_zero_is_identity(rng):
    param = ad.Parameter(rng.standard_normal(10), "p")
    before = param.data.copy()
    param.tensor.grad = rng.standard_normal(10)
    ad.adam_step([param], lr=0.0)
    assert np.array_equal(param.data, before)


def test_adam_converges_on_quadratic_bowl():
    param = ad.Parameter(np.array([1.0]), "theta")
    for _ in range(500):
        param.tensor.grad = 2.0 * param.data
        ad.adam_step([param], lr=1e-2)
        param.tensor.zero_grad()
    assert abs(float(param.data[0])) < 1e-3


# -- Infrastructure ----------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    arrays = {
        "layer0.kernels": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "layer0.bias": rng.standard_normal(4).astype(np.float32),
        "layer9.weights": rng.standard_normal((10, 5)).astype(np.float32),
    }
    path = tmp_path / "model.ymck"
    ad.save_checkpoint(path, arrays)
    assert path.read_bytes()[:4] == b"YMCK"
    loaded = ad.load_checkpoint(path)
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert np.array_equal(loaded[name], arrays[name])


def test_finite_check_hook(rng):
    x = ad.Tensor(np.array([[np.inf, 1.0]]))
    ad.set_debug_finite_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            ad.relu(None, x)
    finally:
        ad.set_debug_finite_checks(False)


def test_forward_determinism(rng):
    x = tensor(rng, (2, 3, 8, 8), requires_grad=False)
    k = tensor(rng, (4, 3, 3, 3), requires_grad=False)
    b = tensor(rng, (4,), requires_grad=False)
    a = ad.conv2d(None, x, k, b, 1, "same").data
    c = ad.conv2d(None, x, k, b, 1, "same").data
    assert np.array_equal(a, c)
