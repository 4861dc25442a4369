import numpy as np
import pytest

from epcnet import nnet
from epcnet.errors import TrainingDivergenceError
from epcnet.nnet import (
    AdamState,
    BN_EPS,
    HIDDEN_KIND,
    LayerSpec,
    OUTPUT_KIND,
    adam_step,
    backward,
    forward,
    grad_arrays,
    init_network,
    load_model,
    make_specs,
    save_model,
)


def small_net(seed=0, counts=(9, 16, 8, 3)):
    return init_network(make_specs(counts), np.random.default_rng(seed))


def test_make_specs_shape_and_kinds():
    specs = make_specs((9, 16, 8, 3))
    assert [s.kind for s in specs] == [HIDDEN_KIND, HIDDEN_KIND, OUTPUT_KIND]
    assert [(s.in_dim, s.out_dim) for s in specs] == [(9, 16), (16, 8), (8, 3)]
    with pytest.raises(ValueError):
        make_specs((5,))
    with pytest.raises(ValueError):
        LayerSpec(0, 4, HIDDEN_KIND)
    with pytest.raises(ValueError):
        LayerSpec(2, 2, "tanh")


def test_init_xavier_bound_and_bn_defaults():
    params = small_net()
    first = params.layers[0]
    bound = np.sqrt(6.0 / (9 + 16))
    assert bound == pytest.approx(0.4899, abs=1e-4)
    assert np.max(np.abs(first.weight)) <= bound
    assert np.all(first.bias == 0.0)
    assert np.all(first.bn_scale == 1.0)
    assert np.all(first.bn_shift == 0.0)
    assert np.all(first.bn_running_mean == 0.0)
    assert np.all(first.bn_running_var == 1.0)
    assert params.layers[-1].bn_scale is None


def test_init_determinism():
    a, b = small_net(3), small_net(3)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weight, lb.weight)


def test_forward_zero_output_layer_gives_half():
    params = small_net()
    params.layers[-1].weight[:] = 0.0
    params.layers[-1].bias[:] = 0.0
    out = forward(params, np.random.default_rng(1).standard_normal((5, 9)))
    assert np.all(out == 0.5)


def test_forward_inference_deterministic():
    params = small_net()
    x = np.random.default_rng(2).standard_normal((4, 9))
    assert np.array_equal(forward(params, x), forward(params, x))


def test_forward_batch_one_train_rejected():
    params = small_net()
    with pytest.raises(ValueError):
        forward(params, np.zeros((1, 9)), mode="train")
    with pytest.raises(ValueError):
        forward(params, np.zeros((4, 7)))
    with pytest.raises(ValueError):
        forward(params, np.zeros((4, 9)), mode="predict")


def test_forward_output_strictly_inside_unit_interval():
    params = small_net()
    # saturate the sigmoid hard
    params.layers[-1].weight[:] = 0.0
    params.layers[-1].bias[:] = 500.0
    out = forward(params, np.random.default_rng(0).standard_normal((6, 9)))
    assert np.all(out < 1.0) and np.all(out > 0.0)
    params.layers[-1].bias[:] = -500.0
    out = forward(params, np.random.default_rng(0).standard_normal((6, 9)))
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_bn_bypass_reproduces_plain_affine_relu():
    # On a fixed batch, setting scale = sqrt(var + eps) and shift = mean
    # algebraically cancels the normalization.
    params = init_network(make_specs((4, 6, 2)), np.random.default_rng(5))
    x = np.random.default_rng(6).standard_normal((32, 4))
    layer = params.layers[0]
    z = x @ layer.weight.T + layer.bias
    mean, var = z.mean(axis=0), z.var(axis=0)
    layer.bn_scale[:] = np.sqrt(var + BN_EPS)
    layer.bn_shift[:] = mean
    out, cache = forward(params, x, mode="train")
    plain = np.maximum(z, 0.0)
    assert cache.post[0] == pytest.approx(plain, abs=1e-6)


def test_bn_train_mode_normalizes_batch():
    params = init_network(make_specs((6, 12, 2)), np.random.default_rng(7))
    x = 3.0 + 2.5 * np.random.default_rng(8).standard_normal((512, 6))
    _, cache = forward(params, x, mode="train")
    xhat = cache.xhats[0]
    assert np.all(np.abs(xhat.mean(axis=0)) <= 1e-6)
    assert np.all(np.abs(xhat.var(axis=0) - 1.0) <= 1e-4)


def test_running_stats_converge_to_batch_stats():
    # The exponential average keeps O(sqrt((1-m)/2) * batch-std) noise
    # around the stationary statistics; batch 1024 puts 1% at ~3 sigma.
    params = init_network(make_specs((5, 8, 2)), np.random.default_rng(9))
    rng = np.random.default_rng(10)
    layer = params.layers[0]
    means, variances = [], []
    for _ in range(1000):
        x = 1.0 + 0.5 * rng.standard_normal((1024, 5))
        _, _ = forward(params, x, mode="train")
        z = x @ layer.weight.T + layer.bias
        means.append(z.mean(axis=0))
        variances.append(z.var(axis=0))
    avg_mean = np.mean(means, axis=0)
    avg_var = np.mean(variances, axis=0)
    scale = np.sqrt(avg_var)
    assert np.all(np.abs(layer.bn_running_mean - avg_mean) <= 0.01 * scale)
    assert layer.bn_running_var == pytest.approx(avg_var, rel=0.01)


def _linear_probe_loss(params, x, coeffs):
    """Scalar loss sum(out * coeffs) with mean kept out; exercises every
    gradient path through the network."""
    out, cache = forward(params, x, mode="train")
    return float((out * coeffs).sum()), cache, coeffs


def test_backward_matches_finite_differences():
    params = small_net(11)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((8, 9))
    coeffs = rng.standard_normal((8, 3))
    loss, cache, _ = _linear_probe_loss(params, x, coeffs)
    grads = backward(params, cache, coeffs)
    h = 1e-5
    for arr, g in zip(params.trainable_arrays(), grad_arrays(grads)):
        flat, gflat = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _, _ = _linear_probe_loss(params, x, coeffs)
            flat[i] = orig - h
            lm, _, _ = _linear_probe_loss(params, x, coeffs)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            err = abs(fd - gflat[i])
            assert err <= 1e-4 * max(abs(fd), abs(gflat[i])) or err <= 1e-9, (
                f"param {i}: analytic {gflat[i]} vs fd {fd}"
            )


def test_backward_zero_upstream_gives_zero_grads():
    params = small_net(13)
    x = np.random.default_rng(14).standard_normal((6, 9))
    _, cache = forward(params, x, mode="train")
    grads = backward(params, cache, np.zeros((6, 3)))
    for g in grad_arrays(grads):
        assert np.all(g == 0.0)


def test_backward_mean_loss_invariant_to_row_duplication():
    params = small_net(15)
    rng = np.random.default_rng(16)
    x = rng.standard_normal((8, 9))
    coeffs = rng.standard_normal((8, 3))

    def mean_grads(xb, cb):
        out, cache = forward(params, xb, mode="train")
        return backward(params, cache, cb / xb.shape[0])

    g1 = mean_grads(x, coeffs)
    g2 = mean_grads(np.vstack([x, x]), np.vstack([coeffs, coeffs]))
    for a, b in zip(grad_arrays(g1), grad_arrays(g2)):
        assert a == pytest.approx(b, abs=1e-9)


def test_backward_shape_mismatch():
    params = small_net()
    x = np.random.default_rng(0).standard_normal((4, 9))
    _, cache = forward(params, x, mode="train")
    with pytest.raises(ValueError):
        backward(params, cache, np.zeros((4, 5)))


def zero_grads_like(params):
    out, cache = forward(
        params, np.random.default_rng(0).standard_normal((2, params.in_dim)),
        mode="train",
    )
    return backward(params, cache, np.zeros_like(out))


def test_adam_zero_gradients_freeze_params():
    params = small_net(17)
    before = [a.copy() for a in params.trainable_arrays()]
    state = AdamState.init(params)
    adam_step(params, zero_grads_like(params), state)
    assert state.step == 1
    for a, b in zip(params.trainable_arrays(), before):
        assert np.array_equal(a, b)


def test_adam_first_step_size():
    params = small_net(18)
    grads = zero_grads_like(params)
    for g in grad_arrays(grads):
        g[:] = 1.0
    before = [a.copy() for a in params.trainable_arrays()]
    adam_step(params, grads, AdamState.init(params, lr=1e-3))
    # bias-corrected first step is -lr * g / (|g| + eps)
    for a, b in zip(params.trainable_arrays(), before):
        assert a - b == pytest.approx(-1e-3, rel=1e-6)


def test_adam_determinism():
    results = []
    for _ in range(2):
        params = small_net(19)
        grads = zero_grads_like(params)
        rng = np.random.default_rng(20)
        for g in grad_arrays(grads):
            g[:] = rng.standard_normal(g.shape)
        state = AdamState.init(params)
        adam_step(params, grads, state)
        adam_step(params, grads, state)
        results.append([a.copy() for a in params.trainable_arrays()])
    for a, b in zip(*results):
        assert np.array_equal(a, b)


def test_adam_rejects_non_finite_gradients():
    params = small_net(21)
    grads = zero_grads_like(params)
    grad_arrays(grads)[0][0] = np.nan
    with pytest.raises(TrainingDivergenceError):
        adam_step(params, grads, AdamState.init(params))


def test_model_file_roundtrip(tmp_path):
    params = small_net(22)
    # push the running stats off their init to make the check meaningful
    forward(params, np.random.default_rng(23).standard_normal((64, 9)), mode="train")
    meta = {"task": "srm", "config_hash": "abc123"}
    path = tmp_path / "net.model"
    save_model(path, params, meta)
    loaded, loaded_meta = load_model(path)
    assert loaded_meta == meta
    x = np.random.default_rng(24).standard_normal((7, 9))
    assert np.array_equal(forward(params, x), forward(loaded, x))
    # save(load(file)) is byte-identical
    path2 = tmp_path / "net2.model"
    save_model(path2, loaded, loaded_meta)
    assert path.read_bytes() == path2.read_bytes()


def test_model_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.model"
    path.write_bytes(b"garbage")
    with pytest.raises(ValueError):
        load_model(path)
