import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsm import functional as F
from stsm.autodiff import (
    BACKWARD_RULES,
    GradientSet,
    Tape,
    backward,
    finite_diff_check,
    loss_and_grads,
    sgd_step,
    softmax_cross_entropy,
    sum_loss,
)
from stsm.errors import ContractError
from stsm.graph import (
    LayerGraph,
    LayerSpec,
    NetworkConfig,
    ParamStore,
    _register,
    build_network,
    conv_layer,
    forward_network,
    linear_layer,
    preset,
    relu_layer,
    run_layers,
    stsm_layer,
)
from stsm.shift import apply_stsm, build_shift_spec, shift_adjoint, spec_from_text


def custom_graph(layers, in_ch, seed=0):
    store = ParamStore()
    _register(layers, in_ch, store, np.random.default_rng(seed))
    return LayerGraph(NetworkConfig(in_channels=in_ch), None, layers, store)


def head():
    return [LayerSpec("avgpool_hw", "pool_hw"), LayerSpec("avgpool_t", "pool_t")]


def grad_wrt_input(layers, x, store):
    tape = Tape()
    key = tape.input(x)
    out, _ = run_layers(layers, x, key, store, tape=tape)
    sum_loss(tape, out)
    return backward(tape, wrt_input=True).input


# ---------------------------------------------------------------- exact rules


def test_sum_of_identity_is_ones():
    x = np.random.default_rng(0).random((2, 3, 2, 4, 4))
    g = grad_wrt_input([], x, ParamStore())
    assert np.array_equal(g, np.ones_like(x))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["T", "H+W", "T+H+W", "T+HW", "TH+TW+HW"]), st.sampled_from(["1/4", "1/2", "1"]))
def test_sum_of_shift_is_adjoint_of_ones(pattern, f):
    x = np.random.default_rng(1).random((1, 12, 3, 4, 5))
    spec = spec_from_text(12, f"pattern={pattern} f={f}")
    g = grad_wrt_input([stsm_layer("s", spec)], x, ParamStore())
    assert np.array_equal(g, apply_stsm(np.ones_like(x), shift_adjoint(spec)))


def test_shift_backward_is_adjoint():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 16, 4, 5, 5))
    up = rng.standard_normal(x.shape)
    spec = build_shift_spec(16, "T+H+W", "3/8")
    tape = Tape()
    key = tape.input(x)
    out, _ = run_layers([stsm_layer("s", spec)], x, key, ParamStore(), tape=tape)
    rec = tape.records[-1]
    (dx,), _ = BACKWARD_RULES[rec.op](up, rec.saved)
    assert np.array_equal(dx, apply_stsm(up, shift_adjoint(spec)))
    lhs = float(np.sum(out * up))
    rhs = float(np.sum(x * dx))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_backward_needs_scalar_head():
    tape = Tape()
    key = tape.input(np.ones((1, 1, 1, 2, 2)))
    run_layers([LayerSpec("avgpool_hw", "p")], np.ones((1, 1, 1, 2, 2)), key, ParamStore(), tape=tape)
    with pytest.raises(ContractError):
        backward(tape)
    with pytest.raises(ContractError):
        backward(Tape())


def test_unknown_op_rejected():
    with pytest.raises(ContractError):
        Tape().push("softplus", (0,), np.zeros(1))


# ---------------------------------------------------------------- cross-entropy


def test_uniform_logits_give_log_k():
    for K in (2, 4, 7):
        loss = softmax_cross_entropy(np.zeros((3, K)), [0, 1, K - 1])
        assert abs(loss - math.log(K)) <= 1e-15


def test_confident_logits_near_zero():
    logits = np.zeros((1, 4))
    logits[0, 2] = 50.0
    assert softmax_cross_entropy(logits, [2]) <= 1e-20


def test_large_logits_stay_finite():
    logits = np.array([[1000.0, -1000.0, 0.0]])
    assert math.isfinite(softmax_cross_entropy(logits, [1]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 5))
def test_cross_entropy_matches_high_precision(seed, K, N):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((N, K)) * 5
    labels = rng.integers(0, K, N)
    mpmath.mp.dps = 40
    ref = mpmath.fsum(
        mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row)) - mpmath.mpf(row[y])
        for row, y in zip(logits, labels)
    ) / N
    got = softmax_cross_entropy(logits, labels)
    assert abs(got - float(ref)) <= 1e-12 * max(abs(float(ref)), 1e-300)


def test_cross_entropy_gradient_is_probs_minus_onehot():
    logits = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    _, cache = F.softmax_cross_entropy(logits, [2, 0])
    g = F.softmax_cross_entropy_backward(1.0, cache)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    p[[0, 1], [2, 0]] -= 1
    np.testing.assert_allclose(g, p / 2, rtol=0, atol=1e-15)


def test_cross_entropy_bad_labels():
    with pytest.raises(ContractError):
        softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ContractError):
        softmax_cross_entropy(np.zeros((2, 3)), [0])


# ---------------------------------------------------------------- sgd


def one_param_store(value):
    store = ParamStore()
    store.tensors["w"] = {"weight": np.array([float(value)])}
    return store


def grads_of(g):
    return GradientSet(params={"w": {"weight": np.array([float(g)])}})


def test_sgd_single_step():
    store = one_param_store(1.0)
    sgd_step(store, grads_of(0.5), lr=0.1, momentum=0.9, weight_decay=0.0)
    assert store.tensors["w"]["weight"][0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_weight_decay_only():
    store = one_param_store(2.0)
    sgd_step(store, grads_of(0.0), lr=0.5, momentum=0.0, weight_decay=0.1)
    assert store.tensors["w"]["weight"][0] == pytest.approx(1.9, abs=1e-15)


def test_sgd_momentum_recurrence():
    store = one_param_store(0.0)
    sgd_step(store, grads_of(1.0), lr=0.1, momentum=0.9, weight_decay=0.0)
    sgd_step(store, grads_of(1.0), lr=0.1, momentum=0.9, weight_decay=0.0)
    # v1 = 1, v2 = 0.9 + 1 = 1.9; p = -0.1 - 0.19
    assert store.tensors["w"]["weight"][0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_zero_lr_is_noop():
    graph = build_network(preset("micro"), "pattern=T f=1/2")
    before = graph.params.copy()
    x = np.random.default_rng(0).random((2, 1, 2, 6, 6))
    _, grads = loss_and_grads(graph, x, [0, 1])
    sgd_step(graph.params, grads, lr=0.0)
    for layer, pname, v in before.items():
        assert np.array_equal(graph.params.tensors[layer][pname], v)


def test_sgd_shape_mismatch():
    with pytest.raises(ContractError):
        sgd_step(one_param_store(1.0), GradientSet(params={"w": {"weight": np.zeros(2)}}), lr=0.1)


# ---------------------------------------------------------------- finite differences


def test_fd_linear_network_tight():
    layers = head() + [linear_layer("fc", 3)]
    graph = custom_graph(layers, 4, seed=1)
    x = np.random.default_rng(1).standard_normal((2, 4, 3, 2, 2))
    report = finite_diff_check(graph, x, loss="sum", tolerance=1e-9)
    assert report.passed, report.summary()
    assert report.checked["fc.weight"] == 12 and report.checked["fc.bias"] == 3


def test_fd_excludes_relu_kink():
    # a 1x1 conv with zero bias feeds relu; one pre-activation sits exactly at 0
    layers = [conv_layer("conv", 1, 1, bias=True), relu_layer("relu")] + head() + [linear_layer("fc", 1)]
    graph = custom_graph(layers, 1, seed=0)
    graph.params.tensors["conv"]["weight"][...] = 1.0
    graph.params.tensors["fc"]["weight"][...] = 1.0
    x = np.array([0.0, 1.0, -1.0, 2.0]).reshape(1, 1, 1, 2, 2)
    report = finite_diff_check(graph, x, loss="sum", params=[("conv", "bias")], tolerance=1e-9)
    assert report.excluded["conv.bias"] == 1 and report.checked["conv.bias"] == 0


def test_fd_micro_network_with_shift():
    graph = build_network(preset("micro", base_channels=8), "pattern=T+H+W f=3/4", seed=3)
    rng = np.random.default_rng(3)
    x = rng.random((2, 1, 3, 5, 5))
    report = finite_diff_check(graph, x, labels=[1, 3], tolerance=1e-4)
    assert report.passed, report.summary()
    assert sum(report.checked.values()) > 0.9 * graph.params.count()


def test_fd_eval_mode():
    graph = build_network(preset("micro"), "pattern=T+W f=1/2", seed=5)
    x = np.random.default_rng(5).random((2, 1, 2, 4, 4))
    report = finite_diff_check(graph, x, labels=[0, 2], train=False,
                               params=[("layer1.0.conv1", "weight"), ("layer1.0.bn2", "weight")])
    assert report.passed, report.summary()


def test_fd_leaves_params_and_stats_unchanged():
    graph = build_network(preset("micro"), "pattern=T f=1/2", seed=6)
    before = graph.params.copy()
    x = np.random.default_rng(6).random((2, 1, 2, 4, 4))
    finite_diff_check(graph, x, labels=[0, 1], params=[("stem.conv", "weight")])
    for layer, pname, v in before.items():
        assert np.array_equal(graph.params.tensors[layer][pname], v)
    for layer, bufs in before.buffers.items():
        for k, v in bufs.items():
            assert np.array_equal(graph.params.buffers[layer][k], v)


def test_fd_needs_labels():
    graph = build_network(preset("micro"))
    with pytest.raises(ContractError):
        finite_diff_check(graph, np.zeros((1, 1, 1, 4, 4)))


# ---------------------------------------------------------------- training signal


def test_loss_decreases_on_fixed_batch():
    from stsm.data import MotionTask, generate_batch, stack

    task = MotionTask(frames=8, height=32, width=32)
    x, y = stack(generate_batch(task, 32, seed=0))
    graph = build_network(preset("tiny"), "pattern=T+H+W f=3/8", seed=0)
    first, _ = loss_and_grads(graph, x, y)
    for _ in range(50):
        _, grads = loss_and_grads(graph, x, y)
        sgd_step(graph.params, grads, lr=0.01)
    last, _ = loss_and_grads(graph, x, y)
    assert last <= 0.5 * first, (first, last)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 1, 0), (1, 1, 0), (7, 1, 3), (3, 2, 1), (1, 2, 0), (7, 2, 3)])
def test_conv_backward_matches_central_differences(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride + pad)
    x = rng.standard_normal((2, 3, 2, 7, 7))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out, cache = F.conv2d(x, w, b, stride, pad)
    up = rng.standard_normal(out.shape)
    dx, dw, db = F.conv2d_backward(up, cache)
    loss = lambda xx, ww, bb: float(np.sum(F.conv2d(xx, ww, bb, stride, pad)[0] * up))
    h = 1e-6
    # the loss is linear in each argument, so central differences are exact up to round-off
    for arr, grad in ((x, dx), (w, dw), (b, db)):
        for idx in list(np.ndindex(arr.shape))[:: max(1, arr.size // 40)]:
            orig = arr[idx]
            arr[idx] = orig + h
            plus = loss(x, w, b)
            arr[idx] = orig - h
            minus = loss(x, w, b)
            arr[idx] = orig
            assert abs((plus - minus) / (2 * h) - grad[idx]) <= 1e-6 * max(1.0, abs(grad[idx]))
