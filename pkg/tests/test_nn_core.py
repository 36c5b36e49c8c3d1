import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference
from snmappo.errors import ConfigError, EnvInvariantError, UsageError
from snmappo.nn_core import (
    MLP,
    Adam,
    Dense,
    FrameStackPolicy,
    GRUCell,
    Parameter,
    RecurrentPolicy,
    clip_global_norm,
    finite_diff_check,
    global_norm,
    masked_categorical,
    masked_log_probs,
    orthogonal_init,
    relative_error,
    sample_categorical,
)


def sq_loss(target):
    def loss(out):
        d = out - target
        return float(np.sum(d * d)), 2 * d

    return loss


@pytest.mark.parametrize("seed", range(5))
def test_mlp_finite_difference(seed):
    rng = np.random.default_rng(seed)
    net = MLP.build([5, 7, 6, 2], rng)
    x = rng.standard_normal((4, 5))
    res = finite_diff_check(net, x, sq_loss(rng.standard_normal((4, 2))))
    assert res.reliable
    assert res.max_rel_error < 1e-4


def test_tanh_mlp_finite_difference():
    rng = np.random.default_rng(3)
    net = MLP.build([3, 4, 1], rng, hidden_activation="tanh")
    res = finite_diff_check(net, rng.standard_normal((5, 3)), sq_loss(np.zeros((5, 1))))
    assert res.reliable and res.max_rel_error < 1e-5


def test_input_gradient_matches_central_difference():
    rng = np.random.default_rng(0)
    net = MLP.build([4, 8, 3], rng, hidden_activation="tanh")
    x = rng.standard_normal((2, 4))
    c = rng.standard_normal((2, 3))
    net.zero_grad()
    net.forward(x)
    dx = net.backward(c)
    num = central_difference(lambda: float(np.sum(net.forward(x) * c)), x)
    assert relative_error(dx, num) < 1e-7


def test_identity_dense_output():
    layer = Dense.from_arrays(np.eye(3))
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(layer.forward(x), x)


def test_relu_backward_zero_at_negative_preactivation():
    layer = Dense.from_arrays(np.array([[1.0]]), activation="relu")
    layer.forward(np.array([[-1.0]]))
    dx = layer.backward(np.array([[1.0]]))
    assert dx[0, 0] == 0.0 and layer.weight.grad[0, 0] == 0.0


def test_backward_without_forward_raises():
    layer = Dense(2, 2, "relu", rng=np.random.default_rng(0))
    with pytest.raises(UsageError):
        layer.backward(np.ones((1, 2)))


def test_width_mismatch_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        MLP([Dense(3, 4, "relu", rng=rng), Dense(5, 1, "identity", rng=rng)])


def test_kink_input_reported_unreliable():
    net = MLP([Dense.from_arrays(np.array([[1.0, -1.0]]), np.zeros(1), "relu"),
               Dense.from_arrays(np.array([[2.0]]), None)])
    res = finite_diff_check(net, np.array([[1.0, 1.0]]), sq_loss(np.zeros((1, 1))))
    assert not res.reliable and np.isnan(res.max_rel_error)


def test_epsilon_out_of_range_rejected():
    net = MLP.build([2, 2], np.random.default_rng(0))
    with pytest.raises(ConfigError):
        finite_diff_check(net, np.ones((1, 2)), sq_loss(np.zeros((1, 2))), epsilon=1e-9)


def test_orthogonal_init_is_orthogonal():
    w = orthogonal_init(6, 4, gain=2.0, rng=np.random.default_rng(0))
    assert np.allclose(w.T @ w, 4.0 * np.eye(4))


def gru_loss(cell, xs, h0, resets, c):
    hs = cell.forward_sequence(xs, h0, resets)
    cell.clear()
    return float(np.sum(hs * c))


@pytest.mark.parametrize("seed", range(4))
def test_gru_bptt_matches_finite_difference(seed):
    rng = np.random.default_rng(seed)
    T, B, D, H = 5, 3, 4, 6
    cell = GRUCell(D, H, rng=rng)
    xs = rng.standard_normal((T, B, D))
    h0 = rng.standard_normal((B, H)) * 0.5
    resets = rng.random((T, B)) < 0.3
    c = rng.standard_normal((T, B, H))
    for p in cell.parameters():
        p.zero_grad()
    cell.forward_sequence(xs, h0, resets)
    cell.backward_sequence(c)
    for p in cell.parameters():
        num = central_difference(lambda: gru_loss(cell, xs, h0, resets, c), p.data)
        assert relative_error(p.grad, num) < 1e-6, p.name


def test_gru_reset_zeroes_state():
    rng = np.random.default_rng(0)
    cell = GRUCell(2, 3, rng=rng)
    xs = rng.standard_normal((2, 1, 2))
    h0 = np.ones((1, 3))
    with_reset = cell.forward_sequence(xs, h0, np.array([[True], [False]]))
    cell.clear()
    fresh = cell.forward_sequence(xs, np.zeros((1, 3)), np.array([[False], [False]]))
    assert np.allclose(with_reset, fresh)


def test_gru_step_matches_sequence():
    rng = np.random.default_rng(1)
    cell = GRUCell(3, 4, rng=rng)
    xs = rng.standard_normal((4, 2, 3))
    hs = cell.forward_sequence(xs, np.zeros((2, 4)), np.zeros((4, 2), dtype=bool))
    h = np.zeros((2, 4))
    for t in range(4):
        h = cell.step(xs[t], h, record=False)
    assert np.allclose(h, hs[-1])


@pytest.mark.parametrize("policy_cls", [RecurrentPolicy, FrameStackPolicy])
def test_policy_sequence_gradient(policy_cls):
    rng = np.random.default_rng(0)
    pol = policy_cls(5, 4, hidden=6, rng=rng, activation="tanh")
    obs = rng.standard_normal((4, 2, 5))
    state0 = rng.standard_normal(pol.initial_state(2).shape) * 0.3
    resets = np.array([[False, False], [False, True], [False, False], [True, False]])
    c = rng.standard_normal((4, 2, 4))

    def f():
        out = pol.forward_sequence(obs, state0, resets)
        pol.backward_sequence(np.zeros_like(out))
        return float(np.sum(out * c))

    pol.zero_grad()
    pol.forward_sequence(obs, state0, resets)
    pol.backward_sequence(c)
    for p in pol.parameters():
        analytic = p.grad.copy()
        num = central_difference(f, p.data)
        assert relative_error(analytic, num) < 1e-6, p.name


@pytest.mark.parametrize("policy_cls", [RecurrentPolicy, FrameStackPolicy])
def test_policy_step_matches_sequence(policy_cls):
    rng = np.random.default_rng(2)
    pol = policy_cls(3, 5, hidden=4, rng=rng)
    obs = rng.standard_normal((3, 2, 3))
    resets = np.zeros((3, 2), dtype=bool)
    seq = pol.forward_sequence(obs, pol.initial_state(2), resets)
    pol.backward_sequence(np.zeros_like(seq))
    state = pol.initial_state(2)
    for t in range(3):
        logits, state = pol.step(obs[t], state)
        assert np.allclose(logits, seq[t])


def test_masked_categorical_zero_on_illegal():
    logits = np.array([[1.0, 2.0, 3.0]])
    mask = np.array([[True, False, True]])
    p = masked_categorical(logits, mask)
    assert p[0, 1] == 0.0
    assert np.isclose(p.sum(), 1.0)
    assert np.allclose(np.exp(masked_log_probs(logits, mask))[mask], p[mask])


def test_all_masked_raises():
    with pytest.raises(EnvInvariantError):
        masked_categorical(np.zeros((1, 3)), np.zeros((1, 3), dtype=bool))


def test_sampling_respects_mask_and_frequencies():
    rng = np.random.default_rng(0)
    mask = np.array([[True, False, True, True, False, True]])
    p = masked_categorical(np.zeros((1, 6)), mask)
    counts = np.zeros(6)
    n = 100_000
    draws = sample_categorical(np.repeat(p, n, axis=0), rng)
    np.add.at(counts, draws, 1)
    assert counts[1] == 0 and counts[4] == 0
    expected = n / 4
    sd = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts[mask[0]] - expected) < 3 * sd)


def test_adam_first_step_is_lr_times_sign():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    opt = Adam([p], lr=0.1)
    p.grad[:] = [0.5, -4.0, 0.0]
    opt.step()
    assert np.allclose(p.data, [0.9, -1.9, 3.0])


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal(4))
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    opt = Adam([p], lr=1e-2)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p.grad[:] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.data, ref, rtol=1e-12, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0.1, 50.0))
def test_clip_global_norm_properties(values, max_norm):
    grads = [np.array(values, dtype=np.float64)]
    before = global_norm(grads)
    _, pre = clip_global_norm(grads, max_norm)
    assert pre == pytest.approx(before)
    after = global_norm(grads)
    assert after <= max_norm * (1 + 1e-9)
    if before <= max_norm:
        assert np.array_equal(grads[0], np.array(values))
    snapshot = grads[0].copy()
    clip_global_norm(grads, max_norm)
    assert np.array_equal(grads[0], snapshot)


def test_clip_rejects_nonpositive_norm():
    with pytest.raises(ConfigError):
        clip_global_norm([np.ones(2)], 0.0)
