import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unfoldhbf.channel import SystemDims, generate_dataset, optimal_digital_precoder
from unfoldhbf.mannet import (Adam, Problem, TrainConfig, TrainingDiverged, UnfoldedNet, backward,
                              compute_u, fc_hbf_design, forward, layer_weights, loss, model_read,
                              model_write, psi, psi_grad, select_t, train)
from unfoldhbf.precoding import StructuredB, ls_digital, realify, residual_objective
from conftest import crandn, unit_phases


def _problem(rng, n_tx=8, n_rf=2, n_s=2, k=4, batch=1):
    f_opt = crandn(rng, batch, k, n_tx, n_s)
    f_bb = crandn(rng, batch, k, n_rf, n_s)
    return Problem.from_precoders(f_opt, f_bb), f_opt, f_bb


def test_psi_examples():
    assert psi(np.array(0.0), 0.3) == 0.0
    assert psi(np.array(0.25), 0.5) == pytest.approx(0.5)
    np.testing.assert_array_equal(psi(np.array([0.5, 3.0, -0.5, -7.0]), 0.5), [1, 1, -1, -1])
    with pytest.raises(ValueError):
        psi(np.zeros(2), 0.0)


@given(st.floats(-10, 10), st.floats(0.01, 5))
def test_psi_range_and_linear_region(x, t):
    y = float(psi(np.array(x), t))
    assert -1 <= y <= 1
    if abs(x) <= t:
        assert y == pytest.approx(x / t, abs=1e-12)


def test_psi_grad_kink_convention():
    np.testing.assert_array_equal(psi_grad(np.array([-0.5, 0.0, 0.5, 0.49]), 0.5), [0, 2, 0, 2])


def test_unfolded_net_validation():
    with pytest.raises(ValueError):
        UnfoldedNet(np.zeros((1, 2, 8)), 0.5, 2, 2)
    with pytest.raises(ValueError):
        UnfoldedNet(np.zeros((3, 2, 8)), 0.0, 2, 2)
    with pytest.raises(ValueError):
        UnfoldedNet(np.full((3, 2, 8), np.nan), 0.5, 2, 2)
    with pytest.raises(ValueError):
        UnfoldedNet(np.zeros((3, 2, 7)), 0.5, 2, 2)


def test_compute_u_examples(rng):
    prob, f_opt, f_bb = _problem(rng, 4, 2, 2, 3)
    np.testing.assert_allclose(prob.compute_u(np.zeros_like(prob.z_bar)), -prob.z_bar)
    x = rng.standard_normal(prob.z_bar.shape)
    zero = Problem(np.zeros_like(prob.z_bar), np.zeros_like(prob.gram), np.zeros(1), 3, 4)
    np.testing.assert_array_equal(zero.compute_u(x), 0)
    dense = sum(StructuredB(f, 4).to_dense() for f in f_bb[0])
    dense_bbar = sum(StructuredB(f, 4).to_dense().T @ StructuredB(f, 4).to_dense() for f in f_bb[0])
    z = realify(f_opt[0])
    z_bar = sum(StructuredB(f, 4).to_dense().T @ zk for f, zk in zip(f_bb[0], z))
    np.testing.assert_allclose(prob.compute_u(x)[0], -z_bar + dense_bbar @ x[0], atol=1e-10)
    np.testing.assert_allclose(compute_u(x, prob.z_bar, prob.gram, 4), prob.compute_u(x))
    assert dense.shape == (16, 16)


def test_problem_objective_matches_residual(rng):
    prob, f_opt, f_bb = _problem(rng, 6, 2, 1, 3)
    f_rf = unit_phases(rng, 6, 2)
    assert prob.objective(realify(f_rf))[0] == pytest.approx(residual_objective(f_opt[0], f_rf, f_bb[0]))


def test_forward_zero_weights(rng):
    prob, *_ = _problem(rng)
    trace = forward(UnfoldedNet(np.zeros((3, 2, 32)), 0.5, 8, 2), prob)
    assert all(not x.any() for x in trace.xs)


def test_forward_first_layer_passes_z_bar(rng):
    # w_1,1 = 0, w_1,2 = -1, B_bar = 0 -> x_1 = psi(z_bar)
    prob, *_ = _problem(rng)
    prob.gram[:] = 0
    w = np.zeros((2, 2, 32))
    w[0, 1] = -1.0
    trace = forward(UnfoldedNet(w, 0.5, 8, 2), prob)
    np.testing.assert_allclose(trace.xs[1], psi(prob.z_bar, 0.5))


def test_forward_locality(rng):
    prob, *_ = _problem(rng)
    net = UnfoldedNet.random(3, 8, 2, 0.5, 0.5, rng)
    base = forward(net, prob)
    net2 = UnfoldedNet(net.weights.copy(), 0.5, 8, 2)
    net2.weights[1, 0, 5] += 0.3
    out = forward(net2, prob)
    hat_change = out.x_hats[1] - base.x_hats[1]
    assert np.count_nonzero(hat_change) <= 1 and np.all(np.delete(hat_change, 5, axis=-1) == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 2.0))
def test_forward_range_invariant(seed, t):
    rng = np.random.default_rng(seed)
    prob, *_ = _problem(rng, batch=2)
    trace = forward(UnfoldedNet.random(4, 8, 2, t, 1.0, rng), prob)
    for x in trace.xs:
        assert np.all(np.abs(x) <= 1.0)
        from unfoldhbf.precoding import derealify
        assert np.all(np.abs(derealify(x, 8, 2)) <= np.sqrt(2) + 1e-12)


def test_loss_layer_weights():
    np.testing.assert_array_equal(layer_weights(1), [0.0])
    np.testing.assert_allclose(layer_weights(3), np.log([1, 2, 3]))


def test_loss_two_layer_hand_value(rng):
    prob, f_opt, f_bb = _problem(rng, 4, 2, 2, 3)
    net = UnfoldedNet.random(2, 4, 2, 0.5, 0.3, rng)
    trace = forward(net, prob)
    x2 = trace.xs[2][0]
    bs = [StructuredB(f, 4) for f in f_bb[0]]
    z = realify(f_opt[0])
    hand = np.log(2) / 3 * sum(np.sum((zk - b.matvec(x2)) ** 2) for zk, b in zip(z, bs))
    assert loss(trace, prob) == pytest.approx(hand, rel=1e-12)


def test_loss_zero_for_exact_factorization(rng):
    # F_opt = F_RF F_BB with F_RF realized by the outputs -> z = B x at every layer
    f_bb = crandn(rng, 1, 2, 2, 2)
    prob = Problem(np.zeros((1, 16)), np.zeros((1, 2, 2)), np.zeros(1), 2, 4)
    net = UnfoldedNet.random(3, 4, 2, 0.5, 0.3, rng)
    assert loss(forward(net, prob), prob) == 0.0
    assert f_bb.shape == (1, 2, 2, 2)


def test_loss_permutation_invariant_over_subcarriers(rng):
    prob, f_opt, f_bb = _problem(rng, 4, 2, 2, 5)
    perm = rng.permutation(5)
    prob2 = Problem.from_precoders(f_opt[:, perm], f_bb[:, perm])
    net = UnfoldedNet.random(3, 4, 2, 0.5, 0.3, rng)
    assert loss(forward(net, prob), prob) == pytest.approx(loss(forward(net, prob2), prob2), rel=1e-12)


def test_loss_with_zero_problem_is_weighted_energy(rng):
    f_opt = crandn(rng, 1, 3, 4, 2)
    prob = Problem.from_precoders(f_opt, np.zeros((1, 3, 2, 2)))
    net = UnfoldedNet.random(3, 4, 2, 0.5, 0.3, rng)
    trace = forward(net, prob)
    assert not trace.output.any()
    expected = np.sum(np.log([1, 2, 3])) / 3 * np.sum(np.abs(f_opt) ** 2)
    assert loss(trace, prob) == pytest.approx(expected, rel=1e-12)


def _fd_check(seed, mask=None):
    rng = np.random.default_rng(seed)
    prob, *_ = _problem(rng, 8, 2, 2, 4, batch=2)
    net = UnfoldedNet.random(3, 8, 2, 0.5, 0.1, rng)
    trace = forward(net, prob, mask)
    g = backward(trace, net, prob)
    h = 1e-5
    floor = 1e-3 * np.max(np.abs(g))   # components below the difference quotient's resolution
    worst = 0.0
    for idx in np.ndindex(net.weights.shape):
        wp, wm = net.weights.copy(), net.weights.copy()
        wp[idx] += h
        wm[idx] -= h
        tp = forward(UnfoldedNet(wp, 0.5, 8, 2), prob, mask)
        tm = forward(UnfoldedNet(wm, 0.5, 8, 2), prob, mask)
        near_kink = any(np.any(np.abs(np.abs(xh) - 0.5) < 1e-3) for xh in tp.x_hats + tm.x_hats + trace.x_hats)
        if near_kink:
            continue
        fd = (loss(tp, prob) - loss(tm, prob)) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), floor))
    return worst, g


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    worst, _ = _fd_check(seed)
    assert worst < 1e-5


def test_backward_masked_dead_coordinates(rng):
    c = np.zeros((8, 2))
    c[:4, 0] = 1
    c[4:, 1] = 1
    mask = realify(c + 1j * c)
    worst, g = _fd_check(7, mask)
    assert worst < 1e-5
    assert np.all(g[:, :, mask == 0] == 0)


def test_backward_saturated_gives_zero_upstream(rng):
    prob, *_ = _problem(rng, 4, 2, 2, 2)
    w = np.full((2, 2, 16), 1e6)
    net = UnfoldedNet(w, 0.5, 4, 2)
    trace = forward(net, prob)
    assert all(np.all(np.abs(xh[:, :]) > 0.5) for xh in trace.x_hats[1:])
    g = backward(trace, net, prob)
    assert not g[1].any()


def test_backward_zero_weights_closed_form():
    # N_t = N_RF = N_s = 1, K = 1: two real coordinates
    f_opt = np.array([[[[0.8 - 0.6j]]]])
    f_bb = np.array([[[[1.5 + 0.5j]]]])
    prob = Problem.from_precoders(f_opt, f_bb)
    t = 0.5
    net = UnfoldedNet(np.zeros((2, 2, 2)), t, 1, 1)
    g = backward(forward(net, prob), net, prob)
    z_bar = prob.z_bar[0]
    for layer in range(2):
        np.testing.assert_allclose(g[layer, 0], 0.0)
        np.testing.assert_allclose(g[layer, 1], 2 * np.log(layer + 1) * z_bar**2 / t, rtol=1e-12)


def test_adam_hand_recursion():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    grads = [0.5, -0.2, 0.1]
    p, m, v = 1.0, 0.0, 0.0
    for i, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**i)) / (np.sqrt(v / (1 - b2**i)) + eps)
    opt = Adam(lr, b1, b2, eps)
    q = np.array([1.0])
    for g in grads:
        q = opt.step(q, np.array([g]))
    assert abs(q[0] - p) < 1e-12
    assert q[0] == pytest.approx(0.8275002408356956, abs=1e-12)   # frozen from the scalar recursion


def test_adam_zero_gradient_and_constant_gradient():
    opt = Adam(0.01)
    p = np.array([2.0, -1.0])
    out = opt.step(p, np.zeros(2))
    np.testing.assert_array_equal(out, p)
    assert opt.step_count == 1
    opt = Adam(0.01)
    prev = p
    for _ in range(200):
        cur = opt.step(prev, np.array([3.0, -0.5]))
        step = cur - prev
        prev = cur
    np.testing.assert_allclose(np.abs(step), 0.01, rtol=1e-6)


def _small_data(n=24, seed=0):
    return generate_dataset(SystemDims(n_tx=8, n_subcarriers=4), n, seed)


def test_train_deterministic():
    data = _small_data()
    cfg = TrainConfig(epochs=2, batch_size=6, n_layers=3)
    a, ha = train(data, 2, 2, cfg)
    b, hb = train(data, 2, 2, cfg)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert [r.loss for r in ha] == [r.loss for r in hb]
    assert len(ha) == 2 * 4 * 3


def test_train_rejects_empty_and_bad_config():
    with pytest.raises(ValueError):
        train(np.zeros((0, 4, 2, 8), complex), 2, 2, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_train_aborts_on_non_finite_loss():
    data = np.full((4, 2, 2, 4), np.nan + 0j)
    with pytest.raises((TrainingDiverged, np.linalg.LinAlgError, ValueError)):
        train(data, 2, 2, TrainConfig(epochs=1))


def test_select_t_returns_lowest_validation_loss():
    data = _small_data(16)
    best, scores = select_t(data[:12], data[12:], 2, 2, TrainConfig(epochs=1, batch_size=4, n_layers=2),
                            candidates=(0.1, 1.0))
    assert set(scores) == {0.1, 1.0}
    assert scores[best] == min(scores.values())


def test_fc_design_constraints():
    data = _small_data(12)
    net, _ = train(data, 2, 2, TrainConfig(epochs=1, batch_size=4, n_layers=3))
    snr = 10.0
    for ch in data[:4]:
        f_opt = optimal_digital_precoder(ch, snr, 2).f_opt
        res = fc_hbf_design(net, ch, f_opt, snr, 5, np.random.default_rng(0))
        assert np.max(np.abs(np.abs(res.f_rf) - 1)) < 1e-12
        np.testing.assert_allclose(np.linalg.norm(res.f_rf @ res.f_bb, axis=(1, 2)) ** 2, 2.0, rtol=1e-9)
        assert res.se > 0
    with pytest.raises(ValueError):
        fc_hbf_design(net, data[0], f_opt, snr, 0)


def test_model_roundtrip_and_errors(tmp_path):
    net = UnfoldedNet.random(3, 8, 2, 0.25, 0.1, np.random.default_rng(0))
    path = tmp_path / "m.mnet"
    model_write(path, net)
    back = model_read(path, 8, 2)
    assert back.weights.tobytes() == net.weights.tobytes() and back.t == net.t
    with pytest.raises(ValueError):
        model_read(path, 16, 2)
    data = path.read_bytes()
    (tmp_path / "short.mnet").write_bytes(data[:-1])
    with pytest.raises(ValueError):
        model_read(tmp_path / "short.mnet")
    (tmp_path / "magic.mnet").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(ValueError):
        model_read(tmp_path / "magic.mnet")
    (tmp_path / "ver.mnet").write_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])
    with pytest.raises(ValueError):
        model_read(tmp_path / "ver.mnet")


def test_model_layout_layer_major(tmp_path):
    w = np.arange(2 * 2 * 4, dtype=float).reshape(2, 2, 4)
    model_write(tmp_path / "m.mnet", UnfoldedNet(w, 0.5, 1, 2))
    raw = np.frombuffer((tmp_path / "m.mnet").read_bytes()[28:], "<f8")
    np.testing.assert_array_equal(raw, np.arange(16))


def test_ls_initial_digital_used_in_design(rng):
    f_rf = unit_phases(rng, 8, 2)
    f_opt = crandn(rng, 3, 8, 2)
    np.testing.assert_allclose(ls_digital(f_rf, f_opt), np.linalg.pinv(f_rf) @ f_opt, atol=1e-12)
