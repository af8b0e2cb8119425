import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventdiff.diffusion import NoiseSchedule, SamplerConfig, reverse_sde_sample
from eventdiff.gmm import GmmDistribution, GmmScore
from eventdiff.scorenet import (AdamState, MlpScoreNet, Standardization, TrainConfig,
                                TrainingDiverged, adam_step, dsm_floor_gaussian, dsm_loss,
                                ema_decay, load_checkpoint, net_score_jvp_fd, save_checkpoint,
                                shifted_grid_times, train)

SCHED = NoiseSchedule()


def small_net(dim=3, seed=1, skip=True, hidden=(16, 16), parameterization="noise_pred"):
    net = MlpScoreNet(dim, hidden, n_freq=4, schedule=SCHED, seed=seed, skip=skip,
                      parameterization=parameterization)
    # give the zero-initialised output layer some weight so every path is exercised
    rng = np.random.default_rng(seed + 100)
    W, b = net.layers[-1]
    W[...] = 0.3 * rng.standard_normal(W.shape)
    b[...] = 0.1 * rng.standard_normal(b.shape)
    return net


def test_rejects_unknown_parameterization():
    with pytest.raises(ValueError):
        MlpScoreNet(2, (4,), parameterization="velocity")


def test_rejects_wrong_input_width():
    with pytest.raises(ValueError, match="width"):
        small_net(3).score(np.zeros((2, 4)), 0.5)


def test_zero_network_gives_zero_score_and_jvp(rng):
    net = MlpScoreNet(3, (8, 8), n_freq=2, schedule=SCHED, skip=False)
    net.set_params(np.zeros(net.n_params))
    x, v = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    np.testing.assert_array_equal(net.score(x, 0.3), 0.0)
    np.testing.assert_array_equal(net.score_jvp(x, 0.3, v), 0.0)


def test_fresh_network_with_skip_is_unit_gaussian_score(rng):
    net = MlpScoreNet(2, (8,), n_freq=2, schedule=SCHED)
    x = rng.standard_normal((4, 2))
    t = 0.6
    sigma2 = float(SCHED.sigma(t)) ** 2
    np.testing.assert_allclose(net.score(x, t), -x / (1 + sigma2), rtol=1e-14)


@given(st.floats(-3.0, 3.0), st.floats(1e-3, 1.0))
def test_output_finite_for_large_inputs(log_norm, t):
    net = small_net(3)
    direction = np.array([[0.6, -0.8, 0.0]])
    x = direction * 10.0**log_norm
    assert np.all(np.isfinite(net.score(x, t)))
    assert np.all(np.isfinite(net.score_jvp(x, t, direction)))


@pytest.mark.parametrize("parameterization", ["noise_pred", "score_pred"])
def test_jvp_matches_finite_differences(rng, parameterization):
    net = small_net(3, parameterization=parameterization)
    x, v = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    t = rng.uniform(0.05, 0.95, 6)
    h = 1e-5
    fd = (net.score(x + h * v, t) - net.score(x - h * v, t)) / (2 * h)
    jvp = net.score_jvp(x, t, v)
    assert np.max(np.abs(jvp - fd)) / np.max(np.abs(jvp)) < 1e-6


def test_fd_fallback_agrees_with_forward_mode(rng):
    net = small_net(3)
    x, v = rng.standard_normal((6, 3)), 5 * rng.standard_normal((6, 3))
    exact = net.score_jvp(x, 0.4, v)
    fd = net_score_jvp_fd(net, x, 0.4, v)
    assert np.max(np.abs(fd - exact)) / np.max(np.abs(exact)) < 1e-3


def test_vjp_is_adjoint_of_jvp(rng):
    net = small_net(4)
    x, u, v = (rng.standard_normal((3, 4)) for _ in range(3))
    lhs = np.sum(u * net.score_jvp(x, 0.2, v), axis=1)
    rhs = np.sum(net.score_vjp(x, 0.2, u) * v, axis=1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10)


def test_jvp_is_linear_in_direction(rng):
    net = small_net(3)
    x, v1, v2 = (rng.standard_normal((4, 3)) for _ in range(3))
    a = 2.7
    lhs = net.score_jvp(x, 0.5, a * v1 + v2)
    rhs = a * net.score_jvp(x, 0.5, v1) + net.score_jvp(x, 0.5, v2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_single_affine_layer_jacobian_is_constant(rng):
    net = MlpScoreNet(2, (), n_freq=2, schedule=SCHED, skip=False)
    net.set_params(rng.standard_normal(net.n_params))
    W = net.layers[0][0][:2]  # rows acting on the state input
    t = 0.3
    sigma = float(SCHED.sigma(t))
    c_in = 1 / np.sqrt(1 + sigma**2)
    v = rng.standard_normal((5, 2))
    expected = -(c_in / sigma) * v @ W
    for x in (np.zeros((5, 2)), 10 * rng.standard_normal((5, 2))):
        np.testing.assert_allclose(net.score_jvp(x, t, v), expected, rtol=1e-13)


def test_shifted_grid_times_cover_unit_interval(rng):
    t = shifted_grid_times(8, rng, 1e-3)
    gaps = np.diff(np.sort(t))
    np.testing.assert_allclose(gaps[(gaps > 0.01)], 1 / 8, rtol=1e-12)
    assert t.min() >= 1e-3 and t.max() <= 1.0


@pytest.mark.parametrize("parameterization", ["noise_pred", "score_pred"])
@pytest.mark.parametrize("weighting", ["sigma2", "inverse_sigma2"])
def test_loss_gradient_matches_finite_differences(rng, parameterization, weighting):
    net = small_net(3, parameterization=parameterization)
    x0 = rng.standard_normal((7, 3))
    seed = 5
    _, grad = dsm_loss(net, x0, np.random.default_rng(seed), weighting)
    for j in rng.choice(net.n_params, 5, replace=False):
        h = 1e-6 * max(1.0, abs(net.params[j]))
        vals = []
        for sgn in (1, -1):
            p = net.params.copy()
            p[j] += sgn * h
            vals.append(dsm_loss(net.copy(p), x0, np.random.default_rng(seed), weighting)[0])
        fd = (vals[0] - vals[1]) / (2 * h)
        assert abs(fd - grad[j]) <= 1e-5 * max(abs(grad[j]), 1e-3)


def test_identical_batch_gradient_equals_single_item(rng):
    net = small_net(2)
    x = rng.standard_normal((1, 2))
    eps = rng.standard_normal((1, 2))
    t = np.array([0.37])
    w = np.ones(1)
    loss1, g1 = net.loss_and_grad(x, t, eps, w)
    loss4, g4 = net.loss_and_grad(np.repeat(x, 4, 0), np.repeat(t, 4), np.repeat(eps, 4, 0),
                                  np.ones(4))
    assert loss4 == pytest.approx(loss1, rel=1e-14)
    np.testing.assert_allclose(g4, g1, rtol=1e-12, atol=1e-15)


def test_dsm_rejects_empty_batch(rng):
    with pytest.raises(ValueError):
        dsm_loss(small_net(2), np.zeros((0, 2)), rng)


def test_perfect_score_reaches_gaussian_floor(rng):
    # the skip term alone is the exact score of unit Gaussian data
    net = MlpScoreNet(2, (8,), n_freq=2, schedule=SCHED)
    losses, floors = [], []
    for _ in range(400):
        x0 = rng.standard_normal((64, 2))
        state = rng.bit_generator.state
        losses.append(dsm_loss(net, x0, rng)[0])
        rng.bit_generator.state = state
        floors.append(dsm_floor_gaussian(1.0, 2, SCHED, shifted_grid_times(64, rng, SCHED.t_min)))
        rng.standard_normal((64, 2))  # keep the stream aligned with dsm_loss
    se = np.std(losses, ddof=1) / np.sqrt(len(losses))
    assert abs(np.mean(losses) - np.mean(floors)) < 3 * se


def test_adam_first_step_is_signed_learning_rate(rng):
    g = rng.standard_normal(10)
    p0 = rng.standard_normal(10)
    p1 = adam_step(p0, g, AdamState.zeros(10), 1e-3)
    np.testing.assert_allclose(p1 - p0, -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_zero_gradient_leaves_parameters(rng):
    p0 = rng.standard_normal(6)
    state = AdamState.zeros(6)
    np.testing.assert_array_equal(adam_step(p0, np.zeros(6), state, 0.1), p0)
    assert state.step == 1


def test_adam_two_equal_steps_pinned():
    g = np.array([0.5, -2.0, 1e-3])
    state = AdamState.zeros(3)
    p = adam_step(np.zeros(3), g, state, 0.01)
    p = adam_step(p, g, state, 0.01)
    # with a constant gradient both bias-corrected moments equal g and g^2
    np.testing.assert_allclose(p, -0.02 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(4), AdamState.zeros(3), 0.1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(loss_weighting="uniform")
    assert TrainConfig.full_scale_profile().batch_size == 500


def test_ema_decay_limits():
    assert ema_decay(1e-9, 10) == 0.0
    assert ema_decay(400, 10) == pytest.approx(1 - 1 / 4000)


def test_zero_epochs_returns_initialisation(rng):
    net = small_net(2)
    ck = train(rng.standard_normal((50, 2)), net, TrainConfig(epochs=0))
    np.testing.assert_array_equal(ck.raw_params, net.params)
    np.testing.assert_array_equal(ck.ema_params, net.params)
    assert ck.loss_history == []


def test_training_is_bitwise_deterministic(rng, tmp_path):
    data = rng.standard_normal((64, 2))
    cfg = TrainConfig(epochs=3, batch_size=16, seed=4)
    paths = []
    for k in range(2):
        ck = train(data, small_net(2), cfg)
        paths.append(tmp_path / f"c{k}.ckpt")
        save_checkpoint(ck, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_tiny_ema_period_tracks_raw_parameters(rng):
    ck = train(rng.standard_normal((64, 2)), small_net(2),
               TrainConfig(epochs=2, batch_size=16, ema_period=1e-9))
    np.testing.assert_array_equal(ck.ema_params, ck.raw_params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_epoch(rng):
    data = rng.standard_normal((32, 2))
    data[3, 0] = np.inf
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(data, small_net(2), TrainConfig(epochs=2, batch_size=32))


def test_train_rejects_bad_data():
    with pytest.raises(ValueError):
        train(np.zeros((0, 2)), small_net(2), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(np.zeros((4, 3)), small_net(2), TrainConfig(epochs=1))


def test_checkpoint_round_trip(rng, tmp_path):
    std = Standardization.fit(rng.standard_normal((30, 4)) * 3 + 1, per_channel=2)
    ck = train(std.forward(rng.standard_normal((30, 4))), small_net(4), TrainConfig(epochs=2),
               std, metadata={"system": "lorenz", "m": 2})
    path = tmp_path / "net.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    np.testing.assert_array_equal(back.raw_params, ck.raw_params)
    np.testing.assert_array_equal(back.ema_params, ck.ema_params)
    np.testing.assert_array_equal(back.standardization.std, std.std)
    assert back.config == ck.config
    assert back.loss_history == ck.loss_history
    assert back.metadata == {"system": "lorenz", "m": "2"}
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(back.model().score(x, 0.5), ck.model().score(x, 0.5))


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_per_channel_standardization():
    data = np.array([[0.0, 10.0, 2.0, 30.0], [2.0, 20.0, 0.0, 10.0]])
    std = Standardization.fit(data, per_channel=2)
    np.testing.assert_allclose(std.mean, [1.0, 17.5, 1.0, 17.5])
    np.testing.assert_allclose(std.inverse(std.forward(data)), data)


def test_trained_score_matches_gaussian(rng):
    data = 1.0 + 0.6 * rng.standard_normal((2048, 1))
    net = MlpScoreNet(1, (32, 32), n_freq=4, schedule=SCHED, seed=3)
    ck = train(data, net, TrainConfig(epochs=150, batch_size=256, ema_period=30, seed=1,
                                      learning_rate=3e-3))
    t = 0.5
    sigma2 = float(SCHED.sigma(t)) ** 2
    x = np.linspace(1.0 - 3 * 0.6, 1.0 + 3 * 0.6, 61)[:, None]
    exact = -(x - 1.0) / (0.36 + sigma2)
    got = ck.model().score(x, t)
    assert np.linalg.norm(got - exact) / np.linalg.norm(exact) < 0.1


def test_trained_mixture_component_occupancy(rng):
    gmm = GmmDistribution(np.array([0.3, 0.7]), np.array([[-1.5], [1.0]]),
                          np.array([[[0.09]], [[0.16]]]))
    data = gmm.sample(2048, rng)
    net = MlpScoreNet(1, (32, 32), n_freq=4, schedule=SCHED, seed=3)
    ck = train(data, net, TrainConfig(epochs=150, batch_size=256, ema_period=30, seed=2,
                                      learning_rate=3e-3))
    n = 2000
    x = reverse_sde_sample(ck.model(), SCHED, SamplerConfig(500), n, 1,
                           rng=np.random.default_rng(9))
    left = float(np.mean(x[:, 0] < -0.25))
    assert abs(left - 0.3) < 3 * np.sqrt(0.3 * 0.7 / n)
    # the exact oracle run through the same sampler lands in the same place
    ref = reverse_sde_sample(GmmScore(gmm, SCHED), SCHED, SamplerConfig(500), n, 1,
                             rng=np.random.default_rng(9))
    assert abs(float(np.mean(ref[:, 0] < -0.25)) - 0.3) < 3 * np.sqrt(0.3 * 0.7 / n)
