"""Q-network: forward contracts, analytic-vs-numeric gradients, noise
handling, and checkpoint stability."""

import hashlib

import numpy as np
import pytest

from deltarrs.net import (
    QNetwork,
    expected_value,
    value_support,
)

RNG = np.random.default_rng


def make_batch(net, rng, batch=6):
    states = rng.random((batch, net.state_dim))
    actions = rng.integers(0, net.n_actions, batch)
    weights = 0.5 + rng.random(batch)
    if net.distributional:
        targets = rng.random((batch, net.atoms))
        targets /= targets.sum(axis=1, keepdims=True)
    else:
        targets = rng.normal(50.0, 30.0, batch)
    return states, actions, targets, weights


def finite_difference(net, key, idx, states, actions, targets, weights,
                      noise, h=1e-5, **kwargs):
    arr = net.params[key]
    orig = arr[idx]
    arr[idx] = orig + h
    up = net.gradients(states, actions, targets, weights, noise,
                       clip=None, **kwargs)[2]["loss"]
    arr[idx] = orig - h
    down = net.gradients(states, actions, targets, weights, noise,
                         clip=None, **kwargs)[2]["loss"]
    arr[idx] = orig
    return (up - down) / (2.0 * h)


def check_gradients(net, noise, n_probe, rng, **kwargs):
    states, actions, targets, weights = make_batch(net, rng)
    grads, _, _ = net.gradients(states, actions, targets, weights, noise,
                                clip=None, **kwargs)
    worst = 0.0
    keys = sorted(net.params)
    for _ in range(n_probe):
        key = keys[rng.integers(len(keys))]
        idx = tuple(rng.integers(0, s) for s in net.params[key].shape)
        fd = finite_difference(net, key, idx, states, actions, targets,
                               weights, noise, **kwargs)
        an = grads[key][idx]
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-10))
    return worst


# ------------------------------------------------------------- architecture


def test_parameter_counts_follow_layer_sizes():
    net = QNetwork()
    # Plain blocks 12->256->128; noisy block 128->64 and noisy heads
    # 64->51 and 64->612 carry (mu, sigma) pairs.
    plain = 12 * 256 + 256 + 256 * 128 + 128
    noisy = 2 * (128 * 64 + 64) + 2 * (64 * 51 + 51) + 2 * (64 * 612 + 612)
    assert net.n_parameters() == plain + noisy


def test_flags_shape_the_output():
    s = RNG(0).random((3, 12))
    full = QNetwork(seed=1)
    assert full.forward(s, full.zero_noise()).shape == (3, 12, 51)
    scalar = QNetwork(distributional=False, seed=1)
    assert scalar.forward(s, scalar.zero_noise()).shape == (3, 12)
    assert scalar.q_values(s, scalar.zero_noise()).shape == (3, 12)


def test_vanilla_configuration_has_no_noisy_parameters():
    net = QNetwork(dueling=False, noisy=False, distributional=False, seed=0)
    assert not net.sigma_keys()
    assert net.zero_noise() == {}
    assert all(k.split(".")[1] in ("W", "b") for k in net.params)


# ------------------------------------------------------------------ forward


def test_distributions_are_normalized_probabilities():
    net = QNetwork(seed=2)
    noise = net.sample_noise(RNG(3))
    probs = net.forward(RNG(4).random((8, 12)), noise)
    assert probs.min() >= 0.0
    assert np.abs(probs.sum(axis=2) - 1.0).max() < 1e-6


def test_zero_noise_forward_is_deterministic():
    net = QNetwork(seed=2)
    s = RNG(5).random((4, 12))
    a = net.forward(s, net.zero_noise())
    b = net.forward(s, net.zero_noise())
    assert np.array_equal(a, b)


def test_zero_noise_equals_sigma_terms_omitted():
    net = QNetwork(seed=7)
    stripped = net.clone()
    for key in stripped.sigma_keys():
        stripped.params[key][...] = 0.0
    s = RNG(1).random((4, 12))
    noisy_draw = stripped.sample_noise(RNG(2))
    assert np.array_equal(net.forward(s, net.zero_noise()),
                          stripped.forward(s, noisy_draw))


def test_constant_advantage_shift_cancels():
    net = QNetwork(seed=7)
    shifted = net.clone()
    shifted.params["a.bmu"] = shifted.params["a.bmu"] + 3.7
    s = RNG(1).random((4, 12))
    a = net.forward(s, net.zero_noise())
    b = shifted.forward(s, shifted.zero_noise())
    assert np.abs(a - b).max() < 1e-12


def test_constant_advantage_shift_cancels_scalar_head():
    net = QNetwork(distributional=False, seed=7)
    shifted = net.clone()
    shifted.params["a.bmu"] = shifted.params["a.bmu"] + 1.3
    s = RNG(1).random((4, 12))
    assert np.abs(net.forward(s, net.zero_noise())
                  - shifted.forward(s, shifted.zero_noise())).max() < 1e-12


def test_greedy_action_invariant_under_increasing_transform():
    net = QNetwork(seed=9)
    q = net.q_values(RNG(6).random((16, 12)), net.zero_noise())
    base = np.argmax(q, axis=1)
    assert np.array_equal(base, np.argmax(3.0 * q + 11.0, axis=1))
    assert np.array_equal(base, np.argmax(np.tanh(q / 300.0), axis=1))


# ------------------------------------------------------------ expectations


def test_expected_value_one_hot_endpoint():
    support = value_support(-10.0, 200.0, 51)
    one_hot = np.zeros(51)
    one_hot[-1] = 1.0
    assert expected_value(one_hot, support) == 200.0


def test_expected_value_uniform_is_midpoint():
    support = value_support(-10.0, 200.0, 51)
    uniform = np.full(51, 1.0 / 51.0)
    assert expected_value(uniform, support) == pytest.approx(95.0, rel=1e-12)


def test_expected_value_matches_dot_product_oracle():
    rng = RNG(8)
    support = value_support(-10.0, 200.0, 51)
    dist = rng.random((5, 51))
    dist /= dist.sum(axis=1, keepdims=True)
    direct = np.array([sum(p * z for p, z in zip(row, support))
                       for row in dist])
    assert np.allclose(expected_value(dist, support), direct, atol=1e-10)


# -------------------------------------------------------------------- noise


def test_noise_resampling_can_change_greedy_action():
    net = QNetwork(seed=11)
    s = RNG(12).random((1, 12))
    rng = RNG(13)
    seen = {int(np.argmax(net.q_values(s, net.sample_noise(rng))))
            for _ in range(50)}
    assert len(seen) >= 2


def test_noise_magnitude_finite_and_zero_without_noise():
    net = QNetwork(seed=11)
    mag = net.noise_magnitude(net.sample_noise(RNG(3)))
    assert np.isfinite(mag) and mag > 0.0
    assert net.noise_magnitude(net.zero_noise()) == 0.0


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("dueling", [True, False])
@pytest.mark.parametrize("distributional", [True, False])
@pytest.mark.parametrize("noisy", [True, False])
def test_gradients_match_finite_differences(dueling, distributional, noisy):
    net = QNetwork(dueling=dueling, noisy=noisy,
                   distributional=distributional, seed=3)
    rng = RNG(17)
    noise = net.sample_noise(RNG(5)) if noisy else net.zero_noise()
    assert check_gradients(net, noise, 8, rng) < 1e-4


def test_gradients_match_finite_differences_xent():
    net = QNetwork(seed=3)
    assert check_gradients(net, net.sample_noise(RNG(5)), 8, RNG(18),
                           loss="xent") < 1e-4


def test_gradients_match_finite_differences_projected_prediction():
    net = QNetwork(seed=3)
    rng = RNG(9)
    proj = np.zeros((6, net.atoms, net.atoms))
    for b in range(6):
        m = rng.random((net.atoms, net.atoms))
        proj[b] = m / m.sum(axis=0, keepdims=True)
    assert check_gradients(net, net.sample_noise(RNG(5)), 8, RNG(19),
                           loss="huber-proj-pred", proj=proj) < 1e-4


def test_zero_residual_batch_gives_zero_gradients():
    net = QNetwork(seed=4)
    noise = net.zero_noise()
    states = RNG(20).random((5, 12))
    actions = np.arange(5)
    probs = net.forward(states, noise)
    targets = probs[np.arange(5), actions]
    grads, per_sample, info = net.gradients(states, actions, targets,
                                            np.ones(5), noise)
    assert np.all(per_sample == 0.0)
    assert info["loss"] == 0.0
    assert all(np.all(g == 0.0) for g in grads.values())


def test_doubling_weights_doubles_preclip_gradient():
    net = QNetwork(seed=4)
    noise = net.sample_noise(RNG(6))
    states, actions, targets, weights = make_batch(net, RNG(21))
    g1, _, i1 = net.gradients(states, actions, targets, weights, noise,
                              clip=None)
    g2, _, i2 = net.gradients(states, actions, targets, 2.0 * weights,
                              noise, clip=None)
    assert i2["grad_norm_preclip"] == pytest.approx(
        2.0 * i1["grad_norm_preclip"], rel=1e-12)
    for key in g1:
        assert np.allclose(g2[key], 2.0 * g1[key], rtol=1e-12, atol=1e-300)


def test_gradient_norm_clipped_at_bound():
    net = QNetwork(distributional=False, seed=4)
    states = RNG(22).random((8, 12))
    actions = np.zeros(8, dtype=int)
    targets = np.full(8, 1e5)
    # Huber slope saturates at 1, so large importance weights rather
    # than a large residual drive the norm past the bound.
    grads, _, info = net.gradients(states, actions, targets,
                                   np.full(8, 50.0), net.zero_noise(),
                                   clip=5.0)
    assert info["grad_norm_preclip"] > 5.0
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    assert total <= 5.0 + 1e-9


def test_unknown_loss_mode_rejected():
    net = QNetwork(seed=0)
    states, actions, targets, weights = make_batch(net, RNG(0))
    with pytest.raises(ValueError):
        net.gradients(states, actions, targets, weights, net.zero_noise(),
                      loss="mse")


# --------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip_identical(tmp_path):
    net = QNetwork(seed=7)
    path = tmp_path / "net.bin"
    net.save(path, meta={"step": 41})
    loaded, meta = QNetwork.load(path)
    assert meta == {"step": 41}
    assert loaded.config() == net.config()
    assert sorted(loaded.params) == sorted(net.params)
    for key in net.params:
        assert np.array_equal(loaded.params[key], net.params[key])


def test_checkpoint_bytes_stable_across_identical_nets(tmp_path):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    QNetwork(seed=7).save(p1, meta={"step": 0})
    QNetwork(seed=7).save(p2, meta={"step": 0})
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert digest(p1) == digest(p2)


def test_checkpoint_preserves_flag_configuration(tmp_path):
    net = QNetwork(dueling=False, noisy=False, distributional=False, seed=1)
    path = tmp_path / "v.bin"
    net.save(path)
    loaded, _ = QNetwork.load(path)
    s = RNG(2).random((3, 12))
    assert np.array_equal(loaded.forward(s, {}), net.forward(s, {}))


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        QNetwork.load(path)
