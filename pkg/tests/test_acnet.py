import math

import numpy as np
import pytest

from navgym import acnet
from navgym.acnet import (
    NetConfig,
    OptState,
    TrainingSample,
    apply_update,
    compute_gradients,
    forward,
    forward_batch,
    init_opt_state,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from navgym.sim_env import Observation

SMALL = NetConfig(
    num_beams=33,
    scan_frames=4,
    conv1_filters=4,
    conv2_filters=6,
    dense_units=8,
    bearing_bins=8,
    num_actions=7,
)


def random_observation(rng, config=NetConfig(), dtype=np.float32) -> Observation:
    scan = rng.uniform(0.0, 1.0, (config.scan_frames, config.num_beams)).astype(dtype)
    onehot = np.zeros(config.bearing_bins, dtype=dtype)
    onehot[rng.integers(config.bearing_bins)] = 1.0
    return Observation(scan, onehot)


def random_samples(rng, n, config, dtype=np.float64, return_scale=1.0):
    return [
        TrainingSample(
            random_observation(rng, config, dtype),
            int(rng.integers(config.num_actions)),
            float(rng.normal() * return_scale),
        )
        for _ in range(n)
    ]


def frozen_advantage_loss(params, samples, base_value):
    """Loss with the advantage held constant in the policy term, matching the
    stop-gradient semantics of compute_gradients."""
    scans, bearings = acnet.batch_arrays([s.observation for s in samples])
    actions = np.array([s.action for s in samples])
    returns = np.array([s.return_R for s in samples])
    cache = acnet._forward_cached(params, scans, bearings)
    adv0 = returns - base_value
    entropy = -(cache.policy * cache.log_policy).sum(axis=1)
    rows = np.arange(len(samples))
    per_sample = (
        -cache.log_policy[rows, actions] * adv0
        - acnet.ENTROPY_BETA * entropy
        + acnet.VALUE_COEF * (returns - cache.value) ** 2
    )
    return per_sample.mean()


class TestShapes:
    def test_default_architecture_sizes(self):
        cfg = NetConfig()
        assert cfg.conv1_out_len == (1081 - 9) // 4 + 1 == 269
        assert cfg.conv2_out_len == (269 - 5) // 2 + 1 == 133
        assert cfg.flat_len == 133 * 32 == 4256
        assert cfg.dense_in == 4256 + 128

    def test_tensor_shapes(self):
        cfg = NetConfig()
        shapes = dict(acnet.tensor_shapes(cfg))
        assert shapes["conv1_w"] == (16, 4, 9)
        assert shapes["conv2_w"] == (32, 16, 5)
        assert shapes["dense_w"] == (4384, 256)
        assert shapes["policy_w"] == (256, 7)
        assert shapes["value_w"] == (256, 1)

    def test_too_short_scan_rejected(self):
        with pytest.raises(ValueError, match="short"):
            NetConfig(num_beams=16)

    def test_forward_rejects_wrong_shapes(self):
        params = init_params(np.random.default_rng(0), SMALL)
        with pytest.raises(ValueError, match="scan batch"):
            forward(params, np.zeros((2, 4, 99), np.float32), np.zeros((2, 8), np.float32))
        with pytest.raises(ValueError, match="bearing batch"):
            forward(params, np.zeros((2, 4, 33), np.float32), np.zeros((2, 9), np.float32))


class TestInitAndForward:
    def test_init_deterministic(self):
        a = init_params(np.random.default_rng(5), SMALL)
        b = init_params(np.random.default_rng(5), SMALL)
        for name in acnet.TENSOR_NAMES:
            assert np.array_equal(a[name], b[name])

    def test_zero_params_give_uniform_policy_zero_value(self):
        params = init_params(np.random.default_rng(0), SMALL)
        for t in params.tensors.values():
            t[...] = 0.0
        rng = np.random.default_rng(1)
        out = forward_batch(params, [random_observation(rng, SMALL) for _ in range(3)])
        assert np.allclose(out.policy, 1.0 / 7.0)
        assert np.allclose(out.value, 0.0)

    def test_default_init_policy_not_saturated(self):
        rng = np.random.default_rng(2)
        params = init_params(rng, SMALL)
        out = forward_batch(params, [random_observation(rng, SMALL) for _ in range(16)])
        assert np.all(out.policy > 0.01)
        assert np.all(out.policy < 0.9)

    def test_softmax_normalized(self):
        rng = np.random.default_rng(3)
        params = init_params(rng, SMALL)
        out = forward_batch(params, [random_observation(rng, SMALL) for _ in range(8)])
        assert np.abs(out.policy.sum(axis=1) - 1.0).max() < 1e-6

    def test_forward_deterministic(self):
        rng = np.random.default_rng(4)
        params = init_params(rng, SMALL)
        obs = [random_observation(rng, SMALL) for _ in range(4)]
        a = forward_batch(params, obs)
        b = forward_batch(params, obs)
        assert np.array_equal(a.policy, b.policy)
        assert np.array_equal(a.value, b.value)

    def test_batch_matches_per_sample(self):
        rng = np.random.default_rng(5)
        params = init_params(rng, SMALL)
        obs = [random_observation(rng, SMALL) for _ in range(6)]
        batch = forward_batch(params, obs)
        for i, o in enumerate(obs):
            single = forward_batch(params, [o])
            assert np.abs(single.policy[0] - batch.policy[i]).max() < 1e-6
            assert abs(single.value[0] - batch.value[i]) < 1e-6

    def test_uniform_policy_entropy(self):
        params = init_params(np.random.default_rng(0), SMALL)
        for t in params.tensors.values():
            t[...] = 0.0
        rng = np.random.default_rng(1)
        samples = random_samples(rng, 4, SMALL, np.float32)
        _, losses = compute_gradients(params, samples)
        assert losses.entropy == pytest.approx(math.log(7.0), abs=1e-6)


class TestGradients:
    def test_zero_advantage_leaves_entropy_gradient(self):
        rng = np.random.default_rng(6)
        params = init_params(rng, SMALL, dtype=np.float64)
        obs = random_observation(rng, SMALL, np.float64)
        scans, bearings = acnet.batch_arrays([obs])
        out = forward(params, scans, bearings)
        # return exactly the critic's value -> advantage 0
        sample = TrainingSample(obs, 2, float(out.value[0]))
        grads, _ = compute_gradients(params, [sample], entropy_beta=0.0, value_coef=0.0)
        for g in grads.values():
            assert np.abs(g).max() < 1e-12  # nothing left without entropy
        grads, _ = compute_gradients(params, [sample], entropy_beta=0.01, value_coef=0.0)
        assert max(np.abs(g).max() for g in grads.values()) > 0.0

    def test_gradients_match_finite_differences(self):
        # the acceptance suite runs 100 draws; this is the quick version
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(5):
            params = init_params(rng, SMALL, dtype=np.float64)
            samples = random_samples(rng, 3, SMALL)
            grads, _ = compute_gradients(params, samples)
            scans, bearings = acnet.batch_arrays([s.observation for s in samples])
            base_value = acnet._forward_cached(params, scans, bearings).value.copy()
            h = 1e-5
            for name, tensor in params.tensors.items():
                flat = tensor.ravel()
                for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    lp = frozen_advantage_loss(params, samples, base_value)
                    flat[idx] = orig - h
                    lm = frozen_advantage_loss(params, samples, base_value)
                    flat[idx] = orig
                    numeric = (lp - lm) / (2 * h)
                    analytic = grads[name].ravel()[idx]
                    rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
                    worst = max(worst, rel)
        assert worst < 1e-4

    def test_empty_batch_rejected(self):
        params = init_params(np.random.default_rng(0), SMALL)
        with pytest.raises(ValueError, match="nonempty"):
            compute_gradients(params, [])


class TestApplyUpdate:
    def test_zero_gradient_keeps_params(self):
        params = init_params(np.random.default_rng(0), SMALL)
        opt = init_opt_state(params)
        before = params.copy()
        zeros = {name: np.zeros_like(t) for name, t in params.tensors.items()}
        apply_update(params, opt, zeros)
        for name in acnet.TENSOR_NAMES:
            assert np.array_equal(params[name], before[name])

    def test_constant_gradient_step_approaches_lr(self):
        params = init_params(np.random.default_rng(0), SMALL, dtype=np.float64)
        opt = init_opt_state(params, learning_rate=1e-3)
        g = {name: np.ones_like(t) for name, t in params.tensors.items()}
        w = params["dense_w"]
        for _ in range(800):
            apply_update(params, opt, g)
        prev = w.copy()
        apply_update(params, opt, g)
        step = float(np.abs(prev - w).mean())
        assert step == pytest.approx(1e-3, rel=0.02)

    def test_update_deterministic(self):
        rng = np.random.default_rng(1)

        def run():
            params = init_params(np.random.default_rng(0), SMALL)
            opt = init_opt_state(params)
            samples = random_samples(np.random.default_rng(2), 4, SMALL, np.float32)
            grads, _ = compute_gradients(params, samples)
            apply_update(params, opt, grads)
            return params

        a, b = run(), run()
        for name in acnet.TENSOR_NAMES:
            assert np.array_equal(a[name], b[name])


class TestCheckpoint:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(8)
        params = init_params(rng, SMALL)
        opt = init_opt_state(params, learning_rate=2e-4)
        samples = random_samples(rng, 4, SMALL, np.float32)
        grads, _ = compute_gradients(params, samples)
        apply_update(params, opt, grads)

        blob = save_checkpoint(params, opt, {"episode_count": 42, "config_hash": 0xDEADBEEF})
        params2, opt2, meta = load_checkpoint(blob, expected_config_hash=0xDEADBEEF)
        assert meta["episode_count"] == 42
        assert params2.config == SMALL
        assert opt2.learning_rate == 2e-4
        for name in acnet.TENSOR_NAMES:
            assert np.array_equal(params2[name], params[name])
            assert np.array_equal(opt2.accumulators[name], opt.accumulators[name])

    def test_truncated_rejected(self):
        params = init_params(np.random.default_rng(0), SMALL)
        opt = init_opt_state(params)
        blob = save_checkpoint(params, opt, {})
        with pytest.raises(acnet.CheckpointError, match="size"):
            load_checkpoint(blob[:-8])
        with pytest.raises(acnet.CheckpointError, match="truncated"):
            load_checkpoint(blob[:10])

    def test_bad_magic_rejected(self):
        params = init_params(np.random.default_rng(0), SMALL)
        opt = init_opt_state(params)
        blob = save_checkpoint(params, opt, {})
        with pytest.raises(acnet.CheckpointError, match="magic"):
            load_checkpoint(b"XXXX" + blob[4:])

    def test_config_hash_mismatch_warns(self):
        params = init_params(np.random.default_rng(0), SMALL)
        opt = init_opt_state(params)
        blob = save_checkpoint(params, opt, {"config_hash": 1})
        with pytest.warns(UserWarning, match="hash"):
            load_checkpoint(blob, expected_config_hash=2)
