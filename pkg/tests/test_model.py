import numpy as np
import pytest

from crispedge import autodiff as ad
from crispedge.autodiff import numeric_grad, rel_error
from crispedge.data import SynthSpec, synth_generate
from crispedge.errors import ConfigurationError, CorruptCheckpointError, NumericError, UsageError
from crispedge.loss import FusionConfig
from crispedge.model import (
    Adam,
    NetworkConfig,
    build,
    layer_specs,
    load_checkpoint,
    multiscale_predict,
    predict,
    save_checkpoint,
    to_tensor,
    train_step,
)


def hand_param_count(channels, cardinality, in_channels=1):
    """Closed-form parameter count, written out layer by layer without LayerSpec."""
    total, c_in = 0, in_channels
    for c in channels:
        total += 9 * c_in * c + c + 9 * c * c + c  # two 3x3 convs
        total += 9 * (c // cardinality) * c + c + c * c + c  # grouped 3x3 + 1x1
        c_in = c
    m = channels[-1]
    for c in reversed(channels[1:]):
        total += c * m + m  # side 1x1
        total += m * (m // 2) + m // 2  # halving 1x1
        m //= 2
        total += 16 * m + m  # depthwise 4x4 deconv
    total += channels[0] * m + m + m + 1  # head side 1x1, final 1x1
    return total


class TestConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert (cfg.stages, cfg.channels, cfg.cardinality) == (3, (8, 16, 32), 4)

    @pytest.mark.parametrize(
        "kwargs,field",
        [
            ({"stages": 1, "channels": (8,)}, "stages"),
            ({"channels": (8, 16)}, "channels"),
            ({"cardinality": 3}, "cardinality"),
            ({"height": 30}, "height"),
            ({"in_channels": 2}, "in_channels"),
        ],
    )
    def test_invalid_names_field(self, kwargs, field):
        with pytest.raises(ConfigurationError, match=field):
            NetworkConfig(**kwargs)


class TestBuild:
    @pytest.mark.parametrize("channels,card", [((8, 16, 32), 4), ((4, 8), 2), ((4, 4, 8, 16), 4)])
    def test_parameter_count(self, channels, card):
        net = build(NetworkConfig(stages=len(channels), channels=channels, cardinality=card))
        assert net.parameter_count() == hand_param_count(channels, card)

    def test_deterministic_init(self):
        a, b = build(NetworkConfig(seed=5)), build(NetworkConfig(seed=5))
        for k in a.params:
            assert a.params[k].values.tobytes() == b.params[k].values.tobytes()
        assert not np.array_equal(a.params["enc0.conv1.weight"].values,
                                  build(NetworkConfig(seed=6)).params["enc0.conv1.weight"].values)

    def test_he_scale_and_zero_bias(self):
        net = build(NetworkConfig(seed=0))
        w = net.params["enc2.conv2.weight"].values
        assert w.std() == pytest.approx(np.sqrt(2.0 / (9 * 32)), rel=0.1)
        assert not any(p.values.any() for k, p in net.params.items() if k.endswith(".bias"))

    def test_refinement_halves_channels(self):
        specs = layer_specs(NetworkConfig(stages=4, channels=(8, 8, 16, 32)))
        assert [specs[f"ref{k}.up"].out_channels for k in (3, 2, 1)] == [16, 8, 4]
        assert all(specs[f"ref{k}.up"].groups == specs[f"ref{k}.up"].in_channels for k in (3, 2, 1))


class TestForward:
    def test_shape(self):
        net = build(NetworkConfig())
        assert net.forward(np.zeros((1, 1, 64, 64))).shape == (1, 1, 64, 64)

    def test_zero_head_gives_half(self):
        net = build(NetworkConfig(height=32, width=32))
        net.params["head.out.weight"].values[:] = 0.0
        p = predict(net, np.random.default_rng(0).uniform(size=(32, 32)))
        assert np.all(p == 0.5)

    def test_batch_independence(self):
        net = build(NetworkConfig())
        img = np.random.default_rng(1).uniform(size=(1, 1, 32, 32))
        out = net.forward(np.concatenate([img, img]))
        np.testing.assert_array_equal(out[0], out[1])

    def test_bad_input(self):
        net = build(NetworkConfig())
        with pytest.raises(UsageError):
            net.forward(np.zeros((1, 1, 30, 32)))
        with pytest.raises(UsageError):
            net.forward(np.zeros((1, 3, 32, 32)))

    def test_rgb(self):
        net = build(NetworkConfig(in_channels=3))
        assert predict(net, np.zeros((16, 16, 3))).shape == (16, 16)

    def test_full_gradcheck(self):
        rng = np.random.default_rng(0)
        net = build(NetworkConfig(channels=(4, 4, 8), cardinality=2, height=16, width=16, seed=1))
        # nonzero biases keep relu inputs off exact zeros in empty regions
        for k, p in net.params.items():
            if k.endswith(".bias"):
                p.values[:] = rng.uniform(-0.5, 0.5, size=p.values.shape)
        x = rng.uniform(size=(1, 1, 16, 16))
        r = rng.uniform(-1, 1, size=(1, 1, 16, 16))
        net.zero_grads()
        net.forward(x, keep=True)
        net.backward(r)
        worst = 0.0
        for name, p in net.params.items():
            num = numeric_grad(lambda: float(np.sum(net.forward(x) * r)), p.values, step=1e-6)
            worst = max(worst, rel_error(p.grad, num).max())
        assert worst < 1e-4


def _pair(size=32, seed=0):
    (s,) = synth_generate(SynthSpec(dims=(size, size), seed=seed), 1)
    return s.image, s.annotation


class TestTrainStep:
    def test_lr_zero_no_change(self):
        net = build(NetworkConfig())
        before = {k: p.values.copy() for k, p in net.params.items()}
        train_step(net, [_pair()], lr=0.0)
        for k, p in net.params.items():
            np.testing.assert_array_equal(p.values, before[k])

    def test_adam_zero_gradient(self):
        net = build(NetworkConfig())
        before = {k: p.values.copy() for k, p in net.params.items()}
        net.zero_grads()
        Adam(lr=1e-2).step(net.params.values())
        for k, p in net.params.items():
            np.testing.assert_array_equal(p.values, before[k])

    def test_adam_first_step_moves_by_lr(self):
        p = ad.ParamTensor(np.array([1.0, -1.0]))
        p.grad[:] = [3.0, -0.01]
        Adam(lr=0.1).step([p])
        np.testing.assert_allclose(p.values, [0.9, -0.9], rtol=1e-6)

    def test_weight_decay_adds_l2(self):
        p = ad.ParamTensor(np.array([2.0]))
        Adam(lr=0.1, weight_decay=1.0).step([p])
        assert p.values[0] == pytest.approx(1.9)

    def test_loss_decreases_and_deterministic(self):
        pair = _pair(seed=2)
        runs = []
        for _ in range(2):
            net = build(NetworkConfig())
            opt = Adam(lr=1e-3)
            losses = [train_step(net, [pair], FusionConfig(ce="bce"), optimizer=opt) for _ in range(10)]
            runs.append((losses, save_checkpoint(net)))
        assert runs[0][0][-1] < runs[0][0][0]
        assert runs[0][1] == runs[1][1]

    def test_mixed_sizes(self):
        net = build(NetworkConfig())
        train_step(net, [_pair(32), _pair(16, seed=1)])

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            train_step(build(NetworkConfig()), [])

    def test_non_finite_names_pair_and_term(self):
        net = build(NetworkConfig())
        bad = (np.zeros((16, 16)), np.zeros((16, 16)))
        with pytest.raises(NumericError, match="pair 1.*dice"):
            train_step(net, [_pair(16), bad], FusionConfig(epsilon=0.0))


class TestMultiscale:
    def test_constant_network(self):
        net = build(NetworkConfig())
        net.params["head.out.weight"].values[:] = 0.0
        net.params["head.out.bias"].values[:] = 0.7
        out = multiscale_predict(net, np.random.default_rng(0).uniform(size=(32, 32)))
        np.testing.assert_allclose(out, 1 / (1 + np.exp(-0.7)), rtol=1e-12)

    def test_single_scale_is_predict(self):
        net = build(NetworkConfig())
        img = np.random.default_rng(1).uniform(size=(32, 32))
        np.testing.assert_array_equal(multiscale_predict(net, img, scales=(1.0,)), predict(net, img))

    def test_range_and_too_small(self):
        net = build(NetworkConfig())
        out = multiscale_predict(net, np.random.default_rng(2).uniform(size=(16, 16)))
        assert out.min() > 0 and out.max() < 1
        with pytest.raises(UsageError):
            multiscale_predict(net, np.zeros((4, 4)))


class TestCheckpoint:
    def test_round_trip(self):
        net = build(NetworkConfig(seed=3))
        x = to_tensor(np.random.default_rng(0).uniform(size=(32, 32)))
        blob = save_checkpoint(net)
        back = load_checkpoint(blob)
        assert back.config == net.config
        np.testing.assert_array_equal(back.forward(x), net.forward(x))
        assert save_checkpoint(back) == blob

    def test_truncated(self):
        blob = save_checkpoint(build(NetworkConfig()))
        for cut in (4, 10, 100, len(blob) // 2, len(blob) - 1):
            with pytest.raises(CorruptCheckpointError, match="offset"):
                load_checkpoint(blob[:cut])

    def test_flipped_byte(self):
        blob = bytearray(save_checkpoint(build(NetworkConfig())))
        blob[len(blob) // 2] ^= 0x01
        with pytest.raises(CorruptCheckpointError, match="checksum"):
            load_checkpoint(bytes(blob))

    def test_bad_magic_and_version(self):
        blob = save_checkpoint(build(NetworkConfig()))
        with pytest.raises(CorruptCheckpointError, match="magic"):
            load_checkpoint(b"X" + blob[1:])
        with pytest.raises(CorruptCheckpointError, match="version"):
            load_checkpoint(blob[:8] + b"\x02\x00\x00\x00" + blob[12:])
