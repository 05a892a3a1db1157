import numpy as np
import pytest

import network.unet
from network.neural import he_std
from network.unet import (
    PUBLISHED_PARAM_COUNT,
    Model,
    ModelConfig,
    build_unet,
    forward,
    load_checkpoint,
    param_count,
    save_checkpoint,
    search_base_channels,
)
from utils.errors import FormatError, TruncationError, UsageError

pytestmark = pytest.mark.unit


def _tiny(levels=1, base=2, seed=0):
    return build_unet(ModelConfig(levels=levels, base_channels=base), np.random.default_rng(seed))


class TestModelConfig:
    def test_rejects_non_positive(self):
        with pytest.raises(UsageError):
            ModelConfig(levels=0)
        with pytest.raises(UsageError):
            ModelConfig(base_channels=-1)

    def test_rejects_other_class_count(self):
        with pytest.raises(UsageError):
            ModelConfig(out_channels=2)

    def test_check_spatial(self):
        ModelConfig(levels=4).check_spatial((32, 64, 64))
        with pytest.raises(UsageError):
            ModelConfig(levels=4).check_spatial((24, 64, 64))


class TestForward:
    def test_output_shape_and_normalization(self):
        model = _tiny()
        probs = forward(model, np.random.default_rng(1).normal(size=(2, 4, 4)))
        assert probs.shape == (2, 4, 4, 3)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-5)
        assert np.all(probs.data >= 0)

    def test_zero_weights_give_uniform_probabilities(self):
        model = Model(ModelConfig(levels=1, base_channels=2))
        probs = forward(model, np.ones((2, 4, 4)))
        np.testing.assert_allclose(probs.data, 1 / 3, atol=1e-6)

    def test_reference_patch_through_four_levels(self, mocker):
        pool = mocker.spy(network.unet, "maxpool3d_2")
        concat = mocker.spy(network.unet, "concat_channels")
        model = _tiny(levels=4, base=1)
        probs = model.predict(np.random.default_rng(3).normal(size=(32, 64, 64)))

        assert probs.shape == (32, 64, 64, 3)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)
        assert pool.call_count == 4
        out, _ = pool.spy_return
        assert out.shape[2:] == (2, 4, 4)

        assert concat.call_count == 4
        resolutions = []
        for call in concat.call_args_list:
            skip, upsampled = call.args
            assert skip.shape[2:] == upsampled.shape[2:]
            resolutions.append(skip.shape[2:])
        assert resolutions == [(4, 8, 8), (8, 16, 16), (16, 32, 32), (32, 64, 64)]

    def test_rejects_indivisible_patch(self):
        with pytest.raises(UsageError):
            _tiny(levels=2).predict(np.zeros((6, 8, 8)))

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(UsageError):
            _tiny().forward_logits(np.zeros((1, 2, 2, 2, 2), dtype=np.float32))

    def test_same_seed_same_model(self):
        a, b = _tiny(levels=2, base=3, seed=11), _tiny(levels=2, base=3, seed=11)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            np.testing.assert_array_equal(pa.value, pb.value)
        patch = np.random.default_rng(2).normal(size=(4, 8, 4))
        np.testing.assert_array_equal(a.predict(patch), b.predict(patch))


class TestBackward:
    def test_requires_cached_forward(self):
        model = _tiny()
        model.forward_logits(np.zeros((1, 1, 2, 2, 2), dtype=np.float32))
        with pytest.raises(UsageError):
            model.backward(np.zeros((1, 3, 2, 2, 2), dtype=np.float32))

    @pytest.mark.parametrize("levels", [1, 2, 3, 4])
    def test_backward_runs_at_every_depth(self, levels):
        model = _tiny(levels=levels, base=1, seed=levels)
        x = np.random.default_rng(0).normal(size=(2, 1, 16, 16, 16)).astype(np.float32)
        logits = model.forward_logits(x, keep_cache=True)
        model.backward(np.ones_like(logits))
        for p in model.parameters():
            assert p.grad.shape == p.value.shape
            assert np.all(np.isfinite(p.grad)), p.name
        assert np.any(model.head.weight.grad != 0)
        assert np.any(model.encoder[0][0].weight.grad != 0)

    @pytest.mark.parametrize(
        "levels, base, shape, per_param",
        [
            (1, 2, (2, 1, 2, 4, 2), None),
            (2, 2, (2, 1, 4, 8, 4), 8),
            (3, 1, (1, 1, 8, 8, 8), 8),
        ],
    )
    def test_parameter_gradients_match_finite_differences(self, levels, base, shape, per_param):
        rng = np.random.default_rng(5)
        model = _tiny(levels=levels, base=base, seed=5)
        for p in model.parameters():
            p.value = p.value.astype(np.float64)
            p.grad = np.zeros_like(p.value)
            # non-zero biases so every relu sees both signs
            if p.name.endswith("bias"):
                p.value[...] = rng.normal(scale=0.1, size=p.value.shape)
        x = rng.normal(size=shape)
        r = rng.normal(size=(shape[0], 3) + shape[2:])

        def loss():
            return float(np.sum(model.forward_logits(x) * r))

        model.forward_logits(x, keep_cache=True)
        model.backward(r)

        eps = 1e-6
        for p in model.parameters():
            indices = list(np.ndindex(p.value.shape))
            if per_param is not None and len(indices) > per_param:
                picked = rng.choice(len(indices), size=per_param, replace=False)
                indices = [indices[i] for i in picked]
            numeric = np.zeros(len(indices))
            analytic = np.array([p.grad[idx] for idx in indices])
            for k, idx in enumerate(indices):
                orig = p.value[idx]
                p.value[idx] = orig + eps
                plus = loss()
                p.value[idx] = orig - eps
                minus = loss()
                p.value[idx] = orig
                numeric[k] = (plus - minus) / (2 * eps)
            scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
            assert np.abs(numeric - analytic).max() / scale < 1e-4, p.name


class TestParamCount:
    def test_single_conv(self):
        conv = network.unet._Conv("c", 1, 2, np.random.default_rng(0))
        assert sum(p.size for p in conv.parameters()) == 56

    @pytest.mark.parametrize(
        "levels, base, convs",
        [(1, 2, 2), (2, 4, 2), (3, 2, 1), (2, 3, 3), (4, 1, 2), (4, 8, 2)],
    )
    def test_matches_built_model(self, levels, base, convs):
        config = ModelConfig(levels=levels, base_channels=base, convs_per_level=convs)
        model = Model(config)
        assert param_count(config) == sum(p.size for p in model.parameters())

    def test_reference_width_is_closest_to_published_count(self):
        best, counts = search_base_channels()
        assert best == 32
        assert counts[32] == param_count(ModelConfig.reference())
        assert abs(counts[32] - PUBLISHED_PARAM_COUNT) / PUBLISHED_PARAM_COUNT < 1e-3


class TestInitialization:
    def test_he_std_per_layer(self):
        model = build_unet(ModelConfig(levels=1, base_channels=16), np.random.default_rng(3))
        for p in model.parameters():
            if p.name.endswith("bias"):
                assert np.all(p.value == 0)
        deep = model.named_parameters()["bottleneck.conv1.weight"].value
        fan_in = deep.shape[1] * 27
        assert abs(deep.std() - he_std(fan_in)) / he_std(fan_in) < 0.05


class TestCheckpoint:
    def test_round_trip_is_bitwise(self):
        model = _tiny(levels=2, base=2, seed=8)
        blob = save_checkpoint(model, epoch=3, iteration=310, best_dice=0.625)
        loaded, meta = load_checkpoint(blob)
        assert loaded.config == model.config
        assert (meta.epoch, meta.iteration, meta.best_dice) == (3, 310, 0.625)
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert a.value.tobytes() == b.value.tobytes()
        assert save_checkpoint(loaded, 3, 310, 0.625) == blob

    def test_loaded_model_predicts_identically(self):
        model = _tiny(levels=2, base=2, seed=9)
        loaded, _ = load_checkpoint(save_checkpoint(model, 0, 1, 0.1))
        patch = np.random.default_rng(4).normal(size=(4, 4, 8))
        np.testing.assert_array_equal(model.predict(patch), loaded.predict(patch))

    def test_nan_best_dice_survives(self):
        _, meta = load_checkpoint(save_checkpoint(_tiny(), 0, 0, float("nan")))
        assert np.isnan(meta.best_dice)

    def test_truncated(self):
        blob = save_checkpoint(_tiny(), 0, 0, 0.0)
        with pytest.raises(TruncationError):
            load_checkpoint(blob[:-1])
        with pytest.raises(TruncationError):
            load_checkpoint(blob[:10])

    def test_bad_magic(self):
        blob = save_checkpoint(_tiny(), 0, 0, 0.0)
        with pytest.raises(FormatError):
            load_checkpoint(b"NOTACKPT" + blob[8:])
