import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hashexit import hamming
from hashexit.autodiff import Tensor
from hashexit.encoder import (
    EncoderConfig,
    FeatureMap,
    MultiExitEncoder,
    global_pool,
    paper_dims_config,
    part_pool,
    stage_flops,
    toy_config,
)
from hashexit.errors import ConfigError, DimensionError, PipelineError
from hashexit.numerics import LayerParams

rng = np.random.default_rng(42)


class TestConfig:
    def test_channel_dims_must_increase(self):
        with pytest.raises(ConfigError):
            EncoderConfig(channel_dims=(32, 32, 64, 128))

    def test_height_must_divide_for_bands(self):
        with pytest.raises(ConfigError):
            EncoderConfig(spatial_in=(24, 16))

    def test_code_length_ratios(self):
        assert toy_config().exit_code_lens == (32, 32, 128, 256)
        assert paper_dims_config().exit_code_lens == (256, 256, 1024, 2048)

    def test_paper_dims_spatial_trace(self):
        trace = paper_dims_config().spatial_trace()
        assert trace == [(64, 32), (32, 16), (16, 8), (8, 4)]

    def test_toy_spatial_trace_clamps_to_one(self):
        trace = toy_config().spatial_trace()
        assert trace == [(8, 4), (4, 2), (2, 1), (1, 1)]

    def test_stage_shape_contract(self):
        # after stage k, extents equal input / (4 * 2^(k-1))
        cfg = paper_dims_config()
        h, w = cfg.spatial_in
        for k, (sh, sw) in enumerate(cfg.spatial_trace(), start=1):
            assert sh == h // (4 * 2 ** (k - 1))
            assert sw == w // (4 * 2 ** (k - 1))


class TestRunStage:
    def test_stage_one_shapes_toy(self):
        enc = MultiExitEncoder(toy_config(), n_classes=3, rng=rng)
        fmap = enc.run_stage(1, FeatureMap(Tensor(rng.standard_normal((2, 32, 16, 3))), 0))
        assert fmap.tensor.shape == (2, 8, 4, 32)
        assert fmap.stage == 1

    def test_stage_one_shapes_paper_dims(self):
        enc = MultiExitEncoder(paper_dims_config(), n_classes=3, rng=rng)
        fmap = enc.run_stage(1, FeatureMap(Tensor(rng.standard_normal((2, 256, 128, 3))), 0))
        assert fmap.tensor.shape == (2, 64, 32, 256)

    def test_out_of_order_stage_rejected(self):
        enc = MultiExitEncoder(toy_config(), n_classes=3, rng=rng)
        with pytest.raises(PipelineError):
            enc.run_stage(2, FeatureMap(Tensor(rng.standard_normal((1, 32, 16, 3))), 0))

    def test_identity_initialized_patch_mix_averages(self):
        # 1-channel degenerate stage: weights 1/4 reproduce 2x2 mean pooling
        enc = MultiExitEncoder(toy_config(), n_classes=3, rng=rng)
        enc.stages[1] = LayerParams(
            weights=Tensor(np.full((4, 1), 0.25)), bias=Tensor(np.zeros(1))
        )
        x = np.abs(rng.standard_normal((1, 8, 4, 1)))  # positive: ReLU inactive
        out = enc.run_stage(2, FeatureMap(Tensor(x), 1))
        pooled = x.reshape(1, 4, 2, 2, 2, 1).mean(axis=(2, 4))
        assert np.allclose(out.tensor.data, pooled)


class TestPartPool:
    def test_constant_map(self):
        fmap = FeatureMap(Tensor(np.full((2, 8, 4, 16), 3.5)), 1)
        out = part_pool(fmap)
        assert out.shape == (2, 64)
        assert np.allclose(out.data, 3.5)

    def test_band_means_stack_in_order(self):
        x = np.zeros((1, 8, 4, 3))
        for band in range(4):
            x[:, band * 2 : (band + 1) * 2] = band + 1
        out = part_pool(FeatureMap(Tensor(x), 1)).data.reshape(4, 3)
        for band in range(4):
            assert np.allclose(out[band], band + 1)

    def test_paper_dims_band_geometry(self):
        # 64x32x256 -> four 16x32 bands -> 1024-dim vector
        fmap = FeatureMap(Tensor(rng.standard_normal((1, 64, 32, 256))), 1)
        assert part_pool(fmap).shape == (1, 1024)

    def test_height_not_divisible_rejected(self):
        with pytest.raises(ConfigError):
            part_pool(FeatureMap(Tensor(np.zeros((1, 6, 4, 2))), 1))

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_permutation_within_band_invariant(self, seed):
        g = np.random.default_rng(seed)
        x = g.standard_normal((1, 8, 4, 5))
        base = part_pool(FeatureMap(Tensor(x), 1)).data
        shuffled = x.copy()
        band = g.integers(0, 4)
        rows = slice(band * 2, (band + 1) * 2)
        flat = shuffled[0, rows].reshape(-1, 5)
        shuffled[0, rows] = flat[g.permutation(flat.shape[0])].reshape(2, 4, 5)
        assert np.allclose(part_pool(FeatureMap(Tensor(shuffled), 1)).data, base)

    def test_bandwise_constant_shift_equivariance(self):
        x = rng.standard_normal((1, 8, 4, 3))
        base = part_pool(FeatureMap(Tensor(x), 1)).data.reshape(4, 3)
        shifted = x.copy()
        shifted[0, 2:4] += 5.0  # band 1
        out = part_pool(FeatureMap(Tensor(shifted), 1)).data.reshape(4, 3)
        assert np.allclose(out[1], base[1] + 5.0)
        assert np.allclose(out[[0, 2, 3]], base[[0, 2, 3]])


class TestHashExit:
    def setup_method(self):
        self.enc = MultiExitEncoder(toy_config(), n_classes=5, rng=np.random.default_rng(3))

    def test_stage_four_is_bn_only_width(self):
        feat = Tensor(rng.standard_normal((4, 256)))
        out = self.enc.hash_exit(4, feat, mode="infer")
        assert out.code.length == 256
        assert out.embedding.shape == (4, 256)

    def test_stage_one_maps_bands_to_base_code(self):
        feat = Tensor(rng.standard_normal((4, 128)))  # 4 bands x 32 channels
        out = self.enc.hash_exit(1, feat, mode="infer")
        assert out.code.length == 32

    def test_paper_dims_widths(self):
        enc = MultiExitEncoder(paper_dims_config(), n_classes=4, rng=np.random.default_rng(1))
        # stage 1 bridge: FC 1024->512, BN, tanh, FC 512->256, BN
        assert enc.exits[0]["fc1"].weights.shape == (1024, 512)
        assert enc.exits[0]["fc2"].weights.shape == (512, 256)
        # stages 3-4: BN only at the stage width
        assert set(enc.exits[2]) == {"bn"}
        assert enc.exits[2]["bn"].weights.shape == (1024,)
        assert enc.exits[3]["bn"].weights.shape == (2048,)

    def test_code_len_override_inserts_fc(self):
        cfg = toy_config(code_lens=(32, 32, 128, 64))
        enc = MultiExitEncoder(cfg, n_classes=3, rng=np.random.default_rng(2))
        assert set(enc.exits[3]) == {"fc", "bn"}
        out = enc.hash_exit(4, Tensor(rng.standard_normal((3, 256))), mode="infer")
        assert out.code.length == 64

    def test_infer_codes_are_signs_of_embedding(self):
        feat = Tensor(rng.standard_normal((6, 256)))
        out = self.enc.hash_exit(4, feat, mode="infer")
        signs = np.where(out.embedding.data > 0, 1, -1)
        assert np.array_equal(hamming.unpack_matrix(out.code), signs)
        assert out.hash_feature is None and out.logits is None

    def test_train_mode_outputs(self):
        feat = Tensor(rng.standard_normal((6, 256)))
        out = self.enc.hash_exit(4, feat, mode="train")
        h = out.hash_feature.data
        assert (h > -1.0).all() and (h < 1.0).all()
        assert out.logits.shape == (6, 5)


class TestForwardAll:
    def test_toy_code_lengths(self):
        enc = MultiExitEncoder(toy_config(), n_classes=4, rng=np.random.default_rng(5))
        exits, pooled = enc.forward_all(rng.standard_normal((3, 32, 16, 3)), mode="infer")
        assert [e.code.length for e in exits] == [32, 32, 128, 256]
        assert [p.shape[1] for p in pooled] == [128, 64, 128, 256]

    def test_forward_is_pure_and_deterministic(self):
        enc = MultiExitEncoder(toy_config(), n_classes=4, rng=np.random.default_rng(5))
        x = rng.standard_normal((2, 32, 16, 3))
        running = enc.exits[0]["bn1"].running_mean.data.copy()
        one, _ = enc.forward_all(x, mode="infer")
        two, _ = enc.forward_all(x, mode="infer")
        for a, b in zip(one, two):
            assert np.array_equal(a.embedding.data, b.embedding.data)
            assert np.array_equal(a.code.words, b.code.words)
        assert np.array_equal(enc.exits[0]["bn1"].running_mean.data, running)

    def test_wrong_spatial_rejected(self):
        enc = MultiExitEncoder(toy_config(), n_classes=4, rng=np.random.default_rng(5))
        with pytest.raises(DimensionError):
            enc.forward_all(rng.standard_normal((2, 16, 16, 3)))

    def test_encode_casts_features_to_float32(self):
        enc = MultiExitEncoder(toy_config(), n_classes=4, rng=np.random.default_rng(5))
        codes, s1 = enc.encode(rng.standard_normal((2, 32, 16, 3)))
        assert s1.dtype == np.float32
        assert [c.stage for c in codes] == [1, 2, 3, 4]


class TestCheckpointCompat:
    def test_named_params_cover_running_stats(self):
        enc = MultiExitEncoder(toy_config(), n_classes=4, rng=np.random.default_rng(5))
        names = enc.named_params()
        assert "he1.bn1.running_mean" in names
        assert "he4.bn.running_var" in names
        assert "cls4.weights" in names
        trainable = enc.trainable_params()
        assert "he1.bn1.running_mean" not in trainable


def test_stage_flops_positive_and_ordered():
    flops = stage_flops(paper_dims_config())
    assert len(flops) == 4
    assert all(f > 0 for f in flops)
    # stage 1 includes the stem over the largest grid; totals stay plausible
    assert sum(flops) > flops[0]
