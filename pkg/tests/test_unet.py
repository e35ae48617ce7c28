import numpy as np
import pytest

from epiunwarp import autodiff as ad
from epiunwarp import unet
from epiunwarp.errors import ConfigError, ShapeError, WeightsFormatError
from epiunwarp.unet import (UNetConfig, unet_forward, unet_init,
                            weights_load, weights_save)


def rand_pair(shape, seed=0):
    rng = np.random.default_rng(seed)
    return (ad.Tensor(rng.uniform(size=shape)), ad.Tensor(rng.uniform(size=shape)))


class TestConfig:
    def test_kernel_size_fixed(self):
        with pytest.raises(ConfigError):
            UNetConfig(kernel_size=5)

    def test_decoder_length_must_be_depth_plus_one(self):
        with pytest.raises(ConfigError):
            UNetConfig(encoder_filters=(8, 8), decoder_filters=(8, 8))

    def test_final_layer_single_channel(self):
        cfg = UNetConfig()
        assert cfg.layer_channels()[-1] == ("out", cfg.decoder_filters[-1], 1)


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = unet_init(UNetConfig(seed=11))
        b = unet_init(UNetConfig(seed=11))
        for name in a.names():
            assert np.array_equal(a[name].data, b[name].data)

    def test_initial_gdm_near_zero(self):
        w = unet_init(UNetConfig(seed=1))
        t1w, epi = rand_pair((64, 64), seed=2)
        gdm = unet_forward(w, t1w, epi)
        assert np.abs(gdm.data).max() < 0.01

    def test_encoder_halves_to_bottleneck(self):
        # depth 4 on 64x64: four stride-2 convolutions land on 4x4
        w = unet_init(UNetConfig(seed=3))
        h = ad.concat_channels(ad.reshape(rand_pair((64, 64))[0], (1, 64, 64)),
                               ad.reshape(rand_pair((64, 64))[1], (1, 64, 64)))
        for i in range(4):
            h = ad.leaky_relu(ad.conv_nd(h, w[f"enc{i}.kernel"], w[f"enc{i}.bias"], 2), 0.2)
        assert h.shape[1:] == (4, 4)


class TestForward:
    def test_near_zero_final_layer_gives_near_zero_gdm(self):
        w = unet_init(UNetConfig(seed=4))
        for seed in range(3):
            t1w, epi = rand_pair((64, 64), seed=seed)
            assert np.abs(unet_forward(w, t1w, epi).data).max() < 0.01

    @pytest.mark.parametrize("dims,shape,enc,dec", [
        (2, (64, 64), (16, 32, 32, 32), (32, 32, 32, 16, 16)),
        (2, (64, 64), (8, 8), (8, 8, 8)),
        (2, (32, 32), (4, 8, 8), (8, 8, 4, 4)),
        (2, (8, 8), (2, 2), (2, 2, 2)),
        (3, (16, 16, 8), (4, 8), (8, 8, 4)),
        (3, (64, 64, 32), (4, 4, 4, 4), (4, 4, 4, 4, 4)),
    ])
    def test_output_extent_equals_input_extent(self, dims, shape, enc, dec):
        cfg = UNetConfig(dims=dims, encoder_filters=enc, decoder_filters=dec, seed=5)
        w = unet_init(cfg)
        t1w, epi = rand_pair(shape, seed=6)
        assert unet_forward(w, t1w, epi).shape == shape

    def test_forward_deterministic(self):
        w = unet_init(UNetConfig(seed=7))
        t1w, epi = rand_pair((64, 64), seed=8)
        a = unet_forward(w, t1w, epi).data
        b = unet_forward(w, t1w, epi).data
        assert np.array_equal(a, b)

    def test_shape_mismatch_raises(self):
        w = unet_init(UNetConfig(seed=9))
        with pytest.raises(ShapeError):
            unet_forward(w, ad.Tensor(np.zeros((64, 64))), ad.Tensor(np.zeros((64, 32))))

    def test_dims_mismatch_raises_config_error(self):
        w = unet_init(UNetConfig(dims=2, seed=10))
        x = ad.Tensor(np.zeros((16, 16, 8)))
        with pytest.raises(ConfigError):
            unet_forward(w, x, x)

    def test_skip_connections_are_live(self, monkeypatch):
        """Zeroing what flows through the skip concatenations must change
        the output (guards against dead wiring)."""
        cfg = UNetConfig(seed=12)
        w = unet_init(cfg)
        # make the final layer non-trivial so the output is sensitive
        rng = np.random.default_rng(13)
        w["out.kernel"].data = rng.normal(0, 0.1, w["out.kernel"].data.shape).astype(np.float32)
        t1w, epi = rand_pair((64, 64), seed=14)
        normal = unet_forward(w, t1w, epi).data

        real_concat = unet.concat_channels

        def zero_skip_concat(a, b):
            return real_concat(a, ad.Tensor(np.zeros(b.data.shape)))

        monkeypatch.setattr(unet, "concat_channels", zero_skip_concat)
        zeroed = unet_forward(w, t1w, epi).data
        monkeypatch.undo()
        assert not np.allclose(normal, zeroed)

    def test_reduced_config_end_to_end_gradients(self):
        """Composite-loss parameter gradients match finite differences on the
        [2,2]-filter 8x8 configuration (float64 parameters)."""
        from epiunwarp.losses import LossConfig, total_loss

        cfg = UNetConfig(encoder_filters=(2, 2), decoder_filters=(2, 2, 2), seed=15)
        w = unet_init(cfg, dtype=np.float64)
        rng = np.random.default_rng(16)
        # randomize so every path (incl. the near-zero output layer) is live
        for name in w.names():
            w[name].data = rng.normal(0, 0.3, w[name].data.shape)
        t1w, epi = rand_pair((8, 8), seed=17)
        lcfg = LossConfig(mode="self_supervised", lambda_smooth=1.0, cc_window=5)

        def loss_for(_):
            gdm = unet_forward(w, t1w, epi)
            corrected = ad.linear_sample_pe(epi, gdm, 0)
            return total_loss(lcfg, gdm, corrected, t1w)["total"]

        worst = 0.0
        for name in w.names():
            worst = max(worst, ad.grad_check(loss_for, w[name]))
        assert worst < 1e-4


class TestPersistence:
    def test_round_trip_forward_bitwise(self, tmp_path):
        w = unet_init(UNetConfig(seed=20))
        w.meta.update(mode="self_supervised", lambda_smooth="1.0")
        path = tmp_path / "model.bin"
        weights_save(w, path)
        loaded = weights_load(path)
        t1w, epi = rand_pair((64, 64), seed=21)
        assert np.array_equal(unet_forward(w, t1w, epi).data,
                              unet_forward(loaded, t1w, epi).data)

    def test_round_trip_blob_bitwise(self, tmp_path):
        w = unet_init(UNetConfig(seed=22))
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        weights_save(w, p1)
        weights_save(weights_load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_wrong_dims_config_rejected_without_partial_load(self, tmp_path):
        w = unet_init(UNetConfig(dims=2, seed=23))
        path = tmp_path / "model.bin"
        weights_save(w, path)
        with pytest.raises(WeightsFormatError, match="dims"):
            weights_load(path, UNetConfig(dims=3, seed=23))

    def test_manifest_records_mode_and_lambda(self, tmp_path):
        w = unet_init(UNetConfig(seed=24))
        w.meta.update(mode="self_supervised", lambda_smooth="1.0")
        path = tmp_path / "model.bin"
        weights_save(w, path)
        manifest = (tmp_path / "model.bin.manifest").read_text()
        assert "mode=self_supervised" in manifest
        assert "lambda_smooth=1.0" in manifest
        loaded = weights_load(path)
        assert loaded.meta["mode"] == "self_supervised"
        assert loaded.meta["lambda_smooth"] == "1.0"

    def test_shape_mismatch_names_offending_tensor(self, tmp_path):
        w = unet_init(UNetConfig(seed=25))
        path = tmp_path / "model.bin"
        weights_save(w, path)
        manifest_path = tmp_path / "model.bin.manifest"
        text = manifest_path.read_text().replace(
            "tensor=enc1.kernel shape=32,16,3,3", "tensor=enc1.kernel shape=32,16,3,4")
        manifest_path.write_text(text)
        with pytest.raises(WeightsFormatError, match="enc1.kernel"):
            weights_load(path)
