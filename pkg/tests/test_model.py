"""Network assembly: encoder shapes, pyramid pooling, decoder, flop counts."""

import numpy as np
import pytest

from sfalign import tensor as T
from sfalign.errors import ConfigError
from sfalign.fam import FamConfig
from sfalign.model import (LEVELS, ModelConfig, count_flops, decoder_forward,
                           encoder_forward, init_params, model_forward,
                           ppm_forward)


SMALL = dict(stage_channels=(8, 16, 24, 32), fpn_channels=16,
             num_classes=3, norm_groups=4)


def small_cfg(**kw):
    merged = dict(SMALL)
    merged.update(kw)
    cfg = ModelConfig(**merged)
    cfg.validate()
    return cfg


class TestConfig:
    def test_defaults_validate(self):
        ModelConfig().validate()

    def test_rejects_nondivisible_groups(self):
        with pytest.raises(ConfigError, match="norm_groups"):
            ModelConfig(stage_channels=(30, 64, 128, 256)).validate()

    def test_rejects_nonincreasing_bins(self):
        with pytest.raises(ConfigError, match="increasing"):
            ModelConfig(ppm_bins=(1, 3, 3, 6)).validate()


class TestEncoder:
    def test_feature_shapes(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        feats = encoder_forward(params, cfg, T.Tensor(rng.normal(size=(2, 3, 64, 64))))
        assert feats[2].shape == (2, 8, 16, 16)
        assert feats[3].shape == (2, 16, 8, 8)
        assert feats[4].shape == (2, 24, 4, 4)
        assert feats[5].shape == (2, 32, 2, 2)

    def test_rectangular_input(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        feats = encoder_forward(params, cfg, T.Tensor(rng.normal(size=(1, 3, 32, 96))))
        assert feats[5].shape == (1, 32, 1, 3)

    def test_rejects_bad_size(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        with pytest.raises(ValueError, match="multiple"):
            encoder_forward(params, cfg, T.Tensor(np.zeros((1, 3, 48, 64))))

    def test_rejects_bad_channels(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        with pytest.raises(ValueError, match="3"):
            encoder_forward(params, cfg, T.Tensor(np.zeros((1, 1, 64, 64))))


class TestPpm:
    def test_output_shape_and_bin1_constancy(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        f5 = T.Tensor(rng.normal(size=(1, 32, 6, 6)))
        out = ppm_forward(params, cfg, f5)
        assert out.shape == (1, 16, 6, 6)

    def test_oversized_bins_warn_and_still_run(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        f5 = T.Tensor(rng.normal(size=(1, 32, 2, 2)))
        with pytest.warns(RuntimeWarning, match="bin"):
            out = ppm_forward(params, cfg, f5)
        assert out.shape == (1, 16, 2, 2)

    def test_param_shapes_do_not_depend_on_input_size(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        for size in (64, 192):
            x = T.Tensor(rng.normal(size=(1, 3, size, size)))
            out = model_forward(params, cfg, x)
            assert out["logits"].shape == (1, 3, size, size)


class TestDecoder:
    def test_logits_shape(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        out = model_forward(params, cfg, T.Tensor(rng.normal(size=(2, 3, 64, 64))))
        assert out["logits"].shape == (2, 3, 64, 64)
        assert "aux" not in out

    def test_aux_shapes_in_train_mode(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        out = model_forward(params, cfg,
                            T.Tensor(rng.normal(size=(1, 3, 64, 64))),
                            train_mode=True)
        shapes = [a.shape for a in out["aux"]]
        assert shapes == [(1, 3, 16, 16), (1, 3, 8, 8), (1, 3, 4, 4)]

    def test_collect_exposes_flows(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        out = model_forward(params, cfg,
                            T.Tensor(rng.normal(size=(1, 3, 64, 64))),
                            collect=True)
        assert sorted(out["flows"]) == ["fam2", "fam3", "fam4",
                                        "fuse_fam3", "fuse_fam4", "fuse_fam5"]
        assert out["flows"]["fam2"].shape == (1, 2, 16, 16)
        assert out["flows"]["fuse_fam5"].shape == (1, 2, 16, 16)

    def test_zero_init_alignment_matches_plain_upsampling(self, rng):
        """With every flow conv still zero, the aligned network must produce
        bit-identical logits to the bilinear variant sharing its weights."""
        cfg_fam = small_cfg(use_fam=True)
        cfg_up = small_cfg(use_fam=False)
        params_fam = init_params(cfg_fam, np.random.default_rng(7))
        params_up = T.ParamStore()
        for name, t in params_fam.items():
            if ".fam" in name or "fuse_fam" in name:
                continue
            params_up.add(name, t.data.copy())
        x = T.Tensor(np.random.default_rng(9).normal(size=(1, 3, 64, 64)))
        out_fam = model_forward(params_fam, cfg_fam, x)
        out_up = model_forward(params_up, cfg_up, x)
        assert np.array_equal(out_fam["logits"].data, out_up["logits"].data)

    def test_no_ppm_variant(self, rng):
        cfg = small_cfg(use_ppm=False)
        params = init_params(cfg, rng)
        assert not any(n.startswith("ppm.") for n in params.names())
        out = model_forward(params, cfg, T.Tensor(rng.normal(size=(1, 3, 64, 64))))
        assert out["logits"].shape == (1, 3, 64, 64)

    def test_forward_is_deterministic(self, rng):
        cfg = small_cfg()
        params = init_params(cfg, rng)
        x = T.Tensor(rng.normal(size=(1, 3, 64, 64)))
        a = model_forward(params, cfg, x)["logits"].data
        b = model_forward(params, cfg, x)["logits"].data
        assert np.array_equal(a, b)

    def test_all_parameters_receive_gradient(self, rng):
        """Every registered tensor must sit on the training graph. Run at a
        size where every pyramid bin is active (192 -> 6x6 top feature)."""
        cfg = small_cfg()
        params = init_params(cfg, rng)
        x = T.Tensor(rng.normal(size=(1, 3, 192, 192)))
        out = model_forward(params, cfg, x, train_mode=True)
        total = T.sum_all(out["logits"])
        for aux in out["aux"]:
            total = T.add(total, T.sum_all(aux))
        T.backward(total)
        silent = [n for n, t in params.items() if np.abs(t.grad).max() == 0.0]
        assert not silent, f"dead parameters: {silent}"


class TestFlops:
    def test_single_conv_hand_case(self):
        # one 3x3 conv, 64 -> 64 channels on a 128x128 map
        from sfalign.model import _conv_flops
        assert _conv_flops(64, 64, 3, 128, 128) == 2 * 9 * 64 * 64 * 128 * 128
        assert _conv_flops(64, 64, 3, 128, 128) == 1207959552

    def test_breakdown_sums_to_total(self):
        cfg = ModelConfig()
        total, breakdown = count_flops(cfg, (1, 3, 64, 64))
        assert total == sum(breakdown.values())

    def test_batch_scales_linearly(self):
        cfg = ModelConfig()
        t1, _ = count_flops(cfg, (1, 3, 64, 64))
        t4, _ = count_flops(cfg, (4, 3, 64, 64))
        assert t4 == 4 * t1

    def test_kernel_grid_strictly_increases(self):
        totals = []
        for k in (1, 3, 5, 7):
            cfg = ModelConfig(fam=FamConfig(kernel_size=k))
            totals.append(count_flops(cfg, (1, 3, 64, 64))[0])
        assert all(b > a for a, b in zip(totals, totals[1:]))

    def test_fam_variant_costs_more_than_bilinear(self):
        t_fam, _ = count_flops(ModelConfig(use_fam=True), (1, 3, 256, 256))
        t_up, _ = count_flops(ModelConfig(use_fam=False), (1, 3, 256, 256))
        assert t_fam > t_up
        assert (t_fam - t_up) / t_up < 0.15

    def test_hand_counted_stem(self):
        cfg = ModelConfig()
        _, breakdown = count_flops(cfg, (1, 3, 64, 64))
        expected = 2 * 9 * 3 * 32 * 32 * 32 + 2 * 9 * 32 * 32 * 16 * 16
        assert breakdown["encoder.stem"] == expected
