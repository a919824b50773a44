import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtscan import msscan
from mtscan import tensor as T
from mtscan.errors import ConfigError
from mtscan.msscan import (
    build_scale_config,
    channel_concat,
    channel_split,
    dms_scan,
    ms_scan,
    multi_scale_flops,
    multi_scale_param_count,
    window_tokenize,
    window_untokenize,
)
from mtscan.ssm import init_ss2d_params, ss2d
from mtscan.tensor import Tensor, grad_check

from oracles import manual_ss2d, np_window_tokenize, np_window_untokenize


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestChannelSplit:
    def test_single_branch_is_identity(self):
        x = Tensor(rand((4, 2, 2)))
        (part,) = channel_split(x, 1)
        np.testing.assert_array_equal(part.data, x.data)

    def test_slabs_are_contiguous(self):
        x = Tensor(rand((4, 2, 2), seed=1))
        lo, hi = channel_split(x, 2)
        np.testing.assert_array_equal(lo.data, x.data[:2])
        np.testing.assert_array_equal(hi.data, x.data[2:])

    def test_split_concat_roundtrip(self):
        x = Tensor(rand((8, 4, 4), seed=2))
        out = channel_concat(channel_split(x, 4))
        np.testing.assert_array_equal(out.data, x.data)

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigError):
            channel_split(Tensor(rand((5, 2, 2))), 2)


class TestWindowTokenize:
    def test_unit_scale_is_identity(self):
        x = Tensor(rand((3, 4, 4)))
        assert window_tokenize(x, 1) is x
        assert window_untokenize(x, 1) is x

    def test_hand_2x2_patch(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))  # [[a,b],[c,d]]
        out = window_tokenize(x, 2)
        assert out.shape == (4, 1, 1)
        np.testing.assert_array_equal(out.data.reshape(-1), [1.0, 2.0, 3.0, 4.0])
        back = window_untokenize(out, 2)
        np.testing.assert_array_equal(back.data, x.data)

    def test_matches_axis_shuffle_reference(self):
        x = rand((3, 8, 4), seed=3)
        out = window_tokenize(Tensor(x), 2)
        np.testing.assert_array_equal(out.data, np_window_tokenize(x, 2))
        back = window_untokenize(out, 2)
        np.testing.assert_array_equal(back.data, np_window_untokenize(out.data, 2))

    def test_roundtrip_2x4x4(self):
        x = Tensor(rand((2, 4, 4), seed=4))
        out = window_untokenize(window_tokenize(x, 2), 2)
        np.testing.assert_array_equal(out.data, x.data)

    def test_double_roundtrip_idempotent(self):
        x = Tensor(rand((2, 4, 4), seed=5))
        once = window_untokenize(window_tokenize(x, 2), 2)
        twice = window_untokenize(window_tokenize(once, 2), 2)
        np.testing.assert_array_equal(once.data, twice.data)

    @given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]))
    def test_roundtrip_property(self, seed, s):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 5))
        h = s * int(rng.integers(1, 3))
        w = s * int(rng.integers(1, 3))
        x = Tensor(rng.normal(size=(c, h, w)))
        out = window_untokenize(window_tokenize(x, s), s)
        assert (out.data == x.data).all()

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ConfigError):
            window_tokenize(Tensor(rand((1, 3, 4))), 2)
        with pytest.raises(ConfigError):
            window_untokenize(Tensor(rand((6, 2, 2))), 2)


class TestMsScan:
    def test_degenerate_config_equals_ss2d(self):
        rng = np.random.default_rng(6)
        cfg = build_scale_config(3, (1,), 4, rng)
        x = Tensor(rand((3, 4, 4), seed=7))
        a = ms_scan(x, cfg)
        b = ss2d(x, cfg.branch_params[0])
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_zero_input(self):
        cfg = build_scale_config(4, (1, 2), 2, np.random.default_rng(8))
        out = ms_scan(Tensor(np.zeros((4, 4, 4))), cfg)
        np.testing.assert_array_equal(out.data, np.zeros((4, 4, 4)))

    def test_shape_preserved(self):
        cfg = build_scale_config(8, (1, 2), 2, np.random.default_rng(9))
        x = Tensor(rand((8, 4, 8), seed=10))
        assert ms_scan(x, cfg).shape == (8, 4, 8)

    def test_matches_hand_composition(self):
        # independently compose split -> tokenize -> ss2d -> untokenize -> concat
        rng = np.random.default_rng(11)
        cfg = build_scale_config(4, (1, 2), 2, rng)
        x = rand((4, 4, 4), seed=12)
        out = ms_scan(Tensor(x), cfg)

        m = 2
        expected = []
        for i, s in enumerate(cfg.scales):
            part = x[i * m:(i + 1) * m]
            tok = np_window_tokenize(part, s) if s > 1 else part
            scanned = manual_ss2d(tok, cfg.branch_params[i])
            expected.append(np_window_untokenize(scanned, s) if s > 1 else scanned)
        np.testing.assert_allclose(out.data, np.concatenate(expected, axis=0), rtol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(13)
        cfg = build_scale_config(2, (1, 2), 2, rng)

        def f(x):
            return T.sum_(T.silu(ms_scan(x, cfg)))

        assert grad_check(f, Tensor(rng.uniform(-1, 1, (2, 2, 2)))) < 1e-5

    def test_variant_mismatch_rejected(self):
        cfg = build_scale_config(2, (1, 2), 2, np.random.default_rng(14), dilated=True)
        with pytest.raises(ConfigError):
            ms_scan(Tensor(rand((2, 4, 4))), cfg)


class TestDmsScan:
    def test_unit_scale_branch_matches_dense(self):
        rng = np.random.default_rng(15)
        dense = build_scale_config(2, (1,), 2, rng)
        dilated = msscan.ScaleConfig(2, (1,), 2, True, dense.branch_params)
        x = Tensor(rand((2, 4, 4), seed=16))
        np.testing.assert_array_equal(
            dms_scan(x, dilated).data, ms_scan(x, dense).data
        )

    def test_sampled_positions_4x4_s2(self):
        rows = msscan._dilated_sample_rows(4, 4, 2)
        # top-left corners (0,0) (0,2) (2,0) (2,2) in row-major flat indexing
        np.testing.assert_array_equal(rows, [0, 2, 8, 10])

    def test_interpolation_preserves_constants(self):
        coarse = Tensor(np.full((4, 3), 2.5))  # 2x2 coarse grid, 3 channels
        out = msscan._bilinear_upsample_tokens(coarse, 4, 4, 2)
        np.testing.assert_allclose(out.data, np.full((16, 3), 2.5), rtol=1e-15)

    def test_interpolation_weights_partition_unity(self):
        _, wts = msscan._bilinear_plan(8, 8, 4)
        total = sum(w.data for w in wts)
        np.testing.assert_allclose(total, np.ones_like(total), rtol=1e-15)

    def test_shape_preserved(self):
        cfg = build_scale_config(4, (1, 2), 2, np.random.default_rng(17), dilated=True)
        x = Tensor(rand((4, 4, 8), seed=18))
        assert dms_scan(x, cfg).shape == (4, 4, 8)

    def test_dilated_branch_uses_coarse_grid(self):
        # one s=2 branch over a 4x4 grid: oracle = sample, scan 2x2, interpolate
        rng = np.random.default_rng(19)
        cfg = build_scale_config(1, (2,), 2, rng, dilated=True)
        x = rand((1, 4, 4), seed=20)
        out = dms_scan(Tensor(x), cfg)

        coarse = x[:, ::2, ::2]
        scanned = manual_ss2d(coarse, cfg.branch_params[0])
        up = msscan._bilinear_upsample_tokens(
            Tensor(scanned.reshape(1, 4).T), 4, 4, 2
        )
        np.testing.assert_allclose(out.data.reshape(1, 16), up.data.T, rtol=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(21)
        cfg = build_scale_config(2, (1, 2), 2, rng, dilated=True)

        def f(x):
            return T.sum_(T.silu(dms_scan(x, cfg)))

        assert grad_check(f, Tensor(rng.uniform(-1, 1, (2, 4, 4)))) < 1e-5


class TestComplexity:
    def test_dilated_has_fewer_params_when_scaled(self):
        dense = multi_scale_param_count(16, (1, 4), 8, dilated=False)
        dil = multi_scale_param_count(16, (1, 4), 8, dilated=True)
        assert dil < dense

    def test_dilated_params_equal_at_unit_scales(self):
        assert multi_scale_param_count(16, (1,), 8, True) == multi_scale_param_count(
            16, (1,), 8, False
        )

    def test_sampling_and_interpolation_add_no_params(self):
        # a dilated s>1 branch holds exactly the heads of a plain coarse ss2d
        rng = np.random.default_rng(22)
        cfg = build_scale_config(4, (2,), 8, rng, dilated=True)
        n_scalars = sum(
            t.size for heads in cfg.branch_params for p in heads
            for t in p.tensors().values()
        )
        assert n_scalars == multi_scale_param_count(4, (2,), 8, dilated=True)

    def test_dilated_has_fewer_flops_when_scaled(self):
        dense = multi_scale_flops(16, (1, 4), 8, 16, 16, dilated=False)
        dil = multi_scale_flops(16, (1, 4), 8, 16, 16, dilated=True)
        assert dil < dense

    def test_config_param_count_matches_built_params(self):
        rng = np.random.default_rng(23)
        cfg = build_scale_config(8, (1, 2), 4, rng)
        n_scalars = sum(
            t.size for heads in cfg.branch_params for p in heads
            for t in p.tensors().values()
        )
        assert n_scalars == multi_scale_param_count(8, (1, 2), 4, dilated=False)
