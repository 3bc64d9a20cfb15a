"""Sampling and warping: coordinate convention, clamping, identities, gradients."""

import numpy as np
import pytest

from sfalign import tensor as T
from sfalign import warp as W

from oracles import bilinear_sample_loops, fd_grad, rel_err


def mixed_sum(t, mix):
    return T.sum_all(T.mul_const(t, mix))


class TestMapCoords:
    def test_basic(self):
        assert W.map_coords((4.0, 6.0), (2.0, -2.0), 2.0) == (3.0, 2.0)

    def test_zero_delta_is_pure_scaling(self):
        assert W.map_coords((6.0, 4.0), (0.0, 0.0), 2.0) == (3.0, 2.0)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError, match="positive"):
            W.map_coords((1.0, 1.0), (0.0, 0.0), 0.0)


class TestWarpGrid:
    def test_weights_partition_unity(self, rng):
        coords = rng.uniform(-1.0, 6.0, size=(2, 2, 5, 5))
        grid = W.build_warp_grid(coords, 4, 4)
        total = sum(grid.weights())
        assert np.allclose(total, 1.0, atol=1e-12)

    def test_neighbors_stay_in_bounds(self, rng):
        coords = rng.uniform(-3.0, 9.0, size=(1, 2, 6, 6))
        grid = W.build_warp_grid(coords, 4, 5)
        for arr, hi in ((grid.y0, 4), (grid.y1, 4), (grid.x0, 5), (grid.x1, 5)):
            assert arr.min() >= 0 and arr.max() < hi


class TestBilinearSample:
    def sample_at(self, src_row, cy, cx):
        src = np.asarray(src_row, dtype=np.float64).reshape(1, 1, 1, -1) \
            if np.ndim(src_row) == 1 else np.asarray(src_row)[None, None]
        coords = np.array([[[[cy]], [[cx]]]], dtype=np.float64)
        return W.bilinear_sample(T.Tensor(src), coords).data[0, 0, 0, 0]

    def test_integer_coordinate_hits_pixel(self):
        src = np.array([[1.0, 3.0], [5.0, 9.0]])
        assert self.sample_at(src, 1.0, 0.0) == 5.0

    def test_midpoint_averages_four_neighbors(self):
        src = np.array([[1.0, 3.0], [5.0, 9.0]])
        assert self.sample_at(src, 0.5, 0.5) == (1 + 3 + 5 + 9) / 4

    def test_clamps_to_border(self):
        src = np.array([[1.0, 3.0], [5.0, 9.0]])
        assert self.sample_at(src, -0.5, 0.0) == 1.0
        assert self.sample_at(src, 5.0, 5.0) == 9.0

    def test_clamped_direction_has_zero_coord_gradient(self):
        src = T.Tensor(np.array([[1.0, 3.0], [5.0, 9.0]]).reshape(1, 1, 2, 2))
        coords = T.Tensor(np.array([[[[-0.5]], [[0.5]]]]), requires_grad=True)
        out = W.bilinear_sample(src, coords)
        T.backward(T.sum_all(out))
        assert coords.grad[0, 0, 0, 0] == 0.0   # y was clamped
        assert coords.grad[0, 1, 0, 0] != 0.0   # x is interior

    def test_matches_loop_oracle(self, rng):
        src = rng.normal(size=(2, 3, 5, 6))
        coords = rng.uniform(-1.0, 7.0, size=(2, 2, 4, 8))
        got = W.bilinear_sample(T.Tensor(src), coords).data
        want = bilinear_sample_loops(src, coords)
        assert np.allclose(got, want, atol=1e-12)

    def test_constant_field_is_preserved(self, rng):
        src = T.Tensor(np.full((1, 2, 4, 4), 3.25))
        coords = rng.uniform(-2.0, 6.0, size=(1, 2, 7, 7))
        out = W.bilinear_sample(src, coords)
        assert np.allclose(out.data, 3.25, atol=1e-12)

    def test_locality(self, rng):
        # changing one source pixel only changes outputs that sample near it
        src = rng.normal(size=(1, 1, 6, 6))
        coords = rng.uniform(0.0, 5.0, size=(1, 2, 10, 10))
        base = W.bilinear_sample(T.Tensor(src), coords).data
        src2 = src.copy()
        src2[0, 0, 2, 3] += 10.0
        bumped = W.bilinear_sample(T.Tensor(src2), coords).data
        changed = np.argwhere(np.abs(bumped - base)[0, 0] > 0)
        for i, j in changed:
            cy, cx = coords[0, 0, i, j], coords[0, 1, i, j]
            assert np.floor(cy) in (1.0, 2.0) and np.floor(cx) in (2.0, 3.0)

    def test_source_gradient_finite_differences(self, rng):
        src = rng.normal(size=(1, 2, 4, 4))
        coords = rng.uniform(0.2, 2.8, size=(1, 2, 3, 3))
        st = T.Tensor(src, requires_grad=True)
        out = W.bilinear_sample(st, coords)
        mix = rng.normal(size=out.shape)
        T.backward(mixed_sum(out, mix))

        def f():
            return float((bilinear_sample_loops(src, coords) * mix).sum())

        assert rel_err(st.grad, fd_grad(f, src)) < 1e-5

    def test_coords_gradient_finite_differences(self, rng):
        src = rng.normal(size=(1, 2, 5, 5))
        # keep coordinates well away from the integer lattice and the borders
        coords = np.floor(rng.uniform(0, 4, size=(1, 2, 4, 4))) \
            + rng.uniform(0.2, 0.8, size=(1, 2, 4, 4))
        coords = np.clip(coords, 0.2, 3.8)
        ct = T.Tensor(coords.copy(), requires_grad=True)
        out = W.bilinear_sample(T.Tensor(src), ct)
        mix = rng.normal(size=out.shape)
        T.backward(mixed_sum(out, mix))

        def f():
            return float((bilinear_sample_loops(src, coords) * mix).sum())

        assert rel_err(ct.grad, fd_grad(f, coords)) < 1e-4


class TestWarpFeature:
    def test_horizontal_shift(self):
        row = T.Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4))
        flow = np.zeros((1, 2, 1, 4))
        flow[0, 1] = 1.0  # dx = +1 everywhere
        out = W.warp_feature(row, T.Tensor(flow), 1)
        assert np.allclose(out.data.ravel(), [2.0, 3.0, 4.0, 4.0])

    def test_zero_flow_equals_upsample_bitwise(self, rng):
        for _ in range(10):
            n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            x = T.Tensor(rng.normal(size=(n, c, h, w)))
            for s in (2, 4):
                flow = T.Tensor(np.zeros((n, 2, h * s, w * s)))
                a = W.warp_feature(x, flow, s).data
                b = W.upsample_bilinear(x, s).data
                assert np.array_equal(a, b)

    def test_rejects_bad_scale_relation(self):
        x = T.Tensor(np.zeros((1, 1, 4, 4)))
        flow = T.Tensor(np.zeros((1, 2, 6, 6)))
        with pytest.raises(ValueError, match="scale"):
            W.warp_feature(x, flow, 2)

    def test_flow_gradient_reaches_flow(self, rng):
        x = T.Tensor(rng.normal(size=(1, 3, 3, 3)))
        flow = T.Tensor(rng.uniform(0.1, 0.4, size=(1, 2, 6, 6)), requires_grad=True)
        out = W.warp_feature(x, flow, 2)
        T.backward(T.sum_all(out))
        assert flow.grad is not None and np.abs(flow.grad).max() > 0

    def test_flow_gradient_finite_differences(self, rng):
        src = rng.normal(size=(1, 2, 4, 4))
        flow = np.floor(rng.uniform(0, 3, size=(1, 2, 8, 8))) \
            + rng.uniform(0.25, 0.75, size=(1, 2, 8, 8))
        ft = T.Tensor(flow.copy(), requires_grad=True)
        out = W.warp_feature(T.Tensor(src), ft, 2)
        mix = rng.normal(size=out.shape)
        T.backward(mixed_sum(out, mix))

        def f():
            coords = (W.base_grid(8, 8)[None] + flow) / 2.0
            return float((bilinear_sample_loops(src, coords) * mix).sum())

        assert rel_err(ft.grad, fd_grad(f, flow)) < 1e-4


class TestUpsample:
    def test_factor_two_golden(self):
        # brute-force sampler oracle on [1, 3]: coords 0, .5, 1, 1.5->clamped 1
        x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
        ys, xs = np.meshgrid(np.arange(2) / 2.0, np.arange(4) / 2.0, indexing="ij")
        want = bilinear_sample_loops(x, np.stack([ys, xs])[None])
        assert np.allclose(want[0, 0], [[1.0, 2.0, 3.0, 3.0]] * 2)
        got = W.upsample_bilinear(T.Tensor(x), 2)
        assert np.array_equal(got.data, want)

    def test_factor_one_is_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        assert np.array_equal(W.upsample_bilinear(T.Tensor(x), 1).data, x)

    def test_output_shape(self, rng):
        x = T.Tensor(rng.normal(size=(1, 2, 3, 5)))
        assert W.upsample_bilinear(x, 4).shape == (1, 2, 12, 20)

    def test_nearest_repeats_pixels(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = W.upsample_nearest(x, 2)
        assert np.array_equal(out.data[0, 0], np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float64))

    def test_nearest_gradient_sums_blocks(self, rng):
        x = T.Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
        out = W.upsample_nearest(x, 3)
        T.backward(T.sum_all(out))
        assert np.allclose(x.grad, 9.0)

    def test_upsample_gradient_finite_differences(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        xt = T.Tensor(x, requires_grad=True)
        out = W.upsample_bilinear(xt, 2)
        mix = rng.normal(size=out.shape)
        T.backward(mixed_sum(out, mix))

        def f():
            coords = W.base_grid(6, 6)[None] / 2.0
            return float((bilinear_sample_loops(x, coords) * mix).sum())

        assert rel_err(xt.grad, fd_grad(f, x)) < 1e-5


class TestResize:
    def test_matches_integer_upsample(self, rng):
        x = rng.normal(size=(1, 2, 3, 4))
        a = W.resize_bilinear(T.Tensor(x), 6, 8).data
        b = W.upsample_bilinear(T.Tensor(x), 2).data
        assert np.allclose(a, b, atol=1e-12)

    def test_downscale_from_single_pixel_bin(self, rng):
        x = rng.normal(size=(1, 3, 1, 1))
        out = W.resize_bilinear(T.Tensor(x), 4, 4)
        assert np.allclose(out.data, np.broadcast_to(x, (1, 3, 4, 4)))

    def test_non_integer_ratio(self):
        x = T.Tensor(np.arange(3.0).reshape(1, 1, 1, 3))
        out = W.resize_bilinear(x, 1, 8)
        coords = np.stack([np.zeros(8), np.arange(8) * (3 / 8)])[None].reshape(1, 2, 1, 8)
        want = bilinear_sample_loops(x.data, coords)
        assert np.allclose(out.data, want, atol=1e-12)


class TestInferenceRoutes:
    """The no-grad sampler takes leaner gather routes; they must agree with the
    tracked kernel to roundoff and stay bit-identical to each other where the
    zero-flow identity depends on it."""

    def test_no_grad_matches_tracked_values(self, rng):
        for _ in range(8):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(1, 6))
            h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            src = rng.normal(size=(n, c, h, w))
            coords = rng.uniform(-1.5, h + 1.5, size=(n, 2, 5, 7))
            tracked = W.bilinear_sample(T.Tensor(src), coords).data
            with T.no_grad():
                lean = W.bilinear_sample(T.Tensor(src), coords).data
            assert np.allclose(lean, tracked, atol=1e-12)

    def test_rows_route_matches_tracked_values(self, rng, monkeypatch):
        monkeypatch.setattr(W, "_ROWS_ROUTE_MIN", 1)
        for n in (1, 2):
            src = rng.normal(size=(n, 4, 6, 5))
            coords = rng.uniform(-1.0, 7.0, size=(n, 2, 9, 8))
            tracked = W.bilinear_sample(T.Tensor(src), coords).data
            with T.no_grad():
                lean = W.bilinear_sample(T.Tensor(src), coords).data
            assert np.allclose(lean, tracked, atol=1e-12)

    def test_zero_flow_equals_upsample_bitwise_no_grad(self, rng, monkeypatch):
        for route_min in (1, 1 << 18):
            monkeypatch.setattr(W, "_ROWS_ROUTE_MIN", route_min)
            x = T.Tensor(rng.normal(size=(2, 3, 5, 4)))
            flow = T.Tensor(np.zeros((2, 2, 10, 8)))
            with T.no_grad():
                a = W.warp_feature(x, flow, 2).data
                b = W.upsample_bilinear(x, 2).data
            assert np.array_equal(a, b)

    def test_upsample_rows_matches_bilinear(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        rows = W.upsample_rows(x, 3, "bilinear")
        with T.no_grad():
            want = W.upsample_bilinear(T.Tensor(x), 3).data
        got = rows.transpose(0, 2, 1).reshape(want.shape)
        assert np.allclose(got, want, atol=1e-12)

    def test_upsample_rows_matches_nearest(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        rows = W.upsample_rows(x, 2, "nearest")
        got = rows.transpose(0, 2, 1).reshape(1, 2, 6, 6)
        want = W.upsample_nearest(T.Tensor(x), 2).data
        assert np.array_equal(got, want)

    def test_no_grad_warp_coords_match_tracked(self, rng):
        feat = T.Tensor(rng.normal(size=(1, 2, 4, 4)))
        flow = T.Tensor(rng.normal(scale=1.5, size=(1, 2, 8, 8)))
        tracked = W.warp_feature(feat, flow, 2).data
        with T.no_grad():
            lean = W.warp_feature(feat, flow, 2).data
        assert np.allclose(lean, tracked, atol=1e-12)
