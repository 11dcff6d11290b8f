import numpy as np
import pytest

from svfreg.grid import (GridPoint, ScalarVolume, VectorField, central_gradient,
                         clip_rescale, resample, resample_to, trilinear_sample,
                         trilinear_sample_adjoint, upsample_field)
from tests.conftest import oracle_trilinear, smooth_volume


class TestContainers:
    def test_scalar_volume_validates(self):
        with pytest.raises(ValueError):
            ScalarVolume(np.zeros((1, 4, 4)))
        with pytest.raises(ValueError):
            ScalarVolume(np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            ScalarVolume(np.zeros((4, 4)))

    def test_vector_field_requires_three_channels(self):
        with pytest.raises(ValueError):
            VectorField(np.zeros((2, 4, 4, 4)))

    def test_vector_field_rejects_non_finite(self):
        data = np.zeros((3, 4, 4, 4))
        data[1, 2, 2, 2] = np.nan
        with pytest.raises(ValueError, match="finite"):
            VectorField(data)


class TestTrilinearSample:
    def test_grid_nodes_reproduce_stored_values(self, rng):
        vol = ScalarVolume(rng.normal(size=(5, 6, 7)))
        pts = [(x, y, z) for x in range(5) for y in range(6) for z in range(7)]
        vals = trilinear_sample(vol, pts)
        assert np.array_equal(vals, vol.data.ravel())

    def test_integer_coordinate_point(self, rng):
        vol = ScalarVolume(rng.normal(size=(6, 6, 6)))
        assert trilinear_sample(vol, [GridPoint(2, 3, 4)])[0] == vol.data[2, 3, 4]

    def test_midpoint_is_average(self):
        data = np.zeros((4, 4, 4))
        data[2] = 1.0
        vol = ScalarVolume(data)
        assert trilinear_sample(vol, [(1.5, 1, 1)])[0] == pytest.approx(0.5)

    def test_matches_8_corner_oracle(self, rng):
        vol = smooth_volume((10, 9, 11), sigma=1.5, seed=3)
        pts = np.column_stack([rng.uniform(1, d - 2, 100) for d in vol.dims])
        vals = trilinear_sample(vol, pts)
        for i, p in enumerate(pts):
            want = oracle_trilinear(vol.data, p)
            assert vals[i] == pytest.approx(want, rel=1e-12, abs=1e-14)

    def test_out_of_bounds_clamps(self, rng):
        vol = ScalarVolume(rng.normal(size=(5, 5, 5)))
        far = trilinear_sample(vol, [(-10.0, 2, 2), (40.0, 2, 2)])
        assert far[0] == vol.data[0, 2, 2]
        assert far[1] == vol.data[4, 2, 2]

    def test_vector_field_sampling(self, rng):
        fld = VectorField(rng.normal(size=(3, 5, 5, 5)))
        vals = trilinear_sample(fld, [(1, 2, 3)])
        assert vals.shape == (1, 3)
        assert np.array_equal(vals[0], fld.data[:, 1, 2, 3])

    def test_non_finite_point_rejected(self, rng):
        vol = ScalarVolume(rng.normal(size=(4, 4, 4)))
        with pytest.raises(ValueError, match="non-finite sample coordinate"):
            trilinear_sample(vol, [(np.nan, 1, 1)])


class TestSampleAdjoint:
    def test_integer_point_single_one(self):
        grad = trilinear_sample_adjoint((5, 5, 5), [(2.0, 3.0, 4.0)], np.array([1.0]))
        want = np.zeros((5, 5, 5))
        want[2, 3, 4] = 1.0
        assert np.array_equal(grad, want)

    def test_midpoint_splits_half_half(self):
        grad = trilinear_sample_adjoint((4, 4, 4), [(1.5, 2.0, 2.0)], np.array([1.0]))
        assert grad[1, 2, 2] == pytest.approx(0.5)
        assert grad[2, 2, 2] == pytest.approx(0.5)
        assert grad.sum() == pytest.approx(1.0)

    def test_adjoint_identity_100_random_sets(self, rng):
        dims = (7, 8, 6)
        for _ in range(100):
            vol = ScalarVolume(rng.normal(size=dims))
            pts = np.column_stack([rng.uniform(-1, d, 30) for d in dims])
            g = rng.normal(size=30)
            lhs = float(np.dot(trilinear_sample(vol, pts), g))
            rhs = float(np.sum(vol.data * trilinear_sample_adjoint(dims, pts, g)))
            assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="does not match point count"):
            trilinear_sample_adjoint((4, 4, 4), [(1, 1, 1)], np.ones(3))


class TestCentralGradient:
    def test_constant_volume_zero_gradient(self):
        g = central_gradient(ScalarVolume(np.full((5, 5, 5), 3.2)))
        assert np.all(g.data == 0)

    def test_linear_ramp_exact(self):
        x = np.arange(7.0)
        vol = ScalarVolume(np.broadcast_to(3.0 * x[:, None, None], (7, 7, 7)).copy())
        g = central_gradient(vol)
        assert np.allclose(g.data[0], 3.0)
        assert np.all(g.data[1] == 0) and np.all(g.data[2] == 0)

    def test_quadratic_interior_exact(self):
        # central difference of x^2 is exactly 2x
        x = np.arange(9.0)
        vol = ScalarVolume(np.broadcast_to((x ** 2)[:, None, None], (9, 9, 9)).copy())
        g = central_gradient(vol)
        want = 2.0 * x[1:-1]
        assert np.allclose(g.data[0][1:-1], want[:, None, None] * np.ones((7, 9, 9)))


class TestResample:
    def test_factor_one_identity(self, rng):
        vol = ScalarVolume(rng.normal(size=(6, 7, 8)), spacing=(1.5, 1.5, 1.5))
        out = resample(vol, 1.0)
        assert np.array_equal(out.data, vol.data)
        assert out.spacing == vol.spacing

    def test_constant_stays_constant(self):
        vol = ScalarVolume(np.full((8, 8, 8), 0.7))
        for factor in (0.5, 1.3, 2.0):
            out = resample(vol, factor)
            assert np.allclose(out.data, 0.7)

    def test_upsample_ramp_halves_slope(self):
        # cell-centered 2x upsample of a linear ramp halves the per-voxel
        # slope exactly (analytic resampling oracle); boundary clamping
        # flattens the outermost voxels, so check the interior
        n = 8
        x = np.arange(float(n))
        vol = ScalarVolume(np.broadcast_to(x[:, None, None], (n, n, n)).copy())
        out = resample(vol, 2.0)
        interior = out.data[1:-1, 4, 4]
        diffs = np.diff(interior)
        assert np.allclose(diffs, 0.5)
        # physical extent preserved
        assert out.spacing == (0.5, 0.5, 0.5)
        assert out.dims == (16, 16, 16)

    def test_degenerate_target_rejected(self):
        vol = ScalarVolume(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            resample(vol, 0.1)
        with pytest.raises(ValueError):
            resample(vol, -1.0)
        with pytest.raises(ValueError):
            resample_to(vol, (1, 4, 4))


class TestUpsampleField:
    def test_component_rescaling_constant_field(self):
        data = np.zeros((3, 6, 6, 6))
        data[0] = 1.5
        fld = VectorField(data)
        out = upsample_field(fld, (12, 6, 6))
        # physical displacement preserved: 1.5 voxels on 6 -> 3.0 voxels on 12
        assert np.allclose(out.data[0], 3.0)
        assert np.allclose(out.data[1], 0.0)

    def test_identity_dims(self, rng):
        fld = VectorField(rng.normal(size=(3, 5, 5, 5)))
        out = upsample_field(fld, (5, 5, 5))
        assert np.allclose(out.data, fld.data)


class TestClipRescale:
    def test_clip_bounds(self):
        vol = ScalarVolume(np.array([[[2000.0, 0.0], [-1024.0, -5000.0]],
                                     [[512.0, 1024.0], [-512.0, 100.0]]]))
        out = clip_rescale(vol)
        assert out.data[0, 0, 0] == 1.0
        assert out.data[0, 0, 1] == 0.0
        assert out.data[0, 1, 0] == -1.0
        assert out.data[0, 1, 1] == -1.0
        assert out.data[1, 0, 0] == 0.5

    def test_output_in_unit_range(self, rng):
        vol = ScalarVolume(rng.uniform(-4000, 4000, size=(6, 6, 6)))
        out = clip_rescale(vol)
        assert out.data.min() >= -1.0 and out.data.max() <= 1.0

    def test_rescale_composition_idempotent(self, rng):
        vol = ScalarVolume(rng.uniform(-3000, 3000, size=(5, 5, 5)))
        once = clip_rescale(vol)
        again = clip_rescale(ScalarVolume(once.data * 1024.0, vol.spacing))
        assert np.allclose(once.data, again.data)
