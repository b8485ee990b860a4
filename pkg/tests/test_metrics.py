import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusereg.metrics import jacobian_det, landmark_errors, neg_jacobian_fraction, summarize
from fusereg.volume import DisplacementField, LandmarkSet, Volume3D
from fusereg.warp import AffineTransform, affine_to_field, compose_affine_after


class TestLandmarkErrors:
    def test_zero_field_coincident(self):
        lms = LandmarkSet.from_entries([(1, 2, 3, 4), (2, 5, 6, 7)])
        err = landmark_errors(lms, lms, DisplacementField.zero((10, 10, 10)), (1, 1, 1), (0, 0, 0))
        assert np.array_equal(err, np.zeros(2))

    def test_three_four_five(self):
        fixed = LandmarkSet.from_entries([(i, 3.0 + i, 3.0, 3.0) for i in range(4)])
        moving = LandmarkSet.from_entries([(i, 6.0 + i, 7.0, 3.0) for i in range(4)])
        err = landmark_errors(fixed, moving, DisplacementField.zero((12, 12, 12)), (1, 1, 1), (0, 0, 0))
        assert np.allclose(err, 5.0)

    def test_id_mismatch_lists_missing(self):
        fixed = LandmarkSet.from_entries([(1, 0, 0, 0), (2, 1, 1, 1)])
        moving = LandmarkSet.from_entries([(1, 0, 0, 0), (3, 1, 1, 1)])
        with pytest.raises(ValueError, match=r"\[2, 3\]"):
            landmark_errors(fixed, moving, DisplacementField.zero((8, 8, 8)), (1, 1, 1), (0, 0, 0))

    def test_matching_by_id_not_order(self):
        fixed = LandmarkSet.from_entries([(1, 2, 2, 2), (2, 4, 4, 4)])
        moving = LandmarkSet.from_entries([(2, 4, 4, 4), (1, 2, 2, 2)])
        err = landmark_errors(fixed, moving, DisplacementField.zero((8, 8, 8)), (1, 1, 1), (0, 0, 0))
        assert np.allclose(err, 0.0)


class TestSummarize:
    def test_no_strict_improvement(self):
        stats = summarize([1.0, 2.0], [1.0, 2.0])
        assert stats.robustness == 0.0

    def test_all_halved(self):
        stats = summarize([2.0, 4.0, 6.0], [1.0, 2.0, 3.0])
        assert stats.robustness == 1.0

    def test_mixed_case_arithmetic(self):
        stats = summarize([5.0, 5.0], [1.0, 9.0])
        assert stats.median_ae == 5.0
        assert stats.mean_ae == 5.0
        assert stats.robustness == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            summarize([], [])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000), st.floats(min_value=0.01, max_value=100.0))
    def test_robustness_scale_invariant(self, seed, scale):
        rng = np.random.default_rng(seed)
        before = rng.uniform(0.1, 10.0, 12)
        after = rng.uniform(0.1, 10.0, 12)
        assert (
            summarize(before, after).robustness
            == summarize(before * scale, after * scale).robustness
        )

    def test_median_permutation_invariant(self):
        rng = np.random.default_rng(1)
        before = rng.uniform(1, 5, 9)
        after = rng.uniform(1, 5, 9)
        perm = rng.permutation(9)
        assert summarize(before, after).median_ae == summarize(before[perm], after[perm]).median_ae


class TestJacobian:
    def test_zero_field_all_ones(self):
        det = jacobian_det(DisplacementField.zero((5, 5, 5)))
        assert np.allclose(det.data, 1.0)

    def test_affine_field_det_of_linear(self):
        rng = np.random.default_rng(2)
        L = np.eye(3) + rng.normal(0, 0.1, (3, 3))
        field = affine_to_field(AffineTransform(L, rng.normal(0, 1, 3)), (8, 8, 8))
        det = jacobian_det(field)
        expected = np.linalg.det(L)
        assert np.abs(det.data[1:-1, 1:-1, 1:-1] - expected).max() < 1e-4

    def test_folding_field(self):
        # u = (-2x, 0, 0): I + du = diag(-1, 1, 1), det -1 everywhere
        D = H = W = 6
        u = np.zeros((3, D, H, W), np.float32)
        u[0] = -2.0 * np.arange(W)[None, None, :]
        det = jacobian_det(DisplacementField(u))
        assert np.allclose(det.data, -1.0, atol=1e-6)
        assert neg_jacobian_fraction(det) == 1.0

    def test_composed_translations_unit_det(self):
        u = DisplacementField(np.full((3, 6, 6, 6), 1.25, np.float32))
        total = compose_affine_after(u, AffineTransform(np.eye(3), np.array([0.5, -1.0, 2.0])))
        det = jacobian_det(total)
        assert np.allclose(det.data, 1.0, atol=1e-6)


class TestNegJacobianFraction:
    def test_all_positive(self):
        assert neg_jacobian_fraction(Volume3D(np.ones((5, 5, 5), np.float32))) == 0.0

    def test_half_and_half(self):
        data = np.ones((6, 6, 6), np.float32)
        data[3:] = -1.0  # interior splits evenly across the z midplane
        assert neg_jacobian_fraction(Volume3D(data)) == 0.5

    def test_boundary_excluded_by_default(self):
        data = np.ones((5, 5, 5), np.float32)
        data[0] = -1.0  # negative only on a face
        assert neg_jacobian_fraction(Volume3D(data)) == 0.0
        assert neg_jacobian_fraction(Volume3D(data), include_boundary=True) > 0.0

    def test_small_smooth_field_has_no_folding(self):
        rng = np.random.default_rng(3)
        from scipy.ndimage import gaussian_filter

        u = np.stack([gaussian_filter(rng.normal(0, 1, (12, 12, 12)), 2.0) for _ in range(3)])
        u *= 0.1 / np.abs(u).max()  # max |u| < 0.1 voxel
        det = jacobian_det(DisplacementField(u.astype(np.float32)))
        assert neg_jacobian_fraction(det) == 0.0
