import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusereg.volume import (
    BrainMask,
    LandmarkSet,
    MultiContrastStudy,
    Volume3D,
    brain_mask,
    histogram_match,
    znorm_brain,
)

from .oracles import ks_statistic


def vol(data, **kw):
    return Volume3D(np.asarray(data, dtype=np.float32), **kw)


class TestVolume3D:
    def test_rejects_nan(self):
        data = np.zeros((4, 4, 4))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            Volume3D(data)

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            Volume3D(np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))

    def test_shape_and_metadata(self):
        v = vol(np.zeros((2, 3, 4)), spacing=(1, 1, 3), origin=(-5, 0, 2))
        assert v.shape == (2, 3, 4)
        assert v.spacing == (1.0, 1.0, 3.0)
        assert v.origin == (-5.0, 0.0, 2.0)


class TestBrainMask:
    def test_all_zero_volume_is_an_error(self):
        with pytest.raises(ValueError, match="empty mask"):
            brain_mask(vol(np.zeros((8, 8, 8))))

    def test_single_voxel(self):
        data = np.zeros((8, 8, 8))
        data[3, 4, 5] = 5.0
        mask = brain_mask(vol(data))
        assert mask.count == 1
        assert mask.data[3, 4, 5]

    def test_ellipsoid_matches_direct_scan(self):
        zz, yy, xx = np.meshgrid(np.arange(16), np.arange(16), np.arange(16), indexing="ij")
        inside = ((xx - 8) / 6.0) ** 2 + ((yy - 8) / 5.0) ** 2 + ((zz - 8) / 7.0) ** 2 <= 1
        data = np.where(inside, 2.5, 0.0)
        mask = brain_mask(vol(data))
        # direct scan oracle
        count = 0
        for value in data.ravel().tolist():
            if value != 0.0:
                count += 1
        assert mask.count == count

    def test_negative_values_are_foreground(self):
        data = np.zeros((4, 4, 4))
        data[0, 0, 0] = -1.0
        assert brain_mask(vol(data)).count == 1


class TestZnorm:
    def test_two_point_zscore(self):
        data = np.zeros((1, 1, 4))
        data[0, 0, 0] = 1.0
        data[0, 0, 1] = 3.0
        mask = BrainMask(data != 0)
        out = znorm_brain(vol(data), mask)
        assert out.data[0, 0, 0] == pytest.approx(-1.0)
        assert out.data[0, 0, 1] == pytest.approx(1.0)
        assert out.data[0, 0, 2] == 0.0

    def test_constant_region_error(self):
        data = np.full((4, 4, 4), 7.0)
        with pytest.raises(ValueError, match="constant region"):
            znorm_brain(vol(data), BrainMask(np.ones((4, 4, 4), bool)))

    def test_random_volume_moments(self):
        rng = np.random.default_rng(3)
        data = rng.normal(10.0, 4.0, (16, 16, 16))
        v = vol(data)
        mask = brain_mask(v)
        out = znorm_brain(v, mask)
        # recompute moments independently at 64-bit
        sel = out.data[mask.data].astype(np.float64)
        assert abs(sel.mean()) < 1e-6
        assert abs(sel.std() - 1.0) < 1e-6

    def test_background_zeroed_and_input_unmodified(self):
        rng = np.random.default_rng(4)
        data = rng.normal(5.0, 2.0, (8, 8, 8))
        data[:2] = 0.0
        v = vol(data)
        snapshot = v.data.copy()
        mask = brain_mask(v)
        out = znorm_brain(v, mask)
        assert np.array_equal(v.data, snapshot)
        assert np.all(out.data[:2] == 0.0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        data = rng.normal(3.0, 1.5, (6, 6, 6))
        v = vol(data)
        mask = brain_mask(v)
        once = znorm_brain(v, mask)
        twice = znorm_brain(once, mask)
        assert np.allclose(once.data[mask.data], twice.data[mask.data], atol=1e-6)


class TestHistogramMatch:
    @staticmethod
    def _bin_width(values, nbins):
        return (values.max() - values.min()) / nbins

    def test_invalid_bins(self):
        v = vol(np.ones((4, 4, 4)))
        m = BrainMask(np.ones((4, 4, 4), bool))
        with pytest.raises(ValueError, match="invalid bins"):
            histogram_match(v, v, m, m, nbins=1)

    def test_identity_match(self):
        rng = np.random.default_rng(5)
        data = rng.normal(0, 1, (12, 12, 12))
        v = vol(data)
        m = BrainMask(np.ones(v.shape, bool))
        out = histogram_match(v, v, m, m, nbins=64)
        width = self._bin_width(data, 64)
        assert np.abs(out.data - v.data).max() <= width + 1e-6

    def test_constant_shift_recovered(self):
        rng = np.random.default_rng(6)
        ref_data = rng.normal(0, 1, (12, 12, 12))
        src_data = ref_data + 2.5
        m = BrainMask(np.ones((12, 12, 12), bool))
        out = histogram_match(vol(src_data), vol(ref_data), m, m, nbins=128)
        width = self._bin_width(src_data, 128)
        assert np.abs(out.data - ref_data.astype(np.float32)).max() <= width + 1e-6

    def test_ks_statistic_decreases(self):
        rng = np.random.default_rng(7)
        src_data = rng.gamma(2.0, 2.0, (14, 14, 14))
        ref_data = rng.normal(5.0, 1.0, (14, 14, 14))
        m = BrainMask(np.ones((14, 14, 14), bool))
        out = histogram_match(vol(src_data), vol(ref_data), m, m)
        before = ks_statistic(src_data, ref_data)
        after = ks_statistic(out.data[m.data], ref_data)
        assert after < before

    def test_background_unchanged(self):
        rng = np.random.default_rng(8)
        src_data = rng.normal(4, 1, (10, 10, 10))
        src_data[:3] = 0.0
        ref_data = rng.normal(9, 2, (10, 10, 10))
        ref_data[:2] = 0.0
        src_v, ref_v = vol(src_data), vol(ref_data)
        out = histogram_match(src_v, ref_v, brain_mask(src_v), brain_mask(ref_v))
        assert np.array_equal(out.data[:3], src_v.data[:3])


class TestLandmarkSet:
    def test_duplicate_id(self):
        with pytest.raises(ValueError, match="duplicate landmark id 7"):
            LandmarkSet.from_entries([(7, 0, 0, 0), (7, 1, 1, 1)])

    def test_order_preserved(self):
        lms = LandmarkSet.from_entries([(3, 1, 2, 3), (1, 4, 5, 6), (2, 7, 8, 9)])
        assert lms.ids == (3, 1, 2)
        assert lms.point_of(1).tolist() == [4.0, 5.0, 6.0]


class TestMultiContrastStudy:
    def test_shape_consistency_enforced(self):
        a = vol(np.zeros((4, 4, 4)))
        b = vol(np.zeros((4, 4, 5)))
        with pytest.raises(ValueError, match="shape"):
            MultiContrastStudy(t1=a, t1ce=a, t2=a, flair=b)

    def test_contrast_order(self):
        a = vol(np.zeros((2, 2, 2)))
        study = MultiContrastStudy(t1=a, t1ce=a, t2=a, flair=a, study_id="s")
        assert study.contrasts() == (study.t1ce, study.t1, study.flair, study.t2)
