import numpy as np
import pytest

from fusereg.metrics import jacobian_det, landmark_errors, neg_jacobian_fraction
from fusereg.synth import load_case_dir, make_synthetic_case, save_case
from fusereg.volume import DisplacementField


@pytest.fixture(scope="module")
def case():
    return make_synthetic_case(seed=42, size=32)


class TestGenerator:
    def test_size_floor(self):
        with pytest.raises(ValueError, match="32"):
            make_synthetic_case(seed=0, size=16)

    def test_deterministic(self, case):
        again = make_synthetic_case(seed=42, size=32)
        assert np.array_equal(case.gt_field.u, again.gt_field.u)
        assert np.array_equal(case.pre_study.t1.data, again.pre_study.t1.data)
        assert np.array_equal(case.pre_study.landmarks.points, again.pre_study.landmarks.points)

    def test_seed_changes_case(self, case):
        other = make_synthetic_case(seed=43, size=32)
        assert not np.array_equal(case.gt_field.u, other.gt_field.u)

    def test_enough_landmark_pairs(self, case):
        assert len(case.pre_study.landmarks) >= 10
        assert case.pre_study.landmarks.ids == case.post_study.landmarks.ids

    def test_ground_truth_scores_at_interpolation_error(self, case):
        err = landmark_errors(
            case.post_study.landmarks,
            case.pre_study.landmarks,
            case.gt_field,
            case.pre_study.spacing,
            case.pre_study.origin,
        )
        assert np.median(err) < 0.5 * max(case.pre_study.spacing)

    def test_field_is_fold_free_and_bounded(self, case):
        assert neg_jacobian_fraction(jacobian_det(case.gt_field)) == 0.0
        mags = np.sqrt((case.gt_field.u.astype(np.float64) ** 2).sum(axis=0))
        assert mags.max() <= 8.0

    def test_contrasts_are_distinct_monotone_views(self, case):
        pre = case.pre_study
        assert not np.array_equal(pre.t1.data, pre.t2.data)
        assert not np.array_equal(pre.t1ce.data, pre.flair.data)
        # same geometry: zero sets coincide
        assert np.array_equal(pre.t1.data == 0, pre.t2.data == 0)

    def test_post_has_resection_void(self, case):
        from fusereg.warp import warp

        warped_t1 = warp(case.pre_study.t1, case.gt_field)
        post_t1 = case.post_study.t1
        # post = monotone remap of warped, darkened inside a sphere: the
        # ratio dips well below its typical value somewhere
        ratio = post_t1.data[warped_t1.data > 0.2] / warped_t1.data[warped_t1.data > 0.2]
        assert ratio.min() < 0.5 * np.median(ratio)

    def test_initial_error_nonzero(self, case):
        zero = DisplacementField.zero(case.pre_study.shape)
        err = landmark_errors(
            case.post_study.landmarks,
            case.pre_study.landmarks,
            zero,
            case.pre_study.spacing,
            case.pre_study.origin,
        )
        assert np.median(err) > 0.5


class TestCaseDirectory:
    def test_save_load_round_trip(self, case, tmp_path):
        out = save_case(case, tmp_path / "case42")
        pre, post, gt = load_case_dir(out, prefer_preprocessed=False)
        assert np.array_equal(pre.t1.data, case.pre_study.t1.data)
        assert np.array_equal(post.flair.data, case.post_study.flair.data)
        assert np.array_equal(gt.u, case.gt_field.u)
        assert pre.landmarks.ids == case.pre_study.landmarks.ids
        assert np.array_equal(pre.landmarks.points, case.pre_study.landmarks.points)
        assert pre.study_id == "synth-42"

    def test_preprocessed_files_preferred(self, case, tmp_path):
        from fusereg.io import save_volume

        out = save_case(case, tmp_path / "case")
        marked = case.pre_study.t1.with_data(case.pre_study.t1.data + 99.0)
        save_volume(marked, out / "pre_t1_pp.nii.gz")
        pre_pp, _, _ = load_case_dir(out, prefer_preprocessed=True)
        assert pre_pp.t1.data.max() > 99.0
        pre_raw, _, _ = load_case_dir(out, prefer_preprocessed=False)
        assert pre_raw.t1.data.max() < 99.0
