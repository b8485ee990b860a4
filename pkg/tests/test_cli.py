import csv
import json

import numpy as np
import pytest

from fusereg.cli import main
from fusereg.io import load_field, load_volume

TINY_TOML = """
[train]
epochs = 1
steps_per_epoch = 2
seed = 3

[backbone]
variant = "conv-fallback"
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> preprocess -> train pipeline shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    case_dir = root / "data" / "case1"
    assert main(["synth", "--seed", "5", "--size", "32", "--out", str(case_dir)]) == 0
    assert main(["preprocess", "--case", str(case_dir)]) == 0
    config = root / "run.toml"
    config.write_text(TINY_TOML)
    run_dir = root / "run"
    assert main(
        ["train", "--config", str(config), "--data", str(root / "data"), "--out", str(run_dir)]
    ) == 0
    return root


class TestSynth:
    def test_writes_case_files(self, workspace):
        case_dir = workspace / "data" / "case1"
        for prefix in ("pre", "post"):
            for name in ("t1", "t1ce", "t2", "flair"):
                assert (case_dir / f"{prefix}_{name}.nii.gz").exists()
            assert (case_dir / f"{prefix}_landmarks.csv").exists()
        assert (case_dir / "gt_field.nii.gz").exists()
        assert json.loads((case_dir / "case.json").read_text())["study_id"] == "synth-5"

    def test_deterministic_across_invocations(self, workspace, tmp_path):
        other = tmp_path / "again"
        assert main(["synth", "--seed", "5", "--size", "32", "--out", str(other)]) == 0
        a = load_volume(workspace / "data" / "case1" / "pre_t1.nii.gz")
        b = load_volume(other / "pre_t1.nii.gz")
        assert np.array_equal(a.data, b.data)


class TestPreprocess:
    def test_writes_pp_volumes(self, workspace):
        case_dir = workspace / "data" / "case1"
        pp = load_volume(case_dir / "pre_t1_pp.nii.gz")
        mask = np.abs(pp.data) > 0
        raw = load_volume(case_dir / "post_t1_pp.nii.gz")
        sel = raw.data[np.abs(raw.data) > 0].astype(np.float64)
        assert abs(sel.mean()) < 1e-5 and abs(sel.std() - 1) < 1e-5
        assert mask.any()


class TestTrain:
    def test_outputs(self, workspace):
        run_dir = workspace / "run"
        assert (run_dir / "checkpoint.zip").exists()
        lines = (run_dir / "train.log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["step"] == 0


class TestRegister:
    def test_outputs(self, workspace):
        out = workspace / "reg"
        code = main(
            [
                "register",
                "--ckpt", str(workspace / "run" / "checkpoint.zip"),
                "--case", str(workspace / "data" / "case1"),
                "--out", str(out),
            ]
        )
        assert code == 0
        u = load_field(out / "field.nii.gz")
        assert u.shape == (3, 32, 32, 32)
        assert (out / "field.json").exists()
        assert (out / "warped_fused.nii.gz").exists()
        score = json.loads((out / "score.json").read_text())
        assert set(score) >= {"median_ae_mm", "robustness", "neg_jacobian_fraction"}


class TestEvaluate:
    def test_csv_and_json(self, workspace):
        out = workspace / "results.csv"
        code = main(
            [
                "evaluate",
                "--ckpt", str(workspace / "run" / "checkpoint.zip"),
                "--data", str(workspace / "data"),
                "--out", str(out),
            ]
        )
        assert code == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "Case",
            "Initial Median Absolute Error (mm)",
            "Median Absolute Error (mm)",
            "Mean Absolute Error (mm)",
            "Robustness",
            "Negative Jacobian Fraction",
        ]
        labels = [r[0] for r in rows[1:]]
        assert "synth-5" in labels
        assert "summary_median_of_case_medians" in labels
        assert "summary_pooled_landmarks" in labels
        assert json.loads(out.with_suffix(".json").read_text())[0]["case_id"] == "synth-5"


class TestAffine:
    def test_affine_json_and_resampled(self, workspace):
        out = workspace / "affine.json"
        code = main(
            ["affine", "--case", str(workspace / "data" / "case1"), "--out", str(out)]
        )
        assert code == 0
        payload = json.loads(out.read_text())
        assert len(payload["matrix"]) == 3 and len(payload["matrix"][0]) == 4
        assert "final_mse" in payload and "improved" in payload
        assert (workspace / "data" / "case1" / "pre_t1ce_aff.nii.gz").exists()


class TestErrors:
    def test_missing_checkpoint_nonzero_exit(self, tmp_path, capsys):
        code = main(
            ["register", "--ckpt", str(tmp_path / "nope.zip"), "--case", str(tmp_path), "--out", str(tmp_path / "o")]
        )
        assert code != 0
        assert "error:" in capsys.readouterr().err

    def test_synth_too_small(self, tmp_path, capsys):
        code = main(["synth", "--seed", "1", "--size", "8", "--out", str(tmp_path / "c")])
        assert code != 0
        assert "error:" in capsys.readouterr().err
