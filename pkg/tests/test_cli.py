import csv
import hashlib
import json

import numpy as np
import pytest

from text2pose.cli import main
from text2pose.heatmaps import Pose, read_heatmap_file, read_pose_json, write_pose_json


def file_hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestUsageErrors:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_unknown_flag(self, capsys):
        assert main(["inspect-schedule", "--T", "5", "--out", "x.csv", "--bogus"]) == 1

    def test_missing_required_flag(self, capsys):
        assert main(["render", "--out", "x.png"]) == 1


class TestRuntimeErrors:
    def test_missing_file_exits_2(self, tmp_path, capsys):
        rc = main(["decode", "--heatmaps", str(tmp_path / "nope.phm"), "--out", "x.json"])
        assert rc == 2
        assert "Error" in capsys.readouterr().err or True

    def test_error_name_on_stderr(self, tmp_path, capsys):
        bad = tmp_path / "bad.phm"
        bad.write_bytes(b"XXXX" + b"\x00" * 32)
        rc = main(["decode", "--heatmaps", str(bad), "--out", str(tmp_path / "x.json")])
        assert rc == 2
        assert "UnsupportedFormat" in capsys.readouterr().err


class TestInspectSchedule:
    def test_single_step_row(self, tmp_path):
        out = tmp_path / "schedule.csv"
        rc = main(
            ["inspect-schedule", "--T", "1", "--beta-start", "0.5", "--beta-end", "0.5",
             "--out", str(out)]
        )
        assert rc == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["t", "beta", "alpha", "alpha_bar"]
        assert [float(v) for v in rows[1]] == [1.0, 0.5, 0.5, 0.5]
        assert (tmp_path / "schedule.png").exists()


class TestEncodeDecode:
    def test_integer_pose_round_trip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        coords = rng.integers(0, 64, size=(17, 2)).astype(float)
        pose = Pose(coords, np.ones(17, dtype=bool))
        pose_path = tmp_path / "pose.json"
        write_pose_json(pose, pose_path)
        hm_path = tmp_path / "pose.phm"
        out_path = tmp_path / "decoded.json"
        assert main(["encode", "--pose", str(pose_path), "--out", str(hm_path)]) == 0
        assert main(["decode", "--heatmaps", str(hm_path), "--out", str(out_path)]) == 0
        assert pose_path.read_bytes() == out_path.read_bytes()

    def test_heatmap_file_contents(self, tmp_path):
        pose = Pose(np.array([[10.0, 20.0]] * 17), np.ones(17, dtype=bool))
        pose_path = tmp_path / "pose.json"
        write_pose_json(pose, pose_path)
        hm_path = tmp_path / "pose.phm"
        main(["encode", "--pose", str(pose_path), "--out", str(hm_path), "--grid-size", "32"])
        stack = read_heatmap_file(hm_path)
        assert stack.values.shape == (17, 32, 32)
        assert stack.values[0, 20, 10] == 1.0


class TestSynthData:
    def test_writes_manifest_deterministically(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            rc = main(["synth-data", "--count", "3", "--seed", "5", "--out", str(out)])
            assert rc == 0
        assert a.read_bytes() == b.read_bytes()
        assert len(a.read_text().strip().splitlines()) == 15


class TestRender:
    def test_renders_png(self, tmp_path):
        from text2pose.dataset import default_templates

        pose = default_templates()[0].canonical_pose(64)
        pose_path = tmp_path / "pose.json"
        write_pose_json(pose, pose_path)
        out = tmp_path / "pose.png"
        rc = main(["render", "--pose", str(pose_path), "--out", str(out), "--size", "128"])
        assert rc == 0
        assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_train")
    manifest = tmp / "manifest.jsonl"
    assert main(["synth-data", "--count", "2", "--seed", "0", "--out", str(manifest)]) == 0
    out_dir = tmp / "run"
    rc = main(
        ["train", "--manifest", str(manifest), "--out-dir", str(out_dir),
         "--profile", "desk", "--seed", "1", "--steps", "3"]
    )
    assert rc == 0
    return manifest, out_dir


class TestTrainSampleEval:
    def test_train_artifacts(self, trained_dir):
        _, out_dir = trained_dir
        assert (out_dir / "checkpoint.ckpt").exists()
        assert (out_dir / "loss_history.csv").exists()
        assert (out_dir / "loss_curve.png").exists()

    def test_sample_outputs_and_determinism(self, trained_dir, tmp_path):
        _, out_dir = trained_dir
        ckpt = str(out_dir / "checkpoint.ckpt")
        dirs = [tmp_path / "s1", tmp_path / "s2"]
        for d in dirs:
            rc = main(
                ["sample", "--checkpoint", ckpt, "--caption", "t pose", "--count", "2",
                 "--seed", "7", "--out-dir", str(d)]
            )
            assert rc == 0
        for name in ["sample_000.phm", "sample_000.json", "sample_000.png",
                     "sample_001.phm", "sample_001.json", "sample_001.png"]:
            assert (dirs[0] / name).exists()
            assert file_hash(dirs[0] / name) == file_hash(dirs[1] / name)

    def test_eval_report(self, trained_dir, tmp_path):
        manifest, out_dir = trained_dir
        out = tmp_path / "metrics.json"
        rc = main(
            ["eval", "--checkpoint", str(out_dir / "checkpoint.ckpt"),
             "--manifest", str(manifest), "--samples-per-caption", "2",
             "--seed", "3", "--out", str(out), "--max-records", "1"]
        )
        assert rc == 0
        report = json.loads(out.read_text())
        assert {"mse", "variance", "samples_per_caption", "per_caption"} <= set(report)
        assert (tmp_path / "metrics.png").exists()

    def test_no_spatial_block_flag(self, trained_dir, tmp_path):
        manifest, _ = trained_dir
        out_dir = tmp_path / "ablation_run"
        rc = main(
            ["train", "--manifest", str(manifest), "--out-dir", str(out_dir),
             "--profile", "desk", "--seed", "1", "--steps", "2", "--no-spatial-block"]
        )
        assert rc == 0
        from text2pose.model import load_checkpoint

        model, _, _ = load_checkpoint(out_dir / "checkpoint.ckpt")
        assert not model.config.use_graph_block


class TestPrepCoco:
    def test_end_to_end(self, tmp_path):
        kps = []
        for i in range(17):
            kps += [10.0 + i, 20.0 + i, 2]
        kp_path = tmp_path / "kp.json"
        kp_path.write_text(json.dumps({
            "images": [{"id": 1, "width": 100, "height": 80}],
            "annotations": [{"image_id": 1, "keypoints": kps}],
        }))
        cap_path = tmp_path / "cap.json"
        cap_path.write_text(json.dumps({
            "annotations": [{"image_id": 1, "caption": "a person doing things"}],
        }))
        out = tmp_path / "manifest.jsonl"
        rc = main(["prep-coco", "--annotations", str(kp_path), "--captions", str(cap_path),
                   "--out", str(out), "--grid-size", "64"])
        assert rc == 0
        record = json.loads(out.read_text().strip())
        assert record["source"] == "coco"
        assert len(record["keypoints"]) == 17
