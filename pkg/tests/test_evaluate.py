import csv
import json

import numpy as np
import pytest

from skeletal_radiance.config import DataConfig
from skeletal_radiance.errors import ProtocolError
from skeletal_radiance.evaluate import CSV_FIELDS, Evaluator, Split, evaluate
from skeletal_radiance.field import SkeletalRadianceField

NAMES = [f"subject_{k:03d}" for k in range(8)]


def ground_truth(captures):
    def render(subject, t, view):
        capture = captures.subject(subject)
        return capture.images[view, t], capture.masks[view, t].astype(np.float64)
    return render


class TestSplit:
    def test_default(self):
        split = Split.default(NAMES)
        assert split.train_subjects == tuple(NAMES[:6]) and split.test_subjects == tuple(NAMES[6:])
        assert split.train_frames == tuple(range(20)) and split.test_frames == tuple(range(20, 30))
        for protocol in ("pose", "identity", "seen"):
            split.check(protocol)

    def test_default_shrinks_to_small_captures(self):
        split = Split.default(NAMES[:2], frame_count=4)
        assert split.train_subjects == ("subject_000",) and split.test_subjects == ("subject_001",)
        assert split.train_frames == (0, 1) and split.test_frames == (2, 3)

    def test_targets(self):
        split = Split.default(NAMES)
        assert split.targets("pose") == (split.train_subjects, split.test_frames)
        assert split.targets("identity") == (split.test_subjects, split.test_frames)
        assert split.targets("seen") == (split.train_subjects, split.train_frames)

    def test_identity_overlap(self):
        split = Split(("a", "b"), ("b", "c"), (0,), (1,))
        with pytest.raises(ProtocolError, match="b"):
            split.check("identity")
        split.check("pose")

    def test_pose_overlap(self):
        split = Split(("a",), ("b",), (0, 1, 2), (2, 3))
        with pytest.raises(ProtocolError, match=r"\[2\]"):
            split.check("pose")

    def test_unknown_protocol_and_empty_targets(self):
        split = Split(("a",), (), (0,), (1,))
        with pytest.raises(ProtocolError, match="unknown protocol"):
            split.check("novel")
        with pytest.raises(ProtocolError, match="no subject"):
            split.check("identity")

    def test_random_is_seeded_and_disjoint(self):
        first = Split.random(NAMES, 2, seed=3)
        assert first == Split.random(NAMES, 2, seed=3)
        assert len(first.test_subjects) == 2
        assert not set(first.test_subjects) & set(first.train_subjects)
        assert set(first.test_subjects) | set(first.train_subjects) == set(NAMES)
        with pytest.raises(ProtocolError):
            Split.random(NAMES, 8, seed=0)

    def test_from_config(self, tiny_captures):
        split = Split.from_config(DataConfig(train_subjects=("subject_001",), train_frames="0-2",
                                             test_frames="3-9"), tiny_captures)
        assert split.train_subjects == ("subject_001",) and split.test_subjects == ("subject_000",)
        assert split.train_frames == (0, 1, 2) and split.test_frames == (3,)

    def test_to_dict(self):
        assert Split.default(NAMES).to_dict()["test_frames"] == [20, 29]


class TestEvaluator:
    def test_ground_truth_scores_perfectly(self, tiny_captures):
        split = Split.default(tiny_captures.subject_names, tiny_captures.frame_count)
        summary = evaluate(None, tiny_captures, split, "pose", render_fn=ground_truth(tiny_captures))
        assert summary["count"] == 2
        assert summary["psnr"] == 100.0
        assert summary["ssim"] == pytest.approx(1.0)
        assert summary["body_psnr"] == 100.0

    def test_jobs(self, tiny_captures):
        split = Split.default(tiny_captures.subject_names, tiny_captures.frame_count)
        evaluator = Evaluator(None, tiny_captures, split, "seen", views=[2, 3], frame_stride=2)
        assert evaluator.jobs() == [("subject_000", 0, 2), ("subject_000", 0, 3)]

    def test_identity_with_shared_subject_refuses(self, tiny_captures):
        split = Split(("subject_000",), ("subject_000",), (0, 1), (2, 3))
        evaluator = Evaluator(None, tiny_captures, split, "identity", render_fn=ground_truth(tiny_captures))
        with pytest.raises(ProtocolError):
            evaluator.evaluate()
        assert evaluator.results["rows"] == []

    def test_reports(self, tiny_captures, tmp_path):
        split = Split.default(tiny_captures.subject_names, tiny_captures.frame_count)
        evaluator = Evaluator(None, tiny_captures, split, "identity", render_fn=ground_truth(tiny_captures))
        evaluator.evaluate(keep_images=True)
        report = evaluator.save_results(tmp_path)
        with open(tmp_path / "eval_identity.csv", newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == CSV_FIELDS == ("subject", "frame", "view", "psnr", "ssim")
        assert rows[1][:3] == ["subject_001", "2", "3"]
        assert float(rows[1][3]) == 100.0
        results = json.loads(report.read_text(encoding="utf-8"))
        assert results["protocol"] == "identity" and len(results["rows"]) == 2
        assert results["baselines"]["gray_psnr"] < results["summary"]["psnr"]
        assert (tmp_path / "eval_identity_summary.txt").exists()
        written = evaluator.save_images(tmp_path / "images")
        assert [p.name for p in written[:2]] == ["subject_001_002_3.png", "subject_001_002_3_alpha.png"]

    def test_renders_with_the_model(self, tiny_captures, tiny_config):
        split = Split(("subject_000",), ("subject_001",), (0, 1), (2,))
        model = SkeletalRadianceField(tiny_config, seed=0)
        summary = Evaluator(model, tiny_captures, split, "pose", samples=4).evaluate()
        assert summary["count"] == 1
        assert np.isfinite(summary["psnr"]) and -1.0 <= summary["ssim"] <= 1.0
