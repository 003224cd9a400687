import json
import tempfile
import unittest
from unittest.mock import patch

import pytest

from app.config import config_from_dict
from app.output_handler import write_frame, write_json
from app.probing import LayerAccuracyCurve, curve_to_frame
from app.report import SUMMARY_COLUMNS, TIMING_COLUMNS, build_report, training_time_frame
from app.run_paths import BASE_SLUG, RunPaths
from app.utils.errors import DatasetFormatError
from app.utils.types import TaskKind, TokenType


def _curve(kind, last, image):
    accuracies = {}
    for layer in range(3):
        accuracies[(layer, TokenType.IMAGE)] = image[layer]
        accuracies[(layer, TokenType.TEXT)] = 0.5
        accuracies[(layer, TokenType.ALL)] = 0.5
        accuracies[(layer, TokenType.LAST)] = last[layer]
    return LayerAccuracyCurve(kind, 0, 3, 200, accuracies)


def _gap(a_resp, max_lp):
    return {
        "a_resp": a_resp,
        "max_lp": max_lp,
        "argmax_layer": 2,
        "token_type": "last",
        "gap": max_lp - a_resp,
        "unparseable_rate": 0.0,
    }


@pytest.fixture
def run_dir(tmp_path):
    config = config_from_dict(
        {
            "out_dir": str(tmp_path),
            "tasks": [{"kind": "visual_attr"}, {"kind": "figure"}, {"kind": "doc_qa"}],
            "finetune": {"configs": ["Middle"], "tasks": ["visual_attr", "figure", "doc_qa"]},
        }
    )
    paths = RunPaths.of(tmp_path)
    visual, figure = TaskKind.VISUAL_ATTR, TaskKind.FIGURE
    curves = {
        visual: _curve(visual, [0.5, 0.7, 0.9], [0.5, 0.6, 0.6]),
        figure: _curve(figure, [0.5, 0.55, 0.6], [0.5, 0.5, 0.5]),
    }
    for kind, curve in curves.items():
        write_frame(paths.eval_file(BASE_SLUG, kind, "curve.csv"), curve_to_frame(curve))
    write_json(paths.eval_file(BASE_SLUG, visual, "gap.json"), _gap(0.625, 0.875))
    write_json(paths.eval_file(BASE_SLUG, figure, "gap.json"), _gap(0.5, 0.5))
    write_json(paths.eval_file(BASE_SLUG, TaskKind.DOC_QA, "anls.json"), {"anls": 0.5})

    write_json(paths.eval_file("Middle", visual, "gap.json"), _gap(0.75, 0.875))
    write_json(paths.eval_file("Middle", figure, "gap.json"), _gap(0.5, 0.625))
    write_json(paths.eval_file("Middle", TaskKind.DOC_QA, "anls.json"), {"anls": 0.625})
    for kind in (visual, figure, TaskKind.DOC_QA):
        write_json(paths.tuned_dir("Middle", kind) / "run.json", {"budget": 48.0})

    write_json(paths.base_timing, {"seconds": 3.0, "epochs": 2})
    write_json(paths.tuned_dir("Middle", visual) / "timing.json", {"seconds": 1.5})
    write_json(paths.plan, {"lower": [0, 1], "middle": [1, 2], "upper": [2, 3]})
    return config, paths


def test_rows_come_from_artifacts(run_dir):
    config, paths = run_dir
    report = build_report(config, paths)
    frame = report.to_frame()
    assert list(frame.columns) == SUMMARY_COLUMNS
    assert list(zip(frame["task"], frame["config"])) == [
        ("visual_attr", "Base"),
        ("visual_attr", "Middle"),
        ("figure", "Base"),
        ("figure", "Middle"),
        ("doc_qa", "Base"),
        ("doc_qa", "Middle"),
    ]
    assert report.row("visual_attr", "Base")["gap"] == 0.25
    assert report.row("figure", "Middle")["budget"] == 48.0
    assert report.row("doc_qa", "Base")["budget"] == 0.0
    assert report.row("doc_qa", "Middle")["anls"] == 0.625
    assert report.plan["middle"] == [1, 2]
    json.dumps(report.to_dict())


def test_findings(run_dir):
    config, paths = run_dir
    with patch("app.report.logger") as mock_logger:
        findings = build_report(config, paths).findings
    visual = findings["tasks"]["visual_attr"]
    assert (visual["best_layer"], visual["best_token_type"]) == (2, "last")
    assert visual["last_token_rise"] == pytest.approx(0.4)
    assert findings["layer_structure"] is True
    assert findings["tasks_with_gap"] == 1
    assert findings["gap_reproduced"] is False
    assert findings["mean_image_layer0"] == 0.5
    assert findings["image_layer0_at_chance"] is True
    assert findings["middle_gains"] == {"visual_attr": 0.125, "figure": 0.0}
    assert findings["middle_tasks_improved"] == 1
    assert findings["calibration_warning"] is True
    mock_logger.warning.assert_called_once()


def test_missing_evaluations_are_skipped(tmp_path):
    config = config_from_dict({"out_dir": str(tmp_path)})
    report = build_report(config, RunPaths.of(tmp_path))
    assert report.rows == []
    assert report.plan is None
    assert report.findings["calibration_warning"] is False


class TestReportFiles(unittest.TestCase):
    def test_inconsistent_gap_record_is_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = config_from_dict({"out_dir": tmp})
            paths = RunPaths.of(tmp)
            bad = {**_gap(0.5, 0.75), "gap": 0.1}
            write_json(paths.eval_file(BASE_SLUG, TaskKind.FIGURE, "gap.json"), bad)
            with self.assertRaises(DatasetFormatError):
                build_report(config, paths)


def test_training_time_frame(run_dir):
    config, paths = run_dir
    frame = training_time_frame(config, paths)
    assert list(frame.columns) == TIMING_COLUMNS
    assert frame.to_dict("records") == [
        {"config": "Base", "task": "all", "seconds": 3.0},
        {"config": "Middle", "task": "visual_attr", "seconds": 1.5},
    ]


if __name__ == "__main__":
    unittest.main()
