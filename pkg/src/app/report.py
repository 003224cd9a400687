"""Run report assembled from the artifacts of a run directory.

Nothing here recomputes a model output: every number is read back from the
curve, gap, ANLS and run files the pipeline wrote, so each cell of the
report can be traced to a file. Wall-clock times are kept out of
``report.json`` and go to ``training_time.csv`` instead.
"""

from dataclasses import dataclass, field
from typing import Any

import pandas as pd

from app.config import ExperimentConfig
from app.finetune import BASE_CONFIG, config_slug
from app.output_handler import read_json
from app.probing import curve_from_frame
from app.run_paths import BASE_SLUG, RunPaths
from app.utils.setup_logger import setup_logger
from app.utils.types import ReportRow, TaskKind, TokenType
from app.utils.validate_data import ensure_valid, validate_gap_record

logger = setup_logger(__name__)

SUMMARY_COLUMNS = [
    "task",
    "config",
    "budget",
    "response_accuracy",
    "unparseable_rate",
    "linear_probing_accuracy",
    "argmax_layer",
    "gap",
    "anls",
]
TIMING_COLUMNS = ["config", "task", "seconds"]

GAP_THRESHOLD = 0.02
LAYER_RISE_THRESHOLD = 0.10
CHANCE_BAND = (0.45, 0.55)
CALIBRATION_GAIN = 0.02
CALIBRATION_MIN_TASKS = 2
GAP_MIN_TASKS = 3

# Binary tasks whose answer depends on the question, not only on the image.
QUESTION_DEPENDENT = (TaskKind.WORD_REC, TaskKind.STRUCTURE, TaskKind.FIGURE)


@dataclass
class RunReport:
    """Table rows per (task, configuration) plus the findings block."""

    rows: list[ReportRow]
    plan: dict[str, Any] | None
    findings: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"rows": list(self.rows), "plan": self.plan, "findings": self.findings}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=SUMMARY_COLUMNS)

    def row(self, task: str, config: str) -> ReportRow | None:
        for row in self.rows:
            if row["task"] == task and row["config"] == config:
                return row
        return None


def _binary_row(paths: RunPaths, kind: TaskKind, config: str) -> ReportRow | None:
    slug = config_slug(config)
    path = paths.eval_file(slug, kind, "gap.json")
    if not path.exists():
        return None
    gap = read_json(path)
    ensure_valid(validate_gap_record(gap), f"inconsistent gap record {path}", artifact=True)
    return ReportRow(
        task=kind.value,
        config=config,
        response_accuracy=gap["a_resp"],
        unparseable_rate=gap.get("unparseable_rate", 0.0),
        linear_probing_accuracy=gap["max_lp"],
        argmax_layer=gap["argmax_layer"],
        gap=gap["gap"],
    )


def _doc_qa_row(paths: RunPaths, config: str) -> ReportRow | None:
    path = paths.eval_file(config_slug(config), TaskKind.DOC_QA, "anls.json")
    if not path.exists():
        return None
    return ReportRow(task=TaskKind.DOC_QA.value, config=config, anls=read_json(path)["anls"])


def build_report(config: ExperimentConfig, paths: RunPaths) -> RunReport:
    """Collect the Base row and one row per fine-tuned configuration for every task."""
    plan = read_json(paths.plan) if paths.plan.exists() else None
    names = [BASE_CONFIG, *config.finetune.configs]
    rows: list[ReportRow] = []
    for sizes in config.tasks:
        for name in names:
            if sizes.kind.is_binary:
                row = _binary_row(paths, sizes.kind, name)
            else:
                row = _doc_qa_row(paths, name)
            if row is None:
                continue
            if name == BASE_CONFIG:
                row["budget"] = 0.0
            else:
                run = read_json(paths.tuned_dir(config_slug(name), sizes.kind) / "run.json")
                row["budget"] = run["budget"]
            rows.append(row)

    report = RunReport(rows=rows, plan=plan)
    report.findings = findings(config, paths, report)
    logger.info("📊 Report: %d rows over %d tasks", len(rows), len(config.tasks))
    return report


def findings(config: ExperimentConfig, paths: RunPaths, report: RunReport) -> dict[str, Any]:
    """Qualitative checks over the base curves and the Middle configuration.

    The Middle-vs-Base comparison only ever produces a calibration warning.
    """
    per_task: dict[str, Any] = {}
    for sizes in config.binary_tasks:
        curve_path = paths.eval_file(BASE_SLUG, sizes.kind, "curve.csv")
        if not curve_path.exists():
            continue
        curve = curve_from_frame(pd.read_csv(curve_path))
        base = report.row(sizes.kind.value, BASE_CONFIG)
        best_layer, best_type, best_acc = 0, TokenType.LAST, -1.0
        for ttype in TokenType:
            series = curve.series(ttype)
            for layer, acc in enumerate(series):
                if acc > best_acc or (acc == best_acc and layer < best_layer):
                    best_layer, best_type, best_acc = layer, ttype, acc
        last = curve.series(TokenType.LAST)
        per_task[sizes.kind.value] = {
            "best_layer": best_layer,
            "best_token_type": best_type.value,
            "best_accuracy": best_acc,
            "gap": base["gap"] if base else None,
            "gap_at_least_threshold": bool(base and base["gap"] >= GAP_THRESHOLD),
            "last_token_rise": max(last) - last[0],
            "image_layer0": curve.value(0, TokenType.IMAGE),
        }

    n_gap = sum(t["gap_at_least_threshold"] for t in per_task.values())
    visual = per_task.get(TaskKind.VISUAL_ATTR.value)
    dependent = [
        per_task[k.value]["image_layer0"] for k in QUESTION_DEPENDENT if k.value in per_task
    ]
    low, high = CHANCE_BAND

    gains = {}
    for sizes in config.binary_tasks:
        base_row = report.row(sizes.kind.value, BASE_CONFIG)
        middle_row = report.row(sizes.kind.value, "Middle")
        if base_row and middle_row:
            gains[sizes.kind.value] = (
                middle_row["response_accuracy"] - base_row["response_accuracy"]
            )
    improved = sum(g >= CALIBRATION_GAIN for g in gains.values())
    calibration_warning = bool(gains) and improved < CALIBRATION_MIN_TASKS
    if calibration_warning:
        logger.warning(
            "⚠️ Calibration: Middle tuning improved response accuracy by >= %.0f points on %d "
            "task(s), expected %d",
            100 * CALIBRATION_GAIN,
            improved,
            CALIBRATION_MIN_TASKS,
        )

    return {
        "tasks": per_task,
        "tasks_with_gap": n_gap,
        "gap_reproduced": n_gap >= GAP_MIN_TASKS,
        "visual_attr_last_token_rise": visual["last_token_rise"] if visual else None,
        "layer_structure": bool(visual and visual["last_token_rise"] >= LAYER_RISE_THRESHOLD),
        "mean_image_layer0": sum(dependent) / len(dependent) if dependent else None,
        "image_layer0_at_chance": bool(dependent) and all(low <= a <= high for a in dependent),
        "middle_gains": gains,
        "middle_tasks_improved": improved,
        "calibration_warning": calibration_warning,
    }


def training_time_frame(config: ExperimentConfig, paths: RunPaths) -> pd.DataFrame:
    """Wall-clock seconds of base training and of every fine-tuning job found on disk."""
    rows = []
    if paths.base_timing.exists():
        seconds = read_json(paths.base_timing)["seconds"]
        rows.append({"config": BASE_CONFIG, "task": "all", "seconds": seconds})
    for name in config.finetune.configs:
        for kind in config.finetune.tasks:
            path = paths.tuned_dir(config_slug(name), kind) / "timing.json"
            if path.exists():
                seconds = read_json(path)["seconds"]
                rows.append({"config": name, "task": kind.value, "seconds": seconds})
    return pd.DataFrame(rows, columns=TIMING_COLUMNS)
