"""Pipeline commands: generate, train-base, probe, finetune and report.

Every command reads what earlier commands wrote below ``config.out_dir``
and writes its own artifacts atomically through :mod:`app.output_handler`.
Apart from ``timing.json`` and ``training_time.csv`` every artifact is a
pure function of the resolved config in 64-bit mode.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd

from app import finetune, probing, response_eval, taskgen
from app.config import ExperimentConfig
from app.model import Model, build_model, load_checkpoint, save_checkpoint, set_trainable
from app.optim import derive_seed
from app.output_handler import read_json, write_frame, write_json, write_text
from app.run_paths import BASE_SLUG, RunPaths
from app.tensor import set_default_dtype
from app.training import EpochLog, examples_from_dataset, train_answer_span
from app.utils.errors import ContractError, DatasetFormatError
from app.utils.metrics import record_response_accuracy
from app.utils.setup_logger import setup_logger
from app.utils.types import TOKEN_TYPE_ORDER, NegativeSource, Split, TaskKind, TokenType
from app.utils.validate_data import ensure_valid, validate_manifest

logger = setup_logger(__name__)

PLOT_COLUMNS = ["layer", "token_type", "accuracy", "response_accuracy"]
ANSWER_COLUMNS = ["index", "question", "generated", "gold"]


def prepare(config: ExperimentConfig) -> RunPaths:
    """Apply the precision switch and write the resolved config."""
    set_default_dtype(config.precision)
    paths = RunPaths.of(config.out_dir)
    write_text(paths.config, config.to_json(), kind="config")
    return paths


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(config: ExperimentConfig) -> dict[str, Any]:
    """Write a train/test dataset pair and a manifest for every configured task."""
    paths = prepare(config)
    gen_cfg = taskgen.GeneratorConfig(image_px=config.model.image_px)
    manifests = {}
    for sizes in config.tasks:
        train = taskgen.generate(sizes.kind, sizes.train, config.seed, gen_cfg, Split.TRAIN)
        test = taskgen.generate(sizes.kind, sizes.test, config.seed, gen_cfg, Split.TEST)
        taskgen.write_dataset(train, str(paths.dataset(sizes.kind, Split.TRAIN)))
        taskgen.write_dataset(test, str(paths.dataset(sizes.kind, Split.TEST)))
        manifest = taskgen.build_manifest(train, test)
        write_json(paths.manifest(sizes.kind), manifest, kind="manifest")
        manifests[sizes.kind.value] = manifest
        logger.info(
            "✅ %s: %d train / %d test (checksum %s)",
            sizes.kind.value,
            train.n,
            test.n,
            manifest["checksum"]["train"][:12],
        )
    return manifests


def load_split(config: ExperimentConfig, kind: TaskKind, split: Split) -> taskgen.Dataset:
    """Read one dataset file and check it against its manifest.

    Raises:
        DatasetFormatError: If the manifest is malformed or the checksum differs.

    """
    paths = RunPaths.of(config.out_dir)
    manifest = read_json(paths.manifest(kind))
    ensure_valid(validate_manifest(manifest), f"bad manifest for {kind.value}", artifact=True)
    ds = taskgen.read_dataset(str(paths.dataset(kind, split)), split, config.seed)
    if taskgen.dataset_checksum(ds) != manifest["checksum"][split.value]:
        raise DatasetFormatError(f"{kind.value}/{split.value} does not match its manifest")
    return ds


def _head(ds: taskgen.Dataset, n: int) -> taskgen.Dataset:
    """First ``n`` samples, trimmed so binary labels stay balanced."""
    if n >= ds.n:
        return ds
    if not ds.kind.is_binary:
        return taskgen.Dataset(ds.kind, ds.split, ds.seed, ds.samples[:n], dict(ds.meta))
    pos = [s for s in ds.samples if s.label == 1][: n // 2]
    neg = [s for s in ds.samples if s.label == 0][: n - n // 2]
    chosen = {id(s) for s in pos + neg}
    samples = [s for s in ds.samples if id(s) in chosen]
    return taskgen.Dataset(ds.kind, ds.split, ds.seed, samples, dict(ds.meta))


def _tail(ds: taskgen.Dataset, n: int) -> taskgen.Dataset:
    """Last ``n`` samples, trimmed so binary labels stay balanced."""
    flipped = taskgen.Dataset(ds.kind, ds.split, ds.seed, ds.samples[::-1], ds.meta)
    picked = _head(flipped, n)
    return taskgen.Dataset(ds.kind, ds.split, ds.seed, picked.samples[::-1], dict(ds.meta))


# ---------------------------------------------------------------------------
# train-base
# ---------------------------------------------------------------------------


@dataclass
class BandCheck:
    """Per-epoch response accuracies on held-out train samples."""

    low: float
    high: float
    history: list[dict[str, float]]

    def inside(self, accuracies: dict[str, float]) -> bool:
        return all(self.low <= a <= self.high for a in accuracies.values())


def cmd_train_base(config: ExperimentConfig) -> Model:
    """Train the base model jointly on every task until all binary tasks enter the band.

    The band is checked after every epoch on the last ``base.eval_samples``
    train samples of each binary task, which are never trained on. If the
    band is never reached a warning lists the final accuracies and the
    checkpoint is still written.
    """
    paths = prepare(config)
    section = config.base
    examples = []
    held_out: dict[str, taskgen.Dataset] = {}
    for sizes in config.tasks:
        if not sizes.kind.is_binary and not section.include_doc_qa:
            continue
        train = load_split(config, sizes.kind, Split.TRAIN)
        examples.extend(examples_from_dataset(_head(train, section.samples_per_task)))
        if sizes.kind.is_binary:
            remaining = max(train.n - section.samples_per_task, 0)
            if remaining >= 2:
                held_out[sizes.kind.value] = _tail(train, min(section.eval_samples, remaining))
            else:
                test = load_split(config, sizes.kind, Split.TEST)
                held_out[sizes.kind.value] = _head(test, section.eval_samples)

    model = build_model(config.model, derive_seed(config.seed, "base-model"))
    set_trainable(model, model.group_names, finetune_policy=False)
    band = BandCheck(section.band_low, section.band_high, [])

    def on_epoch(log: EpochLog) -> bool:
        accuracies = {
            task: response_eval.summarize_responses(
                response_eval.collect_responses(model, ds, batch_size=config.eval_batch_size)
            ).a_resp
            for task, ds in held_out.items()
        }
        band.history.append({"epoch": log.epoch, "mean_loss": log.mean_loss, **accuracies})
        logger.info("📊 Base epoch %d response accuracy: %s", log.epoch, _fmt(accuracies))
        return band.inside(accuracies)

    logger.info("🚀 Training base model on %d examples", len(examples))
    started = time.perf_counter()
    logs = train_answer_span(
        model,
        examples,
        section.settings(derive_seed(config.seed, "base-train")),
        on_epoch=on_epoch,
    )
    elapsed = time.perf_counter() - started

    final = {k: v for k, v in band.history[-1].items() if k not in ("epoch", "mean_loss")}
    if band.inside(final):
        logger.info(
            "✅ Base model inside [%.2f, %.2f] after %d epochs", band.low, band.high, len(logs)
        )
    else:
        logger.warning(
            "⚠️ Base model never reached the [%.2f, %.2f] band; final accuracies %s",
            band.low,
            band.high,
            _fmt(final),
        )

    model.freeze_mask = None
    save_checkpoint(model, str(paths.base_checkpoint))
    frame = pd.DataFrame(band.history)
    frame.insert(2, "steps", [log.steps for log in logs])
    write_frame(paths.base_log, frame, kind="train_log")
    write_json(paths.base_timing, {"seconds": elapsed, "epochs": len(logs)}, kind="timing")
    return model


def _fmt(accuracies: dict[str, float]) -> str:
    return ", ".join(f"{task}={value:.3f}" for task, value in accuracies.items())


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def evaluate_binary(
    config: ExperimentConfig,
    model: Model,
    train: taskgen.Dataset,
    test: taskgen.Dataset,
    slug: str,
) -> response_eval.GapReport:
    """Probe sweep, responses and gap of one checkpoint on one binary task."""
    paths = RunPaths.of(config.out_dir)
    kind = test.kind
    curve = probing.probe_sweep(
        model,
        train,
        test,
        settings=config.probe_settings(),
        seed=derive_seed(config.seed, "probe"),
        workers=config.workers,
        batch_size=config.eval_batch_size,
    )
    records = response_eval.collect_responses(model, test, batch_size=config.eval_batch_size)
    summary = response_eval.summarize_responses(records)
    record_response_accuracy(kind.value, slug, summary.a_resp)

    reports = {t: response_eval.gap(curve, summary.a_resp, t) for t in TOKEN_TYPE_ORDER}
    last = reports[TokenType.LAST]
    logger.info(
        "📊 %s/%s: A_resp %.4f, best last-token A_LP %.4f at layer %d, gap %.4f",
        slug,
        kind.value,
        summary.a_resp,
        last.max_lp,
        last.argmax_layer,
        last.gap,
    )

    write_frame(paths.eval_file(slug, kind, "curve.csv"), probing.curve_to_frame(curve), "curve")
    write_frame(
        paths.eval_file(slug, kind, "responses.csv"),
        response_eval.responses_to_frame(records),
        kind="responses",
    )
    gap_doc = {
        **last.to_dict(),
        "unparseable_rate": summary.unparseable_rate,
        "n": summary.n,
        "by_token_type": {t.value: r.to_dict() for t, r in reports.items()},
        "curve_meta": dict(curve.meta),
    }
    if test.meta.get("filter"):
        gap_doc["filter"] = test.meta["filter"]
    write_json(paths.eval_file(slug, kind, "gap.json"), gap_doc, kind="gap")
    plot = probing.curve_to_frame(curve)[["layer", "token_type", "accuracy"]].copy()
    plot["response_accuracy"] = summary.a_resp
    write_frame(paths.eval_file(slug, kind, "plot.csv"), plot[PLOT_COLUMNS], kind="plot")
    return last


def evaluate_doc_qa(
    config: ExperimentConfig, model: Model, test: taskgen.Dataset, slug: str
) -> float:
    """Open-ended answers and ANLS of one checkpoint on the doc-QA test split."""
    paths = RunPaths.of(config.out_dir)
    answers = response_eval.collect_open_answers(model, test, batch_size=config.eval_batch_size)
    golds = [s.gold_answer or "" for s in test.samples]
    score = response_eval.anls(answers, golds)
    frame = pd.DataFrame(
        {
            "index": range(test.n),
            "question": [s.question for s in test.samples],
            "generated": answers,
            "gold": golds,
        },
        columns=ANSWER_COLUMNS,
    )
    write_frame(paths.eval_file(slug, test.kind, "answers.csv"), frame, kind="answers")
    write_json(
        paths.eval_file(slug, test.kind, "anls.json"),
        {"anls": score, "n": test.n, "tau": response_eval.ANLS_TAU},
        kind="anls",
    )
    logger.info("📊 %s/doc_qa: ANLS %.4f over %d questions", slug, score, test.n)
    return score


def _probe_inputs(
    config: ExperimentConfig, kind: TaskKind, model: Model
) -> tuple[taskgen.Dataset, taskgen.Dataset]:
    train = load_split(config, kind, Split.TRAIN)
    test = load_split(config, kind, Split.TEST)
    if config.filter_hard:
        negatives = (
            config.hard_negatives if kind is TaskKind.WORD_REC else NegativeSource.PERTURBED
        )
        batch = config.eval_batch_size
        train = taskgen.filter_hard(train, model, batch_size=batch, negatives=negatives)
        test = taskgen.filter_hard(test, model, batch_size=batch, negatives=negatives)
    return train, test


def cmd_probe(config: ExperimentConfig) -> dict[str, response_eval.GapReport]:
    """Evaluate the base checkpoint on every configured task."""
    paths = prepare(config)
    model = load_checkpoint(str(paths.base_checkpoint))
    gaps = {}
    for sizes in config.tasks:
        if sizes.kind.is_binary:
            train, test = _probe_inputs(config, sizes.kind, model)
            gaps[sizes.kind.value] = evaluate_binary(config, model, train, test, BASE_SLUG)
        else:
            evaluate_doc_qa(config, model, load_split(config, sizes.kind, Split.TEST), BASE_SLUG)
    return gaps


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------


def resolve_plan(config: ExperimentConfig) -> finetune.LayerGroupPlan:
    """Layer groups from ``--boundaries`` or from the mean base last-token curve.

    Raises:
        ContractError: If no base curve exists and no boundaries were given.

    """
    n_layers = config.model.n_layers
    if config.finetune.boundaries is not None:
        l1, l2 = config.finetune.boundaries
        return finetune.plan_from_boundaries(n_layers, l1, l2)

    paths = RunPaths.of(config.out_dir)
    series = []
    for sizes in config.binary_tasks:
        path = paths.eval_file(BASE_SLUG, sizes.kind, "curve.csv")
        if path.exists():
            curve = probing.curve_from_frame(pd.read_csv(path))
            series.append(curve.series(TokenType.LAST))
    if not series:
        raise ContractError("run the probe command first or pass --boundaries")
    return finetune.segment_series(np.mean(np.asarray(series), axis=0).tolist())


@dataclass(frozen=True)
class TuneJob:
    name: str
    kind: TaskKind


def _run_job(
    config: ExperimentConfig,
    base: Model,
    plan: finetune.LayerGroupPlan,
    job: TuneJob,
    data: dict[TaskKind, tuple[taskgen.Dataset, taskgen.Dataset]],
) -> None:
    paths = RunPaths.of(config.out_dir)
    recipe = config.finetune.recipe(job.kind)
    sched = finetune.plan_schedule(job.name, plan, recipe.epochs)
    train, test = data[job.kind]
    hyper = config.finetune.settings(job.kind, derive_seed(config.seed, "finetune", job.kind.value))
    result = finetune.run_finetune(base, _head(train, config.finetune.train_samples), sched, hyper)
    budget = finetune.effective_budget(sched, base).value

    out_dir = paths.tuned_dir(sched.slug, job.kind)
    save_checkpoint(result.model, str(out_dir / "model.plab"))
    write_json(out_dir / "run.json", dict(result.to_dict(job.kind.value, budget)), kind="run")
    write_json(
        out_dir / "timing.json",
        {"step_seconds": result.step_seconds, "seconds": sum(result.step_seconds)},
        kind="timing",
    )
    if job.kind.is_binary:
        probe_train = _head(train, config.finetune.probe_train_samples)
        evaluate_binary(config, result.model, probe_train, test, sched.slug)
    else:
        evaluate_doc_qa(config, result.model, test, sched.slug)


def cmd_finetune(config: ExperimentConfig) -> finetune.LayerGroupPlan:
    """Run every requested configuration on every fine-tuning task from the base checkpoint.

    Jobs run in a thread pool of ``config.workers``; each works on its own
    clone of the base model.
    """
    paths = prepare(config)
    base = load_checkpoint(str(paths.base_checkpoint))
    plan = resolve_plan(config)
    source = "boundaries" if config.finetune.boundaries is not None else "segmentation"
    write_json(paths.plan, {**plan.to_dict(), "source": source}, kind="plan")
    logger.info("📊 Layer groups (%s): %s", source, plan)

    data = {
        kind: (load_split(config, kind, Split.TRAIN), load_split(config, kind, Split.TEST))
        for kind in config.finetune.tasks
    }
    tune = config.finetune
    jobs = [TuneJob(name, kind) for name in tune.configs for kind in tune.tasks]
    logger.info("🚀 Running %d fine-tuning jobs on %d workers", len(jobs), config.workers)
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = [pool.submit(_run_job, config, base, plan, job, data) for job in jobs]
        for future in futures:
            future.result()
    logger.info("✅ Fine-tuning finished")
    return plan


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(config: ExperimentConfig) -> Any:
    """Rebuild ``report/report.json``, ``summary.csv`` and ``training_time.csv`` from artifacts."""
    from app.report import build_report, training_time_frame

    paths = RunPaths.of(config.out_dir)
    report = build_report(config, paths)
    write_json(paths.report_dir / "report.json", report.to_dict(), kind="report")
    write_frame(paths.report_dir / "summary.csv", report.to_frame(), kind="report")
    write_frame(
        paths.report_dir / "training_time.csv", training_time_frame(config, paths), kind="timing"
    )
    return report
