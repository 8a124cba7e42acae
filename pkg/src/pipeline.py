# src/pipeline.py
"""
Batch runner: caption -> keywords -> alternatives -> edits ->
counterfactual -> edge map -> generated images, one ledger record per image
(or per image and augmentation index in per-augmentation caption mode).

Items run on a bounded thread pool; results are consumed in plan order, so
the ledger does not depend on the parallelism limit.
"""
from __future__ import annotations

import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from src.api_client import Backends, BackendClient, GenerationRequest
from src.conditioning import EdgeMap, canny
from src.dataset_io import (
    DatasetManifest,
    ManifestSummary,
    WorkItem,
    load_segmentation_map,
    make_plan,
    write_augmented_manifest,
)
from src.errors import DillemaError, RetriesExhausted, WriteError
from src.evaluation import (
    CaseOutcome,
    EvaluationReport,
    score_classification,
    score_segmentation,
    write_json,
)
from src.images import load_image, save_png
from src.ledger import LedgerWriter, read_records, write_records
from src.models import (
    Augmentation,
    Caption,
    ConditioningRef,
    MetamorphicRecord,
    Stage,
    TaskKind,
    TestCase,
    advance,
    new_record,
    stable_seed,
)
from src.prompts import (
    PromptTemplate,
    detect_applied_edits,
    render_alternatives_prompt,
    render_counterfactual_prompt,
    render_keywords_prompt,
    run_with_retry,
    select_edits,
)
from src.run_config import CaptionMode, RunConfig, config_hash

logger = logging.getLogger(__name__)

LEDGER_NAME = "ledger.jsonl"
SUMMARY_NAME = "summary.json"
MANIFEST_NAME = "augmented_manifest.jsonl"
CONDITIONING_DIR = "conditioning"
AUGMENTATIONS_DIR = "augmentations"

_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def file_stem(record_id: str) -> str:
    """Filesystem-safe, collision-free name for a record id."""
    slug = _UNSAFE.sub("_", record_id).strip("_") or "record"
    return f"{slug}-{hashlib.sha256(record_id.encode('utf-8')).hexdigest()[:8]}"


@dataclass(frozen=True)
class Job:
    """One ledger record to produce: a case plus the augmentation indices it covers."""

    record_id: str
    case: TestCase
    items: Tuple[WorkItem, ...]


@dataclass(frozen=True)
class ItemFailure:
    record_id: str
    stage: str
    error_type: str
    message: str


@dataclass(frozen=True)
class JobResult:
    job: Job
    record: MetamorphicRecord | None = None
    failure: ItemFailure | None = None
    skipped: str | None = None


@dataclass
class RunSummary:
    config_hash: str
    produced: List[str] = field(default_factory=list)
    resumed: List[str] = field(default_factory=list)
    failed: List[ItemFailure] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)
    augmentations: int = 0
    ledger: Path | None = None
    manifest: ManifestSummary | None = None

    @property
    def records(self) -> int:
        return len(self.produced) + len(self.resumed)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "config_hash": self.config_hash,
            "produced": self.produced,
            "resumed": self.resumed,
            "failed": [
                {"record_id": f.record_id, "stage": f.stage, "error": f.error_type, "message": f.message}
                for f in self.failed
            ],
            "skipped": [{"record_id": r, "reason": why} for r, why in self.skipped],
            "records": self.records,
            "augmentations": self.augmentations,
        }
        if self.manifest is not None:
            data["manifest"] = {
                "path": self.manifest.path.name,
                "mode": self.manifest.mode.value,
                "originals": self.manifest.originals,
                "augmented": self.manifest.augmented,
            }
        return data


def build_jobs(manifest: DatasetManifest, config: RunConfig) -> List[Job]:
    """Group plan items into ledger records, preserving plan order."""
    items = make_plan(manifest, config.sampling_plan)
    if config.caption_mode is CaptionMode.PER_AUGMENTATION:
        return [
            Job(f"{item.case.id}#{item.augmentation_index}", item.case, (item,))
            for item in items
        ]

    grouped: Dict[str, List[WorkItem]] = {}
    for item in items:
        grouped.setdefault(item.case.id, []).append(item)
    return [Job(case_id, group[0].case, tuple(group)) for case_id, group in grouped.items()]


class AugmentationRunner:
    def __init__(
        self,
        config: RunConfig,
        manifest: DatasetManifest,
        backends: Backends,
        templates: Dict[Stage, PromptTemplate],
    ) -> None:
        self.config = config
        self.manifest = manifest
        self.backends = backends
        self.templates = templates
        self.out_dir = config.output_path
        self.config_hash = config_hash(config)

    @property
    def ledger_path(self) -> Path:
        return self.out_dir / LEDGER_NAME

    # -- per stage -----------------------------------------------------------

    def _ask(
        self, job: Job, stage: Stage, prompt: str, attempts: Dict[str, int], **parse_context: Any
    ):
        # the LLM stages only depend on the image, so share them across per-augmentation jobs
        key = job.case.id if stage is not Stage.COUNTERFACTUAL else job.record_id
        policy = replace(
            self.config.retry_policy,
            base_seed=stable_seed(self.config.seed, key, stage.value),
        )
        outcome = run_with_retry(prompt, policy, self.backends.llm, stage, **parse_context)
        attempts[stage.value] = outcome.attempts_used
        if outcome.attempts_used > 1:
            logger.debug("[%s] %s needed %d attempts", job.record_id, stage.value, outcome.attempts_used)
        return outcome.payload

    def run_job(self, job: Job) -> JobResult:
        reached: List[Stage] = [Stage.CAPTION]
        try:
            return self._run_job(job, reached)
        except WriteError:
            raise
        except RetriesExhausted as exc:
            for attempt in exc.transcript:
                logger.debug(
                    "[%s] seed %d: %r (%s)", job.record_id, attempt.seed, attempt.response, attempt.error
                )
            error: DillemaError = exc
        except DillemaError as exc:
            error = exc
        failure = ItemFailure(job.record_id, reached[-1].value, type(error).__name__, str(error))
        logger.warning("[%s] failed at %s: %s", job.record_id, failure.stage, failure.message)
        return JobResult(job, failure=failure)

    def _run_job(self, job: Job, reached: List[Stage]) -> JobResult:
        """Run every stage for one job; `reached` tracks the stage in progress."""
        case = job.case
        task = self.manifest.task
        config = self.config
        attempts: Dict[str, int] = {}

        record = new_record(case, task, job.record_id)
        image = load_image(self.manifest.resolve(case.image_ref))

        caption = self.backends.captioner.caption_image(image)
        record = advance(record, caption)

        reached.append(Stage.KEYWORDS)
        keywords = self._ask(
            job, reached[-1],
            render_keywords_prompt(task, caption, self.templates[Stage.KEYWORDS]),
            attempts,
        )
        record = advance(record, keywords)

        reached.append(Stage.ALTERNATIVES)
        alternatives = self._ask(
            job, reached[-1],
            render_alternatives_prompt(task, caption, keywords, self.templates[Stage.ALTERNATIVES]),
            attempts,
            keywords=keywords,
        )
        record = advance(record, alternatives)

        reached.append(Stage.EDITS)
        edit_seed = stable_seed(config.seed, job.record_id, Stage.EDITS.value)
        edits = select_edits(alternatives, config.budget, edit_seed)
        if len(edits) == 0:
            logger.info("[%s] skipped: edit budget leaves nothing to change", job.record_id)
            return JobResult(job, skipped="no edits to apply (budget 0)")
        record = advance(record, edits)

        reached.append(Stage.COUNTERFACTUAL)
        counterfactual = self._ask(
            job, reached[-1],
            render_counterfactual_prompt(task, caption, edits, self.templates[Stage.COUNTERFACTUAL]),
            attempts,
            original=caption,
        )
        record = advance(record, counterfactual)
        record = replace(record, detected_edits=detect_applied_edits(edits, counterfactual))

        reached.append(Stage.CONDITIONING)
        stem = file_stem(job.record_id)
        edges = canny(image, config.low_threshold, config.high_threshold, config.blur_sigma)
        cond_ref = f"{CONDITIONING_DIR}/{stem}.png"
        edges.save(self.out_dir / cond_ref)
        record = advance(
            record,
            ConditioningRef(cond_ref, "canny", config.low_threshold, config.high_threshold, config.blur_sigma),
        )

        reached.append(Stage.AUGMENTATIONS)
        augmentations = [
            self._generate(counterfactual, edges, item, stem) for item in job.items
        ]
        record = advance(record, augmentations)

        record = record.with_provenance(
            config_hash=self.config_hash,
            caption_mode=config.caption_mode.value,
            edit_seed=edit_seed,
            master_seed=config.seed,
            **{f"attempts_{k}": v for k, v in sorted(attempts.items())},
            **{f"template_{s.value}": t.digest for s, t in sorted(self.templates.items())},
        )
        logger.info(
            "[%s] %d augmentation(s): %s", job.record_id, len(record.augmentations), counterfactual.text
        )
        return JobResult(job, record=record)

    def _generate(self, counterfactual: Caption, edges: EdgeMap, item: WorkItem, stem: str) -> Augmentation:
        request = GenerationRequest(
            counterfactual.text, edges, item.derived_seed, guidance=self.config.guidance
        )
        image = self.backends.generator.generate_image(request)
        ref = f"{AUGMENTATIONS_DIR}/{stem}_{item.augmentation_index}.png"
        save_png(image, self.out_dir / ref)
        return Augmentation(item.augmentation_index, item.derived_seed, ref)

    # -- batch ---------------------------------------------------------------

    def _completed(self, jobs: Sequence[Job]) -> Dict[str, MetamorphicRecord]:
        wanted = {j.record_id for j in jobs}
        done: Dict[str, MetamorphicRecord] = {}
        for record in read_records(self.ledger_path):
            if record.record_id not in wanted:
                continue
            if record.provenance_dict().get("config_hash") != self.config_hash:
                logger.warning("[%s] ledger entry from another configuration; recomputing", record.record_id)
                continue
            done[record.record_id] = record
        return done

    def run(self) -> RunSummary:
        jobs = build_jobs(self.manifest, self.config)
        summary = RunSummary(self.config_hash, ledger=self.ledger_path)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        done = self._completed(jobs)
        pending = [j for j in jobs if j.record_id not in done]
        logger.info(
            "%d record(s) planned, %d already in the ledger, %d to run with %d worker(s)",
            len(jobs), len(done), len(pending), self.config.parallelism,
        )

        fresh: Dict[str, MetamorphicRecord] = {}
        with LedgerWriter(self.ledger_path) as ledger:
            with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
                for result in pool.map(self.run_job, pending):
                    if result.record is not None:
                        ledger.append(result.record)
                        fresh[result.job.record_id] = result.record
                    elif result.failure is not None:
                        summary.failed.append(result.failure)
                    else:
                        summary.skipped.append((result.job.record_id, result.skipped or ""))

        # canonical order: the plan's, independent of resume history
        records: List[MetamorphicRecord] = []
        for job in jobs:
            if job.record_id in done:
                records.append(done[job.record_id])
                summary.resumed.append(job.record_id)
            elif job.record_id in fresh:
                records.append(fresh[job.record_id])
                summary.produced.append(job.record_id)
        write_records(self.ledger_path, records)
        summary.augmentations = sum(len(r.augmentations) for r in records)

        if records:
            summary.manifest = write_augmented_manifest(
                records,
                self.out_dir / MANIFEST_NAME,
                self.config.manifest_mode,
                source_manifest=self.manifest,
                augmented_root=self.out_dir,
            )
        write_json(summary.to_dict(), self.out_dir / SUMMARY_NAME)

        logger.info(
            "Done: %d produced, %d resumed, %d failed, %d skipped, %d augmentations",
            len(summary.produced), len(summary.resumed), len(summary.failed),
            len(summary.skipped), summary.augmentations,
        )
        return summary


# ---------------------------------------------------------------------------
# Scoring a manifest with the model under test
# ---------------------------------------------------------------------------


def _score_case(
    manifest: DatasetManifest, model: BackendClient, case: TestCase
) -> CaseOutcome | Tuple[str, str]:
    try:
        image = load_image(manifest.resolve(case.image_ref))
        prediction = model.predict(image, manifest.task.kind)
        if manifest.task.kind is TaskKind.CLASSIFICATION:
            return score_classification(
                case.id, prediction, case.ground_truth.label_id,
                case.augmentation_index, case.origin_id,
            )
        truth = load_segmentation_map(
            manifest.resolve(case.ground_truth.mask_ref), dict(manifest.palette)
        )
        return score_segmentation(
            case.id, np.asarray(prediction), truth.grid, manifest.class_count,
            case.augmentation_index, case.origin_id,
        )
    except DillemaError as exc:
        logger.warning("[%s] not scored: %s", case.id, exc)
        return (case.id, f"{type(exc).__name__}: {exc}")


def evaluate_suite(
    manifest: DatasetManifest,
    model: BackendClient,
    *,
    suite_name: str | None = None,
    model_name: str = "",
    parallelism: int = 4,
) -> EvaluationReport:
    """Predict every manifest entry; failures are listed, not fatal."""
    outcomes: List[CaseOutcome] = []
    failures: List[Tuple[str, str]] = []
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        for result in pool.map(lambda c: _score_case(manifest, model, c), manifest.entries):
            if isinstance(result, CaseOutcome):
                outcomes.append(result)
            else:
                failures.append(result)

    logger.info("Scored %d case(s) of %s, %d failed", len(outcomes), manifest.name, len(failures))
    return EvaluationReport(
        suite_name=suite_name or manifest.name,
        task=manifest.task.kind,
        class_names=manifest.display_names(),
        outcomes=tuple(outcomes),
        model=model_name,
        failures=tuple(failures),
    )
