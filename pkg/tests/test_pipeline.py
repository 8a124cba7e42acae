from __future__ import annotations

import json
from pathlib import Path

import pytest

from src.api_client import connect
from src.dataset_io import load_manifest
from src.images import image_digest, load_image
from src.ledger import read_records
from src.mock_backends import MockCaptioner, MockLLM, MockServices
from src.models import Stage, assert_metamorphic
from src.pipeline import (
    LEDGER_NAME,
    MANIFEST_NAME,
    SUMMARY_NAME,
    AugmentationRunner,
    build_jobs,
    evaluate_suite,
    file_stem,
)
from src.prompts import load_templates
from src.run_config import CaptionMode, RunConfig, config_hash


def toy_config(out: Path, **values) -> RunConfig:
    settings = dict(output_dir=str(out), seed=7, per_class=5, augmentations=5, budget=1, parallelism=2)
    settings.update(values)
    return RunConfig(**settings)


def run(manifest_path: Path, config: RunConfig, endpoints, services=None):
    manifest = load_manifest(manifest_path)
    backends = connect(
        endpoints,
        cache_dir=config.cache_dir,
        offline=config.offline,
        mock_services=services or MockServices.default(class_count=manifest.class_count),
    )
    runner = AugmentationRunner(config, manifest, backends, load_templates(manifest.task.kind))
    return runner.run(), backends


BUNDLED_TOY = Path(__file__).resolve().parents[1] / "data" / "toy" / "manifest.jsonl"


def ledger_bytes(out: Path) -> bytes:
    return (out / LEDGER_NAME).read_bytes()


def test_bundled_toy_manifest_runs_end_to_end(mock_endpoints, tmp_path):
    first, _ = run(BUNDLED_TOY, toy_config(tmp_path / "a"), mock_endpoints)
    second, _ = run(BUNDLED_TOY, toy_config(tmp_path / "b", parallelism=1), mock_endpoints)

    assert (first.records, first.augmentations) == (10, 50)
    assert first.failed == [] and second.failed == []
    assert ledger_bytes(tmp_path / "a") == ledger_bytes(tmp_path / "b")
    records = read_records(tmp_path / "a" / LEDGER_NAME)
    assert all(assert_metamorphic(r) for r in records)
    assert all(len(r.edits) == 1 for r in records)


def test_toy_run_produces_every_record(toy_dataset, mock_endpoints, tmp_path):
    out = tmp_path / "run"
    summary, _ = run(toy_dataset, toy_config(out), mock_endpoints)

    assert summary.records == 10
    assert summary.augmentations == 50
    assert summary.failed == [] and summary.skipped == []

    records = read_records(out / LEDGER_NAME)
    assert [r.record_id for r in records] == [f"case-{i:02d}" for i in range(10)]
    for record in records:
        assert assert_metamorphic(record)
        assert record.next_stage() is None
        assert len(record.edits) == 1
        assert (out / record.conditioning_ref).is_file()
        assert all((out / a.image_ref).is_file() for a in record.augmentations)
        provenance = record.provenance_dict()
        assert provenance["config_hash"] == summary.config_hash
        assert provenance["attempts_keywords"] == 1
        assert len(provenance["template_keywords"]) == 64

    written = json.loads((out / SUMMARY_NAME).read_text(encoding="utf-8"))
    assert written["records"] == 10
    assert written["manifest"]["augmented"] == 50

    augmented = load_manifest(out / MANIFEST_NAME)
    assert len(augmented.entries) == 60


def test_ledger_is_byte_identical_across_runs(toy_dataset, mock_endpoints, tmp_path):
    run(toy_dataset, toy_config(tmp_path / "a", parallelism=1), mock_endpoints)
    run(toy_dataset, toy_config(tmp_path / "b", parallelism=4), mock_endpoints)
    assert ledger_bytes(tmp_path / "a") == ledger_bytes(tmp_path / "b")


def test_warm_cache_replays_offline(toy_dataset, mock_endpoints, tmp_path):
    cache = str(tmp_path / "cache")
    run(toy_dataset, toy_config(tmp_path / "live", cache_dir=cache), mock_endpoints)
    _, backends = run(
        toy_dataset, toy_config(tmp_path / "replay", cache_dir=cache, offline=True), mock_endpoints
    )
    assert ledger_bytes(tmp_path / "live") == ledger_bytes(tmp_path / "replay")
    adapter = backends.llm.session.get_adapter("mock://llm/complete")
    assert adapter.calls == 0


def test_interrupted_run_resumes_to_the_same_ledger(toy_dataset, mock_endpoints, tmp_path):
    full = tmp_path / "full"
    run(toy_dataset, toy_config(full), mock_endpoints)

    partial = tmp_path / "partial"
    run(toy_dataset, toy_config(partial), mock_endpoints)
    lines = (partial / LEDGER_NAME).read_text(encoding="utf-8").splitlines(keepends=True)
    # four complete records plus half of a fifth
    (partial / LEDGER_NAME).write_text("".join(lines[:4]) + lines[4][: len(lines[4]) // 2], encoding="utf-8")

    summary, _ = run(toy_dataset, toy_config(partial), mock_endpoints)
    assert len(summary.resumed) == 4
    assert len(summary.produced) == 6
    assert ledger_bytes(partial) == ledger_bytes(full)


def test_records_from_another_configuration_are_recomputed(toy_dataset, mock_endpoints, tmp_path):
    out = tmp_path / "run"
    run(toy_dataset, toy_config(out), mock_endpoints)
    summary, _ = run(toy_dataset, toy_config(out, seed=8), mock_endpoints)
    assert summary.resumed == []
    assert len(summary.produced) == 10


def test_refusing_llm_fails_only_that_item(toy_dataset, mock_endpoints, tmp_path):
    manifest = load_manifest(toy_dataset)
    third = load_image(manifest.resolve(manifest.entries[3].image_ref))
    services = MockServices(
        captioner=MockCaptioner({image_digest(third): "A unicorn in foggy weather."}),
        llm=MockLLM(refuse_when=["unicorn"]),
    )
    out = tmp_path / "run"
    summary, _ = run(toy_dataset, toy_config(out, max_attempts=3), mock_endpoints, services)

    assert summary.records == 9
    assert summary.augmentations == 45
    assert [(f.record_id, f.stage, f.error_type) for f in summary.failed] == [
        ("case-03", Stage.KEYWORDS.value, "RetriesExhausted")
    ]
    assert "case-03" not in {r.record_id for r in read_records(out / LEDGER_NAME)}


def test_zero_budget_skips_every_item(toy_dataset, mock_endpoints, tmp_path):
    out = tmp_path / "run"
    summary, _ = run(toy_dataset, toy_config(out, budget=0), mock_endpoints)
    assert summary.records == 0
    assert len(summary.skipped) == 10
    assert summary.manifest is None
    assert read_records(out / LEDGER_NAME) == []


def test_per_augmentation_captions(toy_dataset, mock_endpoints, tmp_path):
    out = tmp_path / "run"
    config = toy_config(out, caption_mode=CaptionMode.PER_AUGMENTATION, augmentations=2)
    summary, _ = run(toy_dataset, config, mock_endpoints)

    records = read_records(out / LEDGER_NAME)
    assert summary.records == 20
    assert records[0].record_id == "case-00#0"
    assert all(len(r.augmentations) == 1 for r in records)
    # keywords depend only on the image
    assert records[0].keywords == records[1].keywords


def test_build_jobs_groups_by_case(toy_dataset, tmp_path):
    manifest = load_manifest(toy_dataset)
    jobs = build_jobs(manifest, toy_config(tmp_path, augmentations=3))
    assert len(jobs) == 10
    assert all(len(j.items) == 3 for j in jobs)


def test_config_hash_ignores_execution_settings(tmp_path):
    base = toy_config(tmp_path / "a")
    assert config_hash(base) == config_hash(toy_config(tmp_path / "b", parallelism=8, cache_dir="c"))
    assert config_hash(base) != config_hash(toy_config(tmp_path / "a", budget=2))


def test_file_stem_is_safe_and_distinct():
    assert file_stem("cat/0001").startswith("cat_0001-")
    assert file_stem("a/b") != file_stem("a_b")


def test_segmentation_run_and_evaluation(seg_dataset, mock_endpoints, tmp_path):
    out = tmp_path / "run"
    summary, backends = run(seg_dataset, toy_config(out, per_class=3, augmentations=2), mock_endpoints)
    assert summary.records == 3
    assert all(assert_metamorphic(r) for r in read_records(out / LEDGER_NAME))

    augmented = load_manifest(out / MANIFEST_NAME)
    report = evaluate_suite(augmented, backends.model, suite_name="shift-aug", model_name="mock")
    assert len(report.outcomes) == 3 + 6
    assert report.failures == ()
    assert report.class_names == ("Road", "SideWalk", "Vehicle", "Pedestrian")
    assert 0 <= report.mean_iou() <= 1


def test_evaluate_suite_lists_unscorable_cases(toy_dataset, mock_endpoints):
    manifest = load_manifest(toy_dataset)
    manifest.resolve(manifest.entries[0].image_ref).unlink()
    backends = connect(mock_endpoints, mock_services=MockServices.default(class_count=2))

    report = evaluate_suite(manifest, backends.model, model_name="mock")
    assert len(report.outcomes) == 9
    assert [case_id for case_id, _ in report.failures] == ["case-00"]
    assert report.failures[0][1].startswith("MissingFile")
    assert report.suite_name == "toy"


@pytest.mark.parametrize("parallelism", [1, 3])
def test_evaluation_order_follows_the_manifest(toy_dataset, mock_endpoints, parallelism):
    manifest = load_manifest(toy_dataset)
    backends = connect(mock_endpoints, mock_services=MockServices.default(class_count=2))
    report = evaluate_suite(manifest, backends.model, parallelism=parallelism)
    assert report.case_ids == tuple(c.id for c in manifest.entries)
