"""End-to-end orchestration: records in, verdicts/manifest/export out.

Each record's randomness comes from generators seeded by (global seed,
image id, stage name), so results do not depend on processing order and a
resumed run reproduces exactly what an uninterrupted run would have written.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable

from .bow import assemble_bow
from .config import LLM_TOKEN_ENV_VAR, PipelineConfig
from .dataset import (
    DatasetManifest,
    ManifestEntry,
    Seeds,
    ShardWriter,
    resume_filter,
)
from .debias import apply_debias, dropped_labels
from .derive import (
    DerivedAttributes,
    derive_parsing_attributes,
    dominant_emotions,
    sample_age_phrase,
)
from .filtering import FilterVerdict, check_image, compute_crop
from .fusion import (
    CaptionClient,
    DecodeParams,
    HttpLlmClient,
    MockLlmClient,
    build_prompt,
    fuse_captions,
)
from ._version import __version__
from .schema import AttributeRecord, SchemaError, parse_record
from .seeds import per_image_seed, stable_seed, stream_rng

log = logging.getLogger(__name__)

# Per-stage rng stream names; fixed so seeds stay stable across releases.
AGE_STREAM = "age"
DEBIAS_STREAM = "debias"
BOW_STREAM = "bow"
FUSION_STREAM = "fusion"


def read_records(path: str | Path) -> list[AttributeRecord]:
    """Load a records JSONL file, failing fast with the offending line number."""
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse_record(line))
            except SchemaError as e:
                raise SchemaError(f"{path}:{line_no}:{e.path}", e.message) from e
    return records


def make_client(cfg: PipelineConfig) -> CaptionClient:
    if cfg.fusion.mock:
        return MockLlmClient()
    if not cfg.fusion.endpoint:
        raise ValueError("fusion.endpoint is empty and mock mode is off; set one of them")
    return HttpLlmClient(
        endpoint=cfg.fusion.endpoint,
        model_id=cfg.fusion.model_id,
        token=os.environ.get(LLM_TOKEN_ENV_VAR),
        timeout=cfg.fusion.timeout_s,
        max_attempts=cfg.fusion.retry_attempts,
        backoff_base=cfg.fusion.retry_backoff_s,
        max_in_flight=cfg.fusion.max_in_flight,
    )


def run_filter(records: Iterable[AttributeRecord], cfg: PipelineConfig) -> tuple[list[tuple[str, FilterVerdict]], dict[str, int]]:
    """Filter-only pass: per-record verdicts plus counts by reason."""
    verdicts: list[tuple[str, FilterVerdict]] = []
    counts: dict[str, int] = {}
    for r in records:
        v = check_image(r, cfg.profile)
        verdicts.append((r.image_id, v))
        counts[v.reason] = counts.get(v.reason, 0) + 1
    return verdicts, counts


def process_record(
    r: AttributeRecord,
    cfg: PipelineConfig,
    client: CaptionClient,
) -> tuple[FilterVerdict, ManifestEntry | None]:
    """Run one record through filter -> derive -> debias -> bow -> fusion."""
    verdict = check_image(r, cfg.profile)
    if not verdict.accepted:
        return verdict, None

    crop = compute_crop(r.detection.box, r.detection.landmarks, r.image_size, cfg.crop_margin)

    age = sample_age_phrase(
        r.demographics.age_pred,
        stream_rng(cfg.global_seed, r.image_id, AGE_STREAM),
        cfg.age_categories,
    )
    hair, eyes, mouth = derive_parsing_attributes(r.parsing, cfg.parsing_thresholds)
    derived = DerivedAttributes(
        emotions_selected=dominant_emotions(r.emotions, cfg.dominance_margin),
        hair_length=hair,
        eye_state=eyes,
        mouth_state=mouth,
    )

    debiased = apply_debias(r, cfg.debias_rules, stream_rng(cfg.global_seed, r.image_id, DEBIAS_STREAM))
    dropped = dropped_labels(r, debiased)

    bag = assemble_bow(debiased, derived, age, stable_seed(cfg.global_seed, r.image_id, BOW_STREAM))
    prompt = build_prompt(bag)
    caption_set = fuse_captions(
        prompt,
        cfg.fusion.captions_per_image,
        client,
        stream_rng(cfg.global_seed, r.image_id, FUSION_STREAM),
        params=DecodeParams(temperature=cfg.fusion.temperature, max_tokens=cfg.fusion.max_tokens),
        image_id=r.image_id,
    )

    entry = ManifestEntry(
        image_id=r.image_id,
        image_path=str(Path(cfg.images_root) / r.image_id),
        crop_rect=crop,
        source_dataset=r.source_dataset,
        attribute_record=r,
        derived=derived,
        age_phrase=age,
        bag_of_words=bag,
        caption_set=caption_set,
        dropped_labels=dropped,
        seeds=Seeds(global_seed=cfg.global_seed, per_image=per_image_seed(cfg.global_seed, r.image_id)),
        pipeline_version=__version__,
    )
    return verdict, entry


def run_caption_pipeline(
    records: list[AttributeRecord],
    out_dir: str | Path,
    cfg: PipelineConfig,
    resume: bool = False,
    client: CaptionClient | None = None,
    on_entry_written: Callable[[int, ManifestEntry], None] | None = None,
) -> DatasetManifest:
    """Caption every unprocessed record and persist the sharded manifest.

    With ``resume`` the ids already present in complete shards are skipped
    and shard numbering continues; the final manifest is byte-identical to
    what an uninterrupted run would produce. ``on_entry_written`` fires after
    each accepted entry lands in the writer (used for progress reporting; an
    exception raised from it aborts the run, discarding the partial shard).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if client is None:
        client = make_client(cfg)

    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i, c in Counter(ids).items() if c > 1})
        raise SchemaError("records", f"duplicate image_id(s) in input: {dupes[:5]}")

    existing: DatasetManifest | None = None
    if resume:
        index_path = out_dir / "index.json"
        existing = DatasetManifest.load(out_dir) if index_path.exists() else DatasetManifest.scan_shards(out_dir)
        todo_ids = set(resume_filter(ids, existing))
        todo = [r for r in records if r.image_id in todo_ids]
        log.info("resume: %d of %d records already processed", len(existing.index), len(records))
    else:
        todo = records

    writer = ShardWriter(out_dir, shard_size=cfg.shard_size, resume_from=existing)
    counts: dict[str, int] = {}
    # Rejected records are cheap to re-check on resume, so counts are always
    # recomputed for every id not found in the shards; accepted-but-written
    # ids count from the shards themselves.
    counts["ok"] = len(existing.index) if existing is not None else 0

    try:
        with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
            for record, (verdict, entry) in zip(todo, pool.map(lambda r: process_record(r, cfg, client), todo)):
                if entry is None:
                    counts[verdict.reason] = counts.get(verdict.reason, 0) + 1
                    log.info("rejected %s: %s", record.image_id, verdict.reason)
                    continue
                writer.write(entry)
                counts["ok"] = counts.get("ok", 0) + 1
                if on_entry_written is not None:
                    on_entry_written(writer.entries_written, entry)
    except Exception:
        writer.abort()
        raise

    return writer.finalize(counts=counts, profile=cfg.profile, global_seed=cfg.global_seed)


def write_run_metadata(out_dir: str | Path, cfg: PipelineConfig, command: str) -> Path:
    """Drop a small provenance file next to the artifacts of a run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run-metadata.json"
    payload = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "global_seed": cfg.global_seed,
        "profile": cfg.profile_name,
        "pipeline_version": __version__,
        "phrase_table_version": _phrase_table_version(),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _phrase_table_version() -> int:
    from .bow import PHRASE_TABLE_VERSION

    return PHRASE_TABLE_VERSION
