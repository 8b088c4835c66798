"""Orchestration-level behavior: concurrency invariance, input hygiene."""

from __future__ import annotations

import pytest

from facecap.config import config_from_dict
from facecap.pipeline import make_client, process_record, run_caption_pipeline, run_filter
from facecap.schema import SchemaError

from synth import filter_fixture_records, record_with


def mock_cfg(**over):
    doc = {"global_seed": 7, "profile": "laion_face", "fusion": {"mock": True},
           "dataset": {"shard_size": 10}}
    doc.update(over)
    return config_from_dict(doc)


def test_filter_example_ten_records():
    # 7 clean, 2 multi-face, 1 low-res -> {ok: 7, multiple_faces: 2, low_resolution: 1}
    records = [record_with(f"ok_{i}") for i in range(7)]
    records += [record_with(f"mf_{i}", detection={"face_count": 2}) for i in range(2)]
    records.append(
        record_with("lr", detection={"box": [0.0, 0.0, 240.0, 240.0],
                                     "landmarks": [[10, 10], [200, 10], [120, 100], [60, 200], [180, 200]]})
    )
    _, counts = run_filter(records, mock_cfg())
    assert counts == {"ok": 7, "multiple_faces": 2, "low_resolution": 1}


def test_concurrency_does_not_change_bytes(tmp_path):
    records = filter_fixture_records()
    out1 = tmp_path / "c1"
    out4 = tmp_path / "c4"
    run_caption_pipeline(records, out1, mock_cfg(concurrency=1))
    run_caption_pipeline(records, out4, mock_cfg(concurrency=4))
    for name in ["shard-00000.jsonl", "shard-00001.jsonl", "index.json"]:
        assert (out1 / name).read_bytes() == (out4 / name).read_bytes()


def test_counts_conserve_input_size(tmp_path):
    records = filter_fixture_records()
    manifest = run_caption_pipeline(records, tmp_path / "m", mock_cfg())
    assert sum(manifest.counts.values()) == len(records)
    assert manifest.counts["ok"] == len(manifest.index)


def test_rejected_records_not_in_shards(tmp_path):
    records = filter_fixture_records()
    manifest = run_caption_pipeline(records, tmp_path / "m", mock_cfg())
    stored = {e.image_id for e in manifest.iter_entries()}
    rejected = {r.image_id for r in records} - stored
    assert len(stored) == manifest.counts["ok"]
    assert {"multi_0", "multi_1", "small_240", "no_face", "cartoon", "poster"} == rejected


def test_duplicate_input_ids_rejected(tmp_path):
    records = [record_with("dup"), record_with("dup")]
    with pytest.raises(SchemaError, match="dup"):
        run_caption_pipeline(records, tmp_path / "m", mock_cfg())


def test_entry_fields_populated(tmp_path):
    records = [record_with("full", attributes={"wearing_hat": True})]
    cfg = mock_cfg()
    manifest = run_caption_pipeline(records, tmp_path / "m", cfg)
    entry = manifest.read_entry("full")
    assert entry.image_path == "full"  # images_root defaults to "."
    x0, y0, x1, y1 = entry.crop_rect
    assert x1 - x0 == y1 - y0  # square crop stored
    assert entry.seeds.global_seed == 7
    assert entry.pipeline_version
    assert len(entry.caption_set.captions) == 3
    assert "wearing hat" in entry.bag_of_words.f2


def test_make_client_requires_endpoint_or_mock():
    cfg = config_from_dict({"fusion": {"mock": False}})
    with pytest.raises(ValueError, match="endpoint"):
        make_client(cfg)


def test_process_record_returns_reject_verdict():
    cfg = mock_cfg()
    verdict, entry = process_record(
        record_with("m2", detection={"face_count": 3}), cfg, client=None
    )
    assert verdict.reason == "multiple_faces"
    assert entry is None


def test_resume_reuses_only_missing_ids(tmp_path):
    records = filter_fixture_records()
    out = tmp_path / "m"
    full = run_caption_pipeline(records, out, mock_cfg())
    # wipe the index to simulate an interrupted finalize; shards stay
    (out / "index.json").unlink()
    resumed = run_caption_pipeline(records, out, mock_cfg(), resume=True)
    assert resumed.index == full.index
    assert resumed.counts == full.counts
