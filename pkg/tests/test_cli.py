"""CLI subcommands end to end (in-process, mock LLM)."""

from __future__ import annotations

import json
import subprocess
import sys

import pytest

from facecap.cli import main

from synth import filter_fixture_records, minimal_record, random_record, write_config_yaml, write_records_jsonl
import numpy as np


@pytest.fixture
def workspace(tmp_path):
    records = filter_fixture_records()
    records_path = tmp_path / "records.jsonl"
    write_records_jsonl(records_path, records)
    config_path = tmp_path / "pipeline.yaml"
    write_config_yaml(config_path, records_path)
    return tmp_path, config_path


def run_cli(capsys, *argv) -> tuple[int, str, str]:
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestValidateConfig:
    def test_ok(self, workspace, capsys):
        _, config = workspace
        code, out, _ = run_cli(capsys, "validate-config", "--config", config)
        assert code == 0
        payload = json.loads(out)
        assert payload["ok"] is True and payload["profile"] == "laion_face"

    def test_negative_shard_size_fails_with_field_path(self, tmp_path, capsys):
        config = tmp_path / "bad.yaml"
        write_config_yaml(config, "r.jsonl", dataset={"shard_size": -1})
        code, _, err = run_cli(capsys, "validate-config", "--config", config)
        assert code != 0
        payload = json.loads(err)
        assert payload["error"] == "ConfigError"
        assert payload["field"] == "dataset.shard_size"

    def test_unknown_key_fails(self, tmp_path, capsys):
        config = tmp_path / "bad2.yaml"
        write_config_yaml(config, "r.jsonl", fusion={"temprature": 1.0})
        code, _, err = run_cli(capsys, "validate-config", "--config", config)
        assert code == 2
        assert json.loads(err)["field"] == "fusion.temprature"


class TestFilter:
    def test_fixture_counts(self, workspace, capsys):
        tmp, config = workspace
        code, out, _ = run_cli(capsys, "filter", "--config", config, "--out", tmp / "fl")
        assert code == 0
        payload = json.loads(out)
        assert payload["input"] == 20
        assert payload["counts"] == {
            "ok": 14, "multiple_faces": 2, "low_resolution": 1,
            "no_face": 1, "not_real_human": 1, "text_overlay": 1,
        }
        verdicts = [json.loads(line) for line in (tmp / "fl" / "verdicts.jsonl").read_text().splitlines()]
        assert len(verdicts) == 20
        assert (tmp / "fl" / "run-metadata.json").exists()

    def test_profile_override_drops_resolution_rule(self, workspace, capsys):
        _, config = workspace
        code, out, _ = run_cli(capsys, "filter", "--config", config, "--profile", "ffhq")
        assert code == 0
        counts = json.loads(out)["counts"]
        assert "low_resolution" not in counts
        assert "not_real_human" not in counts
        assert counts["ok"] == 17


class TestCaption:
    def test_mock_run_and_determinism(self, workspace, capsys):
        tmp, config = workspace
        out1, out2 = tmp / "m1", tmp / "m2"
        code, stdout, _ = run_cli(capsys, "caption", "--config", config, "--mock-llm", "--seed", 7, "--out", out1)
        assert code == 0
        summary = json.loads(stdout)
        assert summary["entries"] == 14
        assert summary["counts"]["ok"] == 14

        code, _, _ = run_cli(capsys, "caption", "--config", config, "--mock-llm", "--seed", 7, "--out", out2)
        assert code == 0
        for name in ["shard-00000.jsonl", "index.json"]:
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        assert (out1 / "run-metadata.json").exists()

    def test_seed_changes_output(self, workspace, capsys):
        tmp, config = workspace
        out1, out2 = tmp / "s7", tmp / "s8"
        run_cli(capsys, "caption", "--config", config, "--mock-llm", "--seed", 7, "--out", out1)
        run_cli(capsys, "caption", "--config", config, "--mock-llm", "--seed", 8, "--out", out2)
        assert (out1 / "shard-00000.jsonl").read_bytes() != (out2 / "shard-00000.jsonl").read_bytes()

    def test_captions_per_image_override(self, workspace, capsys):
        tmp, config = workspace
        out = tmp / "n5"
        code, _, _ = run_cli(
            capsys, "caption", "--config", config, "--mock-llm", "--captions-per-image", 5, "--out", out
        )
        assert code == 0
        from facecap.dataset import DatasetManifest

        entry = next(DatasetManifest.load(out).iter_entries())
        assert len(entry.caption_set.captions) == 5

    def test_resume_noop_on_complete_manifest(self, workspace, capsys):
        tmp, config = workspace
        out = tmp / "res"
        run_cli(capsys, "caption", "--config", config, "--mock-llm", "--out", out)
        first = (out / "index.json").read_bytes()
        code, _, _ = run_cli(capsys, "caption", "--config", config, "--mock-llm", "--out", out, "--resume")
        assert code == 0
        assert (out / "index.json").read_bytes() == first

    def test_schema_error_is_machine_readable(self, tmp_path, capsys):
        records_path = tmp_path / "bad_records.jsonl"
        records_path.write_text('{"image_id": "x"}\n', encoding="utf-8")
        config = tmp_path / "cfg.yaml"
        write_config_yaml(config, records_path)
        code, _, err = run_cli(capsys, "caption", "--config", config, "--mock-llm", "--out", tmp_path / "o")
        assert code == 1
        payload = json.loads(err)
        assert payload["error"] == "SchemaError"
        assert "bad_records.jsonl:1" in payload["field"]


class TestExportAndStats:
    @pytest.fixture
    def captioned(self, workspace, capsys):
        tmp, config = workspace
        out = tmp / "manifest"
        assert run_cli(capsys, "caption", "--config", config, "--mock-llm", "--out", out)[0] == 0
        return tmp, config, out

    def test_export_both_modes(self, captioned, capsys):
        tmp, config, manifest_dir = captioned
        code, stdout, _ = run_cli(
            capsys, "export", manifest_dir, "--config", config, "--mode", "all", "--out", tmp / "all.jsonl"
        )
        assert code == 0
        assert json.loads(stdout)["lines"] == 14
        lines = [json.loads(x) for x in (tmp / "all.jsonl").read_text().splitlines()]
        assert all(len(x["captions"]) == 3 for x in lines)

        code, stdout, _ = run_cli(
            capsys, "export", manifest_dir, "--config", config, "--mode", "one", "--out", tmp / "one.jsonl"
        )
        assert code == 0
        lines = [json.loads(x) for x in (tmp / "one.jsonl").read_text().splitlines()]
        assert all(isinstance(x["caption"], str) for x in lines)

    def test_stats_reports(self, captioned, capsys):
        tmp, config, manifest_dir = captioned
        code, stdout, _ = run_cli(capsys, "stats", manifest_dir, "--config", config, "--out", tmp / "st")
        assert code == 0
        assert "gender distribution" in stdout
        payload = json.loads((tmp / "st" / "stats.json").read_text())
        assert payload["n_entries"] == 14
        assert payload["counts"]["multiple_faces"] == 2

    def test_stats_on_missing_manifest(self, workspace, capsys):
        tmp, config = workspace
        code, _, err = run_cli(capsys, "stats", tmp / "nowhere", "--config", config)
        assert code == 1
        assert json.loads(err)["error"] == "CorruptIndex"


class TestConsoleEntryPoint:
    def test_subprocess_invocation(self, tmp_path):
        records_path = tmp_path / "records.jsonl"
        write_records_jsonl(records_path, [minimal_record("p1"), random_record(np.random.default_rng(1), "p2")])
        config = tmp_path / "cfg.yaml"
        write_config_yaml(config, records_path)
        proc = subprocess.run(
            [sys.executable, "-m", "facecap.cli", "validate-config", "--config", str(config)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert json.loads(proc.stdout)["ok"] is True
