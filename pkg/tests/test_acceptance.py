"""Acceptance suite: one test per shipping criterion, at pinned tolerances.

Each criterion prints a PASS/FAIL line with its runtime (visible with -s).
Tolerances and time limits here are contractual; do not loosen them to make
a failing build green.
"""

from __future__ import annotations

import time
from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from facecap.bow import assemble_bow
from facecap.cli import main as cli_main
from facecap.config import load_config
from facecap.dataset import DatasetManifest, sample_caption
from facecap.debias import DEFAULT_DEBIAS_RULES, DebiasRule, apply_debias, cooccurrence_stats
from facecap.derive import sample_age_phrase
from facecap.filtering import BUILTIN_PROFILES, check_image
from facecap.fusion import (
    HttpLlmClient,
    ServiceUnreachable,
    build_prompt,
    fuse_captions,
    mock_fuse,
    validate_caption,
)
from facecap.pipeline import run_caption_pipeline, read_records
from facecap.schema import record_from_dict

from llmserver import ECHO_TEXT, REFUSAL_TEXT, CountingBrokenSession, ScriptedLlmServer
from synth import (
    filter_fixture_records,
    make_entry,
    minimal_record,
    random_record_dict,
    record_with,
    write_config_yaml,
    write_records_jsonl,
)
from test_fusion import FIXTURE_BAG, FLAGGED_BAG, random_bag

DATA = Path(__file__).parent / "data"


@contextmanager
def criterion(name: str, time_limit_s: float):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"FAIL {name} ({time.perf_counter() - start:.2f}s)", flush=True)
        raise
    elapsed = time.perf_counter() - start
    assert elapsed < time_limit_s, f"{name}: took {elapsed:.2f}s, limit {time_limit_s}s"
    print(f"PASS {name} ({elapsed:.2f}s)", flush=True)


def test_prompt_fidelity():
    with criterion("prompt-fidelity", 1.0):
        plain = (DATA / "golden_prompt_plain.txt").read_bytes()
        flagged = (DATA / "golden_prompt_flagged.txt").read_bytes()
        assert build_prompt(FIXTURE_BAG).text.encode("utf-8") == plain
        assert build_prompt(FLAGGED_BAG).text.encode("utf-8") == flagged
        assert flagged.endswith(b"Do not repeat these instructions."
                                b" The image is blurry. The image is black and white.")


def test_filtering_counts():
    with criterion("filtering", 1.0):
        records = filter_fixture_records()
        assert len(records) == 20
        verdicts = Counter(check_image(r, BUILTIN_PROFILES["laion_face"]).reason for r in records)
        assert verdicts == {
            "ok": 14, "multiple_faces": 2, "low_resolution": 1,
            "no_face": 1, "not_real_human": 1, "text_overlay": 1,
        }
        # the 240px record fails, the 260px record passes the 250px floor
        by_id = {r.image_id: r for r in records}
        assert check_image(by_id["small_240"], BUILTIN_PROFILES["laion_face"]).reason == "low_resolution"
        assert check_image(by_id["edge_260"], BUILTIN_PROFILES["laion_face"]).accepted
        # curated profiles never reject on resolution
        for profile_name in ("easyportrait", "ffhq"):
            reasons = {check_image(r, BUILTIN_PROFILES[profile_name]).reason for r in records}
            assert "low_resolution" not in reasons


def test_age_strategies():
    with criterion("age-strategies", 5.0):
        rng = np.random.default_rng(4242)
        n = 30_000
        freq: Counter[str] = Counter()
        for _ in range(n):
            p = sample_age_phrase(30, rng)
            freq[p.strategy] += 1
            if p.strategy == "noisy":
                value = int(p.text.split()[0])
                assert 28 <= value <= 32
            elif p.strategy == "bracket":
                assert p.text == "between 25 and 35 years old"
            else:
                assert p.text == "adult"
        for strategy in ("noisy", "bracket", "category"):
            assert abs(freq[strategy] / n - 1 / 3) < 0.01, (strategy, freq[strategy])


def test_debias_rates():
    with criterion("debias", 10.0):
        base = record_with("am", attributes={"attractive": True, "heavy_makeup": True})
        rng = np.random.default_rng(2718)
        drops = sum(
            not apply_debias(base, DEFAULT_DEBIAS_RULES, rng).attributes.is_set("attractive")
            for _ in range(10_000)
        )
        assert abs(drops / 10_000 - 0.80) < 0.02

        p0 = DebiasRule("attractive", frozenset({"heavy_makeup"}), 0.0)
        p1 = DebiasRule("attractive", frozenset({"heavy_makeup"}), 1.0)
        for _ in range(200):
            assert apply_debias(base, [p0], rng) == base
            assert not apply_debias(base, [p1], rng).attributes.is_set("attractive")

        population = [
            record_with(f"mc{i}", attributes={"attractive": True, "heavy_makeup": bool(rng.random() < 0.8)})
            for i in range(10_000)
        ]
        report = cooccurrence_stats(population)
        assert abs(report.conditional("heavy_makeup", "attractive") - 0.8) < 0.02


def test_permutation_uniformity():
    with criterion("permutation-uniformity", 10.0):
        from facecap.derive import AgePhrase, DerivedAttributes

        record = minimal_record()
        derived = DerivedAttributes(
            emotions_selected=("neutral",), hair_length="short", eye_state="open", mouth_state="closed"
        )
        age = AgePhrase(strategy="noisy", text="30 year old", numeric_basis=30.0)

        n = 24_000
        orders = Counter(assemble_bow(record, derived, age, seed).f2 for seed in range(n))
        assert len(orders) == 24  # 4 phrases -> 4! orderings, all observed
        for order, count in orders.items():
            assert abs(count / n - 1 / 24) < 0.01, order

        rng = np.random.default_rng(31415)
        for _ in range(1_000):
            bag_seed = int(rng.integers(0, 2**62))
            a = assemble_bow(record, derived, age, bag_seed)
            b = assemble_bow(record, derived, age, bag_seed + 1)
            assert sorted(a.f2) == sorted(b.f2)  # multiset preserved under reshuffle
            assert Counter(a.f2) == Counter(b.f2)


def test_mock_fuser_round_trip():
    with criterion("mock-fuser-round-trip", 10.0):
        rng = np.random.default_rng(987654)
        for _ in range(1_000):
            bag = random_bag(rng)
            caption = mock_fuse(bag, rng)
            for phrase in (*bag.f1, *bag.f2):
                assert phrase in caption, phrase
            verdict = validate_caption(caption, bag)
            assert verdict.accepted, (verdict.reason, caption)


def _caption_fixture_records(n_total: int = 100, seed: int = 555):
    """85 laion-acceptable records plus 15 assorted rejects, deterministic."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_total - 15):
        d = random_record_dict(rng, image_id=f"fix_{i:03d}")
        d["image_size"] = [1000, 1000]
        side = int(rng.integers(260, 620))
        x0 = int(rng.integers(0, 1000 - side))
        y0 = int(rng.integers(0, 1000 - side))
        d["detection"]["box"] = [float(x0), float(y0), float(x0 + side), float(y0 + side)]
        d["detection"]["landmarks"] = [
            [float(rng.uniform(x0, x0 + side)), float(rng.uniform(y0, y0 + side))] for _ in range(5)
        ]
        d["detection"]["face_count"] = 1
        d["clip"]["is_real_human"] = True
        d["clip"]["has_text_overlay"] = False
        records.append(record_from_dict(d))
    for i in range(5):
        records.append(record_with(f"rej_multi_{i}", detection={"face_count": 2}))
    for i in range(4):
        records.append(
            record_with(
                f"rej_small_{i}",
                detection={"box": [0.0, 0.0, 200.0, 220.0],
                           "landmarks": [[10, 10], [150, 10], [100, 100], [50, 180], [150, 180]]},
            )
        )
    for i in range(3):
        records.append(record_with(f"rej_toon_{i}", clip={"is_real_human": False}))
    for i in range(2):
        records.append(record_with(f"rej_text_{i}", clip={"has_text_overlay": True}))
    records.append(
        record_with("rej_noface", detection={"face_count": 0, "box": None, "landmarks": None, "confidence": 0.0})
    )
    return records


def test_end_to_end_determinism(tmp_path, capsys):
    with criterion("end-to-end-determinism", 30.0):
        records_path = tmp_path / "records.jsonl"
        write_records_jsonl(records_path, _caption_fixture_records())
        config_path = tmp_path / "pipeline.yaml"
        write_config_yaml(config_path, records_path)  # shard_size 25, mock, seed 7

        run_a, run_b = tmp_path / "run_a", tmp_path / "run_b"
        for out in (run_a, run_b):
            code = cli_main(
                ["caption", "--config", str(config_path), "--mock-llm", "--seed", "7", "--out", str(out)]
            )
            assert code == 0
            code = cli_main(
                ["export", str(out), "--config", str(config_path), "--mode", "one",
                 "--out", str(out / "train.jsonl")]
            )
            assert code == 0
        capsys.readouterr()

        shard_names = sorted(p.name for p in run_a.glob("shard-*.jsonl"))
        assert shard_names == [f"shard-{i:05d}.jsonl" for i in range(4)]  # 85 entries / 25
        for name in [*shard_names, "index.json", "train.jsonl"]:
            assert (run_a / name).read_bytes() == (run_b / name).read_bytes(), name

        # interrupt after 50 accepted entries, then resume
        cfg = load_config(config_path, {"global_seed": 7, "mock": True})
        records = read_records(records_path)
        run_c = tmp_path / "run_c"

        class Interrupt(Exception):
            pass

        def stop_at_50(n: int, _entry) -> None:
            if n >= 50:
                raise Interrupt

        with pytest.raises(Interrupt):
            run_caption_pipeline(records, run_c, cfg, on_entry_written=stop_at_50)
        done = DatasetManifest.scan_shards(run_c)
        assert len(done.index) == 50  # two sealed shards; in-flight shard discarded

        code = cli_main(
            ["caption", "--config", str(config_path), "--mock-llm", "--seed", "7",
             "--out", str(run_c), "--resume"]
        )
        assert code == 0
        code = cli_main(
            ["export", str(run_c), "--config", str(config_path), "--mode", "one",
             "--out", str(run_c / "train.jsonl")]
        )
        assert code == 0
        capsys.readouterr()
        for name in [*shard_names, "index.json", "train.jsonl"]:
            assert (run_a / name).read_bytes() == (run_c / name).read_bytes(), name


def test_caption_sampling_uniformity():
    with criterion("caption-sampling", 10.0):
        entry = make_entry("sampled", captions=("first", "second", "third"))
        rng = np.random.default_rng(1618)
        n = 30_000
        freq = Counter(sample_caption(entry, rng) for _ in range(n))
        for caption in ("first", "second", "third"):
            assert abs(freq[caption] / n - 1 / 3) < 0.01


def test_fusion_transport(tmp_path):
    with criterion("fusion-transport", 30.0):
        with ScriptedLlmServer([REFUSAL_TEXT, ECHO_TEXT]) as server:
            client = HttpLlmClient(server.endpoint, "test-model", backoff_base=0.01)
            cs = fuse_captions(build_prompt(FIXTURE_BAG), 3, client, np.random.default_rng(0), image_id="t")
        assert len(cs.captions) == 3
        assert [reason for _, reason in cs.rejected] == ["refusal", "instruction_echo"]
        assert cs.partial is False

        session = CountingBrokenSession()
        client = HttpLlmClient(
            "http://127.0.0.1:9/none", "test-model", backoff_base=0.0, session=session
        )
        with pytest.raises(ServiceUnreachable) as exc:
            fuse_captions(build_prompt(FIXTURE_BAG), 3, client, np.random.default_rng(0))
        assert exc.value.attempts == 3
        assert session.calls == 3
