"""Sharded manifest persistence, resume, training export, and statistics.

Shards are bounded JSONL files written to a temp name and atomically renamed
when complete, so a crashed run leaves only whole shards behind; the index is
always written last. Everything in a shard is deterministic given the input
records and the global seed, which is what makes resume-equals-rerun hold.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from ._version import __version__ as _pipeline_version
from .bow import BagOfWords
from .debias import CooccurrenceCounter, CooccurrenceReport
from .derive import AgePhrase, DerivedAttributes
from .filtering import REJECT_REASONS, DatasetProfile
from .fusion import CaptionSet
from .schema import ATTRIBUTE_IDS, AttributeRecord, record_from_dict, record_to_dict
from .seeds import stream_rng

INDEX_FILENAME = "index.json"
DEFAULT_SHARD_SIZE = 10_000
INDEX_FORMAT_VERSION = 1

CAPTION_SAMPLE_STREAM = "caption_sample"


class DuplicateImageId(ValueError):
    pass


class CorruptIndex(ValueError):
    pass


class EmptyManifest(ValueError):
    pass


def _shard_name(i: int) -> str:
    return f"shard-{i:05d}.jsonl"


def _dump_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@dataclass(frozen=True)
class Seeds:
    global_seed: int
    per_image: int


@dataclass(frozen=True)
class ManifestEntry:
    """One accepted image's full pipeline output, as persisted in a shard."""

    image_id: str
    image_path: str
    crop_rect: tuple[int, int, int, int]
    source_dataset: str
    attribute_record: AttributeRecord  # raw flags; debias drops live in dropped_labels
    derived: DerivedAttributes
    age_phrase: AgePhrase
    bag_of_words: BagOfWords
    caption_set: CaptionSet
    dropped_labels: tuple[str, ...]
    seeds: Seeds
    pipeline_version: str

    def to_json_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "crop_rect": list(self.crop_rect),
            "source_dataset": self.source_dataset,
            "attribute_record": record_to_dict(self.attribute_record),
            "derived": {
                "emotions_selected": list(self.derived.emotions_selected),
                "hair_length": self.derived.hair_length,
                "eye_state": self.derived.eye_state,
                "mouth_state": self.derived.mouth_state,
                "age_phrase": {
                    "strategy": self.age_phrase.strategy,
                    "text": self.age_phrase.text,
                    "numeric_basis": self.age_phrase.numeric_basis,
                },
            },
            "bag_of_words": self.bag_of_words.to_json_dict(),
            "caption_set": self.caption_set.to_json_dict(),
            "dropped_labels": list(self.dropped_labels),
            "seeds": {"global": self.seeds.global_seed, "per_image": self.seeds.per_image},
            "pipeline_version": self.pipeline_version,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> ManifestEntry:
        derived = d["derived"]
        age = derived["age_phrase"]
        return cls(
            image_id=d["image_id"],
            image_path=d["image_path"],
            crop_rect=tuple(d["crop_rect"]),
            source_dataset=d["source_dataset"],
            attribute_record=record_from_dict(d["attribute_record"], "attribute_record"),
            derived=DerivedAttributes(
                emotions_selected=tuple(derived["emotions_selected"]),
                hair_length=derived["hair_length"],
                eye_state=derived["eye_state"],
                mouth_state=derived["mouth_state"],
            ),
            age_phrase=AgePhrase(
                strategy=age["strategy"], text=age["text"], numeric_basis=age["numeric_basis"]
            ),
            bag_of_words=BagOfWords.from_json_dict(d["bag_of_words"]),
            caption_set=CaptionSet.from_json_dict(d["caption_set"]),
            dropped_labels=tuple(d["dropped_labels"]),
            seeds=Seeds(global_seed=d["seeds"]["global"], per_image=d["seeds"]["per_image"]),
            pipeline_version=d["pipeline_version"],
        )


@dataclass
class DatasetManifest:
    """Handle over a manifest directory: shard list, id index, run counts."""

    root: Path
    shards: list[str]
    index: dict[str, tuple[int, int]]  # image_id -> (shard position, line)
    counts: dict[str, int]
    profile: DatasetProfile | None = None
    global_seed: int | None = None
    shard_size: int = DEFAULT_SHARD_SIZE
    pipeline_version: str = _pipeline_version

    def __len__(self) -> int:
        return len(self.index)

    def iter_entries(self) -> Iterator[ManifestEntry]:
        """Entries in shard order, i.e. the order they were accepted."""
        for name in self.shards:
            with open(self.root / name, encoding="utf-8") as f:
                for line in f:
                    yield ManifestEntry.from_json_dict(json.loads(line))

    def read_entry(self, image_id: str) -> ManifestEntry:
        shard_pos, line_no = self.index[image_id]
        with open(self.root / self.shards[shard_pos], encoding="utf-8") as f:
            for i, line in enumerate(f):
                if i == line_no:
                    return ManifestEntry.from_json_dict(json.loads(line))
        raise CorruptIndex(f"{image_id}: line {line_no} not found in {self.shards[shard_pos]}")

    def write_index(self) -> None:
        doc = {
            "format_version": INDEX_FORMAT_VERSION,
            "pipeline_version": self.pipeline_version,
            "global_seed": self.global_seed,
            "shard_size": self.shard_size,
            "profile": None
            if self.profile is None
            else {
                "name": self.profile.name,
                "min_face_side_px": self.profile.min_face_side_px,
                "require_single_face": self.profile.require_single_face,
                "require_real_human": self.profile.require_real_human,
                "reject_text_overlay": self.profile.reject_text_overlay,
            },
            "shards": list(self.shards),
            "counts": {k: self.counts[k] for k in sorted(self.counts)},
            "entries": {
                image_id: {"shard": pos, "line": line}
                for image_id, (pos, line) in sorted(self.index.items())
            },
        }
        _atomic_write_text(self.root / INDEX_FILENAME, _dump_line(doc) + "\n")

    @classmethod
    def load(cls, root: str | Path) -> DatasetManifest:
        root = Path(root)
        path = root / INDEX_FILENAME
        if not path.exists():
            raise CorruptIndex(f"no {INDEX_FILENAME} in {root}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            profile = None
            if doc["profile"] is not None:
                profile = DatasetProfile(**doc["profile"])
            manifest = cls(
                root=root,
                shards=list(doc["shards"]),
                index={k: (v["shard"], v["line"]) for k, v in doc["entries"].items()},
                counts=dict(doc["counts"]),
                profile=profile,
                global_seed=doc["global_seed"],
                shard_size=doc["shard_size"],
                pipeline_version=doc["pipeline_version"],
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorruptIndex(f"unreadable index at {path}: {e}") from e
        for name in manifest.shards:
            if not (root / name).exists():
                raise CorruptIndex(f"index references missing shard {name}")
        return manifest

    @classmethod
    def scan_shards(cls, root: str | Path) -> DatasetManifest:
        """Rebuild the processed-id index from complete shards on disk.

        Used for resume after an interrupted run: the index file was never
        written, but every renamed shard is complete and trustworthy.
        In-progress ``*.tmp`` leftovers are discarded.
        """
        root = Path(root)
        for tmp in root.glob("*.tmp"):
            tmp.unlink()
        shards = sorted(p.name for p in root.glob("shard-*.jsonl"))
        index: dict[str, tuple[int, int]] = {}
        for pos, name in enumerate(shards):
            with open(root / name, encoding="utf-8") as f:
                for line_no, line in enumerate(f):
                    try:
                        image_id = json.loads(line)["image_id"]
                    except (json.JSONDecodeError, KeyError) as e:
                        raise CorruptIndex(f"bad line {line_no} in shard {name}: {e}") from e
                    if image_id in index:
                        raise CorruptIndex(f"duplicate image_id {image_id!r} across shards")
                    index[image_id] = (pos, line_no)
        return cls(root=root, shards=shards, index=index, counts={})


class ShardWriter:
    """Appends entries to bounded shards; only complete shards get renamed in."""

    def __init__(
        self,
        root: str | Path,
        shard_size: int = DEFAULT_SHARD_SIZE,
        resume_from: DatasetManifest | None = None,
    ):
        if shard_size < 1:
            raise ValueError(f"shard_size must be >= 1, got {shard_size}")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.shard_size = shard_size
        if resume_from is not None:
            self._shards = list(resume_from.shards)
            self._index = dict(resume_from.index)
        else:
            self._shards = []
            self._index = {}
        self._fh = None
        self._tmp_path: Path | None = None
        self._lines_in_current = 0

    @property
    def entries_written(self) -> int:
        return len(self._index)

    def _open_next(self) -> None:
        name = _shard_name(len(self._shards))
        self._tmp_path = self.root / (name + ".tmp")
        self._fh = open(self._tmp_path, "w", encoding="utf-8")
        self._lines_in_current = 0

    def _seal_current(self) -> None:
        assert self._fh is not None and self._tmp_path is not None
        self._fh.close()
        name = _shard_name(len(self._shards))
        os.replace(self._tmp_path, self.root / name)
        self._shards.append(name)
        self._fh = None
        self._tmp_path = None

    def write(self, entry: ManifestEntry) -> None:
        if entry.image_id in self._index:
            self.abort()
            raise DuplicateImageId(f"duplicate image_id {entry.image_id!r}")
        if self._fh is None:
            self._open_next()
        self._index[entry.image_id] = (len(self._shards), self._lines_in_current)
        self._fh.write(_dump_line(entry.to_json_dict()) + "\n")
        self._lines_in_current += 1
        if self._lines_in_current >= self.shard_size:
            self._seal_current()

    def abort(self) -> None:
        """Drop the in-progress shard; complete shards stay on disk."""
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        if self._tmp_path is not None and self._tmp_path.exists():
            self._tmp_path.unlink()
        self._tmp_path = None

    def finalize(
        self,
        counts: dict[str, int] | None = None,
        profile: DatasetProfile | None = None,
        global_seed: int | None = None,
    ) -> DatasetManifest:
        if self._fh is not None:
            self._seal_current()
        manifest = DatasetManifest(
            root=self.root,
            shards=self._shards,
            index=self._index,
            counts=counts if counts is not None else {"ok": len(self._index)},
            profile=profile,
            global_seed=global_seed,
            shard_size=self.shard_size,
        )
        manifest.write_index()
        return manifest


def write_entries(
    entries: Iterable[ManifestEntry],
    out_dir: str | Path,
    shard_size: int = DEFAULT_SHARD_SIZE,
    counts: dict[str, int] | None = None,
    profile: DatasetProfile | None = None,
    global_seed: int | None = None,
) -> DatasetManifest:
    """Persist a stream of entries as JSONL shards plus the index file."""
    writer = ShardWriter(out_dir, shard_size=shard_size)
    try:
        for entry in entries:
            writer.write(entry)
    except Exception:
        writer.abort()
        raise
    return writer.finalize(counts=counts, profile=profile, global_seed=global_seed)


def resume_filter(ids: Iterable[str], manifest: DatasetManifest) -> Iterator[str]:
    """Ids absent from the manifest index, in input order."""
    for image_id in ids:
        if image_id not in manifest.index:
            yield image_id


def sample_caption(e: ManifestEntry, rng: np.random.Generator) -> str:
    """Uniform draw from the entry's caption set."""
    return e.caption_set.captions[int(rng.integers(0, len(e.caption_set.captions)))]


EXPORT_MODES = ("all_captions", "one_per_image")


def export_training_manifest(m: DatasetManifest, mode: str, out: str | Path) -> int:
    """Write the training-pair JSONL; returns the number of lines written.

    ``one_per_image`` draws each image's caption with a generator derived
    from the manifest's global seed and the image id, so exports are
    reproducible and order-independent.
    """
    if mode not in EXPORT_MODES:
        raise ValueError(f"mode must be one of {EXPORT_MODES}, got {mode!r}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    n = 0
    with open(tmp, "w", encoding="utf-8") as f:
        for entry in m.iter_entries():
            if mode == "all_captions":
                payload = {
                    "image_path": entry.image_path,
                    "captions": list(entry.caption_set.captions),
                    "crop_rect": list(entry.crop_rect),
                }
            else:
                rng = stream_rng(m.global_seed or 0, entry.image_id, CAPTION_SAMPLE_STREAM)
                payload = {
                    "image_path": entry.image_path,
                    "caption": sample_caption(entry, rng),
                    "crop_rect": list(entry.crop_rect),
                }
            f.write(_dump_line(payload) + "\n")
            n += 1
    os.replace(tmp, out)
    return n


@dataclass
class StatsReport:
    """Dataset audit: marginals, demographics, rejections, caption lengths."""

    n_entries: int
    counts: dict[str, int]
    attribute_marginals: dict[str, float]
    gender_distribution: dict[str, float]
    ethnicity_distribution: dict[str, float]
    age_summary: dict[str, float]
    emotion_distribution: dict[str, float]
    caption_word_counts: dict[int, int]
    cooccurrence: CooccurrenceReport

    def to_json_dict(self) -> dict:
        return {
            "n_entries": self.n_entries,
            "counts": {k: self.counts[k] for k in sorted(self.counts)},
            "attribute_marginals": self.attribute_marginals,
            "gender_distribution": self.gender_distribution,
            "ethnicity_distribution": self.ethnicity_distribution,
            "age_summary": self.age_summary,
            "emotion_distribution": self.emotion_distribution,
            "caption_word_counts": {str(k): v for k, v in sorted(self.caption_word_counts.items())},
            "cooccurrence": self.cooccurrence.to_json_dict(),
        }

    def to_text(self) -> str:
        lines = [f"manifest entries: {self.n_entries}"]
        lines.append("verdict counts:")
        for k in sorted(self.counts):
            lines.append(f"  {k}: {self.counts[k]}")
        lines.append("gender distribution:")
        for k, v in sorted(self.gender_distribution.items()):
            lines.append(f"  {k}: {v:.3f}")
        lines.append("ethnicity distribution:")
        for k, v in sorted(self.ethnicity_distribution.items()):
            lines.append(f"  {k}: {v:.3f}")
        lines.append(
            "age: mean {mean:.1f}, min {min:.1f}, max {max:.1f}".format(**self.age_summary)
        )
        lines.append("emotion distribution (selected):")
        for k, v in sorted(self.emotion_distribution.items()):
            lines.append(f"  {k}: {v:.3f}")
        lines.append("attribute marginals (nonzero):")
        for k, v in self.attribute_marginals.items():
            if v:
                lines.append(f"  {k}: {v:.3f}")
        lines.append(self.cooccurrence.to_text())
        return "\n".join(lines)


def stats_report(m: DatasetManifest) -> StatsReport:
    """Single pass over the manifest; see StatsReport for what it gathers."""
    n = 0
    counter = CooccurrenceCounter()
    gender: dict[str, int] = {}
    ethnicity: dict[str, int] = {}
    emotions: dict[str, int] = {}
    word_counts: dict[int, int] = {}
    ages: list[float] = []

    for entry in m.iter_entries():
        n += 1
        record = entry.attribute_record
        counter.update(record)
        gender[record.demographics.gender] = gender.get(record.demographics.gender, 0) + 1
        ethnicity[record.demographics.ethnicity] = ethnicity.get(record.demographics.ethnicity, 0) + 1
        ages.append(record.demographics.age_pred)
        for e in entry.derived.emotions_selected:
            emotions[e] = emotions.get(e, 0) + 1
        for caption in entry.caption_set.captions:
            wc = len(caption.split())
            word_counts[wc] = word_counts.get(wc, 0) + 1

    if n == 0:
        raise EmptyManifest(f"manifest at {m.root} has no entries")

    cooc = counter.finalize()
    return StatsReport(
        n_entries=n,
        counts=dict(m.counts),
        attribute_marginals={a: float(cooc.marginal[i] / n) for i, a in enumerate(ATTRIBUTE_IDS)},
        gender_distribution={k: v / n for k, v in sorted(gender.items())},
        ethnicity_distribution={k: v / n for k, v in sorted(ethnicity.items())},
        age_summary={"mean": float(np.mean(ages)), "min": float(np.min(ages)), "max": float(np.max(ages))},
        emotion_distribution={k: v / n for k, v in sorted(emotions.items())},
        caption_word_counts=word_counts,
        cooccurrence=cooc,
    )


def conservation_holds(counts: dict[str, int], input_size: int) -> bool:
    """accepted + sum(rejected by reason) == input size."""
    return sum(counts.get(r, 0) for r in REJECT_REASONS) == input_size
