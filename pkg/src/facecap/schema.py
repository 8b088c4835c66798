"""Attribute vocabulary and the canonical per-image record.

Every pipeline stage consumes the types defined here. Records are persisted
as UTF-8 JSONL with snake_case field names; ``data/attribute_record.schema.json``
pins the on-disk format. All types are immutable after construction and safe
to share between workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

SCHEMA_VERSION = 1

# The 40-attribute vocabulary, in canonical order. Keys are the internal
# snake_case ids; values are the human-readable strings that enter captions.
ATTRIBUTE_NAMES: dict[str, str] = {
    "five_o_clock_shadow": "5 o'clock shadow",
    "arched_eyebrows": "arched eyebrows",
    "attractive": "attractive",
    "bags_under_eyes": "bags under eyes",
    "bald": "bald",
    "bangs": "bangs",
    "big_lips": "big lips",
    "big_nose": "big nose",
    "black_hair": "black hair",
    "blond_hair": "blond hair",
    "blurry": "blurry",
    "brown_hair": "brown hair",
    "bushy_eyebrows": "bushy eyebrows",
    "chubby": "chubby",
    "double_chin": "double chin",
    "eyeglasses": "eyeglasses",
    "goatee": "goatee",
    "gray_hair": "gray hair",
    "heavy_makeup": "heavy makeup",
    "high_cheekbones": "high cheekbones",
    "male": "male",
    "mouth_slightly_open": "mouth slightly open",
    "mustache": "mustache",
    "narrow_eyes": "narrow eyes",
    "no_beard": "no beard",
    "oval_face": "oval face",
    "pale_skin": "pale skin",
    "pointy_nose": "pointy nose",
    "receding_hairline": "receding hairline",
    "rosy_cheeks": "rosy cheeks",
    "sideburns": "sideburns",
    "smiling": "smiling",
    "straight_hair": "straight hair",
    "wavy_hair": "wavy hair",
    "wearing_earrings": "wearing earrings",
    "wearing_hat": "wearing hat",
    "wearing_lipstick": "wearing lipstick",
    "wearing_necklace": "wearing necklace",
    "wearing_necktie": "wearing necktie",
    "young": "young",
}

ATTRIBUTE_IDS: tuple[str, ...] = tuple(ATTRIBUTE_NAMES)
_ATTRIBUTE_POS: dict[str, int] = {a: i for i, a in enumerate(ATTRIBUTE_IDS)}

EMOTIONS: tuple[str, ...] = (
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
    "neutral",
)
_EMOTION_POS: dict[str, int] = {e: i for i, e in enumerate(EMOTIONS)}

GENDERS: tuple[str, ...] = ("male", "female")

ETHNICITIES: dict[str, str] = {
    "black": "black",
    "white": "white",
    "asian": "asian",
    "middle_eastern": "middle eastern",
    "indian": "indian",
    "hispanic": "hispanic",
}

SOURCE_DATASETS: tuple[str, ...] = ("easyportrait", "ffhq", "laion_face", "other")

# Face-parsing regions that must be present in every record; extra regions
# from richer parsers are carried through untouched.
REQUIRED_PARSING_REGIONS: tuple[str, ...] = (
    "hair",
    "face_skin",
    "left_eye",
    "right_eye",
    "inner_mouth",
    "upper_lip",
    "lower_lip",
)


class SchemaError(ValueError):
    """A record failed validation. Carries the dotted path of the bad field."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


Point = tuple[float, float]
Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class FaceDetection:
    """Detector output. ``box``/``landmarks`` are required iff a face was found.

    Landmarks are five points: left pupil, right pupil, nose tip, left mouth
    commissure, right mouth commissure.
    """

    face_count: int
    box: Box | None
    landmarks: tuple[Point, ...] | None
    confidence: float


@dataclass(frozen=True)
class ClipVerdict:
    """CLIP probe verdicts plus the raw per-prompt scores they derive from."""

    is_real_human: bool
    has_text_overlay: bool
    teeth_visible: bool
    tongue_visible: bool
    raw_scores: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class AttributeFlags:
    """One boolean per vocabulary attribute, stored in canonical order."""

    values: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(ATTRIBUTE_IDS):
            raise SchemaError("attributes", f"expected {len(ATTRIBUTE_IDS)} flags, got {len(self.values)}")

    @classmethod
    def none_set(cls) -> AttributeFlags:
        return cls(values=(False,) * len(ATTRIBUTE_IDS))

    @classmethod
    def from_ids(cls, set_ids: Iterator[str] | list[str] | set[str] | tuple[str, ...]) -> AttributeFlags:
        wanted = set(set_ids)
        unknown = wanted - set(ATTRIBUTE_IDS)
        if unknown:
            raise SchemaError("attributes", f"unknown attribute id(s): {sorted(unknown)}")
        return cls(values=tuple(a in wanted for a in ATTRIBUTE_IDS))

    def is_set(self, attr_id: str) -> bool:
        try:
            return self.values[_ATTRIBUTE_POS[attr_id]]
        except KeyError:
            raise SchemaError("attributes", f"unknown attribute id: {attr_id!r}") from None

    def set_ids(self) -> tuple[str, ...]:
        """Ids of all set flags, in canonical order."""
        return tuple(a for a, v in zip(ATTRIBUTE_IDS, self.values) if v)

    def with_cleared(self, attr_id: str) -> AttributeFlags:
        pos = _ATTRIBUTE_POS.get(attr_id)
        if pos is None:
            raise SchemaError("attributes", f"unknown attribute id: {attr_id!r}")
        if not self.values[pos]:
            return self
        vals = list(self.values)
        vals[pos] = False
        return AttributeFlags(values=tuple(vals))

    def to_mapping(self) -> dict[str, bool]:
        return dict(zip(ATTRIBUTE_IDS, self.values))


@dataclass(frozen=True)
class EmotionScores:
    """Independent per-emotion confidences in [0, 1]; not a simplex."""

    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.scores) != len(EMOTIONS):
            raise SchemaError("emotions", f"expected {len(EMOTIONS)} scores, got {len(self.scores)}")

    @classmethod
    def from_mapping(cls, m: Mapping[str, float]) -> EmotionScores:
        missing = set(EMOTIONS) - set(m)
        if missing:
            raise SchemaError("emotions", f"missing emotion(s): {sorted(missing)}")
        unknown = set(m) - set(EMOTIONS)
        if unknown:
            raise SchemaError("emotions", f"unknown emotion(s): {sorted(unknown)}")
        return cls(scores=tuple(float(m[e]) for e in EMOTIONS))

    def score(self, emotion: str) -> float:
        return self.scores[_EMOTION_POS[emotion]]

    def to_mapping(self) -> dict[str, float]:
        return dict(zip(EMOTIONS, self.scores))


@dataclass(frozen=True)
class ParsingStats:
    """Per-region pixel counts from face parsing plus the frame geometry."""

    regions: dict[str, int]
    face_height_px: int
    image_area_px: int

    def count(self, region: str) -> int:
        return self.regions[region]


@dataclass(frozen=True)
class Demographics:
    age_pred: float
    gender: str
    ethnicity: str


@dataclass(frozen=True)
class AttributeRecord:
    """Full per-image output of feature extraction; input to the pipeline."""

    image_id: str
    source_dataset: str
    image_size: tuple[int, int]
    detection: FaceDetection
    clip: ClipVerdict
    attributes: AttributeFlags
    emotions: EmotionScores
    parsing: ParsingStats
    demographics: Demographics
    is_blurry: bool
    is_monochrome: bool
    extractor_versions: dict[str, str] = field(default_factory=dict)

    def with_attributes(self, attributes: AttributeFlags) -> AttributeRecord:
        """Copy of this record with the attribute flags replaced.

        ``is_blurry`` is re-mirrored from the new flags so the record stays
        internally consistent.
        """
        return AttributeRecord(
            image_id=self.image_id,
            source_dataset=self.source_dataset,
            image_size=self.image_size,
            detection=self.detection,
            clip=self.clip,
            attributes=attributes,
            emotions=self.emotions,
            parsing=self.parsing,
            demographics=self.demographics,
            is_blurry=attributes.is_set("blurry"),
            is_monochrome=self.is_monochrome,
            extractor_versions=self.extractor_versions,
        )


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------


def _expect_object(value: Any, path: str) -> dict[str, Any]:
    if not isinstance(value, dict):
        raise SchemaError(path, f"expected object, got {type(value).__name__}")
    return value


def _expect_keys(obj: dict[str, Any], path: str, required: tuple[str, ...], optional: tuple[str, ...] = ()) -> None:
    missing = [k for k in required if k not in obj]
    if missing:
        raise SchemaError(f"{path}.{missing[0]}" if path else missing[0], "missing field")
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        bad = sorted(unknown)[0]
        raise SchemaError(f"{path}.{bad}" if path else bad, "unknown field")


def _expect_bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise SchemaError(path, f"expected boolean, got {type(value).__name__}")
    return value


def _expect_int(value: Any, path: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected integer, got {type(value).__name__}")
    if minimum is not None and value < minimum:
        raise SchemaError(path, f"expected >= {minimum}, got {value}")
    return value


def _expect_number(value: Any, path: str, lo: float | None = None, hi: float | None = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(path, f"expected number, got {type(value).__name__}")
    v = float(value)
    if v != v or v in (float("inf"), float("-inf")):
        raise SchemaError(path, "expected finite number")
    if lo is not None and v < lo:
        raise SchemaError(path, f"expected >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise SchemaError(path, f"expected <= {hi}, got {v}")
    return v


def _expect_str(value: Any, path: str, nonempty: bool = False) -> str:
    if not isinstance(value, str):
        raise SchemaError(path, f"expected string, got {type(value).__name__}")
    if nonempty and not value:
        raise SchemaError(path, "expected non-empty string")
    return value


def _expect_enum(value: Any, path: str, allowed: tuple[str, ...]) -> str:
    v = _expect_str(value, path)
    if v not in allowed:
        raise SchemaError(path, f"unknown value {v!r}; expected one of {list(allowed)}")
    return v


def _parse_point(value: Any, path: str) -> Point:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise SchemaError(path, "expected [x, y]")
    return (_expect_number(value[0], f"{path}[0]"), _expect_number(value[1], f"{path}[1]"))


def _parse_detection(obj: Any, path: str, image_size: tuple[int, int]) -> FaceDetection:
    d = _expect_object(obj, path)
    _expect_keys(d, path, ("face_count", "box", "landmarks", "confidence"))
    face_count = _expect_int(d["face_count"], f"{path}.face_count", minimum=0)
    confidence = _expect_number(d["confidence"], f"{path}.confidence", lo=0.0, hi=1.0)
    w, h = image_size

    box: Box | None = None
    if d["box"] is not None:
        raw = d["box"]
        if not isinstance(raw, (list, tuple)) or len(raw) != 4:
            raise SchemaError(f"{path}.box", "expected [x0, y0, x1, y1]")
        box = tuple(_expect_number(raw[i], f"{path}.box[{i}]") for i in range(4))  # type: ignore[assignment]
        x0, y0, x1, y1 = box
        if not (x0 < x1 and y0 < y1):
            raise SchemaError(f"{path}.box", f"degenerate box {box}: requires x0 < x1 and y0 < y1")

    landmarks: tuple[Point, ...] | None = None
    if d["landmarks"] is not None:
        raw = d["landmarks"]
        if not isinstance(raw, (list, tuple)) or len(raw) != 5:
            raise SchemaError(f"{path}.landmarks", "expected 5 [x, y] points")
        landmarks = tuple(_parse_point(p, f"{path}.landmarks[{i}]") for i, p in enumerate(raw))
        for i, (x, y) in enumerate(landmarks):
            if not (0 <= x <= w and 0 <= y <= h):
                raise SchemaError(f"{path}.landmarks[{i}]", f"point ({x}, {y}) outside image bounds {w}x{h}")

    if face_count >= 1:
        if box is None:
            raise SchemaError(f"{path}.box", "required when face_count >= 1")
        if landmarks is None:
            raise SchemaError(f"{path}.landmarks", "required when face_count >= 1")
    return FaceDetection(face_count=face_count, box=box, landmarks=landmarks, confidence=confidence)


def _parse_clip(obj: Any, path: str) -> ClipVerdict:
    c = _expect_object(obj, path)
    _expect_keys(c, path, ("is_real_human", "has_text_overlay", "teeth_visible", "tongue_visible", "raw_scores"))
    raw = _expect_object(c["raw_scores"], f"{path}.raw_scores")
    scores = {
        _expect_str(k, f"{path}.raw_scores"): _expect_number(v, f"{path}.raw_scores.{k}", lo=0.0, hi=1.0)
        for k, v in raw.items()
    }
    return ClipVerdict(
        is_real_human=_expect_bool(c["is_real_human"], f"{path}.is_real_human"),
        has_text_overlay=_expect_bool(c["has_text_overlay"], f"{path}.has_text_overlay"),
        teeth_visible=_expect_bool(c["teeth_visible"], f"{path}.teeth_visible"),
        tongue_visible=_expect_bool(c["tongue_visible"], f"{path}.tongue_visible"),
        raw_scores=dict(sorted(scores.items())),
    )


def _parse_attributes(obj: Any, path: str) -> AttributeFlags:
    a = _expect_object(obj, path)
    missing = [k for k in ATTRIBUTE_IDS if k not in a]
    if missing:
        raise SchemaError(f"{path}.{missing[0]}", "missing attribute flag")
    unknown = set(a) - set(ATTRIBUTE_IDS)
    if unknown:
        raise SchemaError(f"{path}.{sorted(unknown)[0]}", "unknown attribute name")
    return AttributeFlags(values=tuple(_expect_bool(a[k], f"{path}.{k}") for k in ATTRIBUTE_IDS))


def _parse_emotions(obj: Any, path: str) -> EmotionScores:
    e = _expect_object(obj, path)
    missing = [k for k in EMOTIONS if k not in e]
    if missing:
        raise SchemaError(f"{path}.{missing[0]}", "missing emotion score")
    unknown = set(e) - set(EMOTIONS)
    if unknown:
        raise SchemaError(f"{path}.{sorted(unknown)[0]}", "unknown emotion name")
    return EmotionScores(scores=tuple(_expect_number(e[k], f"{path}.{k}", lo=0.0, hi=1.0) for k in EMOTIONS))


def _parse_parsing(obj: Any, path: str) -> ParsingStats:
    p = _expect_object(obj, path)
    _expect_keys(p, path, ("regions", "face_height_px", "image_area_px"))
    regions_obj = _expect_object(p["regions"], f"{path}.regions")
    image_area = _expect_int(p["image_area_px"], f"{path}.image_area_px", minimum=1)
    missing = [k for k in REQUIRED_PARSING_REGIONS if k not in regions_obj]
    if missing:
        raise SchemaError(f"{path}.regions.{missing[0]}", "missing parsing region")
    regions: dict[str, int] = {}
    for k in sorted(regions_obj):
        count = _expect_int(regions_obj[k], f"{path}.regions.{k}", minimum=0)
        if count > image_area:
            raise SchemaError(f"{path}.regions.{k}", f"count {count} exceeds image_area_px {image_area}")
        regions[k] = count
    return ParsingStats(
        regions=regions,
        face_height_px=_expect_int(p["face_height_px"], f"{path}.face_height_px", minimum=1),
        image_area_px=image_area,
    )


def _parse_demographics(obj: Any, path: str) -> Demographics:
    d = _expect_object(obj, path)
    _expect_keys(d, path, ("age_pred", "gender", "ethnicity"))
    return Demographics(
        age_pred=_expect_number(d["age_pred"], f"{path}.age_pred", lo=0.0),
        gender=_expect_enum(d["gender"], f"{path}.gender", GENDERS),
        ethnicity=_expect_enum(d["ethnicity"], f"{path}.ethnicity", tuple(ETHNICITIES)),
    )


_RECORD_FIELDS = (
    "image_id",
    "source_dataset",
    "image_size",
    "detection",
    "clip",
    "attributes",
    "emotions",
    "parsing",
    "demographics",
    "is_blurry",
    "is_monochrome",
    "extractor_versions",
)


def record_from_dict(obj: Any, path: str = "") -> AttributeRecord:
    """Validate a decoded JSON object and build an :class:`AttributeRecord`.

    Raises :class:`SchemaError` naming the offending field path on the first
    violation found.
    """
    r = _expect_object(obj, path or "record")
    _expect_keys(r, path, _RECORD_FIELDS)
    pfx = f"{path}." if path else ""

    raw_size = r["image_size"]
    if not isinstance(raw_size, (list, tuple)) or len(raw_size) != 2:
        raise SchemaError(f"{pfx}image_size", "expected [width, height]")
    image_size = (
        _expect_int(raw_size[0], f"{pfx}image_size[0]", minimum=1),
        _expect_int(raw_size[1], f"{pfx}image_size[1]", minimum=1),
    )

    attributes = _parse_attributes(r["attributes"], f"{pfx}attributes")
    is_blurry = _expect_bool(r["is_blurry"], f"{pfx}is_blurry")
    if is_blurry != attributes.is_set("blurry"):
        raise SchemaError(f"{pfx}is_blurry", "must mirror the 'blurry' attribute flag")

    versions_obj = _expect_object(r["extractor_versions"], f"{pfx}extractor_versions")
    versions = {
        _expect_str(k, f"{pfx}extractor_versions"): _expect_str(v, f"{pfx}extractor_versions.{k}")
        for k, v in versions_obj.items()
    }

    return AttributeRecord(
        image_id=_expect_str(r["image_id"], f"{pfx}image_id", nonempty=True),
        source_dataset=_expect_enum(r["source_dataset"], f"{pfx}source_dataset", SOURCE_DATASETS),
        image_size=image_size,
        detection=_parse_detection(r["detection"], f"{pfx}detection", image_size),
        clip=_parse_clip(r["clip"], f"{pfx}clip"),
        attributes=attributes,
        emotions=_parse_emotions(r["emotions"], f"{pfx}emotions"),
        parsing=_parse_parsing(r["parsing"], f"{pfx}parsing"),
        demographics=_parse_demographics(r["demographics"], f"{pfx}demographics"),
        is_blurry=is_blurry,
        is_monochrome=_expect_bool(r["is_monochrome"], f"{pfx}is_monochrome"),
        extractor_versions=dict(sorted(versions.items())),
    )


def record_to_dict(r: AttributeRecord) -> dict[str, Any]:
    """Plain-JSON form of a record, with all key orders canonicalized."""
    return {
        "image_id": r.image_id,
        "source_dataset": r.source_dataset,
        "image_size": list(r.image_size),
        "detection": {
            "face_count": r.detection.face_count,
            "box": list(r.detection.box) if r.detection.box is not None else None,
            "landmarks": [list(p) for p in r.detection.landmarks] if r.detection.landmarks is not None else None,
            "confidence": r.detection.confidence,
        },
        "clip": {
            "is_real_human": r.clip.is_real_human,
            "has_text_overlay": r.clip.has_text_overlay,
            "teeth_visible": r.clip.teeth_visible,
            "tongue_visible": r.clip.tongue_visible,
            "raw_scores": dict(sorted(r.clip.raw_scores.items())),
        },
        "attributes": r.attributes.to_mapping(),
        "emotions": r.emotions.to_mapping(),
        "parsing": {
            "regions": dict(sorted(r.parsing.regions.items())),
            "face_height_px": r.parsing.face_height_px,
            "image_area_px": r.parsing.image_area_px,
        },
        "demographics": {
            "age_pred": r.demographics.age_pred,
            "gender": r.demographics.gender,
            "ethnicity": r.demographics.ethnicity,
        },
        "is_blurry": r.is_blurry,
        "is_monochrome": r.is_monochrome,
        "extractor_versions": dict(sorted(r.extractor_versions.items())),
    }


def parse_record(text: str | bytes) -> AttributeRecord:
    """Parse one serialized record (a single JSON object)."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError("record", f"invalid JSON: {e}") from e
    return record_from_dict(obj)


def serialize_record(r: AttributeRecord) -> bytes:
    """Serialize a record to deterministic UTF-8 JSON bytes (no newline)."""
    return json.dumps(record_to_dict(r), ensure_ascii=False, separators=(",", ":")).encode("utf-8")
