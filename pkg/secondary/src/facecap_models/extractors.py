"""Image -> attribute-record extraction with pluggable per-stage backends.

The only backend shipped here is ``pixelstat``: a fully offline, deterministic
stand-in built from pixel statistics (skin-blob detection, brightness/redness
probes, variance-of-Laplacian blur, hash-derived placeholder demographics).
It exists so the captioning pipeline can be exercised end to end without any
pretrained checkpoints; its outputs are schema-valid but are NOT real face
analysis. Checkpoint-backed backends register under new names and plug in
through the same stage interface.

Monochrome detection is pixel-statistical by definition (not model-based):
an image is monochrome when at least ``min_fraction`` of its pixels have a
per-pixel channel spread below ``max_spread_8bit`` grey levels.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".webp")

EMOTIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise", "neutral")
GENDERS = ("male", "female")
ETHNICITIES = ("black", "white", "asian", "middle_eastern", "indian", "hispanic")
ATTRIBUTE_IDS = (
    "five_o_clock_shadow", "arched_eyebrows", "attractive", "bags_under_eyes",
    "bald", "bangs", "big_lips", "big_nose", "black_hair", "blond_hair",
    "blurry", "brown_hair", "bushy_eyebrows", "chubby", "double_chin",
    "eyeglasses", "goatee", "gray_hair", "heavy_makeup", "high_cheekbones",
    "male", "mouth_slightly_open", "mustache", "narrow_eyes", "no_beard",
    "oval_face", "pale_skin", "pointy_nose", "receding_hairline",
    "rosy_cheeks", "sideburns", "smiling", "straight_hair", "wavy_hair",
    "wearing_earrings", "wearing_hat", "wearing_lipstick", "wearing_necklace",
    "wearing_necktie", "young",
)

# Landmark layout as fractions of the face box: pupils, nose tip, mouth corners.
LANDMARK_FRACTIONS = ((0.31, 0.46), (0.69, 0.46), (0.50, 0.64), (0.35, 0.82), (0.65, 0.82))

# Probe prompts a real CLIP backend would score; the ids double as
# raw_scores keys. The texts are reconstructions and clearly configurable.
DEFAULT_PROBE_PROMPTS: dict[str, str] = {
    "real_human": "a photograph of a real human face",
    "text_overlay": "a poster or cover with large text overlaid on a face",
    "teeth_visible": "a face with visible teeth",
    "tongue_visible": "a face with the tongue sticking out",
}


class ExtractorError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorThresholds:
    min_confidence: float = 0.9  # blob density; checkpoint detectors use their own score
    min_area_fraction: float = 0.002
    min_area_px: int = 256
    aspect_ratio_range: tuple[float, float] = (0.4, 2.5)


@dataclass(frozen=True)
class ClipThresholds:
    real_human: float = 0.5
    text_overlay: float = 0.5
    teeth_visible: float = 0.5
    tongue_visible: float = 0.5


@dataclass(frozen=True)
class ExtractorConfig:
    backend: str = "pixelstat"
    detector: DetectorThresholds = DetectorThresholds()
    clip: ClipThresholds = ClipThresholds()
    probe_prompts: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PROBE_PROMPTS))
    blur_variance_threshold: float = 50.0
    monochrome_max_spread_8bit: int = 2   # spread < 2/255
    monochrome_min_fraction: float = 0.99
    source_dataset: str = "other"
    validate_records: bool = True

    @classmethod
    def from_yaml(cls, path: str | Path) -> ExtractorConfig:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        detector = DetectorThresholds(**{
            **asdict(DetectorThresholds()), **doc.pop("detector", {})
        })
        clip = ClipThresholds(**{**asdict(ClipThresholds()), **doc.pop("clip", {})})
        if "aspect_ratio_range" in asdict(detector):
            detector = DetectorThresholds(
                **{**asdict(detector), "aspect_ratio_range": tuple(detector.aspect_ratio_range)}
            )
        return cls(detector=detector, clip=clip, **doc)


def is_monochrome(rgb: np.ndarray, max_spread_8bit: int = 2, min_fraction: float = 0.99) -> bool:
    """True when >= min_fraction of pixels have channel spread < max_spread_8bit."""
    spread = rgb.max(axis=2).astype(np.int16) - rgb.min(axis=2).astype(np.int16)
    return float((spread < max_spread_8bit).mean()) >= min_fraction


def blur_variance(rgb: np.ndarray) -> float:
    """Variance of the Laplacian on the grey image; low values mean blurry."""
    grey = rgb.astype(np.float64) @ (0.299, 0.587, 0.114)
    return float(ndimage.laplace(grey).var())


def _skin_mask(rgb: np.ndarray) -> np.ndarray:
    hsv = np.asarray(Image.fromarray(rgb).convert("HSV"))
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    mask = ((h <= 36) | (h >= 245)) & (s >= 40) & (s <= 230) & (v >= 70)
    structure = np.ones((5, 5), dtype=bool)
    mask = ndimage.binary_closing(mask, structure=structure)
    return ndimage.binary_opening(mask, structure=structure)


@dataclass(frozen=True)
class Detection:
    face_count: int
    box: tuple[float, float, float, float] | None
    landmarks: tuple[tuple[float, float], ...] | None
    confidence: float


class PixelStatBackend:
    """Deterministic offline stage implementations. Stand-ins, not models."""

    versions = {
        "detector": "pixelstat-skinblob-0.1",
        "clip": "pixelstat-probe-0.1",
        "attributes": "pixelstat-heuristic-0.1",
        "emotion": "pixelstat-neutral-0.1",
        "parsing": "pixelstat-boxgeom-0.1",
        "demographics": "pixelstat-hashstub-0.1",
    }

    def __init__(self, config: ExtractorConfig):
        self.config = config

    # -- detection -------------------------------------------------------

    def detect(self, rgb: np.ndarray) -> Detection:
        """Connected skin-tone components filtered by area, shape, density."""
        h, w = rgb.shape[:2]
        mask = _skin_mask(rgb)
        labels, n = ndimage.label(mask)
        if n == 0:
            return Detection(0, None, None, 0.0)

        t = self.config.detector
        min_area = max(t.min_area_px, int(t.min_area_fraction * w * h))
        sizes = np.bincount(labels.ravel())
        candidates = []
        for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None or sizes[idx] < min_area:
                continue
            y0, y1 = sl[0].start, sl[0].stop
            x0, x1 = sl[1].start, sl[1].stop
            bw, bh = x1 - x0, y1 - y0
            if bw < 2 or bh < 2:
                continue
            aspect = bw / bh
            if not t.aspect_ratio_range[0] <= aspect <= t.aspect_ratio_range[1]:
                continue
            density = sizes[idx] / (bw * bh)
            if density < t.min_confidence:
                continue
            candidates.append((sizes[idx], (x0, y0, x1, y1), density))

        if not candidates:
            return Detection(0, None, None, 0.0)
        candidates.sort(key=lambda c: (-c[0], c[1]))
        _, (x0, y0, x1, y1), density = candidates[0]
        landmarks = tuple(
            (
                min(float(w), max(0.0, x0 + fx * (x1 - x0))),
                min(float(h), max(0.0, y0 + fy * (y1 - y0))),
            )
            for fx, fy in LANDMARK_FRACTIONS
        )
        return Detection(
            face_count=len(candidates),
            box=(float(x0), float(y0), float(x1), float(y1)),
            landmarks=landmarks,
            confidence=round(min(1.0, float(density)), 4),
        )

    # -- CLIP-style probes -------------------------------------------------

    def clip_scores(self, rgb: np.ndarray, detection: Detection) -> dict[str, float]:
        h, w = rgb.shape[:2]
        mask = _skin_mask(rgb)
        scores: dict[str, float] = {}

        if detection.box is not None:
            x0, y0, x1, y1 = (int(v) for v in detection.box)
            face = rgb[y0:y1, x0:x1]
            face_mask = mask[y0:y1, x0:x1]
            scores["real_human"] = round(float(face_mask.mean()), 4) if face_mask.size else 0.0
        else:
            face = rgb
            scores["real_human"] = 0.0

        grey = rgb.astype(np.float64) @ (0.299, 0.587, 0.114)
        stroke_fraction = float((np.abs(ndimage.laplace(grey)) > 40).mean())
        scores["text_overlay"] = round(min(1.0, 4.0 * stroke_fraction), 4)

        mh, mw = face.shape[:2]
        mouth = face[int(mh * 0.72): mh, int(mw * 0.25): int(mw * 0.75)]
        if mouth.size:
            hsv = np.asarray(Image.fromarray(mouth).convert("HSV"))
            bright = (hsv[..., 2] >= 200) & (hsv[..., 1] <= 60)
            scores["teeth_visible"] = round(min(1.0, 10.0 * float(bright.mean())), 4)
            red = mouth[..., 0].astype(np.int16) - np.maximum(mouth[..., 1], mouth[..., 2]).astype(np.int16)
            scores["tongue_visible"] = round(min(1.0, 10.0 * float((red >= 30).mean())), 4)
        else:
            scores["teeth_visible"] = 0.0
            scores["tongue_visible"] = 0.0
        return scores

    # -- per-model heads -----------------------------------------------------

    def attributes(self, rgb: np.ndarray, detection: Detection) -> dict[str, bool]:
        flags = {a: False for a in ATTRIBUTE_IDS}
        flags["blurry"] = blur_variance(rgb) < self.config.blur_variance_threshold
        return flags

    def emotions(self, rgb: np.ndarray, detection: Detection) -> dict[str, float]:
        return {e: (1.0 if e == "neutral" else 0.0) for e in EMOTIONS}

    def parsing(self, rgb: np.ndarray, detection: Detection) -> dict[str, Any]:
        h, w = rgb.shape[:2]
        area = w * h
        if detection.box is None:
            face_skin, box_h = 1, max(1, h // 2)
        else:
            x0, y0, x1, y1 = (int(v) for v in detection.box)
            face_skin = max(1, int(_skin_mask(rgb)[y0:y1, x0:x1].sum()))
            box_h = max(1, y1 - y0)
        # Neutral-geometry stand-ins: enough signal for schema validity and
        # stable derived states (open eyes, closed mouth).
        regions = {
            "hair": min(area, int(face_skin * 0.30)),
            "face_skin": min(area, face_skin),
            "left_eye": min(area, max(1, int(face_skin * 0.006))),
            "right_eye": min(area, max(1, int(face_skin * 0.006))),
            "inner_mouth": 0,
            "upper_lip": min(area, int(face_skin * 0.02)),
            "lower_lip": min(area, int(face_skin * 0.02)),
        }
        return {"regions": regions, "face_height_px": box_h, "image_area_px": area}

    def demographics(self, rgb: np.ndarray, image_bytes: bytes) -> dict[str, Any]:
        # Placeholder values derived from a content hash: deterministic and
        # varied across images, but NOT a prediction of anything.
        digest = hashlib.blake2b(image_bytes, digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "big"))
        return {
            "age_pred": round(float(rng.uniform(18, 70)), 2),
            "gender": str(rng.choice(GENDERS)),
            "ethnicity": str(rng.choice(ETHNICITIES)),
        }


BACKENDS: dict[str, type] = {"pixelstat": PixelStatBackend}


def make_backend(config: ExtractorConfig):
    try:
        return BACKENDS[config.backend](config)
    except KeyError:
        raise ExtractorError(
            f"unknown extractor backend {config.backend!r}; available: {sorted(BACKENDS)}. "
            "Checkpoint-backed backends must be registered in BACKENDS."
        ) from None


def locate_record_schema() -> Path | None:
    """Path of the captioning pipeline's published record JSON-Schema, if the
    facecap package is installed next to this one."""
    from importlib.util import find_spec

    spec = find_spec("facecap")
    if spec is None or spec.origin is None:
        return None
    path = Path(spec.origin).parent / "data" / "attribute_record.schema.json"
    return path if path.exists() else None


def build_record(image_path: Path, rgb: np.ndarray, image_bytes: bytes, backend, config: ExtractorConfig, image_id: str) -> dict:
    h, w = rgb.shape[:2]
    detection = backend.detect(rgb)
    raw_scores = backend.clip_scores(rgb, detection)
    t = config.clip
    flags = backend.attributes(rgb, detection)
    return {
        "image_id": image_id,
        "source_dataset": config.source_dataset,
        "image_size": [w, h],
        "detection": {
            "face_count": detection.face_count,
            "box": list(detection.box) if detection.box else None,
            "landmarks": [list(p) for p in detection.landmarks] if detection.landmarks else None,
            "confidence": detection.confidence,
        },
        "clip": {
            "is_real_human": raw_scores["real_human"] >= t.real_human,
            "has_text_overlay": raw_scores["text_overlay"] >= t.text_overlay,
            "teeth_visible": raw_scores["teeth_visible"] >= t.teeth_visible,
            "tongue_visible": raw_scores["tongue_visible"] >= t.tongue_visible,
            "raw_scores": dict(sorted(raw_scores.items())),
        },
        "attributes": flags,
        "emotions": backend.emotions(rgb, detection),
        "parsing": backend.parsing(rgb, detection),
        "demographics": backend.demographics(rgb, image_bytes),
        "is_blurry": flags["blurry"],
        "is_monochrome": is_monochrome(
            rgb, config.monochrome_max_spread_8bit, config.monochrome_min_fraction
        ),
        "extractor_versions": dict(sorted(backend.versions.items())),
    }


@dataclass
class ExtractResult:
    records_path: Path
    n_images: int
    n_records: int
    failures: list[tuple[str, str]]


def extract(
    image_dir: str | Path,
    out_dir: str | Path,
    batch_size: int = 16,
    config: ExtractorConfig = ExtractorConfig(),
) -> ExtractResult:
    """Run every stage over the images in ``image_dir``; write records JSONL.

    Emits one record per readable image (face or not); per-image failures are
    logged and recorded in failures.jsonl but never abort the batch. Records
    are validated against the captioning pipeline's published JSON-Schema
    when that package is installed and ``config.validate_records`` is on.
    """
    image_dir = Path(image_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backend = make_backend(config)

    validator = None
    if config.validate_records:
        schema_path = locate_record_schema()
        if schema_path is not None:
            import jsonschema

            validator = jsonschema.Draft202012Validator(
                json.loads(schema_path.read_text(encoding="utf-8"))
            )
        else:
            log.warning("record schema not found; writing unvalidated records")

    paths = sorted(p for p in image_dir.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    records_path = out_dir / "records.jsonl"
    failures: list[tuple[str, str]] = []
    n_records = 0

    with open(records_path, "w", encoding="utf-8") as f:
        for i, path in enumerate(paths):
            try:
                image_bytes = path.read_bytes()
                rgb = np.asarray(Image.open(path).convert("RGB"))
                record = build_record(
                    path, rgb, image_bytes, backend, config,
                    image_id=path.relative_to(image_dir).as_posix(),
                )
                if validator is not None:
                    validator.validate(record)
                f.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
                n_records += 1
            except Exception as e:  # noqa: BLE001 - per-image isolation is the contract
                log.warning("failed to extract %s: %s", path, e)
                failures.append((str(path), str(e)))
            if (i + 1) % batch_size == 0:
                f.flush()

    if failures:
        with open(out_dir / "failures.jsonl", "w", encoding="utf-8") as f:
            for path_str, error in failures:
                f.write(json.dumps({"path": path_str, "error": error}) + "\n")

    return ExtractResult(
        records_path=records_path, n_images=len(paths), n_records=n_records, failures=failures
    )
