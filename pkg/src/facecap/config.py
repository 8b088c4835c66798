"""Pipeline configuration: YAML tree, validated strictly on load.

Unknown keys are rejected with their dotted path so typos cannot silently
fall back to defaults. Secrets never live in the file; the LLM auth token is
read from the FACECAP_LLM_TOKEN environment variable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .debias import DEFAULT_DEBIAS_RULES, DebiasRule
from .derive import (
    DEFAULT_AGE_CATEGORIES,
    DEFAULT_DOMINANCE_MARGIN,
    DEFAULT_PARSING_THRESHOLDS,
    ParsingThresholds,
)
from .filtering import BUILTIN_PROFILES, DEFAULT_ALIGN_TEMPLATE, DEFAULT_CROP_MARGIN, DatasetProfile
from .schema import ATTRIBUTE_IDS

LLM_TOKEN_ENV_VAR = "FACECAP_LLM_TOKEN"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class FusionConfig:
    endpoint: str = ""
    model_id: str = "vicuna-13b-v1.5"
    captions_per_image: int = 3
    temperature: float = 0.7
    max_tokens: int = 160
    mock: bool = False
    max_in_flight: int = 8
    retry_attempts: int = 3
    retry_backoff_s: float = 1.0
    timeout_s: float = 60.0


@dataclass(frozen=True)
class PipelineConfig:
    global_seed: int = 0
    profile_name: str = "other"
    profile: DatasetProfile = BUILTIN_PROFILES["other"]
    records_path: str = ""
    images_root: str = "."
    crop_margin: float = DEFAULT_CROP_MARGIN
    align_to_template: bool = False
    align_template: tuple[tuple[float, float], ...] = DEFAULT_ALIGN_TEMPLATE
    dominance_margin: float = DEFAULT_DOMINANCE_MARGIN
    parsing_thresholds: ParsingThresholds = DEFAULT_PARSING_THRESHOLDS
    age_categories: tuple[tuple[str, float], ...] = DEFAULT_AGE_CATEGORIES
    debias_rules: tuple[DebiasRule, ...] = DEFAULT_DEBIAS_RULES
    fusion: FusionConfig = FusionConfig()
    shard_size: int = 10_000
    concurrency: int = 4
    canonical: dict = field(default_factory=dict, compare=False)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.canonical, sort_keys=True, separators=(",", ":")).encode("utf-8")
        ).hexdigest()


def _expect_section(obj: Any, path: str) -> dict:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(path, f"expected a mapping, got {type(obj).__name__}")
    return obj


def _reject_unknown(section: dict, path: str, allowed: tuple[str, ...]) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        bad = sorted(unknown)[0]
        raise ConfigError(f"{path}.{bad}" if path else str(bad), "unknown key")


def _get_int(section: dict, key: str, path: str, default: int, minimum: int | None = None) -> int:
    v = section.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}.{key}", f"expected integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{path}.{key}", f"expected >= {minimum}, got {v}")
    return v


def _get_float(
    section: dict, key: str, path: str, default: float,
    lo: float | None = None, hi: float | None = None,
) -> float:
    v = section.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected number, got {v!r}")
    v = float(v)
    if lo is not None and v < lo:
        raise ConfigError(f"{path}.{key}", f"expected >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}.{key}", f"expected <= {hi}, got {v}")
    return v


def _get_bool(section: dict, key: str, path: str, default: bool) -> bool:
    v = section.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"{path}.{key}", f"expected boolean, got {v!r}")
    return v


def _get_str(section: dict, key: str, path: str, default: str) -> str:
    v = section.get(key, default)
    if not isinstance(v, str):
        raise ConfigError(f"{path}.{key}", f"expected string, got {v!r}")
    return v


def _parse_profile(obj: Any, path: str, name: str) -> DatasetProfile:
    section = _expect_section(obj, path)
    _reject_unknown(
        section, path,
        ("min_face_side_px", "require_single_face", "require_real_human", "reject_text_overlay"),
    )
    min_side = section.get("min_face_side_px")
    if min_side is not None and (isinstance(min_side, bool) or not isinstance(min_side, int) or min_side < 1):
        raise ConfigError(f"{path}.min_face_side_px", f"expected positive integer or null, got {min_side!r}")
    return DatasetProfile(
        name=name,
        min_face_side_px=min_side,
        require_single_face=_get_bool(section, "require_single_face", path, True),
        require_real_human=_get_bool(section, "require_real_human", path, True),
        reject_text_overlay=_get_bool(section, "reject_text_overlay", path, True),
    )


def _parse_debias_rules(obj: Any, path: str) -> tuple[DebiasRule, ...]:
    if obj is None:
        return DEFAULT_DEBIAS_RULES
    if not isinstance(obj, list):
        raise ConfigError(path, f"expected a list of rules, got {type(obj).__name__}")
    rules = []
    for i, raw in enumerate(obj):
        rpath = f"{path}[{i}]"
        section = _expect_section(raw, rpath)
        _reject_unknown(section, rpath, ("target", "conditions", "probability"))
        target = _get_str(section, "target", rpath, "")
        conditions = section.get("conditions", [])
        if not isinstance(conditions, list) or not all(isinstance(c, str) for c in conditions):
            raise ConfigError(f"{rpath}.conditions", "expected a list of attribute ids")
        prob = _get_float(section, "probability", rpath, 0.0, lo=0.0, hi=1.0)
        for attr in [target, *conditions]:
            if attr not in ATTRIBUTE_IDS:
                raise ConfigError(rpath, f"unknown attribute id {attr!r}")
        try:
            rules.append(
                DebiasRule(target_label=target, condition_labels=frozenset(conditions), drop_probability=prob)
            )
        except ValueError as e:
            raise ConfigError(rpath, str(e)) from e
    return tuple(rules)


def _parse_age_categories(obj: Any, path: str) -> tuple[tuple[str, float], ...]:
    if obj is None:
        return DEFAULT_AGE_CATEGORIES
    if not isinstance(obj, list) or not obj:
        raise ConfigError(path, "expected a non-empty list of [label, lower_bound] pairs")
    out: list[tuple[str, float]] = []
    for i, pair in enumerate(obj):
        if not isinstance(pair, list) or len(pair) != 2 or not isinstance(pair[0], str):
            raise ConfigError(f"{path}[{i}]", "expected [label, lower_bound]")
        out.append((pair[0], float(pair[1])))
    if out[0][1] != 0:
        raise ConfigError(f"{path}[0]", "first lower bound must be 0")
    for i in range(1, len(out)):
        if out[i][1] <= out[i - 1][1]:
            raise ConfigError(f"{path}[{i}]", "lower bounds must be strictly increasing")
    return tuple(out)


def _parse_align_template(obj: Any, path: str) -> tuple[tuple[float, float], ...]:
    if obj is None:
        return DEFAULT_ALIGN_TEMPLATE
    if not isinstance(obj, list) or len(obj) != 5:
        raise ConfigError(path, "expected 5 [x, y] points")
    points = []
    for i, p in enumerate(obj):
        if not isinstance(p, list) or len(p) != 2:
            raise ConfigError(f"{path}[{i}]", "expected [x, y]")
        points.append((float(p[0]), float(p[1])))
    return tuple(points)


_TOP_KEYS = (
    "global_seed", "profile", "profiles", "paths", "filter", "derive",
    "debias", "fusion", "dataset", "concurrency",
)


def config_from_dict(doc: Any, source: str = "config") -> PipelineConfig:
    doc = _expect_section(doc, source)
    _reject_unknown(doc, "", _TOP_KEYS)

    paths = _expect_section(doc.get("paths"), "paths")
    _reject_unknown(paths, "paths", ("records", "images_root"))

    filt = _expect_section(doc.get("filter"), "filter")
    _reject_unknown(filt, "filter", ("crop_margin", "align_to_template", "align_template"))

    derive = _expect_section(doc.get("derive"), "derive")
    _reject_unknown(
        derive, "derive",
        ("dominance_margin", "hair_thresholds", "eye_thresholds", "mouth_thresholds", "age_categories"),
    )
    hair = _expect_section(derive.get("hair_thresholds"), "derive.hair_thresholds")
    _reject_unknown(hair, "derive.hair_thresholds", ("bald", "short", "medium"))
    eye = _expect_section(derive.get("eye_thresholds"), "derive.eye_thresholds")
    _reject_unknown(eye, "derive.eye_thresholds", ("closed", "narrow"))
    mouth = _expect_section(derive.get("mouth_thresholds"), "derive.mouth_thresholds")
    _reject_unknown(mouth, "derive.mouth_thresholds", ("closed", "slightly_open"))
    d = DEFAULT_PARSING_THRESHOLDS
    thresholds = ParsingThresholds(
        hair_bald=_get_float(hair, "bald", "derive.hair_thresholds", d.hair_bald, lo=0.0),
        hair_short=_get_float(hair, "short", "derive.hair_thresholds", d.hair_short, lo=0.0),
        hair_medium=_get_float(hair, "medium", "derive.hair_thresholds", d.hair_medium, lo=0.0),
        eye_closed=_get_float(eye, "closed", "derive.eye_thresholds", d.eye_closed, lo=0.0),
        eye_narrow=_get_float(eye, "narrow", "derive.eye_thresholds", d.eye_narrow, lo=0.0),
        mouth_closed=_get_float(mouth, "closed", "derive.mouth_thresholds", d.mouth_closed, lo=0.0),
        mouth_slightly_open=_get_float(
            mouth, "slightly_open", "derive.mouth_thresholds", d.mouth_slightly_open, lo=0.0
        ),
    )
    if not (thresholds.hair_bald < thresholds.hair_short < thresholds.hair_medium):
        raise ConfigError("derive.hair_thresholds", "cut points must be strictly increasing")
    if not thresholds.eye_closed < thresholds.eye_narrow:
        raise ConfigError("derive.eye_thresholds", "cut points must be strictly increasing")
    if not thresholds.mouth_closed < thresholds.mouth_slightly_open:
        raise ConfigError("derive.mouth_thresholds", "cut points must be strictly increasing")

    debias = _expect_section(doc.get("debias"), "debias")
    _reject_unknown(debias, "debias", ("rules",))

    fusion_section = _expect_section(doc.get("fusion"), "fusion")
    _reject_unknown(
        fusion_section, "fusion",
        ("endpoint", "model_id", "captions_per_image", "temperature", "max_tokens",
         "mock", "max_in_flight", "retry_attempts", "retry_backoff_s", "timeout_s"),
    )
    fd = FusionConfig()
    fusion = FusionConfig(
        endpoint=_get_str(fusion_section, "endpoint", "fusion", fd.endpoint),
        model_id=_get_str(fusion_section, "model_id", "fusion", fd.model_id),
        captions_per_image=_get_int(fusion_section, "captions_per_image", "fusion", fd.captions_per_image, minimum=1),
        temperature=_get_float(fusion_section, "temperature", "fusion", fd.temperature, lo=0.0),
        max_tokens=_get_int(fusion_section, "max_tokens", "fusion", fd.max_tokens, minimum=1),
        mock=_get_bool(fusion_section, "mock", "fusion", fd.mock),
        max_in_flight=_get_int(fusion_section, "max_in_flight", "fusion", fd.max_in_flight, minimum=1),
        retry_attempts=_get_int(fusion_section, "retry_attempts", "fusion", fd.retry_attempts, minimum=1),
        retry_backoff_s=_get_float(fusion_section, "retry_backoff_s", "fusion", fd.retry_backoff_s, lo=0.0),
        timeout_s=_get_float(fusion_section, "timeout_s", "fusion", fd.timeout_s, lo=0.0),
    )

    dataset_section = _expect_section(doc.get("dataset"), "dataset")
    _reject_unknown(dataset_section, "dataset", ("shard_size",))

    profiles = dict(BUILTIN_PROFILES)
    custom = _expect_section(doc.get("profiles"), "profiles")
    for name, raw in custom.items():
        profiles[str(name)] = _parse_profile(raw, f"profiles.{name}", str(name))

    profile_name = _get_str(doc, "profile", "", "other")
    if profile_name not in profiles:
        raise ConfigError("profile", f"unknown profile {profile_name!r}; have {sorted(profiles)}")

    cfg = PipelineConfig(
        global_seed=_get_int(doc, "global_seed", "", 0),
        profile_name=profile_name,
        profile=profiles[profile_name],
        records_path=_get_str(paths, "records", "paths", ""),
        images_root=_get_str(paths, "images_root", "paths", "."),
        crop_margin=_get_float(filt, "crop_margin", "filter", DEFAULT_CROP_MARGIN, lo=1.0),
        align_to_template=_get_bool(filt, "align_to_template", "filter", False),
        align_template=_parse_align_template(filt.get("align_template"), "filter.align_template"),
        dominance_margin=_get_float(derive, "dominance_margin", "derive", DEFAULT_DOMINANCE_MARGIN, lo=0.0, hi=1.0),
        parsing_thresholds=thresholds,
        age_categories=_parse_age_categories(derive.get("age_categories"), "derive.age_categories"),
        debias_rules=_parse_debias_rules(debias.get("rules"), "debias.rules"),
        fusion=fusion,
        shard_size=_get_int(dataset_section, "shard_size", "dataset", 10_000, minimum=1),
        concurrency=_get_int(doc, "concurrency", "", 4, minimum=1),
        canonical=_canonical_dict(doc),
    )
    return cfg


def _canonical_dict(doc: Any) -> dict:
    # YAML-safe plain structure for hashing; keys deep-sorted by json dumps.
    return json.loads(json.dumps(doc, sort_keys=True))


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Load and validate a YAML config file, applying CLI overrides.

    Override keys: global_seed, profile, mock, captions_per_image,
    concurrency (only the flat keys the CLI exposes).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError("config", f"invalid YAML: {e}") from e
    if doc is None:
        doc = {}
    if overrides:
        doc = _apply_overrides(doc, overrides)
    return config_from_dict(doc, source=str(path))


def _apply_overrides(doc: dict, overrides: dict[str, Any]) -> dict:
    doc = json.loads(json.dumps(doc))  # deep copy, plain types only
    if "global_seed" in overrides:
        doc["global_seed"] = overrides["global_seed"]
    if "profile" in overrides:
        doc["profile"] = overrides["profile"]
    if "concurrency" in overrides:
        doc["concurrency"] = overrides["concurrency"]
    fusion_over = {k: overrides[k] for k in ("mock", "captions_per_image") if k in overrides}
    if fusion_over:
        section = doc.setdefault("fusion", {})
        if not isinstance(section, dict):
            raise ConfigError("fusion", f"expected a mapping, got {type(section).__name__}")
        section.update(fusion_over)
    return doc
