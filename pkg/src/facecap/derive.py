"""Caption-ready derived attributes: dominant emotions, parsing ratios, age phrasing.

All thresholds here are calibration constants, shipped as defaults and
overridable through the pipeline config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schema import EMOTIONS, EmotionScores, ParsingStats

DEFAULT_DOMINANCE_MARGIN = 0.15

HAIR_LENGTHS: tuple[str, ...] = ("bald", "short", "medium", "long")
EYE_STATES: tuple[str, ...] = ("open", "narrow", "closed")
MOUTH_STATES: tuple[str, ...] = ("closed", "slightly_open", "open")

AGE_STRATEGIES: tuple[str, ...] = ("noisy", "bracket", "category")

# Category label + inclusive lower bound in years; upper bound is the next
# entry's lower bound. Labels are fixed; boundaries follow common demographic
# usage and are config-pinned.
DEFAULT_AGE_CATEGORIES: tuple[tuple[str, float], ...] = (
    ("baby", 0.0),
    ("toddler", 1.0),
    ("preschooler", 3.0),
    ("child", 5.0),
    ("teenager", 13.0),
    ("young adult", 20.0),
    ("adult", 30.0),
    ("middle-aged adult", 45.0),
    ("senior adult", 60.0),
    ("elderly", 75.0),
)


class DeriveError(ValueError):
    pass


@dataclass(frozen=True)
class ParsingThresholds:
    """Ratio cut points for the parsing-derived attribute tables.

    Each table is total: every non-negative ratio falls in exactly one bin.
    """

    hair_bald: float = 0.02
    hair_short: float = 0.35
    hair_medium: float = 0.9
    eye_closed: float = 0.002
    eye_narrow: float = 0.01
    mouth_closed: float = 0.001
    mouth_slightly_open: float = 0.02


DEFAULT_PARSING_THRESHOLDS = ParsingThresholds()


@dataclass(frozen=True)
class DerivedAttributes:
    emotions_selected: tuple[str, ...]
    hair_length: str
    eye_state: str
    mouth_state: str

    def __post_init__(self) -> None:
        assert 1 <= len(self.emotions_selected) <= 2
        assert len(set(self.emotions_selected)) == len(self.emotions_selected)


@dataclass(frozen=True)
class AgePhrase:
    strategy: str
    text: str
    numeric_basis: float


def dominant_emotions(s: EmotionScores, margin: float = DEFAULT_DOMINANCE_MARGIN) -> tuple[str, ...]:
    """Top emotion, or the top two when no single one clearly dominates.

    Scores sort descending with ties broken by enumeration order, so the
    result is deterministic and invariant to the input map's ordering.
    """
    ranked = sorted(EMOTIONS, key=lambda e: (-s.score(e), EMOTIONS.index(e)))
    top1, top2 = ranked[0], ranked[1]
    if s.score(top1) - s.score(top2) >= margin:
        return (top1,)
    return (top1, top2)


def derive_parsing_attributes(
    p: ParsingStats,
    thresholds: ParsingThresholds = DEFAULT_PARSING_THRESHOLDS,
) -> tuple[str, str, str]:
    """(hair_length, eye_state, mouth_state) from region pixel ratios."""
    face_skin = p.count("face_skin")
    if face_skin == 0:
        raise DeriveError("face_skin_px is 0; parsing ratios undefined")

    t = thresholds
    r_hair = p.count("hair") / face_skin
    if r_hair < t.hair_bald:
        hair = "bald"
    elif r_hair < t.hair_short:
        hair = "short"
    elif r_hair < t.hair_medium:
        hair = "medium"
    else:
        hair = "long"

    r_eye = (p.count("left_eye") + p.count("right_eye")) / face_skin
    if r_eye < t.eye_closed:
        eyes = "closed"
    elif r_eye < t.eye_narrow:
        eyes = "narrow"
    else:
        eyes = "open"

    r_mouth = p.count("inner_mouth") / face_skin
    if r_mouth < t.mouth_closed:
        mouth = "closed"
    elif r_mouth < t.mouth_slightly_open:
        mouth = "slightly_open"
    else:
        mouth = "open"

    return hair, eyes, mouth


def age_category(age: float, categories: tuple[tuple[str, float], ...] = DEFAULT_AGE_CATEGORIES) -> str:
    label = categories[0][0]
    for name, lower in categories:
        if age >= lower:
            label = name
        else:
            break
    return label


def noisy_age_radius(age: float) -> int:
    # max(1, ...) keeps the noisy strategy non-degenerate for ages under ~7.
    return max(1, round(age / 15))


def sample_age_phrase(
    age_pred: float,
    rng: np.random.Generator,
    categories: tuple[tuple[str, float], ...] = DEFAULT_AGE_CATEGORIES,
) -> AgePhrase:
    """One of three phrasings, chosen with equal probability.

    noisy    -> "A year old" with A drawn uniformly from round(age) +- age/15
    bracket  -> "between age-5 and age+5 years old", lower bound clamped at 0
    category -> a coarse label from the category boundary table
    """
    if age_pred < 0:
        raise DeriveError(f"age_pred must be >= 0, got {age_pred}")
    strategy = AGE_STRATEGIES[int(rng.integers(0, len(AGE_STRATEGIES)))]
    center = round(age_pred)

    if strategy == "noisy":
        radius = noisy_age_radius(age_pred)
        lo, hi = max(0, center - radius), center + radius
        sampled = int(rng.integers(lo, hi + 1))
        text = f"{sampled} year old"
    elif strategy == "bracket":
        text = f"between {max(0, center - 5)} and {center + 5} years old"
    else:
        text = age_category(age_pred, categories)

    return AgePhrase(strategy=strategy, text=text, numeric_basis=float(age_pred))
