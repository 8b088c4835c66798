"""Permuted F1/F2 bag-of-words assembly.

F1 holds the primary descriptors (age phrase, gender term, ethnicity term);
F2 holds everything else (attribute flags, parsing-derived states, emotions,
teeth/tongue visibility). Both lists are independently shuffled before they
enter the fusion prompt, so attribute order varies across the dataset. The
phrase tables live in ``data/phrases.json`` and are versioned; captions stay
reproducible across releases as long as that file's version is unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .derive import AgePhrase, DerivedAttributes
from .schema import ATTRIBUTE_IDS, ATTRIBUTE_NAMES, EMOTIONS, AttributeRecord

_TABLES = json.loads(resources.files("facecap.data").joinpath("phrases.json").read_text("utf-8"))
PHRASE_TABLE_VERSION: int = _TABLES["version"]

# The data file must agree with the schema vocabulary; fail at import if the
# two ever drift.
assert _TABLES["attributes"] == ATTRIBUTE_NAMES, "phrases.json attribute table out of sync with schema"

_DERIVED_KINDS = ("hair_length", "eye_state", "mouth_state")


class UnknownAttribute(KeyError):
    pass


def emotion_phrase(emotions: Sequence[str]) -> str:
    for e in emotions:
        if e not in EMOTIONS:
            raise UnknownAttribute(f"unknown emotion: {e!r}")
    if len(emotions) == 1:
        return _TABLES["emotion_single"].format(emotions[0])
    if len(emotions) == 2:
        return _TABLES["emotion_pair"].format(emotions[0], emotions[1])
    raise UnknownAttribute(f"expected 1 or 2 emotions, got {len(emotions)}")


def gender_terms(gender: str) -> tuple[str, str]:
    try:
        return tuple(_TABLES["gender_terms"][gender])
    except KeyError:
        raise UnknownAttribute(f"unknown gender: {gender!r}") from None


def ethnicity_term(ethnicity: str) -> str:
    try:
        return _TABLES["ethnicities"][ethnicity]
    except KeyError:
        raise UnknownAttribute(f"unknown ethnicity: {ethnicity!r}") from None


def attribute_to_phrase(attr: str | tuple[str, str] | Sequence[str]) -> str:
    """Render one attribute or derived value as its caption phrase.

    Accepts an attribute id ("wearing_hat"), a visibility key
    ("teeth_visible" / "tongue_visible"), a ("hair_length" | "eye_state" |
    "mouth_state", value) pair, or a sequence of 1-2 emotion names.
    """
    if isinstance(attr, str):
        if attr in ATTRIBUTE_IDS:
            return _TABLES["attributes"][attr]
        if attr in ("teeth_visible", "tongue_visible"):
            return _TABLES[attr]
        raise UnknownAttribute(f"unknown attribute: {attr!r}")
    if len(attr) == 2 and attr[0] in _DERIVED_KINDS:
        kind, value = attr
        try:
            return _TABLES[kind][value]
        except KeyError:
            raise UnknownAttribute(f"unknown {kind} value: {value!r}") from None
    return emotion_phrase(attr)


@dataclass(frozen=True)
class BagFlags:
    blurry: bool
    monochrome: bool


@dataclass(frozen=True)
class BagOfWords:
    f1: tuple[str, ...]
    f2: tuple[str, ...]
    flags: BagFlags
    permutation_seed: int

    def __post_init__(self) -> None:
        assert len(self.f1) == 3, "f1 is exactly {age, gender, ethnicity}"
        assert len(set(self.f2)) == len(self.f2), "f2 must not contain duplicates"
        assert not set(self.f1) & set(self.f2), "f1 and f2 must be disjoint"

    def to_json_dict(self) -> dict:
        return {
            "f1": list(self.f1),
            "f2": list(self.f2),
            "flags": {"blurry": self.flags.blurry, "monochrome": self.flags.monochrome},
            "permutation_seed": self.permutation_seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> BagOfWords:
        return cls(
            f1=tuple(d["f1"]),
            f2=tuple(d["f2"]),
            flags=BagFlags(blurry=d["flags"]["blurry"], monochrome=d["flags"]["monochrome"]),
            permutation_seed=d["permutation_seed"],
        )


def _shuffled(items: list[str], rng: np.random.Generator) -> tuple[str, ...]:
    order = rng.permutation(len(items))
    return tuple(items[i] for i in order)


def assemble_bow(
    r: AttributeRecord,
    d: DerivedAttributes,
    age: AgePhrase,
    seed: int,
) -> BagOfWords:
    """Build the shuffled bag for one (already debiased) record.

    The seed is recorded on the bag, so the same (record, seed) pair always
    yields a byte-identical result. Draw order is fixed: gender-term coin,
    F1 shuffle, F2 shuffle.

    The "blurry" attribute flag never becomes an F2 phrase; together with
    monochrome it routes to the suffix flags. F2 is de-duplicated and any
    phrase already present in F1 is skipped, keeping the two lists disjoint.
    """
    rng = np.random.default_rng(seed)

    terms = gender_terms(r.demographics.gender)
    gender = terms[int(rng.integers(0, len(terms)))]
    f1 = _shuffled([age.text, gender, ethnicity_term(r.demographics.ethnicity)], rng)

    candidates: list[str] = []
    for attr_id in r.attributes.set_ids():
        if attr_id == "blurry":
            continue
        candidates.append(attribute_to_phrase(attr_id))
    candidates.append(attribute_to_phrase(("hair_length", d.hair_length)))
    candidates.append(attribute_to_phrase(("eye_state", d.eye_state)))
    candidates.append(attribute_to_phrase(("mouth_state", d.mouth_state)))
    candidates.append(emotion_phrase(d.emotions_selected))
    if r.clip.teeth_visible:
        candidates.append(attribute_to_phrase("teeth_visible"))
    if r.clip.tongue_visible:
        candidates.append(attribute_to_phrase("tongue_visible"))

    seen: set[str] = set(f1)
    f2_items: list[str] = []
    for p in candidates:
        if p not in seen:
            seen.add(p)
            f2_items.append(p)

    return BagOfWords(
        f1=f1,
        f2=_shuffled(f2_items, rng),
        flags=BagFlags(blurry=r.is_blurry, monochrome=r.is_monochrome),
        permutation_seed=seed,
    )
