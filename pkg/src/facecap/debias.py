"""Conditional label-drop rules and co-occurrence statistics.

Detected attributes correlate strongly (e.g. "attractive" with "heavy
makeup"); dropping the target label with a fixed probability when its
condition labels co-occur keeps captions from baking those correlations in.
The co-occurrence counters exist so the effect is auditable before and after.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .schema import ATTRIBUTE_IDS, AttributeRecord

_N = len(ATTRIBUTE_IDS)
_POS = {a: i for i, a in enumerate(ATTRIBUTE_IDS)}


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class DebiasRule:
    """Drop ``target_label`` with probability ``drop_probability`` whenever all
    ``condition_labels`` are present alongside it."""

    target_label: str
    condition_labels: frozenset[str]
    drop_probability: float

    def __post_init__(self) -> None:
        unknown = ({self.target_label} | self.condition_labels) - set(ATTRIBUTE_IDS)
        if unknown:
            raise ValueError(f"unknown attribute id(s) in rule: {sorted(unknown)}")
        if self.target_label in self.condition_labels:
            raise ValueError(f"target {self.target_label!r} cannot be its own condition")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(f"drop_probability must be in [0, 1], got {self.drop_probability}")


# The makeup/attractive correlation is the one the pipeline ships a rule for;
# "wearing_lipstick" is deliberately not a default condition.
DEFAULT_DEBIAS_RULES: tuple[DebiasRule, ...] = (
    DebiasRule(target_label="attractive", condition_labels=frozenset({"heavy_makeup"}), drop_probability=0.8),
)


def apply_debias(
    r: AttributeRecord,
    rules: Iterable[DebiasRule],
    rng: np.random.Generator,
) -> AttributeRecord:
    """Apply drop rules in list order. Only target flags are ever cleared;
    condition labels and everything else pass through untouched."""
    flags = r.attributes
    for rule in rules:
        if not flags.is_set(rule.target_label):
            continue
        if not all(flags.is_set(c) for c in rule.condition_labels):
            continue
        if rng.random() < rule.drop_probability:
            flags = flags.with_cleared(rule.target_label)
    if flags is r.attributes:
        return r
    return r.with_attributes(flags)


def dropped_labels(before: AttributeRecord, after: AttributeRecord) -> tuple[str, ...]:
    """Attribute ids present in ``before`` but cleared in ``after``."""
    return tuple(
        a for a in ATTRIBUTE_IDS
        if before.attributes.is_set(a) and not after.attributes.is_set(a)
    )


@dataclass
class CooccurrenceCounter:
    """Mergeable single-pass counter over attribute flags.

    Shards can each build one and be reduced associatively; order of updates
    and merges never changes the totals.
    """

    n_records: int = 0
    marginal: np.ndarray = field(default_factory=lambda: np.zeros(_N, dtype=np.int64))
    joint: np.ndarray = field(default_factory=lambda: np.zeros((_N, _N), dtype=np.int64))

    def update(self, r: AttributeRecord) -> None:
        v = np.fromiter(r.attributes.values, dtype=np.int64, count=_N)
        self.n_records += 1
        self.marginal += v
        self.joint += np.outer(v, v)

    def merge(self, other: CooccurrenceCounter) -> None:
        self.n_records += other.n_records
        self.marginal += other.marginal
        self.joint += other.joint

    def finalize(
        self,
        conditional_pairs: tuple[tuple[str, str], ...] = (("heavy_makeup", "attractive"),),
    ) -> CooccurrenceReport:
        if self.n_records == 0:
            raise EmptyInput("no records counted")
        return CooccurrenceReport(
            n_records=self.n_records,
            marginal=self.marginal.copy(),
            joint=self.joint.copy(),
            conditional_pairs=conditional_pairs,
        )


@dataclass(frozen=True)
class CooccurrenceReport:
    """Exact marginal/joint counts plus P(a|b) for the configured pairs."""

    n_records: int
    marginal: np.ndarray
    joint: np.ndarray
    conditional_pairs: tuple[tuple[str, str], ...]

    def marginal_count(self, attr: str) -> int:
        return int(self.marginal[_POS[attr]])

    def joint_count(self, a: str, b: str) -> int:
        return int(self.joint[_POS[a], _POS[b]])

    def conditional(self, a: str, given: str) -> float:
        """P(a | given); NaN when the condition never occurs."""
        denom = self.marginal[_POS[given]]
        if denom == 0:
            return float("nan")
        return float(self.joint[_POS[a], _POS[given]] / denom)

    def to_json_dict(self) -> dict:
        nonzero_pairs = []
        for i in range(_N):
            for j in range(i + 1, _N):
                if self.joint[i, j]:
                    nonzero_pairs.append([ATTRIBUTE_IDS[i], ATTRIBUTE_IDS[j], int(self.joint[i, j])])
        return {
            "n_records": self.n_records,
            "marginal": {a: int(self.marginal[i]) for i, a in enumerate(ATTRIBUTE_IDS)},
            "joint_nonzero": nonzero_pairs,
            "conditionals": {
                f"p({a}|{given})": self.conditional(a, given)
                for a, given in self.conditional_pairs
            },
        }

    def to_text(self) -> str:
        lines = [f"co-occurrence over {self.n_records} records"]
        lines.append("marginals (nonzero):")
        for i, a in enumerate(ATTRIBUTE_IDS):
            if self.marginal[i]:
                lines.append(f"  {a}: {int(self.marginal[i])} ({self.marginal[i] / self.n_records:.3f})")
        lines.append("configured conditionals:")
        for a, given in self.conditional_pairs:
            lines.append(f"  P({a} | {given}) = {self.conditional(a, given):.4f}")
        return "\n".join(lines)


def cooccurrence_stats(
    records: Iterable[AttributeRecord],
    conditional_pairs: tuple[tuple[str, str], ...] = (("heavy_makeup", "attractive"),),
) -> CooccurrenceReport:
    """Exact counts in a single pass over the stream."""
    counter = CooccurrenceCounter()
    for r in records:
        counter.update(r)
    return counter.finalize(conditional_pairs)
