"""From per-annotator labels to templated QA records.

Aggregation keeps a (image, component) question when at least two annotators
agree on the verdict, and keeps one answer per agreeing annotator. Three
quality filters drop records: images with no answers at all, annotators who
marked the same question both real and fake, and majority verdicts that
disagree with the ground-truth label.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .records import (COMPONENTS, MANIPULATIONS, NOUN, QARecord, canonical_phrase,
                      question_for, render_answer, split_for)

DROP_NO_ANSWERS = "no_answers"
DROP_CONFLICTING = "conflicting"
DROP_GT_MISMATCH = "gt_mismatch"
DROP_NO_MAJORITY = "no_majority"


@dataclass(frozen=True)
class RawAnnotation:
    image_id: str
    component: str
    annotator_id: str
    verdict: str  # "real", "fake" or "skip"
    fakeness_rating: int | None
    reasons: tuple[str, ...]
    gt_label: str
    manipulation: str
    split: str | None = None

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")
        if self.verdict not in ("real", "fake", "skip"):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.manipulation not in MANIPULATIONS:
            raise ValueError(f"unknown manipulation {self.manipulation!r}")
        if (self.manipulation == "real") != (self.gt_label == "real"):
            raise ValueError(f"{self.image_id}: manipulation {self.manipulation!r} "
                             f"inconsistent with gt_label {self.gt_label!r}")
        if self.fakeness_rating is not None and not 0 <= self.fakeness_rating <= 5:
            raise ValueError(f"fakeness rating {self.fakeness_rating} outside 0..5")

    @property
    def rating_consistent(self) -> bool:
        if self.verdict == "skip" or self.fakeness_rating is None:
            return True
        return (self.fakeness_rating <= 1) == (self.verdict == "real")

    @classmethod
    def from_dict(cls, obj: dict) -> "RawAnnotation":
        obj = dict(obj)
        obj["reasons"] = tuple(obj.get("reasons") or ())
        return cls(**obj)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id, "component": self.component,
            "annotator_id": self.annotator_id, "verdict": self.verdict,
            "fakeness_rating": self.fakeness_rating, "reasons": list(self.reasons),
            "gt_label": self.gt_label, "manipulation": self.manipulation,
            "split": self.split,
        }


@dataclass
class Majority:
    verdict: str
    explanations: list[tuple[str, ...]]
    annotators: list[str]
    ratings: list[int | None] = field(default_factory=list)


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: str | None = None


def aggregate_majority(annos: Sequence[RawAnnotation]) -> Majority | None:
    """Majority verdict of one question, or ``None`` when no two annotators agree.

    Skipped annotations do not vote. All explanations of the agreeing
    annotators are kept, in input order.
    """
    if not annos:
        raise ValueError("aggregate_majority needs at least one annotation")
    votes = [a for a in annos if a.verdict != "skip"]
    for verdict in ("fake", "real"):
        agreeing = [a for a in votes if a.verdict == verdict]
        if len(agreeing) >= 2 and len(agreeing) * 2 > len(votes):
            return Majority(verdict, [a.reasons for a in agreeing],
                            [a.annotator_id for a in agreeing],
                            [a.fakeness_rating for a in agreeing])
    return None


def quality_filter(annos: Sequence[RawAnnotation],
                   image_annos: Sequence[RawAnnotation] | None = None) -> FilterDecision:
    """Apply the three quality filters to the annotations of one question.

    ``image_annos`` is every annotation of the same image (defaults to
    ``annos``); it is needed for the image-level no-answer rule.
    """
    scope = annos if image_annos is None else image_annos
    if not any(a.verdict != "skip" for a in scope):
        return FilterDecision(False, DROP_NO_ANSWERS)
    by_annotator: dict[str, set[str]] = defaultdict(set)
    for a in annos:
        if a.verdict != "skip":
            by_annotator[a.annotator_id].add(a.verdict)
        if not a.rating_consistent:
            return FilterDecision(False, DROP_CONFLICTING)
    if any(len(v) > 1 for v in by_annotator.values()):
        return FilterDecision(False, DROP_CONFLICTING)
    majority = aggregate_majority(annos)
    if majority is None:
        return FilterDecision(False, DROP_NO_MAJORITY)
    if majority.verdict != annos[0].gt_label:
        return FilterDecision(False, DROP_GT_MISMATCH)
    return FilterDecision(True)


def augment_general_answer(verdict: str, general_reasons: Sequence[str],
                           fine_phrases: Iterable[str], rng: np.random.Generator,
                           k: int = 2) -> str:
    """Render a general answer with up to ``k`` sampled fine-grained reasons appended."""
    pool = sorted({canonical_phrase(p) for p in fine_phrases} - {""})
    reasons = [canonical_phrase(r) for r in general_reasons]
    if pool:
        take = min(k, len(pool))
        picked = rng.choice(len(pool), size=take, replace=False)
        reasons += [pool[i] for i in sorted(picked)]
    reasons = list(dict.fromkeys(r for r in reasons if r))
    return render_answer("whole_face", verdict, reasons)


@dataclass
class DropEntry:
    image_id: str
    component: str
    reason: str

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "component": self.component,
                           "reason": self.reason}, sort_keys=True)


def build_records(annotations: Sequence[RawAnnotation], rng: np.random.Generator,
                  test_fraction: float = 0.1) -> tuple[list[QARecord], list[DropEntry]]:
    """Aggregate, filter, template and split raw annotations.

    Records are emitted sorted by (image_id, component order).
    """
    by_image: dict[str, list[RawAnnotation]] = defaultdict(list)
    for a in annotations:
        by_image[a.image_id].append(a)
    records: list[QARecord] = []
    drops: list[DropEntry] = []
    for image_id in sorted(by_image):
        image_annos = by_image[image_id]
        groups: dict[str, list[RawAnnotation]] = defaultdict(list)
        for a in image_annos:
            groups[a.component].append(a)
        kept: dict[str, Majority] = {}
        for comp in COMPONENTS:
            if comp not in groups:
                continue
            decision = quality_filter(groups[comp], image_annos)
            if not decision.keep:
                drops.append(DropEntry(image_id, comp, decision.reason))
                continue
            kept[comp] = aggregate_majority(groups[comp])
        if not kept:
            continue
        first = image_annos[0]
        split = first.split or split_for(image_id, test_fraction)
        for comp in COMPONENTS:
            if comp not in kept:
                continue
            maj = kept[comp]
            if comp == "whole_face":
                fine = [f"{canonical_phrase(r)} {NOUN[c]}"
                        for c, m in kept.items()
                        if c != "whole_face" and m.verdict == maj.verdict
                        for expl in m.explanations for r in expl]
                answers = [augment_general_answer(maj.verdict, expl, fine, rng)
                           for expl in maj.explanations]
            else:
                answers = [render_answer(comp, maj.verdict, expl) for expl in maj.explanations]
            records.append(QARecord(image_id=image_id, question=question_for(comp),
                                    component=comp, answers=answers[:3], verdict=maj.verdict,
                                    split=split, manipulation=first.manipulation))
    return records, drops


def read_annotations(path) -> list[RawAnnotation]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(RawAnnotation.from_dict(json.loads(line)))
            except (ValueError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed annotation ({exc})") from exc
    return out


def write_annotations(path, annotations: Sequence[RawAnnotation]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for a in annotations:
            fh.write(json.dumps(a.to_dict(), sort_keys=True) + "\n")
