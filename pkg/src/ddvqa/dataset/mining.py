"""Contrastive triplet mining over a QA corpus.

Text triplets pair an anchor answer with a positive drawn from the same
record's candidate answers and a negative answer about the same facial
component with the opposite verdict. Image triplets pair an anchor image with
a different image sharing a reason phrase on the same component, and a
negative image whose answer on that component has the opposite verdict.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .records import QARecord, opposite


@dataclass(frozen=True)
class ContrastiveTriplet:
    modality: str  # "text" or "image"
    anchor_ref: tuple
    positive_ref: tuple
    negative_ref: tuple


class TripletIndex:
    """Lookup tables over a corpus; references are record positions."""

    def __init__(self, records: Sequence[QARecord]):
        self.records = list(records)
        self.answers_by_cv: dict[tuple[str, str], list[tuple[int, int]]] = defaultdict(list)
        self.images_by_cv: dict[tuple[str, str], set[str]] = defaultdict(set)
        self.images_by_phrase: dict[tuple[str, str], set[str]] = defaultdict(set)
        self._reasons: list[list[str]] = []
        for i, r in enumerate(self.records):
            cv = (r.component, r.verdict)
            for j in range(len(r.answers)):
                self.answers_by_cv[cv].append((i, j))
            self.images_by_cv[cv].add(r.image_id)
            reasons = r.reasons()
            self._reasons.append(reasons)
            for p in reasons:
                self.images_by_phrase[(r.component, p)].add(r.image_id)

    def __len__(self) -> int:
        return len(self.records)

    def text_candidates(self, i: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
        r = self.records[i]
        positives = [(i, j) for j in range(len(r.answers))]
        negatives = list(self.answers_by_cv.get((r.component, opposite(r.verdict)), ()))
        return positives, negatives

    def image_candidates(self, i: int) -> tuple[list[str], list[str]]:
        r = self.records[i]
        pos: set[str] = set()
        for p in self._reasons[i]:
            pos |= self.images_by_phrase.get((r.component, p), set())
        pos.discard(r.image_id)
        neg = set(self.images_by_cv.get((r.component, opposite(r.verdict)), set()))
        neg.discard(r.image_id)
        return sorted(pos), sorted(neg)


def mine_text_triplet(i: int, index: TripletIndex,
                      rng: np.random.Generator) -> ContrastiveTriplet | None:
    positives, negatives = index.text_candidates(i)
    if not negatives:
        return None
    pos = positives[int(rng.integers(len(positives)))]
    neg = negatives[int(rng.integers(len(negatives)))]
    return ContrastiveTriplet("text", (i, 0), pos, neg)


def mine_image_triplet(i: int, index: TripletIndex,
                       rng: np.random.Generator) -> ContrastiveTriplet | None:
    positives, negatives = index.image_candidates(i)
    if not positives or not negatives:
        return None
    comp = index.records[i].component
    pos = positives[int(rng.integers(len(positives)))]
    neg = negatives[int(rng.integers(len(negatives)))]
    return ContrastiveTriplet("image", (index.records[i].image_id, comp), (pos, comp), (neg, comp))


def answer_text(index: TripletIndex, ref: tuple[int, int]) -> str:
    i, j = ref
    return index.records[i].answers[j]
