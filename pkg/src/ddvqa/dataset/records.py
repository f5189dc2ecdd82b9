"""Core dataset types, question/answer templates and JSONL / raw-image I/O."""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

COMPONENTS = ("whole_face", "eyebrows", "skin", "eyes", "nose", "mouth")
FINE_COMPONENTS = COMPONENTS[1:]
MANIPULATIONS = ("real", "Deepfakes", "Face2Face", "FaceSwap", "NeuralTextures")
VERDICTS = ("real", "fake")

NOUN = {
    "whole_face": "image",
    "eyebrows": "eyebrows",
    "skin": "skin",
    "eyes": "eyes",
    "nose": "nose",
    "mouth": "mouth",
}
_PLURAL = {"eyebrows", "eyes"}

GENERAL_QUESTION = "Does the person in the image look fake?"
FINE_QUESTION = "Do the person's {noun} look fake?"

ANSWER_RE = re.compile(r"^The .+ looks? (real|fake)( because .+)?\.$")
_PARSE_RE = re.compile(r"^The (.+?) looks? (real|fake)(?: because (.+?) looks? (.+))?\.$")


def opposite(verdict: str) -> str:
    return "real" if verdict == "fake" else "fake"


def _verb(noun: str) -> str:
    return "look" if noun in _PLURAL else "looks"


def canonical_phrase(phrase: str) -> str:
    """Lowercase, trim, collapse whitespace and strip the comma separator."""
    return " ".join(phrase.replace(",", " ").lower().split())


def render_answer(component: str, verdict: str, reasons: Sequence[str],
                  strength: str | None = None) -> str:
    """Render ``The X looks real/fake because X looks Y``.

    ``strength`` ("a bit" / "very") is an optional intensity word placed before
    a fake verdict; it is off by default so the verdict grammar stays fixed.
    """
    if component not in NOUN:
        raise ValueError(f"unknown component {component!r}")
    if verdict not in VERDICTS:
        raise ValueError(f"unknown verdict {verdict!r}")
    reasons = [canonical_phrase(r) for r in reasons if canonical_phrase(r)]
    if verdict == "fake" and not reasons:
        raise ValueError("a fake verdict needs at least one reason")
    noun = NOUN[component]
    verb = _verb(noun)
    judged = verdict if not (strength and verdict == "fake") else f"{strength} {verdict}"
    head = f"The {noun} {verb} {judged}"
    if not reasons:
        return head + "."
    return f"{head} because {noun} {verb} {', '.join(reasons)}."


def parse_answer(answer: str) -> tuple[str, str, list[str]]:
    """Invert :func:`render_answer`: (noun, verdict, reason phrases)."""
    m = _PARSE_RE.match(answer.strip())
    if not m:
        raise ValueError(f"answer does not follow the template: {answer!r}")
    reasons = [canonical_phrase(p) for p in (m.group(4) or "").split(",")]
    return m.group(1), m.group(2), [p for p in reasons if p]


def make_questions(image_id: str, components_present: Iterable[str]) -> list[tuple[str, str]]:
    """One general question plus one per annotated facial component."""
    out = [(GENERAL_QUESTION, "whole_face")]
    present = set(components_present)
    unknown = present - set(COMPONENTS)
    if unknown:
        raise ValueError(f"{image_id}: unknown components {sorted(unknown)}")
    for comp in FINE_COMPONENTS:
        if comp in present:
            out.append((FINE_QUESTION.format(noun=NOUN[comp]), comp))
    return out


def question_for(component: str) -> str:
    if component == "whole_face":
        return GENERAL_QUESTION
    return FINE_QUESTION.format(noun=NOUN[component])


def split_for(image_id: str, test_fraction: float = 0.1) -> str:
    """Deterministic image-level split from a hash of the id."""
    h = int(hashlib.sha256(image_id.encode()).hexdigest()[:8], 16)
    return "test" if (h % 10_000) < int(round(test_fraction * 10_000)) else "train"


@dataclass
class QARecord:
    image_id: str
    question: str
    component: str
    answers: list[str]
    verdict: str
    split: str
    manipulation: str = "real"

    def __post_init__(self):
        if not self.answers:
            raise ValueError(f"{self.image_id}/{self.component}: record needs >= 1 answer")
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.image_id, self.component)

    def reasons(self) -> list[str]:
        """Union of reason phrases over all answers, in first-seen order."""
        seen: dict[str, None] = {}
        for a in self.answers:
            for p in parse_answer(a)[2]:
                seen.setdefault(p, None)
        return list(seen)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "QARecord":
        obj = json.loads(line)
        expected = {"image_id", "question", "component", "answers", "verdict", "split",
                    "manipulation"}
        if set(obj) != expected:
            raise ValueError(f"record fields {sorted(obj)} != {sorted(expected)}")
        return cls(**obj)


@dataclass
class SyntheticImage:
    image_id: str
    pixels: np.ndarray
    planted_artifacts: list[tuple[str, str]] = field(default_factory=list)


def write_records(path, records: Sequence[QARecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[QARecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(QARecord.from_json(line))
            except (ValueError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out


def write_image(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 3:
        raise ValueError(f"image must be H x W x C, got shape {arr.shape}")
    h, w, c = arr.shape
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    h, w, c = struct.unpack("<III", buf[:12])
    data = np.frombuffer(buf[12:], dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: expected {h * w * c} floats, found {data.size}")
    return data.reshape(h, w, c).astype(np.float64)


def corpus_stats(records: Sequence[QARecord]) -> dict:
    """Counts of QA pairs by manipulation, component, split and verdict."""
    def count(attr):
        out: dict[str, int] = {}
        for r in records:
            k = getattr(r, attr)
            out[k] = out.get(k, 0) + 1
        return dict(sorted(out.items()))

    images = {r.image_id for r in records}
    return {
        "n_pairs": len(records),
        "n_images": len(images),
        "n_answers": sum(len(r.answers) for r in records),
        "by_manipulation": count("manipulation"),
        "by_component": count("component"),
        "by_split": count("split"),
        "by_verdict": count("verdict"),
        "images_by_split": {
            s: len({r.image_id for r in records if r.split == s})
            for s in sorted({r.split for r in records})
        },
    }
