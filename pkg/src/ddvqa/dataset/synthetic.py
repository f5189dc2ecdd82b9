"""Procedural face images with planted artifacts, annotated by simulated raters.

Each image is a cartoon face: an ellipse, two brow bars, two eye disks, a nose
wedge and a mouth bar, with jittered geometry and colors. Fake images get one
to three artifacts on distinct components, drawn from :data:`ARTIFACTS`. Three
simulated annotators then label every asked question (with occasional errors
and skips) and the raw labels go through the regular aggregation pipeline, so
the emitted records only ever state phrases that were actually planted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .annotations import RawAnnotation, build_records
from .records import FINE_COMPONENTS, MANIPULATIONS, QARecord, SyntheticImage

GENERAL_FAKE_PHRASE = "obvious manipulated region"

REAL_FEATURES = {
    "whole_face": ("complete face features", "natural expression"),
    "eyebrows": ("arched", "straight", "thick"),
    "skin": ("smooth", "even"),
    "eyes": ("round", "clear"),
    "nose": ("straight", "pointed"),
    "mouth": ("full", "natural color"),
}


@dataclass
class Face:
    size: int
    cx: float
    cy: float
    rx: float
    ry: float
    brow_y: float
    eye_y: float
    mouth_y: float
    skin: np.ndarray
    brow: np.ndarray
    lip: np.ndarray
    background: np.ndarray

    @property
    def s(self) -> float:
        return self.size / 64.0


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return yy, xx


def _paint(img, mask, color):
    img[mask] = color


def _rect(face: Face, x0, x1, y0, y1):
    yy, xx = _grid(face.size)
    s = face.s
    return (xx >= x0 * s) & (xx < x1 * s) & (yy >= y0 * s) & (yy < y1 * s)


def _disk(face: Face, x, y, r):
    yy, xx = _grid(face.size)
    s = face.s
    return (xx - x * s) ** 2 + (yy - y * s) ** 2 <= (r * s) ** 2


def _wedge(face: Face, apex_x, apex_y, base_y, half_width, bend=0.0):
    yy, xx = _grid(face.size)
    s = face.s
    t = (yy / s - apex_y) / (base_y - apex_y)
    centre = apex_x + bend * t * t
    return (t >= 0) & (t <= 1) & (np.abs(xx / s - centre) <= half_width * t)


def _box_blur(img, mask_box, k=5):
    y0, y1, x0, x1 = mask_box
    y0, x0 = max(y0, 0), max(x0, 0)
    y1, x1 = min(y1, img.shape[0]), min(x1, img.shape[1])
    pad = k // 2
    src = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    acc = np.zeros_like(img[y0:y1, x0:x1])
    for dy in range(k):
        for dx in range(k):
            acc += src[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
    img[y0:y1, x0:x1] = acc / (k * k)


def _bbox(face: Face, x0, x1, y0, y1):
    s = face.s
    return int(y0 * s), int(np.ceil(y1 * s)), int(x0 * s), int(np.ceil(x1 * s))


# -- base layout -------------------------------------------------------------------
def _brow_masks(face: Face, dy=0.0):
    y = face.brow_y + dy
    return (_rect(face, face.cx - 14, face.cx - 4, y, y + 2.5),
            _rect(face, face.cx + 4, face.cx + 14, y, y + 2.5))


def _draw_eye(img, face: Face, x, r=3.5):
    _paint(img, _disk(face, x, face.eye_y, r), np.array([0.95, 0.95, 0.95]))
    _paint(img, _disk(face, x, face.eye_y, r * 0.45), np.array([0.1, 0.1, 0.2]))


def _nose_mask(face: Face, bend=0.0):
    return _wedge(face, face.cx, face.eye_y + 2, face.eye_y + 12, 3.5, bend)


def _mouth_mask(face: Face):
    return _rect(face, face.cx - 7, face.cx + 7, face.mouth_y, face.mouth_y + 3)


def draw_face(face: Face) -> np.ndarray:
    img = np.empty((face.size, face.size, 3))
    img[:] = face.background
    yy, xx = _grid(face.size)
    s = face.s
    skin = ((xx - face.cx * s) / (face.rx * s)) ** 2 + ((yy - face.cy * s) / (face.ry * s)) ** 2 <= 1
    _paint(img, skin, face.skin)
    for m in _brow_masks(face):
        _paint(img, m, face.brow)
    _draw_eye(img, face, face.cx - 9)
    _draw_eye(img, face, face.cx + 9)
    _paint(img, _nose_mask(face), face.skin * 0.78)
    _paint(img, _mouth_mask(face), face.lip)
    return img


def random_face(rng: np.random.Generator, size: int) -> Face:
    j = lambda a: rng.uniform(-a, a)  # noqa: E731
    cy = 34 + j(1.5)
    return Face(
        size=size, cx=32 + j(1.5), cy=cy, rx=20 + j(1.5), ry=25 + j(1.5),
        brow_y=cy - 13 + j(1.0), eye_y=cy - 6 + j(1.0), mouth_y=cy + 12 + j(1.0),
        skin=np.array([0.92, 0.74, 0.62]) * rng.uniform(0.7, 1.05),
        brow=np.array([0.28, 0.17, 0.1]) * rng.uniform(0.6, 1.2),
        lip=np.array([0.72, 0.22, 0.26]) * rng.uniform(0.85, 1.1),
        background=rng.uniform(0.05, 0.35, size=3),
    )


# -- artifacts ---------------------------------------------------------------------
def _overlapped(img, face, rng):
    for m in _brow_masks(face, dy=-3.5):
        _paint(img, m, face.brow)


def _broken(img, face, rng):
    side = -1 if rng.random() < 0.5 else 1
    x = face.cx + side * 9
    _paint(img, _rect(face, x - 1.8, x + 1.8, face.brow_y - 0.5, face.brow_y + 3), face.skin)


def _blur_box(x0, x1, y0, y1):
    def apply(img, face, rng):
        box = _bbox(face, face.cx + x0, face.cx + x1, y0(face), y1(face))
        _box_blur(img, box, k=max(3, int(round(5 * face.s)) | 1))
    return apply


def _inconsistent_color(img, face, rng):
    side = -1 if rng.random() < 0.5 else 1
    m = _disk(face, face.cx + side * 11, face.eye_y + 9, 5.5)
    img[m] = np.clip(img[m][:, [2, 0, 1]] * 1.25, 0, 1)


def _boundaries(img, face, rng):
    side = -1 if rng.random() < 0.5 else 1
    x = face.cx + side * 15
    _paint(img, _rect(face, x - 0.8, x + 0.8, face.eye_y - 2, face.mouth_y + 2),
           np.clip(face.skin * 1.45, 0, 1))


def _discolored(img, face, rng):
    _paint(img, _disk(face, face.cx + rng.uniform(-4, 4), face.brow_y - 6, 3.2),
           np.array([0.42, 0.28, 0.18]))


def _asymmetric(img, face, rng):
    side = -1 if rng.random() < 0.5 else 1
    _draw_eye(img, face, face.cx + side * 9, r=5.8)


def _curved_nose(img, face, rng):
    _paint(img, _nose_mask(face), face.skin)
    bend = 5.0 if rng.random() < 0.5 else -5.0
    _paint(img, _nose_mask(face, bend=bend), face.skin * 0.7)


def _no_nose_detail(img, face, rng):
    _paint(img, _nose_mask(face), face.skin)


def _mouth_color(img, face, rng):
    _paint(img, _mouth_mask(face), np.array([0.95, 0.95, 0.9]))


ARTIFACTS: dict[str, dict[str, Callable]] = {
    "eyebrows": {
        "overlapped": _overlapped,
        "broken": _broken,
        "blurry": _blur_box(-16, 16, lambda f: f.brow_y - 3, lambda f: f.brow_y + 5),
    },
    "skin": {
        "inconsistent color": _inconsistent_color,
        "boundaries": _boundaries,
        "discolored patches": _discolored,
    },
    "eyes": {
        "blurry": _blur_box(-14, 14, lambda f: f.eye_y - 5, lambda f: f.eye_y + 5),
        "asymmetric": _asymmetric,
    },
    "nose": {
        "unnaturally curved": _curved_nose,
        "lacks details": _no_nose_detail,
    },
    "mouth": {
        "blurry": _blur_box(-10, 10, lambda f: f.mouth_y - 3, lambda f: f.mouth_y + 6),
        "unnatural color": _mouth_color,
    },
}

# Applied in this order so later artifacts are not painted over.
_APPLY_ORDER = ("nose", "skin", "eyebrows", "eyes", "mouth")


def all_artifact_types() -> list[tuple[str, str]]:
    return [(c, p) for c in FINE_COMPONENTS for p in ARTIFACTS[c]]


@dataclass
class SyntheticConfig:
    n_images: int = 300
    p_fake: float = 0.5
    image_size: int = 64
    artifact_types: Sequence[tuple[str, str]] | None = None  # None means all
    max_artifacts: int = 4
    n_annotators: int = 3
    annotator_error: float = 0.08
    neural_textures_error: float = 0.15
    skip_prob: float = 0.05
    test_fraction: float = 0.1
    id_prefix: str = "syn"
    extra: dict = field(default_factory=dict)

    def catalog(self) -> dict[str, list[str]]:
        allowed = all_artifact_types() if self.artifact_types is None else list(self.artifact_types)
        out: dict[str, list[str]] = {}
        for comp, phrase in allowed:
            if comp not in ARTIFACTS or phrase not in ARTIFACTS[comp]:
                raise ValueError(f"unknown artifact type ({comp!r}, {phrase!r})")
            out.setdefault(comp, []).append(phrase)
        return out


def render_image(rng: np.random.Generator, size: int,
                 planted: Sequence[tuple[str, str]]) -> np.ndarray:
    face = random_face(rng, size)
    img = draw_face(face)
    for comp in _APPLY_ORDER:
        for c, phrase in planted:
            if c == comp:
                ARTIFACTS[c][phrase](img, face, rng)
    # round through float32 so in-memory pixels equal what the raw file stores
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def _annotate(rng, cfg: SyntheticConfig, image_id, manipulation, asked, planted_by_comp,
              catalog, split):
    gt = "real" if manipulation == "real" else "fake"
    err = cfg.neural_textures_error if manipulation == "NeuralTextures" else cfg.annotator_error
    out = []
    for comp in asked:
        truth = gt
        for k in range(cfg.n_annotators):
            aid = f"a{k}"
            if rng.random() < cfg.skip_prob:
                out.append(RawAnnotation(image_id, comp, aid, "skip", None, (), gt,
                                         manipulation, split))
                continue
            verdict = truth if rng.random() >= err else ("real" if truth == "fake" else "fake")
            if verdict == "fake":
                if truth == "fake":
                    pool = planted_by_comp.get(comp, [GENERAL_FAKE_PHRASE])
                    n = int(rng.integers(1, len(pool) + 1))
                    reasons = tuple(pool[i] for i in sorted(rng.choice(len(pool), n, replace=False)))
                else:
                    pool = catalog.get(comp) or [GENERAL_FAKE_PHRASE]
                    reasons = (pool[int(rng.integers(len(pool)))],)
                rating = int(rng.integers(2, 6))
            else:
                pool = REAL_FEATURES[comp]
                reasons = (pool[int(rng.integers(len(pool)))],) if rng.random() < 0.85 else ()
                rating = int(rng.integers(0, 2))
            out.append(RawAnnotation(image_id, comp, aid, verdict, rating, reasons, gt,
                                     manipulation, split))
    return out


def generate_raw(cfg: SyntheticConfig, seed: int):
    """Images plus simulated raw annotations, before aggregation."""
    rng = np.random.default_rng(seed)
    catalog = cfg.catalog()
    images: list[SyntheticImage] = []
    annotations: list[RawAnnotation] = []
    comps_available = sorted(catalog)
    for i in range(cfg.n_images):
        image_id = f"{cfg.id_prefix}{seed}-{i:05d}"
        fake = rng.random() < cfg.p_fake and bool(comps_available)
        if fake:
            manipulation = MANIPULATIONS[1 + int(rng.integers(4))]
            k = int(rng.integers(1, min(cfg.max_artifacts, len(comps_available)) + 1))
            comps = [comps_available[j] for j in sorted(rng.choice(len(comps_available), k, replace=False))]
            planted = [(c, catalog[c][int(rng.integers(len(catalog[c])))]) for c in comps]
            asked = ["whole_face"] + comps
        else:
            manipulation = "real"
            planted = []
            k = int(rng.integers(2, 6))
            asked = ["whole_face"] + [FINE_COMPONENTS[j] for j in
                                      sorted(rng.choice(len(FINE_COMPONENTS), k, replace=False))]
        pixels = render_image(rng, cfg.image_size, planted)
        planted_by_comp: dict[str, list[str]] = {}
        for c, p in planted:
            planted_by_comp.setdefault(c, []).append(p)
        if fake:
            planted = planted + [("whole_face", GENERAL_FAKE_PHRASE)]
            planted_by_comp["whole_face"] = [GENERAL_FAKE_PHRASE]
        images.append(SyntheticImage(image_id, pixels, planted))
        annotations += _annotate(rng, cfg, image_id, manipulation, asked, planted_by_comp,
                                 catalog, None)
    return images, annotations, rng


def generate_synthetic_corpus(cfg: SyntheticConfig | None = None,
                              seed: int = 0) -> tuple[list[QARecord], list[SyntheticImage]]:
    cfg = cfg or SyntheticConfig()
    images, annotations, rng = generate_raw(cfg, seed)
    records, _ = build_records(annotations, rng, cfg.test_fraction)
    return records, images
