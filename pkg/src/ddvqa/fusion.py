"""Detector enhancement with frozen DD-VQA image features.

A small convolutional detector produces a feature map ``F'`` (W'×H'×C'). The
DD-VQA image encoder's patch tokens, laid out on the patch grid, give ``F``
(W×H×C). The enhanced detector classifies ``F' + theta(F)``, where ``theta`` is
a nearest-neighbour grid resize followed by a learnable 1×1 channel
projection. DD-VQA features are computed without gradient, so the VQA model
stays frozen by construction.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataset.synthetic import SyntheticConfig, all_artifact_types, generate_raw
from .metrics import auc_eer
from .model import DdvqaModel, Linear, patchify
from .tensor import Module, Tensor, no_grad
from .training import AdamW, clip_grad_norm

VARIANTS = ("baseline", "enhanced")

# one artifact per component is seen in training; the rest only at cross-testing
TRAIN_ARTIFACTS = (("eyebrows", "overlapped"), ("skin", "inconsistent color"),
                   ("eyes", "blurry"), ("nose", "unnaturally curved"), ("mouth", "blurry"))


def cross_artifacts() -> list[tuple[str, str]]:
    return [a for a in all_artifact_types() if a not in TRAIN_ARTIFACTS]


# -- detector ----------------------------------------------------------------------
class ToyDetector(Module):
    """Two strided patch convolutions (kernel == stride) and a linear head."""

    def __init__(self, rng, image_size=64, channels=3, c1=16, c_out=32, k1=4, k2=2,
                 pixel_mean=0.5, pixel_std=0.25):
        if image_size % (k1 * k2):
            raise ValueError(f"image size {image_size} not divisible by {k1 * k2}")
        self.k1, self.k2, self.c1, self.c_out = k1, k2, c1, c_out
        self.pixel_mean, self.pixel_std = pixel_mean, pixel_std
        self.grid = image_size // (k1 * k2)
        self.conv1 = Linear(rng, k1 * k1 * channels, c1, math.sqrt(2.0 / (k1 * k1 * channels)))
        self.conv2 = Linear(rng, k2 * k2 * c1, c_out, math.sqrt(2.0 / (k2 * k2 * c1)))
        self.head = Linear(rng, c_out, 1, 0.02)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.grid, self.grid, self.c_out

    def features(self, pixels: np.ndarray) -> Tensor:
        """(B, H, W, C) -> F' of shape (B, W', H', C')."""
        x = (np.asarray(pixels, dtype=np.float64) - self.pixel_mean) / self.pixel_std
        b = x.shape[0]
        h = T.relu(self.conv1(Tensor(patchify(x, self.k1))))
        k2, c1 = self.k2, self.c1
        h = T.reshape(h, (b, self.grid, k2, self.grid, k2, c1))
        h = T.reshape(T.transpose(h, (0, 1, 3, 2, 4, 5)), (b, self.grid * self.grid, k2 * k2 * c1))
        h = T.relu(self.conv2(h))
        return T.reshape(h, (b, self.grid, self.grid, self.c_out))

    def classify(self, feats: Tensor) -> Tensor:
        """Feature map -> (B,) fake logits (global average pool + linear)."""
        pooled = T.mean(feats, axis=(1, 2))
        return T.reshape(self.head(pooled), (feats.shape[0],))

    def __call__(self, pixels: np.ndarray) -> Tensor:
        return self.classify(self.features(pixels))

    def predict_proba(self, pixels: np.ndarray) -> np.ndarray:
        with no_grad():
            z = self(pixels).data
        return 1.0 / (1.0 + np.exp(-z))


def nearest_resize(feats: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a (B, H, W, C) grid to (B, H', W', C)."""
    b, h, w, c = feats.shape
    oh, ow = out_hw
    iy = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    ix = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return feats[:, iy][:, :, ix]


class FusionTransform(Module):
    """theta: grid resize then a learnable C -> C' projection (no bias)."""

    def __init__(self, rng, c_in: int, c_out: int, out_hw: tuple[int, int],
                 zero_init: bool = False, std: float = 0.02):
        self.out_hw = tuple(out_hw)
        self.proj = T.param(np.zeros((c_in, c_out))) if zero_init else T.normal_init(rng, (c_in, c_out), std)

    def __call__(self, feats) -> Tensor:
        data = feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] != self.proj.shape[0]:
            raise ValueError(f"feature map {data.shape} does not have {self.proj.shape[0]} channels")
        return T.matmul(Tensor(nearest_resize(data, self.out_hw)), self.proj)


def fuse(feats, f_prime: Tensor, transform: FusionTransform) -> Tensor:
    """F_en = F' + theta(F)."""
    t = transform(feats)
    if t.shape != f_prime.shape:
        raise ValueError(f"transformed features {t.shape} do not match detector features {f_prime.shape}")
    return T.add(f_prime, t)


def extract_ddvqa_features(model: DdvqaModel, pixels: np.ndarray) -> np.ndarray:
    """Patch-token outputs of the image encoder on the patch grid: (B, W, H, d).

    A single (H, W, C) image gives (W, H, d).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    single = pixels.ndim == 3
    if single:
        pixels = pixels[None]
    gh, gw = model.cfg.grid
    with no_grad():
        tok = model.encode_images(pixels).data
    out = tok[:, 1:].reshape(pixels.shape[0], gh, gw, model.cfg.d_model)
    return out[0] if single else out


# -- training and benchmark --------------------------------------------------------
@dataclass
class DetectorTrainConfig:
    epochs: int = 20
    lr: float = 3e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    grad_clip: float = 1.0


class Variant:
    """A detector, optionally enhanced through a fusion transform."""

    def __init__(self, name: str, seed: int, image_size: int, ddvqa_channels: int | None,
                 freeze_projection_zero: bool = False):
        if name not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.name = name
        self.detector = ToyDetector(np.random.default_rng([seed, 0]), image_size=image_size)
        self.transform = None
        self.frozen_projection = freeze_projection_zero
        if name == "enhanced":
            gh, gw, c = self.detector.feature_shape
            self.transform = FusionTransform(np.random.default_rng([seed, 1]), ddvqa_channels, c,
                                             (gh, gw), zero_init=freeze_projection_zero)

    def trainable(self) -> list[tuple[str, Tensor]]:
        params = [(f"detector.{k}", p) for k, p in self.detector.named_parameters()]
        if self.transform is not None and not self.frozen_projection:
            params += [(f"transform.{k}", p) for k, p in self.transform.named_parameters()]
        return params

    def logits(self, pixels: np.ndarray, ddvqa_feats: np.ndarray | None) -> Tensor:
        fp = self.detector.features(pixels)
        if self.transform is not None:
            fp = fuse(ddvqa_feats, fp, self.transform)
        return self.detector.classify(fp)

    def scores(self, pixels, ddvqa_feats, batch: int = 64) -> np.ndarray:
        out = []
        with no_grad():
            for s in range(0, len(pixels), batch):
                f = None if ddvqa_feats is None else ddvqa_feats[s:s + batch]
                out.append(self.logits(pixels[s:s + batch], f).data)
        return np.concatenate(out)


def train_variant(variant: Variant, pixels: np.ndarray, labels: np.ndarray,
                  ddvqa_feats: np.ndarray | None, cfg: DetectorTrainConfig, seed: int) -> Variant:
    params = variant.trainable()
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    y = np.asarray(labels, dtype=np.float64)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, 2, epoch]).permutation(len(y))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            f = None if ddvqa_feats is None else ddvqa_feats[idx]
            loss = T.binary_cross_entropy_with_logits(variant.logits(pixels[idx], f), y[idx])
            loss.backward()
            clip_grad_norm([p for _, p in params], cfg.grad_clip)
            opt.step()
            for _, p in params:
                p.grad = None
            if variant.transform is not None:
                variant.transform.proj.grad = None
    return variant


@dataclass
class DetectionSet:
    name: str
    pixels: np.ndarray
    labels: np.ndarray


def detection_set(name: str, n_images: int, seed: int, artifact_types, image_size: int = 64,
                  p_fake: float = 0.5) -> DetectionSet:
    """Labelled images (1 = fake) from the synthetic generator."""
    cfg = SyntheticConfig(n_images=n_images, p_fake=p_fake, image_size=image_size,
                          artifact_types=artifact_types, id_prefix=f"det-{name}-")
    images, _, _ = generate_raw(cfg, seed)
    pixels = np.stack([im.pixels for im in images])
    labels = np.array([1 if im.planted_artifacts else 0 for im in images])
    return DetectionSet(name, pixels, labels)


@dataclass
class BenchmarkConfig:
    seeds: Sequence[int] = (0, 1, 2)
    n_train: int = 1600
    n_test: int = 200
    data_seed: int = 11
    image_size: int = 64
    freeze_projection_zero: bool = False
    detector: DetectorTrainConfig = field(default_factory=DetectorTrainConfig)


def _row(variant, corpus, seed, scores, labels) -> dict:
    auc, eer = auc_eer(scores, labels)
    acc = float(np.mean((scores > 0) == (labels == 1)))
    return {"variant": variant, "corpus": corpus, "seed": seed, "acc": acc, "auc": auc, "eer": eer}


def benchmark(model: DdvqaModel, cfg: BenchmarkConfig,
              sets: tuple[DetectionSet, Sequence[DetectionSet]] | None = None,
              progress=None) -> tuple[list[dict], dict]:
    """Train baseline and enhanced detectors per seed; score every test corpus.

    Default corpora: training and ``intra`` test images use
    :data:`TRAIN_ARTIFACTS`; ``cross`` test images use only the remaining
    artifact types.
    """
    if sets is None:
        train = detection_set("train", cfg.n_train, cfg.data_seed, TRAIN_ARTIFACTS, cfg.image_size)
        tests = [detection_set("intra", cfg.n_test, cfg.data_seed + 1, TRAIN_ARTIFACTS, cfg.image_size),
                 detection_set("cross", cfg.n_test, cfg.data_seed + 2, cross_artifacts(), cfg.image_size)]
    else:
        train, tests = sets
    before = {k: v.copy() for k, v in model.state_dict().items()}
    feats = {s.name: extract_ddvqa_features(model, s.pixels) for s in [train, *tests]}
    rows = []
    for seed in cfg.seeds:
        for name in VARIANTS:
            v = Variant(name, seed, cfg.image_size, model.cfg.d_model, cfg.freeze_projection_zero)
            use = name == "enhanced"
            train_variant(v, train.pixels, train.labels, feats[train.name] if use else None,
                          cfg.detector, seed)
            for s in tests:
                sc = v.scores(s.pixels, feats[s.name] if use else None)
                rows.append(_row(name, s.name, seed, sc, s.labels))
                if progress is not None:
                    progress(rows[-1])
    after = model.state_dict()
    if any(not np.array_equal(before[k], after[k]) for k in before):
        raise RuntimeError("DD-VQA parameters changed during detector training")
    return rows, summarize(rows)


def summarize(rows: Sequence[dict]) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(r["variant"], {}).setdefault(r["corpus"], []).append(r)
    summary = {}
    for variant, by_corpus in out.items():
        summary[variant] = {}
        for corpus, rs in by_corpus.items():
            summary[variant][corpus] = {
                m: {"mean": float(np.mean([r[m] for r in rs])),
                    "sd": float(np.std([r[m] for r in rs], ddof=1)) if len(rs) > 1 else 0.0}
                for m in ("acc", "auc", "eer")}
            summary[variant][corpus]["n_seeds"] = len(rs)
    return summary


BENCH_COLUMNS = ("variant", "corpus", "seed", "acc", "auc", "eer")


def write_benchmark(out_dir, rows: Sequence[dict], summary: dict, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "fusion_benchmark.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r["variant"], r["corpus"], r["seed"]] + [repr(float(r[k])) for k in ("acc", "auc", "eer")])
    (out / "fusion_summary.json").write_text(
        json.dumps({"summary": summary, **(meta or {})}, indent=1, sort_keys=True) + "\n",
        encoding="utf-8")
    return path


__all__ = ["ToyDetector", "FusionTransform", "fuse", "extract_ddvqa_features", "nearest_resize",
           "Variant", "train_variant", "DetectorTrainConfig", "BenchmarkConfig", "benchmark",
           "detection_set", "DetectionSet", "summarize", "write_benchmark", "TRAIN_ARTIFACTS",
           "cross_artifacts"]
