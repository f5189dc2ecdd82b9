"""Losses, optimizer and the training loop.

The objective is the unweighted sum of a teacher-forced language-modeling
loss, a text InfoNCE over answer [CLS] representations and an image InfoNCE
over image [CLS] representations. Either contrastive term can be switched off
(``ablation``), in which case it is exactly zero.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .dataset.mining import TripletIndex, mine_image_triplet, mine_text_triplet
from .dataset.records import QARecord
from .model import DdvqaModel, decoder_io, pad_batch, representation_ids
from .tensor import Tensor, no_grad
from .tokenizer import PAD, Vocabulary, encode

log = logging.getLogger(__name__)

ABLATIONS = {
    "lm": (False, False),
    "lm+t": (True, False),
    "lm+i": (False, True),
    "lm+t+i": (True, True),
}

CURVE_COLUMNS = ("epoch", "lm", "text_cl", "image_cl", "total", "val_lm")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs: int = 10
    temperature: float = 0.07
    seed: int = 0
    grad_clip: float = 1.0
    ablation: str = "lm+t+i"
    mine_triplets: bool = True
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {sorted(ABLATIONS)}, got {self.ablation!r}")

    @property
    def use_text(self) -> bool:
        return ABLATIONS[self.ablation][0]

    @property
    def use_image(self) -> bool:
        return ABLATIONS[self.ablation][1]


@dataclass
class LossBreakdown:
    lm: float
    text_contrastive: float
    image_contrastive: float
    total: float
    n_text_triplets: int = 0
    n_image_triplets: int = 0


class NonFiniteLossError(FloatingPointError):
    def __init__(self, breakdown: LossBreakdown):
        super().__init__(f"non-finite loss: {asdict(breakdown)}")
        self.breakdown = breakdown


# -- data --------------------------------------------------------------------------
@dataclass
class Example:
    record: QARecord
    q_ids: list[int]
    answer_ids: list[list[int]]


class Corpus:
    """Encoded records plus an image store keyed by image id."""

    def __init__(self, records: Sequence[QARecord], images: dict[str, np.ndarray],
                 vocab: Vocabulary, max_q_len: int = 32, max_a_len: int = 50):
        self.vocab = vocab
        self.images = images
        self.examples = [
            Example(r, encode(r.question, "question", vocab, max_q_len),
                    [encode(a, "answer", vocab, max_a_len) for a in r.answers])
            for r in records
        ]
        self.records = [e.record for e in self.examples]
        missing = {r.image_id for r in self.records} - set(images)
        if missing:
            raise KeyError(f"no pixels for images {sorted(missing)[:5]}")

    def __len__(self) -> int:
        return len(self.examples)

    def subset(self, split: str) -> "Corpus":
        out = Corpus.__new__(Corpus)
        out.vocab, out.images = self.vocab, self.images
        out.examples = [e for e in self.examples if e.record.split == split]
        out.records = [e.record for e in out.examples]
        return out


@dataclass
class Batch:
    examples: list[Example]
    text_triplets: list[tuple[int, list[int], list[int], list[int]]]  # (row, anchor, pos, neg)
    image_triplets: list[tuple[int, str, str]]  # (row, positive image, negative image)


def make_batch(corpus: Corpus, idx: Sequence[int], index: TripletIndex | None,
               rng: np.random.Generator | None, use_text: bool, use_image: bool) -> Batch:
    exs = [corpus.examples[i] for i in idx]
    text, image = [], []
    if index is not None and rng is not None:
        for row, i in enumerate(idx):
            if use_text:
                trip = mine_text_triplet(i, index, rng)
                if trip is not None:
                    ex = corpus.examples[i]
                    pos = corpus.examples[trip.positive_ref[0]].answer_ids[trip.positive_ref[1]]
                    neg = corpus.examples[trip.negative_ref[0]].answer_ids[trip.negative_ref[1]]
                    text.append((row, ex.answer_ids[0], pos, neg))
            if use_image:
                trip = mine_image_triplet(i, index, rng)
                if trip is not None:
                    image.append((row, trip.positive_ref[0], trip.negative_ref[0]))
    return Batch(exs, text, image)


# -- losses ------------------------------------------------------------------------
def info_nce(anchor: Tensor, positive: Tensor, negative: Tensor, tau: float) -> Tensor:
    """Mean over rows of ``-log softmax([s_ap, s_an] / tau)[0]``.

    Similarities are dot products of L2-normalized vectors.
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    a, p, n = (T.l2_normalize(v, axis=-1) for v in (anchor, positive, negative))
    s_ap = T.tsum(T.mul(a, p), axis=-1, keepdims=True)
    s_an = T.tsum(T.mul(a, n), axis=-1, keepdims=True)
    logits = T.mul(T.concat([s_ap, s_an], axis=-1), 1.0 / tau)
    lp = T.log_softmax(logits if logits.ndim > 1 else T.reshape(logits, (1, 2)))
    return T.neg(T.mean(T.getitem(lp, (slice(None), 0))))


def _zero() -> Tensor:
    return Tensor(np.asarray(0.0))


def _lm_rows(examples: Sequence[Example]):
    rows, dec_in, targets, weights = [], [], [], []
    b = len(examples)
    for r, ex in enumerate(examples):
        k = len(ex.answer_ids)
        for ans in ex.answer_ids:
            x, y = decoder_io(ans)
            rows.append(r)
            dec_in.append(x)
            targets.append(y)
            weights.append(1.0 / (k * b))
    return np.array(rows), pad_batch(dec_in), pad_batch(targets), np.array(weights)


def batch_losses(model: DdvqaModel, batch: Batch, images: dict[str, np.ndarray],
                 tau: float) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(total, lm, text, image) loss tensors for one batch, sharing one graph."""
    exs = batch.examples
    if not exs:
        raise ValueError("empty batch")
    n = len(exs)
    pix = [images[e.record.image_id] for e in exs]
    pix += [images[p] for _, p, _ in batch.image_triplets]
    pix += [images[q] for _, _, q in batch.image_triplets]
    img_tok = model.encode_images(np.stack(pix))
    q_ids = pad_batch([e.q_ids for e in exs])
    image_tokens = T.getitem(img_tok, slice(0, n)) if img_tok.shape[0] != n else img_tok
    xbar = model.ground(model.encode_questions(q_ids), image_tokens, q_ids)

    rows, dec_in, targets, weights = _lm_rows(exs)
    logits = model.decoder_logits(dec_in, T.take_rows(xbar, rows), q_ids[rows])
    lm = T.sequence_nll(logits, targets, PAD, weights)

    text = _zero()
    if batch.text_triplets:
        t_rows = np.repeat([t[0] for t in batch.text_triplets], 3)
        seqs = [representation_ids(s) for t in batch.text_triplets for s in t[1:]]
        reps = model.text_cls_representation(pad_batch(seqs), T.take_rows(xbar, t_rows),
                                             q_ids[t_rows])
        reps = T.reshape(reps, (len(batch.text_triplets), 3, reps.shape[-1]))
        text = info_nce(reps[:, 0, :], reps[:, 1, :], reps[:, 2, :], tau)

    image = _zero()
    if batch.image_triplets:
        k = len(batch.image_triplets)
        cls = T.getitem(img_tok, (slice(None), 0, slice(None)))
        anchors = T.take_rows(cls, [t[0] for t in batch.image_triplets])
        pos = T.getitem(cls, slice(n, n + k))
        neg = T.getitem(cls, slice(n + k, n + 2 * k))
        image = info_nce(anchors, pos, neg, tau)

    total = T.add(T.add(lm, text), image)
    return total, lm, text, image


def lm_loss(model: DdvqaModel, pixels: np.ndarray, q_ids: Sequence[int],
            answers: Sequence[Sequence[int]]) -> Tensor:
    """Mean over candidate answers of the mean token NLL of each answer."""
    if not answers:
        raise ValueError("lm_loss needs at least one answer")
    ex = Example(None, list(q_ids), [list(a) for a in answers])  # type: ignore[arg-type]
    img = model.encode_images(np.asarray(pixels)[None])
    q = pad_batch([ex.q_ids])
    xbar = model.ground(model.encode_questions(q), img, q)
    rows, dec_in, targets, weights = _lm_rows([ex])
    logits = model.decoder_logits(dec_in, T.take_rows(xbar, rows), q[rows])
    return T.sequence_nll(logits, targets, PAD, weights)


def text_contrastive_loss(model: DdvqaModel, pixels: np.ndarray, q_ids: Sequence[int],
                          triplets: Sequence[tuple[Sequence[int], Sequence[int], Sequence[int]]],
                          tau: float) -> Tensor:
    """InfoNCE over answer [CLS] representations for one image/question."""
    if not triplets:
        return _zero()
    img = model.encode_images(np.asarray(pixels)[None])
    q = pad_batch([list(q_ids)])
    xbar = model.ground(model.encode_questions(q), img, q)
    rows = np.zeros(3 * len(triplets), dtype=np.int64)
    seqs = [representation_ids(list(s)) for t in triplets for s in t]
    reps = model.text_cls_representation(pad_batch(seqs), T.take_rows(xbar, rows), q[rows])
    reps = T.reshape(reps, (len(triplets), 3, reps.shape[-1]))
    return info_nce(reps[:, 0, :], reps[:, 1, :], reps[:, 2, :], tau)


def image_contrastive_loss(model: DdvqaModel,
                           triplets: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
                           tau: float) -> Tensor:
    if not triplets:
        return _zero()
    pix = np.stack([p for t in triplets for p in t])
    cls = T.getitem(model.encode_images(pix), (slice(None), 0, slice(None)))
    cls = T.reshape(cls, (len(triplets), 3, cls.shape[-1]))
    return info_nce(cls[:, 0, :], cls[:, 1, :], cls[:, 2, :], tau)


# -- optimizer ---------------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, named_params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.wd and p.data.ndim >= 2:
                p.data *= 1.0 - self.lr * self.wd
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.float64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = np.array(state[f"m.{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v.{k}"], dtype=np.float64)
        self.t = int(state["t"][0])


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def train_step(model: DdvqaModel, opt: AdamW, batch: Batch, images, cfg: TrainConfig) -> LossBreakdown:
    total, lm, text, image = batch_losses(model, batch, images, cfg.temperature)
    bd = LossBreakdown(lm.item(), text.item(), image.item(), total.item(),
                       len(batch.text_triplets), len(batch.image_triplets))
    if not all(math.isfinite(v) for v in (bd.lm, bd.text_contrastive, bd.image_contrastive)):
        raise NonFiniteLossError(bd)
    total.backward()
    params = [p for _, p in opt.params]
    clip_grad_norm(params, cfg.grad_clip)
    opt.step()
    model.zero_grad()
    return bd


def evaluate_lm(model: DdvqaModel, corpus: Corpus, batch_size: int = 16) -> float:
    """Mean LM loss over records (no gradient)."""
    if len(corpus) == 0:
        return float("nan")
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(corpus), batch_size):
            exs = corpus.examples[s:s + batch_size]
            _, lm, _, _ = batch_losses(model, Batch(exs, [], []), corpus.images, 1.0)
            total += lm.item() * len(exs)
            count += len(exs)
    return total / count


# -- loop --------------------------------------------------------------------------
def epoch_rng(seed: int, stream: int, epoch: int) -> np.random.Generator:
    """Per-epoch child stream of the run seed; keeps resume exact."""
    return np.random.default_rng([seed, stream, epoch])


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class FitResult:
    checkpoint: Path
    curve: Path
    history: list[dict]


def save_train_state(path, model: DdvqaModel, opt: AdamW, epoch: int, best_val: float) -> None:
    state = {f"param.{k}": v for k, v in model.state_dict().items()}
    state.update({f"opt.{k}": v for k, v in opt.state_dict().items()})
    state["meta.epoch"] = np.array([epoch], dtype=np.float64)
    state["meta.best_val"] = np.array([best_val], dtype=np.float64)
    save_tensors(path, state, dtype="f8")


def load_train_state(path, model: DdvqaModel, opt: AdamW) -> tuple[int, float]:
    state = load_tensors(path)
    model.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("param.")})
    opt.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("opt.")})
    return int(state["meta.epoch"][0]), float(state["meta.best_val"][0])


def fit(model: DdvqaModel, train: Corpus, cfg: TrainConfig, out_dir,
        val: Corpus | None = None, resume: bool = False, progress=None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, writing checkpoints and a loss curve.

    Files in ``out_dir``: ``model.ckpt`` (+ ``.json``), ``best.ckpt`` when a
    validation corpus is given, ``epoch{N}.ckpt`` every ``checkpoint_every``
    epochs, ``train_state.ckpt`` (float64, for resume) and ``loss_curve.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    opt = AdamW(model.named_parameters(), cfg.lr, cfg.weight_decay,
                (cfg.beta1, cfg.beta2), cfg.adam_eps)
    curve_path = out / "loss_curve.csv"
    state_path = out / "train_state.ckpt"
    start, best_val = 0, math.inf
    history: list[dict] = []
    if resume and state_path.exists():
        start, best_val = load_train_state(state_path, model, opt)
        with curve_path.open(newline="") as fh:
            history = [dict(r) for r in csv.DictReader(fh)][:start]
    else:
        with curve_path.open("w", newline="") as fh:
            csv.writer(fh).writerow(CURVE_COLUMNS)

    index = TripletIndex(train.records) if cfg.mine_triplets and (cfg.use_text or cfg.use_image) else None
    for epoch in range(start + 1, cfg.epochs + 1):
        order = epoch_rng(cfg.seed, 1, epoch).permutation(len(train))
        mine_rng = epoch_rng(cfg.seed, 2, epoch)
        sums = np.zeros(4)
        nb = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            batch = make_batch(train, idx, index, mine_rng, cfg.use_text, cfg.use_image)
            bd = train_step(model, opt, batch, train.images, cfg)
            sums += (bd.lm, bd.text_contrastive, bd.image_contrastive, bd.total)
            nb += 1
        means = sums / max(nb, 1)
        val_lm = evaluate_lm(model, val) if val is not None and len(val) else float("nan")
        row = dict(zip(CURVE_COLUMNS, [epoch, *means, val_lm]))
        history.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d lm=%.4f text=%.4f image=%.4f total=%.4f val_lm=%.4f",
                 epoch, *means, val_lm)
        with curve_path.open("a", newline="") as fh:
            csv.writer(fh).writerow([epoch] + [_fmt(v) for v in (*means, val_lm)])
        if val is not None and math.isfinite(val_lm) and val_lm < best_val:
            best_val = val_lm
            model.save(out / "best.ckpt")
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            model.save(out / f"epoch{epoch}.ckpt")
        save_train_state(state_path, model, opt, epoch, best_val)
    if not state_path.exists():
        save_train_state(state_path, model, opt, 0, best_val)
    final = out / "model.ckpt"
    model.save(final)
    return FitResult(final, curve_path, history)


# -- flat key=value config files ---------------------------------------------------
def _coerce(raw: str, typ):
    typ = {"float": float, "int": int, "str": str, "bool": bool}.get(typ, typ) if isinstance(typ, str) else typ
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw.strip())


def parse_kv(text: str, allowed: dict[str, type]) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys raise."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            out[key] = _coerce(raw, allowed[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return out


def train_config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(TrainConfig)}


def dump_kv(values: dict) -> str:
    return "".join(f"{k} = {json.dumps(v) if isinstance(v, (list, tuple)) else v}\n"
                   for k, v in sorted(values.items()))


# -- overfit recipe ----------------------------------------------------------------
OVERFIT_RECIPE = {"lr": 3e-3, "epochs": 200, "model.d_model": 64}


def overfit_subset(records: Sequence[QARecord], n: int = 8) -> list[QARecord]:
    """``n`` single-answer training pairs, covering distinct (component, verdict) first."""
    pool = [r for r in records if r.split == "train"] or list(records)
    picked, seen = [], set()
    for r in pool:
        if (r.component, r.verdict) not in seen:
            seen.add((r.component, r.verdict))
            picked.append(r)
        if len(picked) == n:
            break
    for r in pool:
        if len(picked) >= n:
            break
        if r not in picked:
            picked.append(r)
    if len(picked) < n:
        raise ValueError(f"corpus has only {len(picked)} records, need {n}")
    return [QARecord(r.image_id, r.question, r.component, r.answers[:1], r.verdict, "train",
                     r.manipulation) for r in picked]
