"""Greedy answer generation, verdict extraction and attention export."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import DdvqaModel, pad_batch
from .tensor import no_grad
from .tokenizer import BOS, CLS, PAD, SEP, Vocabulary, decode, encode, tokenize

MAX_TOKENS = 50
_SENTENCE_END = re.compile(r"[.!?]")
# never emitted by the decoder
_BANNED = (PAD, CLS, BOS)


@dataclass
class GeneratedAnswer:
    text: str
    token_ids: list[int]
    verdict: str  # "real", "fake" or "undetermined"
    stop_reason: str  # "eos" or "max_len"


def extract_verdict(text: str) -> str:
    """Verdict named in the first sentence; both or neither -> ``undetermined``."""
    first = _SENTENCE_END.split(text, maxsplit=1)[0]
    toks = set(tokenize(first))
    fake, real = "fake" in toks, "real" in toks
    if fake == real:
        return "undetermined"
    return "fake" if fake else "real"


def generate_batch(model: DdvqaModel, vocab: Vocabulary, pixels: np.ndarray,
                   q_ids: Sequence[Sequence[int]], max_tokens: int = MAX_TOKENS) -> list[GeneratedAnswer]:
    """Greedy decoding for a batch of (image, question) pairs.

    Each step re-runs the decoder over the full prefix; finished rows keep
    being padded and are ignored.
    """
    if max_tokens < 0:
        raise ValueError("max_tokens must be >= 0")
    max_tokens = min(max_tokens, model.cfg.max_a_len)
    pixels = np.asarray(pixels, dtype=np.float64)
    b = pixels.shape[0]
    q = pad_batch([list(s) for s in q_ids])
    out: list[list[int]] = [[] for _ in range(b)]
    stop = [""] * b
    with no_grad():
        xbar = model.encode_grounded(pixels, q)
        prefix = np.tile(np.array([[CLS, BOS]], dtype=np.int64), (b, 1))
        for step in range(max_tokens):
            live = [i for i in range(b) if not stop[i]]
            if not live:
                break
            logits = model.decoder_logits(prefix, xbar, q).data[:, -1, :].copy()
            logits[:, _BANNED] = -np.inf
            nxt = logits.argmax(axis=-1)
            for i in live:
                if nxt[i] == SEP:
                    stop[i] = "eos"
                else:
                    out[i].append(int(nxt[i]))
            nxt = np.where([bool(s) for s in stop], PAD, nxt)
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    results = []
    for ids, s in zip(out, stop):
        text = decode(ids, vocab)
        results.append(GeneratedAnswer(text, ids, extract_verdict(text), s or "max_len"))
    return results


def generate(model: DdvqaModel, vocab: Vocabulary, pixels: np.ndarray, question: str,
             max_tokens: int = MAX_TOKENS) -> GeneratedAnswer:
    q = encode(question, "question", vocab, model.cfg.max_q_len)
    return generate_batch(model, vocab, np.asarray(pixels)[None], [q], max_tokens)[0]


def generation_row(record, gen: GeneratedAnswer) -> dict:
    return {"image_id": record.image_id, "question": record.question,
            "generated": gen.text, "verdict": gen.verdict,
            "gold_verdict": record.verdict, "gold_answers": list(record.answers)}


def write_generations(path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_generations(path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed generation line ({exc})") from exc
    return rows


# -- attention ---------------------------------------------------------------------
@dataclass
class AttentionMap:
    layer: int
    head: int
    weights: np.ndarray  # (query_len, m + 1)
    query_tokens: list[str]
    key_kind: str = "image_patches"


def export_attention(model: DdvqaModel, vocab: Vocabulary, pixels: np.ndarray,
                     question: str) -> list[AttentionMap]:
    """Per-head cross-attention maps of the last grounding layer.

    Attention recording must be switched on first with
    ``model.set_attention_recording(True)``.
    """
    last = model.ground_blocks[-1].xattn
    if not last.record:
        raise RuntimeError("attention recording is disabled; call set_attention_recording(True)")
    q = encode(question, "question", vocab, model.cfg.max_q_len)
    with no_grad():
        model.encode_grounded(np.asarray(pixels)[None], np.array([q]))
    w = last.last_weights[0]
    tokens = [vocab.id_to_token[i] for i in q]
    layer = len(model.ground_blocks) - 1
    return [AttentionMap(layer, h, w[h].copy(), tokens) for h in range(w.shape[0])]


def head_average(maps: Sequence[AttentionMap], grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Mean over heads, split into the [CLS] column (L,) and a (L, gh, gw) patch grid."""
    mean = np.mean([m.weights for m in maps], axis=0)
    gh, gw = grid
    if mean.shape[1] != gh * gw + 1:
        raise ValueError(f"key length {mean.shape[1]} does not match grid {grid} + [CLS]")
    return mean[:, 0].copy(), mean[:, 1:].reshape(-1, gh, gw)


def write_attention(out_dir, maps: Sequence[AttentionMap], grid: tuple[int, int],
                    meta: dict | None = None) -> Path:
    """One CSV per head, a head-averaged grid CSV per query token, and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for m in maps:
        name = f"layer{m.layer}_head{m.head}.csv"
        with (out / name).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["query_token", "cls"] + [f"p{i}" for i in range(m.weights.shape[1] - 1)])
            for tok, row in zip(m.query_tokens, m.weights):
                wr.writerow([tok] + [repr(float(v)) for v in row])
        files.append({"layer": m.layer, "head": m.head, "file": name})
    cls_col, avg = head_average(maps, grid)
    grids = []
    for qi, tok in enumerate(maps[0].query_tokens):
        name = f"mean_grid_q{qi}.csv"
        with (out / name).open("w", newline="") as fh:
            csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in avg[qi]])
        grids.append({"query_index": qi, "query_token": tok, "file": name,
                      "cls_weight": float(cls_col[qi])})
    manifest = {"key_kind": maps[0].key_kind, "grid": list(grid), "heads": files,
                "mean_grids": grids, "query_tokens": maps[0].query_tokens, **(meta or {})}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path
