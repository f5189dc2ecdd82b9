"""Detection and answer-quality metrics.

Text metrics tokenize with the package tokenizer (lowercase, punctuation split
off). ``meteor_lite`` is METEOR restricted to exact unigram matches: no
stemming, no synonyms.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._ext import kernels
from .dataset.records import COMPONENTS, question_for
from .tokenizer import normalize, tokenize

BLEU_N = 4
ROUGE_BETA = 1.2
CIDER_N = 4
CIDER_SIGMA = 6.0
METEOR_SEARCH_LIMIT = 200_000


def _toks(text) -> list[str]:
    return tokenize(text) if isinstance(text, str) else list(text)


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


# -- detection ---------------------------------------------------------------------
@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def detection_metrics(predicted: Sequence[str], gold: Sequence[str]):
    """(acc, precision, recall, f1, confusion) with ``fake`` as the positive class.

    An ``undetermined`` prediction is scored as the opposite of the gold verdict.
    """
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predictions for {len(gold)} gold verdicts")
    if not gold:
        raise ValueError("detection_metrics needs at least one pair")
    cm = Confusion()
    for p, g in zip(predicted, gold):
        if g not in ("real", "fake"):
            raise ValueError(f"gold verdict must be real or fake, got {g!r}")
        if p not in ("real", "fake"):
            p = "real" if g == "fake" else "fake"
        if g == "fake":
            if p == "fake":
                cm.tp += 1
            else:
                cm.fn += 1
        elif p == "fake":
            cm.fp += 1
        else:
            cm.tn += 1
    acc = (cm.tp + cm.tn) / cm.total
    prec = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    rec = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, prec, rec, f1, cm


# -- BLEU-4 ------------------------------------------------------------------------
def bleu4(candidate, references) -> float:
    """Sentence BLEU-4 with multi-reference clipping and brevity penalty.

    Zero clipped counts for n >= 2 are smoothed to (0 + 1) / (total + 1).
    """
    cand = _toks(candidate)
    refs = [_toks(r) for r in references]
    if not refs:
        raise ValueError("bleu4 needs at least one reference")
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, BLEU_N + 1):
        counts = _ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= _ngrams(r, n)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = max(len(cand) - n + 1, 0)
        if n == 1 and clipped == 0:
            return 0.0
        if clipped == 0:
            p = 1.0 / (total + 1)
        else:
            p = clipped / total
        log_p += math.log(p)
    c = len(cand)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / BLEU_N)


# -- ROUGE-L -----------------------------------------------------------------------
def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    ids: dict[str, int] = {}
    ai = [ids.setdefault(t, len(ids)) for t in a]
    bi = [ids.setdefault(t, len(ids)) for t in b]
    return int(kernels.lcs_length(ai, bi))


def rouge_l(candidate, references, beta: float = ROUGE_BETA) -> float:
    cand = _toks(candidate)
    refs = [_toks(r) for r in references]
    if not refs:
        raise ValueError("rouge_l needs at least one reference")
    if not cand:
        return 0.0
    best = 0.0
    for r in refs:
        if not r:
            continue
        lcs = _lcs(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


# -- CIDEr-D -----------------------------------------------------------------------
@dataclass
class ScoredPair:
    candidate: str
    references: list[str]
    image_id: str = ""
    question: str = ""

    def __post_init__(self):
        if not self.references:
            raise ValueError("a scored pair needs at least one reference")


def _cider_vec(toks, df, log_n):
    vec, norm = [], []
    for n in range(1, CIDER_N + 1):
        counts = _ngrams(toks, n)
        v = {g: tf * (log_n - math.log(max(1.0, df.get(g, 0.0)))) for g, tf in counts.items()}
        vec.append(v)
        norm.append(math.sqrt(sum(x * x for x in v.values())))
    return vec, norm, len(toks)


def cider(pairs: Sequence[ScoredPair]) -> tuple[list[float], float]:
    """Per-pair CIDEr-D scores and their mean.

    Document frequencies come from the reference sets; similarity uses the
    clipped tf-idf product with a Gaussian length penalty (sigma 6), averaged
    over n = 1..4 and over references, times 10.
    """
    if len(pairs) < 2:
        raise ValueError("cider needs a corpus of at least 2 pairs")
    refs = [[_toks(r) for r in p.references] for p in pairs]
    df: Counter = Counter()
    for rs in refs:
        df.update({g for r in rs for n in range(1, CIDER_N + 1) for g in _ngrams(r, n)})
    log_n = math.log(float(len(pairs)))
    scores = []
    for p, rs in zip(pairs, refs):
        hv, hn, hl = _cider_vec(_toks(p.candidate), df, log_n)
        total = 0.0
        for r in rs:
            rv, rn, rl = _cider_vec(r, df, log_n)
            delta = hl - rl
            val = 0.0
            for n in range(CIDER_N):
                s = sum(min(x, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, x in hv[n].items())
                if hn[n] != 0 and rn[n] != 0:
                    s /= hn[n] * rn[n]
                val += s * math.exp(-(delta ** 2) / (2 * CIDER_SIGMA ** 2))
            total += val / CIDER_N
        scores.append(10.0 * total / len(rs))
    return scores, float(np.mean(scores))


# -- METEOR-lite -------------------------------------------------------------------
def _min_chunks(cand: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) of a maximum exact-unigram alignment with fewest chunks.

    Depth-first search over candidate positions with a bound on achievable
    adjacent continuations; stops refining after ``METEOR_SEARCH_LIMIT`` nodes
    and keeps the best alignment found.
    """
    positions: dict[str, list[int]] = {}
    for j, t in enumerate(ref):
        positions.setdefault(t, []).append(j)
    cc = Counter(cand)
    quota = {t: min(c, len(positions.get(t, ()))) for t, c in cc.items()}
    matches = sum(quota.values())
    if matches == 0:
        return 0, 0
    # skips allowed per type = occurrences in candidate - quota
    skips = {t: cc[t] - quota[t] for t in cc}
    used = [False] * len(ref)
    best = [-1]
    nodes = [0]

    def dfs(i: int, prev: int, cont: int, left: int) -> None:
        if nodes[0] > METEOR_SEARCH_LIMIT:
            return
        nodes[0] += 1
        # each remaining match can extend a run, except the first if none is open
        if cont + (left if prev >= 0 else max(0, left - 1)) <= best[0]:
            return
        if i == len(cand):
            best[0] = max(best[0], cont)
            return
        t = cand[i]
        if quota.get(t, 0) > 0:
            opts = positions[t]
            # try the continuation first so good solutions come early
            order = sorted(opts, key=lambda j: (j != prev + 1, j))
            for j in order:
                if used[j]:
                    continue
                used[j] = True
                quota[t] -= 1
                dfs(i + 1, j, cont + (prev >= 0 and j == prev + 1), left - 1)
                quota[t] += 1
                used[j] = False
        if skips.get(t, 0) > 0:
            skips[t] -= 1
            dfs(i + 1, -2, cont, left)
            skips[t] += 1

    dfs(0, -2, 0, matches)
    return matches, matches - best[0]


def meteor_lite(candidate, references) -> float:
    cand = _toks(candidate)
    refs = [_toks(r) for r in references]
    if not refs:
        raise ValueError("meteor_lite needs at least one reference")
    best = 0.0
    for r in refs:
        if not cand or not r:
            continue
        m, chunks = _min_chunks(cand, r)
        if m == 0:
            continue
        p, rec = m / len(cand), m / len(r)
        fmean = 10 * p * rec / (rec + 9 * p)
        best = max(best, fmean * (1 - 0.5 * (chunks / m) ** 3))
    return best


# -- AUC / EER ---------------------------------------------------------------------
def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_eer(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """ROC AUC (ties get half credit) and equal error rate; label 1 = fake."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_eer needs both classes")
    ranks = _average_ranks(s)
    auc = (ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    # ROC points from the strictest threshold down, grouping tied scores
    thr = np.unique(s)[::-1]
    fpr = [0.0] + [float(((s >= t) & ~y).sum()) / n_neg for t in thr]
    fnr = [1.0] + [1.0 - float(((s >= t) & y).sum()) / n_pos for t in thr]
    d = np.subtract(fpr, fnr)
    k = int(np.argmax(d >= 0))
    if k == 0 or d[k] == 0:
        eer = fpr[k]
    else:
        t = d[k - 1] / (d[k - 1] - d[k])
        eer = fpr[k - 1] + t * (fpr[k] - fpr[k - 1])
    return float(auc), float(eer)


# -- report ------------------------------------------------------------------------
_QUESTION_TYPE = {normalize(question_for(c)): c for c in COMPONENTS}


def question_type(question: str) -> str:
    """``general`` for the whole-face question, else the component name."""
    comp = _QUESTION_TYPE.get(normalize(question))
    if comp is None:
        return "other"
    return "general" if comp == "whole_face" else comp


@dataclass
class EvalReport:
    n: int
    acc: float
    precision: float
    recall: float
    f1: float
    bleu4: float
    rouge_l: float
    meteor: float
    cider: float
    counts: dict = field(default_factory=dict)
    breakdown: dict = field(default_factory=dict)
    meteor_variant: str = "meteor_lite (exact unigram matches only)"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _summary(rows, cider_scores) -> dict:
    acc, p, r, f1, cm = detection_metrics([x["verdict"] for x in rows],
                                          [x["gold_verdict"] for x in rows])
    return dict(n=len(rows), acc=acc, precision=p, recall=r, f1=f1,
                bleu4=float(np.mean([bleu4(x["generated"], x["gold_answers"]) for x in rows])),
                rouge_l=float(np.mean([rouge_l(x["generated"], x["gold_answers"]) for x in rows])),
                meteor=float(np.mean([meteor_lite(x["generated"], x["gold_answers"]) for x in rows])),
                cider=float(np.mean(cider_scores)), counts=asdict(cm))


def evaluate(rows: Iterable[dict]) -> EvalReport:
    """Score generation rows ({generated, verdict, gold_verdict, gold_answers, question}).

    Text metrics are means of per-pair scores; CIDEr document frequencies
    come from the whole corpus, including for the per-type breakdown.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("evaluate needs at least one generated pair")
    if len(rows) > 1:
        per_pair, _ = cider([ScoredPair(x["generated"], list(x["gold_answers"])) for x in rows])
    else:
        per_pair = [float("nan")]
    groups: dict[str, list[int]] = {}
    for i, x in enumerate(rows):
        groups.setdefault(question_type(x.get("question", "")), []).append(i)
    breakdown = {k: _summary([rows[i] for i in idx], [per_pair[i] for i in idx])
                 for k, idx in sorted(groups.items())}
    return EvalReport(**_summary(rows, per_pair), breakdown=breakdown)
