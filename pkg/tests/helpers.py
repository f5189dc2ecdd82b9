"""Shared builders for the test suite."""

import numpy as np

from ddvqa.dataset.records import QARecord, question_for, render_answer
from ddvqa.model import ModelConfig


def make_record(image_id, component, verdict, reasons=(), split="train", n_answers=1,
                manipulation=None):
    answers = [render_answer(component, verdict, list(reasons))] * n_answers
    if manipulation is None:
        manipulation = "real" if verdict == "real" else "Deepfakes"
    return QARecord(image_id, question_for(component), component, answers, verdict, split,
                    manipulation)


def small_config(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, d_model=16, n_heads=2, n_layers_text=1,
                n_layers_image=1, n_layers_ground=1, n_layers_decoder=1, patch_size=8,
                image_size=(16, 16), max_q_len=16, max_a_len=24)
    base.update(kw)
    return ModelConfig(**base)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if index is None else index):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


# (criterion number, "PASS/FAIL ..." line), filled by test_acceptance
ACCEPTANCE: list[tuple[int, str]] = []
