import os

# single-threaded BLAS keeps float results identical across runs
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from ddvqa.model import DdvqaModel
from ddvqa.tokenizer import build_vocab

from helpers import make_record, small_config


@pytest.fixture
def tiny_records():
    return [
        make_record("i0", "whole_face", "fake", ["blurry mouth"]),
        make_record("i0", "mouth", "fake", ["blurry"]),
        make_record("i1", "whole_face", "real", ["natural skin"]),
        make_record("i1", "mouth", "real", ["natural lips"]),
        make_record("i2", "whole_face", "fake", ["blurry mouth"], split="test"),
        make_record("i2", "eyebrows", "fake", ["overlapped"], split="test"),
    ]


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(3)
    return {f"i{k}": rng.random((16, 16, 3)) for k in range(3)}


@pytest.fixture
def tiny_vocab(tiny_records):
    return build_vocab([r.question for r in tiny_records]
                       + [a for r in tiny_records for a in r.answers])


@pytest.fixture
def tiny_model(tiny_vocab):
    return DdvqaModel(small_config(tiny_vocab.size), seed=0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line[1])
