"""Time the compiled kernels against their numpy/pure-Python twins.

    python benchmarks/bench_kernels.py [--repeat N] [--end-to-end]

Shapes match what a d=64 model sees during training (rows = batch × tokens).
``--end-to-end`` also times one training step with each backend, in a
subprocess so the backend choice made at import time applies.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ddvqa._ext import available_backends

ROWS, WIDTH, FF = 8 * 65, 64, 256


def cases(rng):
    x = rng.standard_normal((ROWS, WIDTH))
    gy = rng.standard_normal((ROWS, WIDTH))
    h = rng.standard_normal((ROWS, FF))
    gh = rng.standard_normal((ROWS, FF))
    att = rng.standard_normal((ROWS, 65))
    gatt = rng.standard_normal((ROWS, 65))
    gain, bias = rng.standard_normal(WIDTH), rng.standard_normal(WIDTH)
    a = rng.integers(0, 30, 40).tolist()
    b = rng.integers(0, 30, 40).tolist()

    def run(k, name):
        if name == "softmax":
            y = k.softmax_forward(att)
            k.softmax_backward(y, gatt)
        elif name == "log_softmax":
            y = k.log_softmax_forward(att)
            k.log_softmax_backward(y, gatt)
        elif name == "layer_norm":
            _, xhat, rstd = k.layer_norm_forward(x, gain, bias, 1e-5)
            k.layer_norm_backward(gy, xhat, rstd, gain)
        elif name == "gelu":
            k.gelu_forward(h)
            k.gelu_backward(h, gh)
        elif name == "lcs":
            k.lcs_length(a, b)

    return run, ("softmax", "log_softmax", "layer_norm", "gelu", "lcs")


STEP = """
import time, numpy as np
from ddvqa._ext import BACKEND
from ddvqa.dataset import SyntheticConfig, generate_synthetic_corpus
from ddvqa.cli import vocab_for
from ddvqa.model import DdvqaModel, ModelConfig
from ddvqa.training import AdamW, Corpus, TrainConfig, make_batch, train_step
from ddvqa.dataset import TripletIndex
recs, ims = generate_synthetic_corpus(SyntheticConfig(n_images=40), seed=0)
vocab = vocab_for(recs)
images = {i.image_id: i.pixels for i in ims}
corpus = Corpus(recs, images, vocab)
m = DdvqaModel(ModelConfig(vocab_size=vocab.size, d_model=64, patch_size=16), seed=0)
opt = AdamW(list(m.named_parameters()), 1e-4, 0.05)
cfg = TrainConfig()
index = TripletIndex(corpus.records)
batch = make_batch(corpus, list(range(8)), index, np.random.default_rng(0), True, True)
train_step(m, opt, batch, images, cfg)
t = time.perf_counter()
for _ in range(5):
    train_step(m, opt, batch, images, cfg)
print(BACKEND, (time.perf_counter() - t) / 5)
"""


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    run, names = cases(np.random.default_rng(0))
    print(f"{'kernel':<12}" + "".join(f"{b:>14}" for b in backends) + f"{'speedup':>10}")
    for name in names:
        times = {b: min(timeit.repeat(lambda: run(k, name), number=args.repeat, repeat=3)) / args.repeat
                 for b, k in backends.items()}
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<12}" + "".join(f"{times[b] * 1e6:>11.1f} us" for b in backends)
              + f"{speed:>9.2f}x")

    if args.end_to_end:
        for pure in ("0", "1"):
            env = dict(os.environ, DDVQA_PURE_PYTHON=pure, OPENBLAS_NUM_THREADS="1")
            out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True,
                                 text=True, check=True).stdout.split()
            print(f"train step ({out[0]}): {float(out[1]) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
