"""Command-line entry point: ``ddvqa <command> [flags]``.

Commands: build-dataset, train, generate, eval, fuse, report. Exit status is
0 on success, 1 on a usage error and 2 on a runtime error. Primary outputs are
deterministic for a given resolved config; wall-clock timestamps only go to
``run.log``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (SyntheticConfig, TripletIndex, build_records, corpus_stats, generate_raw,
                      mine_image_triplet, mine_text_triplet, read_annotations, read_image,
                      read_records, write_annotations, write_image, write_records)
from .fusion import BenchmarkConfig, DetectorTrainConfig, benchmark, write_benchmark
from .inference import (export_attention, generate_batch, generation_row, read_generations,
                        write_attention, write_generations)
from .metrics import evaluate
from .model import DdvqaModel, ModelConfig
from .tokenizer import Vocabulary, build_vocab
from .training import (ABLATIONS, OVERFIT_RECIPE, Corpus, TrainConfig, dump_kv, fit,
                       overfit_subset, parse_kv)

log = logging.getLogger("ddvqa")

OUT_ENV = "DDVQA_OUT"
MODEL_KEYS = ("d_model", "n_heads", "n_layers_text", "n_layers_image", "n_layers_ground",
              "n_layers_decoder", "patch_size", "max_q_len", "max_a_len", "ff_mult", "init_std")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def _run_log(out: Path, message: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    with (out / "run.log").open("a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {message}\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- dataset -----------------------------------------------------------------------
def load_dataset(data_dir) -> tuple[list, dict[str, np.ndarray], Vocabulary]:
    data = Path(data_dir)
    qa = data / "qa.jsonl"
    if not qa.exists():
        raise FileNotFoundError(f"no dataset at {data} (missing {qa.name}); run build-dataset first")
    records = read_records(qa)
    images = {}
    for image_id in sorted({r.image_id for r in records}):
        images[image_id] = read_image(data / "images" / f"{image_id}.img")
    return records, images, Vocabulary.load(data / "vocab.txt")


def vocab_for(records) -> Vocabulary:
    train = [r for r in records if r.split == "train"] or list(records)
    return build_vocab([r.question for r in train] + [a for r in train for a in r.answers])


def cmd_build_dataset(args) -> int:
    if not args.synthetic and not args.input:
        raise UsageError("build-dataset needs --synthetic or --input ANNOTATIONS.jsonl")
    out = Path(args.out or _default_out("dataset"))
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    resolved = {"seed": seed}
    if args.synthetic:
        cfg = SyntheticConfig(n_images=args.n or 300)
        images, annotations, rng = generate_raw(cfg, seed)
        write_annotations(out / "raw_annotations.jsonl", annotations)
        pixels = {im.image_id: im.pixels for im in images}
        resolved.update({"source": "synthetic", "n": cfg.n_images})
        with (out / "planted_artifacts.jsonl").open("w", encoding="utf-8") as fh:
            for im in images:
                fh.write(json.dumps({"image_id": im.image_id,
                                     "artifacts": [list(a) for a in im.planted_artifacts]}) + "\n")
    else:
        annotations = read_annotations(args.input)
        rng = np.random.default_rng(seed)
        pixels = {}
        if args.images:
            for image_id in sorted({a.image_id for a in annotations}):
                pixels[image_id] = read_image(Path(args.images) / f"{image_id}.img")
        resolved.update({"source": str(args.input), "images": str(args.images or "")})
    records, drops = build_records(annotations, rng, args.test_fraction)
    resolved["test_fraction"] = args.test_fraction
    write_records(out / "qa.jsonl", records)
    with (out / "drops.jsonl").open("w", encoding="utf-8") as fh:
        for d in drops:
            fh.write(d.to_json() + "\n")
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    for image_id in sorted({r.image_id for r in records}):
        if image_id in pixels:
            write_image(img_dir / f"{image_id}.img", pixels[image_id])
    vocab_for(records).save(out / "vocab.txt")
    stats = corpus_stats(records)
    stats["drops"] = {}
    for d in drops:
        stats["drops"][d.reason] = stats["drops"].get(d.reason, 0) + 1
    _write_json(out / "stats.json", stats)
    # one mined text and image triplet per record, for inspection
    index = TripletIndex(records)
    trng = np.random.default_rng([seed, 3])
    with (out / "triplets.jsonl").open("w", encoding="utf-8") as fh:
        for i in range(len(records)):
            for trip in (mine_text_triplet(i, index, trng), mine_image_triplet(i, index, trng)):
                if trip is not None:
                    fh.write(json.dumps({"modality": trip.modality, "anchor": list(trip.anchor_ref),
                                         "positive": list(trip.positive_ref),
                                         "negative": list(trip.negative_ref)}) + "\n")
    (out / "resolved_config.txt").write_text(dump_kv(resolved), encoding="utf-8")
    _run_log(out, f"build-dataset {len(records)} pairs, {len(drops)} dropped")
    print(f"wrote {len(records)} QA pairs ({len(drops)} dropped) to {out}")
    return 0


# -- train -------------------------------------------------------------------------
def _config_schema() -> dict[str, type]:
    schema: dict[str, type] = {f.name: f.type for f in fields(TrainConfig)}
    for k in MODEL_KEYS:
        schema[f"model.{k}"] = float if k == "init_std" else int
    schema.update({"data": str, "overfit": "bool", "overfit_pairs": int})
    return schema


def resolve_train_config(args) -> dict:
    """Defaults < overfit recipe < config file < flags."""
    values: dict = {f.name: f.default for f in fields(TrainConfig)}
    for k in MODEL_KEYS:
        values[f"model.{k}"] = ModelConfig.__dataclass_fields__[k].default
    values.update({"data": "", "overfit": False, "overfit_pairs": 8})
    from_file = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {args.config}: {exc}") from exc
        try:
            from_file = parse_kv(text, _config_schema())
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
    if args.overfit or from_file.get("overfit"):
        values.update(OVERFIT_RECIPE)
        values["overfit"] = True
    values.update(from_file)
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("ablation", "ablation"),
                      ("data", "data")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.overfit:
        values["overfit"] = True
    if not values["data"]:
        raise UsageError("train needs --data DIR (or data = DIR in the config file)")
    return values


def cmd_train(args) -> int:
    values = resolve_train_config(args)
    out = Path(args.out or _default_out("train"))
    out.mkdir(parents=True, exist_ok=True)
    records, images, vocab = load_dataset(values["data"])
    if values["overfit"]:
        records = overfit_subset(records, values["overfit_pairs"])
        vocab = vocab_for(records)
    tcfg = TrainConfig(**{f.name: values[f.name] for f in fields(TrainConfig)})
    mcfg = ModelConfig(vocab_size=vocab.size, vocab_digest=vocab.digest(),
                       **{k: values[f"model.{k}"] for k in MODEL_KEYS})
    (out / "resolved_config.txt").write_text(dump_kv(values), encoding="utf-8")
    vocab.save(out / "vocab.txt")
    corpus = Corpus(records, images, vocab, mcfg.max_q_len, mcfg.max_a_len)
    train, val = corpus.subset("train"), corpus.subset("test")
    model = DdvqaModel(mcfg, seed=tcfg.seed)
    _run_log(out, f"train start ablation={tcfg.ablation} epochs={tcfg.epochs} seed={tcfg.seed}")
    res = fit(model, train, tcfg, out, val=val if len(val) else None, resume=args.resume,
              progress=lambda row: _run_log(out, f"epoch {row['epoch']} total={row['total']:.6f}"))
    _run_log(out, "train done")
    print(f"checkpoint: {res.checkpoint}\nloss curve: {res.curve}")
    return 0


# -- generate / eval ---------------------------------------------------------------
def load_checked(checkpoint, vocab_path=None) -> tuple[DdvqaModel, Vocabulary]:
    ckpt = Path(checkpoint)
    vocab = Vocabulary.load(Path(vocab_path) if vocab_path else ckpt.parent / "vocab.txt")
    model = DdvqaModel.load(ckpt)
    if model.cfg.vocab_digest and model.cfg.vocab_digest != vocab.digest():
        raise ValueError(f"vocabulary digest {vocab.digest()} does not match checkpoint "
                         f"vocabulary digest {model.cfg.vocab_digest}")
    if model.cfg.vocab_size != vocab.size:
        raise ValueError(f"vocabulary size {vocab.size} does not match checkpoint {model.cfg.vocab_size}")
    return model, vocab


def cmd_generate(args) -> int:
    if not args.checkpoint or not args.data:
        raise UsageError("generate needs --checkpoint PATH and --data DIR")
    model, vocab = load_checked(args.checkpoint, args.vocab)
    records, images, _ = load_dataset(args.data)
    corpus = Corpus(records, images, vocab, model.cfg.max_q_len, model.cfg.max_a_len)
    if args.split != "all":
        corpus = corpus.subset(args.split)
    if args.limit:
        corpus.examples = corpus.examples[: args.limit]
    out = Path(args.out or _default_out("generate"))
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    exs = corpus.examples
    for s in range(0, len(exs), 32):
        chunk = exs[s:s + 32]
        gens = generate_batch(model, vocab, np.stack([images[e.record.image_id] for e in chunk]),
                              [e.q_ids for e in chunk], args.max_tokens)
        rows += [generation_row(e.record, g) for e, g in zip(chunk, gens)]
    write_generations(out / "generations.jsonl", rows)
    if args.attention:
        model.set_attention_recording(True)
        for k, e in enumerate(exs[: args.attention]):
            maps = export_attention(model, vocab, images[e.record.image_id], e.record.question)
            write_attention(out / "attention" / f"{k:04d}", maps, model.cfg.grid,
                            {"image_id": e.record.image_id, "question": e.record.question})
    _run_log(out, f"generate {len(rows)} answers from {args.checkpoint}")
    print(f"wrote {len(rows)} generations to {out / 'generations.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    if not args.generations:
        raise UsageError("eval needs --generations FILE")
    rows = read_generations(args.generations)
    report = evaluate(rows)
    out = Path(args.out or _default_out("eval"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    _run_log(out, f"eval {report.n} pairs")
    print(f"acc={report.acc:.4f} f1={report.f1:.4f} bleu4={report.bleu4:.4f} "
          f"rouge_l={report.rouge_l:.4f} cider={report.cider:.4f} meteor_lite={report.meteor:.4f}")
    return 0


# -- fuse / report -----------------------------------------------------------------
def cmd_fuse(args) -> int:
    if not args.checkpoint:
        raise UsageError("fuse needs --checkpoint PATH")
    model = DdvqaModel.load(args.checkpoint)
    values = {"seeds": "0,1,2", "n_train": BenchmarkConfig.n_train, "n_test": BenchmarkConfig.n_test,
              "data_seed": BenchmarkConfig.data_seed,
              "epochs": DetectorTrainConfig.epochs, "lr": DetectorTrainConfig.lr}
    if args.config:
        schema = {"seeds": str, "n_train": int, "n_test": int, "data_seed": int,
                  "epochs": int, "lr": float}
        try:
            values.update(parse_kv(Path(args.config).read_text(encoding="utf-8"), schema))
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
    seeds = tuple(int(s) for s in str(values["seeds"]).split(",") if s.strip())
    if args.seed is not None:
        seeds = (args.seed,)
    values["seeds"] = ",".join(map(str, seeds))
    values["freeze_projection_zero"] = bool(args.freeze_projection_zero)
    if args.epochs is not None:
        values["epochs"] = args.epochs
    cfg = BenchmarkConfig(seeds=seeds, n_train=values["n_train"], n_test=values["n_test"],
                          data_seed=values["data_seed"], image_size=model.cfg.image_size[0],
                          freeze_projection_zero=args.freeze_projection_zero,
                          detector=DetectorTrainConfig(epochs=values["epochs"], lr=values["lr"]))
    out = Path(args.out or _default_out("fuse"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(dump_kv(values), encoding="utf-8")
    rows, summary = benchmark(model, cfg)
    path = write_benchmark(out, rows, summary)
    _run_log(out, f"fuse {len(rows)} rows")
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    if not args.inputs:
        raise UsageError("report needs at least one input directory")
    out = Path(args.out or _default_out("report"))
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# DD-VQA run report", ""]
    collected = {}
    for d in map(Path, args.inputs):
        if not d.is_dir():
            raise FileNotFoundError(f"report input {d} is not a directory")
        entry = {}
        lines += [f"## {d.name}", ""]
        curve = d / "loss_curve.csv"
        if curve.exists():
            rows = curve.read_text(encoding="utf-8").strip().splitlines()
            if len(rows) > 1:
                head, last = rows[0].split(","), rows[-1].split(",")
                entry["final_epoch"] = dict(zip(head, last))
                lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head),
                          "| " + " | ".join(f"{float(v):.4f}" if i else v for i, v in enumerate(last)) + " |", ""]
        rep = d / "eval_report.json"
        if rep.exists():
            r = json.loads(rep.read_text(encoding="utf-8"))
            entry["eval"] = {k: r[k] for k in ("n", "acc", "precision", "recall", "f1", "bleu4",
                                                "rouge_l", "meteor", "cider")}
            cols = ("acc", "precision", "recall", "f1", "bleu4", "rouge_l", "meteor", "cider")
            lines += ["| type | n | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 2)]
            for name, sub in [("all", r)] + sorted(r["breakdown"].items()):
                lines.append(f"| {name} | {sub['n']} | " + " | ".join(f"{sub[c]:.4f}" for c in cols) + " |")
            lines.append("")
        fus = d / "fusion_summary.json"
        if fus.exists():
            s = json.loads(fus.read_text(encoding="utf-8"))["summary"]
            entry["fusion"] = s
            lines += ["| variant | corpus | acc | auc | eer |", "|---|---|---|---|---|"]
            for v in sorted(s):
                for c in sorted(s[v]):
                    m = s[v][c]
                    lines.append(f"| {v} | {c} | " + " | ".join(
                        f"{m[k]['mean']:.4f} ± {m[k]['sd']:.4f}" for k in ("acc", "auc", "eer")) + " |")
            lines.append("")
        collected[str(d)] = entry
    (out / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out / "report.json", collected)
    print(f"wrote {out / 'report.md'}")
    return 0


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ddvqa", description="Deepfake detection VQA toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        sp.add_argument("--seed", type=int)
        if config:
            sp.add_argument("--config", help="flat key = value config file")

    b = sub.add_parser("build-dataset", help="aggregate annotations into QA records")
    common(b, config=False)
    b.add_argument("--synthetic", action="store_true", help="generate a synthetic corpus")
    b.add_argument("--n", type=int, help="number of synthetic images (default 300)")
    b.add_argument("--input", help="raw annotations JSON-Lines")
    b.add_argument("--images", help="directory of <image_id>.img files for --input")
    b.add_argument("--test-fraction", type=float, default=0.1)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", help="dataset directory from build-dataset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.add_argument("--overfit", action="store_true",
                   help="8-pair overfit recipe (d=64, lr 3e-3, 200 epochs)")
    t.add_argument("--resume", action="store_true", help="continue from train_state.ckpt in --out")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="greedy answers for a dataset split")
    common(g, config=False)
    g.add_argument("--checkpoint")
    g.add_argument("--vocab", help="vocabulary file (default: next to the checkpoint)")
    g.add_argument("--data")
    g.add_argument("--split", default="test", choices=("train", "test", "all"))
    g.add_argument("--limit", type=int, default=0)
    g.add_argument("--max-tokens", type=int, default=50)
    g.add_argument("--attention", type=int, default=0, metavar="K",
                   help="export grounding attention maps for the first K pairs")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="score generations")
    common(e, config=False)
    e.add_argument("--generations")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="baseline vs enhanced detector benchmark")
    common(f)
    f.add_argument("--checkpoint")
    f.add_argument("--epochs", type=int, help="detector training epochs")
    f.add_argument("--freeze-projection-zero", action="store_true",
                   help="zero, untrained fusion projection (identity fusion)")
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("report", help="summarise run directories")
    r.add_argument("inputs", nargs="*")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; see ddvqa --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "build_parser", "resolve_train_config", "load_dataset", "load_checked"]
