"""Command-line interface.

Every subcommand resolves its settings as flag > ``--config`` JSON > default,
writes ``manifest.json`` into ``--out`` before any other artifact, and exits
with 0 on success, 1 on invalid input and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__, bench, tasks
from .attention import PatternError
from .corpus.io import FORMATS, ParseError, load_dataset, load_split, read_manifest, save_dataset, \
    write_manifest
from .corpus.preprocess import preprocess_note
from .corpus.synthetic import GenerationError, gen_synthetic
from .corpus.types import KINDS, TaskExample, ValidationError
from .corpus.windows import LONG_MAX_LEN, MODES
from .metrics import MetricError
from .model import PATTERN_KINDS, AttentionSpec, Checkpoint, LengthError, ModelConfig
from .tokenizer import DEFAULT_VOCAB_SIZE, BpeModel, VocabError, train_bpe
from .training import LR_SWEEP, PRETRAIN_LR, InitError, TrainConfig, encode_corpus, finetune, \
    pretrain

log = logging.getLogger("longclin")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    """Invalid input; reported as ``error: <field>: <message>`` with exit 1."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# defaults per subcommand; a key here is also a valid --config key
DEFAULTS = {
    "gen-synthetic": {"kind": "qa", "size": 100, "dev_size": 0, "test_size": 0, "seed": 0,
                      "long_range": False, "distractors": 2, "min_answer_words": 520,
                      "num_classes": 2, "multilabel": False, "sample_fraction": 1.0,
                      "doc_words": 120, "sentences": 8, "profile": "clinical"},
    "preprocess": {"input": None, "seed": 0},
    "train-tokenizer": {"input": None, "vocab_size": DEFAULT_VOCAB_SIZE, "seed": 0},
    "pretrain": {"corpus": None, "tokenizer": None, "init": None, "seed": 0, "lr": PRETRAIN_LR,
                 "steps": 1000, "batch_size": 8, "masking_rate": 0.15, "max_len": 512,
                 "checkpoint_every": 0, "layers": 4, "heads": 4, "dim": 128, "ffn_dim": 512,
                 "max_positions": 4096, "pattern": "window-global", "window": 33,
                 "block_size": 64, "random_blocks": 3, "dtype": "float32", "dropout": 0.0},
    "finetune": {"checkpoint": None, "tokenizer": None, "data": None, "seed": 0,
                 "max_len": LONG_MAX_LEN, "mode": "truncate-long", "lr_sweep": list(LR_SWEEP),
                 "epochs": 6, "batch_size": 8, "selection_split": "dev", "selection_metric": None,
                 "pattern": None, "window": None, "pool": "mean", "multilabel": None},
    "evaluate": {"checkpoint": None, "tokenizer": None, "data": None, "split": "test",
                 "seed": 0, "max_len": LONG_MAX_LEN, "mode": "truncate-long", "pool": "mean",
                 "multilabel": None},
    "bench": {"patterns": list(PATTERN_KINDS), "ns": list(bench.DEFAULT_NS), "dim": 64,
              "trials": 5, "heads": 1, "seed": 0, "window": 33, "n_globals": 1,
              "block_size": 64, "random_blocks": 3, "full_ceiling": bench.FULL_CEILING},
}


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longclin",
        description="Long-context sparse-attention encoders: data, tokenizer, "
                    "pre-training, fine-tuning, evaluation and benchmarks. "
                    "Settings resolve as flag > --config JSON > default. "
                    "LCE_THREADS caps worker threads.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON file of settings (keys as flag names with _)")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return p

    p = command("gen-synthetic", "generate a synthetic dataset with train/dev/test splits")
    p.add_argument("--kind", choices=KINDS, help="task kind (default qa)")
    p.add_argument("--size", type=int, help="train split size (default 100)")
    p.add_argument("--dev-size", type=int, help="dev split size (default 0)")
    p.add_argument("--test-size", type=int, help="test split size (default 0)")
    p.add_argument("--long-range", type=_bool, help="qa: plant answers far from the question")
    p.add_argument("--distractors", type=int, help="qa: distractor records (default 2)")
    p.add_argument("--min-answer-words", type=int, help="qa long-range: words before the answer")
    p.add_argument("--num-classes", type=int, help="doc-cls: classes (default 2)")
    p.add_argument("--multilabel", type=_bool, help="doc-cls: multilabel documents")
    p.add_argument("--sample-fraction", type=float, help="qa: train under-sampling fraction")
    p.add_argument("--doc-words", type=int, help="doc-cls: words per document")
    p.add_argument("--sentences", type=int, help="ner / mlm-text: sentences per document")
    p.add_argument("--profile", help="vocabulary profile (default clinical)")

    p = command("preprocess", "normalize raw notes (one per line) into a clean corpus")
    p.add_argument("--input", help="text file, one raw note per line")

    p = command("train-tokenizer", "train a byte-level BPE tokenizer")
    p.add_argument("--input", help="text file, one document per line")
    p.add_argument("--vocab-size", type=int, help=f"vocabulary size (default {DEFAULT_VOCAB_SIZE})")

    p = command("pretrain", "masked-language-model pre-training")
    p.add_argument("--corpus", help="text file, one document per line")
    p.add_argument("--tokenizer", help="tokenizer.json")
    p.add_argument("--init", help="checkpoint to initialise from (donor or resume)")
    p.add_argument("--lr", type=float, help=f"learning rate (default {PRETRAIN_LR})")
    p.add_argument("--steps", type=int, help="optimizer steps (default 1000)")
    p.add_argument("--batch-size", type=int, help="sequences per step (default 8)")
    p.add_argument("--masking-rate", type=float, help="MLM masking rate (default 0.15)")
    p.add_argument("--max-len", type=int, help="tokens per training sequence (default 512)")
    p.add_argument("--checkpoint-every", type=int, help="save every k steps (default off)")
    p.add_argument("--layers", type=int, help="encoder layers (default 4)")
    p.add_argument("--heads", type=int, help="attention heads (default 4)")
    p.add_argument("--dim", type=int, help="hidden size (default 128)")
    p.add_argument("--ffn-dim", type=int, help="feed-forward size (default 512)")
    p.add_argument("--max-positions", type=int, help="position table size (default 4096)")
    p.add_argument("--pattern", choices=PATTERN_KINDS, help="attention pattern")
    p.add_argument("--window", type=int, help="sliding window width, odd (default 33)")
    p.add_argument("--block-size", type=int, help="random-block size (default 64)")
    p.add_argument("--random-blocks", type=int, help="random blocks per query block (default 3)")
    p.add_argument("--dtype", choices=("float32", "float64"), help="parameter dtype")
    p.add_argument("--dropout", type=float, help="dropout rate (default 0)")

    p = command("finetune", "fine-tune with a learning-rate sweep and dev-split selection")
    p.add_argument("--checkpoint", help="pre-trained checkpoint")
    p.add_argument("--tokenizer", help="tokenizer.json")
    p.add_argument("--data", help="dataset manifest (dataset.json) with train and dev splits")
    p.add_argument("--max-len", type=int, help="window length, e.g. 3072 or 384 (default 3072)")
    p.add_argument("--mode", choices=MODES, help="windowing mode (default truncate-long)")
    p.add_argument("--lr-sweep", type=_floats, help="comma-separated learning rates "
                                                    "(default 1e-5,2e-5,5e-5)")
    p.add_argument("--lr", type=float, help="single learning rate (shorthand for --lr-sweep)")
    p.add_argument("--epochs", type=int, help="epochs per learning rate (default 6)")
    p.add_argument("--batch-size", type=int, help="examples per step (default 8)")
    p.add_argument("--selection-metric", help="dev metric to maximize (default per task)")
    p.add_argument("--pattern", choices=PATTERN_KINDS, help="override the attention pattern")
    p.add_argument("--window", type=int, help="override the window width")
    p.add_argument("--pool", choices=("mean", "max"), help="snippet pooling (segment-short)")
    p.add_argument("--multilabel", type=_bool, help="doc-cls: force multilabel on or off")

    p = command("evaluate", "score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", help="checkpoint (fine-tuned or not)")
    p.add_argument("--tokenizer", help="tokenizer.json")
    p.add_argument("--data", help="dataset manifest (dataset.json)")
    p.add_argument("--split", help="split to score (default test)")
    p.add_argument("--max-len", type=int, help="window length (default: the fine-tuned one)")
    p.add_argument("--mode", choices=MODES, help="windowing mode (default: the fine-tuned one)")
    p.add_argument("--pool", choices=("mean", "max"), help="snippet pooling (segment-short)")
    p.add_argument("--multilabel", type=_bool, help="doc-cls: force multilabel on or off")

    p = command("bench", "attention scaling benchmark")
    p.add_argument("--patterns", type=_strs, help="comma-separated patterns (default all)")
    p.add_argument("--ns", type=_ints, help="comma-separated lengths (default 512,...,4096)")
    p.add_argument("--dim", type=int, help="head input width (default 64)")
    p.add_argument("--trials", type=int, help="timed trials per point, >= 3 (default 5)")
    p.add_argument("--heads", type=int, help="attention heads (default 1)")
    p.add_argument("--window", type=int, help="window width (default 33)")
    p.add_argument("--n-globals", type=int, help="leading global tokens (default 1)")
    p.add_argument("--block-size", type=int, help="random-block size (default 64)")
    p.add_argument("--random-blocks", type=int, help="random blocks per query block (default 3)")
    p.add_argument("--full-ceiling", type=int, help="largest n for the dense kernel (default 4096)")
    return parser


# --------------------------------------------------------------------------
# settings and manifests


def resolve(args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[args.command]
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError("config", f"no such file {args.config}") from None
        except json.JSONDecodeError as exc:
            raise CliError("config", f"invalid JSON ({exc})") from None
        if not isinstance(config, dict):
            raise CliError("config", "expected a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - set(defaults) - {"lr"})
        if unknown:
            raise CliError(unknown[0], f"unknown setting for {args.command}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else config.get(key, default)
    if args.command == "finetune":
        lr = args.lr if args.lr is not None else (config.get("lr") if args.lr_sweep is None else None)
        if lr is not None:
            out["lr_sweep"] = [lr]
    return out


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


class Run:
    """Output directory of one command; the manifest is written on entry."""

    def __init__(self, args: argparse.Namespace, settings: dict):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": args.command,
            "config_file": args.config,
            "config": settings,
            "seed": settings.get("seed", 0),
            "out": str(self.out),
            "version": __version__,
            "started_at": _now(),
            "finished_at": None,
            "outputs": [],
        }
        self._write()

    def _write(self) -> None:
        (self.out / "manifest.json").write_text(
            json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def path(self, name: str) -> Path:
        self.manifest["outputs"].append(name)
        return self.out / name

    def finish(self, **extra) -> None:
        self.manifest.update(extra)
        self.manifest["finished_at"] = _now()
        self._write()


def _need(settings: dict, key: str) -> str:
    if not settings.get(key):
        raise CliError(key, "is required")
    path = Path(settings[key])
    if not path.exists():
        raise CliError(key, f"no such file {path}")
    return str(path)


def _read_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(s: dict, run: Run) -> None:
    kw = {k: s[k] for k in ("long_range", "distractors", "min_answer_words", "num_classes",
                            "multilabel", "doc_words", "sentences", "profile")}
    sizes = {"train": s["size"], "dev": s["dev_size"], "test": s["test_size"]}
    splits = {}
    fmt = None
    for i, (split, size) in enumerate(sizes.items()):
        if size <= 0:
            continue
        frac = s["sample_fraction"] if split == "train" else 1.0
        examples = gen_synthetic(s["kind"], size, seed=s["seed"] * 7919 + i,
                                 sample_fraction=frac, **kw)
        for ex in examples:
            ex.id = f"{split}-{ex.id}"
        ext = {"iob2col": "iob", "text": "txt"}.get(_format_for(s["kind"]), "json")
        fmt = save_dataset(examples, run.path(f"{split}.{ext}"), _format_for(s["kind"]))
        splits[split] = f"{split}.{ext}"
    if not splits:
        raise CliError("size", "at least one split must be non-empty")
    write_manifest(run.path("dataset.json"), splits, fmt, s["kind"])


def _format_for(kind: str) -> str:
    return {"ner": "iob2col", "qa": "qa-json", "doc-cls": "cls-json", "pair-cls": "cls-json",
            "mlm-text": "text"}[kind]


def cmd_preprocess(s: dict, run: Run) -> None:
    lines = _read_lines(_need(s, "input"))
    clean = [preprocess_note(line) for line in lines]
    run.path("corpus.txt").write_text("".join(c + "\n" for c in clean if c), encoding="utf-8")


def cmd_train_tokenizer(s: dict, run: Run) -> None:
    lines = _read_lines(_need(s, "input"))
    tok = train_bpe(lines, s["vocab_size"])
    tok.save(run.path("tokenizer.json"))
    run.manifest["vocab_size"] = tok.vocab_size


def _model_config(s: dict, vocab_size: int) -> ModelConfig:
    spec = AttentionSpec(s["pattern"], s["window"], s["block_size"], s["random_blocks"], s["seed"])
    return ModelConfig(vocab_size=vocab_size, layers=s["layers"], heads=s["heads"], dim=s["dim"],
                       ffn_dim=s["ffn_dim"], max_positions=s["max_positions"], attention=spec,
                       dropout=s["dropout"], dtype=s["dtype"], seed=s["seed"])


def _train_config(s: dict, **kw) -> TrainConfig:
    fields = {k: s[k] for k in TrainConfig.__dataclass_fields__ if k in s and s[k] is not None}
    fields.update(kw)
    try:
        return TrainConfig(**fields)
    except ValueError as exc:
        raise CliError(_field_of(str(exc), fields), str(exc)) from None


def _field_of(message: str, fields: dict) -> str:
    for k in fields:
        if k in message:
            return k
    return "config"


def cmd_pretrain(s: dict, run: Run) -> None:
    tok = BpeModel.load(_need(s, "tokenizer"))
    texts = _read_lines(_need(s, "corpus"))
    corpus = encode_corpus(texts, tok, s["max_len"])
    cfg = _train_config(s)
    target = _model_config(s, tok.vocab_size)
    if s["init"]:
        source = Checkpoint.load(_need(s, "init"))
        # same architecture and pattern: resume; otherwise treat as a donor
        same = source.meta.get("kind") == "pretrain" and source.config == target
        ckpt, record = pretrain(source, corpus, cfg, model_config=None if same else target,
                                checkpoint_dir=run.out)
    else:
        ckpt, record = pretrain(target, corpus, cfg, checkpoint_dir=run.out,
                                on_step=lambda e: log.info("step %(step)d loss %(loss).4f", e))
    ckpt.save(run.path("model.ckpt"))
    record.save(run.path("run.jsonl"))
    summary = {"final_loss": record.steps[-1]["loss"] if record.steps else None,
               "initial_loss": record.steps[0]["loss"] if record.steps else None,
               "steps": len(record.steps)}
    run.path("metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _load_task_split(s: dict, split: str) -> list[TaskExample]:
    try:
        return load_split(_need(s, "data"), split)
    except ValidationError as exc:
        raise CliError("data", str(exc)) from None


def cmd_finetune(s: dict, run: Run) -> None:
    tok = BpeModel.load(_need(s, "tokenizer"))
    ckpt = Checkpoint.load(_need(s, "checkpoint"))
    if s["pattern"] or s["window"]:
        att = replace(ckpt.config.attention, kind=s["pattern"] or ckpt.config.attention.kind,
                      window=s["window"] or ckpt.config.attention.window)
        ckpt.config = replace(ckpt.config, attention=att)
    train = _load_task_split(s, "train")
    dev = _load_task_split(s, s["selection_split"])
    spec = tasks.TaskSpec.infer(train + dev, multilabel=s["multilabel"], pool=s["pool"])
    cfg = _train_config(s, lr=s["lr_sweep"][0] if s["lr_sweep"] else PRETRAIN_LR)
    run.manifest["task"] = spec.to_dict()
    run.manifest["selection"] = {"split": s["selection_split"],
                                 "metric": cfg.selection_metric or spec.selection_metric}
    run._write()
    best, record = finetune(ckpt, train, dev, cfg, tok, spec=spec,
                            on_epoch=lambda c: log.info("lr %(lr)g epoch %(epoch)d %(metric)s "
                                                        "%(value).4f", c))
    best.save(run.path("best.ckpt"))
    record.save(run.path("run.jsonl"))
    sel = record.selected
    body = {"task": spec.kind, "selection_split": s["selection_split"], "selected": sel,
            "cells": [{k: c[k] for k in ("lr", "epoch", "metric", "value")} for c in record.epochs]}
    run.path("metrics.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def cmd_evaluate(s: dict, run: Run, args: argparse.Namespace) -> None:
    tok = BpeModel.load(_need(s, "tokenizer"))
    ckpt = Checkpoint.load(_need(s, "checkpoint"))
    examples = _load_task_split(s, s["split"])
    meta = ckpt.meta
    if meta.get("kind") == "finetune":
        spec = tasks.TaskSpec.from_dict(meta["task"])
        # unless overridden on the command line, score with the fine-tuned regime
        if args.max_len is None:
            s["max_len"] = meta["max_len"]
        if args.mode is None:
            s["mode"] = meta["mode"]
        run.manifest["config"] = s
    else:
        spec = tasks.TaskSpec.infer(examples, multilabel=s["multilabel"], pool=s["pool"])
    model_cfg = ckpt.config
    if s["max_len"] > model_cfg.max_positions:
        raise CliError("max_len", f"{s['max_len']} exceeds the checkpoint's "
                                  f"max_positions={model_cfg.max_positions}")
    model = ckpt.to_model()
    if not model.has_head(spec.head):
        # an untrained head gives the chance-level reference point
        model.add_head(spec.head, spec.num_labels, seed=s["seed"])
        run.manifest["notes"] = [f"checkpoint has no {spec.head} head; initialised one at random"]
    report, preds = tasks.evaluate(model, spec, examples, tok, s["max_len"], s["mode"])
    run.path("metrics.json").write_text(report.to_json(), encoding="utf-8")
    run.path("predictions.json").write_text(json.dumps(preds) + "\n", encoding="utf-8")


def cmd_bench(s: dict, run: Run) -> None:
    unknown = [p for p in s["patterns"] if p not in PATTERN_KINDS]
    if unknown:
        raise CliError("patterns", f"unknown pattern {unknown[0]!r}")
    points = bench.run_sweep(s["patterns"], s["ns"], d=s["dim"], trials=s["trials"],
                             seed=s["seed"], heads=s["heads"], full_ceiling=s["full_ceiling"],
                             window=s["window"], n_globals=s["n_globals"],
                             block_size=s["block_size"], random_blocks=s["random_blocks"])
    run.path("bench.csv").write_text(bench.to_csv(points), encoding="utf-8")
    body = {"exponents": bench.fit_scaling(points) if len(s["ns"]) >= 3 else {},
            "notes": [p.note for p in points if p.note]}
    run.path("scaling.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


COMMANDS = {"gen-synthetic": cmd_gen_synthetic, "preprocess": cmd_preprocess,
            "train-tokenizer": cmd_train_tokenizer, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "bench": cmd_bench}

_INVALID = (CliError, ValueError, KeyError, ParseError, ValidationError, GenerationError,
            InitError, PatternError, LengthError, VocabError, MetricError, FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        run = Run(args, settings)
        if args.command == "evaluate":
            cmd_evaluate(settings, run, args)
        else:
            COMMANDS[args.command](settings, run)
        run.finish()
    except _INVALID as exc:
        field = getattr(exc, "field", None)
        msg = str(exc) if field else f"{type(exc).__name__}: {exc}"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
