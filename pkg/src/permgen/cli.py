"""``permgen`` command line: train, generate, evaluate, inspect.

Exit codes are part of the interface: 0 success, 1 configuration error,
2 data or I/O error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import toy
from .checkpoint import CheckpointError, is_checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .corpus import (CorpusError, Vocabulary, detokenize, encode_record, parse_source, read_jsonl,
                     split_sentences, tokenize, vocabulary_from_records)
from .decode import DecodeConfigError, decode_paragraph
from .metrics import evaluate_groups
from .model import Seq2Seq
from .sequence import GrammarError, Permutation, build_decoder_sequence
from .train import Trainer, TrainingError, evaluate_nll, resume, snapshot

log = logging.getLogger("permgen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

GENERATION_SCHEMA = {
    "type": "object",
    "required": ["source", "candidates", "config_hash"],
    "properties": {
        "source": {"type": ["string", "array"]},
        "config_hash": {"type": "string"},
        "checkpoint_config_hash": {"type": ["string", "null"]},
        "candidates": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["sentences", "order", "score", "truncated"],
                "properties": {
                    "sentences": {"type": "array", "items": {"type": "string"}},
                    "order": {"type": "array", "items": {"type": "integer", "minimum": 1}, "uniqueItems": True},
                    "score": {"type": "number"},
                    "truncated": {"type": "boolean"},
                    "metadata": {"type": "object"},
                },
            },
        },
    },
}


class DataError(Exception):
    """Bad or missing input files; maps to exit code 2."""


def _threadpool_limit(threads: int):
    if threads != 1:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _read_records(path, require_sentences=True):
    try:
        return read_jsonl(path, require_sentences)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except CorpusError as exc:
        raise DataError(f"{path}: {exc}") from None


def _write_jsonl(path, rows) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _parse_order(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"order must be comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# configuration


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    flag_keys = {
        "seed": "seed", "threads": "threads", "k": "decode.k", "strategy": "decode.strategy",
        "beam_width": "decode.beam_width", "top_k": "decode.top_k", "top_p": "decode.top_p",
        "temperature": "decode.temperature", "max_steps": "train.max_steps",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "force_order", None) is not None:
        overrides["decode.force_order"] = _parse_order(args.force_order)
    if getattr(args, "uniform_first", False):
        overrides["decode.uniform_first"] = True
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = json.loads(value) if value[:1] in "[{\"" or value in ("null",) else value
    return cfg.update(overrides)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = build_config(args)
    if args.train:
        cfg.update({"paths.train": args.train})
    if args.dev:
        cfg.update({"paths.dev": args.dev})
    if args.out:
        cfg.update({"paths.out": args.out})
    if not cfg["paths.train"]:
        raise ConfigError("no training corpus given (--train or paths.train)")
    if not cfg["paths.out"]:
        raise ConfigError("no output directory given (--out or paths.out)")
    tcfg = cfg.train_config()
    out = Path(cfg["paths.out"])
    records = _read_records(cfg["paths.train"])
    if not records:
        raise DataError(f"{cfg['paths.train']}: corpus is empty")
    dev_records = _read_records(cfg["paths.dev"]) if cfg["paths.dev"] else []

    if args.resume:
        vocab = _load_vocab(Path(args.resume).parent / "vocab.txt")
        ckpt = _load_ckpt(args.resume, vocab.hash)
        data = [encode_record(r, vocab) for r in records]
        trainer = resume(ckpt, data, tcfg)
    else:
        vocab = vocabulary_from_records(records, cfg["train.min_freq"])
        data = [encode_record(r, vocab) for r in records]
        mcfg = cfg.model_config(len(vocab))
        model = Seq2Seq(mcfg, rng=np.random.default_rng(cfg["seed"]))
        trainer = Trainer(model, data, tcfg)
    dev = [encode_record(r, vocab) for r in dev_records]

    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    chash = cfg.hash
    log_rows: list[dict] = []
    log_path = out / "train_log.jsonl"
    mode = "a" if args.resume else "w"

    def dev_row(step: int) -> dict:
        row = {"step": step, "dev_nll": evaluate_nll(trainer.model, dev, seed=cfg["seed"]), "config_hash": chash}
        log.info("step %d dev_nll %.4f", step, row["dev_nll"])
        return row

    with _threadpool_limit(cfg["threads"]), log_path.open(mode, encoding="utf-8") as fh:
        def emit(row: dict) -> None:
            log_rows.append(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")

        if dev and trainer.step_count == 0:
            emit(dev_row(0))
        eval_every, save_every = cfg["train.eval_every"], cfg["train.save_every"]

        def on_step(m) -> None:
            emit({"step": m.step, "loss": m.loss, "lr": m.lr, "pi_sample": m.orders, "config_hash": chash})
            log.debug("step %d loss %.4f lr %.2e", m.step, m.loss, m.lr)
            if dev and eval_every > 0 and m.step % eval_every == 0 and m.step != tcfg.max_steps:
                emit(dev_row(m.step))
            if save_every > 0 and m.step % save_every == 0:
                save_checkpoint(out / f"checkpoint-{m.step:06d}.pgen",
                                snapshot(trainer, vocab.hash, cfg.to_dict(), chash))

        try:
            trainer.run(tcfg.max_steps, on_step)
        except TrainingError as exc:
            save_checkpoint(out / "checkpoint-failed.pgen", snapshot(trainer, vocab.hash, cfg.to_dict(), chash))
            log.error("%s", exc)
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if dev:
            emit(dev_row(trainer.step_count))
    save_checkpoint(out / "checkpoint.pgen", snapshot(trainer, vocab.hash, cfg.to_dict(), chash))
    if not args.no_plot and log_rows:
        from .plotting import plot_training_log

        plot_training_log(log_rows, out / "loss.png")
    print(json.dumps({"out": str(out), "steps": trainer.step_count, "config_hash": chash,
                      "final_loss": next((r["loss"] for r in reversed(log_rows) if "loss" in r), None),
                      "final_dev_nll": next((r["dev_nll"] for r in reversed(log_rows) if "dev_nll" in r), None)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate


def _load_vocab(path) -> Vocabulary:
    try:
        return Vocabulary.load(path)
    except OSError as exc:
        raise DataError(f"cannot read vocabulary {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise DataError(f"bad vocabulary {path}: {exc}") from None


def _load_ckpt(path, vocab_hash=None):
    try:
        return load_checkpoint(path, vocab_hash)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None


def generation_row(source, cands, vocab: Vocabulary, chash: str, ckpt_hash, forced) -> dict:
    rows = []
    for c in cands:
        meta = dict(c.metadata)
        if forced is not None:
            meta["reordered_from"] = list(c.order)
        rows.append({
            "sentences": [detokenize(vocab.decode(s)) for s in c.sentences],
            "order": list(c.order),
            "score": c.score,
            "truncated": c.truncated,
            "metadata": meta,
        })
    return {"source": source, "candidates": rows, "config_hash": chash, "checkpoint_config_hash": ckpt_hash}


def cmd_generate(args) -> int:
    cfg = build_config(args)
    dcfg = cfg.decode_config()
    vocab_path = args.vocab or Path(args.checkpoint).parent / "vocab.txt"
    vocab = _load_vocab(vocab_path)
    ckpt = _load_ckpt(args.checkpoint, vocab.hash)
    model = ckpt.model()
    records = _read_records(args.inputs, require_sentences=False)
    try:
        raw = [json.loads(line) for line in Path(args.inputs).read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {args.inputs}: {exc.strerror}") from None
    chash = cfg.hash
    rows = []
    with _threadpool_limit(cfg["threads"]):
        for rec, obj in zip(records, raw):
            cands = decode_paragraph(model, vocab.encode(rec.source), dcfg)
            rows.append(generation_row(obj["input"], cands, vocab, chash, ckpt.config_hash, dcfg.force_order))
    if args.out:
        _write_jsonl(args.out, rows)
    else:
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _hyp_tokens(sentences: list[str]) -> list[str]:
    return [t for s in sentences for t in tokenize(s)]


def cmd_evaluate(args) -> int:
    cfg = build_config(args)
    try:
        gens = [json.loads(line) for line in Path(args.generations).read_text(encoding="utf-8").splitlines()
                if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {args.generations}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.generations}: malformed JSON ({exc.msg})") from None
    refs = _read_records(args.references)
    if len(gens) != len(refs):
        extra = range(min(len(gens), len(refs)), max(len(gens), len(refs)))
        raise DataError(f"{len(gens)} generation rows but {len(refs)} references; "
                        f"unmatched source ids: {list(extra)}")
    bad = []
    for i, (g, r) in enumerate(zip(gens, refs)):
        src = g.get("source")
        src_tokens = tokenize(src) if isinstance(src, str) else None
        if isinstance(src, list):
            src_tokens = parse_source(src, i + 1)
        if src_tokens is not None and src_tokens != r.source:
            bad.append(i)
        if not g.get("candidates"):
            bad.append(i)
    if bad:
        raise DataError(f"misaligned or empty rows at source ids: {sorted(set(bad))}")
    groups = [([_hyp_tokens(c["sentences"]) for c in g["candidates"]], [t for s in r.sentences for t in s])
              for g, r in zip(gens, refs)]
    hashes = sorted({g.get("config_hash") for g in gens if g.get("config_hash")})
    report = evaluate_groups(groups, cfg["eval.self_bleu_mode"],
                             config={"config_hash": cfg.hash, "generation_config_hashes": hashes})
    table = report.table()
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = report.to_dict()
        payload["config_hash"] = cfg.hash
        (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        (out / "report.txt").write_text(table + "\n")
        if not args.no_plot:
            from .plotting import plot_metrics

            plot_metrics(report.scalars, out / "metrics.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect


def render_sequence(tokens: list[str], gpos, lpos) -> str:
    """Three aligned rows: tokens, global positions, local positions."""
    cols = [max(len(t), len(str(g)), len(str(l))) for t, g, l in zip(tokens, gpos, lpos)]
    rows = [("token", tokens), ("global", gpos), ("local", lpos)]
    return "\n".join(f"{name:<6} " + " ".join(f"{str(v):>{w}}" for v, w in zip(vals, cols)) for name, vals in rows)


def checkpoint_summary(ckpt) -> str:
    lines = [f"step {ckpt.step}  optimizer {ckpt.optimizer_kind}  vocab {ckpt.vocab_hash[:12]}  "
             f"config {ckpt.config_hash}"]
    width = max(len(k) for k in ckpt.params)
    for name, arr in ckpt.params.items():
        lines.append(f"{name:<{width}}  {str(arr.shape):<14} norm {float(np.linalg.norm(arr)):.4f}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if is_checkpoint(path):
        print(checkpoint_summary(_load_ckpt(path)))
        return EXIT_OK
    records = _read_records(path)
    if not 0 <= args.index < len(records):
        raise DataError(f"{path}: record index {args.index} out of range (have {len(records)})")
    rec = records[args.index]
    vocab = Vocabulary.load(args.vocab) if args.vocab else vocabulary_from_records(records)
    p = encode_record(rec, vocab)
    order = Permutation(tuple(_parse_order(args.order))) if args.order else Permutation.identity(p.T)
    try:
        seq = build_decoder_sequence(p, order)
    except (GrammarError, ValueError) as exc:
        raise DataError(str(exc)) from None
    print(render_sequence(vocab.decode(seq.tokens), seq.global_pos, seq.local_pos))
    return EXIT_OK


# ---------------------------------------------------------------------------
# helpers: toy corpus, raw-text import


def cmd_toy(args) -> int:
    rows = toy.overfit_corpus() if args.overfit else toy.generate_corpus(args.n, args.seed, args.min, args.max)
    toy.write_jsonl(rows, args.out)
    print(json.dumps({"out": args.out, "records": len(rows)}))
    return EXIT_OK


def cmd_import(args) -> int:
    """Tab-separated ``input<TAB>paragraph`` lines to JSONL, splitting sentences on . ? !"""
    try:
        lines = Path(args.raw).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {args.raw}: {exc.strerror}") from None
    rows, skipped = [], 0
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        source, sep, text = line.partition("\t")
        if not sep:
            raise DataError(f"{args.raw}:{i}: expected input<TAB>paragraph")
        sentences = split_sentences(text)
        if not sentences or len(sentences) > args.max_sentences:
            skipped += 1
            continue
        rows.append({"input": source.strip(), "sentences": sentences})
    _write_jsonl(args.out, rows)
    print(json.dumps({"out": args.out, "records": len(rows), "skipped": skipped}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def _add_decode(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="candidates per input")
    p.add_argument("--strategy", choices=["beam", "topk", "nucleus", "greedy"])
    p.add_argument("--beam-width", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--top-p", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--force-order", help="comma-separated sentence indices, e.g. 2,1,3")
    p.add_argument("--uniform-first", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="permgen", description="Sentence-permuted paragraph generation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model with sampled sentence orders")
    _add_common(p)
    p.add_argument("--train", help="training corpus (JSONL)")
    p.add_argument("--dev", help="dev corpus (JSONL) for periodic NLL")
    p.add_argument("--out", help="run directory")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode K candidates per input")
    _add_common(p)
    _add_decode(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="defaults to vocab.txt next to the checkpoint")
    p.add_argument("--inputs", required=True, help='JSONL with an "input" field per line')
    p.add_argument("--out", help="output JSONL (stdout if omitted)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="accuracy and diversity metrics")
    _add_common(p)
    p.add_argument("--generations", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out", help="report directory (report.json, report.txt, metrics.png)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="dump a checkpoint or a decoder sequence")
    p.add_argument("path")
    p.add_argument("--index", type=int, default=0, help="record to render from a JSONL corpus")
    p.add_argument("--order", help="sentence order for the rendered sequence")
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("toy", help="write the synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min", type=int, default=3)
    p.add_argument("--max", type=int, default=5)
    p.add_argument("--overfit", action="store_true", help="the fixed 8-paragraph memorisation set")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("import", help="convert input<TAB>paragraph text to JSONL")
    p.add_argument("raw")
    p.add_argument("--out", required=True)
    p.add_argument("--max-sentences", type=int, default=10)
    p.set_defaults(func=cmd_import)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("PERMGEN_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DecodeConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorpusError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
