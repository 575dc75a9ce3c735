"""Command-line driver: preprocess, train, eval, bench."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench, config, corpus, evaluate
from .checkpoint import load_checkpoint
from .model import build_model, parameter_count
from .trainer import TrainingDiverged, component_seeds, train


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    for opt in config.SCHEMA:
        parser.add_argument(f"--{opt.name.replace('_', '-')}", dest=f"opt_{opt.name}",
                            metavar="V", help=opt.help or argparse.SUPPRESS)


def _collect_overrides(args) -> dict:
    return {
        name[len("opt_"):]: value
        for name, value in vars(args).items()
        if name.startswith("opt_") and value is not None
    }


def _resolve(args) -> dict:
    if args.config:
        return config.load_config(args.config, _collect_overrides(args))
    return config.resolve(None, _collect_overrides(args))


def cmd_preprocess(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    stream = corpus.sentence_token_stream(corpus.read_sentences(args.input))
    vocab = corpus.build_vocab(stream, args.max_vocab)
    vocab_path = os.path.join(args.out_dir, "vocab.tsv")
    vocab.save(vocab_path)

    stats = {
        "vocab_size": vocab.size,
        "replaced_tokens": vocab.replaced_count,
        "unk_count": int(vocab.counts[vocab.unk_id]) if vocab.unk_id is not None else 0,
    }
    splits = {"train": args.input, "valid": args.valid, "test": args.test}
    for split, path in splits.items():
        if path is None:
            continue
        ids = corpus.encode_file(path, vocab)
        corpus.save_ids(os.path.join(args.out_dir, f"{split}.bin"), ids)
        unk = int(np.sum(ids == vocab.unk_id)) if vocab.unk_id is not None else 0
        stats[f"{split}_tokens"] = int(ids.size)
        stats[f"{split}_unk_rate"] = unk / ids.size if ids.size else 0.0
    with open(os.path.join(args.out_dir, "preprocess.json"), "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)

    print(f"vocab_size={vocab.size}")
    print(f"train_tokens={stats['train_tokens']}")
    print(f"train_unk_rate={stats['train_unk_rate']:.6g}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    missing = [k for k in ("vocab_file", "train_tokens") if not cfg[k]]
    if missing:
        raise config.ConfigError(
            "invalid configuration:\n  " + "\n  ".join(f"{k} is required for train" for k in missing)
        )
    vocab = corpus.Vocabulary.load(cfg["vocab_file"])
    train_ids = corpus.load_ids(cfg["train_tokens"])
    valid_ids = corpus.load_ids(cfg["valid_tokens"]) if cfg["valid_tokens"] else None

    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(config.serialize(cfg))

    mcfg = config.model_config(cfg, vocab.size)
    tcfg = config.train_config(cfg).validate()
    seeds = component_seeds(tcfg.seed)
    model = build_model(mcfg, np.random.default_rng(seeds["init"]), tcfg.precision)
    print(f"model={mcfg.architecture} params={model.num_params()} "
          f"(closed form {parameter_count(mcfg)})")
    state = train(model, tcfg, train_ids, vocab, valid_ids=valid_ids,
                  out_dir=out_dir, log_fn=print)
    print(f"done epochs={state.epoch} steps={state.step} words={state.words_processed} "
          f"checkpoint={os.path.join(out_dir, 'last.ckpt')}")
    return 0


def cmd_eval(args) -> int:
    model, train_cfg, _ = load_checkpoint(args.checkpoint)
    ids = corpus.load_ids(args.tokens)
    vocab = corpus.Vocabulary.load(args.vocab) if args.vocab else None
    batch_size = args.batch_size or train_cfg.get("batch_size", 64)
    report = evaluate.full_eval(
        model, ids,
        z=train_cfg.get("z_constant", 1.0),
        batch_size=batch_size,
        steps=train_cfg.get("bptt_steps", 20),
        vocab=vocab,
    )
    for line in report.lines():
        print(line)
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    rows = bench.throughput_bench(
        head_types=cfg["bench_heads"],
        vocab_sizes=cfg["bench_vocab_sizes"],
        hidden=cfg["bench_hidden"],
        batch=cfg["bench_batch"],
        embed_dim=cfg["bench_embed_dim"],
        bptt_steps=cfg["bench_bptt_steps"],
        window_steps=cfg["bench_window_steps"],
        windows=cfg["bench_windows"],
        warmup_steps=cfg["bench_warmup_steps"],
        z_constant=cfg["z_constant"],
        shared_k=cfg["shared_k"],
        seed=cfg["seed"],
        precision=cfg["precision"],
    )
    table = bench.format_bench_table(rows)
    print(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(table + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncelm",
                                     description="Train and evaluate word-level "
                                                 "neural language models with softmax "
                                                 "or NCE output heads.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build vocabulary and binary id streams")
    p.add_argument("--input", required=True, help="training text, one sentence per line")
    p.add_argument("--valid", help="validation text encoded with the training vocabulary")
    p.add_argument("--test", help="test text encoded with the training vocabulary")
    p.add_argument("--max-vocab", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", required=True, help="binary id stream to evaluate")
    p.add_argument("--vocab", help="vocabulary file, enables oov statistics")
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="training-throughput benchmark grid")
    _add_config_flags(p)
    p.add_argument("--out", help="write the table to this file as well")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except config.ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
