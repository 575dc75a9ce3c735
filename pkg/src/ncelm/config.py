"""Flat key = value run configuration with typed schema and full validation.

Config files are human-editable text: one `key = value` per line, `#` starts
a comment, list values are comma separated. Command-line flags override file
values. Every resolution error is collected and reported at once, and the
effective config can be serialized back to text (parse -> serialize -> parse
is the identity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .heads import HEAD_TYPES
from .model import ARCHITECTURES, ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """One or more invalid config fields; the message lists all of them."""


@dataclass(frozen=True)
class Option:
    name: str
    kind: str  # int | float | str | bool | int_list | str_list
    default: object
    help: str = ""
    choices: tuple = ()


SCHEMA = [
    # model shape
    Option("architecture", "str", "rnn", "network body", ARCHITECTURES),
    Option("embed_dim", "int", 128, "word embedding width"),
    Option("hidden_dims", "int_list", (600,), "ffnn fully-connected widths"),
    Option("recurrent_dim", "int", 256, "recurrent layer width"),
    Option("bottleneck_dim", "int", 0, "ReLU bottleneck before the output layer; 0 disables"),
    Option("context_length", "int", 4, "ffnn context tokens (n-1)"),
    # training
    Option("head_type", "str", "bnce", "output layer strategy", HEAD_TYPES),
    Option("batch_size", "int", 128),
    Option("initial_lr", "float", 0.4),
    Option("clip_threshold", "float", 5.0, "global gradient-norm clip"),
    Option("z_constant", "float", math.exp(9.0), "fixed NCE normalizer"),
    Option("shared_k", "int", 0, "extra shared noise samples (snce / adaptive bnce)"),
    Option("max_epochs", "int", 10),
    Option("patience_epochs", "int", 7, "stalled validation epochs before halving the lr"),
    Option("seed", "int", 12345),
    Option("precision", "str", "float32", "", ("float32", "float64")),
    Option("bptt_steps", "int", 20, "truncated backprop window"),
    Option("log_interval", "int", 200, "optimizer steps between metric lines"),
    Option("val_metric", "str", "auto", "", ("auto", "ppl_n", "ppl_f")),
    Option("val_full_each_epoch", "bool", True, "compute full-softmax ppl every epoch"),
    # paths
    Option("vocab_file", "str", ""),
    Option("train_tokens", "str", ""),
    Option("valid_tokens", "str", ""),
    Option("out_dir", "str", "run"),
    # benchmark grid
    Option("bench_heads", "str_list", ("softmax", "bnce")),
    Option("bench_vocab_sizes", "int_list", (1000, 10000, 50000)),
    Option("bench_hidden", "int", 128),
    Option("bench_batch", "int", 128),
    Option("bench_embed_dim", "int", 64),
    Option("bench_bptt_steps", "int", 10),
    Option("bench_window_steps", "int", 30),
    Option("bench_windows", "int", 5),
    Option("bench_warmup_steps", "int", 20),
]

_BY_NAME = {o.name: o for o in SCHEMA}


def _parse_value(opt: Option, raw: str):
    raw = raw.strip()
    if opt.kind == "int":
        return int(raw)
    if opt.kind == "float":
        return float(raw)
    if opt.kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if opt.kind == "int_list":
        return tuple(int(x) for x in raw.split(",")) if raw else ()
    if opt.kind == "str_list":
        return tuple(x.strip() for x in raw.split(",")) if raw else ()
    return raw


def _format_value(opt: Option, value) -> str:
    if opt.kind in ("int_list", "str_list"):
        return ",".join(str(x) for x in value)
    if opt.kind == "bool":
        return "true" if value else "false"
    if opt.kind == "float":
        return repr(float(value))
    return str(value)


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings from config-file text."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def resolve(file_values: dict[str, str] | None = None,
            overrides: dict[str, str] | None = None) -> dict:
    """Defaults, then config-file values, then flag overrides; typed and validated."""
    cfg = {o.name: o.default for o in SCHEMA}
    problems = []
    for source_name, source in (("config file", file_values), ("flag", overrides)):
        if not source:
            continue
        for key, raw in source.items():
            opt = _BY_NAME.get(key)
            if opt is None:
                problems.append(f"{source_name}: unknown option {key!r}")
                continue
            try:
                value = _parse_value(opt, str(raw))
            except ValueError as exc:
                problems.append(f"{source_name}: {key}: {exc}")
                continue
            if opt.choices and value not in opt.choices:
                problems.append(
                    f"{source_name}: {key} must be one of {list(opt.choices)}, got {value!r}"
                )
                continue
            cfg[key] = value
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def load_config(path, overrides=None) -> dict:
    with open(path, encoding="utf-8") as f:
        file_values = parse_config_text(f.read())
    return resolve(file_values, overrides)


def serialize(cfg: dict) -> str:
    lines = [f"{o.name} = {_format_value(o, cfg[o.name])}" for o in SCHEMA]
    return "\n".join(lines) + "\n"


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        architecture=cfg["architecture"],
        vocab_size=vocab_size,
        embed_dim=cfg["embed_dim"],
        hidden_dims=tuple(cfg["hidden_dims"]),
        recurrent_dim=cfg["recurrent_dim"],
        bottleneck_dim=cfg["bottleneck_dim"] or None,
        context_length=cfg["context_length"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        head_type=cfg["head_type"],
        batch_size=cfg["batch_size"],
        initial_lr=cfg["initial_lr"],
        clip_threshold=cfg["clip_threshold"],
        z_constant=cfg["z_constant"],
        shared_k=cfg["shared_k"],
        max_epochs=cfg["max_epochs"],
        patience_epochs=cfg["patience_epochs"],
        seed=cfg["seed"],
        precision=cfg["precision"],
        bptt_steps=cfg["bptt_steps"],
        log_interval=cfg["log_interval"],
        val_metric=cfg["val_metric"],
        val_full_each_epoch=cfg["val_full_each_epoch"],
    )
