"""Training-throughput benchmark over synthetic Zipf corpora.

Speed runs need no dataset: token ids are sampled from a configurable Zipf
distribution, optionally with first-order structure (each token draws its
successor from a small token-specific candidate list part of the time) so
recurrent models have something real to learn. Words/sec is the number of
target words consumed by optimizer steps per wall-clock second, measured as
the median over several timed windows after a warm-up.
"""

from __future__ import annotations

import time

import numpy as np

from .corpus import UnigramNoise, sequential_batches
from .heads import NceConfig
from .model import ModelConfig, build_model
from .trainer import step_batch


def zipf_probs(n_types: int, exponent: float = 1.0) -> np.ndarray:
    ranks = np.arange(1, n_types + 1, dtype=np.float64)
    p = ranks ** -exponent
    return p / p.sum()


def synthetic_ids(n_tokens: int, n_types: int, rng: np.random.Generator,
                  exponent: float = 1.0, markov_weight: float = 0.0,
                  markov_fanout: int = 16) -> np.ndarray:
    """Sample a token-id stream from a Zipf unigram, optionally Markov-structured.

    With markov_weight > 0, each position follows one of its predecessor's
    markov_fanout preferred successors with that probability, falling back to
    the global Zipf draw otherwise. Conditional structure lowers the stream's
    conditional entropy without changing the Zipf shape of the marginal much.
    """
    p = zipf_probs(n_types, exponent)
    base = rng.choice(n_types, size=n_tokens, p=p)
    if markov_weight <= 0.0:
        return base.astype(np.int64)
    succ = rng.choice(n_types, size=(n_types, markov_fanout), p=p)
    follow = rng.random(n_tokens) < markov_weight
    slot = rng.integers(0, markov_fanout, size=n_tokens)
    out = np.empty(n_tokens, dtype=np.int64)
    prev = int(base[0])
    out[0] = prev
    for i in range(1, n_tokens):
        prev = int(succ[prev, slot[i]]) if follow[i] else int(base[i])
        out[i] = prev
    return out


def write_synthetic_text(path, n_tokens: int, n_types: int, seed: int,
                         exponent: float = 1.0, line_tokens: int = 18,
                         markov_weight: float = 0.0, markov_fanout: int = 16) -> None:
    """Write a synthetic corpus as text: one pseudo-sentence per line."""
    rng = np.random.default_rng(seed)
    ids = synthetic_ids(n_tokens, n_types, rng, exponent, markov_weight, markov_fanout)
    with open(path, "w", encoding="utf-8") as f:
        for start in range(0, len(ids), line_tokens):
            f.write(" ".join(f"w{i:05d}" for i in ids[start : start + line_tokens]))
            f.write("\n")


def throughput_bench(head_types, vocab_sizes, hidden: int = 128, batch: int = 128,
                     embed_dim: int = 64, bptt_steps: int = 10, window_steps: int = 30,
                     windows: int = 5, warmup_steps: int = 20, lr: float = 0.1,
                     clip_threshold: float = 5.0, z_constant: float = 8103.083927575384,
                     shared_k: int = 0, seed: int = 0, precision: str = "float32",
                     exponent: float = 1.0):
    """Measure words/sec per (head type, vocabulary size) on a recurrent body.

    Returns a list of row dicts. Setup (model building, corpus sampling) is
    excluded from the timed windows; the reported wps is the median window.
    """
    if windows < 1 or window_steps < 1:
        raise ValueError("need at least one timed window of at least one step")
    rows = []
    steps_needed = warmup_steps + windows * window_steps
    for v in vocab_sizes:
        rng = np.random.default_rng(seed)
        n_tokens = batch * (steps_needed * bptt_steps + 1)
        ids = synthetic_ids(n_tokens, v, rng, exponent)
        counts = np.bincount(ids, minlength=v).astype(np.float64)
        noise = UnigramNoise(counts / counts.sum())
        for head in head_types:
            model = build_model(
                ModelConfig(architecture="rnn", vocab_size=v, embed_dim=embed_dim,
                            recurrent_dim=hidden),
                np.random.default_rng(seed), precision,
            )
            nce_cfg = None
            if head != "softmax":
                nce_cfg = NceConfig(z_constant=z_constant, noise=noise, shared_k=shared_k)
            noise_rng = np.random.default_rng(seed + 1)
            stream = sequential_batches(ids, batch, bptt_steps)
            state = None
            wps_samples = []
            done = 0
            window_words = 0
            t0 = time.perf_counter() if warmup_steps == 0 else None
            for b in stream:
                state, _, n_targets, _ = step_batch(
                    model, b, state, head, nce_cfg, lr, clip_threshold, noise_rng
                )
                done += 1
                if done == warmup_steps:
                    t0 = time.perf_counter()
                    window_words = 0
                elif done > warmup_steps:
                    window_words += n_targets
                    if (done - warmup_steps) % window_steps == 0:
                        t1 = time.perf_counter()
                        wps_samples.append(window_words / (t1 - t0))
                        t0, window_words = t1, 0
                        if len(wps_samples) == windows:
                            break
            if len(wps_samples) < windows:
                raise ValueError("synthetic corpus too short for the requested windows")
            rows.append({
                "head": head,
                "vocab_size": v,
                "hidden": hidden,
                "batch": batch,
                "wps": float(np.median(wps_samples)),
            })
    return rows


def format_bench_table(rows) -> str:
    """Tab-separated table with a header row."""
    lines = ["head\tvocab_size\thidden\tbatch\twps"]
    for r in rows:
        lines.append(f"{r['head']}\t{r['vocab_size']}\t{r['hidden']}\t{r['batch']}\t{r['wps']:.0f}")
    return "\n".join(lines)
