"""Perplexity under two normalization regimes, plus self-normalization stats.

ppl_full normalizes every context over the whole vocabulary (softmax);
ppl_nce divides the raw exponentiated score by the fixed constant Z without
renormalizing, so it measures how well the model self-normalizes rather than
a true probability. The gap between the per-context log normalizer and ln Z
is reported directly by normalizer_gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import corpus
from .model import LanguageModel


@dataclass
class EvalReport:
    ppl_n: float
    ppl_f: float | None
    tokens: int
    oov_count: int
    norm_gap_mean: float | None
    norm_gap_var: float | None

    @property
    def oov_rate(self) -> float:
        return self.oov_count / self.tokens if self.tokens else 0.0

    def lines(self):
        fmt = lambda v: "nan" if v is None else f"{v:.6g}"
        return [
            f"ppl_n={fmt(self.ppl_n)}",
            f"ppl_f={fmt(self.ppl_f)}",
            f"tokens={self.tokens}",
            f"oov_count={self.oov_count}",
            f"oov_rate={self.oov_rate:.6g}",
            f"norm_gap_mean={fmt(self.norm_gap_mean)}",
            f"norm_gap_var={fmt(self.norm_gap_var)}",
        ]


def _eval_batches(model: LanguageModel, ids, batch_size: int, steps: int, eos_id: int):
    """Forward-only pass yielding (hidden, targets) per timestep."""
    mode = "ngram" if model.config.architecture == "ffnn" else "sequential"
    if mode == "ngram":
        stream = corpus.ngram_batches(ids, batch_size, model.config.context_length, eos_id)
    else:
        stream = corpus.sequential_batches(ids, batch_size, steps)
    state = None
    for batch in stream:
        if state is None or batch.stream_start:
            state = model.body.init_state(batch.inputs.shape[0])
        hidden, state, _ = model.body.forward(batch.inputs, state)
        if batch.mode == "ngram":
            yield hidden[0], batch.targets
        else:
            for t, l in enumerate(hidden):
                yield l, batch.targets[:, t]


def full_eval(model: LanguageModel, ids, z: float, batch_size: int, steps: int = 20,
              vocab: corpus.Vocabulary | None = None, full: bool = True) -> EvalReport:
    """One pass computing ppl_n, and optionally ppl_f plus normalizer statistics."""
    ids = np.asarray(ids)
    eos_id = vocab.eos_id if vocab is not None else 0
    unk_id = vocab.unk_id if vocab is not None else None
    log_z = math.log(z)
    w, c = model.out_w, model.out_c
    w64 = w.astype(np.float64) if full else None
    c64 = c.astype(np.float64) if full else None
    nll_n = 0.0
    nll_f = 0.0
    tokens = 0
    oov = 0
    gaps = []
    for l, targets in _eval_batches(model, ids, batch_size, steps, eos_id):
        targets = np.asarray(targets, dtype=np.int64)
        l64 = l.astype(np.float64)
        tgt_scores = np.einsum("bh,hb->b", l64, w[:, targets].astype(np.float64))
        tgt_scores += c[0, targets].astype(np.float64)
        nll_n -= float(np.sum(tgt_scores - log_z))
        tokens += targets.size
        if unk_id is not None:
            oov += int(np.sum(targets == unk_id))
        if full:
            scores = l64 @ w64 + c64
            m = scores.max(axis=1)
            lse = m + np.log(np.exp(scores - m[:, None]).sum(axis=1))
            nll_f -= float(np.sum(tgt_scores - lse))
            gaps.append(lse - log_z)
    if tokens == 0:
        raise ValueError("evaluation stream produced no targets")
    gap_all = np.concatenate(gaps) if gaps else None
    return EvalReport(
        ppl_n=math.exp(nll_n / tokens),
        ppl_f=math.exp(nll_f / tokens) if full else None,
        tokens=tokens,
        oov_count=oov,
        norm_gap_mean=float(gap_all.mean()) if gap_all is not None else None,
        norm_gap_var=float(gap_all.var()) if gap_all is not None else None,
    )


def ppl_full(model: LanguageModel, ids, batch_size: int = 64, steps: int = 20,
             vocab=None) -> float:
    return full_eval(model, ids, z=1.0, batch_size=batch_size, steps=steps, vocab=vocab).ppl_f


def ppl_nce(model: LanguageModel, ids, z: float, batch_size: int = 64, steps: int = 20,
            vocab=None) -> float:
    """Perplexity from exp(score)/Z directly; no vocabulary-wide pass."""
    return full_eval(model, ids, z=z, batch_size=batch_size, steps=steps,
                     vocab=vocab, full=False).ppl_n


def normalizer_gap(model: LanguageModel, ids, z: float, batch_size: int = 64,
                   steps: int = 20, vocab=None) -> tuple[float, float]:
    """Mean and variance of ln(sum_v exp score(v|context)) - ln z over contexts."""
    report = full_eval(model, ids, z=z, batch_size=batch_size, steps=steps, vocab=vocab)
    return report.norm_gap_mean, report.norm_gap_var
