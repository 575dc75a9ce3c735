"""Corpus ingestion: vocabulary building, unigram noise, batch streams.

Input text is pre-tokenized, one sentence per line, whitespace separated.
A single end-of-sentence tag is appended to every sentence; no begin tag is
used. Vocabularies are capped to the most frequent tokens, with everything
else folded into the unknown tag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNK_TOKEN = "<unk>"
EOS_TOKEN = "</s>"

ID_DTYPE = np.uint32  # on-disk and in-memory token id type


@dataclass
class Vocabulary:
    """token<->id map with post-truncation training-corpus frequencies."""

    tokens: list[str]
    counts: np.ndarray  # int64, counts[id] = training frequency
    eos_id: int
    unk_id: int | None
    replaced_count: int | None = None  # tokens folded into <unk> while building
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def total_count(self) -> int:
        return int(self.counts.sum())

    def encode(self, tokens) -> np.ndarray:
        """Map tokens to ids; out-of-vocabulary tokens map to the unk id."""
        index = self.index
        unk = self.unk_id
        ids = np.empty(len(tokens), dtype=ID_DTYPE)
        for i, tok in enumerate(tokens):
            j = index.get(tok, unk)
            if j is None:
                raise ValueError(
                    f"token {tok!r} is out of vocabulary and the vocabulary has no {UNK_TOKEN}"
                )
            ids[i] = j
        return ids

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok, cnt in zip(self.tokens, self.counts):
                f.write(f"{tok}\t{int(cnt)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as f:
            for line in f:
                tok, cnt = line.rstrip("\n").split("\t")
                tokens.append(tok)
                counts.append(int(cnt))
        if EOS_TOKEN not in tokens:
            raise ValueError(f"vocabulary file {path} has no {EOS_TOKEN} entry")
        return cls(
            tokens=tokens,
            counts=np.asarray(counts, dtype=np.int64),
            eos_id=tokens.index(EOS_TOKEN),
            unk_id=tokens.index(UNK_TOKEN) if UNK_TOKEN in tokens else None,
        )


def read_sentences(path):
    """Yield token lists, one per non-empty line."""
    with open(path, encoding="utf-8") as f:
        for line in f:
            toks = line.split()
            if toks:
                yield toks


def sentence_token_stream(sentences):
    """Flatten sentences into a token stream with one eos tag per sentence."""
    for sent in sentences:
        yield from sent
        yield EOS_TOKEN


def build_vocab(token_stream, max_size: int) -> Vocabulary:
    """Keep the max_size most frequent tokens; fold the rest into <unk>.

    Ties are broken by first occurrence. The eos tag is always kept, and the
    unk tag occupies one of the max_size slots whenever any token is folded.
    When every distinct token fits, no unk entry is created.
    """
    if max_size < 2:
        raise ValueError(f"max_size must be at least 2, got {max_size}")
    counts: dict[str, int] = {}
    for tok in token_stream:
        counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise ValueError("empty token stream")
    if EOS_TOKEN not in counts:
        raise ValueError(f"token stream contains no {EOS_TOKEN} tag")

    items = list(counts.items())  # insertion order == first occurrence
    order = sorted(range(len(items)), key=lambda i: (-items[i][1], i))

    replaced = 0
    if len(items) <= max_size:
        kept = order
    else:
        # the unk entry takes one of the max_size slots unless the corpus
        # already has a frequent-enough literal unk token
        unk_in_top = any(items[i][0] == UNK_TOKEN for i in order[:max_size])
        budget = max_size if unk_in_top else max_size - 1
        kept, dropped = order[:budget], order[budget:]
        eos_pos = next(i for i in order if items[i][0] == EOS_TOKEN)
        if eos_pos not in kept:
            # evict the weakest kept token that is not itself protected
            for j in range(len(kept) - 1, -1, -1):
                if items[kept[j]][0] not in (EOS_TOKEN, UNK_TOKEN):
                    dropped.append(kept[j])
                    kept[j] = eos_pos
                    dropped.remove(eos_pos)
                    break
        replaced = sum(items[i][1] for i in dropped)

    final = [(items[i][0], items[i][1], i) for i in kept]
    if replaced:
        unk_entry = next((e for e in final if e[0] == UNK_TOKEN), None)
        if unk_entry is not None:
            final[final.index(unk_entry)] = (UNK_TOKEN, unk_entry[1] + replaced, unk_entry[2])
        else:
            final.append((UNK_TOKEN, replaced, len(items)))  # ties rank last
    final.sort(key=lambda e: (-e[1], e[2]))

    tokens = [e[0] for e in final]
    return Vocabulary(
        tokens=tokens,
        counts=np.asarray([e[1] for e in final], dtype=np.int64),
        eos_id=tokens.index(EOS_TOKEN),
        unk_id=tokens.index(UNK_TOKEN) if UNK_TOKEN in tokens else None,
        replaced_count=replaced,
    )


def encode_file(path, vocab: Vocabulary) -> np.ndarray:
    """Encode a text file to an id array, eos-terminated per sentence."""
    return vocab.encode(list(sentence_token_stream(read_sentences(path))))


def save_ids(path, ids) -> None:
    np.asarray(ids, dtype=ID_DTYPE).astype("<u4").tofile(path)


def load_ids(path) -> np.ndarray:
    return np.fromfile(path, dtype="<u4").astype(ID_DTYPE)


# ---------------------------------------------------------------------------
# Unigram noise distribution (Walker alias table for O(1) sampling)
# ---------------------------------------------------------------------------


class UnigramNoise:
    """Unigram distribution p[w] = count(w) / total, with alias-table sampling."""

    def __init__(self, probs):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probs must be a non-empty 1-D array")
        total = p.sum()
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError(f"probabilities sum to {total}, expected 1")
        self.p = p
        self._build_alias()

    def _build_alias(self):
        n = self.p.size
        scaled = self.p * n
        prob = np.ones(n)
        alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, l = small.pop(), large.pop()
            prob[s] = scaled[s]
            alias[s] = l
            scaled[l] -= 1.0 - scaled[s]
            (small if scaled[l] < 1.0 else large).append(l)
        # leftovers are 1.0 up to float error
        self._alias_prob = prob
        self._alias = alias

    @property
    def size(self) -> int:
        return self.p.size

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """Draw k ids iid with replacement."""
        if k < 0:
            raise ValueError(f"k must be non-negative, got {k}")
        if k == 0:
            return np.empty(0, dtype=np.int64)
        slots = rng.integers(0, self.size, size=k)
        keep = rng.random(k) < self._alias_prob[slots]
        return np.where(keep, slots, self._alias[slots]).astype(np.int64)


def unigram_distribution(vocab: Vocabulary) -> UnigramNoise:
    total = vocab.total_count
    if total <= 0:
        raise ValueError("vocabulary has no counts")
    return UnigramNoise(vocab.counts / total)


def sample_noise(noise: UnigramNoise, k: int, rng) -> np.ndarray:
    """k iid draws; rng may be a seed or a numpy Generator."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return noise.sample(k, rng)


# ---------------------------------------------------------------------------
# Batch streams
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Aligned inputs and targets for one optimizer step.

    ngram mode: inputs (B, context), targets (B,).
    sequential mode: inputs (B, steps), targets (B, steps), where column t of
    targets is the next token after column t of inputs inside each of the B
    contiguous corpus shards. stream_start marks the first window of a pass,
    where recurrent state must be reset.
    """

    mode: str
    inputs: np.ndarray
    targets: np.ndarray
    stream_start: bool = False

    @property
    def num_targets(self) -> int:
        return self.targets.size


def ngram_batches(ids, batch_size: int, context: int, eos_id: int, shuffle_rng=None):
    """Full-coverage n-gram batches: every position is a target exactly once.

    Initial context is padded with eos. A trailing remainder smaller than one
    batch is dropped. Pass a Generator to visit positions in shuffled order.
    """
    ids = np.asarray(ids)
    n = ids.size
    if n < batch_size:
        raise ValueError(f"corpus of {n} tokens is too small for batch size {batch_size}")
    padded = np.concatenate([np.full(context, eos_id, dtype=ids.dtype), ids])
    windows = np.lib.stride_tricks.sliding_window_view(padded, context)[:n]
    positions = np.arange(n)
    if shuffle_rng is not None:
        positions = shuffle_rng.permutation(n)
    usable = (n // batch_size) * batch_size
    for start in range(0, usable, batch_size):
        pos = positions[start : start + batch_size]
        yield Batch(
            mode="ngram",
            inputs=windows[pos],
            targets=ids[pos],
            stream_start=start == 0,
        )


def sequential_batches(ids, batch_size: int, steps: int):
    """Truncated-BPTT windows over B contiguous corpus shards.

    The corpus is split into B shards of S = floor(T/B) tokens; within each
    shard, position t predicts position t+1, giving S-1 targets per shard per
    epoch. Windows cover `steps` timesteps (the last may be shorter); hidden
    state carries across windows within one pass.
    """
    ids = np.asarray(ids)
    n = ids.size
    shard_len = n // batch_size
    if shard_len < 2:
        raise ValueError(
            f"corpus of {n} tokens is too small for {batch_size} shards with targets"
        )
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    shards = ids[: batch_size * shard_len].reshape(batch_size, shard_len)
    for t0 in range(0, shard_len - 1, steps):
        t1 = min(t0 + steps, shard_len - 1)
        yield Batch(
            mode="sequential",
            inputs=shards[:, t0:t1],
            targets=shards[:, t0 + 1 : t1 + 1],
            stream_start=t0 == 0,
        )


def batch_stream(ids, vocab: Vocabulary, mode: str, batch_size: int,
                 context: int = 4, steps: int = 20, shuffle_rng=None):
    if mode == "ngram":
        return ngram_batches(ids, batch_size, context, vocab.eos_id, shuffle_rng)
    if mode == "sequential":
        return sequential_batches(ids, batch_size, steps)
    raise ValueError(f"unknown batch mode {mode!r}")


def epoch_target_count(n_tokens: int, mode: str, batch_size: int) -> int:
    """Targets emitted per epoch; the rest is the documented boundary loss."""
    if mode == "ngram":
        return (n_tokens // batch_size) * batch_size
    return batch_size * (n_tokens // batch_size - 1)
