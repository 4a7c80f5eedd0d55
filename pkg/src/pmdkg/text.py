"""Word-level vocabulary, fixed-length sequence construction and input masking."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kg import KnowledgeGraph

CLS, SEP, PAD, MASK, UNK = "[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]"
SPECIALS = (CLS, SEP, PAD, MASK, UNK)
CLS_ID, SEP_ID, PAD_ID, MASK_ID, UNK_ID = range(5)
MIN_MAX_LEN = 8

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, underscores and punctuation (kept as tokens)."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str], min_freq: int = 1):
        self.min_freq = min_freq
        self.itos: list[str] = list(SPECIALS) + list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, UNK_ID) for tok in tokenize(text)]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos[len(SPECIALS):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> Vocabulary:
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


def graph_texts(graph: KnowledgeGraph) -> Iterable[str]:
    for e in graph.entities:
        yield e.name
        if e.description != e.name:
            yield e.description
    for r in graph.relations:
        yield r.name


def build_vocab_from_texts(
    texts: Iterable[str], min_freq: int = 1, max_size: int | None = None
) -> Vocabulary:
    counts = Counter(tok for text in texts for tok in tokenize(text))
    for special in SPECIALS:
        counts.pop(special.lower(), None)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max(0, max_size - len(SPECIALS))]
    return Vocabulary(kept, min_freq=min_freq)


def build_vocab(graph: KnowledgeGraph, min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    return build_vocab_from_texts(graph_texts(graph), min_freq, max_size)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray        # (max_len,) int64
    attention: np.ndarray  # (max_len,) int8, 1 for real tokens
    maskable: np.ndarray   # (max_len,) int8, 1 for tokens eligible for masking

    def __len__(self) -> int:
        return len(self.ids)


def _pack(pieces: list[list[int]], max_len: int) -> TokenSequence:
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    flat = [tok for piece in pieces for tok in piece]
    ids[: len(flat)] = flat
    attention = (np.arange(max_len) < len(flat)).astype(np.int8)
    maskable = (attention.astype(bool) & (ids != CLS_ID) & (ids != SEP_ID)).astype(np.int8)
    return TokenSequence(ids, attention, maskable)


def _fit(name: list[int], desc: list[int], fixed: int, max_len: int) -> tuple[list[int], list[int]]:
    budget = max_len - fixed
    name = name[:budget]
    return name, desc[: max(0, budget - len(name))]


def _check_len(max_len: int) -> None:
    if max_len < MIN_MAX_LEN:
        raise ValueError(f"max_len must be at least {MIN_MAX_LEN}, got {max_len}")


def _entity_tokens(graph: KnowledgeGraph, entity: int, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    e = graph.entities[entity]
    name = vocab.encode(e.name)
    desc = vocab.encode(e.description) if e.description != e.name else []
    if not name and not desc:
        raise ValueError(f"entity {e.key!r} has no usable text")
    return name, desc


def build_hr_sequence(
    graph: KnowledgeGraph, head: int, relation: int, vocab: Vocabulary, max_len: int
) -> TokenSequence:
    """CLS name description SEP relation SEP, truncating the description first."""
    _check_len(max_len)
    name, desc = _entity_tokens(graph, head, vocab)
    rel = vocab.encode(graph.relations[relation].name)
    rel = rel[: max_len // 2]
    name, desc = _fit(name, desc, 3 + len(rel), max_len)
    return _pack([[CLS_ID], name, desc, [SEP_ID], rel, [SEP_ID]], max_len)


def build_tail_sequence(
    graph: KnowledgeGraph, tail: int, vocab: Vocabulary, max_len: int
) -> TokenSequence:
    """CLS name description SEP, truncating the description first."""
    _check_len(max_len)
    name, desc = _entity_tokens(graph, tail, vocab)
    name, desc = _fit(name, desc, 2, max_len)
    return _pack([[CLS_ID], name, desc, [SEP_ID]], max_len)


@dataclass(frozen=True)
class SequenceBatch:
    ids: np.ndarray        # (B, T)
    attention: np.ndarray  # (B, T)
    maskable: np.ndarray   # (B, T)

    @classmethod
    def stack(cls, seqs: Sequence[TokenSequence]) -> SequenceBatch:
        return cls(
            np.stack([s.ids for s in seqs]),
            np.stack([s.attention for s in seqs]),
            np.stack([s.maskable for s in seqs]),
        )

    def __len__(self) -> int:
        return self.ids.shape[0]

    def take(self, index) -> SequenceBatch:
        return SequenceBatch(self.ids[index], self.attention[index], self.maskable[index])


@dataclass(frozen=True)
class MaskedBatch:
    """Inputs for one training step, shared by the teacher and student forward passes."""

    hr: SequenceBatch
    tail: SequenceBatch
    hr_masked: np.ndarray    # (B, T) bool
    tail_masked: np.ndarray  # (B, T) bool
    rate: float

    @property
    def num_masked(self) -> int:
        return int(self.hr_masked.sum() + self.tail_masked.sum())

    def masked_positions(self, tower: str = "hr") -> list[list[int]]:
        mask = self.hr_masked if tower == "hr" else self.tail_masked
        return [np.flatnonzero(row).tolist() for row in mask]


def mask_sequences(batch: SequenceBatch, rate: float, rng: np.random.Generator):
    """Replace each maskable token by MASK independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must lie in [0, 1], got {rate}")
    eligible = batch.maskable.astype(bool)
    if rate == 0.0:
        return batch, np.zeros_like(eligible)
    chosen = (rng.random(batch.ids.shape) < rate) & eligible
    ids = np.where(chosen, MASK_ID, batch.ids)
    return SequenceBatch(ids, batch.attention, batch.maskable), chosen


def apply_mask(
    hr: SequenceBatch,
    tail: SequenceBatch,
    rate: float,
    rng: np.random.Generator,
    mask_tail: bool = True,
) -> MaskedBatch:
    masked_hr, hr_chosen = mask_sequences(hr, rate, rng)
    if mask_tail:
        masked_tail, tail_chosen = mask_sequences(tail, rate, rng)
    else:
        masked_tail, tail_chosen = tail, np.zeros(tail.ids.shape, dtype=bool)
    return MaskedBatch(masked_hr, masked_tail, hr_chosen, tail_chosen, float(rate))


class SequenceCache:
    """Builds and memoizes token sequences for a graph."""

    def __init__(self, graph: KnowledgeGraph, vocab: Vocabulary, max_len: int):
        _check_len(max_len)
        self.graph, self.vocab, self.max_len = graph, vocab, max_len
        self._hr: dict[tuple[int, int], TokenSequence] = {}
        self._tail: dict[int, TokenSequence] = {}

    def hr(self, head: int, relation: int) -> TokenSequence:
        key = (head, relation)
        if key not in self._hr:
            self._hr[key] = build_hr_sequence(self.graph, head, relation, self.vocab, self.max_len)
        return self._hr[key]

    def tail(self, entity: int) -> TokenSequence:
        if entity not in self._tail:
            self._tail[entity] = build_tail_sequence(self.graph, entity, self.vocab, self.max_len)
        return self._tail[entity]

    def hr_batch(self, pairs: Iterable[tuple[int, int]]) -> SequenceBatch:
        return SequenceBatch.stack([self.hr(h, r) for h, r in pairs])

    def tail_batch(self, entities: Iterable[int]) -> SequenceBatch:
        return SequenceBatch.stack([self.tail(int(e)) for e in entities])
