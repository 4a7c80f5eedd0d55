"""Filtered entity ranking and MR / MRR / Hits@k aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .encoder import BiEncoder, encode
from .kg import KnowledgeGraph, Triple, build_filter_index
from .text import SequenceCache

HITS_AT = (1, 3, 10)
_REL_TOL = 1e-12


@dataclass(frozen=True)
class RankingMetrics:
    MR: float
    MRR: float
    hits1: float
    hits3: float
    hits10: float
    n: int

    def check(self) -> None:
        """Raise if the report violates an ordering identity that must always hold."""
        if not (self.MR >= 1.0 and 0.0 < self.MRR <= 1.0):
            raise AssertionError(f"metrics out of range: {self}")
        if not (self.hits1 <= self.hits3 <= self.hits10):
            raise AssertionError(f"hits@k not monotone: {self}")
        if self.MRR < self.hits1:
            raise AssertionError(f"MRR below hits@1: {self}")
        # arithmetic-harmonic mean inequality, up to summation rounding
        if self.MRR < (1.0 / self.MR) * (1.0 - _REL_TOL):
            raise AssertionError(f"MRR below 1/MR: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(ranks: Iterable[int]) -> RankingMetrics:
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise ValueError("cannot compute metrics over zero ranks")
    if min(ranks) < 1:
        raise ValueError("ranks start at 1")
    n = len(ranks)
    hits = [sum(r <= k for r in ranks) / n for k in HITS_AT]
    metrics = RankingMetrics(
        MR=math.fsum(ranks) / n,
        MRR=math.fsum(1.0 / r for r in ranks) / n,
        hits1=hits[0],
        hits3=hits[1],
        hits10=hits[2],
        n=n,
    )
    metrics.check()
    return metrics


def unit_rows(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", e, e))
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding (degenerate encoder output)")
    return e / norms[:, None]


def similarity(hr_unit: np.ndarray, tail_unit: np.ndarray) -> np.ndarray:
    """Cosine scores of unit rows; element-wise identical whatever the batch shape."""
    return np.einsum("qd,ed->qe", hr_unit, tail_unit)


def rank_from_scores(scores: np.ndarray, true_tail: int, filter_set: Iterable[int] = ()) -> int:
    """1 + #(better) + #(ties other than the true tail), ignoring filtered candidates."""
    scores = np.array(scores, dtype=np.float64)
    true_score = scores[true_tail]
    filtered = np.fromiter((f for f in filter_set), dtype=np.int64)
    if true_tail in set(filtered.tolist()):
        raise ValueError("true tail is in the filter set")
    if filtered.size:
        scores[filtered] = -np.inf
    better = int(np.count_nonzero(scores > true_score))
    ties = int(np.count_nonzero(scores == true_score)) - 1
    return 1 + better + ties


def rank_entities(hr_embedding, all_tail_embeddings, true_tail: int, filter_set=()) -> int:
    hr_unit = unit_rows(np.asarray(hr_embedding)[None, :])
    scores = similarity(hr_unit, unit_rows(all_tail_embeddings))[0]
    return rank_from_scores(scores, true_tail, filter_set)


def batched_ranks(
    hr_unit: np.ndarray,
    tail_unit: np.ndarray,
    true_tails: Sequence[int],
    filter_sets: Sequence[Iterable[int]] | None,
    chunk: int = 256,
) -> np.ndarray:
    """Ranks for many queries at once; ``filter_sets=None`` gives raw ranks."""
    true_tails = np.asarray(true_tails, dtype=np.int64)
    out = np.empty(len(true_tails), dtype=np.int64)
    for start in range(0, len(true_tails), chunk):
        stop = min(start + chunk, len(true_tails))
        scores = similarity(hr_unit[start:stop], tail_unit)
        rows = np.arange(stop - start)
        true_scores = scores[rows, true_tails[start:stop]]
        if filter_sets is not None:
            for i in rows:
                fs = [f for f in filter_sets[start + i] if f != true_tails[start + i]]
                if fs:
                    scores[i, fs] = -np.inf
        better = (scores > true_scores[:, None]).sum(axis=1)
        ties = (scores == true_scores[:, None]).sum(axis=1) - 1
        out[start:stop] = 1 + better + ties
    return out


def encode_pooled(params, batch, batch_size: int = 256) -> np.ndarray:
    chunks = []
    for start in range(0, len(batch), batch_size):
        sub = batch.take(slice(start, start + batch_size))
        chunks.append(encode(params, sub).pooled.data)
    return np.concatenate(chunks, axis=0)


@dataclass
class QueryRank:
    triple: Triple
    direction: str
    raw_rank: int
    filtered_rank: int


class Evaluator:
    """Ranks a split's queries against every entity; tail embeddings are computed once per model."""

    def __init__(
        self,
        graph: KnowledgeGraph,
        sequences: SequenceCache,
        filter_index,
        filtered: bool = True,
        batch_size: int = 256,
    ):
        if not graph.augmented:
            raise ValueError("evaluation expects a graph augmented with inverse triples")
        self.graph = graph
        self.sequences = sequences
        self.filter_index = filter_index
        self.filtered = filtered
        self.batch_size = batch_size
        self._tail_batch = sequences.tail_batch(range(graph.num_entities))

    def tail_embeddings(self, model: BiEncoder) -> np.ndarray:
        return encode_pooled(model.tail, self._tail_batch, self.batch_size)

    def rank_split(
        self, model: BiEncoder, split: str, tail_unit: np.ndarray | None = None
    ) -> list[QueryRank]:
        triples = list(self.graph.splits[split])
        if not triples:
            raise ValueError(f"split {split!r} is empty")
        if tail_unit is None:
            tail_unit = unit_rows(self.tail_embeddings(model))
        hr_batch = self.sequences.hr_batch((t.head, t.relation) for t in triples)
        hr_unit = unit_rows(encode_pooled(model.hr, hr_batch, self.batch_size))
        truth = [t.tail for t in triples]
        raw = batched_ranks(hr_unit, tail_unit, truth, None)
        filters = [self.filter_index.get((t.head, t.relation), ()) for t in triples]
        filt = batched_ranks(hr_unit, tail_unit, truth, filters)
        base = self.graph.num_base_relations
        return [
            QueryRank(t, "head" if t.relation >= base else "tail", int(r), int(f))
            for t, r, f in zip(triples, raw, filt)
        ]

    def evaluate(self, model: BiEncoder, split: str) -> tuple[RankingMetrics, list[QueryRank]]:
        ranked = self.rank_split(model, split)
        ranks = [q.filtered_rank if self.filtered else q.raw_rank for q in ranked]
        return compute_metrics(ranks), ranked


def write_ranks_csv(path, graph: KnowledgeGraph, ranked: Sequence[QueryRank]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["head", "relation", "tail", "direction", "raw_rank", "filtered_rank"])
        for q in ranked:
            h, r, t = q.triple
            writer.writerow(
                [
                    graph.entities[h].key,
                    graph.relations[r].key,
                    graph.entities[t].key,
                    q.direction,
                    q.raw_rank,
                    q.filtered_rank,
                ]
            )


def evaluate_split(
    model: BiEncoder,
    graph: KnowledgeGraph,
    vocab,
    split: str,
    filtered: bool = True,
    batch_size: int = 256,
) -> RankingMetrics:
    """One-shot evaluation of ``model`` on a split of an augmented graph."""
    sequences = SequenceCache(graph, vocab, model.config.max_len)
    evaluator = Evaluator(graph, sequences, build_filter_index(graph), filtered, batch_size)
    return evaluator.evaluate(model, split)[0]
