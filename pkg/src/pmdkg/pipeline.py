"""Baseline training, pre-distillation and grade-by-grade progressive distillation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .autograd import NonFiniteError, Tensor, check_finite
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .distill import (
    DistillWeights,
    FeaturePair,
    combined_loss,
    lkd_loss,
    mgfd_loss,
    pkd_loss,
    score_distill_loss,
)
from .encoder import (
    TOWERS,
    BiEncoder,
    EncoderConfig,
    as_leaves,
    count_bi_encoder_params,
    forward,
    init_bi_encoder,
    layer_map,
    pool,
    select_bi_encoder_layers,
)
from .evaluation import Evaluator, RankingMetrics, evaluate_split, write_ranks_csv
from .kg import KnowledgeGraph, build_filter_index
from .optim import TrainState, optimizer_step
from .scoring import cosine_matrix, cross_entropy_loss
from .text import SequenceCache, Vocabulary, apply_mask

logger = logging.getLogger(__name__)


class DivergenceError(NonFiniteError):
    def __init__(self, stage: str, step: int, detail: str):
        super().__init__(f"stage {stage}: non-finite value at step {step}: {detail}")
        self.stage, self.step = stage, step


@dataclass(frozen=True)
class StageSpec:
    grade: int
    mask_rate: float
    weights: DistillWeights
    epochs: int
    lr: float
    batch_size: int
    init: str = "layer-select"
    strategy: str = "pmd"

    def __post_init__(self):
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask rate must lie in [0, 1]")

    @property
    def name(self) -> str:
        return f"stage-{self.grade}"


@dataclass(frozen=True)
class DistillSchedule:
    stages: tuple[StageSpec, ...]
    mode: str = "decreasing"
    strategy: str = "pmd"

    def __post_init__(self):
        grades = [s.grade for s in self.stages]
        if any(b >= a for a, b in zip(grades, grades[1:])):
            raise ValueError("grades must strictly decrease across stages")
        rates = [s.mask_rate for s in self.stages]
        if self.mode == "decreasing" and any(b > a for a, b in zip(rates, rates[1:])):
            raise ValueError("mask rates must not increase in decreasing mode")
        if self.mode == "fixed" and len(set(rates)) > 1:
            raise ValueError("fixed mode holds one mask rate across stages")


@dataclass
class TrainOptions:
    """Settings shared by every stage of one run."""

    temperature: float = 0.05
    negatives: str = "in-batch"
    score_matrix: str = "full"
    feature_layer: int = -1
    lkd_temperature: float = 2.0
    weight_decay: float = 1e-4
    eval_every: int = 1
    mask_tail: bool = True

    @classmethod
    def from_config(cls, cfg: RunConfig) -> TrainOptions:
        return cls(
            temperature=cfg["score.temperature"],
            negatives=cfg["score.negatives"],
            score_matrix=cfg["distill.score_matrix"],
            feature_layer=cfg["distill.feature_layer"],
            lkd_temperature=cfg["distill.lkd_temperature"],
            weight_decay=cfg["train.weight_decay"],
            eval_every=cfg["train.eval_every"],
            mask_tail=cfg["text.mask_tail"],
        )


@dataclass
class TrainData:
    graph: KnowledgeGraph
    vocab: Vocabulary
    sequences: SequenceCache
    filter_index: dict
    valid: Evaluator
    test: Evaluator

    @classmethod
    def build(cls, graph: KnowledgeGraph, vocab: Vocabulary, max_len: int, filtered: bool = True,
              eval_batch_size: int = 256) -> TrainData:
        sequences = SequenceCache(graph, vocab, max_len)
        index = build_filter_index(graph)
        ev = Evaluator(graph, sequences, index, filtered=filtered, batch_size=eval_batch_size)
        return cls(graph, vocab, sequences, index, ev, ev)

    @property
    def train_triples(self) -> np.ndarray:
        return np.asarray(self.graph.splits["train"], dtype=np.int64)

    def steps_per_epoch(self, batch_size: int) -> int:
        return math.ceil(len(self.graph.splits["train"]) / batch_size)


@dataclass
class StepLog:
    stage: str
    step: int
    epoch: int
    lr: float
    ce: float
    score: float
    mgfd: float
    total: float
    mgfd_active: bool
    mgfd_contribution: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class StageResult:
    spec: StageSpec
    model: BiEncoder            # best-validation parameters
    final_model: BiEncoder
    best_valid_mrr: float
    steps: int
    history: list[dict] = field(default_factory=list)


# -- one training step -----------------------------------------------------------


def _tower_outputs(model_leaves, config, masked, dropout_rng):
    return {
        tower: forward(config, model_leaves[tower], getattr(masked, tower), dropout_rng)
        for tower in TOWERS
    }


def _pooled_layers(out, attention):
    return [pool(state, attention) for state in out.layer_states]


def compute_losses(
    student_leaves: dict[str, dict[str, Tensor]],
    student_config: EncoderConfig,
    teacher: BiEncoder | None,
    masked,
    labels: np.ndarray,
    spec: StageSpec,
    opts: TrainOptions,
    dropout_rng: np.random.Generator | None,
) -> dict:
    """Forward both models on one shared masked batch and assemble the weighted loss."""
    s_out = _tower_outputs(student_leaves, student_config, masked, dropout_rng)
    s_cos = cosine_matrix(s_out["hr"].pooled, s_out["tail"].pooled)
    ce = cross_entropy_loss(s_cos * (1.0 / opts.temperature), labels)
    zero = Tensor(np.zeros((), dtype=ce.dtype))
    score, feat, active = zero, zero, False
    if teacher is not None:
        t_leaves = {tower: as_leaves(teacher.tower(tower)) for tower in TOWERS}
        t_out = _tower_outputs(t_leaves, teacher.config, masked, None)
        t_cos = cosine_matrix(t_out["hr"].pooled, t_out["tail"].pooled).data
        if spec.strategy == "lkd":
            score = lkd_loss(
                s_cos * (1.0 / opts.temperature), t_cos / opts.temperature, opts.lkd_temperature
            )
        elif spec.weights.alpha:
            score = score_distill_loss(s_cos, t_cos, diagonal=opts.score_matrix == "diagonal")
        if spec.strategy == "pkd":
            mapping = layer_map(teacher.config.layers, student_config.layers)
            parts = []
            for tower in TOWERS:
                att = getattr(masked, tower).attention
                parts.append(
                    pkd_loss(
                        _pooled_layers(s_out[tower], att),
                        [p.data for p in _pooled_layers(t_out[tower], att)],
                        mapping,
                    )
                )
            feat, active = (parts[0] + parts[1]) * 0.5, True
        elif spec.strategy == "pmd" and spec.mask_rate > 0:
            layer = opts.feature_layer
            pairs = [
                FeaturePair(
                    t_out[tower].layer_states[layer].data,
                    s_out[tower].layer_states[layer],
                    masked.hr_masked if tower == "hr" else masked.tail_masked,
                )
                for tower in TOWERS
            ]
            feat, active = mgfd_loss(pairs)
    # only the masked-feature term is tied to the mask rate
    rate = spec.mask_rate if spec.strategy in ("pmd", "none") else None
    total = combined_loss(ce, score, feat, spec.weights, mask_rate=rate)
    beta_used = 0.0 if rate == 0.0 else spec.weights.beta
    return {
        "total": total,
        "ce": ce,
        "score": score,
        "feature": feat,
        "feature_active": active,
        "feature_contribution": beta_used * float(feat.data),
    }


def _stream(seed: int, stage_index: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage_index, *key])


def train_stage(
    student: BiEncoder,
    teacher: BiEncoder | None,
    data: TrainData,
    spec: StageSpec,
    opts: TrainOptions,
    seed: int,
    stage_index: int = 0,
    log: Callable[[StepLog], None] | None = None,
) -> StageResult:
    """Train ``student`` in place against ``teacher`` (frozen) for one stage."""
    triples = data.train_triples
    n = len(triples)
    steps_per_epoch = data.steps_per_epoch(spec.batch_size)
    state = TrainState(peak_lr=spec.lr, total_steps=spec.epochs * steps_per_epoch)
    params = student.named_tensors()
    config = student.config
    best_mrr, best_model = -1.0, student.copy()
    history = []
    step = 0
    for epoch in range(spec.epochs):
        order = _stream(seed, stage_index, 0, epoch).permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start : start + spec.batch_size]
            batch = triples[idx]
            hr = data.sequences.hr_batch(zip(batch[:, 0], batch[:, 1]))
            if opts.negatives == "full":
                tail = data.sequences.tail_batch(range(data.graph.num_entities))
                labels = batch[:, 2]
            else:
                tail = data.sequences.tail_batch(batch[:, 2])
                labels = np.arange(len(batch))
            mask_rng = _stream(seed, stage_index, 1, step)
            dropout_rng = _stream(seed, stage_index, 2, step) if config.dropout > 0 else None
            masked = apply_mask(hr, tail, spec.mask_rate, mask_rng, mask_tail=opts.mask_tail)
            leaves = {tower: as_leaves(student.tower(tower), requires_grad=True) for tower in TOWERS}
            try:
                losses = compute_losses(leaves, config, teacher, masked, labels, spec, opts, dropout_rng)
                check_finite(losses["total"])
            except NonFiniteError as exc:
                raise DivergenceError(spec.name, step, str(exc)) from exc
            losses["total"].backward()
            grads = {
                f"{tower}.{name}": t.grad
                for tower in TOWERS
                for name, t in leaves[tower].items()
                if t.grad is not None
            }
            try:
                lr = optimizer_step(state, params, grads, opts.weight_decay)
            except NonFiniteError as exc:
                raise DivergenceError(spec.name, step, str(exc)) from exc
            if log is not None:
                log(
                    StepLog(
                        stage=spec.name,
                        step=step,
                        epoch=epoch,
                        lr=lr,
                        ce=float(losses["ce"].data),
                        score=float(losses["score"].data),
                        mgfd=float(losses["feature"].data),
                        total=float(losses["total"].data),
                        mgfd_active=bool(losses["feature_active"]),
                        mgfd_contribution=losses["feature_contribution"],
                    )
                )
            step += 1
        last = epoch == spec.epochs - 1
        if last or (epoch + 1) % opts.eval_every == 0:
            metrics, _ = data.valid.evaluate(student, "valid")
            history.append({"epoch": epoch, "valid_MRR": metrics.MRR})
            logger.info("%s epoch %d valid MRR %.4f", spec.name, epoch, metrics.MRR)
            if metrics.MRR > best_mrr:
                best_mrr, best_model = metrics.MRR, student.copy()
    return StageResult(spec, best_model, student, best_mrr, step, history)


# -- stages -------------------------------------------------------------------------


def baseline_spec(cfg: RunConfig) -> StageSpec:
    return StageSpec(
        grade=cfg["encoder.layers"],
        mask_rate=0.0,
        weights=DistillWeights(0.0, 0.0),
        epochs=cfg["train.epochs"],
        lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"],
        init="fresh",
        strategy="none",
    )


def encoder_config(cfg: RunConfig, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(
        layers=cfg["encoder.layers"],
        hidden=cfg["encoder.hidden"],
        heads=cfg["encoder.heads"],
        ff=cfg["encoder.ff"],
        vocab_size=vocab_size,
        max_len=cfg["text.max_len"],
        dropout=cfg["encoder.dropout"],
        pooling=cfg["encoder.pooling"],
    )


def build_schedule(cfg: RunConfig) -> DistillSchedule:
    """Turn the config's grade list into stage specs under the chosen strategy and mask mode."""
    strategy, mode = cfg["schedule.strategy"], cfg["schedule.mode"]
    grades = cfg["schedule.grades"]
    rates = list(cfg["schedule.mask_rates"])
    if mode == "fixed":
        rates = [rates[0]] * len(grades)
    alpha, beta = cfg["distill.alpha"], cfg["distill.beta"]
    if strategy in ("no-mgfd", "lkd"):
        rates, beta = [0.0] * len(grades), 0.0
    elif strategy == "pkd":
        rates = [0.0] * len(grades)
    stages = tuple(
        StageSpec(
            grade=g,
            mask_rate=float(r),
            weights=DistillWeights(alpha, beta),
            epochs=e,
            lr=lr,
            batch_size=cfg["train.batch_size"],
            init=init,
            strategy=strategy,
        )
        for g, r, e, lr, init in zip(
            grades,
            rates,
            cfg.per_stage("schedule.epochs"),
            cfg.per_stage("schedule.lr"),
            cfg.per_stage("schedule.init"),
        )
    )
    return DistillSchedule(stages, mode=mode, strategy=strategy)


def init_student(teacher: BiEncoder, spec: StageSpec, seed: int) -> BiEncoder:
    config = teacher.config.with_layers(spec.grade)
    if spec.init == "copy":
        if spec.grade != teacher.config.layers:
            raise ValueError("copy initialization needs the teacher's architecture")
        return teacher.copy()
    if spec.init == "layer-select":
        return select_bi_encoder_layers(teacher, config)
    return init_bi_encoder(config, seed)


def train_baseline(data: TrainData, cfg: RunConfig, config: EncoderConfig, seed: int,
                   log=None) -> StageResult:
    """Bi-encoder trained with the contrastive cross-entropy alone."""
    model = init_bi_encoder(config, seed)
    return train_stage(model, None, data, baseline_spec(cfg), TrainOptions.from_config(cfg), seed,
                       stage_index=0, log=log)


def pre_distill(teacher: BiEncoder, data: TrainData, spec: StageSpec, opts: TrainOptions,
                seed: int, log=None) -> StageResult:
    if spec.grade != teacher.config.layers:
        raise ValueError("pre-distillation keeps the teacher's architecture")
    student = init_student(teacher, replace(spec, init="copy"), seed)
    return train_stage(student, teacher, data, spec, opts, seed, stage_index=1, log=log)


def progressive_distill(
    schedule: DistillSchedule,
    teacher: BiEncoder,
    data: TrainData,
    opts: TrainOptions,
    seed: int,
    log=None,
    on_stage: Callable[[StageResult], None] | None = None,
) -> list[StageResult]:
    """Run every stage, each teacher being the previous stage's best student.

    A diverging stage raises :class:`DivergenceError`; results of completed
    stages have already been handed to ``on_stage``.
    """
    results = []
    for i, spec in enumerate(schedule.stages):
        student = init_student(teacher, spec, seed + 1000 * (i + 1))
        result = train_stage(student, teacher, data, spec, opts, seed, stage_index=i + 1, log=log)
        results.append(result)
        if on_stage is not None:
            on_stage(result)
        teacher = result.model
    return results


# -- run directory orchestration --------------------------------------------------


def metrics_record(
    metrics: RankingMetrics, spec: StageSpec, config: EncoderConfig, seed: int,
    wall_clock: float | None, split: str, stage: str
) -> dict:
    return {
        "stage": stage,
        "split": split,
        "strategy": spec.strategy,
        "grade": spec.grade,
        "parameter_count": count_bi_encoder_params(config.with_layers(spec.grade)),
        "mask_rate": spec.mask_rate,
        "alpha": spec.weights.alpha,
        "beta": 0.0 if spec.mask_rate == 0 and spec.strategy == "pmd" else spec.weights.beta,
        "MR": metrics.MR,
        "MRR": metrics.MRR,
        "hits1": metrics.hits1,
        "hits3": metrics.hits3,
        "hits10": metrics.hits10,
        "n": metrics.n,
        "seed": seed,
        "wall_clock_seconds": wall_clock,
    }


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_prepared(directory) -> tuple[KnowledgeGraph, Vocabulary]:
    directory = Path(directory)
    graph = KnowledgeGraph.from_json(json.loads((directory / "graph.json").read_text(encoding="utf-8")))
    vocab = Vocabulary.load(directory / "vocab.txt")
    return graph, vocab


class RunRecorder:
    """Writes checkpoints, metrics and the append-only training log of one run."""

    def __init__(self, out_dir: Path, cfg: RunConfig, data: TrainData, seed: int):
        self.out = Path(out_dir)
        self.cfg, self.data, self.seed = cfg, data, seed
        self.out.mkdir(parents=True, exist_ok=True)
        self.log_path = self.out / "train.log"
        self.log_path.write_text("", encoding="utf-8")
        self.reports: list[dict] = []
        self._stage_start = time.perf_counter()

    def log(self, entry: StepLog) -> None:
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(entry.to_json() + "\n")

    def start(self) -> None:
        self._stage_start = time.perf_counter()

    def finish(self, result: StageResult, stage_name: str, config: EncoderConfig) -> dict:
        elapsed = time.perf_counter() - self._stage_start
        split = self.cfg["eval.split"]
        metrics, ranked = self.data.test.evaluate(result.model, split)
        meta = {
            "stage": stage_name,
            "grade": result.spec.grade,
            "mask_rate": result.spec.mask_rate,
            "strategy": result.spec.strategy,
            "seed": self.seed,
            "best_valid_MRR": result.best_valid_mrr,
        }
        save_checkpoint(self.out / f"{stage_name}.pmdc", result.model, meta)
        record = metrics_record(
            metrics, result.spec, config, self.seed,
            round(elapsed, 3) if self.cfg["run.record_wall_clock"] else None,
            split, stage_name,
        )
        write_json(self.out / f"{stage_name}.metrics.json", record)
        if self.cfg["eval.ranks_csv"]:
            write_ranks_csv(self.out / f"{stage_name}.ranks.csv", self.data.graph, ranked)
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"stage": stage_name, "event": "stage_done",
                                 "seconds": round(elapsed, 3)}, sort_keys=True) + "\n")
        self.reports.append(record)
        self.start()
        return record


def run_pipeline(cfg: RunConfig, out_dir=None, prepared_dir=None) -> list[dict]:
    """Baseline, then (unless strategy is ``none``) every schedule stage; returns metric records."""
    out = Path(out_dir or cfg["run.output"])
    graph, vocab = load_prepared(prepared_dir or cfg["data.prepared"])
    schedule = build_schedule(cfg)
    seed = cfg["run.seed"]
    data = TrainData.build(graph, vocab, cfg["text.max_len"], cfg["eval.filtered"], cfg["eval.batch_size"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.resolved")
    vocab.save(out / "vocab.txt")
    recorder = RunRecorder(out, cfg, data, seed)
    config = encoder_config(cfg, len(vocab))
    opts = TrainOptions.from_config(cfg)

    recorder.start()
    base = train_baseline(data, cfg, config, seed, log=recorder.log)
    recorder.finish(base, "baseline", config)
    if schedule.strategy == "none":
        return recorder.reports
    progressive_distill(
        schedule, base.model, data, opts, seed, log=recorder.log,
        on_stage=lambda r: recorder.finish(r, r.spec.name, config),
    )
    return recorder.reports


def evaluate_checkpoint(path, graph: KnowledgeGraph, vocab: Vocabulary, split: str,
                        filtered: bool = True) -> tuple[RankingMetrics, dict]:
    ckpt = load_checkpoint(path)
    return evaluate_split(ckpt.model, graph, vocab, split, filtered), ckpt.meta


def sweep_mask_rates(cfg: RunConfig, rates, out_dir=None, prepared_dir=None,
                     baseline_ckpt=None) -> list[dict]:
    """Pre-distill the trained baseline once per mask rate; one metrics row per rate."""
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"mask rate {r} outside [0, 1]")
    out = Path(out_dir or cfg["run.output"])
    out.mkdir(parents=True, exist_ok=True)
    graph, vocab = load_prepared(prepared_dir or cfg["data.prepared"])
    seed = cfg["run.seed"]
    data = TrainData.build(graph, vocab, cfg["text.max_len"], cfg["eval.filtered"], cfg["eval.batch_size"])
    config = encoder_config(cfg, len(vocab))
    opts = TrainOptions.from_config(cfg)
    if baseline_ckpt is not None:
        teacher = load_checkpoint(baseline_ckpt).model
    else:
        teacher = train_baseline(data, cfg, config, seed).model
        save_checkpoint(out / "baseline.pmdc", teacher, {"stage": "baseline", "seed": seed})
    first = build_schedule(cfg).stages[0]
    rows = []
    for rate in rates:
        spec = replace(first, grade=teacher.config.layers, mask_rate=float(rate), init="copy",
                       strategy="pmd")
        result = pre_distill(teacher, data, spec, opts, seed)
        metrics, _ = data.test.evaluate(result.model, cfg["eval.split"])
        rows.append({"rate": float(rate), **{k: getattr(metrics, k) for k in
                                             ("MR", "MRR", "hits1", "hits3", "hits10")}})
    return rows
