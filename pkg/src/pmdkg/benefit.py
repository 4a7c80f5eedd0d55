"""Student-from-scratch versus progressively distilled student at equal step budgets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .encoder import init_bi_encoder
from .kg import KnowledgeGraph
from .pipeline import (
    TrainData,
    TrainOptions,
    baseline_spec,
    build_schedule,
    encoder_config,
    progressive_distill,
    train_baseline,
    train_stage,
)
from .text import Vocabulary

logger = logging.getLogger(__name__)


@dataclass
class BenefitReport:
    teacher_mrr: float
    scratch_mrr: list[float]
    distilled_mrr: list[float]
    steps: list[int]

    @property
    def scratch_mean(self) -> float:
        return float(np.mean(self.scratch_mrr))

    @property
    def distilled_mean(self) -> float:
        return float(np.mean(self.distilled_mrr))

    def to_dict(self) -> dict:
        return {
            "teacher_MRR": self.teacher_mrr,
            "scratch_MRR": self.scratch_mrr,
            "distilled_MRR": self.distilled_mrr,
            "scratch_mean": self.scratch_mean,
            "distilled_mean": self.distilled_mean,
            "steps": self.steps,
        }


def compare_students(cfg: RunConfig, graph: KnowledgeGraph, vocab: Vocabulary, seeds) -> BenefitReport:
    """Train one teacher, then for each seed a scratch student and a distilled student.

    The scratch student has the depth of the last schedule grade and runs for
    exactly as many optimizer steps as all distillation stages together.
    """
    data = TrainData.build(graph, vocab, cfg["text.max_len"], cfg["eval.filtered"], cfg["eval.batch_size"])
    config = encoder_config(cfg, len(vocab))
    opts = TrainOptions.from_config(cfg)
    schedule = build_schedule(cfg)
    split = cfg["eval.split"]

    teacher = train_baseline(data, cfg, config, cfg["run.seed"]).model
    teacher_mrr = data.test.evaluate(teacher, split)[0].MRR
    logger.info("teacher %s MRR %.4f", split, teacher_mrr)

    per_epoch = data.steps_per_epoch(cfg["train.batch_size"])
    total_epochs = sum(s.epochs for s in schedule.stages)
    final_grade = schedule.stages[-1].grade
    scratch_spec = replace(baseline_spec(cfg), grade=final_grade, epochs=total_epochs,
                           lr=schedule.stages[-1].lr)

    scratch, distilled, steps = [], [], []
    for seed in seeds:
        results = progressive_distill(schedule, teacher, data, opts, seed)
        distilled_steps = sum(r.steps for r in results)
        student = init_bi_encoder(config.with_layers(final_grade), seed)
        fresh = train_stage(student, None, data, scratch_spec, opts, seed, stage_index=0)
        if fresh.steps != distilled_steps or fresh.steps != total_epochs * per_epoch:
            raise AssertionError("step budgets differ")
        scratch.append(data.test.evaluate(fresh.model, split)[0].MRR)
        distilled.append(data.test.evaluate(results[-1].model, split)[0].MRR)
        steps.append(distilled_steps)
        logger.info("seed %d scratch %.4f distilled %.4f", seed, scratch[-1], distilled[-1])
    return BenefitReport(teacher_mrr, scratch, distilled, steps)
