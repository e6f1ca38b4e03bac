"""Seeded teacher -> baseline / NORM comparison runs on synthetic data."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, generate_synthetic
from .models import Network, NetworkSpec, reference_student, reference_teacher
from .norm import DistillConfig
from .rng import derive_seed
from .train import TrainConfig, distill_student, evaluate, pretrain_teacher, train_baseline_student

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 10
    per_class: int = 200
    test_per_class: int = 100
    shape: tuple = (16, 16, 3)
    noise_sigma: float = 0.25


def synthetic_splits(cfg: SyntheticConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Train/test splits sharing class templates; the data seed is derived from ``seed``."""
    data_seed = derive_seed(seed, "data")
    train = generate_synthetic(cfg.num_classes, cfg.per_class, cfg.shape, cfg.noise_sigma, data_seed, "train")
    test = generate_synthetic(cfg.num_classes, cfg.test_per_class, cfg.shape, cfg.noise_sigma, data_seed, "test")
    return train, test


@dataclass
class SeedResult:
    seed: int
    teacher_top1: float
    baseline_top1: Optional[float]
    norm_top1: dict = field(default_factory=dict)  # n -> top-1


def run_seed(seed: int, n_values=(8, 1), data: SyntheticConfig = SyntheticConfig(),
             train: TrainConfig = TrainConfig(), distill: DistillConfig = DistillConfig(beta=0.0),
             teacher_spec: Optional[NetworkSpec] = None, student_spec: Optional[NetworkSpec] = None,
             teacher: Optional[Network] = None, with_baseline: bool = True) -> SeedResult:
    """Train (or reuse) a teacher, the CE-only student and one NORM student per ``n``."""
    teacher_spec = teacher_spec or reference_teacher(data.num_classes, data.shape)
    student_spec = student_spec or reference_student(data.num_classes, data.shape)
    tcfg = dataclasses.replace(train, seed=seed)
    ds, test = synthetic_splits(data, seed)
    if teacher is None:
        teacher, _ = pretrain_teacher(teacher_spec, ds, tcfg)
    result = SeedResult(seed, evaluate(teacher, test)["top1_accuracy"], None)
    logger.info("seed %d teacher top1 %.4f", seed, result.teacher_top1)
    if with_baseline:
        base, _ = train_baseline_student(student_spec, ds, tcfg)
        result.baseline_top1 = evaluate(base, test)["top1_accuracy"]
        logger.info("seed %d baseline top1 %.4f", seed, result.baseline_top1)
    for n in n_values:
        student, _ = distill_student(student_spec, teacher, ds, dataclasses.replace(distill, n=n), tcfg)
        result.norm_top1[n] = evaluate(student, test)["top1_accuracy"]
        logger.info("seed %d NORM(N=%d) top1 %.4f", seed, n, result.norm_top1[n])
    return result


def summarize(results: list[SeedResult], n: int) -> tuple[float, float]:
    acc = np.array([r.norm_top1[n] for r in results])
    return float(acc.mean()), float(acc.std())
