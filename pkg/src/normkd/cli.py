"""Command-line entry point: ``normkd <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure (including
divergence and unreadable checkpoints), 3 equivalence verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, DatasetError, load_binary_dataset, standardize
from .experiment import SyntheticConfig, synthetic_splits
from .merge import MergeError, merge_ft_into_fc, verify_equivalence
from .models import REFERENCE_SPECS, NetworkSpec, SpecError
from .norm import DistillConfig
from .train import (CheckpointError, DivergenceError, TrainConfig, distill_student, evaluate, load_checkpoint,
                    pretrain_teacher, save_checkpoint, write_metrics_csv)

logger = logging.getLogger("normkd")

EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: dict
    teacher_spec: NetworkSpec
    student_spec: NetworkSpec
    distill: DistillConfig
    train: TrainConfig
    output_dir: str

    def datasets(self, seed: Optional[int] = None) -> tuple[Dataset, Optional[Dataset]]:
        """Train and (optional) test splits; synthetic data follows ``seed`` (default ``train.seed``)."""
        d = self.dataset
        if d["source"] == "synthetic":
            syn = SyntheticConfig(**{k: v for k, v in d.items() if k != "source"})
            return synthetic_splits(syn, self.train.seed if seed is None else seed)
        h, w, c = d["shape"]
        train = load_binary_dataset(d["train_path"], h, w, c, d["num_classes"])
        test = load_binary_dataset(d["test_path"], h, w, c, d["num_classes"]) if d.get("test_path") else None
        if d.get("standardize"):
            out = standardize(train, *([test] if test is not None else []))
            train, test = out[0], (out[1] if test is not None else None)
        return train, test


_SYNTHETIC_KEYS = {"source", "num_classes", "per_class", "test_per_class", "shape", "noise_sigma"}
_BINARY_KEYS = {"source", "train_path", "test_path", "shape", "num_classes", "standardize"}
_TOP_KEYS = {"dataset", "teacher_spec", "student_spec", "distill", "train", "output_dir"}


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    return parse_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def parse_config(raw, base_dir: str = ".") -> RunConfig:
    """Strictly validate a config document; relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(raw) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    if "dataset" not in raw:
        raise ConfigError("config needs a 'dataset' section")
    try:
        dataset = _parse_dataset(dict(raw["dataset"]), base_dir)
        train = TrainConfig.from_json(raw.get("train", {}))
        distill = DistillConfig.from_json(raw.get("distill", {}))
        shape = tuple(dataset.get("shape", SyntheticConfig.shape))
        classes = dataset.get("num_classes", SyntheticConfig.num_classes)
        teacher = _parse_spec(raw.get("teacher_spec", "reference-teacher"), classes, shape)
        student = _parse_spec(raw.get("student_spec", "reference-student"), classes, shape)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    out = raw.get("output_dir", "runs")
    return RunConfig(dataset, teacher, student, distill, train, os.path.join(base_dir, out))


def _parse_dataset(d: dict, base_dir: str) -> dict:
    source = d.get("source")
    if source == "synthetic":
        allowed = _SYNTHETIC_KEYS
    elif source == "binary":
        allowed = _BINARY_KEYS
        for key in ("train_path", "shape", "num_classes"):
            if key not in d:
                raise ConfigError(f"binary dataset needs '{key}'")
        for key in ("train_path", "test_path"):
            if d.get(key):
                d[key] = os.path.join(base_dir, d[key])
                if not os.path.exists(d[key]):
                    raise ConfigError(f"dataset file not found: {d[key]}")
    else:
        raise ConfigError(f"dataset.source must be 'synthetic' or 'binary', got {source!r}")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown dataset keys: {sorted(extra)}")
    if "shape" in d:
        d["shape"] = tuple(int(v) for v in d["shape"])
        if len(d["shape"]) != 3:
            raise ConfigError("dataset.shape must be [H, W, C]")
    return d


def _parse_spec(value, num_classes: int, shape: tuple) -> NetworkSpec:
    if isinstance(value, str):
        if value not in REFERENCE_SPECS:
            raise ConfigError(f"unknown reference spec {value!r}; choose from {sorted(REFERENCE_SPECS)}")
        return REFERENCE_SPECS[value](num_classes, shape)
    if isinstance(value, dict):
        try:
            return NetworkSpec.from_json(value)
        except SpecError as exc:
            raise ConfigError(f"network spec: {exc}") from None
    raise ConfigError("network spec must be a reference name or an object")


# subcommands --------------------------------------------------------------

def _metrics_path(out: str, given: Optional[str]) -> str:
    return given or out + ".metrics.csv"


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    train, test = cfg.datasets()
    teacher, history = pretrain_teacher(cfg.teacher_spec, train, cfg.train, test)
    save_checkpoint(teacher, args.out)
    write_metrics_csv(_metrics_path(args.out, args.metrics), history)
    print(json.dumps({"checkpoint": args.out, **_eval_dict(teacher, train, test)}, sort_keys=True))
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    train, test = cfg.datasets()
    teacher = load_checkpoint(args.teacher)
    student, history = distill_student(cfg.student_spec, teacher, train, cfg.distill, cfg.train, test)
    save_checkpoint(student, args.out)
    write_metrics_csv(_metrics_path(args.out, args.metrics), history)
    print(json.dumps({"checkpoint": args.out, **_eval_dict(student, train, test)}, sort_keys=True))
    return 0


def cmd_merge(args) -> int:
    net = load_checkpoint(args.input)
    try:
        merged = merge_ft_into_fc(net)
    except MergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    report = verify_equivalence(net, merged, args.probes, args.tolerance, args.seed)
    print(report.to_json())
    if not report.passed:
        return EXIT_VERIFY
    save_checkpoint(merged, args.out)
    return 0


def cmd_verify(args) -> int:
    report = verify_equivalence(load_checkpoint(args.a), load_checkpoint(args.b),
                                args.probes, args.tolerance, args.seed)
    print(report.to_json())
    return 0 if report.passed else EXIT_VERIFY


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    train, test = cfg.datasets()
    print(json.dumps(evaluate(load_checkpoint(args.input), test if test is not None else train), sort_keys=True))
    return 0


def cmd_ablate_n(args) -> int:
    cfg = load_config(args.config)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated integers, got {args.values!r}") from None
    if not values or min(values) < 1 or args.seeds < 1:
        raise ConfigError("--values must be positive integers and --seeds >= 1")
    shared_teacher = load_checkpoint(args.teacher) if args.teacher else None
    acc = {n: [] for n in values}
    for i in range(args.seeds):
        seed = cfg.train.seed + i
        tcfg = dataclasses.replace(cfg.train, seed=seed)
        train, test = cfg.datasets(seed)
        teacher = shared_teacher or pretrain_teacher(cfg.teacher_spec, train, tcfg)[0]
        for n in values:
            student, _ = distill_student(cfg.student_spec, teacher, train,
                                         dataclasses.replace(cfg.distill, n=n), tcfg)
            acc[n].append(evaluate(student, test if test is not None else train)["top1_accuracy"])
            logger.info("seed %d N=%d top1 %.4f", seed, n, acc[n][-1])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "mean_top1", "std_top1", "num_seeds"])
    for n in values:
        a = np.array(acc[n])
        writer.writerow([n, repr(float(a.mean())), repr(float(a.std())), len(a)])
    out = args.out or os.path.join(cfg.output_dir, "ablate_n.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


def _eval_dict(net, train, test) -> dict:
    out = {"train_top1": evaluate(net, train)["top1_accuracy"]}
    if test is not None:
        out["test_top1"] = evaluate(net, test)["top1_accuracy"]
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normkd", description="N-to-one representation matching distillation")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-teacher", help="pretrain the teacher and checkpoint it")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("distill", help="distill a student with an attached FT module")
    s.add_argument("--config", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("merge", help="absorb the FT module into the FC layer and verify")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tolerance", type=float, default=1e-9)
    s.add_argument("--probes", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify", help="logit equivalence report for two checkpoints")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--probes", type=int, default=100)
    s.add_argument("--tolerance", type=float, default=1e-9)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("ablate-n", help="accuracy mean/std over seeds for several N")
    s.add_argument("--config", required=True)
    s.add_argument("--values", default="1,2,4,8")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--teacher", help="reuse one teacher checkpoint for every seed")
    s.add_argument("--out", help="CSV path (default: <output_dir>/ablate_n.csv)")
    s.set_defaults(func=cmd_ablate_n)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, CheckpointError, DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
