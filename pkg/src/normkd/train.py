"""Teacher pretraining, NORM distillation, evaluation and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import Dataset, batch_indices
from .models import Network, NetworkSpec, build_network, forward_full, predict_logits, tap_shape
from .norm import (DistillConfig, FTModule, make_ft_module, norm_loss, split_segments, total_loss,
                   total_loss_augmented)
from .rng import derive_seed
from .tensor import Tensor

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
METRIC_COLUMNS = ("epoch", "lr", "train_loss", "l_ce", "l_norm", "l_kd", "eval_top1")


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exceeded the divergence limit."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple = (38, 45, 52)
    lr_decay_factor: float = 0.1
    warmup_epochs: int = 0
    grad_clip: Optional[float] = 5.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if d and (d[0] < 0 or d[-1] >= self.epochs):
            raise ValueError("lr_decay_epochs must lie in [0, epochs)")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive or null")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: linear warmup, then one decay per milestone reached."""
        ramp = min(1.0, (epoch + 1) / (self.warmup_epochs + 1))
        return ramp * self.lr * self.lr_decay_factor ** sum(1 for d in self.lr_decay_epochs if d <= epoch)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(obj) - names
        if extra:
            raise ValueError(f"unknown train keys: {sorted(extra)}")
        return cls(**obj)


# training loop ------------------------------------------------------------

StepFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[Tensor, dict]]


def _fit(net: Network, ds: Dataset, cfg: TrainConfig, step: StepFn,
         eval_ds: Optional[Dataset] = None) -> list[dict]:
    params = net.parameters()
    velocities = [np.zeros_like(p.data) for p in params]
    shuffle_seed = derive_seed(cfg.seed, "batches")
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        sums = {"train_loss": 0.0, "l_ce": 0.0, "l_norm": 0.0, "l_kd": 0.0}
        for idx in batch_indices(len(ds), cfg.batch_size, shuffle_seed, epoch):
            net.zero_grad()
            loss, parts = step(idx, ds.images[idx], ds.labels[idx])
            value = loss.item()
            if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
                raise DivergenceError(f"loss {value!r} at epoch {epoch} (lr={lr}); parts={parts}")
            loss.backward()
            if cfg.grad_clip is not None:
                _clip_gradients(params, cfg.grad_clip)
            T.sgd_step(params, velocities, lr, cfg.momentum, cfg.weight_decay)
            sums["train_loss"] += value * len(idx)
            for k, v in parts.items():
                sums[k] += v * len(idx)
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / max(len(ds), 1) for k, v in sums.items()})
        row["eval_top1"] = evaluate(net, eval_ds)["top1_accuracy"] if eval_ds is not None else None
        history.append(row)
        logger.info("epoch %d lr %.4g loss %.5f eval %s", epoch, lr, row["train_loss"], row["eval_top1"])
    return history


def _clip_gradients(params: list[Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total


def fit_classifier(net: Network, ds: Dataset, cfg: TrainConfig,
                   eval_ds: Optional[Dataset] = None) -> list[dict]:
    """Plain cross-entropy training of ``net`` in place (FT path included if attached)."""
    _check_classes(net, ds)

    def step(idx, images, labels):
        _, _, logits = forward_full(net, Tensor(images))
        l_ce = T.softmax_cross_entropy(logits, labels)
        return l_ce, {"l_ce": l_ce.item()}

    return _fit(net, ds, cfg, step, eval_ds)


def pretrain_teacher(spec: NetworkSpec, ds: Dataset, cfg: TrainConfig,
                     eval_ds: Optional[Dataset] = None) -> tuple[Network, list[dict]]:
    net = build_network(spec, derive_seed(cfg.seed, "teacher"))
    return net, fit_classifier(net, ds, cfg, eval_ds)


def init_student(spec: NetworkSpec, cfg: TrainConfig) -> Network:
    """The student backbone every run with ``cfg.seed`` starts from."""
    return build_network(spec, derive_seed(cfg.seed, "student"))


def attach_ft(student: Network, c_t: int, dcfg: DistillConfig, cfg: TrainConfig) -> Network:
    c_s = tap_shape(student.spec)[2]
    student.ft = make_ft_module(c_s, c_t, dcfg.n, dcfg.residual, derive_seed(cfg.seed, "ft"))
    return student


def train_baseline_student(spec: NetworkSpec, ds: Dataset, cfg: TrainConfig,
                           eval_ds: Optional[Dataset] = None) -> tuple[Network, list[dict]]:
    """The individually trained student: same init as the distilled one, no FT, CE only."""
    net = init_student(spec, cfg)
    return net, fit_classifier(net, ds, cfg, eval_ds)


def teacher_outputs(teacher: Network, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Tap features and logits of a frozen teacher, without building any graph."""
    feats, logits = [], []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            f, _, z = forward_full(teacher, Tensor(images[s:s + batch_size]))
            feats.append(f.data)
            logits.append(z.data)
    return np.concatenate(feats), np.concatenate(logits)


def distill_student(student_spec: NetworkSpec, teacher: Network, ds: Dataset, dcfg: DistillConfig,
                    cfg: TrainConfig, eval_ds: Optional[Dataset] = None) -> tuple[Network, list[dict]]:
    """Train a student with an attached FT module under the NORM objective.

    The returned student still carries its FT module. Teacher outputs are
    computed once up front; the teacher is never modified.
    """
    s_shape, t_shape = tap_shape(student_spec), tap_shape(teacher.spec)
    if s_shape[:2] != t_shape[:2]:
        raise ValueError(f"student tap {s_shape[:2]} and teacher tap {t_shape[:2]} differ spatially")
    if teacher.ft is not None:
        raise ValueError("teacher must not carry an FT module")
    c_t = t_shape[2]
    student = attach_ft(init_student(student_spec, cfg), c_t, dcfg, cfg)
    _check_classes(student, ds)
    f_t_all, z_t_all = teacher_outputs(teacher, ds.images)

    def step(idx, images, labels):
        return distill_objective(student, images, labels, f_t_all[idx], z_t_all[idx], dcfg)

    return student, _fit(student, ds, cfg, step, eval_ds)


def distill_objective(student: Network, images: np.ndarray, labels: np.ndarray, f_t: np.ndarray,
                      z_t: np.ndarray, dcfg: DistillConfig) -> tuple[Tensor, dict]:
    """Per-batch training loss of a student carrying an FT module, plus its scalar parts."""
    _, f_se, logits = forward_full(student, Tensor(images))
    l_ce = T.softmax_cross_entropy(logits, labels)
    segments = split_segments(f_se, dcfg.n, f_t.shape[-1], dcfg.split, dcfg.split_seed)
    l_norm = norm_loss(segments, f_t, dcfg)
    parts = {"l_ce": l_ce.item(), "l_norm": l_norm.item()}
    if dcfg.beta > 0:
        l_kd = T.kd_divergence(logits, z_t, dcfg.temperature)
        parts["l_kd"] = l_kd.item()
        return total_loss_augmented(l_ce, l_norm, l_kd, dcfg), parts
    return total_loss(l_ce, l_norm, dcfg), parts


def _check_classes(net: Network, ds: Dataset) -> None:
    if net.spec.num_classes != ds.num_classes:
        raise ValueError(f"network has {net.spec.num_classes} classes, dataset {ds.num_classes}")
    if tuple(net.spec.input_shape) != ds.shape:
        raise ValueError(f"network input {net.spec.input_shape} != dataset images {ds.shape}")


def evaluate(net: Network, ds: Dataset) -> dict:
    """Top-1 accuracy (ties go to the lowest class index) and mean cross-entropy."""
    _check_classes(net, ds)
    if len(ds) == 0:
        return {"top1_accuracy": 0.0, "mean_loss": 0.0}
    logits = predict_logits(net, ds.images)
    pred = np.argmax(logits, axis=1)
    loss = T.softmax_cross_entropy(Tensor(logits), ds.labels).item()
    return {"top1_accuracy": float(np.mean(pred == ds.labels)), "mean_loss": loss}


def write_metrics_csv(path, history: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in history:
        writer.writerow(["" if row.get(c) is None else repr(row[c]) for c in METRIC_COLUMNS])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


# checkpoints --------------------------------------------------------------

MAGIC = b"NORMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def checkpoint_bytes(net: Network) -> bytes:
    meta = {"spec": net.spec.to_json(), "ft": net.ft.descriptor() if net.ft is not None else None}
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_b)), meta_b]
    tensors = net.named_tensors()
    out.append(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        nb = name.encode("utf-8")
        out += [struct.pack("<I", len(nb)), nb, struct.pack("<I", t.ndim),
                struct.pack(f"<{t.ndim}Q", *t.shape), t.data.astype("<f8").tobytes()]
    return b"".join(out)


def save_checkpoint(net: Network, path) -> None:
    """Write ``net`` (including any FT module) atomically to ``path``."""
    _atomic_write(path, checkpoint_bytes(net))


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if len(r.buf) < len(MAGIC) or r.buf[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a NORM checkpoint (bad magic)")
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (meta_len,) = r.unpack("<Q")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q")
        n = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")

    spec = NetworkSpec.from_json(meta["spec"])
    ft = None
    if meta.get("ft") is not None:
        d = meta["ft"]
        ft = FTModule(tensors.pop("ft.w_se"), tensors.pop("ft.w_sc"), residual=bool(d["residual"]),
                      n=int(d["n"]), c_t=int(d["c_t"]), c_s=int(d["c_s"]))
    net = Network(spec=spec, params=tensors, ft=ft)
    expected = build_network(spec, 0)
    for key, t in expected.params.items():
        if key not in net.params or net.params[key].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {key!r} missing or misshapen")
    return net
