"""N-to-one representation matching: feature transform, splitting and losses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .models import uniform_fan_in
from .rng import derive_rng
from .tensor import ShapeError, Tensor

METRICS = ("l2sq", "l1")
SPLITS = ("sequential", "random")
NORMALIZATIONS = ("sum_div_n", "mean_per_element")


@dataclass
class FTModule:
    """Linear expand/contract block placed after the student's last conv layer.

    ``w_se`` is a ``[1,1,C_s,N*C_t]`` kernel and ``w_sc`` a ``[1,1,N*C_t,C_s]``
    kernel; with ``residual`` the input is added back to the output.
    """

    w_se: Tensor
    w_sc: Tensor
    residual: bool
    n: int
    c_t: int
    c_s: int

    def __post_init__(self):
        if self.w_se.shape != (1, 1, self.c_s, self.n * self.c_t):
            raise ShapeError(f"w_se shape {self.w_se.shape} != (1, 1, {self.c_s}, {self.n * self.c_t})")
        if self.w_sc.shape != (1, 1, self.n * self.c_t, self.c_s):
            raise ShapeError(f"w_sc shape {self.w_sc.shape} != (1, 1, {self.n * self.c_t}, {self.c_s})")

    def descriptor(self) -> dict:
        return {"n": self.n, "c_t": self.c_t, "c_s": self.c_s, "residual": self.residual}


def make_ft_module(c_s: int, c_t: int, n: int, residual: bool = True, seed: int = 0) -> FTModule:
    """FT module with fan-in uniform kernels drawn from ``seed``."""
    if min(c_s, c_t, n) < 1:
        raise ValueError("c_s, c_t and n must be positive")
    rng = derive_rng(seed, "ft")
    w_se = uniform_fan_in(rng, (1, 1, c_s, n * c_t), c_s)
    w_sc = uniform_fan_in(rng, (1, 1, n * c_t, c_s), n * c_t)
    return FTModule(Tensor(w_se, requires_grad=True, name="ft.w_se"),
                    Tensor(w_sc, requires_grad=True, name="ft.w_sc"),
                    residual=residual, n=n, c_t=c_t, c_s=c_s)


@dataclass(frozen=True)
class DistillConfig:
    n: int = 8
    alpha: float = 10.0
    beta: float = 4.0
    temperature: float = 4.0
    metric: str = "l2sq"
    split: str = "sequential"
    split_seed: int = 0
    match_segments: Optional[int] = None  # None means all n segments
    normalize: str = "mean_per_element"
    residual: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be a positive integer")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        if self.normalize not in NORMALIZATIONS:
            raise ValueError(f"normalize must be one of {NORMALIZATIONS}")
        if self.match_segments is not None and not 1 <= self.match_segments <= self.n:
            raise ValueError(f"match_segments must lie in [1, {self.n}]")

    @property
    def matched(self) -> int:
        return self.n if self.match_segments is None else self.match_segments

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DistillConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(obj) - names
        if extra:
            raise ValueError(f"unknown distill keys: {sorted(extra)}")
        return cls(**obj)


def ft_forward(ft: FTModule, f_s: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(f_se, f_out)``: the expanded map and the transformed output."""
    if f_s.ndim != 4 or f_s.shape[-1] != ft.c_s:
        raise ShapeError(f"FT input channels {f_s.shape[-1] if f_s.ndim else None} != C_s={ft.c_s}")
    f_se = T.conv2d(f_s, ft.w_se)
    f_sc = T.conv2d(f_se, ft.w_sc)
    return f_se, (f_sc + f_s if ft.residual else f_sc)


def split_permutation(total: int, seed: int) -> np.ndarray:
    return derive_rng(seed, "split").permutation(total)


def split_segments(f_se: Tensor, n: int, c_t: int, split: str = "sequential",
                   seed: int = 0) -> list[Tensor]:
    """Cut the expanded map into ``n`` channel groups of width ``c_t``.

    ``random`` applies one seeded channel permutation before the sequential cut.
    """
    if f_se.shape[-1] != n * c_t:
        raise ShapeError(f"cannot split {f_se.shape[-1]} channels into {n} segments of {c_t}")
    if split == "random":
        f_se = T.permute_channels(f_se, split_permutation(n * c_t, seed))
    elif split != "sequential":
        raise ValueError(f"unknown split mode {split!r}")
    if n == 1:
        return [f_se]
    return [f_se[..., i * c_t:(i + 1) * c_t] for i in range(n)]


def _scale(f_t_shape: tuple, m: int, normalize: str) -> float:
    denom = m * f_t_shape[0]
    if normalize == "mean_per_element":
        denom *= int(np.prod(f_t_shape[1:]))
    elif normalize != "sum_div_n":
        raise ValueError(f"unknown normalization {normalize!r}")
    return 1.0 / denom


def segment_distances(segments: Sequence[Tensor], f_t, metric: str = "l2sq") -> list[Tensor]:
    return [T.distance(seg, f_t, metric) for seg in segments]


def norm_loss(segments: Sequence[Tensor], f_t, cfg: DistillConfig) -> Tensor:
    """Average distance of the first ``cfg.matched`` segments to the teacher map.

    Each distance is a raw sum over ``H*W*C_t`` and the batch; the result is
    divided by the matched segment count and the batch size, and additionally
    by ``H*W*C_t`` under ``mean_per_element``.
    """
    m = cfg.matched
    if len(segments) < m:
        raise ValueError(f"{len(segments)} segments given, {m} requested")
    ft_shape = f_t.shape
    for i, seg in enumerate(segments[:m]):
        if seg.shape != ft_shape:
            raise ShapeError(f"segment {i} shape {seg.shape} != teacher shape {ft_shape}")
    dists = segment_distances(segments[:m], f_t, cfg.metric)
    total = dists[0]
    for d in dists[1:]:
        total = total + d
    return total * _scale(ft_shape, m, cfg.normalize)


def orm_loss_baseline(f_s_projected: Tensor, f_t, metric: str = "l2sq",
                      normalize: str = "mean_per_element") -> Tensor:
    """Single-route matching of one projected student map to the teacher map."""
    ft_shape = f_t.shape
    if f_s_projected.shape != ft_shape:
        raise ShapeError(f"projected shape {f_s_projected.shape} != teacher shape {ft_shape}")
    return T.distance(f_s_projected, f_t, metric) * _scale(ft_shape, 1, normalize)


def total_loss(l_ce: Tensor, l_norm: Tensor, cfg: DistillConfig) -> Tensor:
    return l_ce + l_norm * cfg.alpha


def total_loss_augmented(l_ce: Tensor, l_norm: Tensor, l_kd: Tensor, cfg: DistillConfig) -> Tensor:
    return l_ce + l_norm * cfg.alpha + l_kd * cfg.beta
