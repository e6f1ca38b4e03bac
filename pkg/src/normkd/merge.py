"""Fold a trained FT module into the classifier and certify the result."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass

import numpy as np

from .models import Network, predict_logits, tap_index
from .rng import derive_rng
from .tensor import Tensor


class MergeError(ValueError):
    """Raised when a network cannot absorb its FT module."""


@dataclass
class MergeReport:
    max_abs_diff: float
    max_rel_diff: float
    num_probes: int
    passed: bool
    tolerance: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def ft_matrix(ft) -> np.ndarray:
    """The ``C_s x C_s`` map a feature pixel undergoes inside the FT module.

    A 1x1 kernel ``[1,1,Cin,Cout]`` acts on a column vector as the
    ``Cout x Cin`` matrix ``kernel[0,0].T``.
    """
    m_se = ft.w_se.data[0, 0].T  # (N*C_t, C_s)
    m_sc = ft.w_sc.data[0, 0].T  # (C_s, N*C_t)
    m = m_sc @ m_se
    if ft.residual:
        m = m + np.eye(ft.c_s)
    return m


def merge_ft_into_fc(net: Network) -> Network:
    """Return a copy of ``net`` without FT whose FC weight is ``W_fc @ M_ft``.

    The FC bias and every other parameter are copied unchanged; ``net``
    itself is not modified.
    """
    if net.ft is None:
        raise MergeError("network has no FT module (never distilled, or already merged)")
    layers = net.spec.layers
    tap = tap_index(net.spec)
    if tap != len(layers) - 3:
        between = [type(l).__name__ for l in layers[tap + 1:-2]]
        raise MergeError(f"layers {between} sit between the FT module and GAP; cannot absorb")
    fc_key = f"layer{len(layers) - 1}.weight"
    if fc_key not in net.params:
        raise MergeError("network tail is not GAP -> FC")

    merged_w = net.params[fc_key].data @ ft_matrix(net.ft)
    params = {}
    for key, t in net.params.items():
        data = merged_w if key == fc_key else t.data.copy()
        params[key] = Tensor(data, requires_grad=t.requires_grad, name=t.name)
    return Network(spec=copy.deepcopy(net.spec), params=params, ft=None)


def verify_equivalence(before: Network, after: Network, num_probes: int = 100,
                       tolerance: float = 1e-9, seed: int = 0) -> MergeReport:
    """Compare logits of two networks on seeded Uniform[0,1) probe inputs."""
    if before.spec.input_shape != after.spec.input_shape:
        raise ValueError(f"input shapes differ: {before.spec.input_shape} vs {after.spec.input_shape}")
    if before.spec.num_classes != after.spec.num_classes:
        raise ValueError(f"class counts differ: {before.spec.num_classes} vs {after.spec.num_classes}")
    if num_probes < 1:
        raise ValueError("num_probes must be positive")
    probes = derive_rng(seed, "probes").uniform(0.0, 1.0, size=(num_probes, *before.spec.input_shape))
    a = predict_logits(before, probes)
    b = predict_logits(after, probes)
    diff = np.abs(a - b)
    max_abs = float(diff.max())
    max_rel = float((diff / np.maximum(np.abs(a), np.finfo(float).tiny)).max())
    return MergeReport(max_abs_diff=max_abs, max_rel_diff=max_rel, num_probes=num_probes,
                       passed=bool(max_abs <= tolerance), tolerance=float(tolerance))
