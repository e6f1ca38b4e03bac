"""Dense float64 tensors with reverse-mode automatic differentiation.

Arrays are stored channels-last (``[B, H, W, C]`` for feature maps). Every
operation that touches a tensor with ``requires_grad`` records a node holding
its parents and a closure that maps the output gradient to parent gradients.
:meth:`Tensor.backward` walks the nodes in reverse topological order.

Gradients accumulate across ``backward`` calls made with ``retain_graph=True``;
callers zero them explicitly (the training loop does so every step).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on invalid use of the computation graph."""


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # backprop -----------------------------------------------------------

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        The graph is released afterwards unless ``retain_graph`` is set; a
        second call on a released graph raises :class:`GraphError`.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed; pass retain_graph=True to backprop twice")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._parents = ()
                    node._backward = None
                    node._consumed = True


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# reductions and shape ---------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(np.array(x.data[index], dtype=DTYPE), (x,), backward)


def permute_channels(x: Tensor, perm) -> Tensor:
    """Reorder the last axis by a permutation of its indices."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(x.shape[-1])):
        raise ValueError("perm must be a permutation of the channel indices")

    def backward(g):
        full = np.empty_like(g)
        full[..., perm] = g
        return (full,)

    return _make(x.data[..., perm], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# network layers ---------------------------------------------------------


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view of shape [B, H', W', kh, kw, C] over a padded NHWC array."""
    b, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sb, sh, sw, sc = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(b, ho, wo, kh, kw, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,H,W,Cin]`` with ``kernel[kh,kw,Cin,Cout]``.

    No kernel flip is applied. Output spatial size is
    ``(H + 2*padding - kh) // stride + 1`` per axis.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [B,H,W,C], got shape {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D [kh,kw,Cin,Cout], got shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    bsz, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input Cin={cin}, kernel Cin={kcin}")
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel width {kw} exceeds padded input width {w + 2 * padding}")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        wmat = kernel.data[0, 0]
        flat = x.data.reshape(-1, cin)
        out = (flat @ wmat).reshape(bsz, h, w, cout)

        def backward_pointwise(g):
            g2 = g.reshape(-1, cout)
            return ((g2 @ wmat.T).reshape(x.shape), (flat.T @ g2).reshape(kernel.shape))

        return _make(out, (x, kernel), backward_pointwise)

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(bsz * ho * wo, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(bsz, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        dkernel = (cols.T @ g2).reshape(kernel.shape)
        dcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp
        return (dx, dkernel)

    return _make(out, (x, kernel), backward)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias ``[C]`` to the last axis of ``x``."""
    if bias.shape != (x.shape[-1],):
        raise ShapeError(f"bias shape {bias.shape} does not match channel count {x.shape[-1]}")
    axes = tuple(range(x.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def avg_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Mean over ``window x window`` patches taken every ``stride`` pixels."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d input must be 4-D, got shape {x.shape}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    _, h, w, _ = x.shape
    if window > h or window > w:
        raise ShapeError(f"pooling window {window} larger than spatial dims {h}x{w}")
    win = _windows(x.data, window, window, stride)
    ho, wo = win.shape[1], win.shape[2]
    out = win.mean(axis=(3, 4))
    scale = 1.0 / (window * window)

    def backward(g):
        dx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(window):
            for j in range(window):
                dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gs
        return (dx,)

    return _make(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``[B,H,W,C] -> [B,C]``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D, got shape {x.shape}")
    _, h, w, _ = x.shape
    scale = 1.0 / (h * w)
    return _make(x.data.mean(axis=(1, 2)), (x,),
                 lambda g: (np.broadcast_to(g[:, None, None, :] * scale, x.shape).copy(),))


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape ``[Cout, Cin]``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fully_connected expects 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected Cin mismatch: input {x.shape[1]}, weight {weight.shape[1]}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"fully_connected bias shape {bias.shape}, expected ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, backward)


# losses -----------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B,K], got {logits.shape}")
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = _log_softmax(logits.data)
    rows = np.arange(bsz)
    loss = -logp[rows, labels].sum() / bsz

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / bsz),)

    return _make(np.asarray(loss), (logits,), backward)


def kd_divergence(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """``T^2`` times the batch-mean KL(softmax(z_t/T) || softmax(z_s/T)).

    The teacher logits are treated as constants.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    zt = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=DTYPE)
    if zt.shape != student_logits.shape:
        raise ShapeError(f"student {student_logits.shape} and teacher {zt.shape} logits differ in shape")
    t = float(temperature)
    bsz = student_logits.shape[0]
    log_ps = _log_softmax(student_logits.data / t)
    log_pt = _log_softmax(zt / t)
    pt = np.exp(log_pt)
    loss = t * t * (pt * (log_pt - log_ps)).sum() / bsz

    def backward(g):
        return ((np.exp(log_ps) - pt) * (g * t / bsz),)

    return _make(np.asarray(loss), (student_logits,), backward)


def distance(a: Tensor, b, metric: str = "l2sq") -> Tensor:
    """Sum of squared (``l2sq``) or absolute (``l1``) differences over all elements.

    Only ``a`` receives a gradient; ``b`` is a constant target. The L1
    subgradient at zero difference is 0.
    """
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=DTYPE)
    if a.shape != bd.shape:
        raise ShapeError(f"distance operands differ in shape: {a.shape} vs {bd.shape}")
    diff = a.data - bd
    if metric == "l2sq":
        return _make(np.asarray((diff * diff).sum()), (a,), lambda g: (2.0 * g * diff,))
    if metric == "l1":
        return _make(np.asarray(np.abs(diff).sum()), (a,), lambda g: (g * np.sign(diff),))
    raise ValueError(f"unknown metric {metric!r}; expected 'l2sq' or 'l1'")


# optimisation -----------------------------------------------------------


def sgd_step(params: Sequence[Tensor], velocities: Sequence[np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> None:
    """In-place SGD with momentum and L2 weight decay.

    ``v <- momentum*v + grad + weight_decay*param`` then ``param <- param - lr*v``.
    """
    if len(params) != len(velocities):
        raise ValueError("one velocity buffer is needed per parameter")
    for p, v in zip(params, velocities):
        if p.grad is None:
            raise GraphError(f"parameter {p.name or p.shape} has no gradient")
        if v.shape != p.shape:
            raise ShapeError(f"velocity shape {v.shape} does not match parameter {p.shape}")
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
