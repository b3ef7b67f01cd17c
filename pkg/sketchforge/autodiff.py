"""
Minimal reverse-mode differentiation over the operations the training
pipeline uses.

A `Tape` records every operation whose inputs require gradients, in
execution order, which is also a valid topological order for the reverse
sweep. Operations on constants are evaluated eagerly and never recorded, so
the same forward code doubles as plain numpy inference.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from sketchforge import tensor
from sketchforge.errors import ShapeError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int]


class Var:
    """A value in the computation graph."""

    __slots__ = ("value", "tape", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, tape: Optional["Tape"] = None, parents: Tuple["Var", ...] = (),
                 backward_fn: Optional[Callable] = None, requires_grad: bool = False,
                 name: Optional[str] = None):
        self.value = np.asarray(value)
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        kind = "param" if self.name else ("node" if self.requires_grad else "const")
        return f"Var({kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other: float):
        return mul(self, 1.0 / other)


class Tape:
    """Records one forward pass and sweeps it backwards."""

    def __init__(self):
        self.nodes: List[Var] = []
        self.leaves: Dict[str, Var] = {}

    def leaf(self, name: str, value: np.ndarray) -> Var:
        var = Var(value, tape=self, requires_grad=True, name=name)
        self.leaves[name] = var
        return var

    def record(self, var: Var) -> Var:
        self.nodes.append(var)
        return var

    def reset(self) -> None:
        self.nodes = []
        self.leaves = {}

    def backward(self, loss: Var) -> Dict[str, np.ndarray]:
        """
        Gradient of a recorded scalar with respect to every leaf.

        Leaves the loss does not depend on get zero gradients. The tape is
        cleared afterwards.
        """
        if not self.nodes:
            raise TapeError("backward called without a recorded forward pass")
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

        result = {
            name: grads.get(id(var), np.zeros_like(var.value)).astype(var.value.dtype, copy=False)
            for name, var in self.leaves.items()
        }
        self.reset()
        return result


def constant(value: ArrayLike) -> Var:
    return value if isinstance(value, Var) else Var(value)


def detach(var: Var) -> Var:
    return Var(var.value)


def _make(value: np.ndarray, parents: Sequence[Var], backward_fn: Callable) -> Var:
    tape = next((p.tape for p in parents if p.requires_grad), None)
    if tape is None:
        return Var(value)
    return tape.record(Var(value, tape=tape, parents=tuple(parents), backward_fn=backward_fn,
                           requires_grad=True))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast dimensions so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


# ============ ELEMENTWISE ============

def add(a, b) -> Var:
    a, b = constant(a), constant(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b) -> Var:
    a, b = constant(a), constant(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b) -> Var:
    a, b = constant(a), constant(b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), backward)


def square(a: Var) -> Var:
    def backward(g):
        return (2.0 * a.value * g,)

    return _make(a.value * a.value, (a,), backward)


def relu(a: Var) -> Var:
    def backward(g):
        return (g * (a.value > 0),)

    return _make(tensor.relu(a.value), (a,), backward)


def leaky_relu(a: Var, slope: float = 0.2) -> Var:
    positive = a.value > 0

    def backward(g):
        return (np.where(positive, g, slope * g),)

    return _make(np.where(positive, a.value, slope * a.value), (a,), backward)


def sigmoid(a: Var) -> Var:
    out = expit(a.value)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


# ============ REDUCTIONS ============

def total(a: Var) -> Var:
    """Sum of every element."""
    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.value.dtype),)

    return _make(a.value.sum(), (a,), backward)


def mean(a: Var) -> Var:
    count = a.value.size

    def backward(g):
        return (np.broadcast_to(g / count, a.shape).astype(a.value.dtype),)

    return _make(a.value.mean(), (a,), backward)


# ============ IMAGE OPS (N x C x H x W) ============

def _require_batch(a: Var, op: str) -> None:
    if a.value.ndim != 4:
        raise ShapeError(f"{op} expects an N x C x H x W batch, got shape {a.shape}")


def conv2d(x: Var, weight: Var, bias: Optional[Var] = None, stride: int = 1, pad: int = 0) -> Var:
    """Zero-padded correlation; forward delegates to tensor.conv2d_valid."""
    x, weight = constant(x), constant(weight)
    _require_batch(x, "conv2d")
    padded = tensor.pad2d(x.value, pad)
    out = tensor.conv2d_valid(padded, weight.value, stride)
    parents = [x, weight]
    if bias is not None:
        bias = constant(bias)
        out = out + bias.value[None, :, None, None]
        parents.append(bias)

    def backward(g):
        kh, kw = weight.shape[2:]
        out_h, out_w = g.shape[2:]
        grads = []

        if x.requires_grad:
            dwin = np.tensordot(g, weight.value, axes=([1], [0]))  # N, H', W', C, kh, kw
            dpad = np.zeros(padded.shape, dtype=np.result_type(g, weight.value))
            for a in range(kh):
                rows = slice(a, a + stride * (out_h - 1) + 1, stride)
                for b in range(kw):
                    cols = slice(b, b + stride * (out_w - 1) + 1, stride)
                    dpad[:, :, rows, cols] += dwin[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            height, width = x.shape[2:]
            grads.append(dpad[:, :, pad:pad + height, pad:pad + width])
        else:
            grads.append(None)

        if weight.requires_grad:
            windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
            grads.append(np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        else:
            grads.append(None)

        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return _make(out, parents, backward)


def max_pool2(x: Var) -> Var:
    x = constant(x)
    if not x.requires_grad:
        return Var(tensor.max_pool2(x.value))
    _require_batch(x, "max_pool2")

    n, c, height, width = x.shape
    pad_h, pad_w = height % 2, width % 2
    padded = np.pad(x.value, [(0, 0), (0, 0), (0, pad_h), (0, pad_w)], constant_values=-np.inf)
    out_h, out_w = (height + pad_h) // 2, (width + pad_w) // 2
    blocks = padded.reshape(n, c, out_h, 2, out_w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, out_h, out_w, 4)
    winner = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(routed, winner, g[..., None], axis=-1)
        full = routed.reshape(n, c, out_h, out_w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (full.reshape(n, c, 2 * out_h, 2 * out_w)[:, :, :height, :width],)

    return _make(out, (x,), backward)


def repeat_channels(x: Var, count: int) -> Var:
    """Replicate a single-channel batch `count` times along the channel axis."""
    x = constant(x)
    _require_batch(x, "repeat_channels")
    if x.shape[1] != 1:
        raise ShapeError(f"repeat_channels expects one channel, got {x.shape[1]}")

    def backward(g):
        return (g.sum(axis=1, keepdims=True),)

    return _make(np.repeat(x.value, count, axis=1), (x,), backward)


def normalize_channels(x: Var, channel_mean: np.ndarray, channel_std: np.ndarray) -> Var:
    x = constant(x)
    mean_ = channel_mean.astype(x.value.dtype)[None, :, None, None]
    std_ = channel_std.astype(x.value.dtype)[None, :, None, None]

    def backward(g):
        return (g / std_,)

    return _make((x.value - mean_) / std_, (x,), backward)


def patch_sq_error(fm: Var, targets: np.ndarray) -> Var:
    """
    Per-sample sum of squared differences between the dense k x k patches of
    `fm` (N x C x H x W) and fixed target patches (N x m x C x k x k).

    Returns:
        Var of shape (N,)
    """
    fm = constant(fm)
    _require_batch(fm, "patch_sq_error")
    n, channels, height, width = fm.shape
    if targets.ndim != 5 or targets.shape[0] != n or targets.shape[2] != channels:
        raise ShapeError(f"patch targets {targets.shape} do not fit feature batch {fm.shape}")
    k = targets.shape[3]
    rows, cols = height - k + 1, width - k + 1
    if rows < 1 or cols < 1 or targets.shape[1] != rows * cols:
        raise ShapeError(
            f"patch grid mismatch: feature map {height}x{width} with k={k} gives "
            f"{max(rows, 0) * max(cols, 0)} patches, targets hold {targets.shape[1]}"
        )

    windows = sliding_window_view(fm.value, (k, k), axis=(2, 3))
    patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, rows * cols, channels, k, k)
    diff = patches - targets.astype(fm.value.dtype, copy=False)
    out = np.square(diff).reshape(n, -1).sum(axis=1)

    def backward(g):
        dpatch = (2.0 * diff * g[:, None, None, None, None]).reshape(n, rows, cols, channels, k, k)
        dx = np.zeros(fm.shape, dtype=dpatch.dtype)
        for a in range(k):
            for b in range(k):
                dx[:, :, a:a + rows, b:b + cols] += dpatch[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        return (dx,)

    return _make(out, (fm,), backward)


def total_variation(x: Var) -> Var:
    """Per-sample sum of squared vertical and horizontal neighbour differences, shape (N,)."""
    x = constant(x)
    _require_batch(x, "total_variation")
    dv = x.value[:, :, 1:, :] - x.value[:, :, :-1, :]
    dh = x.value[:, :, :, 1:] - x.value[:, :, :, :-1]
    out = np.square(dv).sum(axis=(1, 2, 3)) + np.square(dh).sum(axis=(1, 2, 3))

    def backward(g):
        scale = 2.0 * g[:, None, None, None]
        gx = np.zeros(x.shape, dtype=np.result_type(x.value, g))
        gx[:, :, 1:, :] += scale * dv
        gx[:, :, :-1, :] -= scale * dv
        gx[:, :, :, 1:] += scale * dh
        gx[:, :, :, :-1] -= scale * dh
        return (gx,)

    return _make(out, (x,), backward)
