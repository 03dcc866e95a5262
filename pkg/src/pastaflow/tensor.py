"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors hold row-major float64 arrays of at most 4 extents, laid out as
(batch, height, width, channels) for image-like data. The op set is exactly
what the forecaster needs: conv2d (dense and depthwise, same zero padding),
fully connected layers, relu/sigmoid/tanh, global avg/max pooling,
element-wise add/mul (with per-channel broadcast), Huber loss, and reshape.

Every op validates shapes, rejects non-finite outputs, and registers a
backward closure. Summation order inside kernels is fixed (row-major over
kernel offsets), so forward and backward are bit-reproducible for identical
inputs. Gradients accumulate additively when a tensor is reused.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError


class Tensor:
    """A node in the computation graph: a value plus backward plumbing."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.asarray(value, dtype=np.float64, order="C")
        if arr.ndim > 4:
            raise ShapeError(f"tensors support at most 4 extents, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Tensor], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def zeros(shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def _result(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _check_4d(x: Tensor, name: str) -> tuple[int, int, int, int]:
    if x.value.ndim != 4:
        raise ShapeError(f"{name} must have 4 extents (batch, height, width, channels), got {x.shape}")
    return x.value.shape


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, mode: str = "dense") -> Tensor:
    """Same-padding 2-D convolution over (batch, height, width, channels).

    Dense mode takes a kernel of shape (k, k, c_in, c_out); depthwise mode
    takes per-channel kernels of shape (k, k, c) and keeps the channel count.
    k must be odd; padding is zeros, so spatial extents are preserved.
    """
    b, h, w, cin = _check_4d(x, "conv2d input")
    kv = kernel.value
    if mode == "dense":
        if kv.ndim != 4 or kv.shape[0] != kv.shape[1]:
            raise ShapeError(f"dense kernel must be (k, k, c_in, c_out), got {kv.shape}")
        k, _, kcin, cout = kv.shape
        if kcin != cin:
            raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    elif mode == "depthwise":
        if kv.ndim != 3 or kv.shape[0] != kv.shape[1]:
            raise ShapeError(f"depthwise kernel must be (k, k, c), got {kv.shape}")
        k, _, cout = kv.shape
        if cout != cin:
            raise ShapeError(f"depthwise kernel has {cout} channels, input has {cin}")
    else:
        raise ShapeError(f"unknown conv2d mode {mode!r}")
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if bias.value.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.value.shape}")

    p = k // 2
    xp = np.zeros((b, h + 2 * p, w + 2 * p, cin))
    xp[:, p : p + h, p : p + w, :] = x.value
    out = np.empty((b, h, w, cout))
    out[:] = bias.value
    if mode == "dense":
        for di in range(k):
            for dj in range(k):
                out += xp[:, di : di + h, dj : dj + w, :] @ kv[di, dj]
    else:
        for di in range(k):
            for dj in range(k):
                out += xp[:, di : di + h, dj : dj + w, :] * kv[di, dj]

    def backward(node: Tensor) -> None:
        g = node.grad
        if kernel.requires_grad:
            for di in range(k):
                for dj in range(k):
                    patch = xp[:, di : di + h, dj : dj + w, :]
                    if mode == "dense":
                        kernel.grad[di, dj] += np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
                    else:
                        kernel.grad[di, dj] += (patch * g).sum(axis=(0, 1, 2))
        if bias.requires_grad:
            bias.grad += g.sum(axis=(0, 1, 2))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    if mode == "dense":
                        gxp[:, di : di + h, dj : dj + w, :] += g @ kv[di, dj].T
                    else:
                        gxp[:, di : di + h, dj : dj + w, :] += g * kv[di, dj]
            x.grad += gxp[:, p : p + h, p : p + w, :]

    return _result(out, (x, kernel, bias), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map per batch row: (batch, d_in) @ (d_in, d_out) + bias."""
    if x.value.ndim != 2:
        raise ShapeError(f"fully_connected input must be (batch, d_in), got {x.shape}")
    if weight.value.ndim != 2 or weight.value.shape[0] != x.value.shape[1]:
        raise ShapeError(
            f"weight shape {weight.value.shape} does not match input features {x.value.shape[1]}"
        )
    dout = weight.value.shape[1]
    if bias.value.shape != (dout,):
        raise ShapeError(f"bias must have shape ({dout},), got {bias.value.shape}")
    out = x.value @ weight.value + bias.value

    def backward(node: Tensor) -> None:
        g = node.grad
        if x.requires_grad:
            x.grad += g @ weight.value.T
        if weight.requires_grad:
            weight.grad += x.value.T @ g
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)

    return _result(out, (x, weight, bias), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    """Element-wise relu, sigmoid, or tanh."""
    if kind == "relu":
        out = np.maximum(x.value, 0.0)

        def backward(node: Tensor) -> None:
            if x.requires_grad:
                x.grad += node.grad * (x.value > 0.0)

    elif kind == "sigmoid":
        # 0.5 * (1 + tanh(x/2)) is overflow-free for large |x|
        out = 0.5 * (1.0 + np.tanh(0.5 * x.value))

        def backward(node: Tensor) -> None:
            if x.requires_grad:
                x.grad += node.grad * out * (1.0 - out)

    elif kind == "tanh":
        out = np.tanh(x.value)

        def backward(node: Tensor) -> None:
            if x.requires_grad:
                x.grad += node.grad * (1.0 - out * out)

    else:
        raise ShapeError(f"unknown activation kind {kind!r}")
    return _result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def global_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce the full spatial extent per channel: (b, h, w, c) -> (b, 1, 1, c)."""
    b, h, w, c = _check_4d(x, "global_pool input")
    if h < 1 or w < 1:
        raise ShapeError("global_pool needs a non-empty spatial extent")
    if kind == "avg":
        out = x.value.mean(axis=(1, 2), keepdims=True)

        def backward(node: Tensor) -> None:
            if x.requires_grad:
                x.grad += node.grad / (h * w)

    elif kind == "max":
        flat = x.value.reshape(b, h * w, c)
        idx = flat.argmax(axis=1)  # first max in row-major order
        out = np.take_along_axis(flat, idx[:, None, :], axis=1).reshape(b, 1, 1, c)

        def backward(node: Tensor) -> None:
            if x.requires_grad:
                gflat = np.zeros((b, h * w, c))
                np.put_along_axis(gflat, idx[:, None, :], node.grad.reshape(b, 1, c), axis=1)
                x.grad += gflat.reshape(b, h, w, c)

    else:
        raise ShapeError(f"unknown pool kind {kind!r}")
    return _result(out, (x,), backward)


def _broadcast_ok(a: Tensor, b: Tensor) -> bool:
    # b of shape (batch, 1, 1, c) replicates spatially over a of shape (batch, h, w, c)
    return (
        a.value.ndim == 4
        and b.value.ndim == 4
        and b.value.shape[0] == a.value.shape[0]
        and b.value.shape[1] == b.value.shape[2] == 1
        and b.value.shape[3] == a.value.shape[3]
    )


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Element-wise add or mul; b may be (batch, 1, 1, c) broadcast over a."""
    broadcast = a.value.shape != b.value.shape
    if broadcast and not _broadcast_ok(a, b):
        raise ShapeError(f"incompatible shapes {a.value.shape} and {b.value.shape}")
    if kind == "add":
        out = a.value + b.value

        def backward(node: Tensor) -> None:
            g = node.grad
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g.sum(axis=(1, 2), keepdims=True) if broadcast else g

    elif kind == "mul":
        out = a.value * b.value

        def backward(node: Tensor) -> None:
            g = node.grad
            if a.requires_grad:
                a.grad += g * b.value
            if b.requires_grad:
                gb = g * a.value
                b.grad += gb.sum(axis=(1, 2), keepdims=True) if broadcast else gb

    else:
        raise ShapeError(f"unknown elementwise kind {kind!r}")
    return _result(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def huber_loss(pred: Tensor, target: Tensor, delta: float) -> Tensor:
    """Mean Huber loss: 0.5*r^2 inside |r| <= delta, linear outside."""
    if pred.value.shape != target.value.shape:
        raise ShapeError(f"pred shape {pred.value.shape} != target shape {target.value.shape}")
    if not delta > 0:
        raise ShapeError(f"delta must be positive, got {delta}")
    r = pred.value - target.value
    absr = np.abs(r)
    per_cell = np.where(absr <= delta, 0.5 * r * r, delta * (absr - 0.5 * delta))
    n = r.size
    out = np.asarray(per_cell.mean())

    def backward(node: Tensor) -> None:
        g = node.grad * np.clip(r, -delta, delta) / n
        if pred.requires_grad:
            pred.grad += g
        if target.requires_grad:
            target.grad -= g

    return _result(out, (pred, target), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """View the same values under a new shape (sizes must agree)."""
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.value.size:
        raise ShapeError(f"cannot reshape {x.value.shape} to {shape}")
    if len(shape) > 4:
        raise ShapeError(f"tensors support at most 4 extents, got {shape}")
    out = x.value.reshape(shape)

    def backward(node: Tensor) -> None:
        if x.requires_grad:
            x.grad += node.grad.reshape(x.value.shape)

    return _result(out, (x,), backward)


def backward(loss: Tensor) -> None:
    """Populate gradients for every tensor reachable from a scalar loss.

    Gradients are zero-initialized on every pass, then accumulated
    additively, so reusing a tensor in several places just sums the paths.
    """
    if loss.value.ndim != 0:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.value.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    for node in topo:
        node.grad = np.zeros_like(node.value)
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)
