"""Tape-based reverse-mode differentiation on dense float64 arrays.

Just enough operator coverage for a small convolutional segmentation
network with attention-based fusion: convolution, pooling, resizing,
concatenation, batched matrix products, softmax, and a fused softmax
cross-entropy. Every op records a closure that routes the upstream
gradient to its inputs; ``backward`` replays them in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """Value plus (after backward) gradient of the loss w.r.t. it."""

    __slots__ = ("data", "grad", "name", "_parents", "_backward")

    def __init__(self, data, parents: tuple["Tensor", ...] = (), name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = parents
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if t.grad is None:
        t.grad = grad
    else:
        t.grad = t.grad + grad


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``root`` depends on."""
    if root.data.size != 1:
        raise ValueError("backward needs a scalar root")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"add shape mismatch {x.shape} vs {y.shape}")
    out = Tensor(x.data + y.data, (x, y))

    def _bw() -> None:
        _accumulate(x, out.grad)
        _accumulate(y, out.grad)

    out._backward = _bw
    return out


def mul_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, (x,))

    def _bw() -> None:
        _accumulate(x, out.grad * c)

    out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), (x,))

    def _bw() -> None:
        _accumulate(x, out.grad * (x.data > 0.0))

    out._backward = _bw
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape), (x,))

    def _bw() -> None:
        _accumulate(x, out.grad.reshape(x.shape))

    out._backward = _bw
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.transpose(axes), (x,))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def _bw() -> None:
        _accumulate(x, out.grad.transpose(inverse))

    out._backward = _bw
    return out


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat needs at least one tensor")
    out = Tensor(np.concatenate([x.data for x in xs], axis=1), tuple(xs))
    widths = [x.shape[1] for x in xs]

    def _bw() -> None:
        start = 0
        for x, width in zip(xs, widths):
            _accumulate(x, out.grad[:, start : start + width])
            start += width

    out._backward = _bw
    return out


def _im2col(padded: np.ndarray, kh: int, kw: int, out_h: int, out_w: int) -> np.ndarray:
    b, c = padded.shape[:2]
    cols = np.empty((b, c, kh * kw, out_h, out_w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = padded[:, :, i : i + out_h, j : j + out_w]
    return cols.reshape(b, c * kh * kw, out_h * out_w)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution; odd kernels only.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,).
    """
    batch, cin, height, width = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernels must have odd spatial dims")
    ph, pw = kh // 2, kw // 2

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(padded, kh, kw, height, width)
    wmat = w.data.reshape(cout, -1)
    vals = np.matmul(wmat, cols)
    if b is not None:
        vals = vals + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(vals.reshape(batch, cout, height, width), parents)

    def _bw() -> None:
        gout = out.grad.reshape(batch, cout, height * width)
        _accumulate(w, np.matmul(gout, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if b is not None:
            _accumulate(b, gout.sum(axis=(0, 2)))
        dcols = np.matmul(wmat.T, gout).reshape(batch, cin, kh * kw, height, width)
        dpadded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                dpadded[:, :, i : i + height, j : j + width] += dcols[:, :, i * kw + j]
        _accumulate(x, dpadded[:, :, ph : ph + height, pw : pw + width])

    out._backward = _bw
    return out


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling; factor 1 is a no-op."""
    if factor == 1:
        return x
    batch, ch, height, width = x.shape
    if height % factor or width % factor:
        raise ValueError(f"spatial dims {height}x{width} not divisible by {factor}")
    oh, ow = height // factor, width // factor
    blocks = x.data.reshape(batch, ch, oh, factor, ow, factor)
    out = Tensor(blocks.mean(axis=(3, 5)), (x,))

    def _bw() -> None:
        g = out.grad[:, :, :, None, :, None] / (factor * factor)
        _accumulate(x, np.broadcast_to(g, (batch, ch, oh, factor, ow, factor)).reshape(x.shape))

    out._backward = _bw
    return out


def resize_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor resize by an integer factor.

    Positive factor upsamples by pixel repetition; negative factor -f
    downsamples by keeping every f-th pixel (top-left of each block).
    """
    if factor == 1:
        return x
    batch, ch, height, width = x.shape
    if factor >= 2:
        out = Tensor(
            x.data.repeat(factor, axis=2).repeat(factor, axis=3), (x,)
        )

        def _bw_up() -> None:
            g = out.grad.reshape(batch, ch, height, factor, width, factor)
            _accumulate(x, g.sum(axis=(3, 5)))

        out._backward = _bw_up
        return out

    f = -factor
    if f < 2 or height % f or width % f:
        raise ValueError(f"cannot downsample {height}x{width} by {f}")
    out = Tensor(x.data[:, :, ::f, ::f], (x,))

    def _bw_down() -> None:
        g = np.zeros_like(x.data)
        g[:, :, ::f, ::f] = out.grad
        _accumulate(x, g)

    out._backward = _bw_down
    return out


def linear_lastdim(x: Tensor, w: Tensor) -> Tensor:
    """Matrix product over the trailing axis: (..., din) @ (din, dout)."""
    out = Tensor(x.data @ w.data, (x, w))

    def _bw() -> None:
        _accumulate(x, out.grad @ w.data.T)
        flat_x = x.data.reshape(-1, x.shape[-1])
        flat_g = out.grad.reshape(-1, out.grad.shape[-1])
        _accumulate(w, flat_x.T @ flat_g)

    out._backward = _bw
    return out


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """(B, n, m) @ (B, m, l) -> (B, n, l)."""
    out = Tensor(np.matmul(a.data, b.data), (a, b))

    def _bw() -> None:
        _accumulate(a, np.matmul(out.grad, b.data.transpose(0, 2, 1)))
        _accumulate(b, np.matmul(a.data.transpose(0, 2, 1), out.grad))

    out._backward = _bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, (x,))

    def _bw() -> None:
        g = out.grad
        _accumulate(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    out._backward = _bw
    return out


def softmax_cross_entropy(
    logits: Tensor, labels: np.ndarray, ignore_index: int = 255
) -> Tensor:
    """Mean cross-entropy over non-ignored pixels, with fused backward.

    logits: (B, K, H, W); labels: (B, H, W) with values in [0, K) or
    ignore_index. The gradient placed on ``logits`` is
    (softmax - onehot) / count on counted pixels and zero elsewhere.
    All pixels ignored yields a loss of exactly 0 with a zero gradient.
    """
    batch, k, height, width = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (batch, height, width):
        raise ValueError(f"labels shape {labels.shape} != {(batch, height, width)}")
    mask = labels != ignore_index
    bad = mask & ((labels < 0) | (labels >= k))
    if np.any(bad):
        raise ValueError("label out of range for logits channels")
    count = int(mask.sum())

    if count == 0:
        out = Tensor(0.0, (logits,))

        def _bw_empty() -> None:
            _accumulate(logits, np.zeros_like(logits.data))

        out._backward = _bw_empty
        return out

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(e.sum(axis=1, keepdims=True))

    safe = np.where(mask, labels, 0).astype(np.int64)
    bidx, hidx, widx = np.indices(labels.shape)
    picked = logp[bidx, safe, hidx, widx]
    loss = -float(picked[mask].sum()) / count
    out = Tensor(loss, (logits,))

    def _bw() -> None:
        onehot_grad = p.copy()
        flat = onehot_grad[bidx, safe, hidx, widx]
        onehot_grad[bidx, safe, hidx, widx] = flat - 1.0
        onehot_grad *= mask[:, None, :, :] / count
        _accumulate(logits, onehot_grad * out.grad)

    out._backward = _bw
    return out
