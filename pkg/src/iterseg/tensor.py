"""Dense tensors with reverse-mode differentiation.

Only the operations the segmentation network needs are provided: 3x3 and
1x1 convolutions, stride-2 transposed convolution, 2x2 max-pooling, channel
concatenation, a handful of elementwise ops and reductions. There is no
general broadcasting; binary ops take operands of identical shape or a
constant (python scalar / ndarray of the same shape).

Gradients accumulate across ``backward`` calls. Call ``zero_grad`` (or
``SGD.zero_grad``) before each backward pass.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

_creation_order = itertools.count()

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """N-dimensional float array that records how it was produced.

    Activations use N x C x H x W layout, conv kernels C_out x C_in x K x K and
    transposed-conv kernels C_in x C_out x K x K.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._order = next(_creation_order)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self) -> "Tensor":
        return mul(tensor_sum(self), 1.0 / self.data.size)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def topological_order(root: Tensor) -> list[Tensor]:
    """Every node reachable from ``root`` that takes part in differentiation,
    in the order it was created during the forward pass."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._order)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor that feeds ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        if node.is_leaf:
            node._accumulate(g)
            continue
        for parent, pg in node._backward(g):
            if parent is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise ops and reductions


def _operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    # constants take the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    # a 0-d operand acts as a scalar; anything else must match exactly
    if a.data.ndim and b.data.ndim and a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return a, b


def add(a, b) -> Tensor:
    a, b = _operands(a, b, "add")

    def _bw(g):
        return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(g, b.shape)))

    return _result(a.data + b.data, (a, b), _bw)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # scalar operands receive the summed gradient
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b, "sub")

    def _bw(g):
        return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(-g, b.shape)))

    return _result(a.data - b.data, (a, b), _bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _result(-a.data, (a,), lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b, "mul")

    def _bw(g):
        return ((a, _reduce_to(g * b.data, a.shape)), (b, _reduce_to(g * a.data, b.shape)))

    return _result(a.data * b.data, (a, b), _bw)


def div(a, b) -> Tensor:
    a, b = _operands(a, b, "div")
    out = a.data / b.data

    def _bw(g):
        return (
            (a, _reduce_to(g / b.data, a.shape)),
            (b, _reduce_to(-g * out / b.data, b.shape)),
        )

    return _result(out, (a, b), _bw)


def square(a) -> Tensor:
    a = _wrap(a)
    return _result(a.data * a.data, (a,), lambda g: ((a, 2.0 * a.data * g),))


def tensor_sum(a, axis=None) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis)

    def _bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        return ((a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()),)

    return _result(np.asarray(out), (a,), _bw)


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: ((x, g * mask),))


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    # keep the output strictly inside (0, 1) at the dtype's resolution
    eps = np.finfo(s.dtype).eps
    s = np.clip(s, eps, 1.0 - eps).astype(x.dtype, copy=False)
    return _result(s, (x,), lambda g: ((x, g * s * (1.0 - s)),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two N x C x H x W tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-d tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def _bw(g):
        return ((a, g[:, :ca]), (b, g[:, ca:]))

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), _bw)


# ---------------------------------------------------------------------------
# convolution kernels (plain numpy, im2col layout)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else x[:, :, p:-p, p:-p]


def _to_cm(x: np.ndarray) -> np.ndarray:
    """N x C x H x W -> C x (N*H*W), the layout every conv GEMM works in."""
    n, c = x.shape[:2]
    return x.transpose(1, 0, 2, 3).reshape(c, -1)


def _from_cm(y: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(y.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded N x C x Hp x Wp -> (C*k*k) x (N*ho*wo) column matrix."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back into N x C x Hp x Wp."""
    n, c, hp, wp = padded_shape
    cols = cols.reshape(c, k, k, n, ho, wo)
    xt = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return xt.transpose(1, 0, 2, 3)


def _check_conv_args(x: Tensor, w: Tensor, b: Optional[Tensor], cin_axis: int, cout_axis: int, op: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: input must be N x C x H x W, got {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{op}: kernel must be 4-d with square taps, got {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels but kernel expects {w.shape[cin_axis]}")
    if b is not None and b.shape != (w.shape[cout_axis],):
        raise ShapeError(f"{op}: bias shape {b.shape} does not match {w.shape[cout_axis]} output channels")


def _with_bias(out_cm: np.ndarray, b: Optional[Tensor]) -> np.ndarray:
    if b is not None:
        out_cm += b.data[:, None]
    return out_cm


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero 'same' padding (k // 2) and optional stride.

    With stride 1 the spatial size is preserved; with stride 2 an even input
    is halved.
    """
    _check_conv_args(x, w, b, 1, 0, "conv2d")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    p = k // 2
    n, c, h, wd = x.shape
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    co = w.shape[0]
    padded_shape = (n, c, h + 2 * p, wd + 2 * p)
    cols = _im2col(_pad(x.data, p), k, stride, ho, wo)
    wmat = w.data.reshape(co, -1)
    out = _from_cm(_with_bias(wmat @ cols, b), n, ho, wo)

    def _bw(g):
        g2 = _to_cm(g)
        gx = None
        if x.requires_grad:
            gx = _unpad(_col2im(wmat.T @ g2, padded_shape, k, stride, ho, wo), p)
        grads = [(x, gx), (w, (g2 @ cols.T).reshape(w.shape))]
        if b is not None:
            grads.append((b, g2.sum(axis=1)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, _bw)


def conv2d_1x1(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-pixel linear map over channels."""
    _check_conv_args(x, w, b, 1, 0, "conv2d_1x1")
    if w.shape[2:] != (1, 1):
        raise ShapeError(f"conv2d_1x1: kernel must be 1x1, got {w.shape}")
    n, c, h, wd = x.shape
    co = w.shape[0]
    wmat = w.data.reshape(co, c)
    xf = _to_cm(x.data)
    out = _from_cm(_with_bias(wmat @ xf, b), n, h, wd)

    def _bw(g):
        g2 = _to_cm(g)
        grads = [(x, _from_cm(wmat.T @ g2, n, h, wd)), (w, (g2 @ xf.T).reshape(w.shape))]
        if b is not None:
            grads.append((b, g2.sum(axis=1)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, _bw)


def transposed_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution producing exactly 2H x 2W.

    ``w`` has shape C_in x C_out x K x K. The forward map is the linear
    adjoint of ``conv2d(., w, stride=2)`` taken from C_out to C_in channels.
    """
    _check_conv_args(x, w, b, 0, 1, "transposed_conv2d")
    if stride != 2:
        raise ShapeError("transposed_conv2d only supports stride 2")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"transposed_conv2d: kernel size must be odd, got {k}")
    p = k // 2
    n, ci, h, wd = x.shape
    co = w.shape[1]
    ho, wo = 2 * h, 2 * wd
    wmat = w.data.reshape(ci, co * k * k)
    xf = _to_cm(x.data)
    full = _col2im(wmat.T @ xf, (n, co, ho + 2 * p, wo + 2 * p), k, stride, h, wd)
    out = np.ascontiguousarray(_unpad(full, p))
    if b is not None:
        out += b.data.reshape(1, co, 1, 1)

    def _bw(g):
        gcols = _im2col(_pad(g, p), k, stride, h, wd)
        grads = [(x, _from_cm(wmat @ gcols, n, h, wd)), (w, (xf @ gcols.T).reshape(w.shape))]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, _bw)


def maxpool2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping 2x2 max-pool.

    Returns the pooled tensor and the argmax index (0..3, row-major inside the
    window) of each output cell. Ties go to the first index.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even H and W, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return ((x, gx),)

    return _result(out, (x,), _bw), idx


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    velocity: Sequence[np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """One in-place momentum-SGD update: ``v <- momentum*v + g; p <- p - lr*v``.

    Parameters whose gradient is None are left untouched.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        if lr:
            p.data -= (lr * v).astype(p.dtype, copy=False)


class SGD:
    """Momentum SGD over a fixed list of parameter tensors."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 0.01,
        momentum: float = 0.9,
        clip_norm: Optional[float] = None,
    ):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        if clip_norm is not None and clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {clip_norm}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in self.params if p.grad is not None)))

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            # rescale the whole gradient so its global L2 norm is at most clip_norm
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = [None if g is None else (g * scale).astype(g.dtype, copy=False) for g in grads]
        sgd_step(self.params, grads, self.velocity, self.lr, self.momentum)
