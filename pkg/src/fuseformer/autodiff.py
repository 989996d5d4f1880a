"""Dense double-precision tensors with a small reverse-mode tape.

Every value is a :class:`Tensor` wrapping a float64 numpy array. Tensors
created through :meth:`Tape.leaf` are tracked; any op that consumes a tracked
tensor appends a node to the same tape. :func:`backward` walks the tape in
reverse and returns adjoints for the leaves.

Convolution follows the cross-correlation convention (no kernel flip) and
accepts either ``[C, H, W]`` or batched ``[N, C, H, W]`` inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Convolution/pooling geometry does not divide exactly."""


class TapeError(RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    backward: BackwardFn | None


@dataclass
class Tape:
    """Append-only record of tracked operations.

    One tape belongs to one thread; nothing here is locked.
    """

    nodes: list[_Node] = field(default_factory=list)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        data = np.array(value, dtype=np.float64)
        t = Tensor(data, name=name)
        t._tape = self
        t._node = self._append("leaf", (), None)
        return t

    def _append(self, op: str, inputs: tuple[int, ...], fn: BackwardFn | None) -> int:
        self.nodes.append(_Node(op, inputs, fn))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "name", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self._node is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, op: str, inputs: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    out = Tensor(out_data)
    tape = None
    for t in inputs:
        if t._tape is not None:
            if tape is not None and t._tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t._tape
    if tape is None:
        return out
    ids = tuple(-1 if t._node is None else t._node for t in inputs)
    out._tape = tape
    out._node = tape._append(op, ids, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * out / bd, bd.shape))

    return _record(out, "div", (a, b), back)


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd * xd, "square", (x,), lambda g: (2.0 * xd * g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- reductions / shape


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), "sum", (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    # divide rather than scale by 1/n so a mean of identical values is exact
    return div(sum_(x, axis, keepdims), float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(x.data[index]), "getitem", (x,), back)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            i != ax and p.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise DimensionError(f"ragged concat: {ref} vs {p.shape} along axis {axis}")
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _record(out, "concat", parts, lambda g: tuple(np.split(g, sizes, axis=ax)))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's leading-dimension batching."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # one GEMM over flattened leading dims instead of a broadcast loop
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _record((a2 @ bd).reshape(lead + (bd.shape[1],)), "matmul", (a, b), back2)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, "matmul", (a, b), back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, "softmax", (x,), back)


# ---------------------------------------------------------------- spatial


def _as_batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"size {n} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _conv2d_forward(xp: np.ndarray, w: np.ndarray, stride: int, ho: int, wo: int):
    k = w.shape[-1]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: [N, Ci, Ho, Wo, k, k]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, Co]
    return out.transpose(0, 3, 1, 2), win


def _conv2d_backward(g, win, w, xp_shape, stride, padding):
    k = w.shape[-1]
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [Co, Ci, k, k]
    cols = np.tensordot(g, w, axes=([1], [0]))  # [N, Ho, Wo, Ci, k, k]
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    ho, wo = g.shape[2], g.shape[3]
    gxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                j : j + (wo - 1) * stride + 1 : stride] += cols[..., i, j]
    h, wd = xp_shape[2] - 2 * padding, xp_shape[3] - 2 * padding
    gx = gxp[:, :, padding : padding + h, padding : padding + wd]
    return gx, gw


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, k, k]``; ``k`` must be odd when ``padding > 0``.
    Optional ``bias`` is ``[C_out]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0 and padding:
        raise GeometryError(f"padded convolution needs an odd kernel, got {k}")
    if stride < 1 or padding < 0:
        raise GeometryError("stride must be >= 1 and padding >= 0")
    xd, squeeze = _as_batched(x)
    if xd.shape[1] != kernel.shape[1]:
        raise DimensionError(f"input has {xd.shape[1]} channels, kernel expects {kernel.shape[1]}")
    ho = conv_output_size(xd.shape[2], k, stride, padding)
    wo = conv_output_size(xd.shape[3], k, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    out, win = _conv2d_forward(xp, kernel.data, stride, ho, wo)
    w = kernel.data
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)
    if squeeze:
        out = out[0]

    def back(g):
        gb = g[None] if squeeze else g
        gx, gw = _conv2d_backward(gb, win, w, xp.shape, stride, padding)
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    return _record(np.ascontiguousarray(out), "conv2d", inputs, back)


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise GeometryError("upsample factor must be >= 1")
    if factor == 1:
        return reshape(x, x.shape)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    shape = x.shape

    def back(g):
        h, w = shape[-2], shape[-1]
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)

    return _record(out, "upsample_nearest", (x,), back)


def max_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k×k max pooling; gradient goes to the first maximum in scan order."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    if k < 1 or h % k or w % k:
        raise GeometryError(f"pool size {k} must divide {h}x{w}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (h // k, k, w // k, k))
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3)
    blocks = blocks.transpose(perm).reshape(lead + (h // k, w // k, k * k))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(lead + (h // k, w // k, k, k))
        inv = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3)
        return (gb.transpose(inv).reshape(lead + (h, w)),)

    return _record(out, "max_pool2d", (x,), back)


# ---------------------------------------------------------------- backward


def backward(output: Tensor) -> "Gradients":
    """Reverse sweep from a scalar output; returns ``{leaf: adjoint}``."""
    if output.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if output._tape is None or output._node is None:
        raise TapeError("output is detached from any tape")
    tape = output._tape
    adj: dict[int, np.ndarray] = {output._node: np.ones_like(output.data)}
    for idx in range(output._node, -1, -1):
        g = adj.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.backward is None:
            adj[idx] = g  # leaf, keep
            continue
        for src, gi in zip(node.inputs, node.backward(g)):
            if src < 0 or gi is None:
                continue
            if src in adj:
                adj[src] = adj[src] + gi
            else:
                adj[src] = gi
    return Gradients(adj)


class Gradients:
    """Maps leaf tensors to adjoints; leaves that did not influence the output map to zeros."""

    def __init__(self, by_node: dict[int, np.ndarray]):
        self._by_node = by_node

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        g = self._by_node.get(leaf._node)
        if g is None:
            return np.zeros_like(leaf.data)
        return np.asarray(g, dtype=np.float64).reshape(leaf.shape)

    def __contains__(self, leaf) -> bool:
        return isinstance(leaf, Tensor) and leaf._node in self._by_node

    def get(self, leaf, default=None):
        return self[leaf] if leaf in self else default


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
               floor: float = 1e-8) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` takes one Tensor per entry of ``inputs`` and returns a scalar Tensor.
    Relative error is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = max(floor, 1e-6 * largest |a|)``. Central differences carry an
    absolute roundoff of about ``|f| * 1e-16 / eps``, so entries many orders
    below the largest gradient entry are judged against that scale instead.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    grads = backward(f(*leaves))
    scale = max((float(np.abs(grads[leaf]).max(initial=0.0)) for leaf in leaves), default=0.0)
    floor = max(floor, 1e-6 * scale)
    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = grads[leaves[i]]
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig - eps
            fm = f(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
