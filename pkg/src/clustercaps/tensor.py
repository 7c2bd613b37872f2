"""Minimal float64 array type with reverse-mode differentiation.

Only the operations needed by the cluster-routing layers, the heads and the
losses are provided.  Elementwise binary operations accept operands of
identical shape or a Python scalar; anything else must be expanded
explicitly with :func:`broadcast_to`.

Every tensor created by an operation receives a sequence number from a
process-wide counter.  :meth:`Tensor.backward` visits the reachable nodes in
strictly decreasing sequence number, i.e. the exact reverse of the order in
which they were recorded.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
LOG_EPS = 1e-8
LN_EPS = 1e-5

_seq = itertools.count()
_grad_enabled = True


class DomainError(ValueError):
    """Raised when log/sqrt receive arguments outside their domain."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense row-major float64 array, optionally attached to the graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.seq = next(_seq)
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _record(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.seq = next(_seq)
        out.name = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- differentiation ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.seq in nodes:
                continue
            nodes[node.seq] = node
            stack.extend(node._parents)
        grads: dict[int, np.ndarray] = {self.seq: np.ones_like(self.data)}
        for seq in sorted(nodes, reverse=True):
            node = nodes[seq]
            g = grads.pop(seq, None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: gradients from all uses are summed
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.seq)
                grads[parent.seq] = pg if prev is None else prev + pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False, order_free=False):
        return sum_(self, axis, keepdims, order_free)

    def mean(self, axis=None, keepdims=False, order_free=False):
        return mean(self, axis, keepdims, order_free)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return Tensor._record(a.data + b, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return Tensor._record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return Tensor._record(a.data - b, (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return Tensor._record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product (or scaling by a Python number)."""
    if _is_scalar(b):
        return Tensor._record(a.data * b, (a,), lambda g: (g * b,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    """Hadamard division (or division by a Python number)."""
    if _is_scalar(b):
        return Tensor._record(a.data / b, (a,), lambda g: (g / b,))
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._record(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return Tensor._record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log.  Callers add the guard epsilon; non-positive input aborts."""
    ad = a.data
    if not np.all(ad > 0):
        bad = np.argwhere(~(ad > 0))[0]
        raise DomainError(f"log of non-positive value {ad[tuple(bad)]!r} at index {tuple(bad)}")
    return Tensor._record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    """Square root.  The derivative at exactly 0 is taken to be 0."""
    ad = a.data
    if np.any(ad < 0):
        bad = np.argwhere(ad < 0)[0]
        raise DomainError(f"sqrt of negative value {ad[tuple(bad)]!r} at index {tuple(bad)}")
    out = np.sqrt(ad)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return Tensor._record(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._record(out, (a,), lambda g: (g * out * (1.0 - out),))


# -- reductions and shape ------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False, order_free: bool = False) -> Tensor:
    """Sum over ``axis``.

    With ``order_free`` the values are sorted along the (single) axis first,
    so the result is bitwise independent of element order there.
    """
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    data = a.data
    if order_free:
        if len(axes) != 1:
            raise ValueError("order_free sum needs exactly one axis")
        data = np.sort(data, axis=axes[0])
    out = data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._record(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False, order_free: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims, order_free) / float(n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit expansion of size-1 axes (same rank required)."""
    shape = tuple(shape)
    if a.ndim != len(shape):
        raise ValueError(f"broadcast_to: rank mismatch {a.shape} -> {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    for i in axes:
        if a.shape[i] != 1:
            raise ValueError(f"broadcast_to: cannot expand {a.shape} -> {shape}")
    out = np.broadcast_to(a.data, shape)
    return Tensor._record(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- linear maps ---------------------------------------------------------------


def affine_map(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """``out[..., o] = sum_f weights[o, f] * x[..., f] + bias[o]``."""
    f_out, f_in = weights.shape
    if x.shape[-1] != f_in:
        raise ValueError(f"affine_map: input inner extent {x.shape[-1]} != {f_in}")
    if bias is not None and bias.shape != (f_out,):
        raise ValueError(f"affine_map: bias shape {bias.shape} != ({f_out},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, f_in)
    w = weights.data
    out = x2 @ w.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, f_out)
        gx = (g2 @ w).reshape(lead + (f_in,))
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weights) if bias is None else (x, weights, bias)
    return Tensor._record(out.reshape(lead + (f_out,)), parents, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of two 3-D tensors ``[G, N, F] @ [G, F, O]``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return Tensor._record(ad @ bd, (a, b), backward)


def grouped_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``out[g, k] = a[g] @ b[g, k]`` for ``a: [G, N, F]`` and ``b: [G, K, F, O]``.

    One GEMM per ``(g, k)`` block, so each block's result depends only on
    its own operands and not on its position along ``k``.
    """
    if a.ndim != 3 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ValueError(f"grouped_matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = (g @ bd.transpose(0, 1, 3, 2)).sum(axis=1)
        gb = ad.transpose(0, 2, 1)[:, None] @ g
        return ga, gb

    return Tensor._record(ad[:, None] @ bd, (a, b), backward)


# -- spatial -------------------------------------------------------------------


def gather_output_size(size: int, stride: int, pad: int, kernel: int = 3) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def neighborhood_gather(grid: Tensor, kernel: int = 3, stride: int = 1, pad: int = 1) -> Tensor:
    """Concatenate every 3x3 neighbourhood of a capsule grid.

    ``grid`` has axes ``(H, W, C, D)`` or ``(B, H, W, C, D)``.  The result has
    axes ``(..., H', W', C, 9*D)``; within the last axis the window is laid
    out row-major and each cell contributes its ``D`` values contiguously.
    Cells outside the grid read as zero.
    """
    if kernel != 3:
        raise ValueError(f"neighborhood_gather: only kernel=3 is supported, got {kernel}")
    if stride < 1 or pad < 0:
        raise ValueError(f"neighborhood_gather: invalid stride={stride} pad={pad}")
    unbatched = grid.ndim == 4
    if grid.ndim not in (4, 5):
        raise ValueError(f"neighborhood_gather: expected (B,)H,W,C,D axes, got {grid.shape}")
    x = grid.data[None] if unbatched else grid.data
    b, h, w, c, d = x.shape
    ho = gather_output_size(h, stride, pad, kernel)
    wo = gather_output_size(w, stride, pad, kernel)
    if ho < 1 or wo < 1:
        raise ValueError(f"neighborhood_gather: grid {h}x{w} too small for pad={pad}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0), (0, 0)))
    cells = []
    for ky in range(kernel):
        for kx in range(kernel):
            cells.append(xp[:, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride])
    out = np.stack(cells, axis=4).reshape(b, ho, wo, c, kernel * kernel * d)

    def backward(g):
        g = g.reshape(b, ho, wo, c, kernel * kernel, d)
        gp = np.zeros_like(xp)
        for i, (ky, kx) in enumerate(itertools.product(range(kernel), range(kernel))):
            gp[:, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride] += g[:, :, :, :, i]
        gx = gp[:, pad:pad + h, pad:pad + w]
        return (gx[0] if unbatched else gx,)

    return Tensor._record(out[0] if unbatched else out, (grid,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two spatial axes of ``(B, H, W, ...)``."""
    b, h, w = x.shape[:3]
    rest = x.shape[3:]
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def backward(g):
        g = g.reshape((b, h, factor, w, factor) + rest)
        return (g.sum(axis=(2, 4)),)

    return Tensor._record(out, (x,), backward)


# -- normalisation -------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise each vector along the last axis, then scale and shift.

    ``gain`` and ``bias`` must match a trailing suffix of ``x.shape`` (e.g.
    ``(D,)`` or ``(C, D)``) and are shared over the leading axes.
    """
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm: empty capsule dimension")
    k = gain.ndim
    if gain.shape != bias.shape or x.shape[x.ndim - k:] != gain.shape:
        raise ValueError(f"layer_norm: gain/bias {gain.shape} do not match input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - k))

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._record(out, (x, gain, bias), backward)


# -- checking ------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``x`` must be a leaf with ``requires_grad=True``; ``f`` maps it to a
    scalar tensor.  Relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    x.grad = None
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    err = np.abs(analytic - numeric) / denom
    return float(np.nan_to_num(err, nan=np.inf).max()) if err.size else 0.0
