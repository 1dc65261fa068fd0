"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Only the operators the TempEE network needs are provided. Values are stored as
row-major numpy arrays (float32 by default); reductions accumulate in float64.

Recording is explicit: operations are appended to the innermost active
:class:`Tape`, and only when at least one input requires a gradient. Outside a
tape every op is a plain forward computation::

    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    x.grad  # 2 * x
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, NumericError, ShapeError

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record_branch(choice: np.ndarray) -> None:
    """Log which side of a non-differentiable point an op took (for grad_check)."""
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(choice.copy())


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {where}")


class Tensor:
    """Dense float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=default_dtype())
        _check_finite(arr, "Tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations executed while active."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse guard
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Replay the tape in reverse, accumulating into leaf ``.grad`` slots."""
        if grad is None:
            if loss.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        produced = set()
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            produced.add(id(node.out))
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            _check_finite(g, "backward")
            t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(arr, op)
    tape = current_tape()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, req)
    if req:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not np.all(b.data):
        raise NumericError("division by zero")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record_branch(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis, keepdims) * (1.0 / count)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    scale = 2.0 / diff.size

    def backward(g):
        return ((g * scale * diff).astype(pred.dtype),)

    return _result(out, (pred,), backward, "mse_loss")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes: [.., m, p] x [.., p, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row maximum."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (y * (g - dot),)

    return _result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise over one axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm affine shape {gamma.shape}/{beta.shape} does not match extent {n}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=axis, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    out = (xhat * gam + bet).astype(x.dtype)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g.astype(np.float64) * gam
            s1 = dxhat.sum(axis=axis, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axis, keepdims=True)
            gx = (inv * (dxhat - s1 / n - xhat * s2 / n)).astype(x.dtype)
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=other).astype(gamma.dtype)
        if beta.requires_grad:
            gb = g.sum(axis=other, dtype=np.float64).astype(beta.dtype)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------- convolution / pooling


def conv(
    x: Tensor,
    kernel: Tensor,
    dims: int,
    stride: int = 1,
    padding: int = 0,
    bias: Tensor | None = None,
) -> Tensor:
    """N-d cross-correlation (no kernel flip).

    ``x`` is ``(B, C_in, *spatial)`` or ``(C_in, *spatial)``; ``kernel`` is
    ``(C_out, C_in, *k)``. Output extent per axis is
    ``floor((in + 2*padding - k) / stride) + 1``.
    """
    if dims not in (1, 2, 3):
        raise ConfigError(f"conv supports 1-3 spatial dims, got {dims}")
    if stride < 1:
        raise ConfigError(f"conv stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv padding must be >= 0, got {padding}")
    unbatched = x.ndim == dims + 1
    if x.ndim not in (dims + 1, dims + 2) or kernel.ndim != dims + 2:
        raise ShapeError(f"conv{dims}d got input {x.shape} and kernel {kernel.shape}")
    xd = x.data[None] if unbatched else x.data
    c_out, c_in = kernel.shape[:2]
    ksize = kernel.shape[2:]
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv channel mismatch: input {x.shape}, kernel {kernel.shape}")
    padded = tuple(s + 2 * padding for s in xd.shape[2:])
    if any(k > p for k, p in zip(ksize, padded)):
        raise ShapeError(f"conv kernel {ksize} larger than padded input {padded}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv bias shape {bias.shape} != ({c_out},)")

    batch = xd.shape[0]
    sp_axes = tuple(range(2, 2 + dims))
    xp = np.pad(xd, [(0, 0), (0, 0)] + [(padding, padding)] * dims) if padding else xd
    win = sliding_window_view(xp, ksize, axis=sp_axes)
    win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * dims]
    out_sp = win.shape[2 : 2 + dims]
    n_out = int(np.prod(out_sp))
    # (B, C, *O, *K) -> (B, *O, C, *K)
    order = (0,) + tuple(range(2, 2 + dims)) + (1,) + tuple(range(2 + dims, 2 + 2 * dims))
    cols = win.transpose(order).reshape(batch * n_out, -1)
    wmat = kernel.data.reshape(c_out, -1)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    y = np.moveaxis(y.reshape((batch,) + out_sp + (c_out,)), -1, 1)
    if unbatched:
        y = y[0]
    y = np.ascontiguousarray(y)

    def backward(g):
        gd = g[None] if unbatched else g
        g2 = np.moveaxis(gd, 1, -1).reshape(batch * n_out, c_out)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0, dtype=np.float64).astype(bias.dtype) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape((batch,) + out_sp + (c_in,) + ksize)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for off in np.ndindex(*ksize):
                target = (slice(None), slice(None)) + tuple(
                    slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp)
                )
                piece = dcols[(slice(None),) + (slice(None),) * dims + (slice(None),) + off]
                dxp[target] += np.moveaxis(piece, -1, 1)
            if padding:
                dxp = dxp[(slice(None), slice(None)) + (slice(padding, -padding),) * dims]
            gx = dxp[0] if unbatched else dxp
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(y, inputs, backward, f"conv{dims}d")


def pool2d(x: Tensor, size: int, mode: str = "max") -> Tensor:
    """Non-overlapping ``size x size`` pooling over the last two axes."""
    if mode not in ("max", "avg"):
        raise ConfigError(f"unknown pooling mode {mode!r}")
    if size < 1:
        raise ConfigError(f"pool size must be >= 1, got {size}")
    if x.ndim < 2:
        raise ShapeError(f"pool2d needs at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    for name, extent in (("height", h), ("width", w)):
        if extent % size:
            raise ShapeError(f"pool2d: {name} {extent} not divisible by pool size {size}")
    lead = x.shape[:-2]
    hs, ws = h // size, w // size
    xr = x.data.reshape(lead + (hs, size, ws, size))
    nl = len(lead)
    if mode == "avg":
        out = xr.mean(axis=(nl + 1, nl + 3), dtype=np.float64).astype(x.dtype)

        def backward(g):
            gg = np.broadcast_to(g[..., :, None, :, None] / (size * size), xr.shape)
            return (gg.reshape(x.shape).astype(x.dtype),)

        return _result(out, (x,), backward, "avgpool")

    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    flat = xr.transpose(perm).reshape(lead + (hs, ws, size * size))
    idx = flat.argmax(axis=-1)[..., None]
    _record_branch(idx)
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def backward(g):
        gf = np.zeros(flat.shape, dtype=x.dtype)
        np.put_along_axis(gf, idx, g[..., None], axis=-1)
        inv = np.argsort(perm)
        gx = gf.reshape(lead + (hs, ws, size, size)).transpose(inv).reshape(x.shape)
        return (gx,)

    return _result(out, (x,), backward, "maxpool")


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    """Replicate each cell of the last two axes into a ``factor x factor`` block."""
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    h, w = x.shape[-2:]

    def backward(g):
        gr = g.reshape(x.shape[:-2] + (h, factor, w, factor))
        return (gr.sum(axis=(-3, -1)),)

    return _result(out, (x,), backward, "upsample")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (
        -1 not in shape and int(np.prod(shape)) != x.size
    ) or (-1 in shape and (not known or x.size % int(np.prod(known)))):
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) into {shape}")
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


@dataclass(frozen=True)
class ReshapePermute:
    """Reshape to ``pre``, permute by ``axes``, reshape to ``post``.

    Either reshape may be ``None`` (skipped). :meth:`inverse` builds the
    spec that maps the output back onto ``source``.
    """

    pre: tuple[int, ...] | None
    axes: tuple[int, ...] | None
    post: tuple[int, ...] | None

    def apply(self, x: Tensor) -> Tensor:
        if self.pre is not None:
            x = reshape(x, self.pre)
        if self.axes is not None:
            x = permute(x, self.axes)
        if self.post is not None:
            x = reshape(x, self.post)
        return x

    def inverse(self, source: tuple[int, ...]) -> "ReshapePermute":
        pre = self.pre if self.pre is not None else source
        if self.axes is None:
            return ReshapePermute(None, None, tuple(source))
        permuted = tuple(pre[a] for a in self.axes)
        inv = tuple(int(i) for i in np.argsort(self.axes))
        return ReshapePermute(permuted, inv, tuple(source))


def reshape_permute(x: Tensor, spec: ReshapePermute) -> Tensor:
    return spec.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(out, (x,), backward, "getitem")


# ---------------------------------------------------------------- verification


def _evaluate(f, x: Tensor):
    _state.branches = []
    try:
        y = f(x)
    finally:
        branches, _state.branches = _state.branches, None
    return y, branches


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(u.shape == v.shape and np.array_equal(u, v) for u, v in zip(a, b))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    skip_kinks: bool = True,
    report: dict | None = None,
) -> float:
    """Largest relative gap between tape and central-difference gradients.

    Both sides are evaluated in float64. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_entries`` limits the comparison
    to that many randomly chosen coordinates.

    With ``skip_kinks`` a coordinate whose ``x +- h`` probes land on a
    different side of a ReLU or max-pool switch than ``x`` itself is not
    compared, since the difference quotient there does not estimate the
    derivative. ``report`` (if given) receives ``checked`` and ``kinks`` counts.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ConfigError(f"grad_check step h must lie in [1e-4, 1e-2], got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        xt = Tensor(base, requires_grad=True)
        with Tape() as tape:
            y, ref = _evaluate(f, xt)
        if not isinstance(y, Tensor) or y.size != 1:
            shape = getattr(y, "shape", type(y).__name__)
            raise ContractError(f"grad_check needs a scalar-valued function, got {shape}")
        tape.backward(y)
        analytic = (np.zeros_like(base) if xt.grad is None else xt.grad.astype(np.float64)).reshape(-1)

        order = np.arange(base.size)
        if max_entries is not None:
            order = np.random.default_rng(seed).permutation(base.size)
        worst = 0.0
        checked = kinks = 0
        probe = base.copy()
        pflat = probe.reshape(-1)
        for i in order:
            if max_entries is not None and checked >= max_entries:
                break
            orig = pflat[i]
            pflat[i] = orig + h
            yp, bp = _evaluate(f, Tensor(probe))
            pflat[i] = orig - h
            ym, bm = _evaluate(f, Tensor(probe))
            pflat[i] = orig
            if skip_kinks and not (_same_branches(ref, bp) and _same_branches(ref, bm)):
                kinks += 1
                continue
            numeric = (float(yp.data) - float(ym.data)) / (2 * h)
            a = float(analytic[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            checked += 1
    if report is not None:
        report.update(checked=checked, kinks=kinks)
    return worst
