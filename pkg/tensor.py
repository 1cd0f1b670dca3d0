"""
Minimal dense-array engine with reverse-mode automatic differentiation.

Arrays are numpy float32 buffers wrapped in `DiffArray`. Every differentiable
operation is a `Function` subclass; applying it while a `Tape` is active and
any input requires gradients records a node on that tape. `Tape.backward`
replays the nodes in reverse recording order, which is a valid topological
order because a node is always recorded after the nodes producing its inputs.
"""
import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ContractError, DimensionError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)
_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar("dtype", default=np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Evaluate operations in `dtype` (float64 is reserved for verification)"""
    token = _DTYPE.set(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.reset(token)


def active_dtype() -> np.dtype:
    return _DTYPE.get()


class DiffArray:
    """Dense row-major array that can take part in a gradient tape"""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=_DTYPE.get())
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(as_array(other), self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(as_array(other), self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(as_array(other), self)
    def __neg__(self): return neg(self)


def as_array(value: Union[DiffArray, ArrayLike]) -> DiffArray:
    if isinstance(value, DiffArray):
        return value
    return DiffArray(value)


def constant(value: ArrayLike) -> DiffArray:
    return DiffArray(value, requires_grad=False)


def parameter(value: ArrayLike, name: Optional[str] = None) -> DiffArray:
    return DiffArray(value, requires_grad=True, name=name)


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[DiffArray, ...]
    output: DiffArray
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of operations for one forward pass"""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, loss: DiffArray) -> None:
        """
        Accumulate d(loss)/d(leaf) into `.grad` of every leaf that requires grad.

        Intermediate gradients live only for the duration of the call, so a
        tape can be replayed once per forward pass.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {loss.shape}")

        produced = {id(node.output) for node in self.nodes}
        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, DiffArray] = {}

        for node in reversed(self.nodes):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            input_grads = node.backward(grad)
            for inp, g in zip(node.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                g = np.asarray(g).reshape(inp.shape)
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = g
                if key not in produced:
                    leaves[key] = inp

        for key, leaf in leaves.items():
            g = pending[key].astype(leaf.data.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def current_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw numpy arrays and `backward`, which
    maps the gradient of the output to one gradient (or None) per input.
    """
    name = "function"

    def __init__(self):
        self.needs_grad: Tuple[bool, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: DiffArray, **kwargs) -> DiffArray:
        fn = cls()
        fn.needs_grad = tuple(inp.requires_grad for inp in inputs)
        out = DiffArray(fn.forward(*(inp.data for inp in inputs), **kwargs),
                        requires_grad=any(fn.needs_grad))
        out.data.flags.writeable = False
        tape = current_tape()
        if tape is not None and out.requires_grad:
            tape.record(TapeNode(cls.name, inputs, out, fn.backward))
        return out


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Right-aligned broadcasting where only size-1 axes may expand"""
    ndim = max(len(a), len(b))
    a = (1,) * (ndim - len(a)) + tuple(a)
    b = (1,) * (ndim - len(b)) + tuple(b)
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"cannot broadcast shapes {a} and {b}")
        out.append(max(x, y))
    return tuple(out)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum the gradient of a broadcast result back to an input shape"""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

class Add(Function):
    name = "add"

    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = unbroadcast(grad * self.b, self.a.shape) if self.needs_grad[0] else None
        gb = unbroadcast(grad * self.a, self.b.shape) if self.needs_grad[1] else None
        return ga, gb


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


def stable_sigmoid(a: np.ndarray) -> np.ndarray:
    # Split by sign so neither branch overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        self.out = stable_sigmoid(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Silu(Function):
    name = "silu"

    def forward(self, a):
        self.a = a
        self.sig = stable_sigmoid(a)
        return a * self.sig

    def backward(self, grad):
        return (grad * self.sig * (1.0 + self.a * (1.0 - self.sig)),)


class Softplus(Function):
    name = "softplus"

    def forward(self, a):
        self.a = a
        return np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))

    def backward(self, grad):
        return (grad * stable_sigmoid(self.a),)


def add(a, b) -> DiffArray:
    return Add.apply(as_array(a), as_array(b))


def sub(a, b) -> DiffArray:
    return Sub.apply(as_array(a), as_array(b))


def mul(a, b) -> DiffArray:
    return Mul.apply(as_array(a), as_array(b))


def neg(a: DiffArray) -> DiffArray:
    return Neg.apply(a)


def exp(a: DiffArray) -> DiffArray:
    return Exp.apply(a)


def sigmoid(a: DiffArray) -> DiffArray:
    return Sigmoid.apply(a)


def silu(a: DiffArray) -> DiffArray:
    return Silu.apply(a)


def softplus(a: DiffArray) -> DiffArray:
    return Softplus.apply(a)


_UNARY = {"sigmoid": sigmoid, "silu": silu, "softplus": softplus, "exp": exp}
_BINARY = {"add": add, "mul": mul}


def elementwise(f: str, *args) -> DiffArray:
    """Dispatch one of sigmoid, silu, softplus, exp, add, mul by name"""
    if f in _UNARY:
        if len(args) != 1:
            raise ContractError(f"{f} takes one argument, got {len(args)}")
        return _UNARY[f](as_array(args[0]))
    if f in _BINARY:
        if len(args) != 2:
            raise ContractError(f"{f} takes two arguments, got {len(args)}")
        return _BINARY[f](args[0], args[1])
    raise ContractError(f"unknown elementwise function {f!r}")


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes):
        self.axes = tuple(axes)
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Flip(Function):
    name = "flip"

    def forward(self, a, axis):
        self.axis = axis
        return np.ascontiguousarray(np.flip(a, axis=axis))

    def backward(self, grad):
        return (np.flip(grad, axis=self.axis),)


class Slice(Function):
    name = "slice"

    def forward(self, a, axis, start, stop):
        self.in_shape = a.shape
        self.index = [slice(None)] * a.ndim
        self.index[axis] = slice(start, stop)
        self.index = tuple(self.index)
        return np.ascontiguousarray(a[self.index])

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        out[self.index] = grad
        return (out,)


def reshape(a: DiffArray, shape: Sequence[int]) -> DiffArray:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: DiffArray, axes: Sequence[int]) -> DiffArray:
    return Transpose.apply(a, axes=tuple(axes))


def flip(a: DiffArray, axis: int) -> DiffArray:
    return Flip.apply(a, axis=axis)


def slice_axis(a: DiffArray, axis: int, start: int, stop: int) -> DiffArray:
    return Slice.apply(a, axis=axis % a.ndim, start=start, stop=stop)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _normalize_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise DimensionError(f"axis {axis} out of range for {ndim}-d array")
        out.append(axis % ndim)
    return tuple(sorted(set(out)))


class Sum(Function):
    name = "sum"

    def forward(self, a, axes):
        self.in_shape = a.shape
        self.axes = axes
        return a.sum(axis=axes)

    def backward(self, grad):
        expanded = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(expanded, self.in_shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axes):
        self.in_shape = a.shape
        self.axes = axes
        self.count = int(np.prod([a.shape[axis] for axis in axes]))
        if self.count == 0:
            raise DimensionError("mean over an empty extent")
        return a.sum(axis=axes) / self.count

    def backward(self, grad):
        expanded = np.expand_dims(grad, self.axes) / self.count
        return (np.broadcast_to(expanded, self.in_shape).copy(),)


def reduce_sum(a: DiffArray, axes=None) -> DiffArray:
    return Sum.apply(a, axes=_normalize_axes(axes, a.ndim))


def reduce_mean(a: DiffArray, axes=None) -> DiffArray:
    return Mean.apply(a, axes=_normalize_axes(axes, a.ndim))


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shape mismatch {a.shape} x {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ self.b.T if self.needs_grad[0] else None
        gb = self.a.T @ grad if self.needs_grad[1] else None
        return ga, gb


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    return MatMul.apply(a, b)


def linear(x: DiffArray, weight: DiffArray, bias: Optional[DiffArray] = None) -> DiffArray:
    """Apply a [K, N] weight to the last axis of `x`"""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, weight)
    if x.ndim != 2:
        out = reshape(out, lead + (weight.shape[1],))
    if bias is not None:
        out = add(out, bias)
    return out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """Grouped cross-correlation via sliding-window columns"""
    name = "conv2d"

    def forward(self, x, k, stride, padding, groups):
        if x.ndim != 4 or k.ndim != 4:
            raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
        b, c, h, w = x.shape
        o, cg, kh, kw = k.shape
        if groups < 1 or c % groups or o % groups:
            raise DimensionError(f"channels {c}->{o} not divisible by groups={groups}")
        if cg != c // groups:
            raise DimensionError(f"kernel expects {cg} input channels per group, input gives {c // groups}")
        if kh > h + 2 * padding or kw > w + 2 * padding:
            raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
        oh = conv_output_size(h, kh, stride, padding)
        ow = conv_output_size(w, kw, stride, padding)
        self.meta = (x.shape, k.shape, stride, padding, groups, oh, ow)

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
        cols = cols.reshape(b, groups, cg, oh, ow, kh, kw)
        kg = k.reshape(groups, o // groups, cg, kh, kw)
        self.cols, self.kg = cols, kg
        out = np.einsum("bgchwij,gocij->bgohw", cols, kg, optimize=True)
        return out.reshape(b, o, oh, ow)

    def backward(self, grad):
        x_shape, k_shape, stride, padding, groups, oh, ow = self.meta
        b, c, h, w = x_shape
        o, cg, kh, kw = k_shape
        g = grad.reshape(b, groups, o // groups, oh, ow)

        gk = None
        if self.needs_grad[1]:
            gk = np.einsum("bgchwij,bgohw->gocij", self.cols, g, optimize=True).reshape(k_shape)

        gx = None
        if self.needs_grad[0]:
            dcols = np.einsum("bgohw,gocij->bgchwij", g, self.kg, optimize=True).reshape(b, c, oh, ow, kh, kw)
            gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[..., i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gk


def conv2d(x: DiffArray, k: DiffArray, stride: int = 1, padding: int = 0, groups: int = 1) -> DiffArray:
    return Conv2d.apply(x, k, stride=stride, padding=padding, groups=groups)


class Conv1dCausal(Function):
    """Depthwise causal convolution over the last axis of [B, D, L]"""
    name = "conv1d_causal"

    def forward(self, x, k):
        if k.ndim != 2 or k.shape[1] < 1:
            raise ContractError(f"causal kernel must be [D, kw] with kw >= 1, got {k.shape}")
        if x.ndim != 3 or x.shape[1] != k.shape[0]:
            raise DimensionError(f"conv1d_causal expects [B, {k.shape[0]}, L], got {x.shape}")
        kw = k.shape[1]
        self.x_shape, self.k = x.shape, k
        xp = np.pad(x, ((0, 0), (0, 0), (kw - 1, 0)))
        self.windows = sliding_window_view(xp, kw, axis=2)
        return np.einsum("bdlj,dj->bdl", self.windows, k, optimize=True)

    def backward(self, grad):
        b, d, length = self.x_shape
        kw = self.k.shape[1]
        gk = np.einsum("bdlj,bdl->dj", self.windows, grad, optimize=True) if self.needs_grad[1] else None
        gx = None
        if self.needs_grad[0]:
            gxp = np.zeros((b, d, length + kw - 1), dtype=grad.dtype)
            for j in range(kw):
                gxp[:, :, j:j + length] += grad * self.k[None, :, j, None]
            gx = gxp[:, :, kw - 1:]
        return gx, gk


def conv1d_causal(x: DiffArray, k: DiffArray) -> DiffArray:
    return Conv1dCausal.apply(x, k)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[DiffArray], DiffArray],
    x: Union[DiffArray, np.ndarray],
    eps: float = 1e-3,
    floor: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare tape gradients of scalar `f` at `x` with central differences.

    Both sides are evaluated in float64. Returns the worst per-coordinate
    relative error |analytic - numeric| / max(|analytic|, |numeric|, floor).
    With `max_coords` only a seeded random subset of coordinates is probed.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(x.data if isinstance(x, DiffArray) else x, dtype=np.float64)

    with precision(np.float64):
        probe = DiffArray(base, requires_grad=True)
        with Tape() as tape:
            out = f(probe)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        tape.backward(out)
        analytic = np.zeros_like(base) if probe.grad is None else probe.grad.astype(np.float64)

        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and max_coords < flat.size:
            coords = np.sort(np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False))

        worst = 0.0
        for i in coords:
            plus = flat.copy()
            plus[i] += eps
            minus = flat.copy()
            minus[i] -= eps
            f_plus = f(DiffArray(plus.reshape(base.shape))).item()
            f_minus = f(DiffArray(minus.reshape(base.shape))).item()
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return float(worst)
