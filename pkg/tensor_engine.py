#!/usr/bin/env python3
"""
Tensor Engine
Dense numpy-backed tensors with define-by-run reverse-mode differentiation,
the convolution/linear/activation kernels the networks need, and Adam.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""


class ParameterError(ValueError):
    """Raised for invalid operation parameters."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its preconditions."""


_DTYPE = np.float32
_GRAD_ENABLED = True
_CONV_IMPL = "im2col"
_DEBUG_FINITE = False


@contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype of newly created tensors."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def set_conv_impl(name: str) -> None:
    """Select the convolution kernel: 'im2col' (fast path) or 'direct'."""
    global _CONV_IMPL
    if name not in ("im2col", "direct"):
        raise ParameterError(f"Unknown convolution implementation: {name}")
    _CONV_IMPL = name


def set_debug_checks(enabled: bool) -> None:
    """Check every forward output for NaN/Inf."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_fn")

    def __init__(self, data, requires_grad: bool = False, _fn=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._fn = _fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # Arithmetic
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

    def __getitem__(self, item):
        return take_batch(self, item)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# =============================================================================
# Function machinery
# =============================================================================

class Function:
    """One differentiable op: forward on arrays, backward to parent gradients."""

    def __init__(self):
        self.parents: Tuple[Tensor, ...] = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        fn = cls()
        tensors = tuple(as_tensor(t) for t in inputs)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        if _DEBUG_FINITE and not np.all(np.isfinite(out)):
            raise ContractError(f"{cls.__name__} produced non-finite values")
        needs_grad = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
        if needs_grad:
            fn.parents = tensors
            return Tensor(out, requires_grad=True, _fn=fn)
        return Tensor(out)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "sub")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (_unbroadcast(grad * self.b, self.a.shape),
                _unbroadcast(grad * self.a, self.b.shape))


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Square(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (2.0 * grad * self.x,)


class Clamp(Function):
    def forward(self, x, low, high):
        self.mask = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, x, axis=None):
        self.shape, self.axis = x.shape, axis
        return np.asarray(x.sum(axis=axis, dtype=np.float64), dtype=x.dtype)

    def backward(self, grad):
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None):
        self.shape, self.axis = x.shape, axis
        if axis is None:
            self.count = x.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            self.count = int(np.prod([x.shape[a] for a in axes]))
        return np.asarray(x.mean(axis=axis, dtype=np.float64), dtype=x.dtype)

    def backward(self, grad):
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.sizes = [a.shape[axis] for a in arrays]
        self.axis = axis
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        edges = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, edges, axis=self.axis))


class TakeBatch(Function):
    def forward(self, x, index=None):
        self.shape, self.index = x.shape, index
        return x[index]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def exp(x) -> Tensor:
    return Exp.apply(x)


def log(x) -> Tensor:
    return Log.apply(x)


def square(x) -> Tensor:
    return Square.apply(x)


def clamp(x, low: float, high: float) -> Tensor:
    return Clamp.apply(x, low=low, high=high)


def sum_(x, axis=None) -> Tensor:
    return Sum.apply(x, axis=axis)


def mean(x, axis=None) -> Tensor:
    return Mean.apply(x, axis=axis)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def flatten(x) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def take_batch(x, index) -> Tensor:
    return TakeBatch.apply(x, index=index)


# =============================================================================
# Activations
# =============================================================================

LEAKY_SLOPE = 0.01


class LeakyReLU(Function):
    def forward(self, x, slope=LEAKY_SLOPE):
        self.scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
        return x * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Sigmoid(Function):
    def forward(self, x):
        # Split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


def activation(kind: str, x, slope: float = LEAKY_SLOPE) -> Tensor:
    """Elementwise leaky_relu, tanh or sigmoid."""
    if kind == "leaky_relu":
        return LeakyReLU.apply(x, slope=slope)
    if kind == "tanh":
        return Tanh.apply(x)
    if kind == "sigmoid":
        return Sigmoid.apply(x)
    raise ParameterError(f"Unknown activation: {kind}")


# =============================================================================
# Linear and convolution kernels
# =============================================================================

class Linear(Function):
    def forward(self, x, weight, bias=None):
        if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
            raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape} (axis 1 must match)")
        if bias is not None and bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight rows {weight.shape[0]}")
        self.x, self.weight, self.has_bias = x, weight, bias is not None
        out = x @ weight.T
        if bias is not None:
            out = out + bias
        return out

    def backward(self, grad):
        dx = grad @ self.weight
        dw = grad.T @ self.x
        db = grad.sum(axis=0) if self.has_bias else None
        return dx, dw, db


def linear(x, weight, bias=None) -> Tensor:
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int,
                               output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _windows(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, out_h, out_w, C, k, k) strided view."""
    view = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return view[:, :, :out_h, :out_w].transpose(0, 2, 3, 1, 4, 5)


def _scatter_windows(cols: np.ndarray, out_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of _windows: accumulate (B, h, w, C, k, k) into (B, C, Hp, Wp)."""
    B, h, w = cols.shape[:3]
    acc = np.zeros(out_shape, dtype=np.float64 if cols.dtype == np.float64 else cols.dtype)
    for i in range(k):
        for j in range(k):
            acc[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return acc


def _direct_conv(xp: np.ndarray, weight: np.ndarray, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Kernel-offset loop; no im2col buffer."""
    B = xp.shape[0]
    O, _, k, _ = weight.shape
    acc = np.zeros((B, O, out_h, out_w), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
            acc += np.einsum("bchw,oc->bohw", patch, weight[:, :, i, j], dtype=np.float64)
    return acc.astype(xp.dtype)


class Conv2d(Function):
    def forward(self, x, weight, bias=None, stride=1, padding=0):
        if x.ndim != 4 or weight.ndim != 4:
            raise ShapeError(f"conv2d: expected NCHW input and OIkk kernel, got {x.shape} and {weight.shape}")
        if x.shape[1] != weight.shape[1]:
            raise ShapeError(f"conv2d: input channels (axis 1) {x.shape[1]} != kernel I (axis 1) {weight.shape[1]}")
        if stride < 1 or padding < 0:
            raise ParameterError(f"conv2d: stride {stride} must be >= 1 and padding {padding} >= 0")
        B, C, H, W = x.shape
        O, _, k, _ = weight.shape
        out_h = conv_output_size(H, k, stride, padding)
        out_w = conv_output_size(W, k, stride, padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv2d: kernel {k} larger than padded input {H}x{W}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp_shape, self.weight, self.stride, self.padding = xp.shape, weight, stride, padding
        self.has_bias = bias is not None

        cols = _windows(xp, k, stride, out_h, out_w).reshape(B * out_h * out_w, C * k * k)
        self.cols = cols
        if _CONV_IMPL == "direct":
            out = _direct_conv(xp, weight, stride, out_h, out_w)
        else:
            out = (cols @ weight.reshape(O, -1).T).reshape(B, out_h, out_w, O).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        B, O, out_h, out_w = grad.shape
        k = self.weight.shape[2]
        go = grad.transpose(0, 2, 3, 1).reshape(-1, O)
        dw = (go.T @ self.cols).reshape(self.weight.shape)
        dcols = (go @ self.weight.reshape(O, -1)).reshape(B, out_h, out_w, -1, k, k)
        dxp = _scatter_windows(dcols, self.xp_shape, k, self.stride)
        p = self.padding
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        db = grad.sum(axis=(0, 2, 3)) if self.has_bias else None
        return dxp.astype(grad.dtype), dw, db


class ConvTranspose2d(Function):
    """Kernel layout (in_channels, out_channels, k, k)."""

    def forward(self, x, weight, bias=None, stride=1, padding=0, output_padding=0):
        if x.ndim != 4 or weight.ndim != 4:
            raise ShapeError(f"conv_transpose2d: expected NCHW input and IOkk kernel, got {x.shape} and {weight.shape}")
        if x.shape[1] != weight.shape[0]:
            raise ShapeError(f"conv_transpose2d: input channels (axis 1) {x.shape[1]} != kernel I (axis 0) {weight.shape[0]}")
        if stride < 1 or padding < 0:
            raise ParameterError(f"conv_transpose2d: stride {stride} must be >= 1 and padding {padding} >= 0")
        if output_padding >= stride or output_padding < 0:
            raise ParameterError(f"conv_transpose2d: output_padding {output_padding} must be in [0, stride={stride})")
        B, C, H, W = x.shape
        _, O, k, _ = weight.shape
        out_h = conv_transpose_output_size(H, k, stride, padding, output_padding)
        out_w = conv_transpose_output_size(W, k, stride, padding, output_padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv_transpose2d: padding {padding} removes the whole output")
        full = ((H - 1) * stride + k + output_padding, (W - 1) * stride + k + output_padding)
        self.x, self.weight, self.stride, self.padding = x, weight, stride, padding
        self.full, self.out_hw, self.has_bias = full, (out_h, out_w), bias is not None

        if _CONV_IMPL == "direct":
            acc = np.zeros((B, O) + full, dtype=np.float64)
            for i in range(k):
                for j in range(k):
                    acc[:, :, i:i + stride * H:stride, j:j + stride * W:stride] += \
                        np.einsum("bchw,co->bohw", x, weight[:, :, i, j], dtype=np.float64)
        else:
            cols = (x.transpose(0, 2, 3, 1).reshape(-1, C) @ weight.reshape(C, -1)).reshape(B, H, W, O, k, k)
            acc = _scatter_windows(cols, (B, O) + full, k, stride)
        out = acc[:, :, padding:padding + out_h, padding:padding + out_w].astype(x.dtype)
        if bias is not None:
            out = out + bias[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        B, C, H, W = self.x.shape
        _, O, k, _ = self.weight.shape
        p = self.padding
        out_h, out_w = self.out_hw
        gfull = np.zeros((B, O) + self.full, dtype=grad.dtype)
        gfull[:, :, p:p + out_h, p:p + out_w] = grad
        win = _windows(gfull, k, self.stride, H, W).reshape(B * H * W, O * k * k)
        dx = (win @ self.weight.reshape(C, -1).T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        dw = (self.x.transpose(0, 2, 3, 1).reshape(-1, C).T @ win).reshape(self.weight.shape)
        db = grad.sum(axis=(0, 2, 3)) if self.has_bias else None
        return np.ascontiguousarray(dx), dw, db


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, padding=padding)
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    if bias is None:
        return ConvTranspose2d.apply(x, weight, stride=stride, padding=padding,
                                     output_padding=output_padding)
    return ConvTranspose2d.apply(x, weight, bias, stride=stride, padding=padding,
                                 output_padding=output_padding)


# =============================================================================
# Reverse pass
# =============================================================================

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative topological order
    order: List[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._fn is not None:
            for parent in node._fn.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._fn is None:
            node.grad = grad.astype(node.data.dtype) if node.grad is None else node.grad + grad
            continue
        for parent, pgrad in zip(node._fn.parents, node._fn.backward(grad)):
            if pgrad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pgrad if key not in grads else grads[key] + pgrad


# =============================================================================
# Adam
# =============================================================================

@dataclass
class AdamState:
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied in place."""
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ShapeError("adam_step: moment buffers do not match the parameter list")

    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            continue
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= ((lr / bc1) * m / denom).astype(p.data.dtype)


class Adam:
    """Adam over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ParameterError(f"Invalid learning rate: {lr}")
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)


# =============================================================================
# Gradient checking
# =============================================================================

def numeric_gradient(fn, tensor: Tensor, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of scalar fn() w.r.t. tensor.data (optionally at a subset)."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            original = flat[i]
            flat[i] = original + h
            plus = float(fn().data)
            flat[i] = original - h
            minus = float(fn().data)
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def gradient_mismatch(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-6) -> float:
    """Largest relative error, with atol guarding near-zero entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def check_gradients(fn, tensors: Sequence[Tensor], h: float = 1e-3, samples: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None, atol: float = 1e-6) -> float:
    """Worst relative mismatch between backward() and central differences."""
    for t in tensors:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        if samples is not None and t.data.size > samples:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(t.data.size, size=samples, replace=False)
        else:
            idx = np.arange(t.data.size)
        numeric = numeric_gradient(fn, t, h=h, indices=idx)
        worst = max(worst, gradient_mismatch(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx], atol))
    logging.debug(f"gradient check worst relative mismatch {worst:.3e}")
    return worst
