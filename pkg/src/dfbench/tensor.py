"""Dense float64 tensors with reverse-mode automatic differentiation.

A small dynamic-graph engine sized for conv nets at 64x64 resolution.
Each operation checks its output for non-finite values and, when any input
requires gradients, records a backward closure. ``trace`` captures the
graph below a scalar loss as a ``ComputationRecord`` in topological order;
``backward`` consumes a record exactly once and attaches ``.grad`` buffers
to every tensor that requires gradients. Gradients are plain ndarrays, so
differentiating through a backward pass is structurally unsupported.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NonFiniteValues(ArithmeticError):
    """Raised when an operation produces NaN or Inf values."""


class RecordConsumed(RuntimeError):
    """Raised when a ComputationRecord is traversed more than once."""


def _check_finite(data: np.ndarray, op: str) -> None:
    # A single-pass reduction: the sum is finite iff every element is.
    if not np.isfinite(np.sum(data)):
        raise NonFiniteValues(f"operation '{op}' produced non-finite values")


class Tensor:
    """A shaped float64 array with an optional gradient buffer.

    Tensors are immutable once produced by an op; training loops replace
    ``.data`` wholesale through the optimizer. ``requires_grad`` marks
    leaves to optimize; derived tensors require gradients whenever any
    parent does.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(a.data * b.data, (a, b), grad_fn, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    return _from_op(out_data, (a, b), grad_fn, "div")


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def grad_fn(g):
        return (g * out_data,)

    return _from_op(out_data, (a,), grad_fn, "exp")


def tlog(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    return _from_op(out_data, (a,), grad_fn, "log")


def tsqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)

    def grad_fn(g):
        return (g * 0.5 / out_data,)

    return _from_op(out_data, (a,), grad_fn, "sqrt")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _from_op(a.data * mask, (a,), grad_fn, "relu")


def leaky_relu(a: Tensor, alpha: float = 0.1) -> Tensor:
    factor = np.where(a.data > 0, 1.0, alpha)

    def grad_fn(g):
        return (g * factor,)

    return _from_op(a.data * factor, (a,), grad_fn, "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    # exp(-softplus(-x)) is a numerically stable logistic function.
    out_data = np.exp(-np.logaddexp(0.0, -a.data))

    def grad_fn(g):
        return (g * out_data * (1.0 - out_data),)

    return _from_op(out_data, (a,), grad_fn, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out_data * out_data),)

    return _from_op(out_data, (a,), grad_fn, "tanh")


# ---------------------------------------------------------------------------
# shape and reduction ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.shape

    def grad_fn(g):
        return (g.reshape(old_shape),)

    return _from_op(a.data.reshape(shape), (a,), grad_fn, "reshape")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        g2 = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % len(in_shape) for ax in axes):
                g2 = np.expand_dims(g2, ax)
        return (np.broadcast_to(g2, in_shape).copy(),)

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * _as_tensor(1.0 / count)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeMismatch("concat needs at least one tensor")
    nd = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ShapeMismatch(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
    ax = axis % nd
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        )

    return _from_op(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), grad_fn, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(a.data @ b.data, (a, b), grad_fn, "matmul")


def avg_pool2d(a: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling over NCHW input."""
    n, c, h, w = a.shape
    if h % k or w % k:
        raise ShapeMismatch(f"pool size {k} does not divide spatial dims {(h, w)}")
    r = reshape(a, (n, c, h // k, k, w // k, k))
    return tmean(r, axis=(3, 5))


# ---------------------------------------------------------------------------
# convolution primitives (raw ndarray kernels shared by forward/backward)
# ---------------------------------------------------------------------------

def _conv_geometry(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    if stride < 1 or pad < 0:
        raise ShapeMismatch(f"invalid stride/pad ({stride}, {pad})")
    if pad > k - 1:
        raise ShapeMismatch(f"pad {pad} exceeds kernel-1 ({k - 1}); unsupported")
    rem_h = (h + 2 * pad - k) % stride
    rem_w = (w + 2 * pad - k) % stride
    if h + 2 * pad < k or rem_h or rem_w:
        raise ShapeMismatch(
            f"spatial dims {(h, w)} do not admit kernel {k}, stride {stride}, pad {pad} exactly"
        )
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _patches(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if kh != kw:
        raise ShapeMismatch(f"kernel must be square, got {w.shape}")
    if c != i:
        raise ShapeMismatch(f"input channels {c} != kernel input channels {i} ({x.shape} vs {w.shape})")
    _conv_geometry(h, wd, kh, stride, pad)
    win = _patches(x, kh, stride, pad)  # (N, C, Ho, Wo, K, K)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv_dkernel(x: np.ndarray, gy: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    win = _patches(x, k, stride, pad)  # (N, C, Ho, Wo, K, K)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, K, K)


def _conv_dinput(gy: np.ndarray, w: np.ndarray, stride: int, pad: int, hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of _conv_forward applied to gy; also the transposed-conv forward.

    Uses column-to-image scatter: patch gradients from one small GEMM are
    accumulated tap by tap, avoiding materialized stride-1 window views.
    """
    n, o, ho, wo = gy.shape
    _, c, k, _ = w.shape
    h, wdt = hw
    if (ho - 1) * stride + k - 2 * pad != h or (wo - 1) * stride + k - 2 * pad != wdt:
        raise ShapeMismatch(
            f"adjoint target {hw} incompatible with grad {gy.shape[2:]}, k={k}, "
            f"stride={stride}, pad={pad}"
        )
    # (C, K, K, N, Ho, Wo) so per-tap slices are cheap strided views
    pg = np.tensordot(w, gy, axes=([0], [1]))
    gxp = np.zeros((c, n, h + 2 * pad, wdt + 2 * pad))
    for a in range(k):
        for b in range(k):
            gxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += pg[:, a, b]
    gx = gxp[:, :, pad : pad + h, pad : pad + wdt]
    return np.ascontiguousarray(gx.swapaxes(0, 1))


# ---------------------------------------------------------------------------
# differentiable convolution ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with an OIKK kernel."""
    out_data = _conv_forward(x.data, w.data, stride, pad)
    k = w.shape[2]
    hw = x.shape[2:]

    def grad_fn(g):
        gx = _conv_dinput(g, w.data, stride, pad, hw) if x.requires_grad else None
        gw = _conv_dkernel(x.data, g, k, stride, pad) if w.requires_grad else None
        return gx, gw

    return _from_op(out_data, (x, w), grad_fn, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of conv2d: maps (N,O,h,w) with kernel (O,I,K,K) to (N,I,H,W).

    Output spatial size is (h-1)*stride + K - 2*pad. For all a, b and any
    shared kernel: <conv2d(a, k), b> == <a, conv2d_transpose(b, k)>.
    """
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if kh != kw:
        raise ShapeMismatch(f"kernel must be square, got {w.shape}")
    if c != o:
        raise ShapeMismatch(f"input channels {c} != kernel output channels {o} ({x.shape} vs {w.shape})")
    hw_out = ((h - 1) * stride + kh - 2 * pad, (wd - 1) * stride + kw - 2 * pad)
    out_data = _conv_dinput(x.data, w.data, stride, pad, hw_out)

    def grad_fn(g):
        gx = _conv_forward(g, w.data, stride, pad) if x.requires_grad else None
        gw = _conv_dkernel(g, x.data, kh, stride, pad) if w.requires_grad else None
        return gx, gw

    return _from_op(out_data, (x, w), grad_fn, "conv2d_transpose")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits; targets are 0/1 constants."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeMismatch(f"targets {t.shape} != logits {logits.shape}")
    z = logits.data
    losses = np.logaddexp(0.0, z) - z * t
    n = max(z.size, 1)

    def grad_fn(g):
        p = np.exp(-np.logaddexp(0.0, -z))
        return (g * (p - t) / n,)

    return _from_op(np.asarray(losses.sum() / n), (logits,), grad_fn, "bce_with_logits")


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return tmean(mul(d, d))


# ---------------------------------------------------------------------------
# backward traversal
# ---------------------------------------------------------------------------

class ComputationRecord:
    """Topologically ordered list of graph nodes below a loss, single-consumer."""

    def __init__(self, nodes: list[Tensor], root: Tensor):
        self.nodes = nodes
        self.root = root
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


def trace(loss: Tensor) -> ComputationRecord:
    """Capture the graph below ``loss`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return ComputationRecord(order, loss)


def backward(loss: Tensor, record: ComputationRecord | None = None) -> None:
    """Reverse-mode pass; attaches .grad to every requires_grad tensor reachable.

    The record (given or freshly traced) is consumed exactly once; a second
    traversal raises RecordConsumed. Gradients are ndarrays, so there is no
    support for differentiating through this pass.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require gradients; nothing to differentiate")
    if loss._op != "leaf" and loss._grad_fn is None:
        raise RecordConsumed("graph below this loss was already consumed by backward")
    if record is None:
        record = trace(loss)
    elif record.root is not loss:
        raise ValueError("record was traced from a different loss")
    if record.consumed:
        raise RecordConsumed("this ComputationRecord was already consumed by backward")
    record.consumed = True

    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.nodes):
        if node._grad_fn is None or node.grad is None:
            continue
        parent_grads = node._grad_fn(node.grad)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward:{node._op}")
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
    # Free closures so the graph cannot be traversed again and memory drops.
    for node in record.nodes:
        if node._grad_fn is not None:
            node._parents = ()
            node._grad_fn = None


def grad_check(op, point: list[Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps the tensors in ``point`` to a scalar Tensor. Returns
    max over all coordinates of |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8). Purely diagnostic; does not raise on mismatch.
    """
    params = [Tensor(p.data.copy(), requires_grad=True) for p in point]
    loss = op(*params)
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = op(*params).item()
            flat[i] = orig - epsilon
            lo = op(*params).item()
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * epsilon)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst
