"""
Minimal dense tensors with reverse-mode automatic differentiation.

Every value is a float64 numpy array. Primitives record a backward closure on
their output; `backward(loss)` orders the recorded graph into a Tape and runs
it once. Broadcasting is limited to 0-d scalar <-> tensor.
"""
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from models.errors import NonDeterministicError, NonFiniteError, ShapeError, TapeError

_grad_state = threading.local()


def grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """ Run primitives without recording them (per thread) """
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _wrap(cls, arr, op):
        out = cls.__new__(cls)
        _check_finite(arr, op)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = op
        out._consumed = False
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor._wrap(self.data, "detach")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return abs_(self)


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values at {where}")


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(arr, parents, backward_fn, op):
    """ Wrap a primitive's result and record it when any parent needs gradients """
    out = Tensor._wrap(arr, op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """ Topologically ordered record of the primitives behind one output """

    def __init__(self, nodes, output):
        self.nodes = nodes
        self.output = output

    @classmethod
    def record(cls, output):
        if output._consumed:
            raise TapeError("tape already consumed: backward may run once per forward pass")
        if not output.requires_grad:
            raise TapeError("output does not depend on any tensor that requires grad")
        order, visited = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            if node._consumed:
                raise TapeError("tape already consumed: backward may run once per forward pass")
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order, output)

    def run(self, seed):
        grads = {id(self.output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
            node._consumed = True
            node._backward = None
            node._parents = ()


def backward(loss, inputs=None):
    """
    Populate `.grad` on every requires_grad leaf reachable from a scalar loss.
    Leaves listed in `inputs` that the loss does not reach get a zero gradient.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape.record(loss).run(np.ones_like(loss.data))
    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ----------------------------------------------------------------- elementwise

def _broadcast_pair(a, b, op):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only scalar broadcasting)")


def _reduce_to(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_pair(a, b, "add")

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), _backward, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_pair(a, b, "mul")

    def _backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _backward, "mul")


def scale(a, c):
    c = float(c)

    def _backward(g):
        return (g * c,)

    return _make(a.data * c, (a,), _backward, "scale")


def relu(a):
    mask = a.data > 0

    def _backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), _backward, "relu")


def abs_(a):
    sign = np.sign(a.data)

    def _backward(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), _backward, "abs")


def elementwise(op, a, b=None):
    """ Dispatch for the four elementwise primitives: add, mul, relu, scale """
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "relu":
        return relu(a)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------------ reductions

def sum_(a, axis=None):
    def _backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), _backward, "sum")


def mean(a, axis=None):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis), 1.0 / count)


# --------------------------------------------------------------------- shaping

def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")

    def _backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), _backward, "reshape")


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def _backward(g):
        return (g.T,)

    return _make(a.data.T.copy(), (a,), _backward, "transpose")


def index(a, i):
    """ Pick one element of a vector as a 0-d tensor """
    if a.ndim != 1:
        raise ShapeError(f"index expects a vector, got shape {a.shape}")

    def _backward(g):
        out = np.zeros_like(a.data)
        out[i] = g
        return (out,)

    return _make(np.asarray(a.data[i]), (a,), _backward, "index")


def concat_channels(a, b):
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    split = a.shape[0]

    def _backward(g):
        return g[:split], g[split:]

    return _make(np.concatenate([a.data, b.data], axis=0), (a, b), _backward, "concat")


def slice_channels(a, start, stop):
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) outside {a.shape[0]} channels")

    def _backward(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return (out,)

    return _make(a.data[start:stop].copy(), (a,), _backward, "slice")


def tile_spatial(v, height, width):
    """ Broadcast a channel vector [C] to a constant map [C, H, W] """
    if v.ndim != 1:
        raise ShapeError(f"tile_spatial expects a vector, got shape {v.shape}")

    def _backward(g):
        return (g.sum(axis=(1, 2)),)

    arr = np.broadcast_to(v.data[:, None, None], (v.shape[0], height, width)).copy()
    return _make(arr, (v,), _backward, "tile")


def to_tokens(x):
    """ [C, H, W] -> [H*W, C]: spatial positions become tokens """
    c, h, w = x.shape
    return transpose(reshape(x, (c, h * w)))


def from_tokens(t, height, width):
    """ [H*W, C] -> [C, H, W] """
    return reshape(transpose(t), (t.shape[1], height, width))


# ---------------------------------------------------------------------- linear

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), _backward, "matmul")


def linear(x, weight, bias=None):
    """ x [T, d_in] @ weight [d_in, d_out] + bias [d_out] """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _make(out, parents, _backward, "linear")


def softmax(a, axis=-1):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), _backward, "softmax")


# --------------------------------------------------------------------- spatial

def _windows(xp, k, stride):
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, kernel, padding=0, stride=1, bias=None):
    """ Cross-correlation of x [C_in, H, W] with kernel [C_out, C_in, k, k] """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected [C,H,W] and [O,C,k,k], got {x.shape} and {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kernel.shape}")
    if c_in != x.shape[0]:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if padding < 0 or stride < 1:
        raise ShapeError(f"conv2d: invalid padding={padding} stride={stride}")
    _, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride)
    ho, wo = win.shape[1], win.shape[2]
    out = np.tensordot(kernel.data, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _backward(g):
        g_kernel = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        cols = np.tensordot(kernel.data, g, axes=([0], [0]))  # [C_in, k, k, Ho, Wo]
        g_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                g_xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
        g_x = g_xp[:, padding:padding + h, padding:padding + w]
        grads = (g_x, g_kernel)
        return grads if bias is None else grads + (g.sum(axis=(1, 2)),)

    return _make(out, parents, _backward, "conv2d")


def depthwise_conv2d(x, kernel, padding=0):
    """ Per-channel cross-correlation: x [C, H, W], kernel [C, k, k] """
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"depthwise_conv2d: expected [C,H,W] and [C,k,k], got {x.shape} and {kernel.shape}")
    c, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel must be square with odd size, got {kernel.shape}")
    if c != x.shape[0]:
        raise ShapeError(f"depthwise_conv2d: input has {x.shape[0]} channels, kernel has {c}")
    _, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"depthwise_conv2d: kernel {k} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, 1)
    ho, wo = win.shape[1], win.shape[2]
    out = np.einsum("chwij,cij->chw", win, kernel.data)

    def _backward(g):
        g_kernel = np.einsum("chw,chwij->cij", g, win)
        g_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                g_xp[:, i:i + ho, j:j + wo] += g * kernel.data[:, i, j][:, None, None]
        return g_xp[:, padding:padding + h, padding:padding + w], g_kernel

    return _make(out, (x, kernel), _backward, "depthwise_conv2d")


def max_pool2d(x, window, stride=None):
    stride = window if stride is None else stride
    if x.ndim != 3:
        raise ShapeError(f"max_pool2d: expected [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"max_pool2d: window {window} exceeds spatial extent {h}x{w}")

    win = _windows(x.data, window, stride)
    ho, wo = win.shape[1], win.shape[2]
    flat = win.reshape(c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        rows = np.arange(ho)[None, :, None] * stride + arg // window
        cols = np.arange(wo)[None, None, :] * stride + arg % window
        chans = np.broadcast_to(np.arange(c)[:, None, None], arg.shape)
        g_x = np.zeros_like(x.data)
        np.add.at(g_x, (chans, rows, cols), g)
        return (g_x,)

    return _make(out, (x,), _backward, "max_pool2d")


def avg_pool2d(x, factor):
    """ Non-overlapping mean pooling; trailing rows/columns that do not fill a window are dropped """
    if x.ndim != 3:
        raise ShapeError(f"avg_pool2d: expected [C,H,W], got {x.shape}")
    c, h, w = x.shape
    ho, wo = h // factor, w // factor
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: factor {factor} exceeds spatial extent {h}x{w}")
    cropped = x.data[:, :ho * factor, :wo * factor]
    out = cropped.reshape(c, ho, factor, wo, factor).mean(axis=(2, 4))

    def _backward(g):
        g_x = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) / (factor * factor)
        g_x[:, :ho * factor, :wo * factor] = spread
        return (g_x,)

    return _make(out, (x,), _backward, "avg_pool2d")


def _interp_matrix(n_out, n_in):
    """ Half-pixel bilinear weights, edges clamped """
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(x, height, width):
    if x.ndim != 3:
        raise ShapeError(f"upsample_bilinear: expected [C,H,W], got {x.shape}")
    a_h = _interp_matrix(height, x.shape[1])
    a_w = _interp_matrix(width, x.shape[2])
    out = np.einsum("Hh,chw,Ww->cHW", a_h, x.data, a_w)

    def _backward(g):
        return (np.einsum("Hh,cHW,Ww->chw", a_h, g, a_w),)

    return _make(out, (x,), _backward, "upsample_bilinear")


# ------------------------------------------------------------------ grad check

def push_from_kinks(data, eps, margin=10.0):
    """ Move entries closer than margin*eps to zero out to +/- margin*eps """
    data = np.array(data, dtype=np.float64)
    near = np.abs(data) < margin * eps
    data[near] = np.where(data[near] < 0, -margin * eps, margin * eps)
    return data


def grad_check(f, x, eps=1e-6, avoid_kinks=False):
    """
    Max relative error between the analytic gradient of scalar f at x and
    central finite differences. x is perturbed in place and restored, so f may
    close over x (e.g. a model parameter) instead of using its argument.
    avoid_kinks=True first moves entries of x within 10*eps of zero out to
    +/-10*eps (push_from_kinks); that shift is kept.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if not isinstance(x, Tensor):
        x = Tensor(x, requires_grad=True)
    x.requires_grad = True
    x.data = push_from_kinks(x.data, eps) if avoid_kinks else np.ascontiguousarray(x.data)

    with no_grad():
        first, second = f(x).item(), f(x).item()
    if first != second:
        raise NonDeterministicError(f"f is not deterministic: {first!r} != {second!r}")

    x.grad = None
    loss = f(x)
    backward(loss, inputs=[x])
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = f(x).item()
            flat[i] = orig - eps
            minus = f(x).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
