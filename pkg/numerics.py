"""
Dense float64 tensors with tape-based reverse-mode differentiation

Only the kernels the model needs: matmul, softmax, layer norm, LeakyReLU,
axis means, concatenation, cosine similarity, align-corners bilinear
upsampling plus the elementwise glue the losses are written with.

Usage:
    w = Tensor(np.eye(2), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(matmul(x, w))
    backward(loss, tape)
    w.grad  # d loss / d w
"""

import threading

import numpy as np

from errors import ShapeError, NumericsError, TapeError

LAYER_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.01


class Diagnostics:
    """Counters for degenerate-but-legal numeric states"""

    def __init__(self):
        self._lock = threading.Lock()
        self.zero_norm_cosine = 0

    def flag_zero_norm(self):
        with self._lock:
            self.zero_norm_cosine += 1

    def reset(self):
        """Return the current counters and zero them"""
        with self._lock:
            counts = {"zero_norm_cosine": self.zero_norm_cosine}
            self.zero_norm_cosine = 0
        return counts


DIAGNOSTICS = Diagnostics()


class Tensor:
    """n-d float64 array that can take part in a gradient tape"""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    # ndarray (op) Tensor must defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, array):
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.grad = None
        out._node = None
        out.name = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{label})"

    # elementwise glue
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(value):
    """Constants (floats, lists, arrays) become non-tracked tensors"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of differentiable ops for one training step

    Kernels record onto the innermost active tape (per thread). A tape is
    replayed backward exactly once.
    """

    def __init__(self):
        self.nodes = []
        self._node_ids = set()
        self.consumed = False

    def record(self, node):
        self.nodes.append(node)
        self._node_ids.add(id(node))

    def __contains__(self, node):
        return id(node) in self._node_ids

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class suspend_tape:
    """Context manager: run kernels without recording (evaluation, finite differences)"""

    def __enter__(self):
        _tape_stack().append(None)

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _make(array, parents, backward_fn, op):
    if not np.all(np.isfinite(array)):
        raise NumericsError(op)
    out = Tensor._wrap(array)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, backward_fn, op)
        out._node = node
        tape.record(node)
    return out


def backward(loss, tape):
    """Replay `tape` backward from scalar `loss`

    Every requires_grad leaf seen on the tape ends up with a grad buffer
    (zeros when the loss does not depend on it). Leaf gradients accumulate
    additively across calls; zero them explicitly between steps.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if tape.consumed:
        raise TapeError("tape was already replayed; record a fresh tape per step")
    if loss._node is not None and loss._node not in tape:
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True

    for node in tape.nodes:
        for parent in node.parents:
            if parent.requires_grad and parent._node is None and parent.grad is None:
                parent.grad = np.zeros_like(parent.data)

    if loss._node is None:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += 1.0
        return

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad = pending.pop(id(node.out), None)
        if grad is None:
            continue
        parent_grads = node.backward_fn(grad)
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad += parent_grad
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = parent_grad


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot combine {a.shape} and {b.shape}") from exc

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), grad_fn, "add")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot combine {a.shape} and {b.shape}") from exc

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), grad_fn, "mul")


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data ** exponent

    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), grad_fn, "power")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericsError("log", "non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a, low, high):
    """Clip to [low, high]; gradient passes where the input lies inside the interval"""
    a = as_tensor(a)
    out = np.clip(a.data, low, high)
    inside = (a.data >= low) & (a.data <= high)
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def relu(a):
    """max(0, a) with gradient 0 at exactly 0 (hinge kink convention)"""
    a = as_tensor(a)
    active = a.data > 0
    return _make(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,), "relu")


def leaky_relu(x, slope=LEAKY_SLOPE):
    x = as_tensor(x)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    positive = x.data >= 0
    out = np.where(positive, x.data, slope * x.data)
    return _make(out, (x,), lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def transpose(x, axes=None):
    x = as_tensor(x)
    out = np.transpose(x.data, axes)

    def grad_fn(g):
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)

    return _make(np.ascontiguousarray(out), (x,), grad_fn, "transpose")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return _make(out.copy(), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)


def take(x, index):
    """x[index]; basic slices and integer-array row gathers"""
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=np.float64)
    basic = _is_basic_index(index)

    def grad_fn(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _make(out, (x,), grad_fn, "take")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), grad_fn, "stack")


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
                t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis):
            raise ShapeError(f"concat off-axis mismatch: {tensors[0].shape} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), grad_fn, "concat")


def concat_axis(a, b, axis):
    return concat([a, b], axis)


def sum_all(x):
    x = as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def sum_axis(x, axis):
    x = as_tensor(x)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), grad_fn, "sum_axis")


def mean_axis(x, axis):
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    n = x.shape[axis]

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _make(x.data.mean(axis=axis), (x,), grad_fn, "mean_axis")


def mean_all(x):
    x = as_tensor(x)
    n = x.data.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),), "mean")


def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericsError("softmax", "non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), grad_fn, "softmax")


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize over the last axis, then scale by gain and shift by bias"""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm affine params must be ({width},), got {gain.shape} / {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def grad_fn(g):
        g_normed = g * gain.data
        gx = inv_std * (g_normed
                        - g_normed.mean(axis=-1, keepdims=True)
                        - normed * (g_normed * normed).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, width)
        g_gain = (flat_g * normed.reshape(-1, width)).sum(axis=0)
        return gx, g_gain, flat_g.sum(axis=0)

    return _make(out, (x, gain, bias), grad_fn, "layer_norm")


def cosine_similarity(u, v):
    """dot(u, v) / (|u| |v|) as a 0-d tensor

    A zero-norm input yields 0 (and zero gradient) and bumps
    DIAGNOSTICS.zero_norm_cosine instead of producing NaN.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity needs two equal-length vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        DIAGNOSTICS.flag_zero_norm()
        zeros = (np.zeros_like(u.data), np.zeros_like(v.data))
        return _make(np.array(0.0), (u, v), lambda g: zeros, "cosine_similarity")
    c = float(u.data @ v.data) / (nu * nv)

    def grad_fn(g):
        gu = g * (v.data / (nu * nv) - c * u.data / (nu * nu))
        gv = g * (u.data / (nu * nv) - c * v.data / (nv * nv))
        return gu, gv

    return _make(np.array(c), (u, v), grad_fn, "cosine_similarity")


def _interp_matrix(n_out, n_in):
    # align-corners: src = dst * (n_in - 1) / (n_out - 1)
    weights = np.zeros((n_out, n_in))
    if n_in == 1:
        weights[:, 0] = 1.0
        return weights
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1)
        lo = min(int(np.floor(src)), n_in - 2)
        frac = src - lo
        weights[i, lo] += 1.0 - frac
        weights[i, lo + 1] += frac
    return weights


def bilinear_upsample(x, height, width):
    """Align-corners bilinear resize of an h x w x c map to height x width x c"""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects h x w x c, got {x.shape}")
    h, w, _ = x.shape
    if height < h or width < w:
        raise ShapeError(f"downsampling {h}x{w} -> {height}x{width} is not supported")
    rows = _interp_matrix(height, h)
    cols = _interp_matrix(width, w)
    out = np.einsum("Hh,hwc,Ww->HWc", rows, x.data, cols)

    def grad_fn(g):
        return (np.einsum("Hh,HWc,Ww->hwc", rows, g, cols),)

    return _make(out, (x,), grad_fn, "bilinear_upsample")


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def _evaluate_scalar(f, x):
    with suspend_tape():
        value = f(x)
    value = float(as_tensor(value).data.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericsError("finite_diff_check", "objective returned a non-finite value")
    return value


def finite_diff_check(f, x, h=1e-5, coords=None):
    """Max relative error between the tape gradient of f at x and central differences

    f maps the tensor x to a scalar tensor. The error per coordinate is
    |analytic - numeric| / max(1, |analytic|). `coords` restricts the check
    to a subset of flat indices.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            out = as_tensor(f(x))
        if out.data.size != 1 or not np.all(np.isfinite(out.data)):
            raise NumericsError("finite_diff_check", "objective must return one finite value")
        backward(out, tape)
        analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

        indices = range(x.data.size) if coords is None else coords
        worst = 0.0
        for flat_index in indices:
            pos = np.unravel_index(int(flat_index), x.shape)
            original = x.data[pos]
            x.data[pos] = original + h
            f_plus = _evaluate_scalar(f, x)
            x.data[pos] = original - h
            f_minus = _evaluate_scalar(f, x)
            x.data[pos] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[pos]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        return worst
    finally:
        x.requires_grad, x.grad = saved_flag, saved_grad
