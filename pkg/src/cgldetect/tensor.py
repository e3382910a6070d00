"""Minimal reverse-mode array engine.

Carries every feature map, kernel and score map in the package.  Only the
operations the segmentation pipeline needs are provided: 2D cross-correlation,
relu/sigmoid, per-channel batch norm, class softmax, element-wise product,
quarter rotation, spatial variance and a handful of scalar reductions.
Gradients of each op are analytic and verified against central finite
differences in the test suite.

Conventions:

* feature tensors are (C, H, W); conv kernels are (C_out, C_in, kh, kw)
* "conv" means cross-correlation (no kernel flip)
* reductions use numpy's fixed row-major (pairwise) order, so any op
  sequence is bit-reproducible across runs
* dtype is float64 or float32 and must agree between operands
"""

from dataclasses import dataclass

import numpy as np

from . import backend as _B


class NonFiniteError(ValueError):
    """A tensor picked up a NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def is_leaf(self):
        return not self._parents

    def backward(self):
        """Reverse-mode pass from a scalar root.

        Leaf gradients accumulate across calls until zero_grad(); gradients
        of interior nodes are recomputed fresh on every call.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        order = _toposort(self)
        for node in order:
            if node._parents:
                node.grad = None
        seed = np.ones_like(self.data)
        if self._parents:
            self.grad = seed
        else:
            _accumulate(self, seed)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _node(data, parents, backward_fn):
    """Wrap an op result; parents that cannot take gradient are dropped."""
    grad_parents = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data)
    if grad_parents:
        out.requires_grad = True
        out._parents = grad_parents
        out._backward_fn = backward_fn
    return out


def _check_same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# convolution

@dataclass
class ConvSpec:
    """Kernel plus geometry for 2D cross-correlation."""
    kernel: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.data.ndim != 4:
            raise ValueError("kernel must be (C_out, C_in, kh, kw)")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")


def conv2d(x, spec):
    """Cross-correlate x (C_in,H,W) with spec.kernel; zero padding."""
    k = spec.kernel
    stride, pad = spec.stride, spec.padding
    if x.data.ndim != 3:
        raise ValueError("conv2d input must be (C,H,W)")
    cin, h, w = x.shape
    co, kcin, kh, kw = k.shape
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    _check_same_dtype(x, k, "conv2d")
    for extent, kext in ((h, kh), (w, kw)):
        span = extent + 2 * pad - kext
        if span < 0 or span % stride != 0:
            raise ValueError(
                f"conv2d: non-integral output extent for size {extent}, "
                f"kernel {kext}, stride {stride}, padding {pad}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = _B.conv2d_forward(xp, k.data, stride)

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            gxp = _B.conv2d_grad_input(g, k.data, xp.shape[1], xp.shape[2], stride)
            if pad:
                gxp = gxp[:, pad:pad + h, pad:pad + w]
            _accumulate(x, gxp)
        if k.requires_grad:
            _accumulate(k, _B.conv2d_grad_kernel(g, xp, kh, kw, stride))

    return _node(out, (x, k), backward_fn)


def zero_pad2d(x, top, bottom, left, right):
    """Zero-pad the spatial dims of x (C,H,W); backward crops."""
    if min(top, bottom, left, right) < 0:
        raise ValueError("padding amounts must be non-negative")
    _, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (top, bottom), (left, right)))

    def backward_fn(g):
        _accumulate(x, g[:, top:top + h, left:left + w])

    return _node(out, (x,), backward_fn)


def add_channel_bias(x, bias):
    """x (C,H,W) + bias (C), broadcast over the plane."""
    if bias.data.shape != (x.shape[0],):
        raise ValueError("bias must be one value per channel")
    _check_same_dtype(x, bias, "add_channel_bias")
    out = x.data + bias.data[:, None, None]

    def backward_fn(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=(1, 2)))

    return _node(out, (x, bias), backward_fn)


# ---------------------------------------------------------------------------
# pointwise

def relu(x):
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        _accumulate(x, g * (x.data > 0))

    return _node(out, (x,), backward_fn)


def sigmoid(x):
    out = _sigmoid_raw(x.data)

    def backward_fn(g):
        _accumulate(x, g * out * (1.0 - out))

    return _node(out, (x,), backward_fn)


def _sigmoid_raw(z):
    # exp of a non-positive argument only, so it never overflows
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


_POINTWISE = {"relu": relu, "sigmoid": sigmoid}


def pointwise(x, fn):
    try:
        return _POINTWISE[fn](x)
    except KeyError:
        raise ValueError(f"unknown pointwise fn {fn!r}") from None


# ---------------------------------------------------------------------------
# batch norm

class BatchNorm:
    """Per-channel batch normalization with running statistics.

    Training mode normalizes by batch statistics (population variance,
    epsilon 1e-5) and updates the running mean/var with momentum 0.1;
    eval mode normalizes by the running statistics.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, training):
        if x.shape[0] != self.channels:
            raise ValueError(f"batch_norm: {x.shape[0]} channels, state has {self.channels}")
        gamma, beta = self.gamma, self.beta
        if training:
            mu = x.data.mean(axis=(1, 2))
            var = x.data.var(axis=(1, 2))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(x.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(x.dtype)
        else:
            mu = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mu[:, None, None]) * inv_std[:, None, None]
        out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

        if training:
            n = x.shape[1] * x.shape[2]
            xc = x.data - mu[:, None, None]

            def backward_fn(g):
                _accumulate(gamma, (g * xhat).sum(axis=(1, 2)))
                _accumulate(beta, g.sum(axis=(1, 2)))
                if not x.requires_grad:
                    return
                gxhat = g * gamma.data[:, None, None]
                inv3 = inv_std ** 3
                gvar = (gxhat * xc).sum(axis=(1, 2)) * (-0.5) * inv3
                gmu = (-(gxhat.sum(axis=(1, 2))) * inv_std
                       + gvar * (-2.0 / n) * xc.sum(axis=(1, 2)))
                gx = (gxhat * inv_std[:, None, None]
                      + gvar[:, None, None] * 2.0 * xc / n
                      + gmu[:, None, None] / n)
                _accumulate(x, gx)
        else:
            def backward_fn(g):
                _accumulate(gamma, (g * xhat).sum(axis=(1, 2)))
                _accumulate(beta, g.sum(axis=(1, 2)))
                _accumulate(x, g * (gamma.data * inv_std)[:, None, None])

        return _node(out, (x, gamma, beta), backward_fn)


def batch_norm(x, state, training):
    return state(x, training)


# ---------------------------------------------------------------------------
# softmax / products / rotation / variance

def softmax_classes(logits):
    """Per-pixel softmax over the leading class axis of (K,H,W)."""
    if logits.data.ndim != 3 or logits.shape[0] < 2:
        raise ValueError("softmax_classes expects (K,H,W) with K >= 2")
    z = logits.data
    m = z.max(axis=0, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=0, keepdims=True)

    def backward_fn(g):
        dot = (g * p).sum(axis=0, keepdims=True)
        _accumulate(logits, p * (g - dot))

    return _node(p, (logits,), backward_fn)


def hadamard(a, b):
    """Element-wise product; b may be (1,H,W) broadcast over a's channels."""
    _check_same_dtype(a, b, "hadamard")
    broadcast = (a.data.ndim == 3 and b.data.ndim == 3
                 and b.shape[0] == 1 and a.shape[0] != 1
                 and a.shape[1:] == b.shape[1:])
    if not broadcast and a.shape != b.shape:
        raise ValueError(f"hadamard: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def backward_fn(g):
        _accumulate(a, g * b.data)
        gb = g * a.data
        if broadcast:
            gb = gb.sum(axis=0, keepdims=True)
        _accumulate(b, gb)

    return _node(out, (a, b), backward_fn)


def rotate90(x, k=1):
    """Quarter turn of each channel plane of (C,H,W); k=1 counter-clockwise,
    k=-1 clockwise."""
    if k not in (1, -1):
        raise ValueError("k must be 1 or -1")
    out = np.ascontiguousarray(np.rot90(x.data, k, axes=(1, 2)))

    def backward_fn(g):
        _accumulate(x, np.ascontiguousarray(np.rot90(g, -k, axes=(1, 2))))

    return _node(out, (x,), backward_fn)


def spatial_variance(plane):
    """Population variance of an (H,W) map."""
    if plane.data.ndim != 2 or plane.data.size < 1:
        raise ValueError("spatial_variance expects a non-empty (H,W) map")
    n = plane.data.size
    mu = plane.data.mean()
    centered = plane.data - mu
    out = np.asarray((centered * centered).mean())

    def backward_fn(g):
        _accumulate(plane, g * (2.0 / n) * centered)

    return _node(out, (plane,), backward_fn)


# ---------------------------------------------------------------------------
# scalar plumbing

def add(a, b):
    _check_same_dtype(a, b, "add")
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(out, (a, b), backward_fn)


def scale(x, c):
    c = float(c)
    out = x.data * x.data.dtype.type(c)

    def backward_fn(g):
        _accumulate(x, g * x.data.dtype.type(c))

    return _node(out, (x,), backward_fn)


def tsum(x):
    out = np.asarray(x.data.sum())

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return _node(out, (x,), backward_fn)


def mean_all(x):
    n = x.data.size
    out = np.asarray(x.data.mean())

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=False))

    return _node(out, (x,), backward_fn)


def mse(a, b):
    """Mean squared difference over all elements."""
    _check_same_dtype(a, b, "mse")
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean())

    def backward_fn(g):
        gd = g * 2.0 / n * diff
        _accumulate(a, gd)
        _accumulate(b, -gd)

    return _node(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# optimizer

class MissingGradient(RuntimeError):
    pass


class SGD:
    """SGD with classical momentum: v <- m*v + grad; p <- p - lr*v."""

    def __init__(self, params, lr, momentum=0.0):
        # params: mapping name -> Tensor (insertion order fixes update order)
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradient(f"parameter {name!r} has no gradient")
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= p.data.dtype.type(self.lr) * v
        self.zero_grad()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def sgd_step(params, lr, momentum=0.0, velocity=None):
    """One functional SGD step over a name->Tensor mapping.

    Returns the velocity mapping so callers can thread it between steps.
    Gradients are zeroed afterwards.
    """
    if velocity is None:
        velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradient(f"parameter {name!r} has no gradient")
        v = velocity[name]
        v *= momentum
        v += p.grad
        p.data -= p.data.dtype.type(lr) * v
        p.grad = None
    return velocity
