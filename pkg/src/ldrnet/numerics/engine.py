"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Every op returns a new Tensor that
remembers its parents and a closure mapping the output gradient to parent
gradients. :func:`backward` walks the implicit graph in reverse topological
order, visiting each node exactly once.

Image tensors use NHWC layout throughout.
"""
import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


# When a list, non-smooth ops append the region each input element falls in.
# Finite-difference checks compare these between perturbed evaluations.
_kink_log = None


class record_kinks:
    """Context manager collecting the piecewise region signatures of non-smooth ops."""

    def __enter__(self):
        global _kink_log
        self._saved = _kink_log
        _kink_log = self.log = []
        return self.log

    def __exit__(self, *exc):
        global _kink_log
        _kink_log = self._saved
        return False


def _note_region(region):
    """``region`` is a thunk, evaluated only while recording."""
    if _kink_log is not None:
        _kink_log.append(region())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def abs(self):
        return tabs(self)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _result(data, parents, backward_fn):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    # python scalars adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


# ------------------------------------------------------------------ graph

def topological_order(root):
    """Nodes reachable from ``root`` that take part in differentiation, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Returns a dict mapping each such leaf Tensor to its gradient array.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ------------------------------------------------------------------ elementwise

def add(a, b):
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _result(out, (a, b), bw)


def safe_div(a, b, fill):
    """``a / b`` where ``b != 0``; ``fill`` (with zero gradient) where ``b == 0``."""
    a, b = _pair(a, b)
    zero = b.data == 0
    _note_region(lambda: zero)
    denom = np.where(zero, 1, b.data)
    out = np.where(zero, fill, a.data / denom).astype(a.dtype, copy=False)
    keep = ~zero

    def bw(g):
        g = g * keep
        return (_unbroadcast(g / denom, a.shape), _unbroadcast(-g * out / denom, b.shape))
    return _result(out, (a, b), bw)


def tabs(x):
    x = as_tensor(x)
    _note_region(lambda: np.sign(x.data).astype(np.int8))
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu6(x):
    x = as_tensor(x)
    _note_region(lambda: (x.data > 0).astype(np.int8) + (x.data >= 6))
    out = np.clip(x.data, 0, 6)
    return _result(out, (x,), lambda g: (g * ((x.data > 0) & (x.data < 6)),))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (np.tanh(0.5 * x.data) + 1)  # overflow-free logistic
    out = out.astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


def square(x):
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def norm(x, axis=-1):
    """Euclidean norm along ``axis``; subgradient 0 at the origin."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis))
    _note_region(lambda: n > 0)

    def bw(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1)
        return (np.where(nk > 0, np.expand_dims(g, axis) / safe, 0) * x.data,)
    return _result(n, (x,), bw)


# ------------------------------------------------------------------ structural

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def _has_array_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(x, index):
    x = as_tensor(x)
    fancy = _has_array_index(index)

    def bw(g):
        out = np.zeros_like(x.data)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] += g
        return (out,)
    return _result(x.data[index], (x,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result(out, tensors, bw)


# ------------------------------------------------------------------ convolution

def _same_pad(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h, w, kh, kw, stride, padding):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        oh, pt, pb = _same_pad(h, kh, stride)
        ow, pl, pr = _same_pad(w, kw, stride)
    elif padding == "valid":
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
        if oh < 1 or ow < 1:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w} with valid padding")
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return oh, ow, ((0, 0), (pt, pb), (pl, pr), (0, 0))


def _unpad(a, pads):
    (_, _), (pt, pb), (pl, pr), _ = pads
    return a[:, pt:a.shape[1] - pb, pl:a.shape[2] - pr, :]


def conv2d(x, kernel, stride=1, padding="same"):
    """Cross-correlation of ``x[B,H,W,Cin]`` with ``kernel[kh,kw,Cin,Cout]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d wants 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d input channels {cin} != kernel input channels {kcin}")

    if kh == 1 and kw == 1 and stride == 1:
        x2 = x.data.reshape(-1, cin)
        w2 = kernel.data.reshape(cin, cout)
        out = (x2 @ w2).reshape(b, h, w, cout)

        def bw_pointwise(g):
            g2 = g.reshape(-1, cout)
            return ((g2 @ w2.T).reshape(x.shape), (x2.T @ g2).reshape(kernel.shape))
        return _result(out, (x, kernel), bw_pointwise)

    oh, ow, pads = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x.data, pads)
    cols = kernels.im2col(xp, kh, kw, stride, oh, ow)
    w2 = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ w2).reshape(b, oh, ow, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(kernel.shape)
        dxp = kernels.col2im(g2 @ w2.T, xp.shape, kh, kw, stride, oh, ow)
        return (_unpad(dxp, pads), dw)
    return _result(out, (x, kernel), bw)


def depthwise_conv2d(x, kernel, stride=1, padding="same"):
    """Per-channel cross-correlation of ``x[B,H,W,C]`` with ``kernel[kh,kw,C]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 3:
        raise ShapeError(f"depthwise_conv2d wants 4-d input and 3-d kernel, got {x.shape} and {kernel.shape}")
    b, h, w, c = x.shape
    kh, kw, kc = kernel.shape
    if kc != c:
        raise ShapeError(f"depthwise_conv2d input channels {c} != kernel channels {kc}")
    oh, ow, pads = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x.data, pads)
    out = kernels.dw_forward(xp, kernel.data, stride, oh, ow)

    def bw(g):
        dxp, dk = kernels.dw_backward(xp, kernel.data, g, stride)
        return (_unpad(dxp, pads), dk)
    return _result(out, (x, kernel), bw)


def bias_add(x, bias):
    """Add a per-channel bias along the last axis."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.shape[-1] != bias.shape[-1] or bias.ndim != 1:
        raise ShapeError(f"bias of shape {bias.shape} does not match channels {x.shape[-1]}")
    return add(x, bias)


# ------------------------------------------------------------------ pooling / dense

def global_avg_pool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool wants [B,H,W,C], got {x.shape}")
    b, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def avg_pool_to(x, out_h, out_w):
    """Block-average downsample to ``out_h x out_w``; sides must divide evenly."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    if out_h > h or out_w > w or h % out_h or w % out_w:
        raise ShapeError(f"cannot block-average {h}x{w} down to {out_h}x{out_w}")
    fh, fw = h // out_h, w // out_w
    if fh == 1 and fw == 1:
        return x
    out = x.data.reshape(b, out_h, fh, out_w, fw, c).mean(axis=(2, 4))

    def bw(g):
        g = np.broadcast_to(g[:, :, None, :, None, :] / (fh * fw), (b, out_h, fh, out_w, fw, c))
        return (g.reshape(x.shape),)
    return _result(out, (x,), bw)


def dense(x, weight, bias=None):
    """``x[B,D] @ weight[D,K] + bias[K]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    w = np.ascontiguousarray(weight.data)
    out = x.data @ w
    y = _result(out, (x, weight), lambda g: (g @ w.T, x.data.T @ g))
    if bias is None:
        return y
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match output width {weight.shape[1]}")
    return add(y, bias)


# ------------------------------------------------------------------ losses

def softmax_cross_entropy(logits, labels):
    """Per-row ``-log softmax(logits)[label]`` with max-subtraction."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"class index out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(labels.size)
    out = -logp[rows, labels]

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * g[:, None],)
    return _result(out, (logits,), bw)

