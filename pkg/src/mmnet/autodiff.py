"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record the operations that produced them in a
computational graph; ``backward`` walks the graph in reverse topological
order and accumulates gradients on every reachable leaf that requires them.

The engine is deliberately small: it provides exactly the differentiable
primitives the rest of the package is built from (matmul, conv2d, softmax,
layer norm, pooling/upsampling, elementwise ops, reductions, slicing) and
nothing else.  Forward values are computed eagerly.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype newly created tensors default to (float32 or float64)."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype: {dtype}")
    DEFAULT_DTYPE = dtype.type


class Tensor:
    """A node in the computational graph.

    ``data`` is a numpy array, ``grad`` (same shape) is populated by
    ``backward``.  Non-leaf tensors keep references to their parents and a
    closure that pushes gradients backwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents",
                 "_backward", "_backward_done")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf",
                 backward=None, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("cannot wrap a Tensor in a Tensor")
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) \
                else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Populate ``grad`` on every requires-grad tensor reachable from here.

        The receiver must be scalar.  Calling backward twice on the same
        result without rebuilding the graph is an error.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise ContractError("backward already ran on this graph")
        topo = topo_sort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._backward_done = True

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


def topo_sort(root: Tensor):
    """Topological order of the graph below ``root`` (iterative DFS)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, op="param")


def _needs(*tensors):
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, _needs(a, b), (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, _needs(a, b), (a, b), "mul", bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0)

    def bw(g):
        if x.requires_grad:
            x.accumulate(g * (x.data > 0))

    return Tensor(out_data, x.requires_grad, (x,), "relu", bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out_data = _sigmoid(x.data)

    def bw(g):
        if x.requires_grad:
            x.accumulate(g * out_data * (1.0 - out_data))

    return Tensor(out_data, x.requires_grad, (x,), "sigmoid", bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.log(x.data)

    def bw(g):
        if x.requires_grad:
            x.accumulate(g / x.data)

    return Tensor(out_data, x.requires_grad, (x,), "log", bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return Tensor(out_data, _needs(a, b), (a, b), "matmul", bw)


# -- convolution and spatial ops ---------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int):
    """Extract patches from padded input, ordered (ki, kj, cin) per column."""
    cin = xp.shape[2]
    cols = np.empty((ho, wo, kh * kw * cin), dtype=xp.dtype)
    idx = 0
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, idx:idx + cin] = xp[
                ki:ki + ho * stride:stride, kj:kj + wo * stride:stride, :]
            idx += cin
    return cols


def conv2d(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """2D cross-correlation on an H x W x Cin map.

    kernel is kh x kw x Cin x Cout; output is H' x W' x Cout with
    H' = (H + 2 padding - kh) / stride + 1, which must be integral.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects HxWxC input and khxkwxCinxCout kernel, "
            f"got {x.shape} and {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d output size not integral for input {x.shape}, "
            f"kernel {kernel.shape}, stride {stride}, padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output empty: {ho}x{wo}")

    if padding:
        xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    kflat = kernel.data.reshape(kh * kw * cin, cout)
    out_data = cols.reshape(ho * wo, -1) @ kflat
    out_data = out_data.reshape(ho, wo, cout)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias shape {bias.shape}, want ({cout},)")
        out_data = out_data + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gflat = g.reshape(ho * wo, cout)
        if kernel.requires_grad:
            gk = cols.reshape(ho * wo, -1).T @ gflat
            kernel.accumulate(gk.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            gcols = (gflat @ kflat.T).reshape(ho, wo, kh * kw * cin)
            gxp = np.zeros_like(xp)
            idx = 0
            for ki in range(kh):
                for kj in range(kw):
                    gxp[ki:ki + ho * stride:stride,
                        kj:kj + wo * stride:stride, :] += \
                        gcols[:, :, idx:idx + cin]
                    idx += cin
            if padding:
                gxp = gxp[padding:padding + h, padding:padding + w, :]
            x.accumulate(gxp)

    return Tensor(out_data, _needs(*parents), parents, "conv2d", bw)


def upsample2x(x) -> Tensor:
    """Nearest-neighbor 2x upsampling of an H x W x C map."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2x expects HxWxC, got {x.shape}")
    out_data = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

    def bw(g):
        if x.requires_grad:
            h, w, c = x.shape
            x.accumulate(g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)))

    return Tensor(out_data, x.requires_grad, (x,), "upsample2x", bw)


def avgpool2x2(x) -> Tensor:
    """Mean over non-overlapping 2x2 windows, stride 2."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"avgpool2x2 expects HxWxC, got {x.shape}")
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2 requires even spatial dims, got {h}x{w}")
    out_data = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def bw(g):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
            x.accumulate(gx)

    return Tensor(out_data, x.requires_grad, (x,), "avgpool2x2", bw)


# -- normalization -----------------------------------------------------------

def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x.accumulate(out_data * (g - dot))

    return Tensor(out_data, x.requires_grad, (x,), "softmax", bw)


def masked_softmax(x, mask, axis=-1) -> Tensor:
    """Softmax over positions where ``mask`` is True; exactly 0 elsewhere.

    Every slice along ``axis`` must contain at least one valid position.
    """
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise ShapeError("masked_softmax: a slice has no valid positions")
    neg = np.where(mask, x.data, -np.inf)
    z = neg - neg.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x.accumulate(out_data * (g - dot))

    return Tensor(out_data, x.requires_grad, (x,), "masked_softmax", bw)


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Layer normalization over the last axis, then affine (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape}, want ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data
    lead = tuple(range(x.data.ndim - 1))

    def bw(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=lead))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=lead))
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gy - m1 - xhat * m2))

    return Tensor(out_data, _needs(x, gamma, beta), (x, gamma, beta),
                  "layer_norm", bw)


# -- shape manipulation -------------------------------------------------------

def reshape(x, *shape) -> Tensor:
    x = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.shape))

    return Tensor(out_data, x.requires_grad, (x,), "reshape", bw)


def transpose(x, *axes) -> Tensor:
    x = as_tensor(x)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        if x.requires_grad:
            x.accumulate(g.transpose(inv))

    return Tensor(x.data.transpose(axes), x.requires_grad, (x,),
                  "transpose", bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate(p)

    return Tensor(out_data, _needs(*tensors), tuple(tensors), "concat", bw)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out_data = x.data[idx]

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x.accumulate(gx)

    return Tensor(out_data, x.requires_grad, (x,), "getitem", bw)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis)

    def bw(g):
        if x.requires_grad:
            if axis is None:
                x.accumulate(np.broadcast_to(g, x.shape).copy())
            else:
                x.accumulate(np.broadcast_to(
                    np.expand_dims(g, axis), x.shape).copy())

    return Tensor(out_data, x.requires_grad, (x,), "sum", bw)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    out_data = x.data.mean(axis=axis)

    def bw(g):
        if x.requires_grad:
            if axis is None:
                x.accumulate(np.broadcast_to(g / n, x.shape).copy())
            else:
                x.accumulate(np.broadcast_to(
                    np.expand_dims(g, axis) / n, x.shape).copy())

    return Tensor(out_data, x.requires_grad, (x,), "mean", bw)


# -- losses -------------------------------------------------------------------

def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) vs targets in [0,1].

    Uses the log-sum-exp form max(x,0) - x t + log(1 + exp(-|x|)), which is
    finite for any finite logits.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(
            f"bce shapes differ: logits {logits.shape}, targets {targets.shape}")
    x, t = logits.data, targets
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out_data = per.mean()
    n = x.size

    def bw(g):
        if logits.requires_grad:
            logits.accumulate(g * (_sigmoid(x) - t) / n)

    return Tensor(out_data, logits.requires_grad, (logits,),
                  "bce_with_logits", bw)


def find_nonfinite(root: Tensor):
    """Name of the first tensor (topological order) with non-finite values."""
    for node in topo_sort(root):
        if not np.isfinite(node.data).all():
            return node.op
    return None
