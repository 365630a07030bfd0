"""Shared building blocks: parameter store, linear maps, attention, MLP,
and sine positional encodings."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


class ParamStore:
    """Registry of named learnable tensors with deterministic init order.

    Weight matrices use uniform Xavier init (fan based); biases start at
    zero, layer-norm gains at one.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype).type
        self.params: dict[str, Tensor] = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name: {name}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, op=f"param:{name}")
        self.params[name] = t
        return t

    def xavier(self, name: str, shape, fan_in=None, fan_out=None) -> Tensor:
        if fan_in is None or fan_out is None:
            if len(shape) == 2:
                fan_in, fan_out = shape
            elif len(shape) == 4:   # kh x kw x cin x cout conv kernel
                rf = shape[0] * shape[1]
                fan_in, fan_out = rf * shape[2], rf * shape[3]
            else:
                raise ConfigError(f"cannot infer fans for shape {shape}")
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self._register(name, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._register(name, np.ones(shape))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(
                f"parameter set mismatch (missing {sorted(missing)}, "
                f"unexpected {sorted(extra)})")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(
                    f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = v.astype(self.dtype)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class Linear:
    """y = x W + b over the last axis; works on 2D matrices and spatial maps."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 zero_init=False, bias=True):
        if zero_init:
            self.w = store.zeros(f"{name}.w", (d_in, d_out))
        else:
            self.w = store.xavier(f"{name}.w", (d_in, d_out))
        self.b = store.zeros(f"{name}.b", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        shape = x.shape
        if len(shape) != 2:
            x = ad.reshape(x, (-1, shape[-1]))
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = ad.add(y, self.b)
        if len(shape) != 2:
            y = ad.reshape(y, shape[:-1] + (self.w.shape[1],))
        return y


class Conv2d:
    def __init__(self, store: ParamStore, name: str, k: int, c_in: int,
                 c_out: int, stride=1, padding=0):
        self.kernel = store.xavier(f"{name}.k", (k, k, c_in, c_out))
        self.bias = store.zeros(f"{name}.b", (c_out,))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps=1e-5):
        self.gamma = store.ones(f"{name}.g", (dim,))
        self.beta = store.zeros(f"{name}.b", (dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention:
    """Multi-head scaled dot-product attention over 2D (tokens x dim) inputs.

    ``key_mask`` (bool, one entry per key) excludes padded keys from every
    attention row.  ``zero_init_out`` zeroes the output projection so the
    block starts as the identity inside residual branches.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 zero_init_out=False):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dh = dim // heads
        self.wq = Linear(store, f"{name}.q", dim, dim)
        self.wk = Linear(store, f"{name}.k", dim, dim)
        self.wv = Linear(store, f"{name}.v", dim, dim)
        self.wo = Linear(store, f"{name}.o", dim, dim, zero_init=zero_init_out)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                 key_mask=None, causal=False, return_attn=False,
                 q_pos=None, k_pos=None):
        # positional encodings enter queries/keys only, never values
        if q_pos is not None:
            q_in = ad.add(q_in, q_pos)
        if k_pos is not None:
            k_in = ad.add(k_in, k_pos)
        q, k, v = self.wq(q_in), self.wk(k_in), self.wv(v_in)
        nq, nk = q.shape[0], k.shape[0]
        scale = 1.0 / math.sqrt(self.dh)
        mask = None
        if key_mask is not None or causal:
            mask = np.ones((nq, nk), dtype=bool)
            if key_mask is not None:
                mask &= np.asarray(key_mask, dtype=bool)[None, :]
            if causal:
                mask &= np.tril(np.ones((nq, nk), dtype=bool))
        outs, attns = [], []
        for h in range(self.heads):
            sl = slice(h * self.dh, (h + 1) * self.dh)
            qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            if mask is None:
                attn = ad.softmax(scores, axis=-1)
            else:
                attn = ad.masked_softmax(scores, mask, axis=-1)
            attns.append(attn)
            outs.append(ad.matmul(attn, vh))
        out = self.wo(ad.concat(outs, axis=-1))
        if return_attn:
            return out, attns
        return out


class MLP:
    """Two-layer feed-forward block with ReLU."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int,
                 zero_init_out=False):
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim,
                          zero_init=zero_init_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


def sine_encoding_1d(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Standard sin/cos positional encoding, (length x dim)."""
    if dim % 2:
        raise ConfigError(f"1D sine encoding needs even dim, got {dim}")
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2 * i / dim)
    enc = np.empty((length, dim))
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle)
    return enc.astype(dtype)


def sine_encoding_2d(h: int, w: int, dim: int, dtype=np.float32) -> np.ndarray:
    """2D sine encoding for a flattened h*w grid: half the channels encode
    the row index, half the column index.  Returns (h*w x dim)."""
    if dim % 4:
        raise ConfigError(f"2D sine encoding needs dim divisible by 4, got {dim}")
    row = sine_encoding_1d(h, dim // 2, np.float64)
    col = sine_encoding_1d(w, dim // 2, np.float64)
    enc = np.concatenate([
        np.repeat(row, w, axis=0),
        np.tile(col, (h, 1)),
    ], axis=1)
    return enc.astype(dtype)


def coordinate_grid(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """(h x w x 2) map of (x, y) coordinates, each linear in [-1, 1]."""
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx, gy], axis=-1).astype(dtype)
