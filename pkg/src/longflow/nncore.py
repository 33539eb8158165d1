"""Small numpy network toolkit with hand-written backward passes.

Layers follow one pattern: ``forward`` returns ``(out, cache)`` and
``backward(dout, cache)`` returns the input gradient while accumulating
parameter gradients into the shared :class:`ParamStore`. Everything is
float64.
"""

from __future__ import annotations

import io
import json
import math
import struct
from pathlib import Path
from typing import Callable

import numpy as np

CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameters plus gradient accumulators and Adam moments."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def warmup_rate(learning_rate: float, step: int, warmup_steps: int) -> float:
    """Linear ramp: step k (0-based) of W uses learning_rate * (k + 1) / W."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return learning_rate
    return learning_rate * (step + 1) / warmup_steps


def optimizer_step(
    store: ParamStore,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    warmup_steps: int = 0,
) -> float:
    """One Adam update with bias correction. Returns the rate actually used."""
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
    rate = warmup_rate(learning_rate, store.step, warmup_steps)
    k = store.step + 1
    c1 = 1.0 - beta1**k
    c2 = 1.0 - beta2**k
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    store.step = k
    return rate


# ----------------------------------------------------------------------------
# embeddings and pointwise ops


def fourier_embed(values, num_frequencies: int = 8) -> np.ndarray:
    """[sin(2^k x), cos(2^k x)] for k = 0..K-1, appended along a new last axis.

    Output shape is ``values.shape[:-1] + (values.shape[-1] * 2K,)`` for arrays,
    or ``(len(values), 2K)`` for a flat list of scalars.
    """
    if num_frequencies < 1:
        raise ValueError("num_frequencies must be >= 1")
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("fourier_embed got non-finite input")
    if x.ndim == 0:
        x = x[None]
    if x.ndim == 1:
        x = x[:, None]
    freqs = 2.0 ** np.arange(num_frequencies)
    ang = x[..., None] * freqs
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(*x.shape[:-1], x.shape[-1] * 2 * num_frequencies)


def silu(x: np.ndarray):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, s = cache
    return dy * (s + x * s * (1.0 - s))


# ----------------------------------------------------------------------------
# layers


class Dense:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator | None = None, init: str = "xavier", bias: bool = True):
        self.store = store
        self.w = f"{name}.w"
        self.b = f"{name}.b" if bias else None
        if init == "zeros" or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) * math.sqrt(2.0 / (n_in + n_out))
        store.add(self.w, w)
        if bias:
            store.add(self.b, np.zeros(n_out))

    def forward(self, x: np.ndarray):
        y = x @ self.store[self.w]
        if self.b is not None:
            y += self.store[self.b]
        return y, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        if cache is None:
            raise RuntimeError("Dense.backward called without a forward cache")
        x = cache
        n_in = x.shape[-1]
        x2 = x.reshape(-1, n_in)
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.store.grads[self.w] += x2.T @ dy2
        if self.b is not None:
            self.store.grads[self.b] += dy2.sum(axis=0)
        return dy @ self.store[self.w].T


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.store = store
        self.g = f"{name}.g"
        self.b = f"{name}.b"
        self.eps = eps
        store.add(self.g, np.ones(dim))
        store.add(self.b, np.zeros(dim))

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        return xhat * self.store[self.g] + self.store[self.b], (xhat, inv)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        if cache is None:
            raise RuntimeError("LayerNorm.backward called without a forward cache")
        xhat, inv = cache
        d = xhat.shape[-1]
        self.store.grads[self.g] += (dy * xhat).reshape(-1, d).sum(axis=0)
        self.store.grads[self.b] += dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self.store[self.g]
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, key_mask: np.ndarray | None = None):
    """softmax(q k^T / sqrt(d)) v over the second-to-last axis.

    ``q`` is (..., Tq, d), ``k`` is (..., Tk, d), ``v`` is (..., Tk, dv).
    ``key_mask`` (broadcastable to (..., Tk)) excludes keys set to False.
    """
    d = q.shape[-1]
    if d == 0:
        raise ValueError("attention dim must be > 0")
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ValueError("q/k/v shape mismatch")
    scores = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(d)
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, :]
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v, (q, k, v, w)


def attention_backward(dout: np.ndarray, cache):
    if cache is None:
        raise RuntimeError("attention_backward called without a forward cache")
    q, k, v, w = cache
    d = q.shape[-1]
    dv = np.swapaxes(w, -1, -2) @ dout
    dw = dout @ np.swapaxes(v, -1, -2)
    ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) / math.sqrt(d)
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv


class SelfAttention:
    """Single-head self-attention with q/k/v/out projections."""

    def __init__(self, store: ParamStore, name: str, dim: int, rng: np.random.Generator):
        self.q = Dense(store, f"{name}.q", dim, dim, rng)
        # a key bias only shifts each score row by a constant
        self.k = Dense(store, f"{name}.k", dim, dim, rng, bias=False)
        self.v = Dense(store, f"{name}.v", dim, dim, rng)
        self.o = Dense(store, f"{name}.o", dim, dim, rng)

    def forward(self, x: np.ndarray, key_mask=None):
        q, cq = self.q.forward(x)
        k, ck = self.k.forward(x)
        v, cv = self.v.forward(x)
        a, ca = attention_forward(q, k, v, key_mask)
        out, co = self.o.forward(a)
        return out, (cq, ck, cv, ca, co)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        cq, ck, cv, ca, co = cache
        da = self.o.backward(dy, co)
        dq, dk, dv = attention_backward(da, ca)
        return self.q.backward(dq, cq) + self.k.backward(dk, ck) + self.v.backward(dv, cv)


# ----------------------------------------------------------------------------
# gradient checking


def gradient_check(loss_fn: Callable[[], float], backward_fn: Callable[[], None],
                   store: ParamStore, step: float = 1e-5,
                   names=None, max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients.

    ``backward_fn`` must zero and repopulate ``store.grads``. The error per
    parameter is ||a - n|| / max(||a||, ||n||), with 0 when both vanish.
    ``max_entries`` caps how many entries per array are probed.
    """
    backward_fn()
    analytic = {n: g.copy() for n, g in store.grads.items()}
    errors = {}
    for name in names or list(store.params):
        p = store.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        a = analytic[name].reshape(-1)[idx]
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            lp = loss_fn()
            flat[i] = old - step
            lm = loss_fn()
            flat[i] = old
            num[j] = (lp - lm) / (2.0 * step)
        scale = max(np.linalg.norm(a), np.linalg.norm(num))
        errors[name] = 0.0 if scale < 1e-10 else float(np.linalg.norm(a - num) / scale)
    return errors


# ----------------------------------------------------------------------------
# checkpoint file


def _pack_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated checkpoint")
    return raw


def _unpack_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def _pack_array(buf: io.BytesIO, a: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def save_checkpoint(path: str | Path, store: ParamStore, backbone: str, config: dict) -> None:
    """Write parameters, Adam moments and the global step in the LFCK layout."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _pack_str(buf, backbone)
    _pack_str(buf, json.dumps(config, sort_keys=True))
    names = list(store.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        p = store.params[name]
        _pack_str(buf, name)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        _pack_array(buf, p)
    for name in names:
        _pack_array(buf, store.m[name])
        _pack_array(buf, store.v[name])
    buf.write(struct.pack("<Q", store.step))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ParamStore, str, dict]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        backbone = _unpack_str(fh)
        config = json.loads(_unpack_str(fh))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        store = ParamStore()
        shapes = []
        for _ in range(count):
            name = _unpack_str(fh)
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(shape)
            store.add(name, data.astype(np.float64))
            shapes.append((name, shape, size))
        for name, shape, size in shapes:
            store.m[name][...] = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(shape)
            store.v[name][...] = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(shape)
        (store.step,) = struct.unpack("<Q", _read_exact(fh, 8))
    return store, backbone, config
