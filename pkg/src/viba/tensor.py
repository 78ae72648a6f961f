"""Dense tensors with tape-based reverse-mode differentiation.

Only the operators needed by the toy classifiers and the bottleneck
objective are provided. Ops record themselves on the active :class:`Tape`
when at least one input requires a gradient; outside a tape everything runs
as plain numpy.
"""

from __future__ import annotations

import contextvars
import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# dot products longer than this accumulate in float64
ACCUM64_THRESHOLD = 4096

_ids = itertools.count()
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("viba_tape", default=None)


class Tensor:
    """An n-d float array with an identity, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class Tape:
    """Ordered record of executed ops; replayed backwards exactly once.

    Usage::

        with Tape() as tape:
            loss = f(x)
        grads = tape.backward(loss)
        grads[x.id]
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: dict[int, Tensor] = {}
        self._token = None
        self._used = False

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True
            self._tracked[t.id] = t

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self._used:
            raise RuntimeError("tape already consumed by backward(); record a new forward pass")
        for t in inputs:
            if t.requires_grad:
                self._tracked.setdefault(t.id, t)
        self._records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if self._used:
            raise RuntimeError("backward() may only be called once per tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._used = True
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(out.id, None)
            if g is None:
                continue
            if out.id in self._tracked:
                grads[out.id] = g
            needs = tuple(t.requires_grad for t in inputs)
            in_grads = fn(g, needs)
            for t, need, gi in zip(inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi
        result = {}
        for tid, t in self._tracked.items():
            g = grads.get(tid)
            result[tid] = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False).reshape(t.shape)
        if loss.requires_grad and loss.id not in result:
            result[loss.id] = np.ones_like(loss.data)
        return result


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def _result_dtype(*arrays: np.ndarray):
    dt = np.result_type(*arrays)
    return dt if dt in (np.float32, np.float64) else np.float32


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name}: non-finite values in forward output")
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape.get()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def _tensordot(a: np.ndarray, b: np.ndarray, axes, terms: int) -> np.ndarray:
    dt = _result_dtype(a, b)
    if terms > ACCUM64_THRESHOLD and dt == np.float32:
        return np.tensordot(a.astype(np.float64), b.astype(np.float64), axes=axes).astype(np.float32)
    return np.tensordot(a, b, axes=axes).astype(dt, copy=False)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) strided view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _scatter_windows(cols: np.ndarray, padded_shape, kh, kw, sh, sw) -> np.ndarray:
    """Adjoint of :func:`_windows`: cols is (N, C, Ho, Wo, kh, kw)."""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    ho, wo = cols.shape[2], cols.shape[3]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[..., i, j]
    return out


def _unpad(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    h, w = a.shape[2], a.shape[3]
    return a[:, :, ph:h - ph, pw:w - pw]


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g, needs: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _emit("sub", a.data - b.data, (a, b), lambda g, needs: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g, needs: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * a.dtype.type(c), (a,), lambda g, needs: (g * a.dtype.type(c),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dt = a.shape, a.dtype
    total = np.sum(a.data, dtype=np.float64).astype(dt)
    return _emit("sum", np.asarray(total), (a,), lambda g, needs: (np.broadcast_to(g, shape).astype(dt),))


def mean(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.data.size
    m = (np.sum(a.data, dtype=np.float64) / n).astype(dt)
    return _emit("mean", np.asarray(m), (a,), lambda g, needs: (np.broadcast_to(g / n, shape).astype(dt),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g, needs: (g * mask,))


def sigmoid_array(a: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function; exact 0/1 at -inf/+inf."""
    a = np.asarray(a)
    out = np.empty_like(a, dtype=_result_dtype(a))
    pos = a >= 0
    with np.errstate(over="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_array(x.data)
    return _emit("sigmoid", s, (x,), lambda g, needs: (g * s * (1 - s),))


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, weight: Tensor, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIKhKw weight, zero padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _windows(xp, kh, kw, sh, sw)
    ho, wo = cols.shape[2], cols.shape[3]
    wd = weight.data
    out = _tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3]), terms=c * kh * kw).transpose(0, 3, 1, 2)

    def bw(g, needs):
        gx = gw = None
        if needs[0]:
            dcols = _tensordot(g, wd, axes=([1], [0]), terms=o)  # N,Ho,Wo,C,kh,kw
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
            gx = _unpad(_scatter_windows(dcols, xp.shape, kh, kw, sh, sw), ph, pw)
        if needs[1]:
            gw = _tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]), terms=n * ho * wo)  # O,C,kh,kw
        return gx, gw

    return _emit("conv2d", np.ascontiguousarray(out), (x, weight), bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride=1, padding=0) -> Tensor:
    """One kh×kw filter per input channel; weight is (C, 1, kh, kw)."""
    n, c, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d: groups must equal input channels; input {x.shape}, weight {weight.shape}")
    _, _, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(f"depthwise_conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _windows(xp, kh, kw, sh, sw)
    ho, wo = cols.shape[2], cols.shape[3]
    wd = weight.data[:, 0]
    dt = _result_dtype(x.data, wd)
    out = np.einsum("nchwij,cij->nchw", cols, wd).astype(dt, copy=False)

    def bw(g, needs):
        gx = gw = None
        if needs[0]:
            dcols = g[..., None, None] * wd[None, :, None, None]
            gx = _unpad(_scatter_windows(dcols, xp.shape, kh, kw, sh, sw), ph, pw)
        if needs[1]:
            if n * ho * wo > ACCUM64_THRESHOLD and dt == np.float32:
                gw = np.einsum("nchw,nchwij->cij", g.astype(np.float64), cols.astype(np.float64)).astype(dt)
            else:
                gw = np.einsum("nchw,nchwij->cij", g, cols).astype(dt, copy=False)
            gw = gw[:, None]
        return gx, gw

    return _emit("depthwise_conv2d", out, (x, weight), bw)


def separable_conv2d(x: Tensor, depthwise_weight: Tensor, pointwise_weight: Tensor,
                     stride=1, padding=1) -> Tensor:
    """Depthwise conv followed by a 1×1 pointwise conv (no bias)."""
    mid = depthwise_conv2d(x, depthwise_weight, stride=stride, padding=padding)
    return conv2d(mid, pointwise_weight, stride=1, padding=0)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, eps: float = 1e-5, training: bool = False,
                 momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` (plain arrays) are updated in place.
    """
    if eps <= 0:
        raise ValueError(f"batch_norm2d: eps must be > 0, got {eps}")
    n, c, h, w = x.shape
    for name, p in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if p.shape != (c,):
            raise ValueError(f"batch_norm2d: {name} shape {p.shape} does not match channels {c}")
    xd = x.data
    dt = _result_dtype(xd, gamma.data)
    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = ((xd - mu[None, :, None, None].astype(dt)) ** 2).mean(axis=(0, 2, 3), dtype=np.float64)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
        mu, var = mu.astype(dt), var.astype(dt)
    else:
        mu, var = running_mean.astype(dt), running_var.astype(dt)
    inv = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data
    out = (xhat * gd[None, :, None, None] + beta.data[None, :, None, None]).astype(dt, copy=False)

    def bw(g, needs):
        gx = gg = gb = None
        if needs[1]:
            gg = np.sum(g * xhat, axis=(0, 2, 3), dtype=np.float64).astype(dt)
        if needs[2]:
            gb = np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(dt)
        if needs[0]:
            gxhat = g * gd[None, :, None, None]
            if training:
                m = n * h * w
                s1 = np.sum(gxhat, axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
                s2 = np.sum(gxhat * xhat, axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
                gx = (inv[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _emit("batch_norm2d", out, (x, gamma, beta), bw)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Windowed maximum with -inf padding; ties route gradient to the first index."""
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ValueError(f"max_pool2d: kernel {kernel} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    cols = _windows(xp, kernel, kernel, stride, stride)
    ho, wo = cols.shape[2], cols.shape[3]
    flat = cols.reshape(n, c, ho, wo, kernel * kernel)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g, needs):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            gp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += np.where(idx == k, g, 0)
        return (_unpad(gp, padding, padding),)

    return _emit("max_pool2d", np.ascontiguousarray(out), (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight shaped (D, K)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: inner dimension mismatch between input {x.shape} and weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    d = wd.shape[0]
    out = _tensordot(xd, wd, axes=([1], [0]), terms=d) + bias.data

    def bw(g, needs):
        gx = _tensordot(g, wd, axes=([1], [1]), terms=wd.shape[1]) if needs[0] else None
        gw = _tensordot(xd, g, axes=([0], [0]), terms=xd.shape[0]) if needs[1] else None
        gb = np.sum(g, axis=0, dtype=np.float64).astype(g.dtype) if needs[2] else None
        return gx, gw, gb

    return _emit("linear", out.astype(_result_dtype(xd, wd), copy=False), (x, weight, bias), bw)


def dropout(x: Tensor, rng: np.random.Generator | None, keep: float = 0.5, training: bool = False) -> Tensor:
    """Inverted dropout; identity when not training."""
    if not training or rng is None:
        return x
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return _emit("dropout", x.data * mask, (x,), lambda g, needs: (g * mask,))


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}")
    dt = logits.dtype
    logp = log_softmax_array(logits.data.astype(np.float64))
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def bw(g, needs):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((d * (float(g) / n)).astype(dt),)

    return _emit("softmax_cross_entropy", np.asarray(loss, dtype=dt), (logits,), bw)


# ---------------------------------------------------------------------------
# numerical verification


def gradient_check(graph_builder: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-3,
                   max_coords: int = 64, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    The analytic gradient is taken at the input's own precision; the central
    differences are evaluated in float64 so the comparison measures the
    backward pass rather than float32 rounding. Relative error is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ValueError(f"step h={h} outside [1e-4, 1e-2]")
    base = np.asarray(x.data if isinstance(x, Tensor) else x)
    x_an = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        tape.watch(x_an)
        loss = graph_builder(x_an)
    analytic = tape.backward(loss)[x_an.id].astype(np.float64)

    base64 = base.astype(np.float64)

    def f(arr: np.ndarray) -> float:
        return float(graph_builder(Tensor(arr)).data)

    f0 = f(base64)
    if f(base64.copy()) != f0:
        raise RuntimeError("gradient_check: graph is non-deterministic at the probe point")

    rng = rng or np.random.default_rng(0)
    size = base.size
    coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
    worst = 0.0
    for flat in coords:
        idx = np.unravel_index(int(flat), base.shape)
        xp, xm = base64.copy(), base64.copy()
        xp[idx] += h
        xm[idx] -= h
        numeric = (f(xp) - f(xm)) / (2 * h)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst

