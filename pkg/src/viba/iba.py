"""Per-sample information bottleneck attribution.

A feature map R at the injection layer is replaced by
``Z = λ R + (1 - λ) ε`` with ``ε ~ N(μ_R, σ_R²)`` per channel, and
``λ = sigmoid(α)`` is optimised per input to minimise
``CE(f(Z), target) + β · mean(capacity)``. Capacity is the KL divergence
``KL(P(Z|R) || N(μ_R, σ_R²))`` in bits, an upper bound on I(R; Z).
"""

from __future__ import annotations

import hashlib
import logging
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .netpbm import write_pgm
from .pipeline import resize_bilinear
from .tensor import Tape, Tensor, sigmoid_array

log = logging.getLogger(__name__)

LN2 = float(np.log(2.0))
LAMBDA_MAX = 1.0 - 1e-6


@dataclass
class ActivationStats:
    layer_id: str
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,), floored
    count: int


@dataclass
class LambdaField:
    """Unconstrained α with the injection layer's (C, H, W) shape; λ = sigmoid(α)."""
    alpha: np.ndarray

    @property
    def lam(self) -> np.ndarray:
        return sigmoid_array(self.alpha)

    @classmethod
    def constant(cls, shape, alpha: float) -> "LambdaField":
        return cls(np.full(shape, alpha, dtype=np.float32))


@dataclass
class BottleneckConfig:
    layer: str = "block2"
    beta: float = 0.1
    steps: int = 10
    lr: float = 1.0
    noise_samples: int = 10
    seed: int = 0
    sigma_floor: float = 0.1
    alpha_init: float = 5.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.steps < 1 or self.noise_samples < 1:
            raise ValueError("steps and noise_samples must be >= 1")


@dataclass
class CapacityMap:
    bits: np.ndarray  # (H_in, W_in) bits per input pixel
    raw: np.ndarray  # (H_layer, W_layer) bits summed over channels
    frame_id: int = 0
    layer: str = ""

    @property
    def total_bits(self) -> float:
        return float(self.raw.sum(dtype=np.float64))


@dataclass
class Attribution:
    map: CapacityMap
    predicted: int
    probability: float
    injected_proba: np.ndarray = field(default_factory=lambda: np.zeros(2))
    trace: list[float] = field(default_factory=list)
    lam: LambdaField | None = None


# ---------------------------------------------------------------------------
# statistics


def estimate_stats(model: nn.Model, layer_id: str, frames, sigma_floor: float = 0.1, chunk: int = 32) -> ActivationStats:
    """Per-channel mean/std of the layer output over all samples and positions."""
    frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[None]
    n = len(frames)
    if n == 0:
        raise ValueError("estimate_stats: empty calibration set")
    if n < 30:
        warnings.warn(f"only {n} calibration frames for {layer_id}; at least 30 are expected")
    elif n < 100:
        warnings.warn(f"{n} calibration frames for {layer_id}; statistics are noisy below 100")
    s1 = s2 = None
    count = 0
    for i in range(0, n, chunk):
        _, cap = nn.forward_capture(model, frames[i:i + chunk], [layer_id])
        a = cap[layer_id].data.astype(np.float64)
        part1 = a.sum(axis=(0, 2, 3))
        s1 = part1 if s1 is None else s1 + part1
        count += a.shape[0] * a.shape[2] * a.shape[3]
    mean = s1 / count
    for i in range(0, n, chunk):
        _, cap = nn.forward_capture(model, frames[i:i + chunk], [layer_id])
        a = cap[layer_id].data.astype(np.float64)
        part2 = ((a - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))
        s2 = part2 if s2 is None else s2 + part2
    std = np.maximum(np.sqrt(s2 / count), sigma_floor)
    return ActivationStats(layer_id, mean.astype(np.float32), std.astype(np.float32), n)


def draw_noise(stats: ActivationStats, shape, rng: np.random.Generator) -> np.ndarray:
    """ε ~ N(μ_c, σ_c²) per element; ``shape`` is (S, C, H, W)."""
    z = rng.standard_normal(shape).astype(np.float32)
    return z * stats.std[None, :, None, None] + stats.mean[None, :, None, None]


# ---------------------------------------------------------------------------
# differentiable bottleneck pieces


def bottleneck_mix(alpha: Tensor, r: Tensor, eps: np.ndarray) -> Tensor:
    """Z = λ R + (1 - λ) ε with λ = sigmoid(α) broadcast over the noise-sample axis.

    ``alpha`` is (C, H, W), ``r`` is (1, C, H, W), ``eps`` is (S, C, H, W).
    """
    if alpha.shape != r.shape[1:] or eps.shape[1:] != alpha.shape:
        raise ValueError(f"bottleneck shape mismatch: alpha {alpha.shape}, R {r.shape}, noise {eps.shape}")
    dt = np.result_type(alpha.data, r.data)
    lam = sigmoid_array(alpha.data).astype(dt)
    rd = r.data
    z = lam[None] * rd + (1 - lam[None]) * eps

    def bw(g, needs):
        ga = np.sum(g * (rd - eps), axis=0) * lam * (1 - lam) if needs[0] else None
        gr = np.sum(g, axis=0, keepdims=True) * lam[None] if needs[1] else None
        return ga, gr

    return T._emit("bottleneck_mix", z.astype(dt, copy=False), (alpha, r), bw)


def capacity_from_alpha(alpha: Tensor, r: np.ndarray, stats: ActivationStats) -> Tensor:
    """Per-element capacity in bits as a differentiable function of α.

    With s = 1 - λ = sigmoid(-α) and z = (R - μ)/σ the KL in nats is
    ``softplus(α) + (s² + λ² z² - 1) / 2``.
    """
    a = alpha.data.astype(np.float64)
    lam = sigmoid_array(a)
    s = sigmoid_array(-a)
    z = (np.asarray(r, dtype=np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    softplus = np.logaddexp(0.0, a)
    nats = softplus + (s * s + lam * lam * z * z - 1.0) / 2
    bits = np.maximum(nats, 0.0) / LN2
    dbits = (lam * (1 - s * s) + lam * lam * s * z * z) / LN2

    def bw(g, needs):
        return ((g * dbits).astype(alpha.dtype),)

    return T._emit("capacity", bits.astype(alpha.dtype), (alpha,), bw)


def capacity(lam, r, stats: ActivationStats) -> np.ndarray:
    """Per-element capacity in bits for given λ values (clamped to ≤ 1 - 1e-6)."""
    lam = lam.lam if isinstance(lam, LambdaField) else np.asarray(lam, dtype=np.float64)
    lam = np.minimum(np.asarray(lam, dtype=np.float64), LAMBDA_MAX)
    r = np.asarray(r.data if isinstance(r, Tensor) else r, dtype=np.float64)
    if r.ndim == 4:
        r = r[0]
    mu = stats.mean.astype(np.float64)[:, None, None]
    sd = stats.std.astype(np.float64)[:, None, None]
    z2 = ((r - mu) / sd) ** 2
    one_m = 1.0 - lam
    nats = -np.log1p(-lam) + (one_m * one_m + lam * lam * z2 - 1.0) / 2
    return np.maximum(nats, 0.0) / LN2


def sample_bottleneck(r, lam: LambdaField, stats: ActivationStats, rng: np.random.Generator) -> Tensor:
    """One draw of Z for a single activation R of shape (1, C, H, W) or (C, H, W)."""
    r = r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=np.float32))
    if r.data.ndim == 3:
        r = Tensor(r.data[None])
    if r.shape[1:] != lam.alpha.shape:
        raise ValueError(f"sample_bottleneck: R {r.shape} vs lambda {lam.alpha.shape}")
    eps = draw_noise(stats, r.shape, rng)
    return bottleneck_mix(Tensor(lam.alpha), r, eps)


def objective(model: nn.Model, alpha: Tensor, r: Tensor, eps: np.ndarray, target: int,
              stats: ActivationStats, layer: str, beta: float) -> Tensor:
    """Mean-over-noise cross-entropy plus β × mean per-element capacity (bits)."""
    z = bottleneck_mix(alpha, r, eps)
    logits = nn.forward_from(model, z, layer)
    ce = T.softmax_cross_entropy(logits, np.full(eps.shape[0], target))
    cap = T.mean(capacity_from_alpha(alpha, r.data[0], stats))
    return T.add(ce, T.scale(cap, beta))


def capture(model: nn.Model, x, layer: str) -> tuple[np.ndarray, Tensor]:
    logits, acts = nn.forward_capture(model, x, [layer])
    return logits.data, acts[layer]


def optimize_lambda(model: nn.Model, x, target: int, stats: ActivationStats, config: BottleneckConfig,
                    rng: np.random.Generator | None = None, r: Tensor | None = None) -> tuple[LambdaField, list[float]]:
    """Adam on α with θ frozen; returns the field and the objective per step.

    The trace has ``steps + 1`` entries: the objective before each update and
    one final evaluation after the last update.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if r is None:
        _, r = capture(model, x, config.layer)
    r = Tensor(r.data)
    if stats.mean.shape[0] != r.shape[1]:
        raise ValueError(f"stats for {stats.layer_id} have {stats.mean.shape[0]} channels, layer has {r.shape[1]}")
    alpha = Tensor(np.full(r.shape[1:], config.alpha_init, dtype=np.float32), requires_grad=True)
    opt = nn.Adam([alpha], lr=config.lr)
    trace: list[float] = []
    shape = (config.noise_samples,) + r.shape[1:]
    for step in range(config.steps + 1):
        eps = draw_noise(stats, shape, rng)
        try:
            with Tape() as tape:
                loss = objective(model, alpha, r, eps, target, stats, config.layer, config.beta)
        except FloatingPointError as e:
            raise FloatingPointError(f"non-finite objective at step {step}: λ in "
                                     f"[{sigmoid_array(alpha.data).min():.3g}, {sigmoid_array(alpha.data).max():.3g}]"
                                     ) from e
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite objective at step {step}")
        trace.append(value)
        if step == config.steps:
            break
        grad = tape.backward(loss)[alpha.id]
        opt.step([grad])
    return LambdaField(alpha.data.copy()), trace


def attribution_map(lam: LambdaField, r, stats: ActivationStats, input_dims: tuple[int, int],
                    frame_id: int = 0, layer: str = "") -> CapacityMap:
    """Channel-summed capacity, bilinearly upsampled to ``input_dims`` = (H, W).

    The upsampled map is rescaled so it sums to the same total bits as the raw map.
    """
    raw = capacity(lam, r, stats).sum(axis=0)
    up = resize_bilinear(raw, *input_dims)
    total, s = raw.sum(), up.sum()
    if s > 0:
        up = up * (total / s)
    return CapacityMap(up.astype(np.float32), raw.astype(np.float32), frame_id, layer)


def bottleneck_proba(model: nn.Model, r: Tensor, lam: LambdaField, stats: ActivationStats, layer: str,
                     rng: np.random.Generator, samples: int = 10) -> np.ndarray:
    """Class probabilities with the bottleneck injected, averaged over noise draws."""
    eps = draw_noise(stats, (samples,) + r.shape[1:], rng)
    z = bottleneck_mix(Tensor(lam.alpha), Tensor(r.data), eps)
    return nn.softmax(nn.forward_from(model, z, layer).data).mean(axis=0)


def frame_key(x) -> int:
    """64-bit content digest of an input frame; identical frames share a key."""
    x = np.ascontiguousarray(np.asarray(x, dtype="<f4"))
    h = hashlib.blake2b(repr(x.shape).encode() + x.tobytes(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def frame_rng(seed: int, x) -> np.random.Generator:
    """Noise stream for one frame, keyed by (seed, frame content)."""
    return np.random.default_rng([int(seed), frame_key(x)])


def attribute_frame(model: nn.Model, frame, config: BottleneckConfig, stats: ActivationStats,
                    frame_id: int = 0) -> Attribution:
    """Explain the model's own prediction for one 3×H×W input.

    ``frame_id`` only labels the result; the noise stream depends on the seed
    and the frame itself, so repeated frames get identical maps.
    """
    x = frame.data if isinstance(frame, Tensor) else np.asarray(frame, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    logits, r = capture(model, x, config.layer)
    proba = nn.softmax(logits)[0]
    target = int(np.argmax(proba))
    rng = frame_rng(config.seed, x)
    lam, trace = optimize_lambda(model, x, target, stats, config, rng=rng, r=r)
    cmap = attribution_map(lam, r, stats, x.shape[2:], frame_id, config.layer)
    injected = bottleneck_proba(model, r, lam, stats, config.layer, rng, config.noise_samples)
    return Attribution(cmap, target, float(proba[target]), injected, trace, lam)


def _attribute_job(args):
    model, frame, config, stats, fid = args
    return attribute_frame(model, frame, config, stats, fid)


def attribute_sequence(model: nn.Model, frames: Sequence, config: BottleneckConfig, stats: ActivationStats,
                       frame_ids: Sequence[int] | None = None, workers: int = 1) -> list[Attribution]:
    """attribute_frame over a sequence in order; each frame draws noise from its own (seed, frame) stream."""
    frames = list(frames)
    if not frames:
        raise ValueError("attribute_sequence: empty input")
    ids = list(frame_ids) if frame_ids is not None else list(range(len(frames)))
    jobs = [(model, f, config, stats, fid) for f, fid in zip(frames, ids)]
    return parallel_map(_attribute_job, jobs, workers)


def parallel_map(fn, jobs: list, workers: int = 1) -> list:
    """Ordered map; ``workers > 1`` uses a process pool. Results never depend on ``workers``."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def layer_sweep(model: nn.Model, frame, layer_ids: Sequence[str], config: BottleneckConfig,
                stats_per_layer: dict[str, ActivationStats], frame_id: int = 0) -> dict[str, Attribution]:
    out = {}
    for lid in layer_ids:
        model.spec.layer_index(lid)
        if lid not in stats_per_layer:
            raise KeyError(f"no activation statistics for layer {lid!r}")
        out[lid] = attribute_frame(model, frame, replace(config, layer=lid), stats_per_layer[lid], frame_id)
    return out


# ---------------------------------------------------------------------------
# visualisation and files


def colormap_blue_red(t: np.ndarray) -> np.ndarray:
    """t in [0, 1] to RGB uint8 along blue → red."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0, 1)
    rgb = np.stack([t, np.zeros_like(t), 1 - t], axis=-1)
    return np.rint(rgb * 255).astype(np.uint8)


def overlay_heatmap(frame: np.ndarray, cmap, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a min-max normalised heatmap onto an RGB uint8 frame."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    m = cmap.bits if isinstance(cmap, CapacityMap) else np.asarray(cmap, dtype=np.float64)
    h, w = frame.shape[:2]
    if m.shape != (h, w):
        m = resize_bilinear(m, h, w)
    lo, hi = float(m.min()), float(m.max())
    t = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m, dtype=np.float64)
    colors = colormap_blue_red(t).astype(np.float64)
    out = (1 - alpha) * frame.astype(np.float64) + alpha * colors
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# capacity file: "VCAP", u32 width, u32 height, f64 total bits, row-major float32 bits per pixel

CAP_MAGIC = b"VCAP"


def save_capacity(path, cmap: CapacityMap) -> None:
    h, w = cmap.bits.shape
    Path(path).write_bytes(CAP_MAGIC + struct.pack("<IId", w, h, cmap.total_bits)
                           + np.ascontiguousarray(cmap.bits, dtype="<f4").tobytes())


def load_capacity(path) -> tuple[np.ndarray, float]:
    buf = Path(path).read_bytes()
    if buf[:4] != CAP_MAGIC:
        raise ValueError(f"{path}: not a VCAP file")
    w, h, total = struct.unpack("<IId", buf[4:20])
    if len(buf) != 20 + 4 * w * h:
        raise ValueError(f"{path}: size does not match {w}x{h} header")
    return np.frombuffer(buf[20:], dtype="<f4").reshape(h, w).astype(np.float32), total


def export_pgm(path, bits: np.ndarray) -> None:
    """Min-max normalised 8-bit export with the range recorded in ``<path>.meta``."""
    lo, hi = float(bits.min()), float(bits.max())
    t = (bits - lo) / (hi - lo) if hi > lo else np.zeros_like(bits)
    write_pgm(path, np.rint(t * 255).astype(np.uint8))
    Path(str(path) + ".meta").write_text(f"min = {lo:.9g}\nmax = {hi:.9g}\n")


def save_stats(path, stats: ActivationStats) -> None:
    """CSV with one row per channel; float32 values round-trip exactly."""
    lines = ["layer,count,channel,mean,std"]
    for c, (m, s) in enumerate(zip(stats.mean, stats.std)):
        lines.append(f"{stats.layer_id},{stats.count},{c},{float(m)!r},{float(s)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_stats(path) -> ActivationStats:
    rows = [r.split(",") for r in Path(path).read_text().splitlines()[1:] if r.strip()]
    if not rows:
        raise ValueError(f"{path}: no channel rows")
    if len({r[0] for r in rows}) != 1 or [int(r[2]) for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: expected one layer with channels 0..{len(rows) - 1}")
    mean = np.array([float(r[3]) for r in rows], dtype=np.float32)
    std = np.array([float(r[4]) for r in rows], dtype=np.float32)
    return ActivationStats(rows[0][0], mean, std, int(rows[0][1]))
