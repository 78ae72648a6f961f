"""Dense optical flow by Farnebäck polynomial expansion over an image pyramid.

Flow convention: ``next(x + flow(x)) ≈ prev(x)``, so ``warp_image(next, flow)``
reconstructs ``prev``. Coordinates are (x, y) = (column, row).
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .pipeline import LUMA, resize_bilinear


@dataclass(frozen=True)
class PyramidConfig:
    scale: float = 0.5
    levels: int = 3
    window: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if not 0 < self.scale < 1:
            raise ValueError(f"pyramid scale must be in (0, 1), got {self.scale}")
        if self.window % 2 == 0 or self.window < 3:
            raise ValueError(f"window must be odd >= 3, got {self.window}")
        if self.poly_n % 2 == 0 or self.poly_n < 3:
            raise ValueError(f"poly_n must be odd >= 3, got {self.poly_n}")
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")


@dataclass
class PolyCoeffs:
    """Per-pixel fit f(x + d) ≈ dᵀA d + bᵀd + c."""
    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    c: np.ndarray


def _poly_basis(poly_n: int, sigma: float):
    r = poly_n // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-t ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return t, g


def poly_gram(poly_n: int, sigma: float) -> np.ndarray:
    """Weighted Gram matrix of the basis (1, x, y, x², y², xy)."""
    t, g = _poly_basis(poly_n, sigma)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    w = np.outer(g, g)
    basis = np.stack([np.ones_like(xx), xx, yy, xx ** 2, yy ** 2, xx * yy]).reshape(6, -1)
    return (basis * w.reshape(-1)) @ basis.T


def polynomial_expansion(image: np.ndarray, poly_n: int = 5, poly_sigma: float = 1.1) -> PolyCoeffs:
    """Gaussian-weighted least-squares quadratic fit in a poly_n × poly_n window at every pixel.

    Borders use reflected samples, so interior pixels are exact fits of the
    image data. A constant window yields A = 0, b = 0, c = value.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < poly_n:
        raise ValueError(f"image {image.shape} smaller than poly_n={poly_n}")
    t, g = _poly_basis(poly_n, poly_sigma)
    kernels = {0: g, 1: g * t, 2: g * t ** 2}

    def corr(px: int, py: int) -> np.ndarray:
        # Σ w(x)w(y) x^px y^py f(x, y), separable in rows (y, axis 0) and columns (x, axis 1)
        out = ndimage.correlate1d(image, kernels[py], axis=0, mode="reflect")
        return ndimage.correlate1d(out, kernels[px], axis=1, mode="reflect")

    rhs = np.stack([corr(0, 0), corr(1, 0), corr(0, 1), corr(2, 0), corr(0, 2), corr(1, 1)])
    ginv = np.linalg.inv(poly_gram(poly_n, poly_sigma))
    r = np.tensordot(ginv, rhs, axes=([1], [0]))
    return PolyCoeffs(a11=r[3], a12=r[5] / 2, a22=r[4], b1=r[1], b2=r[2], c=r[0])


def _sample(field: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(field, [ys, xs], order=1, mode="nearest")


def _window_sigma(window: int) -> float:
    return 0.3 * ((window - 1) * 0.5 - 1) + 0.8


_BORDER = np.array([0.14, 0.14, 0.4472, 0.4472, 0.4472])


def _border_weight(n: int) -> np.ndarray:
    """Down-weights the outermost pixels, whose expansions see reflected data."""
    w = np.ones(n)
    k = min(len(_BORDER), n // 2)
    w[:k] = _BORDER[:k]
    w[n - k:] = np.minimum(w[n - k:], _BORDER[:k][::-1])
    return w


def _update_flow(p1: PolyCoeffs, p2: PolyCoeffs, flow: np.ndarray, window: int) -> np.ndarray:
    h, w = flow.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = flow[..., 0], flow[..., 1]
    ys, xs = yy + dy, xx + dx
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    # displaced samples falling off the image contribute only the first frame's terms
    a11 = np.where(inside, (p1.a11 + _sample(p2.a11, ys, xs)) / 2, p1.a11)
    a12 = np.where(inside, (p1.a12 + _sample(p2.a12, ys, xs)) / 2, p1.a12)
    a22 = np.where(inside, (p1.a22 + _sample(p2.a22, ys, xs)) / 2, p1.a22)
    b1 = np.where(inside, _sample(p2.b1, ys, xs), 0.0)
    b2 = np.where(inside, _sample(p2.b2, ys, xs), 0.0)
    db1 = -0.5 * (b1 - p1.b1) + a11 * dx + a12 * dy
    db2 = -0.5 * (b2 - p1.b2) + a12 * dx + a22 * dy
    scale = np.outer(_border_weight(h), _border_weight(w))
    a11, a12, a22, db1, db2 = (v * scale for v in (a11, a12, a22, db1, db2))
    # normal equations of A d = Δb, averaged over a Gaussian window
    sig = _window_sigma(window)
    trunc = (window // 2) / sig
    blur = lambda a: ndimage.gaussian_filter(a, sig, truncate=trunc, mode="nearest")  # noqa: E731
    g11 = blur(a11 * a11 + a12 * a12)
    g12 = blur(a11 * a12 + a12 * a22)
    g22 = blur(a12 * a12 + a22 * a22)
    h1 = blur(a11 * db1 + a12 * db2)
    h2 = blur(a12 * db1 + a22 * db2)
    g11 = g11 + 1e-6
    g22 = g22 + 1e-6
    det = g11 * g22 - g12 * g12
    out = np.empty_like(flow)
    out[..., 0] = (g22 * h1 - g12 * h2) / det
    out[..., 1] = (g11 * h2 - g12 * h1) / det
    return out


def _pyramid(img: np.ndarray, config: PyramidConfig) -> list[np.ndarray]:
    levels = [img]
    for k in range(1, config.levels):
        s = config.scale ** k
        h, w = int(round(img.shape[0] * s)), int(round(img.shape[1] * s))
        sigma = (1 / s - 1) * 0.5
        smooth = ndimage.gaussian_filter(img, sigma, mode="nearest")
        levels.append(resize_bilinear(smooth, h, w))
    return levels


def farneback_flow(prev: np.ndarray, next_: np.ndarray, config: PyramidConfig = PyramidConfig()) -> np.ndarray:
    """Dense flow H×W×2 (dx, dy) from grayscale frames in [0, 1]."""
    prev = np.asarray(prev, dtype=np.float64)
    next_ = np.asarray(next_, dtype=np.float64)
    if prev.shape != next_.shape or prev.ndim != 2:
        raise ValueError(f"frame dims differ or not grayscale: {prev.shape} vs {next_.shape}")
    coarsest = min(prev.shape) * config.scale ** (config.levels - 1)
    if coarsest < max(config.poly_n, 8):
        raise ValueError(f"{config.levels} pyramid levels too many for {prev.shape[1]}x{prev.shape[0]} image")
    pyr1, pyr2 = _pyramid(prev, config), _pyramid(next_, config)
    flow = None
    for lvl in range(config.levels - 1, -1, -1):
        i1, i2 = pyr1[lvl], pyr2[lvl]
        if flow is None:
            flow = np.zeros(i1.shape + (2,))
        else:
            flow = resize_bilinear(flow, *i1.shape) / config.scale
        p1 = polynomial_expansion(i1, config.poly_n, config.poly_sigma)
        p2 = polynomial_expansion(i2, config.poly_n, config.poly_sigma)
        for _ in range(config.iterations):
            flow = _update_flow(p1, p2, flow, config.window)
    return flow.astype(np.float32)


def to_gray(frame: np.ndarray) -> np.ndarray:
    """RGB uint8 to luma in [0, 1]."""
    return (np.asarray(frame, dtype=np.float64) @ LUMA) / 255.0


def flow_between(prev_rgb: np.ndarray, next_rgb: np.ndarray, config: PyramidConfig = PyramidConfig()) -> np.ndarray:
    return farneback_flow(to_gray(prev_rgb), to_gray(next_rgb), config)


def flow_to_color(flow: np.ndarray) -> np.ndarray:
    """HSV coding: hue = direction, saturation 1, value = magnitude / frame max magnitude."""
    dx, dy = flow[..., 0].astype(np.float64), flow[..., 1].astype(np.float64)
    mag = np.hypot(dx, dy)
    peak = mag.max()
    val = mag / peak if peak > 0 else np.zeros_like(mag)
    hue = np.mod(np.degrees(np.arctan2(dy, dx)), 360.0)
    # vectorised standard HSV→RGB with s = 1
    h6 = hue / 60.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = np.zeros_like(val)
    q = val * (1 - f)
    t = val * f
    table = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    rgb = np.zeros(flow.shape[:2] + (3,))
    for s, (r, g, b) in enumerate(table):
        m = sector == s
        rgb[m, 0], rgb[m, 1], rgb[m, 2] = r[m], g[m], b[m]
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def hsv_reference(hue_deg: float, value: float) -> tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb((hue_deg % 360) / 360.0, 1.0, value)
    return tuple(int(np.clip(np.rint(c * 255), 0, 255)) for c in (r, g, b))


def warp_image(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward warp ``out(x) = image(x + flow(x))``, bilinear with border clamp."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ys = yy + flow[..., 1]
    xs = xx + flow[..., 0]
    if image.ndim == 2:
        return _sample(image, ys, xs)
    return np.stack([_sample(image[..., c], ys, xs) for c in range(image.shape[2])], axis=-1)


# flow file: "VFLW", u32 width, u32 height, row-major (dx, dy) little-endian float32

FLOW_MAGIC = b"VFLW"


def save_flow(path, flow: np.ndarray) -> None:
    h, w = flow.shape[:2]
    Path(path).write_bytes(FLOW_MAGIC + struct.pack("<II", w, h) + np.ascontiguousarray(flow, dtype="<f4").tobytes())


def load_flow(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a VFLW file")
    w, h = struct.unpack("<II", buf[4:12])
    need = 12 + 8 * w * h
    if len(buf) != need:
        raise ValueError(f"{path}: expected {need} bytes, got {len(buf)}")
    return np.frombuffer(buf[12:], dtype="<f4").reshape(h, w, 2).astype(np.float32)
