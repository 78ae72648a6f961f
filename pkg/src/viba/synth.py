"""Procedural "faces" with known manipulated regions.

Spatial fakes carry a high-frequency textured patch; temporal fakes carry a
region whose motion jitters against the global drift of the sequence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .netpbm import write_pgm, write_ppm
from .pipeline import RoiBox, frame_name, write_roi_csv

REAL, FAKE = 0, 1
LABEL_NAMES = {REAL: "real", FAKE: "fake"}
REGION_CODES = ("L", "E", "B", "N", "O", "C")  # pixel values 1..6 in taxonomy maps
CODE_VALUE = {c: i + 1 for i, c in enumerate(REGION_CODES)}


@dataclass
class SynthConfig:
    n_samples: int = 200
    image_size: int = 64
    seq_len: int = 4
    patch_min: int = 14
    patch_max: int = 20
    texture_freq: float = 0.4
    motion: float = 3.0
    drift_max: int = 2
    fake_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.patch_min <= self.patch_max <= self.image_size:
            raise ValueError("patch size range must fit inside the frame")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if not 0 <= self.fake_fraction <= 1:
            raise ValueError("fake_fraction must be in [0, 1]")


@dataclass
class LabeledSample:
    sample_id: str
    frames: list[np.ndarray]  # H×W×3 uint8
    label: int
    mask: np.ndarray  # H×W bool, empty for real samples
    region_code: str = ""  # taxonomy code of the manipulated region, "" for real


def region_template(size: int) -> np.ndarray:
    """Six-zone face layout (values 1..6 = L, E, B, N, O, C) matching the face renderer."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx, cy, ax, ay = 0.5 * size, 0.53 * size, 0.34 * size, 0.42 * size
    u, v = (xx - cx) / ax, (yy - cy) / ay
    rho = np.hypot(u, v)
    out = np.full((size, size), CODE_VALUE["N"], np.uint8)
    out[v < -0.2] = CODE_VALUE["B"]
    out[(v > 0.3) & (v <= 0.62) & (np.abs(u) < 0.5)] = CODE_VALUE["L"]
    out[v > 0.62] = CODE_VALUE["C"]
    out[(rho >= 0.85) & (rho < 1.0)] = CODE_VALUE["E"]
    out[rho >= 1.0] = CODE_VALUE["O"]
    # neck below the face ellipse
    out[(rho >= 1.0) & (yy > cy + 0.8 * ay) & (np.abs(u) < 0.45)] = CODE_VALUE["C"]
    return out


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def render_face(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth face-like RGB image in [0, 1] (float)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    s = size
    bg = rng.uniform(0.1, 0.35, 3)
    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.8, 1.05)
    img = np.broadcast_to(bg, (s, s, 3)).copy()
    jx, jy = rng.uniform(-0.02, 0.02, 2) * s
    cx, cy = 0.5 * s + jx, 0.53 * s + jy
    neck = (np.abs(xx - cx) < 0.15 * s) & (yy > cy)
    img[neck] = skin * 0.9
    img[_ellipse(yy, xx, cy, cx, 0.42 * s, 0.34 * s)] = skin
    eye_y = cy - 0.12 * s
    for side in (-1, 1):
        ex = cx + side * 0.14 * s
        img[_ellipse(yy, xx, eye_y - 0.08 * s, ex, 0.02 * s, 0.08 * s)] = skin * 0.45  # brow
        img[_ellipse(yy, xx, eye_y, ex, 0.035 * s, 0.07 * s)] = (0.95, 0.95, 0.95)
        img[_ellipse(yy, xx, eye_y, ex, 0.03 * s, 0.03 * s)] = (0.15, 0.1, 0.05)
    img[_ellipse(yy, xx, cy + 0.06 * s, cx, 0.08 * s, 0.035 * s)] = skin * 0.8  # nose
    img[_ellipse(yy, xx, cy + 0.24 * s, cx, 0.035 * s, 0.12 * s)] = (0.7, 0.2, 0.2)  # mouth
    img = ndimage.gaussian_filter(img, (1.0, 1.0, 0))
    low = ndimage.gaussian_filter(rng.standard_normal((s, s)), 0.12 * s, mode="wrap")
    low = low / (np.abs(low).max() + 1e-12)
    img += 0.06 * low[..., None]
    return np.clip(img, 0, 1)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _labels(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n_fake = int(round(n * fraction))
    labels = np.array([FAKE] * n_fake + [REAL] * (n - n_fake))
    rng.shuffle(labels)
    return labels


def _patch_box(cfg: SynthConfig, rng: np.random.Generator) -> tuple[int, int, int]:
    size = int(rng.integers(cfg.patch_min, cfg.patch_max + 1))
    top = int(rng.integers(0, cfg.image_size - size + 1))
    left = int(rng.integers(0, cfg.image_size - size + 1))
    return top, left, size


def _region_of(box, template) -> str:
    top, left, size = box
    return REGION_CODES[int(template[top + size // 2, left + size // 2]) - 1]


def _box_mask(shape, box) -> np.ndarray:
    top, left, size = box
    m = np.zeros(shape, bool)
    m[top:top + size, left:left + size] = True
    return m


def gen_spatial_dataset(config: SynthConfig, prefix: str = "s") -> list[LabeledSample]:
    """Single-frame samples; fakes carry a high-frequency textured square patch."""
    root = np.random.default_rng(config.seed)
    labels = _labels(config.n_samples, config.fake_fraction, root)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_samples)
    template = region_template(config.image_size)
    out = []
    for i, (lab, ss) in enumerate(zip(labels, seeds)):
        rng = np.random.default_rng(ss)
        img = render_face(config.image_size, rng)
        mask = np.zeros(img.shape[:2], bool)
        code = ""
        if lab == FAKE:
            box = _patch_box(config, rng)
            mask = _box_mask(img.shape[:2], box)
            top, left, size = box
            noise = rng.uniform(-0.3, 0.3, (size, size, 1)) + rng.uniform(-0.05, 0.05, (size, size, 3))
            img[top:top + size, left:left + size] += noise
            img = np.clip(img, 0, 1)
            code = _region_of(box, template)
        out.append(LabeledSample(f"{prefix}{i:04d}", [_to_u8(img)], int(lab), mask, code))
    return out


def _texture(shape, freq: float, rng: np.random.Generator) -> np.ndarray:
    t = ndimage.gaussian_filter(rng.standard_normal(shape), 1.0 / freq, mode="wrap")
    return t / (np.abs(t).max() + 1e-12)


def _jitter_step(motion: float, drift: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Integer step of length in [motion/2, motion] that roughly cancels the drift.

    The region then lags behind the global motion, like a pasted layer that
    fails to follow the head.
    """
    r = int(np.ceil(motion))
    cands = np.array([(dx, dy) for dx in range(-r, r + 1) for dy in range(-r, r + 1)
                      if motion / 2 <= np.hypot(dx, dy) <= motion])
    residual = np.hypot(*(cands + drift).T)
    cands = cands[residual <= max(1.0, residual.min())]
    return cands[int(rng.integers(len(cands)))]


def gen_temporal_dataset(config: SynthConfig, prefix: str = "t") -> list[LabeledSample]:
    """Sequences drifting by an integer offset per frame; fakes add a jittering region."""
    if config.seq_len < 2:
        raise ValueError("temporal samples need seq_len >= 2")
    root = np.random.default_rng(config.seed)
    labels = _labels(config.n_samples, config.fake_fraction, root)
    seeds = np.random.SeedSequence([config.seed, 1]).spawn(config.n_samples)
    template = region_template(config.image_size)
    s = config.image_size
    margin = int(np.ceil(config.seq_len * (config.drift_max + config.motion))) + 2
    big = s + 2 * margin
    out = []
    for i, (lab, ss) in enumerate(zip(labels, seeds)):
        rng = np.random.default_rng(ss)
        canvas = render_face(big, rng)
        canvas = np.clip(canvas + 0.25 * _texture((big, big), config.texture_freq, rng)[..., None], 0, 1)
        drift = np.zeros(2, int)
        while not drift.any():
            drift = rng.integers(-config.drift_max, config.drift_max + 1, 2)
        start = np.array([margin, margin]) - drift * (config.seq_len - 1) // 2
        box = _patch_box(config, rng) if lab == FAKE else None
        offsets = np.zeros((config.seq_len, 2), int)
        if box is not None:
            for t in range(1, config.seq_len):
                offsets[t] = offsets[t - 1] + _jitter_step(config.motion, drift, rng)
        frames = []
        for t in range(config.seq_len):
            x0, y0 = start + drift * t
            f = canvas[y0:y0 + s, x0:x0 + s].copy()
            if box is not None:
                top, left, size = box
                ox, oy = offsets[t]
                f[top:top + size, left:left + size] = canvas[y0 + top + oy:y0 + top + oy + size,
                                                             x0 + left + ox:x0 + left + ox + size]
            frames.append(_to_u8(f))
        mask = _box_mask((s, s), box) if box is not None else np.zeros((s, s), bool)
        code = _region_of(box, template) if box is not None else ""
        out.append(LabeledSample(f"{prefix}{i:04d}", frames, int(lab), mask, code))
    return out


def ground_truth_mask(sample: LabeledSample) -> np.ndarray:
    if sample.label != FAKE:
        raise ValueError(f"{sample.sample_id} is real; it has no manipulated region")
    return sample.mask.copy()


def make_annotations(samples: list[LabeledSample], n_annotators: int = 8, seed: int = 0) -> list[tuple[str, str, str]]:
    """Simulated (video_id, annotator_id, region_code) votes: a majority names the true region."""
    rng = np.random.default_rng(seed)
    rows = []
    for smp in samples:
        if smp.label != FAKE:
            continue
        n_true = n_annotators // 2 + 1
        for a in range(n_annotators):
            code = smp.region_code if a < n_true else REGION_CODES[int(rng.integers(len(REGION_CODES)))]
            rows.append((smp.sample_id, f"a{a}", code))
    return rows


def write_dataset(samples: list[LabeledSample], root, annotations=None) -> None:
    """Frame directories, masks and the labels/roi/region sidecars consumed by the pipeline."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for smp in samples:
        d = root / smp.sample_id
        d.mkdir(exist_ok=True)
        for t, f in enumerate(smp.frames):
            write_ppm(d / frame_name(t), f)
        h, w = smp.frames[0].shape[:2]
        write_pgm(d / "mask.pgm", smp.mask.astype(np.uint8) * 255)
        write_pgm(d / "regions.pgm", region_template(h))
        write_roi_csv(d / "roi.csv", [RoiBox(t, 0, 0, w, h) for t in range(len(smp.frames))])
    with open(root / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["sample_id", "label", "region_code"])
        for smp in samples:
            wr.writerow([smp.sample_id, LABEL_NAMES[smp.label], smp.region_code])
    if annotations is not None:
        with open(root / "annotations.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["video_id", "annotator_id", "region_code"])
            wr.writerows(annotations)
