"""Frame ingestion, keyframes, ROI crop/resize and model-input normalization."""

from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netpbm import NetpbmError, read_ppm
from .tensor import Tensor

FRAME_RE = re.compile(r"^frame_(\d+)\.ppm$")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class FrameSequence:
    frames: list[np.ndarray]  # H×W×3 uint8
    ids: list[int]
    source: str = ""

    def __len__(self) -> int:
        return len(self.frames)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.ids, self.ids[1:])):
            raise ValueError("frame ids must be strictly increasing")
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"non-uniform frame dims {sorted(shapes)}")


@dataclass(frozen=True)
class RoiBox:
    frame_id: int
    left: int
    top: int
    width: int
    height: int

    def validate(self, frame_shape) -> None:
        h, w = frame_shape[:2]
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"roi {self} has non-positive size")
        if self.left < 0 or self.top < 0 or self.left + self.width > w or self.top + self.height > h:
            raise ValueError(f"roi {self} outside frame of {w}x{h}")


def frame_name(i: int) -> str:
    return f"frame_{i:04d}.ppm"


def load_frame_sequence(directory) -> FrameSequence:
    directory = Path(directory)
    found = []
    for p in directory.iterdir() if directory.is_dir() else []:
        m = FRAME_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        raise FileNotFoundError(f"no frames (frame_<n>.ppm) in {directory}")
    found.sort()
    frames, ids = [], []
    for i, p in found:
        try:
            img = read_ppm(p)
        except NetpbmError as e:
            raise ValueError(f"cannot parse frame {p.name}: {e}") from None
        if frames and img.shape != frames[0].shape:
            raise ValueError(f"frame {p.name} has dims {img.shape[1]}x{img.shape[0]}, expected uniform "
                             f"{frames[0].shape[1]}x{frames[0].shape[0]}")
        frames.append(img)
        ids.append(i)
    return FrameSequence(frames, ids, str(directory))


def luma(frame: np.ndarray) -> np.ndarray:
    """Luma in [0, 1] from an 8-bit RGB frame."""
    return (np.asarray(frame, dtype=np.float64) @ LUMA) / 255.0


def extract_keyframes(seq: FrameSequence, diff_threshold: float = 0.05, min_gap: int = 1) -> list[int]:
    """Greedy keyframe selection by mean absolute luma difference to the last keyframe.

    Returns frame ids; the first frame is always kept.
    """
    if diff_threshold < 0 or min_gap < 0:
        raise ValueError("thresholds must be >= 0")
    if len(seq) == 0:
        raise ValueError("empty sequence")
    keep = [0]
    last = luma(seq.frames[0])
    for i in range(1, len(seq)):
        if i - keep[-1] < min_gap:
            continue
        cur = luma(seq.frames[i])
        if np.abs(cur - last).mean() > diff_threshold:
            keep.append(i)
            last = cur
    return [seq.ids[i] for i in keep]


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping; float64 output.

    Works on H×W or H×W×C arrays. Same-size resizes return the input values exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    if img.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_resize(frame: np.ndarray, roi: RoiBox, target: tuple[int, int]) -> np.ndarray:
    """Crop ``roi`` and bilinearly resize to ``target`` = (w, h); uint8 in, uint8 out."""
    roi.validate(frame.shape)
    tw, th = target
    if tw <= 0 or th <= 0:
        raise ValueError(f"target {target} must be positive")
    crop = frame[roi.top:roi.top + roi.height, roi.left:roi.left + roi.width]
    if crop.shape[:2] == (th, tw):
        return crop.copy()
    return np.clip(np.rint(resize_bilinear(crop, th, tw)), 0, 255).astype(np.uint8)


def centered_roi(frame_shape, frame_id: int = 0) -> RoiBox:
    h, w = frame_shape[:2]
    s = min(h, w)
    return RoiBox(frame_id, (w - s) // 2, (h - s) // 2, s, s)


def read_roi_csv(path) -> dict[int, RoiBox]:
    rois = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = RoiBox(int(row["frame_id"]), int(row["left"]), int(row["top"]), int(row["width"]),
                         int(row["height"]))
            rois[box.frame_id] = box
    return rois


def write_roi_csv(path, rois) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "left", "top", "width", "height"])
        for r in rois:
            w.writerow([r.frame_id, r.left, r.top, r.width, r.height])


def rois_for(seq: FrameSequence, directory=None) -> dict[int, RoiBox]:
    """ROIs from ``roi.csv`` next to the frames, else a centred square per frame."""
    path = Path(directory or seq.source) / "roi.csv"
    table = read_roi_csv(path) if path.exists() else {}
    shape = seq.frames[0].shape
    return {fid: table.get(fid, centered_roi(shape, fid)) for fid in seq.ids}


def make_flow_pairs(seq: FrameSequence, keyframes: list[int]) -> list[tuple[int, int]]:
    """(keyframe, successor) index pairs; a keyframe without successor is dropped with a warning."""
    pos = {fid: i for i, fid in enumerate(seq.ids)}
    pairs = []
    for k in keyframes:
        i = pos[k]
        if i + 1 >= len(seq):
            warnings.warn(f"keyframe {k} is the last frame; no successor for a flow pair")
            continue
        pairs.append((i, i + 1))
    return pairs


def normalize_for_model(image: np.ndarray) -> Tensor:
    """8-bit H×W×3 image to a 3×H×W tensor in [-1, 1] (mean 0.5, std 0.5 per channel)."""
    x = np.asarray(image, dtype=np.float32).transpose(2, 0, 1) / np.float32(255.0)
    return Tensor((x - np.float32(0.5)) / np.float32(0.5))


def prepare_frames(seq: FrameSequence, size: int = 64, directory=None) -> list[np.ndarray]:
    """Crop every frame to its ROI and resize to ``size``×``size``."""
    rois = rois_for(seq, directory)
    return [crop_resize(f, rois[fid], (size, size)) for f, fid in zip(seq.frames, seq.ids)]
