"""Classification, calibration, saliency-consistency and region-agreement metrics.

Conventions for degenerate inputs:
  * ``binarize_map`` keeps pixels >= the q-quantile taken with numpy's
    "lower" method (an actual map value, never interpolated), so a constant
    map or a tiny q binarizes to all-true.
  * ``iou`` of two empty masks is 1.
  * ``rpi`` skips consecutive pairs where either mask is empty and returns 0
    when every pair is skipped.
"""

from __future__ import annotations

import csv
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

REGION_CODES = ("L", "E", "B", "N", "O", "C")
CODE_ORDER = {c: i for i, c in enumerate(REGION_CODES)}


@dataclass(frozen=True)
class AnnotationRecord:
    video_id: str
    annotator_id: str
    region_code: str

    def __post_init__(self):
        if self.region_code not in CODE_ORDER:
            raise ValueError(f"region code {self.region_code!r} not in {REGION_CODES}")


def binarize_map(cmap, q: float = 0.85) -> np.ndarray:
    if not 0 < q < 1:
        raise ValueError(f"quantile must be in (0, 1), got {q}")
    m = np.asarray(getattr(cmap, "bits", cmap), dtype=np.float64)
    return m >= np.quantile(m, q, method="lower")


def _same_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")


def iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    _same_dims(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mean_pairwise_iou(masks: Sequence) -> float:
    """Mean IoU over all unordered pairs (1.0 for a single mask)."""
    n = len(masks)
    if n < 2:
        return 1.0
    vals = [iou(masks[i], masks[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(vals))


def consecutive_iou(masks: Sequence) -> float:
    """Mean IoU of frame t with frame t+1."""
    if len(masks) < 2:
        return 1.0
    return float(np.mean([iou(a, b) for a, b in zip(masks, masks[1:])]))


def tcs(masks: Sequence) -> float:
    """Mean highlighted-area fraction over the frames."""
    if len(masks) == 0:
        raise ValueError("tcs needs at least one mask")
    masks = [np.asarray(m, bool) for m in masks]
    for m in masks[1:]:
        _same_dims(masks[0], m)
    h, w = masks[0].shape
    return float(sum(np.count_nonzero(m) / (w * h) for m in masks) / len(masks))


def centroid(mask) -> np.ndarray | None:
    """(x, y) centroid of the true pixels, or None for an empty mask."""
    ys, xs = np.nonzero(np.asarray(mask, bool))
    if len(xs) == 0:
        return None
    return np.array([xs.mean(), ys.mean()])


def rpi(masks: Sequence) -> float:
    """Mean centroid step between consecutive nonempty masks over the frame diagonal."""
    if len(masks) < 2:
        raise ValueError("rpi needs at least two masks")
    masks = [np.asarray(m, bool) for m in masks]
    for m in masks[1:]:
        _same_dims(masks[0], m)
    h, w = masks[0].shape
    cents = [centroid(m) for m in masks]
    steps = [np.hypot(*(b - a)) for a, b in zip(cents, cents[1:]) if a is not None and b is not None]
    if not steps:
        return 0.0
    return float(np.mean(steps) / np.sqrt(w * w + h * h))


def ece(probabilities, predicted, labels, bins: int = 10) -> float:
    """Expected calibration error with equal-width bins (lo, hi] on the max-class confidence.

    ``probabilities`` is either an N×K matrix or the N confidences directly.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    conf = p.max(axis=1) if p.ndim == 2 else p
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if not len(conf) == len(predicted) == len(labels):
        raise ValueError(f"length mismatch: {len(conf)} probabilities, {len(predicted)} predictions, "
                         f"{len(labels)} labels")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    n = len(conf)
    if n == 0:
        return 0.0
    correct = (predicted == labels).astype(np.float64)
    # bin b covers (b/bins, (b+1)/bins]; confidence 0 joins the first bin
    edges = np.arange(bins + 1) / bins
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        nb = np.count_nonzero(sel)
        if nb:
            total += nb / n * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


@dataclass
class ClassificationReport:
    accuracy: float
    precision: float
    recall: float
    f1_macro: float
    tp: int
    fp: int
    fn: int
    tn: int


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what} undefined (zero division); reported as 0")
        return 0.0
    return num / den


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def classification_report(predicted, labels, positive: int = 1) -> ClassificationReport:
    """Binary metrics with ``positive`` (fake) as the positive class; F1 is macro over both classes."""
    pr, lb = np.asarray(predicted), np.asarray(labels)
    if len(pr) != len(lb):
        raise ValueError(f"length mismatch: {len(pr)} predictions vs {len(lb)} labels")
    tp = int(np.count_nonzero((pr == positive) & (lb == positive)))
    fp = int(np.count_nonzero((pr == positive) & (lb != positive)))
    fn = int(np.count_nonzero((pr != positive) & (lb == positive)))
    tn = int(np.count_nonzero((pr != positive) & (lb != positive)))
    acc = _ratio(tp + tn, len(pr), "accuracy")
    prec = _ratio(tp, tp + fp, "precision")
    rec = _ratio(tp, tp + fn, "recall")
    prec_neg = _ratio(tn, tn + fn, "negative-class precision")
    rec_neg = _ratio(tn, tn + fp, "negative-class recall")
    f1 = (_f1(prec, rec) + _f1(prec_neg, rec_neg)) / 2
    return ClassificationReport(acc, prec, rec, f1, tp, fp, fn, tn)


def overlap_coefficient(a, b) -> float:
    a, b = set(a), set(b)
    if not a or not b:
        raise ValueError("overlap coefficient is undefined for an empty set")
    return len(a & b) / min(len(a), len(b))


def set_prf(model: set, human: set) -> tuple[float, float, float]:
    """Precision, recall and F1 of a predicted region set against the human set (empty → 0)."""
    hit = len(model & human)
    p = hit / len(model) if model else 0.0
    r = hit / len(human) if human else 0.0
    return p, r, _f1(p, r)


def model_regions(cmap, taxonomy, k: int = 3) -> list[str]:
    """Top-k region codes by capacity mass; regions with zero mass are never selected."""
    m = np.asarray(getattr(cmap, "bits", cmap), dtype=np.float64)
    tax = np.asarray(taxonomy)
    if m.shape != tax.shape:
        raise ValueError(f"taxonomy dims {tax.shape} differ from map dims {m.shape}")
    mass = [(float(m[tax == i + 1].sum()), c) for i, c in enumerate(REGION_CODES)]
    ranked = sorted((x for x in mass if x[0] > 0), key=lambda x: (-x[0], CODE_ORDER[x[1]]))
    return [c for _, c in ranked[:k]]


def human_regions(codes: Sequence[str], k: int = 3) -> list[str]:
    """Top-k most frequent codes, ties broken in the fixed order L, E, B, N, O, C."""
    counts = Counter(codes)
    return sorted(counts, key=lambda c: (-counts[c], CODE_ORDER[c]))[:k]


@dataclass
class VideoAgreement:
    video_id: str
    model_set: list[str]
    human_set: list[str]
    majority: str
    precision: float
    recall: float
    f1: float
    overlap: float
    top1: bool


@dataclass
class AgreementReport:
    f1_macro: float
    precision: float
    recall: float
    overlap: float
    top1_rate: float
    videos: list[VideoAgreement] = field(default_factory=list)
    model_frequency: dict[str, int] = field(default_factory=dict)
    human_frequency: dict[str, int] = field(default_factory=dict)


def region_agreement(maps: Mapping[str, object], taxonomy: Mapping[str, np.ndarray],
                     annotations: Sequence[AnnotationRecord], k: int = 3) -> AgreementReport:
    """Compare model region sets with annotator votes, video by video, then average.

    ``maps`` holds one capacity map per video (sum a sequence's maps first).
    Overlap is 0 when the model set is empty.
    """
    votes: dict[str, list[str]] = {}
    for a in annotations:
        votes.setdefault(a.video_id, []).append(a.region_code)
    rows = []
    model_freq = Counter({c: 0 for c in REGION_CODES})
    human_freq = Counter({c: 0 for c in REGION_CODES})
    for vid in sorted(maps):
        if vid not in taxonomy:
            raise KeyError(f"no region taxonomy for video {vid!r}")
        if vid not in votes:
            raise KeyError(f"no annotations for video {vid!r}")
        ms = model_regions(maps[vid], taxonomy[vid], k)
        hs = human_regions(votes[vid], k)
        majority = hs[0]
        p, r, f1 = set_prf(set(ms), set(hs))
        ov = overlap_coefficient(ms, hs) if ms else 0.0
        rows.append(VideoAgreement(vid, ms, hs, majority, p, r, f1, ov, majority in ms))
        model_freq.update(ms)
        human_freq.update(votes[vid])
    if not rows:
        raise ValueError("region_agreement needs at least one video")
    mean = lambda attr: float(np.mean([getattr(v, attr) for v in rows]))  # noqa: E731
    return AgreementReport(mean("f1"), mean("precision"), mean("recall"), mean("overlap"),
                           float(np.mean([v.top1 for v in rows])), rows,
                           dict(model_freq), dict(human_freq))


def read_annotations(path) -> list[AnnotationRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"video_id", "annotator_id", "region_code"} <= set(rows[0]):
        raise ValueError(f"{path}: expected columns video_id,annotator_id,region_code")
    return [AnnotationRecord(r["video_id"], r["annotator_id"], r["region_code"].strip()) for r in rows]


def read_labels(path) -> dict[str, tuple[str, str]]:
    """sample_id → (label, region_code) from a labels.csv."""
    with open(path, newline="") as fh:
        return {r["sample_id"]: (r["label"], r.get("region_code", "")) for r in csv.DictReader(fh)}


def fmt(x) -> str:
    """Deterministic number formatting for report CSVs."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6f}"
    return str(x)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(Path(path), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([fmt(v) for v in row])
