"""Dataset loading and the end-to-end synthetic experiment behind ``viba e2e``."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flow, iba, metrics, nn, synth
from .config import RunConfig
from .netpbm import read_pgm, write_ppm
from .pipeline import extract_keyframes, load_frame_sequence, make_flow_pairs, normalize_for_model, prepare_frames

log = logging.getLogger(__name__)

MODEL_FOR = {"spatial": "toy-xception", "temporal": "toy-vgg"}
LOCALIZATION_TARGET = {"toy-xception": 0.8, "toy-vgg": 0.7}
PARITY_MAX_PP = 2.0
TRAIN_ACC_MIN = 0.9
STATIC_IOU_MIN = 0.9
STATIC_RPI_MAX = 0.05
MIN_LOCALIZATION_FAKES = 50


class DataError(ValueError):
    """Inputs exist but are inconsistent (dimensions, labels, missing sidecars)."""


@dataclass
class Video:
    sample_id: str
    label: int
    region_code: str
    frames: list[np.ndarray]  # ROI-cropped, resized RGB uint8
    mask: np.ndarray | None = None
    regions: np.ndarray | None = None
    inputs: list[np.ndarray] = field(default_factory=list)  # 3×H×W float32 model inputs
    input_frames: list[np.ndarray] = field(default_factory=list)  # the frame each input is anchored on


def flow_color_inputs(frames: list[np.ndarray], cfg: RunConfig, keyframes_only: bool = True):
    """Flow-color images for (keyframe, successor) pairs, or for every consecutive pair."""
    from .pipeline import FrameSequence
    seq = FrameSequence(frames, list(range(len(frames))))
    if keyframes_only:
        keys = extract_keyframes(seq, cfg.keyframe_threshold, cfg.keyframe_min_gap)
        pairs = make_flow_pairs(seq, keys)
    else:
        pairs = [(i, i + 1) for i in range(len(frames) - 1)]
    out = []
    for i, j in pairs:
        fl = flow.flow_between(frames[i], frames[j], cfg.pyramid())
        out.append((i, flow.flow_to_color(fl)))
    return out


def load_dataset(root, kind: str, cfg: RunConfig) -> list[Video]:
    """Read a dataset directory written by ``synth.write_dataset``.

    ``kind`` is "spatial" (first frame as input) or "temporal" (flow-color of
    the first keyframe pair).
    """
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise FileNotFoundError(f"{labels_path} not found")
    table = metrics.read_labels(labels_path)
    videos = []
    for sid in sorted(table):
        label_name, code = table[sid]
        if label_name not in ("real", "fake"):
            raise DataError(f"{labels_path}: label {label_name!r} for {sid} is not real/fake")
        d = root / sid
        seq = load_frame_sequence(d)
        frames = prepare_frames(seq, cfg.image_size, d)
        v = Video(sid, synth.FAKE if label_name == "fake" else synth.REAL, code, frames)
        if (d / "mask.pgm").exists():
            v.mask = read_pgm(d / "mask.pgm") > 127
        if (d / "regions.pgm").exists():
            v.regions = read_pgm(d / "regions.pgm")
        for name, arr in (("mask.pgm", v.mask), ("regions.pgm", v.regions)):
            if arr is not None and arr.shape != frames[0].shape[:2]:
                raise DataError(f"{d / name}: dims {arr.shape} differ from frames {frames[0].shape[:2]}")
        if kind == "temporal":
            pairs = flow_color_inputs(frames, cfg)
            if not pairs:
                raise DataError(f"{d}: no flow pair (need at least two frames)")
            i, img = pairs[0]
            v.inputs = [normalize_for_model(img).data]
            v.input_frames = [frames[i]]
        else:
            v.inputs = [normalize_for_model(frames[0]).data]
            v.input_frames = [frames[0]]
        videos.append(v)
    if not videos:
        raise DataError(f"{root}: dataset is empty")
    return videos


def stack_inputs(videos: list[Video]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([v.inputs[0] for v in videos]), np.array([v.label for v in videos], dtype=np.int64)


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation split; the validation part has round(n·fraction) ≥ 1 samples."""
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ValueError(f"cannot hold out {n_val} of {n} samples for validation")
    perm = np.random.default_rng([seed, 15]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_on(videos: list[Video], kind: str, cfg: RunConfig) -> nn.TrainResult:
    x, y = stack_inputs(videos)
    tr, va = split_train_val(len(x), cfg.val_fraction, cfg.seed)
    model = nn.build_model(nn.spec_for(kind, cfg.image_size), cfg.seed)
    return nn.train_model(model, (x[tr], y[tr]), (x[va], y[va]), cfg.train())


def mass_ratio(bits: np.ndarray, mask: np.ndarray) -> tuple[float, float, float]:
    """(area fraction, capacity mass fraction inside the mask, their ratio)."""
    area = float(mask.mean())
    total = float(bits.sum(dtype=np.float64))
    mass = float(bits[mask].sum(dtype=np.float64)) / total if total > 0 else 0.0
    return area, mass, (mass / area if area > 0 else 0.0)


# ---------------------------------------------------------------------------
# end to end


@dataclass
class Criterion:
    name: str
    value: str
    threshold: str
    passed: bool


def _write_dataset(samples, root, cfg: RunConfig, seed: int) -> None:
    ann = synth.make_annotations(samples, cfg.annotators, seed)
    synth.write_dataset(samples, root, ann)
    cfg.write(root)


def _history_rows(kind: str, res: nn.TrainResult):
    for h in res.history:
        yield [kind, h["epoch"], h["train_loss"], h["val_loss"], h["val_acc"], h["epoch"] == res.best_epoch]


def _consistency_row(model_kind, seq_kind, video: Video, maps, q):
    masks = [metrics.binarize_map(a.map, q) for a in maps]
    return [model_kind, seq_kind, synth.LABEL_NAMES[video.label], video.sample_id, len(masks),
            metrics.mean_pairwise_iou(masks), metrics.tcs(masks), metrics.rpi(masks)]


def _class_means(rows):
    """Per (model, sequence kind, class) mean rows appended after the per-video rows."""
    out = []
    keys = sorted({(r[0], r[1], r[2]) for r in rows})
    for k in keys:
        sel = [r for r in rows if tuple(r[:3]) == k]
        out.append(list(k) + ["mean", len(sel)] + [float(np.mean([r[i] for r in sel])) for i in (5, 6, 7)])
    return out


def run_e2e(out_dir, cfg: RunConfig) -> tuple[int, list[Criterion]]:
    """Generate data, train both models, attribute, evaluate and write reports.

    Returns (exit code, criteria); the exit code is 0 iff every criterion passes.
    """
    out = Path(out_dir)
    t0 = time.perf_counter()
    cfg.write(out)
    data, models_dir, reports, overlays = (out / s for s in ("data", "models", "reports", "overlays"))
    for d in (data, models_dir, reports, overlays):
        cfg.write(d)
    workers = cfg.n_workers
    q = cfg.quantile

    gens = {"spatial": synth.gen_spatial_dataset, "temporal": synth.gen_temporal_dataset}
    for kind, gen in gens.items():
        for split, n, seed in (("train", cfg.n_train, cfg.seed * 2 + 7), ("eval", cfg.n_eval, cfg.seed * 2 + 8)):
            samples = gen(cfg.synth(n, seed), prefix=f"{kind[0]}{split[0]}")
            _write_dataset(samples, data / f"{kind}_{split}", cfg, seed)

    history_rows, perf_rows, calib_rows, loc_rows, cons_rows = [], [], [], [], []
    agree_rows, freq_rows = [], []
    criteria: list[Criterion] = []
    parity, loc_rate, val_acc, static = {}, {}, {}, {}

    for kind, model_kind in MODEL_FOR.items():
        train = load_dataset(data / f"{kind}_train", kind, cfg)
        ev = load_dataset(data / f"{kind}_eval", kind, cfg)
        res = train_on(train, model_kind, cfg)
        model = res.model
        nn.save_weights(model, models_dir / f"{model_kind}.vwts")
        history_rows.extend(_history_rows(model_kind, res))
        best = next(h for h in res.history if h["epoch"] == res.best_epoch)
        val_acc[model_kind] = best["val_acc"]
        log.info("%s trained: best epoch %d, val acc %.3f", model_kind, res.best_epoch, best["val_acc"])

        bcfg = cfg.bottleneck(model_kind)
        x_tr, _ = stack_inputs(train)
        stats = iba.estimate_stats(model, bcfg.layer, x_tr[:cfg.stats_samples], bcfg.sigma_floor)
        iba.save_stats(models_dir / f"{model_kind}_{bcfg.layer}_stats.csv", stats)

        x_ev, y_ev = stack_inputs(ev)
        proba = nn.predict_proba(model, x_ev)
        attrs = iba.attribute_sequence(model, list(x_ev), bcfg, stats, list(range(len(x_ev))), workers)
        inj = np.stack([a.injected_proba for a in attrs])
        for tag, p in (("-", proba), ("+", inj)):
            pred = p.argmax(axis=1)
            rep = metrics.classification_report(pred, y_ev)
            e = metrics.ece(p, pred, y_ev, cfg.ece_bins)
            perf_rows.append([model_kind, tag, rep.accuracy, rep.precision, rep.recall, rep.f1_macro, e])
            calib_rows.append([model_kind, tag, cfg.ece_bins, e])
        acc_base = float(np.mean(proba.argmax(1) == y_ev))
        acc_inj = float(np.mean(inj.argmax(1) == y_ev))
        parity[model_kind] = abs(acc_base - acc_inj) * 100

        n_pass = n_fake = 0
        for v, a in zip(ev, attrs):
            if v.label != synth.FAKE:
                continue
            area, mass, ratio = mass_ratio(a.map.bits, v.mask)
            ok = ratio >= 2.0
            n_fake += 1
            n_pass += ok
            loc_rows.append([model_kind, v.sample_id, area, mass, ratio, ok])
        loc_rate[model_kind] = (n_pass / n_fake if n_fake else 0.0, n_fake)

        # overlays for the first few samples of each class
        for label in (synth.REAL, synth.FAKE):
            picked = [(v, a) for v, a in zip(ev, attrs) if v.label == label][:cfg.overlay_samples]
            for v, a in picked:
                d = overlays / model_kind / v.sample_id
                cfg.write(d)
                write_ppm(d / "overlay_0000.ppm", iba.overlay_heatmap(v.input_frames[0], a.map, cfg.overlay_alpha))
                iba.export_pgm(d / "capacity_0000.pgm", a.map.bits)

        # region agreement on the fakes
        fakes = [(v, a) for v, a in zip(ev, attrs) if v.label == synth.FAKE]
        ann = metrics.read_annotations(data / f"{kind}_eval" / "annotations.csv")
        rep = metrics.region_agreement({v.sample_id: a.map.bits for v, a in fakes},
                                       {v.sample_id: v.regions for v, _ in fakes}, ann)
        agree_rows.append([model_kind, len(rep.videos), rep.f1_macro, rep.precision, rep.recall, rep.overlap,
                           rep.top1_rate])
        for c in metrics.REGION_CODES:
            freq_rows.append([model_kind, c, rep.model_frequency[c], rep.human_frequency[c]])

        # static sequences: one input repeated with distinct frame ids
        static_rows = []
        for label in (synth.REAL, synth.FAKE):
            vids = [v for v in ev if v.label == label][:cfg.static_sequences]
            for v in vids:
                maps = iba.attribute_sequence(model, [v.inputs[0]] * cfg.static_len, bcfg, stats,
                                              list(range(cfg.static_len)), workers)
                static_rows.append(_consistency_row(model_kind, "static", v, maps, q))
        cons_rows.extend(static_rows)
        static[model_kind] = (float(np.mean([r[5] for r in static_rows])),
                              float(np.max([r[7] for r in static_rows])))

        # dynamic sequences: every consecutive flow pair of a temporal sample
        if kind == "temporal":
            for label in (synth.REAL, synth.FAKE):
                for v in [v for v in ev if v.label == label][:cfg.dynamic_sequences]:
                    pairs = flow_color_inputs(v.frames, cfg, keyframes_only=False)
                    xs = [normalize_for_model(img).data for _, img in pairs]
                    maps = iba.attribute_sequence(model, xs, bcfg, stats, [i for i, _ in pairs], workers)
                    cons_rows.append(_consistency_row(model_kind, "dynamic", v, maps, q))

    metrics.write_csv(reports / "training.csv", ["model", "epoch", "train_loss", "val_loss", "val_acc", "best"],
                      history_rows)
    metrics.write_csv(reports / "performance.csv",
                      ["model", "injection", "accuracy", "precision", "recall", "f1_macro", "ece"], perf_rows)
    metrics.write_csv(reports / "calibration.csv", ["model", "injection", "bins", "ece"], calib_rows)
    loc_summary = [[m, "rate", r, n, LOCALIZATION_TARGET[m], r >= LOCALIZATION_TARGET[m]]
                   for m, (r, n) in loc_rate.items()]
    metrics.write_csv(reports / "localization.csv",
                      ["model", "sample_id", "area_fraction", "mass_fraction", "ratio", "pass"], loc_rows)
    metrics.write_csv(reports / "localization_summary.csv",
                      ["model", "metric", "value", "n_fakes", "target", "pass"], loc_summary)
    metrics.write_csv(reports / "consistency.csv",
                      ["model", "sequence", "class", "video_id", "frames", "iou", "tcs", "rpi"],
                      cons_rows + _class_means(cons_rows))
    metrics.write_csv(reports / "agreement.csv",
                      ["model", "videos", "f1_macro", "precision", "recall", "overlap", "top1"], agree_rows)
    metrics.write_csv(reports / "region_frequency.csv", ["model", "region", "model_count", "human_count"],
                      freq_rows)

    for m in MODEL_FOR.values():
        criteria.append(Criterion(f"training sanity ({m})", f"{val_acc[m]:.4f}", f">= {TRAIN_ACC_MIN}",
                                  val_acc[m] >= TRAIN_ACC_MIN))
    for m in MODEL_FOR.values():
        criteria.append(Criterion(f"injection parity ({m})", f"{parity[m]:.2f} pp", f"<= {PARITY_MAX_PP} pp",
                                  parity[m] <= PARITY_MAX_PP))
    for m in MODEL_FOR.values():
        r, n = loc_rate[m]
        criteria.append(Criterion(f"known-artefact localization ({m})", f"{r:.4f} of {n} fakes",
                                  f">= {LOCALIZATION_TARGET[m]} of >= {MIN_LOCALIZATION_FAKES}",
                                  r >= LOCALIZATION_TARGET[m] and n >= MIN_LOCALIZATION_FAKES))
    for m in MODEL_FOR.values():
        mi, mr = static[m]
        criteria.append(Criterion(f"static-sequence consistency ({m})", f"iou {mi:.4f}, rpi {mr:.4f}",
                                  f"iou >= {STATIC_IOU_MIN}, rpi <= {STATIC_RPI_MAX}",
                                  mi >= STATIC_IOU_MIN and mr <= STATIC_RPI_MAX))
    metrics.write_csv(reports / "criteria.csv", ["criterion", "value", "threshold", "pass"],
                      [[c.name, c.value, c.threshold, c.passed] for c in criteria])
    log.info("e2e finished in %.1f s", time.perf_counter() - t0)
    return (0 if all(c.passed for c in criteria) else 1), criteria
