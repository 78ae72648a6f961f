"""Command-line entry point: ``python -m viba <command>``.

Exit codes: 0 success, 1 acceptance failure, 2 I/O, 3 config, 4 data consistency.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import flow, iba, metrics, nn, synth
from .config import ConfigError, RunConfig, load_config
from .experiment import MODEL_FOR, DataError, flow_color_inputs, load_dataset, run_e2e, stack_inputs, train_on
from .netpbm import NetpbmError, read_pgm, read_ppm, write_ppm
from .pipeline import load_frame_sequence, normalize_for_model, prepare_frames

log = logging.getLogger("viba")

EXIT_OK, EXIT_ACCEPTANCE, EXIT_IO, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3, 4


def _model_kind(name: str) -> str:
    """Accept a model kind or the dataset kind it is trained on."""
    kind = MODEL_FOR.get(name, name)
    if kind not in nn.SPECS:
        raise ConfigError(f"unknown model {name!r}; choose from {sorted(nn.SPECS)} or {sorted(MODEL_FOR)}")
    return kind


def _data_kind(model_kind: str) -> str:
    return {v: k for k, v in MODEL_FOR.items()}[model_kind]


def _check_layer(spec: nn.ModelSpec, layer: str) -> None:
    try:
        spec.layer_index(layer)
    except KeyError:
        raise ConfigError(f"unknown layer {layer!r} for {spec.name}; valid injection points: "
                          f"{', '.join(sorted(spec.injection_points))}") from None


def _load_model(kind: str, weights, cfg: RunConfig) -> nn.Model:
    return nn.load_weights(nn.spec_for(kind, cfg.image_size), weights)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    gen = synth.gen_spatial_dataset if args.kind == "spatial" else synth.gen_temporal_dataset
    samples = gen(cfg.synth(args.n or cfg.n_train, cfg.seed), prefix=args.kind[0])
    synth.write_dataset(samples, out, synth.make_annotations(samples, cfg.annotators, cfg.seed))
    cfg.write(out)
    log.info("wrote %d samples to %s", len(samples), out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    kind = _model_kind(args.model)
    videos = load_dataset(args.data, _data_kind(kind), cfg)
    res = train_on(videos, kind, cfg)
    out = Path(args.out)
    cfg.write(out)
    nn.save_weights(res.model, out / f"{kind}.vwts")
    rows = [[h["epoch"], h["train_loss"], h["val_loss"], h["val_acc"], h["epoch"] == res.best_epoch]
            for h in res.history]
    metrics.write_csv(out / "training.csv", ["epoch", "train_loss", "val_loss", "val_acc", "best"], rows)
    return EXIT_OK


def _stats_for(model: nn.Model, kind: str, layer: str, cfg: RunConfig, args, fallback=None) -> iba.ActivationStats:
    """Statistics from --stats (file or directory), else from --calib data, else from ``fallback`` inputs."""
    if args.stats:
        p = Path(args.stats)
        if p.is_dir():
            p = p / f"{kind}_{layer}_stats.csv"
        st = iba.load_stats(p)
        if st.layer_id != layer:
            raise DataError(f"{p}: statistics are for layer {st.layer_id!r}, not {layer!r}")
        return st
    if args.calib:
        x, _ = stack_inputs(load_dataset(args.calib, _data_kind(kind), cfg))
    elif fallback is not None:
        x = fallback
    else:
        raise ConfigError("activation statistics need --stats or --calib")
    return iba.estimate_stats(model, layer, x[:cfg.stats_samples], cfg.sigma_floor)


def cmd_stats(args, cfg: RunConfig) -> int:
    kind = _model_kind(args.model)
    model = _load_model(kind, args.weights, cfg)
    layer = cfg.bottleneck(kind, args.layer).layer
    _check_layer(model.spec, layer)
    x, _ = stack_inputs(load_dataset(args.data, _data_kind(kind), cfg))
    st = iba.estimate_stats(model, layer, x[:cfg.stats_samples], cfg.sigma_floor)
    out = Path(args.out)
    cfg.write(out)
    iba.save_stats(out / f"{kind}_{layer}_stats.csv", st)
    return EXIT_OK


def _attribution_inputs(frames_dir, kind: str, cfg: RunConfig, mode: str):
    """(frame ids, model inputs, frames to draw overlays on) for a frame directory."""
    seq = load_frame_sequence(frames_dir)
    frames = prepare_frames(seq, cfg.image_size, frames_dir)
    if mode == "flow":
        pairs = flow_color_inputs(frames, cfg, keyframes_only=False)
        if not pairs:
            raise DataError(f"{frames_dir}: flow input needs at least two frames")
        return ([seq.ids[i] for i, _ in pairs], [normalize_for_model(img).data for _, img in pairs],
                [frames[i] for i, _ in pairs])
    return list(seq.ids), [normalize_for_model(f).data for f in frames], frames


def _write_attributions(out: Path, ids, attrs, frames, cfg: RunConfig) -> None:
    cfg.write(out)
    rows = []
    for fid, a, frame in zip(ids, attrs, frames):
        iba.save_capacity(out / f"cap_{fid:04d}.vcap", a.map)
        iba.export_pgm(out / f"cap_{fid:04d}.pgm", a.map.bits)
        write_ppm(out / f"overlay_{fid:04d}.ppm", iba.overlay_heatmap(frame, a.map, cfg.overlay_alpha))
        rows.append([fid, synth.LABEL_NAMES[a.predicted], a.probability])
    metrics.write_csv(out / "predictions.csv", ["frame_id", "class", "probability"], rows)


def cmd_attribute(args, cfg: RunConfig) -> int:
    kind = _model_kind(args.model)
    model = _load_model(kind, args.weights, cfg)
    layers = [s.strip() for s in args.sweep.split(",") if s.strip()] if args.sweep else \
        [cfg.bottleneck(kind, args.layer).layer]
    for layer in layers:
        _check_layer(model.spec, layer)
    mode = args.input or ("flow" if kind == "toy-vgg" else "rgb")
    ids, xs, frames = _attribution_inputs(args.frames, kind, cfg, mode)
    out = Path(args.out)
    for layer in layers:
        bcfg = cfg.bottleneck(kind, layer)
        stats = _stats_for(model, kind, layer, cfg, args, fallback=np.stack(xs))
        attrs = iba.attribute_sequence(model, xs, bcfg, stats, ids, cfg.n_workers)
        _write_attributions(out / layer if args.sweep else out, ids, attrs, frames, cfg)
    cfg.write(out)
    return EXIT_OK


def cmd_flow(args, cfg: RunConfig) -> int:
    prev, next_ = read_ppm(args.prev), read_ppm(args.next)
    if prev.shape != next_.shape:
        raise DataError(f"{args.prev} is {prev.shape[1]}x{prev.shape[0]} but {args.next} is "
                        f"{next_.shape[1]}x{next_.shape[0]}")
    fl = flow.flow_between(prev, next_, cfg.pyramid())
    out = Path(args.out)
    cfg.write(out)
    flow.save_flow(out / "flow.vflw", fl)
    write_ppm(out / "flow_color.ppm", flow.flow_to_color(fl))
    return EXIT_OK


def _video_dirs(maps_dir: Path) -> dict[str, Path]:
    if not maps_dir.is_dir():
        raise FileNotFoundError(f"{maps_dir} is not a directory")
    if any(maps_dir.glob("cap_*.vcap")):
        return {maps_dir.name: maps_dir}
    return {d.name: d for d in sorted(maps_dir.iterdir()) if d.is_dir() and any(d.glob("cap_*.vcap"))}


def _load_maps(d: Path) -> tuple[list[Path], list[np.ndarray]]:
    files = sorted(d.glob("cap_*.vcap"))
    maps = [iba.load_capacity(f)[0] for f in files]
    for f, m in zip(files[1:], maps[1:]):
        if m.shape != maps[0].shape:
            raise DataError(f"map dims differ: {files[0]} is {maps[0].shape[1]}x{maps[0].shape[0]}, "
                            f"{f} is {m.shape[1]}x{m.shape[0]}")
    return files, maps


def cmd_metrics(args, cfg: RunConfig) -> int:
    videos = _video_dirs(Path(args.maps))
    if not videos:
        raise DataError(f"{args.maps}: no capacity maps (cap_*.vcap) found")
    labels = {k: v[0] for k, v in metrics.read_labels(args.labels).items()} if args.labels else {}
    out = Path(args.out)
    cfg.write(out)

    loaded = {vid: _load_maps(d) for vid, d in videos.items()}
    rows = []
    for vid, (files, maps) in loaded.items():
        masks = [metrics.binarize_map(m, cfg.quantile) for m in maps]
        r = metrics.rpi(masks) if len(masks) > 1 else 0.0
        rows.append([labels.get(vid, "unknown"), vid, len(masks), metrics.mean_pairwise_iou(masks),
                     metrics.tcs(masks), r])
    means = []
    for cls in sorted({r[0] for r in rows}):
        sel = [r for r in rows if r[0] == cls]
        means.append([cls, "mean", len(sel)] + [float(np.mean([r[i] for r in sel])) for i in (3, 4, 5)])
    metrics.write_csv(out / "consistency.csv", ["class", "video_id", "frames", "iou", "tcs", "rpi"], rows + means)

    if args.annotations:
        ann = metrics.read_annotations(args.annotations)
        voted = {a.video_id for a in ann}
        summed, tax = {}, {}
        for vid, (files, maps) in loaded.items():
            if vid not in voted:
                continue
            summed[vid] = np.sum(maps, axis=0, dtype=np.float64)
            tpath = _taxonomy_path(args, vid)
            tax[vid] = read_pgm(tpath)
            if tax[vid].shape != summed[vid].shape:
                raise DataError(f"taxonomy {tpath} is {tax[vid].shape[1]}x{tax[vid].shape[0]} but maps in "
                                f"{videos[vid]} are {summed[vid].shape[1]}x{summed[vid].shape[0]}")
        if not summed:
            raise DataError(f"{args.annotations}: no annotated video has maps in {args.maps}")
        rep = metrics.region_agreement(summed, tax, ann)
        arows = [[v.video_id, " ".join(v.model_set), " ".join(v.human_set), v.precision, v.recall, v.f1,
                  v.overlap, v.top1] for v in rep.videos]
        arows.append(["mean", "", "", rep.precision, rep.recall, rep.f1_macro, rep.overlap, rep.top1_rate])
        metrics.write_csv(out / "agreement.csv",
                          ["video_id", "model_regions", "human_regions", "precision", "recall", "f1", "overlap",
                           "top1"], arows)

    if labels:
        conf, pred, lab = [], [], []
        for vid, d in videos.items():
            p = d / "predictions.csv"
            if vid not in labels or not p.exists():
                continue
            for row in np.atleast_1d(np.genfromtxt(p, delimiter=",", names=True, dtype=None, encoding="utf-8")):
                conf.append(float(row["probability"]))
                pred.append(str(row["class"]))
                lab.append(labels[vid])
        if conf:
            e = metrics.ece(np.array(conf), np.array(pred), np.array(lab), cfg.ece_bins)
            metrics.write_csv(out / "calibration.csv", ["frames", "bins", "ece"], [[len(conf), cfg.ece_bins, e]])
    return EXIT_OK


def _taxonomy_path(args, vid: str) -> Path:
    if not args.taxonomy:
        raise ConfigError("--annotations needs --taxonomy (a PGM or a dataset directory with <video>/regions.pgm)")
    t = Path(args.taxonomy)
    return t / vid / "regions.pgm" if t.is_dir() else t


def cmd_e2e(args, cfg: RunConfig) -> int:
    code, criteria = run_e2e(args.out, cfg)
    for c in criteria:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.value} (need {c.threshold})")
    failed = [c for c in criteria if not c.passed]
    if failed:
        print(f"first failed criterion: {failed[0].name}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viba", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default: available parallelism)")
    p.add_argument("--out", default="viba_out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--kind", choices=["spatial", "temporal"], default="spatial")
    s.add_argument("--n", type=int, help="number of samples (default n_train)")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a toy model on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--model", default="toy-xception")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("stats", help="estimate activation statistics at an injection point")
    s.add_argument("--data", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--model", default="toy-xception")
    s.add_argument("--layer")
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("attribute", help="capacity maps for a frame directory")
    s.add_argument("frames")
    s.add_argument("--weights", required=True)
    s.add_argument("--model", default="toy-xception")
    s.add_argument("--layer")
    s.add_argument("--sweep", help="comma-separated injection points, one subdirectory each")
    s.add_argument("--stats", help="statistics CSV, or a directory of <model>_<layer>_stats.csv")
    s.add_argument("--calib", help="dataset directory to estimate statistics from")
    s.add_argument("--input", choices=["rgb", "flow"], help="model input (default: flow for toy-vgg)")
    s.set_defaults(fn=cmd_attribute)

    s = sub.add_parser("flow", help="dense optical flow between two PPM frames")
    s.add_argument("prev")
    s.add_argument("next")
    s.set_defaults(fn=cmd_flow)

    s = sub.add_parser("metrics", help="consistency, agreement and calibration reports from saved maps")
    s.add_argument("maps", help="directory of cap_*.vcap files, or of one such directory per video")
    s.add_argument("--labels", help="labels.csv (sample_id,label,region_code)")
    s.add_argument("--annotations", help="annotations.csv (video_id,annotator_id,region_code)")
    s.add_argument("--taxonomy", help="region PGM, or dataset directory holding <video>/regions.pgm")
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("e2e", help="full synthetic experiment with acceptance checks")
    s.set_defaults(fn=cmd_e2e)
    return p


def _overrides(args) -> dict[str, str]:
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.workers is not None:
        pairs["workers"] = str(args.workers)
    return pairs


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return args.fn(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NetpbmError, nn.WeightsFormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
