"""Compare injection points: train toy-xception on synthetic frames, then attribute fakes at every layer.

Writes ``layer_sweep.csv`` (mean raw-map size, mean bits and the share of fakes whose
capacity mass inside the patch is at least twice its area share) plus one overlay per
layer for the first few fakes.

    python scripts/layer_sweep.py --out runs/sweep --n-fakes 20
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from viba import iba, metrics, nn, synth
from viba.config import load_config
from viba.experiment import mass_ratio
from viba.netpbm import write_ppm
from viba.pipeline import normalize_for_model

LAYERS = ["block1", "block2", "block3", "post_conv3"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--config", help="key = value file, e.g. to shorten training")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-fakes", type=int, default=20)
    ap.add_argument("--overlays", type=int, default=3)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    cfg = load_config(args.config, {"seed": str(args.seed)})
    out = Path(args.out)
    cfg.write(out)

    train = synth.gen_spatial_dataset(cfg.synth(cfg.n_train, cfg.seed * 2 + 7), prefix="st")
    x = np.stack([normalize_for_model(s.frames[0]).data for s in train])
    y = np.array([s.label for s in train])
    n_val = max(1, round(len(y) * cfg.val_fraction))
    res = nn.train_model(nn.build_model(nn.spec_for("toy-xception", cfg.image_size), cfg.seed),
                         (x[n_val:], y[n_val:]), (x[:n_val], y[:n_val]), cfg.train())
    stats = {lid: iba.estimate_stats(res.model, lid, x[:cfg.stats_samples], cfg.sigma_floor) for lid in LAYERS}

    evals = synth.gen_spatial_dataset(cfg.synth(2 * args.n_fakes, cfg.seed * 2 + 8), prefix="se")
    fakes = [s for s in evals if s.label == synth.FAKE][:args.n_fakes]
    per_layer = {lid: [] for lid in LAYERS}
    for k, s in enumerate(fakes):
        sweep = iba.layer_sweep(res.model, normalize_for_model(s.frames[0]).data, LAYERS,
                                cfg.bottleneck("toy-xception"), stats, frame_id=k)
        for lid, a in sweep.items():
            per_layer[lid].append((a.map.raw.shape, a.map.total_bits, mass_ratio(a.map.bits, s.mask)[2]))
            if k < args.overlays:
                write_ppm(out / f"{s.sample_id}_{lid}.ppm", iba.overlay_heatmap(s.frames[0], a.map, cfg.overlay_alpha))

    rows = []
    for lid, items in per_layer.items():
        h, w = items[0][0]
        rows.append([lid, f"{h}x{w}", float(np.mean([b for _, b, _ in items])),
                     float(np.mean([r >= 2 for _, _, r in items]))])
    metrics.write_csv(out / "layer_sweep.csv", ["layer", "raw_map", "mean_bits", "localized_share"], rows)
    for r in rows:
        print(*r, sep="\t")


if __name__ == "__main__":
    main()
