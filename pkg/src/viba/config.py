"""Run configuration: ``key = value`` files, command-line overrides and the echoed effective config."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .flow import PyramidConfig
from .iba import BottleneckConfig
from .nn import DEFAULT_INJECTION, TrainConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


def _default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 0  # 0 = available parallelism
    # synthetic data
    n_train: int = 200
    n_eval: int = 100
    image_size: int = 64
    seq_len: int = 4
    patch_min: int = 14
    patch_max: int = 20
    texture_freq: float = 0.4
    motion: float = 3.0
    drift_max: int = 2
    fake_fraction: float = 0.5
    annotators: int = 8
    # training
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 7
    val_fraction: float = 0.15
    # bottleneck
    layer: str = ""  # empty = per-model default injection point
    beta: float = 0.1
    steps: int = 10
    iba_lr: float = 1.0
    noise_samples: int = 10
    sigma_floor: float = 0.1
    alpha_init: float = 5.0
    stats_samples: int = 100
    # preprocessing and flow
    keyframe_threshold: float = 0.05
    keyframe_min_gap: int = 1
    pyr_scale: float = 0.5
    pyr_levels: int = 3
    flow_window: int = 15
    flow_iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1
    # reports
    quantile: float = 0.85
    ece_bins: int = 10
    overlay_alpha: float = 0.5
    overlay_samples: int = 4
    static_sequences: int = 5
    static_len: int = 5
    dynamic_sequences: int = 10

    def __post_init__(self):
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")
        if not 0 < self.quantile < 1:
            raise ConfigError("quantile must be in (0, 1)")
        if not 0 <= self.overlay_alpha <= 1:
            raise ConfigError("overlay_alpha must be in [0, 1]")
        if self.static_len < 2:
            raise ConfigError("static_len must be >= 2")

    @property
    def n_workers(self) -> int:
        return self.workers or _default_workers()

    def synth(self, n: int, seed: int) -> SynthConfig:
        return SynthConfig(n_samples=n, image_size=self.image_size, seq_len=self.seq_len,
                           patch_min=self.patch_min, patch_max=self.patch_max, texture_freq=self.texture_freq,
                           motion=self.motion, drift_max=self.drift_max, fake_fraction=self.fake_fraction,
                           seed=seed)

    def train(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.seed)

    def bottleneck(self, model_kind: str, layer: str | None = None) -> BottleneckConfig:
        return BottleneckConfig(layer=layer or self.layer or DEFAULT_INJECTION[model_kind], beta=self.beta,
                                steps=self.steps, lr=self.iba_lr, noise_samples=self.noise_samples,
                                seed=self.seed, sigma_floor=self.sigma_floor, alpha_init=self.alpha_init)

    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(scale=self.pyr_scale, levels=self.pyr_levels, window=self.flow_window,
                             iterations=self.flow_iterations, poly_n=self.poly_n, poly_sigma=self.poly_sigma)

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def write(self, directory) -> None:
        Path(directory).mkdir(parents=True, exist_ok=True)
        (Path(directory) / "run_config.txt").write_text(self.dump(), encoding="utf-8")


def valid_keys() -> list[str]:
    return [f.name for f in fields(RunConfig)]


def _coerce(key: str, raw: str):
    ftype = {f.name: f.type for f in fields(RunConfig)}[key]
    raw = str(raw).strip()
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype}") from None
    return raw


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    keys = set(valid_keys())
    unknown = sorted(set(pairs) - keys)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(valid_keys())}")
    try:
        return replace(cfg, **{k: _coerce(k, v) for k, v in pairs.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
