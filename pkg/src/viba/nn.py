"""Toy Xception/VGG-style classifiers, training with early stopping, and weight files."""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "separable_conv", "batch_norm", "relu", "max_pool", "flatten", "linear")


@dataclass
class LayerSpec:
    id: str
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    injection_points: dict[str, str] = field(default_factory=dict)

    def layer_index(self, layer_id: str) -> int:
        resolved = self.injection_points.get(layer_id, layer_id)
        for i, layer in enumerate(self.layers):
            if layer.id == resolved:
                return i
        raise KeyError(f"unknown layer id {layer_id!r}; injection points: {sorted(self.injection_points)}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs > 0 and self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, dict[str, Tensor]]
    # running batch-norm statistics live outside the differentiable params
    buffers: dict[str, dict[str, np.ndarray]]

    def trainable(self) -> list[Tensor]:
        return [t for layer in self.spec.layers for t in self.params.get(layer.id, {}).values()]


# ---------------------------------------------------------------------------
# architectures


def _sep(lid: str, cin: int, cout: int) -> LayerSpec:
    return LayerSpec(lid, "separable_conv", {"in": cin, "out": cout, "kernel": 3, "padding": 1})


def _xception_block(name: str, cin: int, cout: int) -> list[LayerSpec]:
    return [
        LayerSpec(f"{name}.0", "relu"),
        _sep(f"{name}.1", cin, cout),
        LayerSpec(f"{name}.2", "batch_norm", {"channels": cout}),
        LayerSpec(f"{name}.3", "relu"),
        _sep(f"{name}.4", cout, cout),
        LayerSpec(f"{name}.5", "batch_norm", {"channels": cout}),
        LayerSpec(f"{name}.6", "max_pool", {"kernel": 3, "stride": 2, "padding": 1}),
    ]


def toy_xception_spec(input_size: int = 64) -> ModelSpec:
    layers = [
        LayerSpec("conv1", "conv", {"in": 3, "out": 8, "kernel": 3, "stride": 2, "padding": 1}),
        LayerSpec("bn1", "batch_norm", {"channels": 8}),
        LayerSpec("relu1", "relu"),
        LayerSpec("conv2", "conv", {"in": 8, "out": 16, "kernel": 3, "stride": 1, "padding": 1}),
        LayerSpec("bn2", "batch_norm", {"channels": 16}),
        LayerSpec("relu2", "relu"),
        *_xception_block("block1", 16, 24),
        *_xception_block("block2", 24, 32),
        *_xception_block("block3", 32, 32),
        _sep("conv3", 32, 32),
        LayerSpec("bn3", "batch_norm", {"channels": 32}),
        LayerSpec("relu3", "relu"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("last_linear", "linear", {"out": 2, "dropout": 0.5}),
    ]
    points = {"block1": "block1.6", "block2": "block2.6", "block3": "block3.6", "post_conv3": "bn3"}
    return ModelSpec("toy-xception", (3, input_size, input_size), layers, points)


VGG_WIDTHS = (8, 16, 32, 32, 64, 64, 64, 64)
_VGG_POOL_AFTER = {0, 1, 3, 5, 7}


def toy_vgg_spec(input_size: int = 64) -> ModelSpec:
    layers: list[LayerSpec] = []
    idx = 0
    cin = 3
    for i, cout in enumerate(VGG_WIDTHS):
        layers.append(LayerSpec(f"layer{idx}", "conv", {"in": cin, "out": cout, "kernel": 3, "stride": 1,
                                                         "padding": 1, "bias": True}))
        layers.append(LayerSpec(f"layer{idx + 1}", "batch_norm", {"channels": cout}))
        layers.append(LayerSpec(f"layer{idx + 2}", "relu"))
        idx += 3
        if i in _VGG_POOL_AFTER:
            layers.append(LayerSpec(f"layer{idx}", "max_pool", {"kernel": 2, "stride": 2, "padding": 0}))
            idx += 1
        cin = cout
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("last_linear", "linear", {"out": 2, "dropout": 0.5}))
    points = {"layer9": "layer9", "layer12": "layer12", "layer16": "layer16"}
    return ModelSpec("toy-vgg", (3, input_size, input_size), layers, points)


SPECS = {"toy-xception": toy_xception_spec, "toy-vgg": toy_vgg_spec}
DEFAULT_INJECTION = {"toy-xception": "block2", "toy-vgg": "layer9"}


def spec_for(kind: str, input_size: int = 64) -> ModelSpec:
    try:
        return SPECS[kind](input_size)
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(SPECS)}") from None


# ---------------------------------------------------------------------------
# shape propagation and construction


def infer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Output shape (without batch) of every layer; raises on the first layer that does not compose."""
    ids = [layer.id for layer in spec.layers]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{spec.name}: duplicate layer ids")
    for name, target in spec.injection_points.items():
        if target not in ids:
            raise ValueError(f"{spec.name}: injection point {name!r} references unknown layer {target!r}")
    shape: tuple[int, ...] = tuple(spec.input_shape)
    shapes = []
    for layer in spec.layers:
        p, k = layer.params, layer.kind

        def fail(msg: str):
            raise ValueError(f"{spec.name}: layer {layer.id!r} ({k}) does not compose: {msg}")

        if k in ("conv", "separable_conv"):
            if len(shape) != 3:
                fail(f"expects CHW input, got {shape}")
            if shape[0] != p["in"]:
                fail(f"expects {p['in']} input channels, got {shape[0]}")
            s = p.get("stride", 1)
            ho = (shape[1] + 2 * p["padding"] - p["kernel"]) // s + 1
            wo = (shape[2] + 2 * p["padding"] - p["kernel"]) // s + 1
            if ho < 1 or wo < 1:
                fail(f"kernel larger than input {shape}")
            shape = (p["out"], ho, wo)
        elif k == "batch_norm":
            if len(shape) != 3 or shape[0] != p["channels"]:
                fail(f"expects {p['channels']} channels, got {shape}")
        elif k == "relu":
            pass
        elif k == "max_pool":
            if len(shape) != 3:
                fail(f"expects CHW input, got {shape}")
            ho = (shape[1] + 2 * p["padding"] - p["kernel"]) // p["stride"] + 1
            wo = (shape[2] + 2 * p["padding"] - p["kernel"]) // p["stride"] + 1
            if ho < 1 or wo < 1:
                fail(f"kernel larger than input {shape}")
            shape = (shape[0], ho, wo)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "linear":
            if len(shape) != 1:
                fail(f"expects flat input, got {shape}")
            if "in" in p and p["in"] != shape[0]:
                fail(f"expects {p['in']} features, got {shape[0]}")
            shape = (p["out"],)
        else:
            fail(f"unknown kind; valid kinds {LAYER_KINDS}")
        shapes.append(shape)
    return shapes


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Initialise parameters deterministically (He fan-in scaling, BN gamma=1 beta=0)."""
    shapes = infer_shapes(spec)
    rng = np.random.default_rng(seed)
    params: dict[str, dict[str, Tensor]] = {}
    buffers: dict[str, dict[str, np.ndarray]] = {}
    prev: tuple[int, ...] = tuple(spec.input_shape)
    for layer, out_shape in zip(spec.layers, shapes):
        p = layer.params
        if layer.kind == "conv":
            fan_in = p["in"] * p["kernel"] ** 2
            w = rng.standard_normal((p["out"], p["in"], p["kernel"], p["kernel"])) * np.sqrt(2.0 / fan_in)
            params[layer.id] = {"weight": Tensor(w.astype(np.float32))}
            if p.get("bias"):
                params[layer.id]["bias"] = Tensor(np.zeros(p["out"], np.float32))
        elif layer.kind == "separable_conv":
            dw = rng.standard_normal((p["in"], 1, p["kernel"], p["kernel"])) * np.sqrt(2.0 / p["kernel"] ** 2)
            pw = rng.standard_normal((p["out"], p["in"], 1, 1)) * np.sqrt(2.0 / p["in"])
            params[layer.id] = {"depthwise": Tensor(dw.astype(np.float32)), "pointwise": Tensor(pw.astype(np.float32))}
        elif layer.kind == "batch_norm":
            c = p["channels"]
            params[layer.id] = {"gamma": Tensor(np.ones(c, np.float32)), "beta": Tensor(np.zeros(c, np.float32))}
            buffers[layer.id] = {"running_mean": np.zeros(c, np.float32), "running_var": np.ones(c, np.float32)}
        elif layer.kind == "linear":
            d = prev[0]
            w = rng.standard_normal((d, p["out"])) * np.sqrt(1.0 / d)
            params[layer.id] = {"weight": Tensor(w.astype(np.float32)), "bias": Tensor(np.zeros(p["out"], np.float32))}
        prev = out_shape
    return Model(spec, params, buffers)


# ---------------------------------------------------------------------------
# forward


def _apply(model: Model, layer: LayerSpec, x: Tensor, training: bool, rng) -> Tensor:
    p = layer.params
    w = model.params.get(layer.id)
    k = layer.kind
    if k == "conv":
        out = T.conv2d(x, w["weight"], stride=p.get("stride", 1), padding=p["padding"])
        if "bias" in w:
            out = _add_channel_bias(out, w["bias"])
        return out
    if k == "separable_conv":
        return T.separable_conv2d(x, w["depthwise"], w["pointwise"], stride=p.get("stride", 1), padding=p["padding"])
    if k == "batch_norm":
        b = model.buffers[layer.id]
        return T.batch_norm2d(x, w["gamma"], w["beta"], b["running_mean"], b["running_var"],
                              eps=p.get("eps", 1e-5), training=training, momentum=p.get("momentum", 0.1))
    if k == "relu":
        return T.relu(x)
    if k == "max_pool":
        return T.max_pool2d(x, p["kernel"], p["stride"], p["padding"])
    if k == "flatten":
        return T.flatten(x)
    if k == "linear":
        x = T.dropout(x, rng, keep=1.0 - p.get("dropout", 0.0), training=training and p.get("dropout", 0) > 0)
        return T.linear(x, w["weight"], w["bias"])
    raise ValueError(f"unknown layer kind {k!r}")


def _add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    xd, bd = x.data, bias.data
    out = xd + bd[None, :, None, None]
    return T._emit("channel_bias", out, (x, bias),
                   lambda g, needs: (g, np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)))


def _as_batch(x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    if x.data.ndim == 3:
        x = Tensor(x.data[None], requires_grad=x.requires_grad)
    return x


def forward(model: Model, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    x = _as_batch(x)
    for layer in model.spec.layers:
        x = _apply(model, layer, x, training, rng)
    return x


def forward_capture(model: Model, x, capture_ids: Iterable[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
    """Inference forward that also returns the outputs of the requested layers.

    Ids may be raw layer ids or injection point names.
    """
    spec = model.spec
    wanted: dict[str, str] = {}
    for cid in capture_ids:
        idx = spec.layer_index(cid)
        wanted[spec.layers[idx].id] = cid
    x = _as_batch(x)
    captured: dict[str, Tensor] = {}
    for layer in spec.layers:
        x = _apply(model, layer, x, False, None)
        if layer.id in wanted:
            captured[wanted[layer.id]] = x
    return x, captured


def forward_from(model: Model, activation: Tensor, layer_id: str) -> Tensor:
    """Run the layers after ``layer_id`` (inference mode) on a captured activation."""
    start = model.spec.layer_index(layer_id) + 1
    x = activation
    for layer in model.spec.layers[start:]:
        x = _apply(model, layer, x, False, None)
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(model: Model, batch, chunk: int = 64) -> np.ndarray:
    """Class probabilities (float64 rows summing to one)."""
    batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float32)
    if batch.ndim == 3:
        batch = batch[None]
    out = [softmax(forward(model, batch[i:i + chunk]).data) for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros((0, 2))


# ---------------------------------------------------------------------------
# training


class Adam:
    """Adam on a list of tensors (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int | None


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, chunk: int = 64) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in inference mode."""
    probs = predict_proba(model, x, chunk)
    p = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    return float(-np.log(p).mean()), float((probs.argmax(1) == y).mean())


def train_model(model: Model, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
                config: TrainConfig) -> TrainResult:
    """Mini-batch Adam with early stopping on validation loss.

    The returned model carries the parameters of the best validation epoch.
    """
    x_tr, y_tr = np.asarray(train[0], np.float32), np.asarray(train[1], np.int64)
    x_va, y_va = np.asarray(val[0], np.float32), np.asarray(val[1], np.int64)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("train_model: empty training or validation set")
    model = copy.deepcopy(model)
    history: list[dict] = []
    if config.max_epochs == 0:
        return TrainResult(model, history, None)
    rng = np.random.default_rng(config.seed)
    params = model.trainable()
    opt = Adam(params, lr=config.lr)
    best = (np.inf, None, None)  # loss, epoch, snapshot
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x_tr))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            with Tape() as tape:
                tape.watch(*params)
                logits = forward(model, x_tr[idx], training=True, rng=rng)
                loss = T.softmax_cross_entropy(logits, y_tr[idx])
            grads = tape.backward(loss)
            opt.step([grads[p.id] for p in params])
            losses.append(float(loss.data) * len(idx))
        val_loss, val_acc = evaluate(model, x_va, y_va)
        history.append({"epoch": epoch, "train_loss": float(np.sum(losses) / len(x_tr)),
                        "val_loss": val_loss, "val_acc": val_acc})
        log.info("%s epoch %d train %.4f val %.4f acc %.3f", model.spec.name, epoch,
                 history[-1]["train_loss"], val_loss, val_acc)
        if val_loss < best[0]:
            best = (val_loss, epoch, _snapshot(model))
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    _restore(model, best[2])
    for p in params:
        p.requires_grad = False
    return TrainResult(model, history, best[1])


def _snapshot(model: Model):
    return ({lid: {k: t.data.copy() for k, t in d.items()} for lid, d in model.params.items()},
            {lid: {k: a.copy() for k, a in d.items()} for lid, d in model.buffers.items()})


def _restore(model: Model, snap) -> None:
    params, buffers = snap
    for lid, d in params.items():
        for k, a in d.items():
            model.params[lid][k].data = a
    for lid, d in buffers.items():
        for k, a in d.items():
            model.buffers[lid][k] = a


# ---------------------------------------------------------------------------
# weights file: "VWTS", u16 version, u32 layer count, then per layer
# u16 name length + name, u8 tensor count, per tensor u16 name length + name,
# u8 rank, u32 dims, raw little-endian float32

WEIGHTS_MAGIC = b"VWTS"
WEIGHTS_VERSION = 1


class WeightsFormatError(ValueError):
    pass


def _layer_tensors(model: Model, layer_id: str) -> dict[str, np.ndarray]:
    out = {k: t.data for k, t in model.params.get(layer_id, {}).items()}
    out.update(model.buffers.get(layer_id, {}))
    return out


def save_weights(model: Model, path) -> None:
    chunks = [WEIGHTS_MAGIC, struct.pack("<H", WEIGHTS_VERSION)]
    layers = [(layer.id, _layer_tensors(model, layer.id)) for layer in model.spec.layers]
    layers = [(lid, ts) for lid, ts in layers if ts]
    chunks.append(struct.pack("<I", len(layers)))
    for lid, tensors in layers:
        name = lid.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)) + name + struct.pack("<B", len(tensors)))
        for tname, arr in tensors.items():
            tn = tname.encode("utf-8")
            chunks.append(struct.pack("<H", len(tn)) + tn + struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightsFormatError(f"truncated weights file at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_weights_file(path) -> dict[str, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic, not a VWTS weights file")
    (version,) = r.unpack("<H")
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"{path}: unsupported weights version {version}")
    (n_layers,) = r.unpack("<I")
    layers: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(n_layers):
        (ln,) = r.unpack("<H")
        lid = r.take(ln).decode("utf-8")
        (nt,) = r.unpack("<B")
        tensors = {}
        for _ in range(nt):
            (tl,) = r.unpack("<H")
            tname = r.take(tl).decode("utf-8")
            (rank,) = r.unpack("<B")
            dims = r.unpack(f"<{rank}I") if rank else ()
            count = int(np.prod(dims)) if rank else 1
            raw = r.take(4 * count)
            tensors[tname] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        layers[lid] = tensors
    if r.pos != len(r.buf):
        raise WeightsFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return layers


def load_weights(spec: ModelSpec, path) -> Model:
    """Load a VWTS file against ``spec``; the whole file is validated before a model is built."""
    stored = read_weights_file(path)
    model = build_model(spec, seed=0)
    expected = [(layer.id, _layer_tensors(model, layer.id)) for layer in spec.layers]
    expected = [(lid, ts) for lid, ts in expected if ts]
    stored_ids = list(stored)
    for i, (lid, ts) in enumerate(expected):
        if lid not in stored:
            found = stored_ids[i] if i < len(stored_ids) else "<none>"
            raise WeightsFormatError(f"shape mismatch at layer {lid!r}: missing from file (file has {found!r} here)")
        for tname, arr in ts.items():
            got = stored[lid].get(tname)
            if got is None or got.shape != arr.shape:
                raise WeightsFormatError(f"shape mismatch at layer {lid!r} tensor {tname!r}: expected {arr.shape}, "
                                         f"file has {None if got is None else got.shape}")
    extra = set(stored_ids) - {lid for lid, _ in expected}
    if extra:
        raise WeightsFormatError(f"weights file has layers not in spec {spec.name}: {sorted(extra)}")
    for lid, ts in stored.items():
        for tname, arr in ts.items():
            if lid in model.buffers and tname in model.buffers[lid]:
                model.buffers[lid][tname] = arr.copy()
            else:
                model.params[lid][tname].data = arr.copy()
    return model
