"""Small two-class CNN classifiers: construction, training, checkpoints.

A network is an ordered list of layers ending in a 2-way dense head. Exactly
one global-average-pooling layer separates the convolutional trunk from the
head; the tensor entering it holds the feature maps used for Grad-CAM.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .repro import blas_threads

N_CLASSES = 2
LAYER_KINDS = ("conv", "relu", "maxpool", "gap", "dense")


class SpecError(ValueError):
    """Invalid network description."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0  # conv channels or dense units
    kernel: int = 0  # conv kernel size or pooling window
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1

    def validate(self) -> None:
        kinds = [layer.kind for layer in self.layers]
        for k in kinds:
            if k not in LAYER_KINDS:
                raise SpecError(f"{self.name}: unknown layer kind {k!r}")
        if kinds.count("gap") != 1:
            raise SpecError(f"{self.name}: expected exactly one gap layer, found {kinds.count('gap')}")
        g = kinds.index("gap")
        if "conv" not in kinds[:g]:
            raise SpecError(f"{self.name}: no conv layer before gap")
        if any(k in ("conv", "maxpool") for k in kinds[g + 1:]):
            raise SpecError(f"{self.name}: spatial layers after gap")
        if "dense" in kinds[:g]:
            raise SpecError(f"{self.name}: dense layer before gap")
        if kinds[-1] != "dense" or self.layers[-1].out != N_CLASSES:
            raise SpecError(f"{self.name}: final layer must be dense with {N_CLASSES} outputs")
        self.feature_shape()

    @property
    def gap_index(self) -> int:
        return [layer.kind for layer in self.layers].index("gap")

    @property
    def is_gap_head(self) -> bool:
        """True when GAP feeds the output layer directly."""
        return self.gap_index == len(self.layers) - 2

    def feature_shape(self) -> tuple[int, int, int]:
        """Shape ``(n, x, y)`` of the maps entering the GAP layer."""
        c, (h, w) = self.in_channels, self.input_size
        for layer in self.layers[: self.gap_index]:
            if layer.kind == "conv":
                c = layer.out
                h = T.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
                w = T.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            elif layer.kind == "maxpool":
                h = (h - layer.kernel) // layer.stride + 1
                w = (w - layer.kernel) // layer.stride + 1
            if h < 1 or w < 1:
                raise SpecError(f"{self.name}: spatial size collapses to {h}x{w}")
        return c, h, w

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            name=d["name"],
            layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
            input_size=tuple(d["input_size"]),
            in_channels=d.get("in_channels", 1),
        )


def _trunk() -> tuple[LayerSpec, ...]:
    conv = lambda c: LayerSpec("conv", out=c, kernel=3, padding=1)  # noqa: E731
    pool = LayerSpec("maxpool", kernel=2, stride=2)
    relu = LayerSpec("relu")
    return (conv(8), relu, pool, conv(16), relu, pool, conv(32), relu)


def preset(name: str, input_size: int = 64) -> NetworkSpec:
    """Built-in architectures: ``gap-head-small`` and ``deep-head-small``."""
    if name == "gap-head-small":
        layers = _trunk() + (LayerSpec("gap"), LayerSpec("dense", out=N_CLASSES))
    elif name == "deep-head-small":
        layers = _trunk() + (
            LayerSpec("gap"),
            LayerSpec("dense", out=16),
            LayerSpec("relu"),
            LayerSpec("dense", out=N_CLASSES),
        )
    else:
        raise SpecError(f"unknown architecture preset {name!r}; choose from {PRESETS}")
    return NetworkSpec(name=name, layers=layers, input_size=(input_size, input_size))


PRESETS = ("gap-head-small", "deep-head-small")


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Network":
        return Network(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()})


def build_network(spec: NetworkSpec, seed: int, precision: str | None = None) -> Network:
    spec.validate()
    dtype = T.precision_dtype(precision)
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    c, units = spec.in_channels, None
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            fan_in = c * layer.kernel * layer.kernel
            params[f"{i}.weight"] = T.he_uniform(rng, (layer.out, c, layer.kernel, layer.kernel), fan_in, dtype)
            params[f"{i}.bias"] = np.zeros(layer.out, dtype=dtype)
            c = layer.out
        elif layer.kind == "gap":
            units = c
        elif layer.kind == "dense":
            params[f"{i}.weight"] = T.he_uniform(rng, (layer.out, units), units, dtype)
            params[f"{i}.bias"] = np.zeros(layer.out, dtype=dtype)
            units = layer.out
    return Network(spec, params)


# -- forward / backward -----------------------------------------------------------

@dataclass
class Activations:
    """Cached forward state for one image or a batch."""

    logits: np.ndarray
    inputs: list[np.ndarray]  # input to every layer, in order
    gap_index: int

    @property
    def features(self) -> np.ndarray:
        """Feature maps ``f^k`` entering GAP: ``(n, x, y)`` or ``(N, n, x, y)``."""
        return self.inputs[self.gap_index]


def _forward_batch(net: Network, x: np.ndarray) -> Activations:
    inputs = []
    h = x
    for i, layer in enumerate(net.spec.layers):
        inputs.append(h)
        if layer.kind == "conv":
            h = T.conv2d_forward(h, net.params[f"{i}.weight"], net.params[f"{i}.bias"], layer.stride, layer.padding)
        elif layer.kind == "relu":
            h = T.relu_forward(h)
        elif layer.kind == "maxpool":
            h = T.maxpool_forward(h, layer.kernel, layer.stride)
        elif layer.kind == "gap":
            h = T.gap_forward(h)
        elif layer.kind == "dense":
            h = T.dense_forward(h, net.params[f"{i}.weight"], net.params[f"{i}.bias"])
    return Activations(h, inputs, net.spec.gap_index)


def _backward(net: Network, acts: Activations, upstream: np.ndarray, stop: int = 0, param_grads: bool = True):
    """Backpropagate ``upstream`` (gradient w.r.t. logits) down to the input of layer ``stop``."""
    grads: dict[str, np.ndarray] = {}
    g = upstream
    for i in range(len(net.spec.layers) - 1, stop - 1, -1):
        layer, x = net.spec.layers[i], acts.inputs[i]
        if layer.kind == "conv":
            dx, dw, db = T.conv2d_backward(x, net.params[f"{i}.weight"], g, layer.stride, layer.padding)
            if param_grads:
                grads[f"{i}.weight"], grads[f"{i}.bias"] = dw, db
            g = dx
        elif layer.kind == "relu":
            g = T.relu_backward(x, g)
        elif layer.kind == "maxpool":
            g = T.maxpool_backward(x, g, layer.kernel, layer.stride)
        elif layer.kind == "gap":
            g = T.gap_backward(g, x.shape[-2], x.shape[-1])
        elif layer.kind == "dense":
            dx, dw, db = T.dense_backward(x, net.params[f"{i}.weight"], g)
            if param_grads:
                grads[f"{i}.weight"], grads[f"{i}.bias"] = dw, db
            g = dx
    return g, grads


def _to_input(images: np.ndarray, dtype) -> np.ndarray:
    """uint8 ``(N, H, W)`` or ``(H, W)`` rasters -> ``(N, 1, H, W)`` floats in [-1, 1]."""
    x = np.asarray(images)
    if x.dtype == np.uint8:
        x = x.astype(dtype) / dtype.type(127.5) - dtype.type(1)
    else:
        x = x.astype(dtype, copy=False)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def forward(net: Network, image: np.ndarray) -> Activations:
    """Forward one image ``(1, H, W)`` (float) or ``(H, W)`` (float or uint8)."""
    x = np.asarray(image)
    if x.ndim == 2:
        x = _to_input(x, net.dtype)[0]
    elif x.dtype == np.uint8:
        x = _to_input(x[0], net.dtype)[0]
    x = x.astype(net.dtype, copy=False)
    expected = (net.spec.in_channels, *net.spec.input_size)
    if x.shape != expected:
        raise T.ShapeError(f"image shape {x.shape} != network input {expected}")
    acts = _forward_batch(net, x)
    acts.logits = np.asarray(acts.logits)
    return acts


def grad_wrt_feature_maps(net: Network, acts: Activations, c: int) -> np.ndarray:
    """Exact gradient of logit ``Y^c`` w.r.t. every element of the GAP input maps."""
    if c not in range(N_CLASSES):
        raise ValueError(f"class index must be 0 or 1, got {c}")
    seed = np.zeros_like(acts.logits)
    seed[..., c] = 1
    g, _ = _backward(net, acts, seed, stop=acts.gap_index, param_grads=False)
    return g


def loss_and_grads(net: Network, x: np.ndarray, labels: np.ndarray) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean cross-entropy over a batch ``x`` of shape ``(N, C, H, W)`` plus parameter gradients."""
    acts = _forward_batch(net, x)
    loss, dlogits = T.softmax_cross_entropy(acts.logits, labels)
    _, grads = _backward(net, acts, dlogits.astype(net.dtype, copy=False))
    return loss, grads, acts.logits


# -- training ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    patience: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    split: float = 0.8
    precision: str | None = None  # None: $CAMSEG_PRECISION, else single

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError(f"split fraction must be in (0, 1), got {self.split}")
        if self.epochs < 1 or self.patience < 1 or self.patience > self.epochs:
            raise ValueError(f"need 1 <= patience <= epochs, got patience={self.patience}, epochs={self.epochs}")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        T.precision_dtype(self.precision)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, p in params.items():
            g = grads[k].astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(p.dtype, copy=False)


def stratified_split(labels: Sequence[int], fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class split into sorted ``(train_idx, val_idx)``."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n_train = int(round(fraction * len(idx)))
        n_train = min(max(n_train, 1), len(idx) - 1) if len(idx) > 1 else len(idx)
        train.extend(idx[:n_train])
        val.extend(idx[n_train:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(val, dtype=int))


def _stack(dataset, dtype) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([np.asarray(s.image) for s in dataset])
    labels = np.array([s.label for s in dataset], dtype=int)
    return _to_input(images, dtype), labels


def predict(net: Network, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = [_forward_batch(net, x[i:i + batch_size]).logits for i in range(0, len(x), batch_size)]
    return np.concatenate(out).argmax(axis=1)


def evaluate(net: Network, dataset) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x, y = _stack(dataset, net.dtype)
    with blas_threads():
        return float(np.mean(predict(net, x) == y))


@dataclass
class Checkpoint:
    spec: NetworkSpec
    weights: dict[str, np.ndarray]
    best_val_acc: float
    best_epoch: int
    history: dict[str, list[float]] = field(default_factory=dict)
    seed: int = 0
    val_ids: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def network(self) -> Network:
        return Network(self.spec, {k: v.copy() for k, v in self.weights.items()})


def train(net: Network, dataset, config: TrainConfig, split: tuple[Sequence[int], Sequence[int]] | None = None) -> Checkpoint:
    """Mini-batch Adam with per-epoch validation and early stopping.

    ``net`` is updated in place and ends holding the best-validation weights.
    ``split`` optionally fixes ``(train_idx, val_idx)``; otherwise a stratified
    seeded split is drawn from ``config``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    labels = np.array([s.label for s in dataset], dtype=int)
    if set(np.unique(labels)) != {0, 1}:
        raise ValueError(f"dataset must contain both classes 0 and 1, found {sorted(set(labels.tolist()))}")
    if split is None:
        split = stratified_split(labels, config.split, config.seed)
    train_idx, val_idx = (np.asarray(s, dtype=int) for s in split)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("train and validation partitions must both be non-empty")

    dtype = T.precision_dtype(config.precision)
    if net.dtype != dtype:
        net.params = {k: v.astype(dtype) for k, v in net.params.items()}
    x_all, y_all = _stack(dataset, dtype)
    x_tr, y_tr = x_all[train_idx], y_all[train_idx]
    x_va, y_va = x_all[val_idx], y_all[val_idx]

    rng = np.random.default_rng(config.seed)
    opt = Adam(net.params, lr=config.learning_rate)
    history = {"loss": [], "acc": [], "val_acc": []}
    best_acc, best_epoch, best_params = -1.0, -1, None
    stale = 0
    with blas_threads():
        for epoch in range(config.epochs):
            order = rng.permutation(len(x_tr))
            total, correct = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                b = order[start:start + config.batch_size]
                loss, grads, logits = loss_and_grads(net, x_tr[b], y_tr[b])
                opt.step(net.params, grads)
                total += loss * len(b)
                correct += int(np.sum(logits.argmax(axis=1) == y_tr[b]))
            val_acc = float(np.mean(predict(net, x_va) == y_va))
            history["loss"].append(total / len(order))
            history["acc"].append(correct / len(order))
            history["val_acc"].append(val_acc)
            if val_acc > best_acc:
                best_acc, best_epoch, stale = val_acc, epoch, 0
                best_params = {k: v.copy() for k, v in net.params.items()}
            else:
                stale += 1
                if stale >= config.patience:
                    break
    net.params = best_params
    ids = [getattr(s, "id", str(i)) for i, s in enumerate(dataset)]
    return Checkpoint(
        spec=net.spec,
        weights={k: v.copy() for k, v in best_params.items()},
        best_val_acc=best_acc,
        best_epoch=best_epoch,
        history=history,
        seed=config.seed,
        val_ids=[ids[i] for i in val_idx],
    )


# -- checkpoint files --------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"CAMSEGCK"
#   4 bytes   uint32 format version
#   8 bytes   uint64 header length L
#   L bytes   UTF-8 JSON header: {"spec", "meta", "tensors": [{name, dtype, shape, offset, nbytes}]}
#   ...       raw C-order tensor blobs; offsets are relative to the end of the header

CHECKPOINT_MAGIC = b"CAMSEGCK"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors, blobs, offset = [], [], 0
    for name in sorted(ckpt.weights):
        arr = np.ascontiguousarray(ckpt.weights[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes()
        tensors.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "spec": ckpt.spec.to_dict(),
        "meta": {
            "best_val_acc": ckpt.best_val_acc,
            "best_epoch": ckpt.best_epoch,
            "history": ckpt.history,
            "seed": ckpt.seed,
            "val_ids": ckpt.val_ids,
            "extra": ckpt.extra,
        },
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for data in blobs:
            f.write(data)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise CheckpointFormatError(f"{path}: truncated preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    body_start = _PREAMBLE.size + hlen
    if len(raw) < body_start:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREAMBLE.size:body_start].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
        meta = header["meta"]
        weights = {}
        for t in header["tensors"]:
            lo = body_start + t["offset"]
            hi = lo + t["nbytes"]
            if hi > len(raw):
                raise CheckpointFormatError(f"{path}: truncated tensor {t['name']}")
            arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(t["dtype"])).reshape(t["shape"])
            weights[t["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    except CheckpointFormatError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt header ({e})") from e
    return Checkpoint(
        spec=spec,
        weights=weights,
        best_val_acc=meta["best_val_acc"],
        best_epoch=meta["best_epoch"],
        history=meta["history"],
        seed=meta["seed"],
        val_ids=meta["val_ids"],
        extra=meta.get("extra", {}),
    )
