"""Inverse material regressor: a compact CNN from makeup crop to parameters.

The network maps a square RGB crop to the 7-vector of normalized material
parameters.  Everything is plain numpy: strided conv blocks (im2col GEMM),
global average pooling, a dense head with a logistic squash so outputs always
land in [0, 1].  Backprop is implemented by hand, which keeps training
bit-reproducible and lets tests verify every layer's gradients against
central finite differences.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import DatasetManifest, load_dataset_arrays
from .geometry import DEFAULT_CROP_EXPANSION, FaceGeometry, Target, crop_region
from .image import ImageBuffer
from .params import GraphicsParams, NormalizedParams, denormalize

MODEL_MAGIC = b"MKUP"
MODEL_FORMAT_VERSION = 1
MODEL_VERSION_TAG = "cnn-reg-1"

# (out_channels, kernel, stride) per conv block; each block ends in ReLU.
DEFAULT_ARCHITECTURE = {
    "input_size": 64,
    "conv": [[24, 3, 2], [48, 3, 2], [96, 3, 2], [96, 3, 2]],
    "hidden": 96,
    "output_dim": 7,
}


class EncoderError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _Conv:
    """3x3-style strided convolution with same padding (kernel // 2)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng, dtype):
        fan_in = c_in * kernel * kernel
        limit = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-limit, limit, size=(c_out, c_in, kernel, kernel)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2

    def params(self):
        return [(self.w, self.gw), (self.b, self.gb)]

    def _cols(self, x: np.ndarray) -> tuple[np.ndarray, int, int]:
        b, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        sb, sc, sh, sw = xp.strides
        windows = np.lib.stride_tricks.as_strided(
            xp,
            shape=(b, c, oh, ow, k, k),
            strides=(sb, sc, sh * s, sw * s, sh, sw),
            writeable=False,
        )
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k * k)
        return np.ascontiguousarray(cols), oh, ow

    def forward(self, x: np.ndarray) -> np.ndarray:
        cols, oh, ow = self._cols(x)
        self._cols_cache = cols
        self._x_shape = x.shape
        self._out_hw = (oh, ow)
        wmat = self.w.reshape(self.w.shape[0], -1)
        out = cols @ wmat.T + self.b
        return out.transpose(0, 2, 1).reshape(x.shape[0], self.w.shape[0], oh, ow)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        b, c_out, oh, ow = grad.shape
        _, c_in, h, w = self._x_shape
        k, s, p = self.kernel, self.stride, self.pad
        g = grad.reshape(b, c_out, oh * ow).transpose(0, 2, 1)
        cols = self._cols_cache
        self.gw += (
            g.reshape(-1, c_out).T @ cols.reshape(-1, cols.shape[2])
        ).reshape(self.w.shape)
        self.gb += g.sum(axis=(0, 1))
        gcols = (g @ self.w.reshape(c_out, -1)).reshape(b, oh, ow, c_in, k, k)
        gcols = gcols.transpose(0, 3, 1, 2, 4, 5)  # (B, C, OH, OW, k, k)
        gxp = np.zeros((b, c_in, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += gcols[:, :, :, :, i, j]
        return gxp[:, :, p : p + h, p : p + w]


class _ReLU:
    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return np.where(self._mask, grad, np.zeros((), dtype=grad.dtype))


class _GlobalAvgPool:
    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._hw = x.shape[2] * x.shape[3]
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        scale = np.asarray(1.0 / self._hw, dtype=grad.dtype)
        return np.broadcast_to(
            (grad * scale)[:, :, None, None], self._shape
        ).copy()


class _Dense:
    def __init__(self, d_in: int, d_out: int, rng, dtype, scale: float = 6.0):
        limit = np.sqrt(scale / d_in)
        self.w = rng.uniform(-limit, limit, size=(d_in, d_out)).astype(dtype)
        self.b = np.zeros(d_out, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def params(self):
        return [(self.w, self.gw), (self.b, self.gb)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w + self.b

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.gw += self._x.T @ grad
        self.gb += grad.sum(axis=0)
        return grad @ self.w.T


class _Sigmoid:
    def params(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._y = _stable_sigmoid(x)
        return self._y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self._y * (1.0 - self._y)


class RegressorModel:
    """Architecture config plus live weight arrays."""

    def __init__(self, config: dict, seed: int = 0, dtype=np.float32):
        config = _normalize_config(config)
        self.config = config
        self.input_size = int(config["input_size"])
        self.output_dim = int(config["output_dim"])
        self.version = MODEL_VERSION_TAG
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        layers: list = []
        c_in = 3
        size = self.input_size
        for c_out, kernel, stride in config["conv"]:
            layers.append(_Conv(c_in, c_out, kernel, stride, rng, self.dtype))
            layers.append(_ReLU())
            c_in = c_out
            size = (size + 2 * (kernel // 2) - kernel) // stride + 1
            if size < 1:
                raise EncoderError("conv stack downsamples below 1 pixel")
        layers.append(_GlobalAvgPool())
        layers.append(_Dense(c_in, config["hidden"], rng, self.dtype))
        layers.append(_ReLU())
        layers.append(_Dense(config["hidden"], self.output_dim, rng, self.dtype, scale=1.0))
        layers.append(_Sigmoid())
        self.layers = layers

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        out = np.ascontiguousarray(x, dtype=self.dtype)
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward_batch(self, grad: np.ndarray) -> None:
        out = np.asarray(grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            out = layer.backward(out)

    def zero_grads(self) -> None:
        for layer in self.layers:
            for _, g in layer.params():
                g[...] = 0

    def parameters(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [pair for layer in self.layers for pair in layer.params()]

    def parameter_count(self) -> int:
        return sum(int(w.size) for w, _ in self.parameters())

    def weights(self) -> list[np.ndarray]:
        return [w for w, _ in self.parameters()]

    def set_weights(self, arrays: Sequence[np.ndarray]) -> None:
        own = self.weights()
        if len(own) != len(arrays):
            raise EncoderError("weight list does not match architecture")
        for dst, src in zip(own, arrays):
            if dst.shape != src.shape:
                raise EncoderError(f"weight shape mismatch: {dst.shape} vs {src.shape}")
            dst[...] = src.astype(self.dtype)


def _normalize_config(config: dict | None) -> dict:
    if config is None:
        config = DEFAULT_ARCHITECTURE
    merged = dict(DEFAULT_ARCHITECTURE)
    merged.update(config)
    merged["conv"] = [list(map(int, block)) for block in merged["conv"]]
    if int(merged["output_dim"]) != 7:
        raise EncoderError("output_dim must be 7")
    return merged


def init_model(config: dict | None = None, seed: int = 0, dtype=np.float32) -> RegressorModel:
    """Fan-in-scaled uniform initialization, deterministic per seed."""
    return RegressorModel(config, seed=seed, dtype=dtype)


def forward(model: RegressorModel, image: ImageBuffer) -> NormalizedParams:
    """Single-image inference; the image must already be model input size."""
    if image.width != model.input_size or image.height != model.input_size:
        raise EncoderError(
            f"image is {image.width}x{image.height}, model expects "
            f"{model.input_size}x{model.input_size}"
        )
    x = image.pixels.transpose(2, 0, 1)[None]
    out = model.forward_batch(x)[0]
    return NormalizedParams(np.clip(out.astype(np.float64), 0.0, 1.0))


def _as_matrix(vectors) -> np.ndarray:
    rows = [
        v.values if isinstance(v, NormalizedParams) else np.asarray(v, dtype=np.float64)
        for v in vectors
    ]
    return np.stack(rows).astype(np.float64)


def loss(predictions, labels) -> float:
    """Mean squared parameter-space error: average over samples of the squared
    Euclidean distance between predicted and true 7-vectors."""
    p = _as_matrix(predictions)
    y = _as_matrix(labels)
    if p.shape != y.shape:
        raise EncoderError(f"prediction/label shape mismatch: {p.shape} vs {y.shape}")
    if p.shape[0] == 0:
        raise EncoderError("empty batch")
    return float(((p - y) ** 2).sum(axis=1).mean())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    epochs: int = 60
    seed: int = 0
    optimizer: str = "adam"  # "adam" | "sgd"
    validation_fraction: float = 0.15

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise EncoderError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise EncoderError("batch_size and epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise EncoderError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise EncoderError("validation_fraction must be in (0, 1)")


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    train_loss: float
    val_mae: float
    val_mae_components: tuple[float, ...]


class _Sgd:
    def __init__(self, params, lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for w, g in self.params:
            w -= np.asarray(self.lr, dtype=w.dtype) * g


class _Adam:
    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(w) for w, _ in params]
        self.v = [np.zeros_like(w) for w, _ in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1**self.t
        correction2 = 1.0 - b2**self.t
        for (w, g), m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / correction1
            vhat = v / correction2
            w -= np.asarray(self.lr, dtype=w.dtype) * mhat / (np.sqrt(vhat) + self.eps)


def _predict_batched(model: RegressorModel, x: np.ndarray, batch: int = 256) -> np.ndarray:
    outs = [model.forward_batch(x[i : i + batch]) for i in range(0, len(x), batch)]
    return np.concatenate(outs, axis=0)


def train(
    model: RegressorModel,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest | None,
    config: TrainConfig,
) -> tuple[RegressorModel, list[TrainLogRow]]:
    """Seeded minibatch training; returns the best-validation-MAE weights.

    When no validation manifest is given, a seeded tail of the training set
    (``validation_fraction``) is held out.
    """
    if train_manifest.crop_size != model.input_size:
        raise EncoderError(
            f"crop size {train_manifest.crop_size} does not match model input "
            f"{model.input_size}"
        )
    x_train, y_train = load_dataset_arrays(train_manifest)
    if val_manifest is not None:
        x_val, y_val = load_dataset_arrays(val_manifest)
    else:
        order = np.random.default_rng(config.seed).permutation(len(x_train))
        n_val = max(1, int(len(x_train) * config.validation_fraction))
        val_idx, train_idx = order[:n_val], order[n_val:]
        x_val, y_val = x_train[val_idx], y_train[val_idx]
        x_train, y_train = x_train[train_idx], y_train[train_idx]
    if len(x_train) == 0:
        raise EncoderError("empty training set")

    y_train_t = y_train.astype(model.dtype)
    params = model.parameters()
    opt = (
        _Adam(params, config.learning_rate)
        if config.optimizer == "adam"
        else _Sgd(params, config.learning_rate)
    )
    shuffle_rng = np.random.default_rng(config.seed)
    n = len(x_train)
    log: list[TrainLogRow] = []
    best_mae = np.inf
    best_weights = [w.copy() for w in model.weights()]

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = x_train[idx]
            yb = y_train_t[idx]
            pred = model.forward_batch(xb)
            diff = pred - yb
            sq_sum += float((diff.astype(np.float64) ** 2).sum())
            model.zero_grads()
            model.backward_batch((2.0 / len(idx)) * diff)
            opt.step()
        train_loss = sq_sum / n
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(
                f"training loss became non-finite at epoch {epoch} "
                f"(lr={config.learning_rate}, optimizer={config.optimizer})"
            )
        val_pred = _predict_batched(model, x_val).astype(np.float64)
        comp_mae = np.abs(val_pred - y_val).mean(axis=0)
        val_mae = float(comp_mae.mean())
        log.append(
            TrainLogRow(
                epoch=epoch,
                train_loss=train_loss,
                val_mae=val_mae,
                val_mae_components=tuple(float(c) for c in comp_mae),
            )
        )
        if val_mae < best_mae:
            best_mae = val_mae
            best_weights = [w.copy() for w in model.weights()]

    best_model = RegressorModel(model.config, seed=0, dtype=model.dtype)
    best_model.set_weights(best_weights)
    return best_model, log


def write_train_log(log: Sequence[TrainLogRow], path: str | Path) -> None:
    lines = ["epoch,train_loss,val_mae"]
    lines += [f"{row.epoch},{row.train_loss:.8f},{row.val_mae:.8f}" for row in log]
    Path(path).write_text("\n".join(lines) + "\n")


def estimate(
    model: RegressorModel,
    reference: ImageBuffer,
    geometry: FaceGeometry,
    target: Target = Target.LIPS,
    expansion: float = DEFAULT_CROP_EXPANSION,
) -> GraphicsParams:
    """Crop the makeup region of a reference image and invert it to materials."""
    polygons = geometry.polygons_for(target)
    if not polygons:
        raise EncoderError(f"reference geometry has no {target.value} polygons")
    crop = crop_region(reference, polygons, expansion, model.input_size)
    return denormalize(forward(model, crop))


def save_model(model: RegressorModel, path: str | Path) -> None:
    """Binary container: magic, format version, JSON header, float32 LE blob."""
    header = json.dumps(
        {"config": model.config, "version_tag": model.version}, sort_keys=True
    ).encode()
    blob = b"".join(
        np.ascontiguousarray(w, dtype="<f4").tobytes() for w in model.weights()
    )
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)


def load_model(path: str | Path) -> RegressorModel:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MODEL_MAGIC:
        raise EncoderError("bad magic: not a regressor model file")
    (fmt_version,) = struct.unpack_from("<I", data, 4)
    if fmt_version != MODEL_FORMAT_VERSION:
        raise EncoderError(f"unsupported model file version {fmt_version}")
    (header_len,) = struct.unpack_from("<I", data, 8)
    header_end = 12 + header_len
    if len(data) < header_end:
        raise EncoderError("truncated model file (header)")
    try:
        header = json.loads(data[12:header_end].decode())
        config = header["config"]
    except (ValueError, KeyError) as exc:
        raise EncoderError(f"corrupt model header: {exc}") from exc
    model = RegressorModel(config, seed=0, dtype=np.float32)
    offset = header_end
    arrays = []
    for w in model.weights():
        nbytes = w.size * 4
        chunk = data[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise EncoderError("truncated model file (weights)")
        arrays.append(np.frombuffer(chunk, dtype="<f4").reshape(w.shape))
        offset += nbytes
    if offset != len(data):
        raise EncoderError("trailing bytes after weight blob")
    model.set_weights(arrays)
    model.version = header.get("version_tag", MODEL_VERSION_TAG)
    return model
