"""Per-pixel patch-MLP segmentation model, softmax/MSP scoring and training.

Each pixel is classified from its (2r+1) x (2r+1) neighbourhood across all
feature channels; borders use edge replication. Hidden layers use tanh so
the input gradients used by MGU are smooth.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore
from .gradcore import Graph

log = logging.getLogger(__name__)

ANOMALY_SENTINEL = 65535
ANOMALY = -1  # decision-map value for pixels flagged as anomalous

CHECKPOINT_MAGIC = b"ASLM"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


@dataclass
class SegModel:
    channels: int
    num_classes: int
    patch_radius: int = 1
    layer_dims: tuple[int, ...] = (32, 32)
    params: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.channels < 1 or self.num_classes < 1 or self.patch_radius < 0:
            raise ValueError("channels and num_classes must be positive, patch_radius non-negative")
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("hidden widths must be positive")
        if self.params is None:
            self.params = np.zeros(self.num_params)
        self.params = np.array(self.params, dtype=np.float64).ravel()
        if self.params.size != self.num_params:
            raise ValueError(f"expected {self.num_params} parameters, got {self.params.size}")

    @property
    def input_width(self) -> int:
        return self.channels * (2 * self.patch_radius + 1) ** 2

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_width, *self.layer_dims, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def unflatten(self, flat=None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split the flat vector into (weight, bias) pairs; views, not copies.

        Parameter order, per layer from input to output: weight matrix of
        shape (fan_in, fan_out) in row-major order, then the bias vector.
        """
        flat = self.params if flat is None else flat
        out, pos = [], 0
        for i, o in self.layer_shapes:
            w = flat[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = flat[pos:pos + o].reshape(1, o)
            pos += o
            out.append((w, b))
        return out

    def copy(self) -> "SegModel":
        return SegModel(self.channels, self.num_classes, self.patch_radius, self.layer_dims, self.params.copy())


def init_model(channels: int, num_classes: int, patch_radius: int = 1,
               layer_dims=(32, 32), seed: int = 0) -> SegModel:
    """Glorot-uniform weights, zero biases."""
    model = SegModel(channels, num_classes, patch_radius, layer_dims)
    rng = np.random.default_rng(seed)
    for w, b in model.unflatten():
        limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
        b[...] = 0.0
    return model


# ----------------------------------------------------------------------------
# graph construction

@dataclass
class ModelGraph:
    graph: Graph
    source: int          # input node: image (C,H,W) or patch matrix (P, D)
    params: list[int]    # alternating weight / bias param nodes
    logits: int          # (P, N) logits node

    def bindings(self, model: SegModel, source) -> dict:
        binds = {self.source: source}
        for node, arr in zip(self.params, (a for pair in model.unflatten() for a in pair)):
            binds[node] = arr
        return binds

    def flat_grad(self, grads: gradcore.GradientBundle) -> np.ndarray:
        return np.concatenate([grads.parameter_grads[p].ravel() for p in self.params])


def build_graph(model: SegModel, source: str = "patches", graph: Graph | None = None) -> ModelGraph:
    """Graph computing (P, N) logits from either patches or a whole image."""
    g = Graph() if graph is None else graph
    if source == "image":
        x = g.input("image")
        h = g.patch_gather(x, model.patch_radius)
    elif source == "patches":
        x = g.input("patches")
        h = x
    else:
        raise ValueError(f"unknown source {source!r}")
    params = []
    shapes = model.layer_shapes
    for k, (i, o) in enumerate(shapes):
        w = g.param(f"w{k}", (i, o))
        b = g.param(f"b{k}", (1, o))
        params += [w, b]
        h = g.affine(h, w, b)
        if k < len(shapes) - 1:
            h = g.tanh(h)
    return ModelGraph(g, x, params, h)


def extract_patches(model: SegModel, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != model.channels:
        raise ValueError(f"image must be {model.channels} x H x W, got shape {image.shape}")
    return image.ravel()[gradcore.patch_indices(*image.shape, model.patch_radius)]


def patch_logits(model: SegModel, patches: np.ndarray) -> np.ndarray:
    mg = build_graph(model, "patches")
    return gradcore.forward(mg.graph, mg.bindings(model, patches))[mg.logits]


def predict_logits(model: SegModel, image: np.ndarray) -> np.ndarray:
    """N x H x W logit map."""
    _, h, w = np.shape(image)
    logits = patch_logits(model, extract_patches(model, image))
    return logits.T.reshape(model.num_classes, h, w)


def softmax_map(logits: np.ndarray) -> np.ndarray:
    """Softmax over the class axis (axis 0) of an N x ... array."""
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def predict_softmax(model: SegModel, image: np.ndarray) -> np.ndarray:
    return softmax_map(predict_logits(model, image))


def msp_score(softmax: np.ndarray) -> np.ndarray:
    """Maximum softmax probability per pixel."""
    return np.asarray(softmax).max(axis=0)


def anomaly_score(softmax: np.ndarray) -> np.ndarray:
    """1 - MSP: higher means more anomalous."""
    return 1.0 - msp_score(softmax)


def classify_with_threshold(softmax: np.ndarray, delta: float) -> np.ndarray:
    """Argmax class per pixel, or ``ANOMALY`` (-1) where MSP <= delta."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    softmax = np.asarray(softmax)
    decision = softmax.argmax(axis=0)  # first maximum wins ties
    return np.where(softmax.max(axis=0) <= delta, ANOMALY, decision)


# ----------------------------------------------------------------------------
# supervised training

@dataclass
class PixelSet:
    """Flattened training pixels: patches, labels and roles."""
    patches: np.ndarray
    labels: np.ndarray
    roles: np.ndarray

    def __len__(self):
        return len(self.labels)


def cross_entropy_graph(model: SegModel, labels, weights_mask) -> tuple[ModelGraph, int]:
    mg = build_graph(model, "patches")
    g = mg.graph
    safe = np.where(weights_mask, labels, 0)
    nll = g.neg(g.pick(g.log_softmax(mg.logits), safe))
    return mg, g.masked_mean(nll, weights_mask)


def mean_cross_entropy(model: SegModel, pixels: PixelSet, mask=None, chunk: int = 65536) -> float:
    mask = np.ones(len(pixels), bool) if mask is None else mask
    total, count = 0.0, int(mask.sum())
    for start in range(0, len(pixels), chunk):
        sl = slice(start, start + chunk)
        logits = patch_logits(model, pixels.patches[sl])
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        m = mask[sl]
        lab = np.where(m, pixels.labels[sl], 0)
        total += -logp[np.arange(len(lab)), lab][m].sum()
    return total / max(count, 1)


def batch_order(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatch index arrays; full-batch descent keeps corpus order."""
    if batch >= n:
        return [np.arange(n)]
    perm = rng.permutation(n)
    return [perm[i:i + batch] for i in range(0, n, batch)]


def sgd_step(model: SegModel, grad: np.ndarray, lr: float) -> None:
    model.params -= lr * grad


@dataclass
class TrainResult:
    model: SegModel
    loss_trace: list[float]
    initial_loss: float


def train_supervised(model: SegModel, scenes, epochs: int = 10, lr: float = 0.1,
                     batch: int = 256, seed: int = 0) -> TrainResult:
    """Plain SGD on mean pixel cross-entropy. Returns a trained copy."""
    from .scenes import pixel_set  # local import: scenes depends on this module

    if lr <= 0:
        raise ValueError("lr must be positive")
    pixels = pixel_set(scenes, model, require_known=True)
    return train_on_pixels(model, pixels, epochs, lr, batch, seed)


def train_on_pixels(model: SegModel, pixels: PixelSet, epochs: int, lr: float,
                    batch: int, seed: int) -> TrainResult:
    model = model.copy()
    rng = np.random.default_rng(seed)
    initial = mean_cross_entropy(model, pixels)
    trace = []
    for _ in range(epochs):
        for idx in batch_order(len(pixels), batch, rng):
            mask = np.ones(len(idx), bool)
            mg, loss = cross_entropy_graph(model, pixels.labels[idx], mask)
            _, grads = gradcore.value_and_grad(mg.graph, mg.bindings(model, pixels.patches[idx]), loss)
            sgd_step(model, mg.flat_grad(grads), lr)
        trace.append(mean_cross_entropy(model, pixels))
    if epochs > 0 and not trace[-1] < initial:
        raise RuntimeError(f"training did not reduce cross-entropy ({initial:.6f} -> {trace[-1]:.6f})")
    return TrainResult(model, trace, initial)


# ----------------------------------------------------------------------------
# checkpoint file

def save_checkpoint(path, model: SegModel) -> None:
    """Write the little-endian ``ASLM`` checkpoint format.

    Layout: b"ASLM", version byte, int32 C, N, patch_radius, hidden layer
    count, each hidden width, then every parameter as float64 in the order
    documented on :meth:`SegModel.unflatten`.
    """
    header = CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION])
    dims = [model.channels, model.num_classes, model.patch_radius, len(model.layer_dims), *model.layer_dims]
    payload = header + struct.pack(f"<{len(dims)}i", *dims) + model.params.astype("<f8").tobytes()
    Path(path).write_bytes(payload)


def load_checkpoint(path) -> SegModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(0, "bad magic, not an ASLM checkpoint")
    if len(data) < 5:
        raise FormatError(len(data), "truncated before version byte")
    if data[4] != CHECKPOINT_VERSION:
        raise FormatError(4, f"unsupported checkpoint version {data[4]}")
    pos = 5
    if len(data) < pos + 16:
        raise FormatError(len(data), "truncated header")
    c, n, r, layers = struct.unpack_from("<4i", data, pos)
    if c < 1 or n < 1 or r < 0 or not 0 <= layers <= 1024:
        raise FormatError(pos, f"invalid dimensions C={c} N={n} r={r} layers={layers}")
    pos += 16
    if len(data) < pos + 4 * layers:
        raise FormatError(len(data), "truncated layer widths")
    widths = struct.unpack_from(f"<{layers}i", data, pos)
    if any(w < 1 for w in widths):
        raise FormatError(pos, "non-positive layer width")
    pos += 4 * layers
    model = SegModel(c, n, r, widths)
    need = pos + 8 * model.num_params
    if len(data) < need:
        raise FormatError(len(data), f"truncated parameters, expected {need} bytes")
    if len(data) > need:
        raise FormatError(need, "trailing bytes after parameters")
    model.params = np.frombuffer(data, dtype="<f8", count=model.num_params, offset=pos).astype(np.float64)
    return model
