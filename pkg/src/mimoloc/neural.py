"""From-scratch convolutional localizer on angle-delay profiles.

Minimal layer zoo (valid/same conv, 2x2 max pool, relu, flatten, dense,
softmax), batched float64 forward/backward, plain mini-batch SGD with
optional momentum. Two heads: direct 2D regression on positions normalized
to the unit square, or classification over coarse cells followed by a
similarity-weighted k-nearest refinement inside the predicted cell.

No autograd framework on purpose: every backward pass is written against
the matching forward and is held to finite-difference checks in the tests.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .adp import similarity
from .errors import DimensionMismatch, DivergedLoss, FormatError, VersionError
from .fingerprint import FingerprintDb

CHECKPOINT_MAGIC = b"NNCK"
CHECKPOINT_VERSION = 1


# --- layers ---------------------------------------------------------------

class Conv2d:
    """2D convolution, stride 1, 'valid' (default) or 'same' zero padding."""

    def __init__(self, out_channels: int, kernel_size: int, padding: str = "valid"):
        if padding not in ("valid", "same"):
            raise ValueError("padding must be 'valid' or 'same'")
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        self.w = None  # (out, in, k, k)
        self.b = None  # (out,)
        self.gw = None
        self.gb = None
        self._cache = None

    def spec(self) -> dict:
        return {
            "kind": "conv2d",
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "padding": self.padding,
        }

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k = self.kernel_size
        if self.padding == "valid":
            if h < k or w < k:
                raise DimensionMismatch(
                    f"conv kernel {k} larger than input {h}x{w}"
                )
            return (self.out_channels, h - k + 1, w - k + 1)
        return (self.out_channels, h, w)

    def init_params(self, in_shape, rng: np.random.Generator):
        c = in_shape[0]
        k = self.kernel_size
        scale = 1.0 / np.sqrt(c * k * k)
        self.w = rng.uniform(-scale, scale, size=(self.out_channels, c, k, k))
        self.b = np.zeros(self.out_channels)

    def parameters(self):
        return [self.w, self.b]

    def gradients(self):
        return [self.gw, self.gb]

    def _pad(self, x):
        if self.padding == "valid":
            return x, (0, 0)
        k = self.kernel_size
        lo, hi = (k - 1) // 2, k // 2
        return np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi))), (lo, hi)

    def forward(self, x: np.ndarray) -> np.ndarray:
        xp, pad = self._pad(x)
        k = self.kernel_size
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        b, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * k * k)
        wmat = self.w.reshape(self.out_channels, -1)
        y = cols @ wmat.T + self.b
        self._cache = (xp.shape, pad, cols)
        return y.transpose(0, 3, 1, 2)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xp_shape, pad, cols = self._cache
        k = self.kernel_size
        b, _, ho, wo = grad.shape
        gt = grad.transpose(0, 2, 3, 1)  # (B, H', W', out)
        wmat = self.w.reshape(self.out_channels, -1)
        self.gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(
            self.w.shape
        )
        self.gb = gt.sum(axis=(0, 1, 2))
        dcols = (gt @ wmat).reshape(b, ho, wo, xp_shape[1], k, k)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(
                    0, 3, 1, 2
                )
        lo, hi = pad
        if hi == 0 and lo == 0:
            return dxp
        h, w = xp_shape[2] - lo - hi, xp_shape[3] - lo - hi
        return dxp[:, :, lo:lo + h, lo:lo + w]


class MaxPool2x2:
    """2x2 max pooling, stride 2; odd trailing rows/cols are dropped."""

    def __init__(self):
        self._cache = None

    def spec(self) -> dict:
        return {"kind": "maxpool2x2"}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise DimensionMismatch(f"cannot pool {h}x{w} input")
        return (c, h // 2, w // 2)

    def init_params(self, in_shape, rng):
        pass

    def parameters(self):
        return []

    def gradients(self):
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        wins = (
            x[:, :, : h2 * 2, : w2 * 2]
            .reshape(b, c, h2, 2, w2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h2, w2, 4)
        )
        idx = wins.argmax(axis=-1)  # first max wins ties
        y = np.take_along_axis(wins, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x_shape, idx = self._cache
        b, c, h, w = x_shape
        h2, w2 = h // 2, w // 2
        dwins = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(dwins, idx[..., None], grad[..., None], axis=-1)
        dx = np.zeros(x_shape)
        dx[:, :, : h2 * 2, : w2 * 2] = (
            dwins.reshape(b, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h2 * 2, w2 * 2)
        )
        return dx


class Relu:
    def __init__(self):
        self._mask = None

    def spec(self) -> dict:
        return {"kind": "relu"}

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, in_shape, rng):
        pass

    def parameters(self):
        return []

    def gradients(self):
        return []

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return grad * self._mask


class Flatten:
    def __init__(self):
        self._shape = None

    def spec(self) -> dict:
        return {"kind": "flatten"}

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init_params(self, in_shape, rng):
        pass

    def parameters(self):
        return []

    def gradients(self):
        return []

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense:
    def __init__(self, out_width: int):
        self.out_width = out_width
        self.w = None  # (out, in)
        self.b = None
        self.gw = None
        self.gb = None
        self._x = None

    def spec(self) -> dict:
        return {"kind": "dense", "out_width": self.out_width}

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise DimensionMismatch("dense layer needs a flat input")
        return (self.out_width,)

    def init_params(self, in_shape, rng):
        scale = 1.0 / np.sqrt(in_shape[0])
        self.w = rng.uniform(-scale, scale, size=(self.out_width, in_shape[0]))
        self.b = np.zeros(self.out_width)

    def parameters(self):
        return [self.w, self.b]

    def gradients(self):
        return [self.gw, self.gb]

    def forward(self, x):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, grad):
        self.gw = grad.T @ self._x
        self.gb = grad.sum(axis=0)
        return grad @ self.w


class Softmax:
    def __init__(self):
        self._p = None

    def spec(self) -> dict:
        return {"kind": "softmax"}

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise DimensionMismatch("softmax needs a flat input")
        return in_shape

    def init_params(self, in_shape, rng):
        pass

    def parameters(self):
        return []

    def gradients(self):
        return []

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self._p = e / e.sum(axis=1, keepdims=True)
        return self._p

    def backward(self, grad):
        p = self._p
        return p * (grad - (grad * p).sum(axis=1, keepdims=True))


_LAYER_KINDS = {
    "conv2d": lambda s: Conv2d(s["out_channels"], s["kernel_size"], s["padding"]),
    "maxpool2x2": lambda s: MaxPool2x2(),
    "relu": lambda s: Relu(),
    "flatten": lambda s: Flatten(),
    "dense": lambda s: Dense(s["out_width"]),
    "softmax": lambda s: Softmax(),
}


# --- model ----------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierGrid:
    """Coarse cell partition of the database extent for the classifier head."""

    n_rows: int
    n_cols: int

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def cell_of(self, position, extent) -> int:
        x0, y0, x1, y1 = extent
        dx = (x1 - x0) / self.n_cols if x1 > x0 else 1.0
        dy = (y1 - y0) / self.n_rows if y1 > y0 else 1.0
        col = min(int((position[0] - x0) / dx), self.n_cols - 1)
        row = min(int((position[1] - y0) / dy), self.n_rows - 1)
        return max(0, row) * self.n_cols + max(0, col)


@dataclass(frozen=True)
class Head:
    """Output head: 'regression' to 2D coordinates or 'classification'
    over a ClassifierGrid of cells."""

    kind: str
    cells: ClassifierGrid | None = None

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValueError("head kind must be regression or classification")
        if self.kind == "classification" and self.cells is None:
            raise ValueError("classification head needs a ClassifierGrid")

    @property
    def out_width(self) -> int:
        return 2 if self.kind == "regression" else self.cells.n_cells


class Model:
    """Layer stack plus head bookkeeping and position normalization."""

    def __init__(self, layers, input_shape, head: Head, seed: int,
                 normalize_input: bool = False):
        self.layers = layers
        self.input_shape = tuple(input_shape)  # (1, n_t, n_c)
        self.head = head
        self.seed = seed
        self.normalize_input = normalize_input
        self.pos_offset = np.zeros(2)
        self.pos_scale = np.ones(2)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def gradients(self):
        return [g for layer in self.layers for g in layer.gradients()]

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1:] != self.input_shape:
            raise DimensionMismatch(
                f"input shape {x.shape[1:]}, expected {self.input_shape}"
            )
        if self.normalize_input:
            peak = np.abs(x).max(axis=(1, 2, 3), keepdims=True)
            x = np.divide(x, peak, out=x.astype(float).copy(), where=peak > 0)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward_batch(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def normalize_positions(self, positions: np.ndarray) -> np.ndarray:
        return (positions - self.pos_offset) / self.pos_scale

    def denormalize_positions(self, coords: np.ndarray) -> np.ndarray:
        return coords * self.pos_scale + self.pos_offset


def build_model(
    layer_specs: list[dict],
    input_shape: tuple[int, int, int],
    head: Head,
    seed: int = 0,
    normalize_input: bool = False,
) -> Model:
    """Instantiate a model and validate the whole dimension chain.

    Raises:
        DimensionMismatch: if shapes do not chain, or the final width does
            not match the head.
    """
    layers = []
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    for spec in layer_specs:
        kind = spec.get("kind")
        if kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        layer = _LAYER_KINDS[kind](spec)
        out = layer.out_shape(shape)  # validates
        layer.init_params(shape, rng)
        layers.append(layer)
        shape = out
    if shape != (head.out_width,):
        raise DimensionMismatch(
            f"stack emits {shape}, head needs ({head.out_width},)"
        )
    return Model(layers, input_shape, head, seed, normalize_input)


def default_localizer_spec(n_t: int, n_c: int, head: Head) -> list[dict]:
    """Same-padded conv blocks with a single pool, then dense layers.

    Same padding with one pool keeps most of the spatial detail of the
    profile alive into the dense layers. At desk scale the informative
    part of a profile is the subpixel sidelobe structure around a couple
    of peaks, and stacked valid convolutions and pools average exactly
    that away (fits stall around twice the grid spacing).
    """
    spec: list[dict] = [
        {"kind": "conv2d", "out_channels": 8, "kernel_size": 3,
         "padding": "same"},
        {"kind": "relu"},
    ]
    if n_t >= 2 and n_c >= 2:
        spec.append({"kind": "maxpool2x2"})
    spec += [
        {"kind": "conv2d", "out_channels": 16, "kernel_size": 3,
         "padding": "same"},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "out_width": 128},
        {"kind": "relu"},
        {"kind": "dense", "out_width": head.out_width},
    ]
    if head.kind == "classification":
        spec.append({"kind": "softmax"})
    return spec


def forward(model: Model, adp: np.ndarray) -> np.ndarray:
    """Single-profile inference.

    Regression heads return the denormalized 2D position estimate;
    classification heads return the cell probability vector.
    """
    x = np.asarray(adp, dtype=np.float64)[None, None, :, :]
    out = model.forward_batch(x)[0]
    if model.head.kind == "regression":
        return model.denormalize_positions(out)
    return out


# --- training -------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0


def _loss_and_grad(model: Model, x, y):
    out = model.forward_batch(x)
    b = len(x)
    if model.head.kind == "regression":
        diff = out - y
        loss = float(np.sum(diff * diff) / b)
        model.backward_batch(2.0 * diff / b)
    else:
        # the stack ends in Softmax; cross-entropy gradient through it is
        # (p - onehot), pushed through the softmax backward as logits grad
        p = out
        eps = 1e-12
        loss = float(-np.mean(np.log(p[np.arange(b), y] + eps)))
        grad_logits = p.copy()
        grad_logits[np.arange(b), y] -= 1.0
        grad_logits /= b
        # invert the softmax layer: feed the logits-space gradient around it
        softmax = model.layers[-1]
        if not isinstance(softmax, Softmax):
            raise DimensionMismatch("classification stack must end in softmax")
        grad = grad_logits
        for layer in reversed(model.layers[:-1]):
            grad = layer.backward(grad)
    return loss


def training_data(model: Model, db: FingerprintDb):
    """(inputs, targets) for a database, excluding zero-profile points."""
    keep = ~db.zero_flags
    x = db.adps[keep].astype(np.float64)[:, None, :, :]
    if model.head.kind == "regression":
        y = model.normalize_positions(db.positions[keep])
    else:
        extent = db.grid.extent()
        y = np.array(
            [model.head.cells.cell_of(p, extent) for p in db.positions[keep]],
            dtype=int,
        )
    return x, y


def train(model: Model, db: FingerprintDb, cfg: TrainConfig) -> list[float]:
    """Mini-batch SGD over the fingerprint database.

    Sets the model's position normalization from the database grid, then
    runs seeded epochs of shuffled mini-batches. Returns the per-epoch mean
    loss curve.

    Raises:
        DivergedLoss: on the first non-finite batch loss.
    """
    extent = db.grid.extent()
    model.pos_offset = np.array([extent[0], extent[1]])
    model.pos_scale = np.array(
        [max(extent[2] - extent[0], 1e-12), max(extent[3] - extent[1], 1e-12)]
    )
    x, y = training_data(model, db)
    n = len(x)
    if n == 0:
        raise ValueError("database has no usable fingerprints")
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(p) for p in model.parameters()]
    curve = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            # overflow here just means the loss is about to be caught below
            with np.errstate(over="ignore", invalid="ignore"):
                loss = _loss_and_grad(model, x[sel], y[sel])
            if not np.isfinite(loss):
                raise DivergedLoss(f"loss became {loss}")
            total += loss * len(sel)
            params = model.parameters()
            grads = model.gradients()
            for i, (p, g) in enumerate(zip(params, grads)):
                if cfg.momentum > 0.0:
                    velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * g
                    p += velocity[i]
                else:
                    p -= cfg.learning_rate * g
        curve.append(total / n)
    return curve


# --- classification + weighted k-nearest refinement -----------------------

class WknnResult(NamedTuple):
    position: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    used_fallback: bool


def classify_then_wknn(
    model: Model, adp: np.ndarray, db: FingerprintDb, k: int = 3
) -> WknnResult:
    """Pick the most likely cell, then fuse the k most similar prints in it.

    Weights are the similarities normalized to sum to one, so the estimate
    stays inside the convex hull of the selected fingerprints. A predicted
    cell with no usable fingerprint falls back to a whole-database search
    (flagged in the result). A zero total similarity degrades to uniform
    weights.
    """
    probs = forward(model, adp)
    cell = int(np.argmax(probs))
    extent = db.grid.extent()
    usable = np.flatnonzero(~db.zero_flags)
    members = np.array(
        [i for i in usable if model.head.cells.cell_of(db.positions[i], extent) == cell],
        dtype=int,
    )
    used_fallback = False
    if len(members) == 0:
        members = usable
        used_fallback = True
    sims = np.array([similarity(adp, db.adps[i]) for i in members])
    order = np.lexsort((members, -sims))[: min(k, len(members))]
    chosen = members[order]
    w = sims[order]
    total = w.sum()
    w = w / total if total > 0 else np.full(len(w), 1.0 / len(w))
    position = w @ db.positions[chosen]
    return WknnResult(position, chosen, w, used_fallback)


# --- localizer adapters ----------------------------------------------------

class RegressionLocalizer:
    """Callable adp -> position using a regression-head model.

    Outputs are clipped to the extent the model was fingerprinted on. A
    small network fed a profile far from anything it saw in training can
    extrapolate to coordinates several boxes away, and no deployment would
    report a fix outside the surveyed area.
    """

    def __init__(self, model: Model):
        if model.head.kind != "regression":
            raise ValueError("needs a regression head")
        self.model = model

    def __call__(self, adp: np.ndarray) -> np.ndarray:
        position = forward(self.model, adp)
        low = self.model.pos_offset
        return np.clip(position, low, low + self.model.pos_scale)


class ClassifierWknnLocalizer:
    """Callable adp -> position using cell classification + refinement."""

    def __init__(self, model: Model, db: FingerprintDb, k: int = 3):
        if model.head.kind != "classification":
            raise ValueError("needs a classification head")
        self.model = model
        self.db = db
        self.k = k

    def __call__(self, adp: np.ndarray) -> np.ndarray:
        return classify_then_wknn(self.model, adp, self.db, self.k).position


# --- checkpoints -----------------------------------------------------------

def save_model(model: Model, path) -> None:
    """Self-describing checkpoint: JSON header + little-endian f32 blobs."""
    header = {
        "layer_specs": [layer.spec() for layer in model.layers],
        "input_shape": list(model.input_shape),
        "head": {
            "kind": model.head.kind,
            "cells": (
                [model.head.cells.n_rows, model.head.cells.n_cols]
                if model.head.cells
                else None
            ),
        },
        "seed": model.seed,
        "normalize_input": model.normalize_input,
        "pos_offset": [float(v) for v in model.pos_offset],
        "pos_scale": [float(v) for v in model.pos_scale],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for p in model.parameters():
            fh.write(p.astype("<f4").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    cells = header["head"]["cells"]
    head = Head(
        kind=header["head"]["kind"],
        cells=ClassifierGrid(cells[0], cells[1]) if cells else None,
    )
    model = build_model(
        header["layer_specs"],
        tuple(header["input_shape"]),
        head,
        seed=header["seed"],
        normalize_input=header["normalize_input"],
    )
    model.pos_offset = np.array(header["pos_offset"])
    model.pos_scale = np.array(header["pos_scale"])
    offset = 10 + hlen
    for p in model.parameters():
        n = p.size * 4
        if offset + n > len(data):
            raise FormatError("checkpoint parameter blob shorter than declared")
        vals = np.frombuffer(data[offset:offset + n], dtype="<f4")
        p[...] = vals.reshape(p.shape).astype(np.float64)
        offset += n
    if offset != len(data):
        raise FormatError("trailing bytes after checkpoint parameters")
    return model
