"""Dense MLP forward/backward, SGD with momentum, cosine schedule, RLNS checkpoints.

Arrays are float64 numpy matrices laid out row-major, one sample per row.
A layer computes ``y = x @ W + b`` with ``W`` of shape ``(in_width, out_width)``.
The activation is applied after every layer except the last; dropout, when
enabled, follows each hidden activation.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

ACTIVATIONS = ("relu", "none")

CHECKPOINT_MAGIC = b"RLNS"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TapeReuseError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, layer: int, what: str):
        super().__init__(f"non-finite {what} gradient in layer {layer}")
        self.layer = layer


class CheckpointError(ValueError):
    pass


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm. Accepts a vector or a matrix of rows."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / norms


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_width(self) -> int:
        return self.weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpParams:
    layers: list[Layer]
    activation: str = "relu"
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.bias.shape != (layer.out_width,):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} != ({layer.out_width},)")
            if i and self.layers[i - 1].out_width != layer.in_width:
                raise ShapeError(
                    f"layer {i}: input width {layer.in_width} does not chain with "
                    f"previous output width {self.layers[i - 1].out_width}"
                )

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].in_width] + [layer.out_width for layer in self.layers]

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    def copy(self) -> MlpParams:
        return MlpParams(
            [Layer(layer.weight.copy(), layer.bias.copy()) for layer in self.layers],
            self.activation,
            self.dropout_p,
        )

    def arrays(self) -> list[np.ndarray]:
        """Flat list of parameter arrays, weight then bias per layer."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def equals(self, other: MlpParams) -> bool:
        """Bit-exact equality of structure and values."""
        if (self.activation, self.dropout_p, self.widths) != (other.activation, other.dropout_p, other.widths):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_mlp(widths: list[int], rng: np.random.Generator, activation: str = "relu",
             dropout_p: float = 0.0) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if len(widths) < 2:
        raise ValueError("widths must list at least input and output width")
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(Layer(rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return MlpParams(layers, activation, dropout_p)


@dataclass
class GradTape:
    """Activations recorded by one forward pass."""

    params: MlpParams
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation output of each layer
    masks: list[np.ndarray | None]  # scaled dropout mask per hidden layer
    used: bool = False


def mlp_forward(params: MlpParams, x: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, GradTape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_width:
        raise ShapeError(f"input shape {x.shape} does not match MLP input width {params.in_width}")
    use_dropout = train_mode and params.dropout_p > 0
    if use_dropout and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    inputs, pre, masks = [], [], []
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        inputs.append(h)
        z = h @ layer.weight + layer.bias
        pre.append(z)
        if i == last:
            h = z
            masks.append(None)
            break
        h = np.maximum(z, 0.0) if params.activation == "relu" else z
        if use_dropout:
            keep = 1.0 - params.dropout_p
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    return h, GradTape(params, inputs, pre, masks)


def backward(tape: GradTape, output_grad: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Gradients ``[(dW, db), ...]`` per layer and the gradient w.r.t. the input."""
    if tape.used:
        raise TapeReuseError("backward already ran on this tape")
    expected = tape.pre[-1].shape
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != expected:
        raise ShapeError(f"output_grad shape {g.shape} != forward output shape {expected}")
    tape.used = True
    params = tape.params
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        if i != len(params.layers) - 1:
            if tape.masks[i] is not None:
                g = g * tape.masks[i]
            if params.activation == "relu":
                g = g * (tape.pre[i] > 0)
        layer = params.layers[i]
        grads[i] = (tape.inputs[i].T @ g, g.sum(axis=0))
        g = g @ layer.weight.T
    return grads, g


@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params: MlpParams, grads: list[tuple[np.ndarray, np.ndarray]], state: OptimState) -> MlpParams:
    """One SGD-with-momentum update, in place on ``params`` and ``state.velocity``.

    v <- momentum * v + grad + weight_decay * theta
    theta <- theta - lr * v
    """
    if len(grads) != len(params.layers):
        raise ShapeError(f"{len(grads)} gradient layers for {len(params.layers)} parameter layers")
    if not state.velocity:
        state.velocity = [np.zeros_like(a) for a in params.arrays()]
    # validate everything before touching any parameter
    for i, (layer, (dw, db)) in enumerate(zip(params.layers, grads)):
        for j, (theta, g, what) in enumerate(((layer.weight, dw, "weight"), (layer.bias, db, "bias"))):
            if g.shape != theta.shape:
                raise ShapeError(f"layer {i}: {what} gradient shape {g.shape} != {theta.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(i, what)
            if state.velocity[2 * i + j].shape != theta.shape:
                raise ShapeError(f"layer {i}: {what} velocity shape does not match parameter")
    for i, (layer, (dw, db)) in enumerate(zip(params.layers, grads)):
        for j, (theta, g) in enumerate(((layer.weight, dw), (layer.bias, db))):
            v = state.velocity[2 * i + j]
            v *= state.momentum
            v += g
            if state.weight_decay:
                v += state.weight_decay * theta
            theta -= state.learning_rate * v
    return params


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))


# --- RLNS checkpoints -------------------------------------------------------
#
# magic "RLNS", u8 version, u32 layer count, then per layer: u32 in_width,
# u32 out_width, in*out f64 weights (row-major), out f64 biases; then u8
# activation index and f64 dropout_p.  All little-endian.  A model checkpoint
# is a concatenation of such records (encoder first, projector second).

def write_mlp(params: MlpParams, f: BinaryIO) -> None:
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<BI", CHECKPOINT_VERSION, len(params.layers)))
    for layer in params.layers:
        f.write(struct.pack("<II", layer.in_width, layer.out_width))
        f.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    f.write(struct.pack("<Bd", ACTIVATIONS.index(params.activation), params.dropout_p))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def read_mlp(f: BinaryIO) -> MlpParams | None:
    """Read one RLNS record; ``None`` at a clean end of stream."""
    magic = f.read(4)
    if not magic:
        return None
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    version, n_layers = struct.unpack("<BI", _read_exact(f, 5))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if n_layers == 0:
        raise CheckpointError("checkpoint declares zero layers")
    layers = []
    for _ in range(n_layers):
        n_in, n_out = struct.unpack("<II", _read_exact(f, 8))
        w = np.frombuffer(_read_exact(f, 8 * n_in * n_out), dtype="<f8").reshape(n_in, n_out)
        b = np.frombuffer(_read_exact(f, 8 * n_out), dtype="<f8")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise CheckpointError("non-finite parameter in checkpoint")
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64)))
    act, p = struct.unpack("<Bd", _read_exact(f, 9))
    if act >= len(ACTIVATIONS):
        raise CheckpointError(f"unknown activation code {act}")
    try:
        return MlpParams(layers, ACTIVATIONS[act], p)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def mlp_to_bytes(params: MlpParams) -> bytes:
    buf = io.BytesIO()
    write_mlp(params, buf)
    return buf.getvalue()


def mlp_from_bytes(data: bytes) -> MlpParams:
    buf = io.BytesIO(data)
    params = read_mlp(buf)
    if params is None:
        raise CheckpointError("empty checkpoint")
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint record")
    return params
