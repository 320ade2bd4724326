"""Dense featurizer + linear classifier with hand-written backprop.

A model is ``classifier(featurizer(x))``: zero or more dense layers (ReLU or
identity) followed by one dense layer emitting K logits.  Everything is float64
numpy; parameters are plain arrays so a model is cheap to copy and snapshot.
"""

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("identity", "relu")
CHECKPOINT_MAGIC = b"FMIM"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Dense:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"

    @property
    def shape(self):
        return self.W.shape

    def copy(self):
        return Dense(self.W.copy(), self.b.copy(), self.activation)


@dataclass
class ModelParams:
    featurizer: list
    classifier: Dense

    def __post_init__(self):
        layers = self.layers
        for a, b in zip(layers, layers[1:]):
            if a.W.shape[0] != b.W.shape[1]:
                raise ShapeError(f"layer sizes do not chain: {a.W.shape} -> {b.W.shape}")
        if self.classifier.W.shape[0] < 2:
            raise ShapeError("need at least two classes")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.b.shape != (layer.W.shape[0],):
                raise ShapeError("bias does not match weight rows")

    @property
    def layers(self):
        return [*self.featurizer, self.classifier]

    @property
    def n_in(self):
        return self.layers[0].W.shape[1]

    @property
    def K(self):
        return self.classifier.W.shape[0]

    @property
    def architecture(self):
        return (self.n_in, *(layer.W.shape[0] for layer in self.featurizer), self.K)

    def copy(self):
        return ModelParams([layer.copy() for layer in self.featurizer], self.classifier.copy())

    def arrays(self):
        """Parameter arrays in a fixed order (W, b per layer)."""
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out


def init_model(n_in, hidden, K, rng, activation="relu"):
    """He-normal weights (variance 2/fan_in), zero biases."""
    sizes = [n_in, *hidden, K]
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        W = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        layers.append(Dense(W, np.zeros(fan_out), activation))
    clf = layers.pop()
    clf.activation = "identity"
    return ModelParams(layers, clf)


def zeros_like(model):
    return ModelParams(
        [Dense(np.zeros_like(l.W), np.zeros_like(l.b), l.activation) for l in model.featurizer],
        Dense(np.zeros_like(model.classifier.W), np.zeros_like(model.classifier.b)),
    )


def _check_input(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_in:
        raise ShapeError(f"input has shape {X.shape}, model expects (n, {model.n_in})")
    return X


def _forward(model, X):
    acts = [X]
    pre = []
    h = X
    for layer in model.layers:
        z = h @ layer.W.T + layer.b
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    return acts, pre


def forward(model, X):
    """Logits, shape (n, K)."""
    return _forward(model, _check_input(model, X))[0][-1]


def features(model, X):
    """Output of the featurizer (the input itself for a linear model)."""
    h = _check_input(model, X)
    for layer in model.featurizer:
        z = h @ layer.W.T + layer.b
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h


def _rowwise(op, a):
    # numpy reductions along a short trailing axis are slow; fold columns instead
    out = a[:, 0].copy()
    for k in range(1, a.shape[1]):
        op(out, a[:, k], out=out)
    return out[:, None]


def log_softmax(logits):
    shifted = logits - _rowwise(np.maximum, logits)
    shifted -= np.log(_rowwise(np.add, np.exp(shifted)))
    return shifted


def softmax(logits):
    return np.exp(log_softmax(logits))


def _argmax_rows(a):
    # strict > keeps the first maximum, so ties go to the lower class index
    best = a[:, 0].copy()
    arg = np.zeros(len(a), dtype=np.int64)
    for k in range(1, a.shape[1]):
        better = a[:, k] > best
        arg[better] = k
        np.maximum(best, a[:, k], out=best)
    return arg


def predict(model, X):
    return _argmax_rows(forward(model, X))


def cross_entropy(model, X, y):
    logp = log_softmax(forward(model, X))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def loss_and_grad(model, X, y):
    """Mean cross-entropy and its gradient (a ModelParams of the same shapes)."""
    X = _check_input(model, X)
    y = np.asarray(y, dtype=np.int64)
    if len(y) != len(X):
        raise ShapeError("X and y have different lengths")
    if len(y) == 0:
        raise ShapeError("empty batch")
    if y.min() < 0 or y.max() >= model.K:
        raise ShapeError(f"labels must lie in [0, {model.K})")
    return _backprop(model, X, y)


def _backprop(model, X, y):
    # trusted inputs: shapes and label range already checked
    n = len(y)
    rows = np.arange(n)
    acts, pre = _forward(model, X)
    logp = log_softmax(acts[-1])
    risk = -float(logp[rows, y].sum()) / n
    if not np.isfinite(risk):
        raise FloatingPointError(f"non-finite risk {risk}; max |logit| = {np.max(np.abs(acts[-1]))}")

    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta *= 1.0 / n
    grads = []
    layers = model.layers
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.activation == "relu":
            delta = delta * (pre[i] > 0)
        gW = delta.T @ acts[i]
        gb = delta.sum(axis=0)
        grads.append(Dense(gW, gb, layer.activation))
        if i:
            delta = delta @ layer.W
    grads.reverse()
    # a NaN or inf anywhere makes the sum non-finite
    if not np.isfinite(sum(float(g.W.sum()) + float(g.b.sum()) for g in grads)):
        raise FloatingPointError("non-finite gradient")
    return risk, ModelParams(grads[:-1], grads[-1])


def evaluate(model, dataset):
    """Zero-one error rate of the argmax prediction."""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(model, dataset.X) != dataset.y))


def accuracy(model, dataset):
    return 1.0 - evaluate(model, dataset)


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    velocity: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.kind == "sgd":
            self.momentum = 0.0


def make_optimizer(lr, momentum=0.0):
    return OptimizerState("sgd_momentum" if momentum else "sgd", lr, momentum)


def sgd_step(model, grads, opt):
    """Return an updated copy of ``model``; ``opt`` carries the velocity buffers.

    Momentum follows ``v <- mu v + g; p <- p - lr v``.
    """
    new = model.copy()
    params = new.arrays()
    gs = grads.arrays()
    if opt.kind == "sgd":
        for p, g in zip(params, gs):
            p -= opt.lr * g
        return new
    if opt.velocity is None:
        opt.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, gs, opt.velocity):
        v *= opt.momentum
        v += g
        p -= opt.lr * v
    return new


# ---------------------------------------------------------------- checkpoints
#
#   "FMIM" | u16 version | u16 n_layers
#   per layer: u32 in | u32 out | u8 activation (0 identity, 1 relu)
#   per layer: f32[out*in] W (row-major) | f32[out] b
#   u32 CRC32 of everything before it
#
# The last layer is the classifier.  Little-endian throughout.


def encode_model(model):
    layers = model.layers
    parts = [struct.pack("<4sHH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(layers))]
    for layer in layers:
        out_dim, in_dim = layer.W.shape
        parts.append(struct.pack("<IIB", in_dim, out_dim, ACTIVATIONS.index(layer.activation)))
    for layer in layers:
        parts.append(layer.W.astype("<f4").tobytes())
        parts.append(layer.b.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_model(blob):
    if len(blob) < 12:
        raise CheckpointError("checkpoint truncated")
    magic, version, n_layers = struct.unpack_from("<4sHH", blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    off = 8
    shapes = []
    for _ in range(n_layers):
        in_dim, out_dim, act = struct.unpack_from("<IIB", body, off)
        off += 9
        shapes.append((in_dim, out_dim, ACTIVATIONS[act]))
    layers = []
    try:
        for in_dim, out_dim, act in shapes:
            W = np.frombuffer(body, "<f4", out_dim * in_dim, off).reshape(out_dim, in_dim)
            off += 4 * out_dim * in_dim
            b = np.frombuffer(body, "<f4", out_dim, off)
            off += 4 * out_dim
            layers.append(Dense(W.astype(np.float64), b.astype(np.float64), act))
    except ValueError as exc:
        raise CheckpointError(f"checkpoint payload truncated: {exc}") from None
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return ModelParams(layers[:-1], layers[-1])


def save_model(model, path):
    Path(path).write_bytes(encode_model(model))


def load_model(path):
    return decode_model(Path(path).read_bytes())
