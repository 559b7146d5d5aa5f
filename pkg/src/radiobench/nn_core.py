"""Minimal reverse-mode autodiff, dense networks, and training loop.

Everything runs on float64 numpy arrays through a small tape: each Tensor
op records its parents and a closure that scatters the output gradient
back to them.  Models are MLPs with relu/tanh/identity activations; the
optimiser is plain SGD with momentum for exact, seedable reproducibility.

Loss conventions: per-sample squared Euclidean norm averaged over the
batch (a single sample with residual (3, 4, 0) scores 25).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    CorruptDatasetError,
    DatasetFormatError,
    NumericError,
    ShapeError,
)

_ACTIVATIONS = ("relu", "tanh", "identity")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Array node on the autodiff tape."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values)

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += grad

    # -- graph construction helpers

    @staticmethod
    def _lift(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.values + other.values, _parents=(self, other))

        def back(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.values.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.values.shape))

        out._backward_fn = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.values, _parents=(self,))

        def back(g):
            if self.requires_grad:
                self._accumulate(-g)

        out._backward_fn = back
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.values * other.values, _parents=(self, other))

        def back(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.values, self.values.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.values, other.values.shape))

        out._backward_fn = back
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self._lift(other)
        if self.values.ndim != 2 or other.values.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        if self.values.shape[1] != other.values.shape[0]:
            raise ShapeError(
                f"matmul dims incompatible: {self.values.shape} @ {other.values.shape}"
            )
        out = Tensor(self.values @ other.values, _parents=(self, other))

        def back(g):
            if self.requires_grad:
                self._accumulate(g @ other.values.T)
            if other.requires_grad:
                other._accumulate(self.values.T @ g)

        out._backward_fn = back
        return out

    def relu(self):
        out = Tensor(np.maximum(self.values, 0.0), _parents=(self,))

        def back(g):
            if self.requires_grad:
                self._accumulate(g * (self.values > 0))

        out._backward_fn = back
        return out

    def tanh(self):
        t = np.tanh(self.values)
        out = Tensor(t, _parents=(self,))

        def back(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - t * t))

        out._backward_fn = back
        return out

    def sqrt(self):
        r = np.sqrt(self.values)
        out = Tensor(r, _parents=(self,))

        def back(g):
            if self.requires_grad:
                # subgradient 0 at the origin keeps hinge corner cases exact
                safe = np.where(r > 0, r, 1.0)
                self._accumulate(g * np.where(r > 0, 0.5 / safe, 0.0))

        out._backward_fn = back
        return out

    def sum(self, axis=None):
        out = Tensor(self.values.sum(axis=axis), _parents=(self,))

        def back(g):
            if self.requires_grad:
                if axis is None:
                    self._accumulate(np.broadcast_to(g, self.values.shape).copy())
                else:
                    self._accumulate(
                        np.broadcast_to(
                            np.expand_dims(g, axis), self.values.shape
                        ).copy()
                    )

        out._backward_fn = back
        return out

    def mean(self):
        return self.sum() * (1.0 / self.values.size)

    def backward(self):
        """Reverse-mode sweep from this scalar node."""
        if self.values.size != 1:
            raise ShapeError("backward() starts from a scalar loss")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# Model


@dataclass
class Layer:
    weights: Tensor
    biases: Tensor
    activation: str

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(
                f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}"
            )
        if self.weights.values.ndim != 2:
            raise ShapeError("layer weights must be 2-D")
        if self.biases.values.shape != (self.weights.values.shape[1],):
            raise ShapeError("bias length must match weight columns")


@dataclass
class Mlp:
    """Dense network; weights have shape (fan_in, fan_out), inputs are rows."""

    layers: list
    seed: int = 0

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weights.values.shape[1] != b.weights.values.shape[0]:
                raise ShapeError("consecutive layer dims incompatible")
        for p in self.parameters():
            if not np.all(np.isfinite(p.values)):
                raise NumericError("model parameters must be finite")

    @classmethod
    def create(cls, dims, activations=None, seed: int = 0) -> "Mlp":
        """Glorot-uniform initialised MLP over the given layer widths.

        dims = [in, h1, ..., out]; default activations are relu on hidden
        layers and identity on the last.
        """
        if len(dims) < 2:
            raise ConfigurationError("need at least input and output dims")
        n_layers = len(dims) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise ConfigurationError("one activation per layer required")
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out, act in zip(dims, dims[1:], activations):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            layers.append(
                Layer(
                    weights=Tensor(
                        rng.uniform(-limit, limit, (fan_in, fan_out)),
                        requires_grad=True,
                    ),
                    biases=Tensor(np.zeros(fan_out), requires_grad=True),
                    activation=act,
                )
            )
        return cls(layers=layers, seed=seed)

    @property
    def dims(self) -> list:
        return [self.layers[0].weights.values.shape[0]] + [
            l.weights.values.shape[1] for l in self.layers
        ]

    @property
    def activations(self) -> list:
        return [l.activation for l in self.layers]

    def parameters(self) -> list:
        out = []
        for l in self.layers:
            out.extend((l.weights, l.biases))
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            layers=[
                Layer(
                    weights=Tensor(l.weights.values.copy(), requires_grad=True),
                    biases=Tensor(l.biases.values.copy(), requires_grad=True),
                    activation=l.activation,
                )
                for l in self.layers
            ],
            seed=self.seed,
        )


def forward(model: Mlp, x) -> Tensor:
    """Run inputs (batch, fan_in) or a single (fan_in,) row through the net."""
    arr = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, float)))
    if arr.values.ndim != 2:
        raise ShapeError(f"input must be (batch, features), got {arr.values.shape}")
    h = arr
    for layer in model.layers:
        h = h @ layer.weights + layer.biases
        if layer.activation == "relu":
            h = h.relu()
        elif layer.activation == "tanh":
            h = h.tanh()
    return h


def backward(model: Mlp, loss_node: Tensor) -> list:
    """Gradients of a scalar loss for every parameter, in parameters() order."""
    if not np.all(np.isfinite(loss_node.values)):
        raise NumericError("loss is non-finite")
    for p in model.parameters():
        p.grad = None
    loss_node.backward()
    return [
        p.grad if p.grad is not None else np.zeros_like(p.values)
        for p in model.parameters()
    ]


# ---------------------------------------------------------------------------
# Losses


def _as_batch(t) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.values.ndim == 1:
        if t.requires_grad:
            raise ShapeError("grad-tracked embeddings must be (batch, dim)")
        return Tensor(t.values[None, :])
    return t


def mse_loss(pred, target) -> Tensor:
    pred = Tensor._lift(pred)
    target = Tensor._lift(target)
    pv = np.atleast_2d(pred.values)
    tv = np.atleast_2d(target.values)
    if pv.shape != tv.shape:
        raise ShapeError(f"shape mismatch: {pred.values.shape} vs {target.values.shape}")
    diff = pred - target
    sq = diff * diff
    # per-sample squared norm, averaged over the batch
    n = pv.shape[0] if pred.values.ndim > 1 else 1
    return sq.sum() * (1.0 / n)


def recon_loss(model_encoder: Mlp, model_decoder: Mlp, batch) -> Tensor:
    arr = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    dec_out = model_decoder.layers[-1].weights.values.shape[1]
    if dec_out != arr.shape[1]:
        raise ShapeError(
            f"decoder output dim {dec_out} != input dim {arr.shape[1]}"
        )
    z = forward(model_encoder, arr)
    xhat = forward(model_decoder, z)
    return mse_loss(xhat, arr)


def _row_distance(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return (diff * diff).sum(axis=1).sqrt()


def triplet_loss(embed_anchor, embed_pos, embed_neg, margin: float = 1.0) -> Tensor:
    a = _as_batch(embed_anchor)
    p = _as_batch(embed_pos)
    n = _as_batch(embed_neg)
    if not (a.values.shape == p.values.shape == n.values.shape):
        raise ShapeError("triplet embeddings must share one shape")
    hinge = (_row_distance(a, p) - _row_distance(a, n) + margin).relu()
    return hinge.mean()


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.early_stop_patience < 0:
            raise ConfigurationError("early_stop_patience must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in u64")


@dataclass
class TrainHistory:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1


def train(model: Mlp, loss_fn, data, cfg: TrainConfig):
    """SGD-with-momentum loop over index batches; returns (model, history).

    loss_fn(model, indices) must return the scalar loss Tensor for those
    sample indices; data is a (train_indices, val_indices) pair.  Batches
    are reshuffled per epoch from (cfg.seed, epoch).  With
    early_stop_patience > 0, training stops after that many epochs without
    val improvement and the best-val parameters are restored.
    """
    train_idx = np.asarray(data[0], dtype=np.int64)
    val_idx = np.asarray(data[1], dtype=np.int64)
    if len(train_idx) == 0:
        raise ConfigurationError("empty training index set")
    params = model.parameters()
    velocity = [np.zeros_like(p.values) for p in params]
    history = TrainHistory()
    best_val = math.inf
    best_params = None
    patience_left = cfg.early_stop_patience

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_idx))
        shuffled = train_idx[order]
        epoch_loss = 0.0
        for start in range(0, len(shuffled), cfg.batch_size):
            batch = shuffled[start : start + cfg.batch_size]
            loss = loss_fn(model, batch)
            if not np.all(np.isfinite(loss.values)):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            grads = backward(model, loss)
            for p, v, g in zip(params, velocity, grads):
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p.values
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p.values += v
            epoch_loss += loss.item() * len(batch)
        history.train.append(epoch_loss / len(shuffled))

        if len(val_idx):
            val_loss = loss_fn(model, val_idx).item()
            if not math.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss at epoch {epoch}")
        else:
            val_loss = history.train[-1]
        history.val.append(val_loss)

        if val_loss < best_val:
            best_val = val_loss
            history.best_epoch = epoch
            patience_left = cfg.early_stop_patience
            if cfg.early_stop_patience:
                best_params = [p.values.copy() for p in params]
        elif cfg.early_stop_patience:
            patience_left -= 1
            if patience_left <= 0:
                history.stopped_epoch = epoch
                break

    if best_params is not None:
        for p, saved in zip(params, best_params):
            p.values[...] = saved
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MAGIC = b"RBCKPT01"


def save_checkpoint(model: Mlp, path, extra: dict | None = None) -> None:
    """JSON architecture header + raw float64 parameter block + CRC32C."""
    from .dataset_store import crc32c

    header = {
        "schema": 1,
        "dims": model.dims,
        "activations": model.activations,
        "seed": model.seed,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    params = np.concatenate([p.values.ravel() for p in model.parameters()])
    blob = params.astype("<f8").tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    crc = 0
    with open(tmp, "wb") as f:
        for chunk in (
            _CKPT_MAGIC,
            len(header_bytes).to_bytes(8, "little"),
            header_bytes,
            blob,
        ):
            f.write(chunk)
            crc = crc32c(chunk, crc)
        f.write(crc.to_bytes(4, "little"))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (model, extra) with parameters restored bit-exactly."""
    from .dataset_store import crc32c

    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:8] != _CKPT_MAGIC:
        raise CorruptDatasetError(f"{path}: not a checkpoint file")
    if crc32c(raw[:-4]) != int.from_bytes(raw[-4:], "little"):
        raise CorruptDatasetError(f"{path}: checkpoint checksum mismatch")
    header_len = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    if header.get("schema") != 1:
        raise DatasetFormatError(f"{path}: unsupported checkpoint schema")
    flat = np.frombuffer(raw, dtype="<f8", offset=16 + header_len,
                         count=(len(raw) - 20 - header_len) // 8)
    model = Mlp.create(header["dims"], header["activations"], seed=header["seed"])
    pos = 0
    for p in model.parameters():
        n = p.values.size
        p.values[...] = flat[pos : pos + n].reshape(p.values.shape)
        pos += n
    if pos != flat.size:
        raise CorruptDatasetError(f"{path}: parameter block size mismatch")
    return model, header["extra"]
