"""A small sequential network with a reverse-mode tape.

Activation positions are numbered ``0..L``: position 0 is the network input
and position ``i + 1`` is the output of layer ``i``. The tape keeps every
position; checkpointed training keeps only some of them (see
:mod:`optb.checkpoint`).

Under mixed precision, parameters, activations and parameter gradients are
*stored* in Half, every kernel runs in Single, and a Single master copy of the
parameters receives the SGD update.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import metering
from .codec import CodecMode, EncodedBatch, decode
from .metering import ACTIVATIONS, GRADIENTS, MASTER_WEIGHTS, WEIGHTS, MemoryLedger
from .tensor import (
    DimensionError,
    ElementFormat,
    Tensor,
    add_bias,
    convert,
    matmul,
    relu,
    sigmoid,
    to_single,
)

Batch = Union[Tensor, EncodedBatch, Sequence[EncodedBatch]]


class NumericError(ArithmeticError):
    """Non-finite values reached a place that must stay finite."""


class TapeError(RuntimeError):
    pass


class Precision(enum.Enum):
    SINGLE = "single"
    MIXED = "mixed"


class LossKind(enum.Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


@dataclass
class Dense:
    n_in: int
    n_out: int
    W: Tensor | None = None
    b: Tensor | None = None
    master_W: Tensor | None = None
    master_b: Tensor | None = None

    def describe(self) -> str:
        return f"Dense({self.n_in}->{self.n_out})"


@dataclass
class Activation:
    kind: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in ("sigmoid", "relu"):
            raise ValueError(f"unknown activation {self.kind!r}")

    def describe(self) -> str:
        return f"Activation({self.kind})"


@dataclass
class Decode:
    """Input adapter that unpacks encoded batches into a flat Single tensor.

    ``n_images`` is the number of images expected per forward call (the
    batches may arrive split across several containers).
    """

    mode: CodecMode
    n_images: int
    image_shape: tuple[int, int, int]
    scale: float = 1.0

    @property
    def n_out(self) -> int:
        return math.prod(self.image_shape)

    def describe(self) -> str:
        return f"Decode({self.mode.name})"


Layer = Union[Dense, Activation, Decode]


def pixels_to_input(images: np.ndarray, scale: float = 1.0) -> Tensor:
    """Flatten ``(N, H, W, C)`` uint8 pixels into an ``(N, H*W*C)`` Single tensor."""
    images = np.asarray(images)
    flat = images.reshape(images.shape[0], -1).astype(np.float32)
    return Tensor(flat * np.float32(scale))


def _as_batches(x) -> list[EncodedBatch]:
    if isinstance(x, EncodedBatch):
        return [x]
    return list(x)


def batch_nbytes(x) -> int:
    if isinstance(x, Tensor):
        return x.nbytes
    return sum(e.nbytes for e in _as_batches(x))


class Network:
    """Ordered layer stack plus its parameter storage.

    Parameters are registered with ``ledger`` (if given) at construction and
    stay registered for the life of the network.
    """

    def __init__(
        self,
        layers: Sequence[Layer],
        precision: Precision = Precision.SINGLE,
        seed: int = 0,
        ledger: MemoryLedger | None = None,
        loss_scale: float = 1.0,
    ):
        self.layers = list(layers)
        self.precision = precision
        self.ledger = ledger
        self.loss_scale = float(loss_scale)
        self.version = 0
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be positive")
        self._validate()
        rng = np.random.default_rng(seed)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                relu = isinstance(nxt, Activation) and nxt.kind == "relu"
                self._init_dense(layer, rng, relu)
        metering.alloc(ledger, WEIGHTS, self.weight_bytes, "params")
        metering.alloc(ledger, MASTER_WEIGHTS, self.master_bytes, "master params")

    @classmethod
    def mlp(
        cls,
        n_in: int,
        hidden: Sequence[int],
        n_out: int,
        activation: str = "sigmoid",
        decode: Decode | None = None,
        **kwargs,
    ) -> "Network":
        layers: list[Layer] = []
        if decode is not None:
            layers.append(decode)
        width = n_in
        for h in hidden:
            layers += [Dense(width, h), Activation(activation)]
            width = h
        layers.append(Dense(width, n_out))
        return cls(layers, **kwargs)

    def _validate(self) -> None:
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Decode):
                if i != 0:
                    raise ValueError(f"Decode must be layer 0, found at layer {i}")
                width = layer.n_out
            elif isinstance(layer, Dense):
                if width is not None and layer.n_in != width:
                    raise DimensionError(
                        f"layer {i} {layer.describe()} cannot follow width {width}"
                    )
                width = layer.n_out

    def _init_dense(self, layer: Dense, rng: np.random.Generator, relu: bool = False) -> None:
        if layer.W is None:
            # He-uniform ahead of ReLU, Glorot-uniform otherwise
            fan = layer.n_in / 2 if relu else (layer.n_in + layer.n_out) / 2
            limit = math.sqrt(3.0 / fan)
            w = rng.uniform(-limit, limit, size=(layer.n_in, layer.n_out)).astype(np.float32)
            layer.W = Tensor(w)
        if layer.b is None:
            layer.b = Tensor(np.zeros(layer.n_out, dtype=np.float32))
        if layer.W.shape != (layer.n_in, layer.n_out) or layer.b.shape != (layer.n_out,):
            raise DimensionError(f"{layer.describe()} has params {layer.W.shape}, {layer.b.shape}")
        if self.precision is Precision.MIXED:
            layer.master_W = to_single(layer.W)
            layer.master_b = to_single(layer.b)
            layer.W = convert(layer.master_W, ElementFormat.HALF)
            layer.b = convert(layer.master_b, ElementFormat.HALF)
        else:
            layer.W = to_single(layer.W)
            layer.b = to_single(layer.b)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def storage_format(self) -> ElementFormat:
        return ElementFormat.HALF if self.precision is Precision.MIXED else ElementFormat.SINGLE

    def dense_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, Dense)]

    @property
    def weight_bytes(self) -> int:
        return sum(l.W.nbytes + l.b.nbytes for _, l in self.dense_layers())

    @property
    def master_bytes(self) -> int:
        if self.precision is not Precision.MIXED:
            return 0
        return sum(l.master_W.nbytes + l.master_b.nbytes for _, l in self.dense_layers())

    @property
    def n_params(self) -> int:
        return sum(l.W.size + l.b.size for _, l in self.dense_layers())

    def release(self) -> None:
        """Drop the parameter registrations from the ledger."""
        metering.free(self.ledger, WEIGHTS, self.weight_bytes, "params")
        metering.free(self.ledger, MASTER_WEIGHTS, self.master_bytes, "master params")

    def activation_bytes(self, batch: int, input_bytes: int | None = None) -> list[int]:
        """Stored byte size of every activation position ``0..L`` for a batch.

        ``input_bytes`` sizes position 0; it is required when layer 0 is
        Decode, whose input is an encoded container rather than a tensor.
        """
        width = self.storage_format.width
        first = self.layers[0]
        if isinstance(first, Decode):
            if input_bytes is None:
                raise ValueError("pass input_bytes for a network that starts with Decode")
            features = None
        elif isinstance(first, Dense):
            features = first.n_in
        else:
            raise ValueError("first layer must be Dense or Decode to infer widths")
        sizes = [input_bytes if input_bytes is not None else batch * features * width]
        for layer in self.layers:
            if isinstance(layer, (Dense, Decode)):
                features = layer.n_out
            sizes.append(batch * features * width)
        return sizes

    # kernels ---------------------------------------------------------------

    def _compute_params(self, layer: Dense) -> tuple[Tensor, Tensor]:
        return to_single(layer.W), to_single(layer.b)

    def _apply(self, i: int, x) -> Tensor:
        layer = self.layers[i]
        if isinstance(layer, Decode):
            if isinstance(x, Tensor):
                raise DimensionError(f"layer {i} {layer.describe()} expects encoded batches")
            images = np.concatenate([decode(e) for e in _as_batches(x)])
            if images.shape[1:] != tuple(layer.image_shape):
                raise DimensionError(
                    f"layer {i} {layer.describe()} expects images {layer.image_shape}, "
                    f"got {images.shape[1:]}"
                )
            y = pixels_to_input(images, layer.scale)
        else:
            if not isinstance(x, Tensor):
                raise DimensionError(f"layer {i} {layer.describe()} cannot take encoded input")
            x32 = to_single(x)
            if isinstance(layer, Dense):
                if x32.data.ndim != 2 or x32.shape[1] != layer.n_in:
                    raise DimensionError(
                        f"layer {i} {layer.describe()} got input of shape {x32.shape}"
                    )
                W, b = self._compute_params(layer)
                y = add_bias(matmul(x32, W), b)
            elif layer.kind == "sigmoid":
                y = sigmoid(x32)
            else:
                y = relu(x32)
        return convert(y, self.storage_format)

    def _store_input(self, x):
        if isinstance(x, Tensor):
            return convert(x, self.storage_format)
        return x


@dataclass
class ActivationTape:
    acts: list
    version: int
    network_id: int
    consumed: bool = False


def run_layers(
    net: Network,
    x,
    start: int,
    stop: int,
    keep: set[int] | frozenset[int],
    ledger: MemoryLedger | None,
    input_tracked: bool = False,
    label: str = "act",
) -> dict:
    """Evaluate layers ``start..stop-1`` from the activation at ``start``.

    Positions listed in ``keep`` (and always ``stop``) stay alive and tracked;
    every other position is released as soon as the next one exists.
    """
    if not input_tracked:
        metering.alloc(ledger, ACTIVATIONS, batch_nbytes(x), f"{label}[{start}]")
    held = {start: x}
    cur = x
    for i in range(start, stop):
        y = net._apply(i, cur)
        metering.alloc(ledger, ACTIVATIONS, y.nbytes, f"{label}[{i + 1}]")
        held[i + 1] = y
        if i not in keep:
            metering.free(ledger, ACTIVATIONS, batch_nbytes(cur), f"{label}[{i}]")
            del held[i]
        cur = y
    return held


def forward(net: Network, x: Batch, record: bool = False, ledger: MemoryLedger | None = None):
    """Run the whole stack. Returns ``(output, tape)``; ``tape`` is None
    unless ``record`` is set, and without it nothing stays tracked."""
    ledger = ledger if ledger is not None else net.ledger
    x = net._store_input(x)
    L = net.depth
    keep = set(range(L + 1)) if record else set()
    held = run_layers(net, x, 0, L, keep, ledger)
    out = held[L]
    if not record:
        metering.free(ledger, ACTIVATIONS, batch_nbytes(out), f"act[{L}]")
        return out, None
    tape = ActivationTape([held[p] for p in range(L + 1)], net.version, id(net))
    return out, tape


def infer(net: Network, x: Batch) -> Tensor:
    """Forward pass for evaluation; touches no ledger."""
    x = net._store_input(x)
    return run_layers(net, x, 0, net.depth, frozenset(), None)[net.depth]


@dataclass
class Gradients:
    """Per-layer ``(dW, db)`` pairs aligned with ``net.layers`` (None for
    parameter-free layers). Stored in the network's storage format, scaled by
    the network's loss scale."""

    per_layer: list
    loss_scale: float = 1.0
    released: bool = False

    @property
    def nbytes(self) -> int:
        return sum(g[0].nbytes + g[1].nbytes for g in self.per_layer if g is not None)

    def single(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Unscaled Single copies of layer ``i``'s gradients."""
        dW, db = self.per_layer[i]
        s = np.float32(self.loss_scale)
        gW = to_single(dW).data
        gb = to_single(db).data
        if s != 1:
            gW = gW / s
            gb = gb / s
        return gW, gb


def backward_range(
    net: Network,
    acts: dict,
    start: int,
    stop: int,
    delta: Tensor,
    grads: list,
    ledger: MemoryLedger | None,
    release: set[int] | frozenset[int] = frozenset(),
) -> Tensor | None:
    """Back-propagate ``delta`` (gradient at position ``stop``) through layers
    ``stop-1 .. start``. Parameter gradients land in ``grads``; the returned
    tensor is the gradient at position ``start`` (None when ``start == 0``).
    Positions in ``release`` are freed once no longer needed.

    ``delta`` must already be tracked; the returned gradient stays tracked and
    every intermediate is freed.
    """
    fmt = net.storage_format
    for i in range(stop - 1, start - 1, -1):
        layer = net.layers[i]
        need_dx = i > 0
        new_delta = None
        if isinstance(layer, Dense):
            x32 = to_single(acts[i])
            W, _ = net._compute_params(layer)
            dW = matmul(Tensor(x32.data.T), delta)
            db = Tensor(delta.data.sum(axis=0, dtype=np.float32))
            dW, db = convert(dW, fmt), convert(db, fmt)
            grads[i] = (dW, db)
            metering.alloc(ledger, GRADIENTS, dW.nbytes + db.nbytes, f"grad[{i}]")
            if need_dx:
                new_delta = matmul(delta, Tensor(W.data.T))
        elif isinstance(layer, Activation):
            if layer.kind == "sigmoid":
                y = to_single(acts[i + 1]).data
                new_delta = Tensor(delta.data * (y * (np.float32(1.0) - y)))
            else:
                x = to_single(acts[i]).data
                new_delta = Tensor(np.where(x > 0, delta.data, np.float32(0.0)))
        else:
            need_dx = False  # encoded inputs take no gradient

        if new_delta is not None:
            metering.alloc(ledger, GRADIENTS, new_delta.nbytes, f"delta[{i}]")
        metering.free(ledger, GRADIENTS, delta.nbytes, f"delta[{i + 1}]")
        delta = new_delta
        if i + 1 in release:
            metering.free(ledger, ACTIVATIONS, batch_nbytes(acts[i + 1]), f"act[{i + 1}]")
            del acts[i + 1]
        if not need_dx:
            if delta is not None:
                metering.free(ledger, GRADIENTS, delta.nbytes, f"delta[{i}]")
                delta = None
    return delta


def _seed_delta(net: Network, loss_grad: Tensor, ledger) -> Tensor:
    g = to_single(loss_grad)
    if net.precision is Precision.MIXED and net.loss_scale != 1.0:
        g = Tensor(g.data * np.float32(net.loss_scale))
    metering.alloc(ledger, GRADIENTS, g.nbytes, f"delta[{net.depth}]")
    return g


def backward(net: Network, tape: ActivationTape | None, loss_grad: Tensor,
             ledger: MemoryLedger | None = None) -> Gradients:
    """Chain-rule accumulation from the output back to layer 0, releasing each
    tape entry once the layers on both sides of it are done."""
    ledger = ledger if ledger is not None else net.ledger
    if tape is None:
        raise TapeError("backward needs a tape recorded by forward(record=True)")
    if tape.consumed:
        raise TapeError("tape has already been consumed by backward")
    if tape.network_id != id(net) or tape.version != net.version:
        raise TapeError("tape is stale: the network changed after it was recorded")
    L = net.depth
    if to_single(loss_grad).shape != tape.acts[L].shape:
        raise DimensionError(f"loss gradient {loss_grad.shape} vs output {tape.acts[L].shape}")
    tape.consumed = True
    acts = dict(enumerate(tape.acts))
    tape.acts = []
    grads: list = [None] * L
    delta = _seed_delta(net, loss_grad, ledger)
    backward_range(net, acts, 0, L, delta, grads, ledger, release=set(range(1, L + 1)))
    metering.free(ledger, ACTIVATIONS, batch_nbytes(acts.pop(0)), "act[0]")
    scale = net.loss_scale if net.precision is Precision.MIXED else 1.0
    return Gradients(grads, scale)


def loss(pred: Tensor, target, kind: LossKind = LossKind.MSE) -> tuple[float, Tensor]:
    """Scalar loss and its gradient with respect to ``pred`` (Single).

    MSE averages over every element; cross-entropy averages over the batch and
    accepts class indices or one-hot rows as targets.
    """
    p = to_single(pred).data
    if kind is LossKind.MSE:
        t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float32)
        if t.shape != p.shape:
            raise DimensionError(f"prediction {p.shape} vs target {t.shape}")
        diff = p - t
        n = np.float32(diff.size)
        value = np.float32(np.sum(diff * diff, dtype=np.float32) / n)
        return float(value), Tensor(diff * (np.float32(2.0) / n))

    if p.ndim != 2:
        raise DimensionError(f"cross-entropy expects (batch, classes) logits, got {p.shape}")
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.ndim == 2:
        if t.shape != p.shape:
            raise DimensionError(f"prediction {p.shape} vs one-hot target {t.shape}")
        t = t.argmax(axis=1)
    if t.shape != (p.shape[0],):
        raise DimensionError(f"prediction {p.shape} vs class targets {t.shape}")
    t = t.astype(np.int64)
    if t.min() < 0 or t.max() >= p.shape[1]:
        raise ValueError("class index out of range")
    m = p.max(axis=1, keepdims=True)
    shifted = p - m
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True, dtype=np.float32)
    rows = np.arange(p.shape[0])
    logp = shifted[rows, t] - np.log(s[:, 0])
    batch = np.float32(p.shape[0])
    value = np.float32(-np.sum(logp, dtype=np.float32) / batch)
    grad = e / s
    grad[rows, t] -= np.float32(1.0)
    return float(value), Tensor(grad / batch)


@dataclass
class TrainState:
    network: Network
    learning_rate: float
    loss: LossKind = LossKind.CROSS_ENTROPY
    seed: int = 0
    step: int = field(default=0)

    def __post_init__(self):
        # zero is allowed so a step can be made an exact no-op
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")


def sgd_step(state: TrainState, grads: Gradients) -> TrainState:
    """Apply one plain SGD update in place and release the gradients.

    Mixed precision updates the Single master copy and re-rounds it into Half
    storage, so sub-resolution updates still accumulate.
    """
    net = state.network
    if grads.released:
        raise TapeError("gradients were already applied")
    lr = np.float32(state.learning_rate)
    updates = []
    for i, layer in net.dense_layers():
        if grads.per_layer[i] is None:
            raise TapeError(f"no gradient for layer {i}")
        gW, gb = grads.single(i)
        if gW.shape != layer.W.shape or gb.shape != layer.b.shape:
            raise DimensionError(f"gradient shapes {gW.shape}, {gb.shape} for {layer.describe()}")
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient for layer {i}")
        updates.append((layer, gW, gb))
    for layer, gW, gb in updates:
        if net.precision is Precision.MIXED:
            layer.master_W = Tensor(layer.master_W.data - lr * gW)
            layer.master_b = Tensor(layer.master_b.data - lr * gb)
            layer.W = convert(layer.master_W, ElementFormat.HALF)
            layer.b = convert(layer.master_b, ElementFormat.HALF)
        else:
            layer.W = Tensor(layer.W.data - lr * gW)
            layer.b = Tensor(layer.b.data - lr * gb)
    metering.free(net.ledger, GRADIENTS, grads.nbytes, "grads applied")
    grads.released = True
    net.version += 1
    state.step += 1
    return state
