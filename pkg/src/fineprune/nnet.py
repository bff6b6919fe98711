"""Small feed-forward network engine with per-connection binary masks.

Every layer keeps its dense weights next to a boolean mask; the forward pass
uses ``weights * mask``.  Backpropagation computes gradients with respect to
the effective (masked) weights and applies them to *all* stored weights, so
pruned connections keep learning and can later be spliced back in.

Only dense layers are needed for the end-to-end experiments; a minimal
``conv2d`` (no padding) is provided behind the same layer contract.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

KINDS = ("dense", "conv2d")
ACTIVATIONS = ("relu", "identity", "softmax")
_KIND_TAG = {"dense": 0, "conv2d": 1}
_TAG_KIND = {v: k for k, v in _KIND_TAG.items()}
MAGIC = b"FPN1"


@dataclass(frozen=True)
class LayerSpec:
    """Shape and activation of one layer.

    Dense layers use ``in_dim``/``out_dim``.  Conv layers use channels, a
    square ``kernel_size``, ``stride`` and the input spatial size ``in_hw``.
    ``activation="softmax"`` marks the output layer: it emits raw logits and
    the softmax is folded into the loss.
    """

    kind: str = "dense"
    in_dim: int = 0
    out_dim: int = 0
    activation: str = "relu"
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    in_hw: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.kind == "dense":
            if self.in_dim < 1 or self.out_dim < 1:
                raise ShapeError(f"dense dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        else:
            dims = (self.in_channels, self.out_channels, self.kernel_size, self.stride, *self.in_hw)
            if min(dims) < 1:
                raise ShapeError(f"conv2d dimensions must be >= 1, got {dims}")
            if self.kernel_size > min(self.in_hw):
                raise ShapeError("conv2d kernel larger than input")

    @property
    def out_hw(self) -> tuple[int, int]:
        h, w = self.in_hw
        k, s = self.kernel_size, self.stride
        return (h - k) // s + 1, (w - k) // s + 1

    @property
    def in_size(self) -> int:
        if self.kind == "dense":
            return self.in_dim
        return self.in_channels * self.in_hw[0] * self.in_hw[1]

    @property
    def out_size(self) -> int:
        if self.kind == "dense":
            return self.out_dim
        oh, ow = self.out_hw
        return self.out_channels * oh * ow

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.out_dim, self.in_dim)
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape[1:]))


def dense(in_dim: int, out_dim: int, activation: str = "relu") -> LayerSpec:
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim, activation=activation)


def dense_stack(sizes: Sequence[int]) -> list[LayerSpec]:
    """ReLU MLP spec for ``sizes = [inputs, hidden..., classes]``."""
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    n = len(sizes) - 1
    return [
        dense(sizes[i], sizes[i + 1], "softmax" if i == n - 1 else "relu")
        for i in range(n)
    ]


def check_spec(spec: Sequence[LayerSpec]) -> None:
    if not spec:
        raise ShapeError("empty network spec")
    for i in range(1, len(spec)):
        if spec[i].in_size != spec[i - 1].out_size:
            raise ShapeError(
                f"layer {i} expects {spec[i].in_size} inputs but layer {i - 1} "
                f"produces {spec[i - 1].out_size}"
            )


@dataclass
class MaskedLayer:
    weights: np.ndarray
    bias: np.ndarray
    mask: np.ndarray  # bool, same shape as weights

    @property
    def effective(self) -> np.ndarray:
        return self.weights * self.mask


@dataclass
class MaskedNetwork:
    layers: list[MaskedLayer]
    spec: list[LayerSpec]
    rng_seed: int = 0

    @property
    def classes(self) -> int:
        return self.spec[-1].out_size

    @property
    def weight_count(self) -> int:
        return sum(layer.weights.size for layer in self.layers)

    @property
    def bias_count(self) -> int:
        return sum(layer.bias.size for layer in self.layers)

    @property
    def parameter_count(self) -> int:
        return self.weight_count + self.bias_count

    def remaining_weights(self) -> int:
        return int(sum(np.count_nonzero(layer.mask) for layer in self.layers))


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) < 1:
            raise ShapeError("labels must be a non-empty vector")
        if self.inputs.shape[0] != len(self.labels):
            raise ShapeError(
                f"{self.inputs.shape[0]} input rows but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass(frozen=True)
class NetworkState:
    """Deep copy of a network's weights, biases and masks."""

    kinds: tuple[str, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    masks: tuple[np.ndarray, ...]

    def __eq__(self, other):
        if not isinstance(other, NetworkState):
            return NotImplemented
        if self.kinds != other.kinds:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for xs, ys in ((self.weights, other.weights), (self.biases, other.biases),
                           (self.masks, other.masks))
            for a, b in zip(xs, ys)
        )

    @property
    def weight_count(self) -> int:
        return sum(w.size for w in self.weights)

    def remaining_weights(self) -> int:
        return int(sum(np.count_nonzero(m) for m in self.masks))


def init_network(spec: Sequence[LayerSpec], seed: int) -> MaskedNetwork:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, all-ones masks.

    Layers are drawn in order from a single ``default_rng(seed)``.
    """
    spec = list(spec)
    check_spec(spec)
    rng = np.random.default_rng(seed)
    layers = [_new_layer(s, rng) for s in spec]
    return MaskedNetwork(layers=layers, spec=spec, rng_seed=seed)


def _new_layer(s: LayerSpec, rng: np.random.Generator) -> MaskedLayer:
    w = rng.standard_normal(s.weight_shape) * np.sqrt(2.0 / s.fan_in)
    b = np.zeros(s.weight_shape[0])
    return MaskedLayer(weights=w, bias=b, mask=np.ones(s.weight_shape, dtype=bool))


def replace_layer(net: MaskedNetwork, index: int, s: LayerSpec, seed: int) -> None:
    """Swap layer ``index`` for a freshly initialized one (used to retarget heads)."""
    spec = list(net.spec)
    spec[index] = s
    check_spec(spec)
    net.spec = spec
    net.layers[index] = _new_layer(s, np.random.default_rng(seed))


# -- forward / backward ------------------------------------------------------


def _patches(x: np.ndarray, s: LayerSpec) -> np.ndarray:
    k, st = s.kernel_size, s.stride
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::st, ::st]  # (B, C, oh, ow, k, k)


def _layer_forward(s: LayerSpec, layer: MaskedLayer, x: np.ndarray) -> np.ndarray:
    w = layer.effective
    if s.kind == "dense":
        return x.reshape(len(x), -1) @ w.T + layer.bias
    x = x.reshape(len(x), s.in_channels, *s.in_hw)
    z = np.einsum("bchwij,ocij->bohw", _patches(x, s), w, optimize=True)
    return z + layer.bias[None, :, None, None]


def _prepare_inputs(net: MaskedNetwork, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    first = net.spec[0]
    if x.ndim < 2 or int(np.prod(x.shape[1:])) != first.in_size:
        raise ShapeError(
            f"input of shape {x.shape} does not match first layer ({first.in_size} features)"
        )
    return x


def _run(net: MaskedNetwork, x: np.ndarray, keep: bool):
    acts = [x]
    pre = []
    for i, (s, layer) in enumerate(zip(net.spec, net.layers)):
        z = _layer_forward(s, layer, acts[-1])
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activations in layer {i}", layer=i)
        if keep:
            pre.append(z)
        acts.append(np.maximum(z, 0.0) if s.activation == "relu" else z)
    out = acts[-1].reshape(len(x), -1)
    return out, acts, pre


def forward(net: MaskedNetwork, batch: Batch | np.ndarray) -> np.ndarray:
    """Logits, shape (batch, classes)."""
    inputs = batch.inputs if isinstance(batch, Batch) else batch
    out, _, _ = _run(net, _prepare_inputs(net, inputs), keep=False)
    return out


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def loss_and_grads(net: MaskedNetwork, batch: Batch):
    """Loss plus gradients w.r.t. each layer's effective weights and biases.

    The weight gradients are *not* multiplied by the mask: a masked entry gets
    the gradient its position would receive if it were active.
    """
    x = _prepare_inputs(net, batch.inputs)
    if batch.labels.max() >= net.classes or batch.labels.min() < 0:
        raise ShapeError(f"labels outside [0, {net.classes})")
    out, acts, pre = _run(net, x, keep=True)
    loss, g = cross_entropy(out, batch.labels)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", layer=len(net.layers) - 1)

    gws, gbs = [None] * len(net.layers), [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        s, layer = net.spec[i], net.layers[i]
        z = pre[i]
        g = g.reshape(z.shape)
        if s.activation == "relu":
            g = g * (z > 0)
        a = acts[i]
        w = layer.effective
        if s.kind == "dense":
            a2 = a.reshape(len(a), -1)
            gws[i] = g.T @ a2
            gbs[i] = g.sum(axis=0)
            g = (g @ w).reshape(a.shape)
        else:
            a4 = a.reshape(len(a), s.in_channels, *s.in_hw)
            gws[i] = np.einsum("bohw,bchwij->ocij", g, _patches(a4, s), optimize=True)
            gbs[i] = g.sum(axis=(0, 2, 3))
            gx = np.zeros_like(a4)
            oh, ow = s.out_hw
            st = s.stride
            for di in range(s.kernel_size):
                for dj in range(s.kernel_size):
                    gx[:, :, di:di + st * oh:st, dj:dj + st * ow:st] += np.einsum(
                        "bohw,oc->bchw", g, w[:, :, di, dj]
                    )
            g = gx.reshape(a.shape)
    return loss, gws, gbs


def sgd_step(net: MaskedNetwork, batch: Batch, lr: float) -> float:
    """One plain SGD step on ``batch``; returns the pre-update loss.

    All stored weights move, masked or not.  Masks are left alone.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    loss, gws, gbs = loss_and_grads(net, batch)
    for i, (layer, gw, gb) in enumerate(zip(net.layers, gws, gbs)):
        layer.weights = layer.weights - lr * gw
        layer.bias = layer.bias - lr * gb
        if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
            raise NumericError(f"non-finite weights after update in layer {i}", layer=i)
    return loss


def iter_minibatches(batch: Batch, size: int, rng: np.random.Generator):
    order = rng.permutation(len(batch))
    for start in range(0, len(order), size):
        yield batch.take(order[start:start + size])


def train_epoch(net: MaskedNetwork, batch: Batch, lr: float, batch_size: int,
                rng: np.random.Generator) -> float:
    """One shuffled pass; returns the sample-weighted mean minibatch loss."""
    total = 0.0
    for mb in iter_minibatches(batch, batch_size, rng):
        total += sgd_step(net, mb, lr) * len(mb)
    return total / len(batch)


def evaluate_loss(net: MaskedNetwork, batch: Batch) -> float:
    return cross_entropy(forward(net, batch), batch.labels)[0]


def top1_error(net: MaskedNetwork, data: Batch | Iterable[Batch]) -> float:
    """Fraction of misclassified samples; argmax ties go to the lowest class."""
    batches = [data] if isinstance(data, Batch) else list(data)
    wrong = total = 0
    for b in batches:
        pred = np.argmax(forward(net, b), axis=1)
        wrong += int(np.count_nonzero(pred != b.labels))
        total += len(b)
    if total == 0:
        raise ValueError("top1_error needs at least one sample")
    return wrong / total


# -- state ---------------------------------------------------------------------


def snapshot(net: MaskedNetwork) -> NetworkState:
    return NetworkState(
        kinds=tuple(s.kind for s in net.spec),
        weights=tuple(layer.weights.copy() for layer in net.layers),
        biases=tuple(layer.bias.copy() for layer in net.layers),
        masks=tuple(layer.mask.copy() for layer in net.layers),
    )


def restore(net: MaskedNetwork, state: NetworkState) -> None:
    if len(state.weights) != len(net.layers):
        raise ShapeError(
            f"state has {len(state.weights)} layers, network has {len(net.layers)}"
        )
    for i, (s, w, b, m) in enumerate(zip(net.spec, state.weights, state.biases, state.masks)):
        if s.kind != state.kinds[i] or w.shape != s.weight_shape or m.shape != s.weight_shape \
                or b.shape != (s.weight_shape[0],):
            raise ShapeError(f"state layer {i} does not match network spec")
    for layer, w, b, m in zip(net.layers, state.weights, state.biases, state.masks):
        layer.weights = w.copy()
        layer.bias = b.copy()
        layer.mask = m.astype(bool, copy=True)


def save_state(path, state: NetworkState) -> None:
    """Write an ``FPN1`` checkpoint.

    Layout (little-endian): magic, u32 layer count, then per layer u32 kind
    tag, u32 rank, rank x u32 dims, f64 weights, f64 biases (one per output
    unit), one byte per mask entry (0 or 1).
    """
    parts = [MAGIC, struct.pack("<I", len(state.weights))]
    for kind, w, b, m in zip(state.kinds, state.weights, state.biases, state.masks):
        parts.append(struct.pack("<II", _KIND_TAG[kind], w.ndim))
        parts.append(struct.pack(f"<{w.ndim}I", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(m, dtype=np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_state(path) -> NetworkState:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ShapeError(f"{path}: not an FPN1 checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ShapeError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    kinds, ws, bs, ms = [], [], [], []
    for _ in range(count):
        tag, rank = struct.unpack("<II", take(8))
        if tag not in _TAG_KIND:
            raise ShapeError(f"{path}: unknown layer kind tag {tag}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape))
        kinds.append(_TAG_KIND[tag])
        ws.append(np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64))
        bs.append(np.frombuffer(take(8 * shape[0]), dtype="<f8").astype(np.float64))
        raw = np.frombuffer(take(size), dtype=np.uint8)
        if raw.size and raw.max() > 1:
            raise ShapeError(f"{path}: mask bytes must be 0 or 1")
        ms.append(raw.reshape(shape).astype(bool))
    if pos != len(buf):
        raise ShapeError(f"{path}: trailing bytes after last layer")
    return NetworkState(tuple(kinds), tuple(ws), tuple(bs), tuple(ms))
