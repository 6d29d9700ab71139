"""Minimal numpy CNN engine: conv/relu/maxpool/flatten/dense layers, a softmax
cross-entropy head, and plain (masked) SGD.

Arrays are plain ``numpy.ndarray`` in NCHW layout. Conv weights are stored as
``[out_channels, in_channels, K, K]`` and dense weights as ``[out, in]``.
Training runs in float32; ``Model.astype(np.float64)`` gives the double
precision path used by gradient checks.
"""
from __future__ import annotations

import copy
import enum
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._io import atomic_write_bytes


class ShapeError(ValueError):
    """Raised when tensor or layer dimensions do not compose."""


class FilterStatus(str, enum.Enum):
    ACTIVE = "active"
    ATTENUATED = "attenuated"
    PRUNED = "pruned"


@dataclass
class FilterState:
    status: FilterStatus = FilterStatus.ACTIVE
    attenuation_count: int = 0
    recovery_count: int = 0


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv2D:
    """Convolution layer owning one filter bank plus per-filter pruning state."""

    kind = "conv"

    def __init__(self, weights, bias, stride=1, padding=0, states=None):
        weights = np.asarray(weights)
        bias = np.asarray(bias)
        if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
            raise ShapeError(f"conv weights must be [F, C, K, K], got {weights.shape}")
        if min(weights.shape) < 1:
            raise ShapeError(f"conv weights need positive dims, got {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[0]} filters")
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.weights = weights
        self.bias = bias
        self.stride = int(stride)
        self.padding = int(padding)
        if states is None:
            states = [FilterState() for _ in range(weights.shape[0])]
        if len(states) != weights.shape[0]:
            raise ShapeError("one FilterState per filter required")
        self.states = states
        self.grad_weights = None
        self.grad_bias = None
        self._input = None

    @classmethod
    def init(cls, rng, in_channels, out_channels, kernel_size=3, stride=1, padding=1,
             dtype=np.float32):
        fan_in = in_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=(out_channels, in_channels, kernel_size, kernel_size))
        return cls(w.astype(dtype), np.zeros(out_channels, dtype=dtype), stride, padding)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {c}")
        k = self.kernel_size
        ho = conv_output_size(h, k, self.stride, self.padding)
        wo = conv_output_size(w, k, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {k} (pad {self.padding})")
        return (self.out_channels, ho, wo)

    def forward(self, x):
        self._input = x
        return conv2d_forward(x, self)

    def backward(self, grad_output):
        grad_input, self.grad_weights, self.grad_bias = conv2d_backward(
            self._input, self, grad_output)
        return grad_input

    def params(self):
        return [self.weights, self.bias]


class ReLU:
    kind = "relu"

    def __init__(self):
        self._mask = None

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad_output):
        return np.where(self._mask, grad_output, 0).astype(grad_output.dtype, copy=False)

    def params(self):
        return []


class MaxPool2D:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool"

    def __init__(self):
        self._argmax = None
        self._in_shape = None

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool needs spatial size >= 2, got {h}x{w}")
        return (c, h // 2, w // 2)

    def _windows(self, x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        xr = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
        return xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool expects NCHW input, got {x.shape}")
        self._in_shape = x.shape
        win = self._windows(x)
        self._argmax = np.argmax(win, axis=-1)
        return np.take_along_axis(win, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad_output):
        n, c, h, w = self._in_shape
        ho, wo = h // 2, w // 2
        win = np.zeros((n, c, ho, wo, 4), dtype=grad_output.dtype)
        np.put_along_axis(win, self._argmax[..., None], grad_output[..., None], axis=-1)
        win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        grad_input = np.zeros(self._in_shape, dtype=grad_output.dtype)
        grad_input[:, :, :2 * ho, :2 * wo] = win.reshape(n, c, 2 * ho, 2 * wo)
        return grad_input

    def params(self):
        return []


class Flatten:
    kind = "flatten"

    def __init__(self):
        self._in_shape = None

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_output):
        return grad_output.reshape(self._in_shape)

    def params(self):
        return []


class Dense:
    kind = "dense"

    def __init__(self, weights, bias):
        weights = np.asarray(weights)
        bias = np.asarray(bias)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise ShapeError(f"dense weights {weights.shape} / bias {bias.shape} mismatch")
        self.weights = weights
        self.bias = bias
        self.grad_weights = None
        self.grad_bias = None
        self._input = None

    @classmethod
    def init(cls, rng, in_features, out_features, dtype=np.float32):
        w = rng.normal(0.0, np.sqrt(1.0 / in_features), size=(out_features, in_features))
        return cls(w.astype(dtype), np.zeros(out_features, dtype=dtype))

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weights.shape[1],):
            raise ShapeError(f"dense expects ({self.weights.shape[1]},), got {tuple(in_shape)}")
        return (self.weights.shape[0],)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weights.shape[1]:
            raise ShapeError(f"dense expects [N, {self.weights.shape[1]}], got {x.shape}")
        self._input = x
        return x @ self.weights.T + self.bias

    def backward(self, grad_output):
        self.grad_weights = grad_output.T @ self._input
        self.grad_bias = grad_output.sum(axis=0)
        return grad_output @ self.weights

    def params(self):
        return [self.weights, self.bias]


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, ReLU, MaxPool2D, Flatten, Dense)}


# ---------------------------------------------------------------------------
# convolution kernels
# ---------------------------------------------------------------------------


def _padded_windows(x, layer):
    p, s, k = layer.padding, layer.stride, layer.kernel_size
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho = conv_output_size(x.shape[2], k, s, p)
    wo = conv_output_size(x.shape[3], k, s, p)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    return xp.shape, win


def _check_conv_input(x, layer):
    if x.ndim != 4:
        raise ShapeError(f"conv expects NCHW input, got shape {x.shape}")
    layer.output_shape(x.shape[1:])


def conv2d_forward(x, layer):
    """Cross-correlate ``x`` [N, C, H, W] with ``layer`` -> [N, F, H', W']."""
    _check_conv_input(x, layer)
    _, win = _padded_windows(x, layer)
    out = np.tensordot(win, layer.weights, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + layer.bias[None, :, None, None]


def conv2d_backward(x, layer, grad_output):
    """Return ``(grad_input, grad_weights, grad_bias)`` for ``conv2d_forward``."""
    _check_conv_input(x, layer)
    expected = (x.shape[0],) + layer.output_shape(x.shape[1:])
    if grad_output.shape != expected:
        raise ShapeError(f"grad_output shape {grad_output.shape}, expected {expected}")
    padded_shape, win = _padded_windows(x, layer)
    grad_weights = np.tensordot(grad_output, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = grad_output.sum(axis=(0, 2, 3))

    s, k, p = layer.stride, layer.kernel_size, layer.padding
    _, _, ho, wo = grad_output.shape
    # cols: [N, Ho, Wo, C, K, K]
    cols = np.tensordot(grad_output, layer.weights, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    grad_padded = np.zeros(padded_shape, dtype=np.result_type(grad_output, layer.weights))
    for i in range(k):
        for j in range(k):
            grad_padded[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, i, j]
    h, w = x.shape[2], x.shape[3]
    grad_input = grad_padded[:, :, p:p + h, p:p + w]
    return grad_input, grad_weights, grad_bias


# ---------------------------------------------------------------------------
# loss and updates
# ---------------------------------------------------------------------------


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, labels):
    """Softmax cross-entropy.

    For a single logit vector and integer label returns ``(loss, softmax - onehot)``.
    For a batch ``[N, n_classes]`` the loss and gradient are averaged over N.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
        labels = np.asarray([labels])
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    losses = log_norm - z[rows, labels]
    grad = softmax(logits)
    grad[rows, labels] -= 1
    if single:
        return float(losses[0]), grad[0]
    n = len(labels)
    return float(losses.mean()), grad / n


def sgd_step_masked(layer, grad_weights, grad_bias, mask, lr):
    """In-place ``W_i <- W_i - lr * (dC/dW_i * mask_i)`` for every filter i.

    The bias of filter i is updated with the same mask factor.
    """
    mask = np.asarray(mask, dtype=layer.weights.dtype)
    if mask.shape != (layer.weights.shape[0],):
        raise ShapeError(f"mask length {mask.shape} != {layer.weights.shape[0]} filters")
    wmask = mask.reshape((-1,) + (1,) * (layer.weights.ndim - 1))
    layer.weights -= lr * (grad_weights * wmask)
    layer.bias -= lr * (grad_bias * mask)
    return layer


def sgd_step(layer, lr):
    layer.weights -= lr * layer.grad_weights
    layer.bias -= lr * layer.grad_bias


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Model:
    """Sequential stack of layers ending in logits (softmax-xent is applied by the trainer)."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layer_shapes()  # validates composition
        # pre-zeroing copies of the filters pruned by the latest prune call
        self.prune_snapshot = None

    def layer_shapes(self):
        """Input shape of every layer followed by the output shape of the last one."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        if len(shapes[-1]) != 1:
            raise ShapeError(f"model must end in a flat logit vector, got {shapes[-1]}")
        return shapes

    @property
    def n_classes(self):
        return self.layer_shapes()[-1][0]

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params():
                return layer.params()[0].dtype
        return np.dtype(np.float32)

    def conv_layers(self):
        return [layer for layer in self.layers if isinstance(layer, Conv2D)]

    def conv_positions(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv2D)]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def predict(self, x, batch_size=256):
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes), self.dtype)

    def astype(self, dtype):
        clone = self.copy()
        for layer in clone.layers:
            if layer.params():
                layer.weights = layer.weights.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
        return clone

    def copy(self):
        return copy.deepcopy(self)

    def parameter_count(self):
        return sum(p.size for layer in self.layers for p in layer.params())

    def mac_count(self):
        """Multiply-accumulates for one forward pass of a single input."""
        total = 0
        for layer, out_shape in zip(self.layers, self.layer_shapes()[1:]):
            if isinstance(layer, Conv2D):
                f, ho, wo = out_shape
                total += f * ho * wo * layer.in_channels * layer.kernel_size ** 2
            elif isinstance(layer, Dense):
                total += layer.weights.size
        return total


def build_desk_model(input_shape, n_classes, seed, channels=(8, 16), dtype=np.float32):
    """conv(c1, 3x3)-relu-pool-conv(c2, 3x3)-relu-pool-dense, zero-padded convs."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = []
    for out_c in channels:
        layers += [Conv2D.init(rng, c, out_c, 3, 1, 1, dtype), ReLU(), MaxPool2D()]
        c, h, w = out_c, h // 2, w // 2
    layers += [Flatten(), Dense.init(rng, c * h * w, n_classes, dtype)]
    return Model(layers, input_shape)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def train_step(model, x, y, lr, conv_masks=None):
    logits = model.forward(x)
    loss, grad = softmax_xent(logits, y)
    model.backward(grad.astype(logits.dtype, copy=False))
    ci = 0
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            mask = conv_masks[ci] if conv_masks is not None else np.ones(layer.out_channels)
            sgd_step_masked(layer, layer.grad_weights, layer.grad_bias, mask, lr)
            ci += 1
        elif layer.params():
            sgd_step(layer, lr)
    if not np.isfinite(loss):
        raise FloatingPointError("training diverged (non-finite loss)")
    return loss


def train_epochs(model, dataset, config, rng, epochs=None, conv_masks=None):
    """Run ``epochs`` passes of minibatch SGD; returns the mean loss of the last epoch."""
    epochs = config.epochs if epochs is None else epochs
    x = dataset.images.astype(model.dtype, copy=False)
    y = dataset.labels
    loss = float("nan")
    for _ in range(epochs):
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            losses.append(train_step(model, x[idx], y[idx], config.learning_rate, conv_masks))
        loss = float(np.mean(losses)) if losses else loss
    return loss


def evaluate(model, dataset, batch_size=256):
    """Fraction of correctly classified samples."""
    if len(dataset.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = model.predict(dataset.images.astype(model.dtype, copy=False), batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model, path):
    """Write ``model`` as an uncompressed ``.npz`` archive.

    Layout: ``meta`` holds UTF-8 JSON (version, input_shape, layer kinds,
    conv stride/padding); ``L{i}.weights`` / ``L{i}.bias`` hold raw parameter
    arrays; ``L{i}.states`` is an int64 ``[F, 3]`` table of
    (status code, attenuation_count, recovery_count) for conv layers.
    """
    status_codes = {s: i for i, s in enumerate(FilterStatus)}
    meta = {"version": CHECKPOINT_VERSION, "input_shape": list(model.input_shape), "layers": []}
    arrays = {}
    for i, layer in enumerate(model.layers):
        entry = {"kind": layer.kind}
        if isinstance(layer, Conv2D):
            entry.update(stride=layer.stride, padding=layer.padding)
            arrays[f"L{i}.states"] = np.array(
                [[status_codes[s.status], s.attenuation_count, s.recovery_count]
                 for s in layer.states], dtype=np.int64).reshape(-1, 3)
        if layer.params():
            arrays[f"L{i}.weights"] = layer.weights
            arrays[f"L{i}.bias"] = layer.bias
        meta["layers"].append(entry)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(Path(path), buf.getvalue())


def load_checkpoint(path):
    statuses = list(FilterStatus)
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        layers = []
        for i, entry in enumerate(meta["layers"]):
            kind = entry["kind"]
            if kind == "conv":
                states = [FilterState(statuses[int(c)], int(a), int(r))
                          for c, a, r in data[f"L{i}.states"]]
                layers.append(Conv2D(data[f"L{i}.weights"].copy(), data[f"L{i}.bias"].copy(),
                                     entry["stride"], entry["padding"], states))
            elif kind == "dense":
                layers.append(Dense(data[f"L{i}.weights"].copy(), data[f"L{i}.bias"].copy()))
            elif kind in LAYER_KINDS:
                layers.append(LAYER_KINDS[kind]())
            else:
                raise ValueError(f"unknown layer kind {kind!r} in checkpoint")
    return Model(layers, meta["input_shape"])


def models_equal(a, b):
    """Bit-exact comparison of architecture, parameters and filter states."""
    if a.input_shape != b.input_shape or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.kind != lb.kind:
            return False
        for pa, pb in zip(la.params(), lb.params()):
            if pa.dtype != pb.dtype or pa.shape != pb.shape or pa.tobytes() != pb.tobytes():
                return False
        if isinstance(la, Conv2D):
            if (la.stride, la.padding) != (lb.stride, lb.padding) or la.states != lb.states:
                return False
    return True
