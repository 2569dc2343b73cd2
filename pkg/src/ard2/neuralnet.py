"""Five-layer convolutional contour network in plain numpy.

Architecture: channels 1 -> 16 -> 32 -> 32 -> 16 -> 1, 3x3 kernels, stride 1,
zero padding 1, ReLU after the first four layers and a logistic output. The
network is fully convolutional, so the same parameters run on any square
input; the nominal input size is recorded in :class:`NetworkParams`.

Weight file layout (all little-endian)::

    8 bytes   magic  b"ARD2CNN1"
    uint32    number of layers (5)
    uint32    nominal input size
    5 x 4 x uint32   out_channels, in_channels, kernel_h, kernel_w per layer
    float64[] weights then biases of layer 1, then layer 2, ...
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFile, EmptyDataset, IoFailure, ShapeMismatch

CHANNELS = (1, 16, 32, 32, 16, 1)
KERNEL = 3
INPUT_SIZE = 60
EPS = 1e-7
MOMENTUM = 0.9
MAGIC = b"ARD2CNN1"

N_PARAMS = sum(o * i * KERNEL * KERNEL + o for i, o in zip(CHANNELS[:-1], CHANNELS[1:]))


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_size: int = INPUT_SIZE

    def __post_init__(self):
        if len(self.weights) != len(CHANNELS) - 1 or len(self.biases) != len(self.weights):
            raise ShapeMismatch("expected five convolution layers")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (CHANNELS[k + 1], CHANNELS[k], KERNEL, KERNEL)
            if w.shape != shape or b.shape != (CHANNELS[k + 1],):
                raise ShapeMismatch(f"layer {k}: weights {w.shape}, biases {b.shape}; expected {shape}")

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> NetworkParams:
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.input_size)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in zip(self.weights, self.biases) for a in (w, b)])

    def equals(self, other: NetworkParams) -> bool:
        """Bitwise equality of every weight and bias."""
        return self.input_size == other.input_size and all(
            np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


def init_params(seed=0, input_size: int = INPUT_SIZE) -> NetworkParams:
    """Fan-in scaled uniform weights, ``U(-b, b)`` with ``b = sqrt(1 / (in * 9))``; zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for c_in, c_out in zip(CHANNELS[:-1], CHANNELS[1:]):
        bound = math.sqrt(1.0 / (c_in * KERNEL * KERNEL))
        weights.append(rng.uniform(-bound, bound, size=(c_out, c_in, KERNEL, KERNEL)))
        biases.append(np.zeros(c_out))
    params = NetworkParams(weights, biases, input_size)
    assert params.size == N_PARAMS
    return params


def zero_params(input_size: int = INPUT_SIZE) -> NetworkParams:
    return NetworkParams(
        [np.zeros((o, i, KERNEL, KERNEL)) for i, o in zip(CHANNELS[:-1], CHANNELS[1:])],
        [np.zeros(o) for o in CHANNELS[1:]],
        input_size,
    )


# Activations are kept channels-last and zero-padded, (B, n + 2, n + 2, C).
# Flattened, the 3x3 tap (i, j) of output pixel a reads input row
# a + i * (n + 2) + j. A convolution is then either one matrix product over
# the nine shifted row blocks placed side by side (cheaper when C < O), or
# one product followed by nine shifted accumulations of its output (cheaper
# when C >= O). Rows that fall in the padding are discarded.


def _offsets(n):
    return [i * (n + 2) + j for i in range(KERNEL) for j in range(KERNEL)]


def _conv_padded(padded, w):
    # padded: (B, n+2, n+2, C); w: (O, C, 3, 3) -> (B, n, n, O)
    bsz, n2, _, c = padded.shape
    n = n2 - 2
    o = w.shape[0]
    flat = padded.reshape(-1, c)
    offs = _offsets(n)
    span = flat.shape[0] - offs[-1]
    out = np.zeros((flat.shape[0], o), dtype=flat.dtype)
    if c < o:
        cols = np.concatenate([flat[off:off + span] for off in offs], axis=1)
        out[:span] = cols @ w.transpose(2, 3, 1, 0).reshape(KERNEL * KERNEL * c, o)
    else:
        taps = flat @ w.transpose(1, 2, 3, 0).reshape(c, KERNEL * KERNEL * o)
        for k, off in enumerate(offs):
            out[:span] += taps[off:off + span, k * o:(k + 1) * o]
    return out.reshape(bsz, n2, n2, o)[:, :n, :n]


def _conv_backward(padded, w, delta, need_input_grad=True):
    """Weight, bias and (optionally) input gradients of :func:`_conv_padded`."""
    bsz, n2, _, c = padded.shape
    n = n2 - 2
    o = w.shape[0]
    flat = padded.reshape(-1, c)
    offs = _offsets(n)
    span = flat.shape[0] - offs[-1]
    d_full = np.zeros((bsz, n2, n2, o), dtype=padded.dtype)
    d_full[:, :n, :n] = delta
    d_flat = d_full.reshape(-1, o)
    gw = np.stack([flat[off:off + span].T @ d_flat[:span] for off in offs])
    gw = gw.reshape(KERNEL, KERNEL, c, o).transpose(3, 2, 0, 1)
    gb = delta.sum(axis=(0, 1, 2))
    if not need_input_grad:
        return gw, gb, None
    back = d_flat @ w.transpose(0, 2, 3, 1).reshape(o, KERNEL * KERNEL * c)
    g_in = np.zeros((flat.shape[0], c), dtype=flat.dtype)
    for k, off in enumerate(offs):
        g_in[off:off + span] += back[:span, k * c:(k + 1) * c]
    return gw, gb, g_in.reshape(bsz, n2, n2, c)[:, 1:n + 1, 1:n + 1]


def _pad(h):
    return np.pad(h, ((0, 0), (1, 1), (1, 1), (0, 0)))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _check_batch(params, x, dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    n = params.input_size
    if x.ndim != 3 or x.shape[1:] != (n, n):
        raise ShapeMismatch(f"expected {n}x{n} input, got shape {x.shape}")
    return x[..., None]


def _forward(params, x):
    """Padded layer inputs, hidden activations and the (B, n, n, 1) output."""
    inputs, acts = [], []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        padded = _pad(h)
        inputs.append(padded)
        z = _conv_padded(padded, w) + b
        h = _sigmoid(z) if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return inputs, acts


def forward(params: NetworkParams, img, dtype=np.float64) -> np.ndarray:
    """Predicted contour for one image, or a batch of shape ``(B, n, n)``.

    ``dtype=np.float32`` runs the arithmetic in single precision (about
    twice as fast); the result is returned as float64 either way.
    """
    single = np.ndim(img) == 2
    dtype = np.dtype(dtype)
    work = params if dtype == np.float64 else _cast(params, dtype)
    _, acts = _forward(work, _check_batch(params, img, dtype))
    out = acts[-1][..., 0].astype(np.float64)
    return out[0] if single else out


def loss_bce(pred, target) -> float:
    """Mean per-pixel binary cross-entropy, predictions clamped to [1e-7, 1 - 1e-7]."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    p = np.clip(pred, EPS, 1.0 - EPS)
    return float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log1p(-p))))


def _loss_and_grads(params, x, t):
    """Batch-mean loss, per-sample losses and exact gradients (x, t: (B, n, n, 1))."""
    inputs, acts = _forward(params, x)
    pred = acts[-1]
    p = np.clip(pred, EPS, 1.0 - EPS)
    per_pixel = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    per_sample = per_pixel.reshape(len(x), -1).mean(axis=1)
    # d loss / d logit; zero where the clamp is active
    live = (pred > EPS) & (pred < 1.0 - EPS)
    delta = np.where(live, (pred - t) / per_pixel.size, 0.0)
    n_layers = len(params.weights)
    grads_w, grads_b = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        grads_w[k], grads_b[k], g_in = _conv_backward(inputs[k], params.weights[k], delta, need_input_grad=k > 0)
        if k > 0:
            delta = g_in * (acts[k - 1] > 0.0)
    return float(per_sample.mean()), per_sample, NetworkParams(grads_w, grads_b, params.input_size)


def backward(params: NetworkParams, img, target) -> NetworkParams:
    """Exact gradients of ``loss_bce(forward(params, img), target)``.

    A batch ``(B, n, n)`` gives the gradient of the batch-mean loss.
    """
    x = _check_batch(params, img)
    t = np.asarray(target, dtype=float)
    t = t[None, ..., None] if t.ndim == 2 else t[..., None]
    if t.shape != x.shape:
        raise ShapeMismatch(f"target shape {t.shape[2:]} does not match input {x.shape[2:]}")
    return _loss_and_grads(params, x, t)[2]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    l2_weight: float = 0.0
    fine_tune_scale: float = 0.1
    # arithmetic precision of the forward/backward passes during training;
    # parameters and momentum are always kept in float64
    compute_dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError(f"compute_dtype must be float32 or float64, got {self.compute_dtype!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")

    def fine_tune(self, **changes) -> TrainConfig:
        """Config for the fine-tuning phase: learning rate scaled by ``fine_tune_scale``."""
        values = dict(self.__dict__, learning_rate=self.learning_rate * self.fine_tune_scale)
        values.update(changes)
        return TrainConfig(**values)


def _cast(params, dtype):
    return NetworkParams(
        [w.astype(dtype) for w in params.weights], [b.astype(dtype) for b in params.biases], params.input_size
    )


def train(params: NetworkParams, dataset, config: TrainConfig, callback=None):
    """Mini-batch gradient descent with classical momentum 0.9.

    ``dataset`` holds objects with ``input`` and ``target`` arrays. Batches
    follow a per-epoch permutation drawn from ``config.seed``. Returns the
    trained copy of ``params`` and the per-epoch mean training loss (each
    sample's loss is taken before the update of its batch).
    """
    if not dataset:
        raise EmptyDataset("cannot train on an empty dataset")
    params = params.copy()
    dtype = np.dtype(config.compute_dtype)
    inputs = np.stack([np.asarray(s.input, dtype=dtype) for s in dataset])
    targets = np.stack([np.asarray(s.target, dtype=dtype) for s in dataset])
    n = params.input_size
    if inputs.shape[1:] != (n, n) or targets.shape[1:] != (n, n):
        raise ShapeMismatch(f"dataset images must be {n}x{n}")
    rng = np.random.default_rng(config.seed)
    velocity = [np.zeros_like(a) for a in params.weights + params.biases]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = np.empty(len(dataset))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            work = params if dtype == np.float64 else _cast(params, dtype)
            _, per_sample, grads = _loss_and_grads(work, inputs[idx, ..., None], targets[idx, ..., None])
            losses[idx] = per_sample
            tensors = params.weights + params.biases
            gtensors = grads.weights + grads.biases
            for k, (p, g) in enumerate(zip(tensors, gtensors)):
                if config.l2_weight and k < len(params.weights):
                    g = g + config.l2_weight * p
                velocity[k] *= MOMENTUM
                velocity[k] -= config.learning_rate * g
                p += velocity[k]
        history.append(float(losses.mean()))
        if callback is not None:
            callback(epoch, history[-1], params)
    return params, history


def predict_batch(params: NetworkParams, images, batch_size: int = 32) -> np.ndarray:
    images = np.asarray(images, dtype=float)
    return np.concatenate([forward(params, images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def save_params(params: NetworkParams, destination) -> None:
    header = MAGIC + struct.pack("<II", len(params.weights), params.input_size)
    for w in params.weights:
        header += struct.pack("<4I", *w.shape)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for w, b in zip(params.weights, params.biases) for a in (w, b)
    )
    try:
        Path(destination).write_bytes(header + body)
    except OSError as exc:
        raise IoFailure(f"cannot write weights to {destination}: {exc}") from exc


def load_params(source) -> NetworkParams:
    try:
        raw = Path(source).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read weights from {source}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CorruptFile(f"{source}: bad magic")
    pos = 8
    if len(raw) < pos + 8:
        raise CorruptFile(f"{source}: truncated header")
    n_layers, input_size = struct.unpack_from("<II", raw, pos)
    pos += 8
    if n_layers != len(CHANNELS) - 1:
        raise CorruptFile(f"{source}: {n_layers} layers, expected {len(CHANNELS) - 1}")
    if len(raw) < pos + 16 * n_layers:
        raise CorruptFile(f"{source}: truncated header")
    shapes = []
    for k in range(n_layers):
        shape = struct.unpack_from("<4I", raw, pos)
        pos += 16
        if shape != (CHANNELS[k + 1], CHANNELS[k], KERNEL, KERNEL):
            raise CorruptFile(f"{source}: layer {k} has shape {shape}, architecture mismatch")
        shapes.append(shape)
    expected = pos + 8 * N_PARAMS
    if len(raw) != expected:
        raise CorruptFile(f"{source}: expected {expected} bytes, found {len(raw)}")
    weights, biases = [], []
    for shape in shapes:
        count = int(np.prod(shape))
        weights.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float))
        pos += 8 * count
        biases.append(np.frombuffer(raw, dtype="<f8", count=shape[0], offset=pos).astype(float))
        pos += 8 * shape[0]
    return NetworkParams(weights, biases, input_size)
