"""A small numpy forward-pass engine for checking quantization end to end.

Models are a list of dense / conv2d / relu layers.  Outputs of the layers
named in ``capture_points`` pass through an optional hook, which is where
activations get quantized and de-quantized in-line.  Everything runs in
float32.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, ShapeMismatch, Truncated, VersionUnsupported

DTYPE = np.float32


@dataclass(frozen=True, eq=False)
class Dense:
    layer_id: str
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    def __call__(self, x):
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.weight.shape[1]:
            raise ShapeMismatch(f"{self.layer_id}: expected {self.weight.shape[1]} inputs, got {x.shape[1]}")
        return x @ self.weight.T + self.bias

    def out_channels(self, in_shape):
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class Conv2d:
    layer_id: str
    weight: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray
    padding: int = 0

    def __call__(self, x):
        if x.ndim != 4 or x.shape[1] != self.weight.shape[1]:
            raise ShapeMismatch(f"{self.layer_id}: expected (B, {self.weight.shape[1]}, H, W), got {x.shape}")
        return conv2d(x, self.weight, self.bias, self.padding)

    def out_channels(self, in_shape):
        return self.weight.shape[0]


@dataclass(frozen=True)
class ReLU:
    layer_id: str

    def __call__(self, x):
        return np.maximum(x, 0)

    def out_channels(self, in_shape):
        return in_shape[1]


def conv2d(x, weight, bias, padding=0):
    """Stride-1 convolution via im2col.  ``x`` is (B, C, H, W)."""
    b, c, h, w = x.shape
    oc, _, k, _ = weight.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if oh <= 0 or ow <= 0:
        raise ShapeMismatch("kernel larger than padded input")
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,oh,ow,k,k
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * k * k)
    out = cols @ weight.reshape(oc, -1).T + bias
    return out.reshape(b, oh, ow, oc).transpose(0, 3, 1, 2)


def softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ToyModel:
    layers: tuple
    capture_points: tuple
    input_shape: tuple  # per sample, without the batch axis
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "capture_points", tuple(self.capture_points))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        ids = [layer.layer_id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError("layer ids must be unique")
        missing = set(self.capture_points) - set(ids)
        if missing:
            raise ValueError(f"unknown capture points: {sorted(missing)}")
        # capture points are ranked in forward order
        order = {lid: i for i, lid in enumerate(ids)}
        object.__setattr__(self, "capture_points", tuple(sorted(self.capture_points, key=order.get)))
        shapes = {}
        x = np.zeros((1,) + self.input_shape, dtype=DTYPE)
        for layer in self.layers:
            x = layer(x)
            shapes[layer.layer_id] = x.shape[1:]
        object.__setattr__(self, "_shapes", shapes)

    def output_shape(self, layer_id):
        return self._shapes[layer_id]

    def channel_count(self, layer_id):
        return int(self._shapes[layer_id][0])

    def __eq__(self, other):
        if not isinstance(other, ToyModel):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


@dataclass(frozen=True, eq=False)
class ToyDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=DTYPE)
        labels = np.asarray(self.labels, dtype=np.int64)
        if len(samples) == 0 or len(samples) != len(labels):
            raise ShapeMismatch("need a nonempty dataset with one label per sample")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ToyDataset(self.samples[idx], self.labels[idx], self.num_classes)

    def split(self, calib_size, seed):
        """Random calibration subset and the held-out remainder."""
        perm = np.random.default_rng(seed).permutation(len(self))
        calib_size = min(calib_size, len(self) - 1)
        return self.subset(np.sort(perm[:calib_size])), self.subset(np.sort(perm[calib_size:]))

    def __eq__(self, other):
        if not isinstance(other, ToyDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes and np.array_equal(self.samples, other.samples)
                and np.array_equal(self.labels, other.labels))


def forward(model, x, quant_hook=None):
    """Class scores (logits) for a batch.

    ``quant_hook(layer_id, activations) -> activations`` runs on the output of
    every capture point.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"input {x.shape[1:]} does not match model input {model.input_shape}")
    for layer in model.layers:
        x = layer(x)
        if quant_hook is not None and layer.layer_id in model.capture_points:
            out = np.asarray(quant_hook(layer.layer_id, x), dtype=DTYPE)
            if out.shape != x.shape:
                raise ShapeMismatch(f"hook changed the shape at {layer.layer_id}")
            x = out
    return x.reshape(x.shape[0], -1)


def predict(model, samples, quant_hook=None, batch_size=128):
    preds = []
    for start in range(0, len(samples), batch_size):
        preds.append(forward(model, samples[start:start + batch_size], quant_hook).argmax(axis=1))
    return np.concatenate(preds)


def evaluate_accuracy(model, dataset, quant_hook=None, batch_size=128):
    """Fraction of argmax-correct predictions.

    Hooks see one batch at a time, so per-layer scales are per batch.
    """
    preds = predict(model, dataset.samples, quant_hook, batch_size)
    return float(np.mean(preds == dataset.labels))


# -- synthetic instances -------------------------------------------------------

def make_planted_model(seed, channels=8, noise_level=0.5, n_signal=None, depth=1, samples=512):
    """Build a two-class task whose class signal lives in a few known channels.

    The input is copied to ``channels`` activation channels through ``depth``
    captured identity dense layers.  Signal channels carry ``label_sign * r``
    with ``r`` log-uniform over two decades, so small-margin samples collapse
    to zero under a coarse step.  Noise channels have zero head weight and
    values up to ``2 * noise_level`` in magnitude, which only inflates the
    layer scale.  Returns ``(model, dataset)``; ``model.meta["planted"]``
    lists the signal channels.
    """
    if channels < 2:
        raise ValueError("need at least two channels")
    rng = np.random.default_rng(seed)
    if n_signal is None:
        n_signal = max(1, channels // 4)
    planted = np.sort(rng.choice(channels, size=n_signal, replace=False))
    is_sig = np.zeros(channels, dtype=bool)
    is_sig[planted] = True

    labels = rng.permutation(np.arange(samples) % 2)
    sign = 2.0 * labels - 1.0
    margin = np.exp(rng.uniform(np.log(0.01), 0.0, size=(samples, 1)))
    x = np.zeros((samples, channels))
    x[:, is_sig] = sign[:, None] * margin * rng.uniform(0.8, 1.2, size=(samples, n_signal))
    x[:, ~is_sig] = noise_level * rng.uniform(-2.0, 2.0, size=(samples, channels - n_signal))

    layers = [Dense(f"fc{d + 1}", np.eye(channels, dtype=DTYPE), np.zeros(channels, dtype=DTYPE))
              for d in range(depth)]
    captures = [layer.layer_id for layer in layers]
    w = np.zeros((2, channels), dtype=DTYPE)
    w[1, is_sig] = 1.0
    layers.append(Dense("head", w, np.zeros(2, dtype=DTYPE)))
    model = ToyModel(layers, captures, (channels,), meta={"planted": [int(c) for c in planted], "seed": int(seed)})
    return model, ToyDataset(x.astype(DTYPE), labels, 2)


def make_random_model(seed, in_channels=2, channels=4, size=6, num_classes=2, samples=512):
    """Random-weight conv net on random images; accuracy should sit near chance."""
    rng = np.random.default_rng(seed)
    conv = Conv2d("conv1", rng.normal(0, 0.5, (channels, in_channels, 3, 3)).astype(DTYPE),
                  rng.normal(0, 0.1, channels).astype(DTYPE), padding=1)
    head = Dense("head", rng.normal(0, 0.5, (num_classes, channels * size * size)).astype(DTYPE),
                 np.zeros(num_classes, dtype=DTYPE))
    model = ToyModel([conv, ReLU("relu1"), head], ["relu1"], (in_channels, size, size), meta={"seed": int(seed)})
    data = rng.normal(0, 1, (samples, in_channels, size, size)).astype(DTYPE)
    labels = rng.permutation(np.arange(samples) % num_classes)
    return model, ToyDataset(data, labels, num_classes)


# -- binary formats --------------------------------------------------------------
# Little-endian throughout.  Model: "DQAM" u16 version, u16 layer count,
# input shape, layers, capture points.  Dataset: "DQAD" u16 version, u32
# classes, u32 count, sample shape, f32 samples, u32 labels.

MODEL_MAGIC = b"DQAM"
DATASET_MAGIC = b"DQAD"
FORMAT_VERSION = 1
_KINDS = {Dense: 0, Conv2d: 1, ReLU: 2}


def _put_str(buf, s):
    raw = s.encode()
    buf.write(struct.pack("<H", len(raw)) + raw)


def _put_shape(buf, shape):
    buf.write(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))


def _put_array(buf, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    _put_shape(buf, arr.shape)
    buf.write(arr.tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, size):
        if self.pos + size > len(self.data):
            raise Truncated(f"needed {size} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self):
        (ln,) = self.unpack("<H")
        return self.take(ln).decode()

    def shape(self):
        (nd,) = self.unpack("<B")
        return self.unpack(f"<{nd}I")

    def array(self, dtype="<f4"):
        shape = self.shape()
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).reshape(shape).astype(DTYPE)


def _check_header(r, magic):
    got = r.take(4)
    if got != magic:
        raise BadMagic(f"expected {magic!r}, got {got!r}")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"version {version} not supported")


def to_bytes(model):
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC + struct.pack("<HH", FORMAT_VERSION, len(model.layers)))
    _put_shape(buf, model.input_shape)
    for layer in model.layers:
        buf.write(struct.pack("<B", _KINDS[type(layer)]))
        _put_str(buf, layer.layer_id)
        if isinstance(layer, (Dense, Conv2d)):
            _put_array(buf, layer.weight)
            _put_array(buf, layer.bias)
        if isinstance(layer, Conv2d):
            buf.write(struct.pack("<B", layer.padding))
    buf.write(struct.pack("<H", len(model.capture_points)))
    for cp in model.capture_points:
        _put_str(buf, cp)
    return buf.getvalue()


def from_bytes(data):
    r = _Reader(data)
    _check_header(r, MODEL_MAGIC)
    (count,) = r.unpack("<H")
    input_shape = r.shape()
    layers = []
    for _ in range(count):
        (kind,) = r.unpack("<B")
        lid = r.string()
        if kind == 0:
            layers.append(Dense(lid, r.array(), r.array()))
        elif kind == 1:
            weight, bias = r.array(), r.array()
            layers.append(Conv2d(lid, weight, bias, r.unpack("<B")[0]))
        elif kind == 2:
            layers.append(ReLU(lid))
        else:
            raise ValueError(f"unknown layer kind {kind}")
    (ncap,) = r.unpack("<H")
    captures = [r.string() for _ in range(ncap)]
    return ToyModel(layers, captures, input_shape)


def dataset_to_bytes(ds):
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC + struct.pack("<HII", FORMAT_VERSION, ds.num_classes, len(ds)))
    _put_array(buf, ds.samples)
    buf.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    return buf.getvalue()


def dataset_from_bytes(data):
    r = _Reader(data)
    _check_header(r, DATASET_MAGIC)
    num_classes, count = r.unpack("<II")
    samples = r.array()
    labels = np.frombuffer(r.take(4 * count), dtype="<u4").astype(np.int64)
    return ToyDataset(samples, labels, num_classes)
