"""Uniform symmetric activation quantization: the Direct method and DQA.

One step size per layer is derived from the layer's largest magnitude.
Unimportant channels are rounded straight to ``n`` bits.  Important channels
are rounded at ``n + m`` bits and arithmetically right-shifted by ``m``; the
``m`` low bits that fall off are kept as shifting-error symbols, entropy
coded, and added back (as ``low / 2**m`` steps) at de-quantization.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import huffman
from .errors import AllZeroLayer, ConfigMismatch, CorruptStream, OutOfRange, ShapeMismatch


class HuffmanMode(str, Enum):
    DYNAMIC = "dynamic"
    STATIC = "static"


@dataclass(frozen=True)
class QuantConfig:
    target_bits: int = 3
    extra_bits: int = 3
    important_ratio: float = 0.5
    huffman_mode: HuffmanMode = HuffmanMode.DYNAMIC

    def __post_init__(self):
        if not 1 <= self.target_bits <= 8:
            raise ValueError(f"target_bits must be in 1..8, got {self.target_bits}")
        if not 0 <= self.extra_bits <= self.target_bits:
            raise ValueError(f"extra_bits must be in 0..target_bits, got {self.extra_bits}")
        if not 0.0 <= self.important_ratio <= 1.0:
            raise ValueError(f"important_ratio must be in [0, 1], got {self.important_ratio}")
        object.__setattr__(self, "huffman_mode", HuffmanMode(self.huffman_mode))

    @property
    def n(self):
        return self.target_bits

    @property
    def m(self):
        return self.extra_bits


@dataclass(frozen=True, eq=False)
class ActivationTensor:
    """One layer's activations as a ``(channels, channel_len)`` float64 array."""

    layer_id: str
    channels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.channels, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ShapeMismatch(f"expected a nonempty (channels, length) array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("activations must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "channels", arr)

    @classmethod
    def from_feature_map(cls, layer_id, acts):
        """Gather a ``(batch, C, ...)`` activation map into per-channel rows."""
        acts = np.asarray(acts)
        return cls(layer_id, np.moveaxis(acts, 1, 0).reshape(acts.shape[1], -1))

    def to_feature_map(self, shape):
        batch_first = (shape[1], shape[0]) + tuple(shape[2:])
        return np.moveaxis(self.channels.reshape(batch_first), 0, 1)

    @property
    def channel_count(self):
        return self.channels.shape[0]

    @property
    def channel_len(self):
        return self.channels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ActivationTensor):
            return NotImplemented
        return self.layer_id == other.layer_id and np.array_equal(self.channels, other.channels)


@dataclass(frozen=True)
class ScaleParams:
    """Step sizes at ``n`` and ``n + m`` bits from one layer magnitude.

    ``absmax`` is held at float32 precision because that is what a blob
    stores; both steps are exact power-of-two divisions of it.
    """

    absmax: float
    n: int
    m: int

    @property
    def delta_n(self):
        return self.absmax / 2.0 ** (self.n - 1)

    @property
    def delta_nm(self):
        return self.absmax / 2.0 ** (self.n + self.m - 1)

    @property
    def is_zero(self):
        return self.absmax == 0.0


@dataclass(frozen=True)
class ShiftResult:
    shifted: int
    low_bits: int


@dataclass(frozen=True, eq=False)
class ErrorLookupTable:
    m: int
    entries: np.ndarray

    @classmethod
    def for_bits(cls, m):
        entries = np.arange(1 << m, dtype=np.float64) / (1 << m)
        entries.setflags(write=False)
        return cls(m, entries)


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    layer_id: str
    n: int
    m: int
    scale: ScaleParams
    important: tuple
    values: np.ndarray
    error_stream: huffman.EncodedStream = None
    huffman_table: huffman.HuffmanTable = None
    clipped: int = field(default=0, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.int8 if self.n <= 8 else np.int64)
        lo, hi = -(1 << (self.n - 1)), (1 << (self.n - 1)) - 1
        if vals.ndim != 2:
            raise ShapeMismatch("values must be (channels, channel_len)")
        if vals.size and (vals.min() < lo or vals.max() > hi):
            raise OutOfRange(f"stored value outside the {self.n}-bit signed range")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "important", tuple(sorted(int(c) for c in self.important)))

    @property
    def channel_count(self):
        return self.values.shape[0]

    @property
    def channel_len(self):
        return self.values.shape[1]

    @property
    def has_error_section(self):
        return self.error_stream is not None

    def __eq__(self, other):
        if not isinstance(other, QuantizedLayer):
            return NotImplemented
        return (
            self.layer_id == other.layer_id
            and self.n == other.n
            and self.m == other.m
            and self.scale == other.scale
            and self.important == other.important
            and np.array_equal(self.values, other.values)
            and self.error_stream == other.error_stream
            and self.huffman_table == other.huffman_table
        )


def compute_scale(tensor, n, m=0):
    absmax = float(np.float32(np.abs(tensor.channels).max()))
    if absmax == 0.0:
        raise AllZeroLayer(f"layer {tensor.layer_id!r} is all zeros")
    return ScaleParams(absmax, n, m)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _quantize_at(values, delta, bits):
    """Round at ``bits`` precision and clamp; also returns the clip mask."""
    raw = _round_half_away(np.asarray(values, dtype=np.float64) / delta)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return np.clip(raw, lo, hi).astype(np.int64), (raw < lo) | (raw > hi)


def direct_quantize(channel, delta_n, n):
    if not delta_n > 0:
        raise ValueError("delta_n must be positive")
    return _quantize_at(channel, delta_n, n)[0]


def direct_dequantize(q, delta_n):
    return delta_n * np.asarray(q, dtype=np.float64)


def shift_right_with_error(a_more, m):
    """Arithmetic right shift keeping the discarded bits.

    Works on Python ints and on integer arrays.  ``>>`` floors for negative
    operands, so ``low_bits`` is always in ``[0, 2**m)`` and
    ``shifted * 2**m + low_bits == a_more``.
    """
    if isinstance(a_more, np.ndarray):
        a_more = a_more.astype(np.int64)
        return ShiftResult(a_more >> m, a_more & ((1 << m) - 1))
    a_more = int(a_more)
    return ShiftResult(a_more >> m, a_more & ((1 << m) - 1))


def lookup_error(table, low_bits):
    low = np.asarray(low_bits)
    if low.size and (low.min() < 0 or low.max() >= len(table.entries)):
        raise OutOfRange(f"low bits must be in [0, {len(table.entries)})")
    out = table.entries[low]
    return float(out) if out.ndim == 0 else out


def dqa_quantize_layer(tensor, config, important=(), encoder=None):
    """Quantize one layer, important channels through the extra-bits path.

    ``encoder(symbols, m) -> (HuffmanTable, EncodedStream)``; the default fits
    a table to this layer's symbols (or uses ``huffman.static_encoder``
    output if passed explicitly).  An all-zero layer is stored as zeros with
    a zero scale.
    """
    n, m = config.n, config.m
    important = sorted({int(c) for c in important})
    if important and not 0 <= important[0] <= important[-1] < tensor.channel_count:
        raise OutOfRange(f"important channel index outside 0..{tensor.channel_count - 1}")
    if m == 0 and important and encoder is not None:
        raise ConfigMismatch("Huffman encoding requested for shifting errors but m = 0")

    try:
        scale = compute_scale(tensor, n, m)
    except AllZeroLayer:
        scale = ScaleParams(0.0, n, m)

    values = np.zeros(tensor.channels.shape, dtype=np.int64)
    symbols = np.zeros((len(important), tensor.channel_len), dtype=np.int64)
    clipped = 0
    is_imp = np.zeros(tensor.channel_count, dtype=bool)
    is_imp[important] = True
    use_extra = m > 0

    if not scale.is_zero:
        plain = ~is_imp if use_extra else np.ones_like(is_imp)
        q, clip = _quantize_at(tensor.channels[plain], scale.delta_n, n)
        values[plain] = q
        clipped += int(clip.sum())
        if use_extra and important:
            a_more, clip = _quantize_at(tensor.channels[important], scale.delta_nm, n + m)
            clipped += int(clip.sum())
            shift = shift_right_with_error(a_more, m)
            values[important] = shift.shifted
            symbols = shift.low_bits

    stream = table = None
    if use_extra and important:
        encode = encoder or huffman.dynamic_encoder
        table, stream = encode(symbols.ravel(), m)
    return QuantizedLayer(tensor.layer_id, n, m, scale, tuple(important), values, stream, table, clipped)


def dqa_dequantize_layer(q, decoder=None):
    """Inverse of :func:`dqa_quantize_layer`; ``decoder(stream, table) -> symbols``."""
    out = q.values.astype(np.float64)
    if q.has_error_section:
        decode = decoder or huffman.decode
        symbols = np.asarray(decode(q.error_stream, q.huffman_table))
        expected = len(q.important) * q.channel_len
        if symbols.size != expected:
            raise CorruptStream(f"decoded {symbols.size} shifting errors, expected {expected}")
        se = lookup_error(ErrorLookupTable.for_bits(q.m), symbols.reshape(len(q.important), q.channel_len))
        out[list(q.important)] += se
    return ActivationTensor(q.layer_id, q.scale.delta_n * out)


def channel_steps(q):
    """Step size actually used for each channel (``delta_nm`` for important ones)."""
    steps = np.full(q.channel_count, q.scale.delta_n)
    if q.has_error_section:
        steps[list(q.important)] = q.scale.delta_nm
    return steps


@dataclass(frozen=True)
class ErrorReport:
    mean_abs: float
    max_abs: float
    mean_re: float
    count: int
    clipped: int

    def as_dict(self):
        return {
            "mean_abs_error": self.mean_abs,
            "max_abs_error": self.max_abs,
            "mean_re": self.mean_re,
            "count": self.count,
            "clipped": self.clipped,
        }


def measure_quant_error(original, reconstructed, quantized=None):
    """Abs-error statistics plus the mean rounding error in step units.

    The rounding-error statistic needs the steps used, so it is only reported
    (otherwise NaN) when the ``QuantizedLayer`` is given; clipped elements are
    excluded from it and counted separately.
    """
    a, b = original.channels, reconstructed.channels
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    err = np.abs(a - b)
    mean_re = float("nan")
    clipped = 0
    if quantized is not None:
        if quantized.values.shape != a.shape:
            raise ShapeMismatch("quantized layer does not match the tensors")
        re, clipped = rounding_errors(a, err, quantized)
        mean_re = float(re.mean()) if re.size else 0.0
    return ErrorReport(float(err.mean()), float(err.max()), mean_re, int(err.size), clipped)


def rounding_errors(original, abs_err, q):
    """Per-element error in units of the step used, for non-clipped elements.

    Returns ``(re_values, clipped_count)``.
    """
    if q.scale.is_zero:
        return np.zeros(0), 0
    steps = channel_steps(q)[:, None]
    bits = np.where(steps == q.scale.delta_n, q.n, q.n + q.m)
    raw = _round_half_away(original / steps)
    ok = (raw >= -(2.0 ** (bits - 1))) & (raw <= 2.0 ** (bits - 1) - 1)
    return (abs_err / steps)[ok], int((~ok).sum())
