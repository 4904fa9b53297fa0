"""Canonical Huffman coding of shifting-error symbols.

Symbols are the ``m`` low bits discarded by the right shift, so the alphabet
is ``0 .. 2**m - 1``.  Tables are canonical: codes are assigned in
(length, symbol) order, which means a table is fully described by its code
lengths and serializes as ``[m: u8][length: u8] * 2**m``.

Streams serialize as ``[symbol_count: u32 LE][bit_count: u32 LE][payload]``
with the payload packed MSB-first and the last byte zero-padded.
"""

import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

from .bitio import pack_bits, unpack_bits
from .errors import (
    CorruptStream,
    EmptyHistogram,
    InvalidCode,
    SymbolOutOfRange,
    TruncatedStream,
    UncodedSymbol,
)

# Windowed decoding builds a 2**max_len lookup table; beyond this, decode bit by bit.
LUT_MAX_BITS = 16

_STREAM_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class SymbolHistogram:
    m: int
    counts: tuple

    @property
    def total(self):
        return sum(self.counts)

    def entropy(self):
        """Empirical entropy in bits per symbol."""
        total = self.total
        if total == 0:
            return 0.0
        h = 0.0
        for c in self.counts:
            if c:
                p = c / total
                h -= p * math.log2(p)
        return h

    def __add__(self, other):
        if self.m != other.m:
            raise ValueError("histograms over different alphabets")
        return SymbolHistogram(self.m, tuple(a + b for a, b in zip(self.counts, other.counts)))


@dataclass(frozen=True)
class HuffmanTable:
    """Canonical prefix code.  A length of 0 means the symbol has no code."""

    m: int
    code_lengths: tuple

    def __post_init__(self):
        if len(self.code_lengths) != 1 << self.m:
            raise ValueError("code_lengths must have 2**m entries")
        if any(not 0 <= ln <= 255 for ln in self.code_lengths):
            raise ValueError("code lengths must fit in one byte")
        if self.kraft_sum() > 1.0:
            raise ValueError("code lengths violate the Kraft inequality")

    @property
    def codes(self):
        """Canonical codes as a tuple of ints (None for uncoded symbols)."""
        try:
            return self._codes
        except AttributeError:
            pass
        codes = [None] * len(self.code_lengths)
        code = 0
        prev_len = 0
        for length, sym in sorted((ln, s) for s, ln in enumerate(self.code_lengths) if ln):
            code <<= length - prev_len
            codes[sym] = code
            code += 1
            prev_len = length
        object.__setattr__(self, "_codes", tuple(codes))
        return self._codes

    @property
    def max_length(self):
        return max(self.code_lengths)

    def code_string(self, symbol):
        ln = self.code_lengths[symbol]
        return format(self.codes[symbol], f"0{ln}b") if ln else ""

    def kraft_sum(self):
        return sum(2.0 ** -ln for ln in self.code_lengths if ln)

    def average_length(self, hist):
        total = hist.total
        if total == 0:
            return 0.0
        return sum(c * ln for c, ln in zip(hist.counts, self.code_lengths)) / total

    def size_bits(self):
        return 8 * (1 + len(self.code_lengths))

    def to_bytes(self):
        return bytes([self.m, *self.code_lengths])

    @classmethod
    def from_bytes(cls, data, offset=0):
        """Parse a table; returns ``(table, bytes_consumed)``."""
        if len(data) < offset + 1:
            raise TruncatedStream("missing Huffman table header")
        m = data[offset]
        if m > 8:
            raise CorruptStream(f"table alphabet m={m} exceeds 8 bits")
        end = offset + 1 + (1 << m)
        if len(data) < end:
            raise TruncatedStream("Huffman table truncated")
        try:
            table = cls(m, tuple(data[offset + 1:end]))
        except ValueError as exc:
            raise CorruptStream(str(exc)) from exc
        return table, end - offset


@dataclass(frozen=True)
class EncodedStream:
    bit_count: int
    data: bytes
    symbol_count: int

    def __post_init__(self):
        # Short payloads stay constructible so decode can report truncation.
        if 8 * len(self.data) >= self.bit_count + 8:
            raise ValueError("payload longer than bit_count requires")

    def to_bytes(self):
        return _STREAM_HEADER.pack(self.symbol_count, self.bit_count) + self.data

    @classmethod
    def from_bytes(cls, data, offset=0):
        """Parse a stream; returns ``(stream, bytes_consumed)``."""
        if len(data) < offset + _STREAM_HEADER.size:
            raise TruncatedStream("missing stream header")
        symbol_count, bit_count = _STREAM_HEADER.unpack_from(data, offset)
        start = offset + _STREAM_HEADER.size
        end = start + (bit_count + 7) // 8
        if len(data) < end:
            raise TruncatedStream(f"stream payload needs {end - start} bytes, have {len(data) - start}")
        return cls(bit_count, bytes(data[start:end]), symbol_count), end - offset

    def size_bits(self):
        return 8 * _STREAM_HEADER.size + 8 * len(self.data)


def build_histogram(symbols, m):
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if symbols.size and (symbols.min() < 0 or symbols.max() >= 1 << m):
        raise SymbolOutOfRange(f"symbols must lie in [0, {1 << m})")
    return SymbolHistogram(m, tuple(int(c) for c in np.bincount(symbols, minlength=1 << m)))


def _huffman_lengths(weights):
    """Code lengths for ``{symbol: weight}``; ties go to the smaller symbol."""
    if len(weights) == 1:
        return {next(iter(weights)): 1}
    # heap items: (weight, smallest symbol in subtree, symbols in subtree)
    heap = [(w, s, (s,)) for s, w in weights.items()]
    heapq.heapify(heap)
    depth = dict.fromkeys(weights, 0)
    while len(heap) > 1:
        w1, k1, syms1 = heapq.heappop(heap)
        w2, k2, syms2 = heapq.heappop(heap)
        for s in syms1 + syms2:
            depth[s] += 1
        heapq.heappush(heap, (w1 + w2, min(k1, k2), syms1 + syms2))
    return depth


def build_table(hist):
    """Optimal canonical code for the histogram; zero-count symbols get no code."""
    present = {s: c for s, c in enumerate(hist.counts) if c > 0}
    if not present:
        raise EmptyHistogram("cannot build a code from an empty histogram")
    lengths = [0] * (1 << hist.m)
    for s, ln in _huffman_lengths(present).items():
        lengths[s] = ln
    return HuffmanTable(hist.m, tuple(lengths))


def build_static_table(hist):
    """Calibration-time table that can still encode symbols never seen in calibration.

    Present symbols are coded as usual, plus one escape leaf with the smallest
    possible weight.  The escape leaf is expanded into a balanced subtree over
    every zero-count symbol, so each unseen symbol gets a code of length
    ``len(escape) + ceil(log2(unseen))`` and the table stays canonical.
    """
    size = 1 << hist.m
    unseen = [s for s, c in enumerate(hist.counts) if c == 0]
    if not unseen:
        return build_table(hist)
    if len(unseen) == size:
        return HuffmanTable(hist.m, (hist.m,) * size)
    # Escape symbol id sorts after every real symbol, so it loses weight ties.
    escape = size
    weights = {s: 2 * c for s, c in enumerate(hist.counts) if c > 0}
    weights[escape] = 1
    depth = _huffman_lengths(weights)
    extra = math.ceil(math.log2(len(unseen)))
    lengths = [0] * size
    for s, ln in depth.items():
        if s != escape:
            lengths[s] = ln
    for s in unseen:
        lengths[s] = depth[escape] + extra
    return HuffmanTable(hist.m, tuple(lengths))


def _code_matrix(table):
    width = max(1, table.max_length)
    mat = np.zeros((len(table.code_lengths), width), dtype=np.uint8)
    for s, ln in enumerate(table.code_lengths):
        if ln:
            code = table.codes[s]
            for i in range(ln):
                mat[s, i] = (code >> (ln - 1 - i)) & 1
    return mat


def encode(symbols, table):
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if symbols.size == 0:
        return EncodedStream(0, b"", 0)
    if symbols.min() < 0 or symbols.max() >= len(table.code_lengths):
        raise SymbolOutOfRange(f"symbols must lie in [0, {len(table.code_lengths)})")
    lengths = np.asarray(table.code_lengths, dtype=np.int64)
    sym_lens = lengths[symbols]
    if not sym_lens.all():
        bad = int(symbols[np.argmin(sym_lens)])
        raise UncodedSymbol(f"symbol {bad} has no code in this table")
    mat = _code_matrix(table)
    rows = mat[symbols]
    mask = np.arange(mat.shape[1]) < sym_lens[:, None]
    bits = rows[mask]
    return EncodedStream(int(bits.size), pack_bits(bits), int(symbols.size))


def _decode_lut(table):
    width = table.max_length
    lut_sym = np.full(1 << width, -1, dtype=np.int64)
    lut_len = np.zeros(1 << width, dtype=np.int64)
    for s, ln in enumerate(table.code_lengths):
        if ln:
            lo = table.codes[s] << (width - ln)
            hi = lo + (1 << (width - ln))
            lut_sym[lo:hi] = s
            lut_len[lo:hi] = ln
    return lut_sym.tolist(), lut_len.tolist()


def _decode_windowed(bits, count, table):
    width = table.max_length
    padded = np.concatenate([bits.astype(np.int64), np.zeros(width, dtype=np.int64)])
    windows = np.zeros(bits.size + 1, dtype=np.int64)
    for j in range(width):
        windows = (windows << 1) | padded[j:j + bits.size + 1]
    windows = windows.tolist()
    lut_sym, lut_len = _decode_lut(table)
    total = bits.size
    out = [0] * count
    pos = 0
    for i in range(count):
        if pos >= total:
            raise TruncatedStream(f"stream ended after {i} of {count} symbols")
        w = windows[pos]
        sym = lut_sym[w]
        if sym < 0:
            raise InvalidCode(f"no code matches the bits at offset {pos}")
        pos += lut_len[w]
        if pos > total:
            raise TruncatedStream(f"stream ended inside symbol {i}")
        out[i] = sym
    return out, pos


def _decode_bitwise(bits, count, table):
    # Canonical decoding: per length, codes are consecutive from first_code.
    by_len = {}
    for s, ln in sorted(enumerate(table.code_lengths), key=lambda t: (t[1], t[0])):
        if ln:
            by_len.setdefault(ln, []).append(s)
    first = {ln: table.codes[syms[0]] for ln, syms in by_len.items()}
    bits = bits.tolist()
    total = len(bits)
    max_len = table.max_length
    out = [0] * count
    pos = 0
    for i in range(count):
        code = 0
        ln = 0
        while True:
            if pos >= total:
                raise TruncatedStream(f"stream ended inside symbol {i}")
            code = (code << 1) | bits[pos]
            pos += 1
            ln += 1
            syms = by_len.get(ln)
            if syms is not None and 0 <= code - first[ln] < len(syms):
                out[i] = syms[code - first[ln]]
                break
            if ln >= max_len:
                raise InvalidCode(f"no code matches the bits ending at offset {pos}")
    return out, pos


def decode(stream, table):
    if stream.symbol_count == 0:
        if stream.bit_count:
            raise CorruptStream("payload bits present but zero symbols declared")
        return np.zeros(0, dtype=np.int64)
    if 8 * len(stream.data) < stream.bit_count:
        raise TruncatedStream(f"payload holds {8 * len(stream.data)} bits, header says {stream.bit_count}")
    if table.max_length == 0:
        raise InvalidCode("table has no codes")
    bits = unpack_bits(stream.data, stream.bit_count)
    if table.max_length <= LUT_MAX_BITS:
        out, used = _decode_windowed(bits, stream.symbol_count, table)
    else:
        out, used = _decode_bitwise(bits, stream.symbol_count, table)
    if used != stream.bit_count:
        raise CorruptStream(f"{stream.bit_count - used} unconsumed payload bits")
    return np.asarray(out, dtype=np.int64)


def compression_ratio(raw_bits, stream, table_bits=0, include_table=False):
    """Raw shifting-error bits over Huffman bits, optionally charging the table."""
    coded = stream.bit_count + (table_bits if include_table else 0)
    if coded == 0:
        return 1.0 if raw_bits == 0 else math.inf
    return raw_bits / coded


def dynamic_encoder(symbols, m):
    """Encoder used at inference by default: fit a table to this layer's symbols."""
    table = build_table(build_histogram(symbols, m))
    return table, encode(symbols, table)


def static_encoder(table):
    """Encoder bound to a table fitted offline on calibration data."""
    def _encode(symbols, m):
        if table.m != m:
            raise ValueError(f"static table is for m={table.m}, layer uses m={m}")
        return table, encode(symbols, table)
    return _encode
