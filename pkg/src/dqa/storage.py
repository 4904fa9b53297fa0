"""Bit-exact blob format for one quantized layer, plus memory accounting.

Layout (all multi-byte integers little-endian)::

    "DQA1" | version u16 | flags u16 | layer_id (u16 length + utf-8)
    | n u8 | m u8 | channel_count u32 | channel_len u32 | layer_absmax f32
    | important bitmap (ceil(channel_count / 8) bytes, MSB-first)
    | packed values (n-bit two's complement, MSB-first, zero-padded)
    | [error section: Huffman table | encoded stream]
    | crc32 u32 over packed values + error section
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .bitio import pack_bits, pack_signed, unpack_bits, unpack_signed
from .errors import BadMagic, ChecksumMismatch, CorruptStream, Truncated, VersionUnsupported
from .huffman import EncodedStream, HuffmanTable
from .quant_core import QuantizedLayer, ScaleParams

MAGIC = b"DQA1"
VERSION = 1
FLAG_ERROR_SECTION = 0x1

_FIXED = struct.Struct("<BBIIf")
_CHECKSUM = struct.Struct("<I")


def _bitmap(important, count):
    bits = np.zeros(count, dtype=np.uint8)
    bits[list(important)] = 1
    return pack_bits(bits)


def _header(q):
    lid = q.layer_id.encode()
    flags = FLAG_ERROR_SECTION if q.has_error_section else 0
    return b"".join([
        MAGIC,
        struct.pack("<HH", VERSION, flags),
        struct.pack("<H", len(lid)),
        lid,
        _FIXED.pack(q.n, q.m, q.channel_count, q.channel_len, q.scale.absmax),
        _bitmap(q.important, q.channel_count),
    ])


def _error_section(q):
    if not q.has_error_section:
        return b""
    return q.huffman_table.to_bytes() + q.error_stream.to_bytes()


def serialize(q):
    body = pack_signed(q.values, q.n)
    payload = body + _error_section(q)
    return _header(q) + payload + _CHECKSUM.pack(zlib.crc32(payload))


class _Cursor:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, size, what):
        if self.pos + size > len(self.data):
            raise Truncated(f"blob ends inside {what}")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out


def deserialize(data):
    data = bytes(data)
    cur = _Cursor(data)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
    version, flags = struct.unpack("<HH", cur.take(4, "version"))
    if version != VERSION:
        raise VersionUnsupported(f"blob version {version}, this build reads {VERSION}")
    (lid_len,) = struct.unpack("<H", cur.take(2, "layer id length"))
    layer_id = cur.take(lid_len, "layer id").decode()
    n, m, count, length, absmax = _FIXED.unpack(cur.take(_FIXED.size, "header"))
    bitmap = cur.take((count + 7) // 8, "important bitmap")
    important = tuple(int(i) for i in np.flatnonzero(unpack_bits(bitmap, count)))

    payload_start = cur.pos
    body = cur.take((count * length * n + 7) // 8, "packed values")
    values = unpack_signed(body, count * length, n).reshape(count, length)
    table = stream = None
    if flags & FLAG_ERROR_SECTION:
        try:
            table, used = HuffmanTable.from_bytes(data, cur.pos)
            cur.pos += used
            stream, used = EncodedStream.from_bytes(data, cur.pos)
            cur.pos += used
        except CorruptStream as exc:
            raise Truncated(f"error section: {exc}") from exc
    payload = data[payload_start:cur.pos]
    (crc,) = _CHECKSUM.unpack(cur.take(_CHECKSUM.size, "checksum"))
    if crc != zlib.crc32(payload):
        raise ChecksumMismatch(f"stored crc {crc:#010x}, computed {zlib.crc32(payload):#010x}")
    if cur.pos != len(data):
        raise CorruptStream(f"{len(data) - cur.pos} trailing bytes after checksum")
    return QuantizedLayer(layer_id, n, m, ScaleParams(float(absmax), n, m), important, values, stream, table)


@dataclass(frozen=True)
class MemoryReport:
    value_count: int
    raw_float_bits: int
    header_bits: int
    body_bits: int
    body_padding_bits: int
    table_bits: int
    stream_header_bits: int
    error_payload_bits: int
    error_padding_bits: int
    checksum_bits: int

    @property
    def direct_bits(self):
        """Same layer stored without any shifting errors."""
        return self.header_bits + self.body_bits + self.checksum_bits

    @property
    def error_section_bits(self):
        return self.table_bits + self.stream_header_bits + self.error_payload_bits

    @property
    def dqa_bits(self):
        return self.direct_bits + self.error_section_bits

    @property
    def total_bits(self):
        """Serialized length in bits minus padding."""
        return self.dqa_bits

    @property
    def overhead_pct(self):
        return 100.0 * (self.dqa_bits - self.direct_bits) / self.direct_bits

    @property
    def compression_vs_float(self):
        return self.raw_float_bits / self.dqa_bits

    def as_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("direct_bits", "error_section_bits", "dqa_bits", "overhead_pct", "compression_vs_float"):
            out[k] = getattr(self, k)
        return out


def memory_report(q, baseline_bits=32):
    count = q.channel_count * q.channel_len
    body = count * q.n
    header = 8 * len(_header(q))
    table_bits = stream_hdr = err_payload = err_pad = 0
    if q.has_error_section:
        table_bits = q.huffman_table.size_bits()
        stream_hdr = 64
        err_payload = q.error_stream.bit_count
        err_pad = 8 * len(q.error_stream.data) - err_payload
    return MemoryReport(
        value_count=count,
        raw_float_bits=count * baseline_bits,
        header_bits=header,
        body_bits=body,
        body_padding_bits=-body % 8,
        table_bits=table_bits,
        stream_header_bits=stream_hdr,
        error_payload_bits=err_payload,
        error_padding_bits=err_pad,
        checksum_bits=8 * _CHECKSUM.size,
    )
