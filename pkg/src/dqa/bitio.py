"""MSB-first bit packing helpers shared by the Huffman stream and the blob body."""

import numpy as np


def pack_bits(bits):
    """Pack a 0/1 array MSB-first; the final partial byte is zero-padded."""
    bits = np.asarray(bits, dtype=np.uint8)
    return np.packbits(bits).tobytes()


def unpack_bits(data, bit_count):
    arr = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if arr.size < bit_count:
        raise ValueError(f"need {bit_count} bits, have {arr.size}")
    return arr[:bit_count]


def pack_signed(values, width):
    """Pack integers as ``width``-bit two's complement, MSB-first."""
    if not 1 <= width <= 8:
        raise ValueError("width must be in 1..8")
    v = np.asarray(values, dtype=np.int64).ravel()
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    if v.size and (v.min() < lo or v.max() > hi):
        raise ValueError(f"value outside {width}-bit signed range")
    u = (v & ((1 << width) - 1)).astype(np.uint8)
    bits = np.unpackbits(u[:, None], axis=1)[:, 8 - width:]
    return pack_bits(bits.ravel())


def unpack_signed(data, count, width):
    bits = unpack_bits(data, count * width).reshape(count, width).astype(np.int64)
    weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    u = bits @ weights if count else np.zeros(0, dtype=np.int64)
    return np.where(u >= (1 << (width - 1)), u - (1 << width), u)
