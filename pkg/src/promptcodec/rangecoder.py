"""Byte-oriented range coder with bit-exact round trips.

32-bit range, 16-bit frequency totals, byte-wise renormalization with
carry propagation through a cache byte.  Streams carry a one-symbol
terminator so decoding with the wrong tables or from truncated bytes
raises :class:`CorruptStreamError` instead of returning garbage.
"""

import numpy as np

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
SENTINEL = 0xA5
_UNIFORM_CDF = np.arange(257, dtype=np.int64) * 256


class CorruptStreamError(Exception):
    """Stream bytes do not decode cleanly against the given tables."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def encode(self, cum, freq):
        r = self.range >> 16
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self._shift_low()
            self.range = (self.range << 8) & MASK32

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            byte = self.cache
            while True:
                self.out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & MASK32

    def finish(self):
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        if len(data) < 5:
            raise CorruptStreamError(f"stream holds {len(data)} bytes, need at least 5")
        self.data = data
        self.pos = 1  # the first byte is the encoder's initial zero cache
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self):
        if self.pos >= len(self.data):
            raise CorruptStreamError("stream exhausted mid-decode")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_target(self):
        self._r = self.range >> 16
        return min(self.code // self._r, (1 << 16) - 1)

    def decode_update(self, cum, freq):
        self.code -= cum * self._r
        self.range = self._r * freq
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range = (self.range << 8) & MASK32


def encode_symbols(symbols, cdfs, table_idx=None):
    """Range-encode ``symbols`` (ints in [0, 256)) and append the terminator.

    ``cdfs`` is either one (257,) integer CDF used for every symbol or a
    (T, 257) bank indexed per symbol through ``table_idx``.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    cdfs = np.asarray(cdfs, dtype=np.int64)
    enc = RangeEncoder()
    if cdfs.ndim == 1:
        for s in symbols:
            enc.encode(int(cdfs[s]), int(cdfs[s + 1] - cdfs[s]))
    else:
        table_idx = np.asarray(table_idx, dtype=np.int64)
        if table_idx.shape != symbols.shape:
            raise ValueError("table_idx must align with symbols")
        for s, t in zip(symbols, table_idx):
            row = cdfs[t]
            enc.encode(int(row[s]), int(row[s + 1] - row[s]))
    enc.encode(int(_UNIFORM_CDF[SENTINEL]), 256)
    return enc.finish()


def decode_symbols(data, cdfs, count, table_idx=None):
    """Inverse of :func:`encode_symbols`; verifies the terminator symbol."""
    cdfs = np.asarray(cdfs, dtype=np.int64)
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    if cdfs.ndim == 1:
        for i in range(count):
            out[i] = _decode_one(dec, cdfs)
    else:
        table_idx = np.asarray(table_idx, dtype=np.int64)
        if table_idx.shape != (count,):
            raise ValueError("table_idx must provide one table per symbol")
        for i in range(count):
            out[i] = _decode_one(dec, cdfs[table_idx[i]])
    if _decode_one(dec, _UNIFORM_CDF) != SENTINEL:
        raise CorruptStreamError("terminator mismatch: wrong tables or damaged bytes")
    return out


def _decode_one(dec, cdf):
    target = dec.decode_target()
    s = int(np.searchsorted(cdf, target, side="right")) - 1
    dec.decode_update(int(cdf[s]), int(cdf[s + 1] - cdf[s]))
    return s
