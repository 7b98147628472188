"""Adaptive range coder for signed integer symbol streams.

The coder is a byte-oriented, carry-propagating range coder (32-bit range,
low kept with one carry bit). Symbols are split into a magnitude class
``c = bit_length(|s|)``, coded with an adaptive frequency model, followed by
``c`` raw bits holding the sign and the ``c - 1`` low-order magnitude bits.
A class is only added to the model the first time it occurs, signalled by an
escape token and a 7-bit raw class id.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

__all__ = ["DecodeError", "encode_symbols", "decode_symbols", "MAX_CLASS"]

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_CLASS_BITS = 7
MAX_CLASS = 62

# Frequency model constants. Totals stay far below 2**16 so that
# ``range // total`` never drops under 2**8.
_INC = 24
_ESC_FREQ = 1
_MAX_TOTAL = 1 << 16


class DecodeError(ValueError):
    """The payload is inconsistent with the declared symbol stream."""


class _Encoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.shifts = 0

    def encode(self, start: int, size: int, total: int) -> None:
        r = self.range // total
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def raw(self, value: int, nbits: int) -> None:
        while nbits > 16:
            nbits -= 16
            self.encode((value >> nbits) & 0xFFFF, 1, 1 << 16)
        if nbits:
            self.encode(value & ((1 << nbits) - 1), 1, 1 << nbits)

    def _shift_low(self) -> None:
        self.shifts += 1
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # The decoder consumes exactly ``shifts`` bytes; whatever is still
        # pending in the cache is zero after the flush.
        out = bytes(self.out)
        if len(out) < self.shifts:
            out += bytes(self.shifts - len(out))
        return out


class _Decoder:
    def __init__(self, payload: bytes):
        self.buf = payload
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        self.r = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._next()) & 0xFFFFFFFFFF
        if self.code > _MASK32:
            raise DecodeError("corrupt payload: initial code exceeds 32 bits")

    def _next(self) -> int:
        pos = self.pos
        self.pos = pos + 1
        if pos < len(self.buf):
            return self.buf[pos]
        if pos > len(self.buf) + 4:
            raise DecodeError("corrupt payload: read past end of stream")
        return 0

    def target(self, total: int) -> int:
        self.r = self.range // total
        v = self.code // self.r
        return v if v < total else total - 1

    def consume(self, start: int, size: int) -> None:
        self.code -= start * self.r
        self.range = size * self.r
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8

    def raw(self, nbits: int) -> int:
        value = 0
        while nbits > 16:
            nbits -= 16
            chunk = self.target(1 << 16)
            self.consume(chunk, 1)
            value = (value << 16) | chunk
        if nbits:
            chunk = self.target(1 << nbits)
            self.consume(chunk, 1)
            value = (value << nbits) | chunk
        return value


class _ClassModel:
    """Adaptive frequencies over magnitude classes; slot 0 is the escape token."""

    def __init__(self):
        self.classes = [-1]
        self.freqs = [_ESC_FREQ]
        self.slot = {}
        self.total = _ESC_FREQ

    def interval(self, slot: int) -> tuple[int, int]:
        freqs = self.freqs
        return sum(freqs[:slot]), freqs[slot]

    def find(self, target: int) -> tuple[int, int, int]:
        cum = 0
        for slot, f in enumerate(self.freqs):
            if target < cum + f:
                return slot, cum, f
            cum += f
        raise DecodeError("corrupt payload: frequency target out of range")

    def add(self, cls: int) -> None:
        self.slot[cls] = len(self.classes)
        self.classes.append(cls)
        self.freqs.append(_INC)
        self.total += _INC
        self._rescale()

    def bump(self, slot: int) -> None:
        self.freqs[slot] += _INC
        self.total += _INC
        self._rescale()

    def _rescale(self) -> None:
        if self.total > _MAX_TOTAL:
            self.freqs = [self.freqs[0]] + [max(1, f >> 1) for f in self.freqs[1:]]
            self.total = sum(self.freqs)


def encode_symbols(symbols: Iterable[int]) -> bytes:
    """Range-code a sequence of signed integers with ``|s| < 2**MAX_CLASS``."""
    enc = _Encoder()
    model = _ClassModel()
    for s in symbols:
        s = int(s)
        mag = -s if s < 0 else s
        cls = mag.bit_length()
        if cls > MAX_CLASS:
            raise ValueError(f"symbol magnitude {mag} exceeds 2**{MAX_CLASS}")
        slot = model.slot.get(cls)
        if slot is None:
            start, size = model.interval(0)
            enc.encode(start, size, model.total)
            enc.raw(cls, _CLASS_BITS)
            model.add(cls)
        else:
            start, size = model.interval(slot)
            enc.encode(start, size, model.total)
            model.bump(slot)
        if cls:
            mantissa = mag - (1 << (cls - 1))
            enc.raw((mantissa << 1) | (1 if s < 0 else 0), cls)
    return enc.finish()


def decode_symbols(payload: bytes, count: int) -> np.ndarray:
    """Inverse of :func:`encode_symbols`; returns ``count`` int64 symbols.

    Raises :class:`DecodeError` when the payload cannot have produced exactly
    ``count`` symbols.
    """
    if count < 0:
        raise DecodeError("negative symbol count")
    dec = _Decoder(payload)
    model = _ClassModel()
    out = np.empty(count, dtype=np.int64)
    for k in range(count):
        slot, start, size = model.find(dec.target(model.total))
        dec.consume(start, size)
        if slot == 0:
            cls = dec.raw(_CLASS_BITS)
            if cls > MAX_CLASS or cls in model.slot:
                raise DecodeError(f"corrupt payload: invalid escaped class {cls}")
            model.add(cls)
        else:
            cls = model.classes[slot]
            model.bump(slot)
        if cls:
            bits = dec.raw(cls)
            mag = (1 << (cls - 1)) + (bits >> 1)
            out[k] = -mag if bits & 1 else mag
        else:
            out[k] = 0
    if dec.pos != len(payload):
        raise DecodeError(
            f"symbol-count mismatch: decoding {count} symbols consumed {dec.pos} of {len(payload)} payload bytes"
        )
    return out
