"""Reference per-scale feature codec and the codec backend interface.

Each scale is quantized with a dead-zone scalar quantizer whose step is
``delta0 * 2**-phi`` and the symbols are range coded. ``phi`` is the quality
knob the allocator drives; larger ``phi`` means a finer step and more bits.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from mfiba._io import crc64
from mfiba.pyramid import FeaturePyramid, FeatureScale
from mfiba.rangecoder import MAX_CLASS, DecodeError, decode_symbols, encode_symbols

__all__ = [
    "CodecConfig",
    "PhiVector",
    "ScaleBitstream",
    "RateReport",
    "BitstreamError",
    "InvalidRateError",
    "CodecBackend",
    "ReferenceBackend",
    "step_for_phi",
    "quantize",
    "dequantize",
    "encode_scale",
    "decode_scale",
    "encode_pyramid",
    "decode_pyramid",
    "rate_report",
]

FCMB_MAGIC = b"FCMB"
FCMB_VERSION = 1
_FCMB_HEAD = struct.Struct("<4sHBffQQ")
FCMB_OVERHEAD_BYTES = _FCMB_HEAD.size + 8


class BitstreamError(ValueError):
    """Malformed or corrupted FCMB bitstream."""


class InvalidRateError(ValueError):
    """A backend produced a rate report that fails validation."""


@dataclass(frozen=True)
class CodecConfig:
    delta0: float = 1.0
    phi_min: float = 0.0
    phi_max: float = 12.0

    def __post_init__(self):
        if not self.delta0 > 0:
            raise ValueError("delta0 must be positive")
        if not self.phi_min < self.phi_max:
            raise ValueError("phi_min must be below phi_max")

    def check_phi(self, phi: float) -> float:
        phi = float(phi)
        if not np.isfinite(phi) or phi < self.phi_min or phi > self.phi_max:
            raise ValueError(f"phi={phi} outside [{self.phi_min}, {self.phi_max}]")
        return phi


@dataclass(frozen=True)
class PhiVector:
    values: tuple[float, ...]
    phi_min: float = 0.0
    phi_max: float = 12.0

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        for i, v in enumerate(vals):
            if not np.isfinite(v) or v < self.phi_min or v > self.phi_max:
                raise ValueError(f"phi[{i}]={v} outside [{self.phi_min}, {self.phi_max}]")

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]

    @classmethod
    def uniform(cls, phi: float, count: int, config: "CodecConfig | None" = None) -> "PhiVector":
        config = config or CodecConfig()
        return cls((float(phi),) * count, config.phi_min, config.phi_max)


def step_for_phi(phi: float, delta0: float = 1.0) -> float:
    """Quantizer step, rounded to float32 so the stored header reproduces it."""
    return float(np.float32(delta0 * 2.0 ** (-float(phi))))


def quantize(x: np.ndarray, step: float) -> np.ndarray:
    """Dead-zone quantization: round ``x / step`` toward zero."""
    q = np.trunc(np.asarray(x, dtype=np.float64) / step)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite input to quantizer")
    if q.size and np.max(np.abs(q)) >= 2.0**MAX_CLASS:
        raise ValueError("input magnitude too large for the quantizer step")
    return q.astype(np.int64)


def dequantize(symbols: np.ndarray, step: float) -> np.ndarray:
    """Midpoint reconstruction for nonzero symbols; zero stays zero."""
    s = np.asarray(symbols, dtype=np.int64)
    mag = np.abs(s).astype(np.float64)
    out = np.where(s != 0, np.sign(s) * (mag + 0.5) * step, 0.0)
    return out.astype(np.float32)


@dataclass(frozen=True)
class ScaleBitstream:
    scale: int
    phi: float
    step: float
    payload: bytes
    element_count: int
    shape: tuple[int, int, int] | None = None

    def to_bytes(self) -> bytes:
        head = _FCMB_HEAD.pack(
            FCMB_MAGIC, FCMB_VERSION, self.scale, self.phi, self.step, self.element_count, len(self.payload)
        )
        body = head + self.payload
        return body + struct.pack("<Q", crc64(body))

    @classmethod
    def from_bytes(cls, blob: bytes, shape: tuple[int, int, int] | None = None) -> "ScaleBitstream":
        if blob[:4] != FCMB_MAGIC:
            raise BitstreamError(f"bad magic {blob[:4]!r}")
        if len(blob) < _FCMB_HEAD.size:
            raise BitstreamError("truncated header")
        _, version, scale, phi, step, count, plen = _FCMB_HEAD.unpack_from(blob, 0)
        if version != FCMB_VERSION:
            raise BitstreamError(f"version mismatch: v{version}")
        end = _FCMB_HEAD.size + plen
        if end + 8 != len(blob):
            raise BitstreamError(f"length mismatch: header says {plen} payload bytes, blob has {len(blob)} bytes")
        (stored,) = struct.unpack_from("<Q", blob, end)
        if stored != crc64(blob[:end]):
            raise BitstreamError("CRC64 mismatch")
        if shape is not None and int(np.prod(shape)) != count:
            raise BitstreamError(f"shape {shape} does not hold {count} elements")
        return cls(scale, float(phi), float(step), bytes(blob[_FCMB_HEAD.size : end]), count, shape)

    @property
    def bits(self) -> int:
        """Serialized size in bits: payload plus FCMB header and CRC trailer."""
        return 8 * (len(self.payload) + FCMB_OVERHEAD_BYTES)


@dataclass(frozen=True)
class RateReport:
    """Per-scale bit counts. ``R[i]`` is bits per element of scale ``i``.

    ``overhead_bits`` is the part of each scale's bits that does not depend
    on phi (container framing); rate modeling works on ``coded_R``.
    """

    bits: tuple[int, ...]
    element_counts: tuple[int, ...]
    overhead_bits: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        object.__setattr__(self, "element_counts", tuple(int(s) for s in self.element_counts))
        overhead = tuple(int(o) for o in self.overhead_bits) or (0,) * len(self.bits)
        object.__setattr__(self, "overhead_bits", overhead)
        if not len(self.bits) == len(self.element_counts) == len(overhead):
            raise InvalidRateError("bits, element_counts and overhead_bits differ in length")
        if any(b < 0 for b in self.bits):
            raise InvalidRateError(f"negative bit count in {self.bits}")
        if any(s <= 0 for s in self.element_counts):
            raise InvalidRateError("element counts must be positive")
        if any(o < 0 or o > b for o, b in zip(overhead, self.bits)):
            raise InvalidRateError("overhead bits must lie between 0 and the scale's bits")

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float64) / np.asarray(self.element_counts, dtype=np.float64)

    @property
    def coded_R(self) -> np.ndarray:
        """Bits per element excluding the phi-independent framing overhead."""
        coded = np.asarray(self.bits, dtype=np.float64) - np.asarray(self.overhead_bits, dtype=np.float64)
        return coded / np.asarray(self.element_counts, dtype=np.float64)

    @property
    def total_overhead_bits(self) -> int:
        return sum(self.overhead_bits)

    @property
    def total_bits(self) -> int:
        return sum(self.bits)

    @property
    def bpp_equivalent(self) -> float:
        return self.total_bits / self.element_counts[0]


def rate_report(streams: Sequence[ScaleBitstream]) -> RateReport:
    return RateReport(
        tuple(b.bits for b in streams),
        tuple(b.element_count for b in streams),
        (8 * FCMB_OVERHEAD_BYTES,) * len(streams),
    )


def encode_scale(x: FeatureScale, phi: float, config: CodecConfig | None = None) -> ScaleBitstream:
    config = config or CodecConfig()
    phi = config.check_phi(phi)
    if not np.all(np.isfinite(x.data)):
        raise ValueError(f"scale {x.index} holds non-finite values")
    step = step_for_phi(phi, config.delta0)
    symbols = quantize(x.data.ravel(), step)
    payload = encode_symbols(symbols.tolist())
    return ScaleBitstream(x.index, phi, step, payload, x.element_count, x.shape)


def decode_scale(b: ScaleBitstream) -> FeatureScale:
    try:
        symbols = decode_symbols(b.payload, b.element_count)
    except DecodeError as exc:
        raise BitstreamError(f"scale {b.scale}: {exc}") from exc
    shape = b.shape or (1, 1, b.element_count)
    return FeatureScale(b.scale, dequantize(symbols, b.step).reshape(shape))


def _phi_values(phis, count: int, config: CodecConfig) -> tuple[float, ...]:
    vals = tuple(phis)
    if len(vals) != count:
        raise ValueError(f"expected {count} phi values, got {len(vals)}")
    return tuple(config.check_phi(v) for v in vals)


def encode_pyramid(
    p: FeaturePyramid, phis, config: CodecConfig | None = None
) -> tuple[list[ScaleBitstream], RateReport]:
    config = config or CodecConfig()
    vals = _phi_values(phis, p.num_scales, config)
    streams = [encode_scale(sc, phi, config) for sc, phi in zip(p.scales, vals)]
    return streams, rate_report(streams)


def decode_pyramid(streams: Sequence[ScaleBitstream], like: FeaturePyramid) -> FeaturePyramid:
    """Decode ``streams`` into a pyramid with the geometry and metadata of ``like``."""
    datas = []
    for b, sc in zip(streams, like.scales, strict=True):
        if b.shape is None:
            b = ScaleBitstream(b.scale, b.phi, b.step, b.payload, b.element_count, sc.shape)
        datas.append(decode_scale(b).data)
    return like.with_scales(datas)


@runtime_checkable
class CodecBackend(Protocol):
    """What the allocator pipeline needs from a codec.

    Implementations must be deterministic for fixed inputs.
    """

    def measure_rate(self, p: FeaturePyramid, phis) -> RateReport: ...

    def reconstruct(self, p: FeaturePyramid, phis) -> FeaturePyramid: ...


def checked_rate(report) -> RateReport:
    if not isinstance(report, RateReport):
        raise InvalidRateError(f"backend returned {type(report).__name__}, not RateReport")
    return report


class ReferenceBackend:
    """The dead-zone quantizer + range coder behind :class:`CodecBackend`.

    ``reconstruct`` dequantizes the quantizer output directly, which the
    symbol-exact round trip makes identical to decoding the bitstream; pass
    ``full_decode=True`` to run the entropy decoder anyway. Per-scale bit
    counts are memoized on (scale index, content digest, phi).
    """

    def __init__(self, config: CodecConfig | None = None, full_decode: bool = False, cache_limit: int = 50_000):
        self.config = config or CodecConfig()
        self.full_decode = full_decode
        self.cache_limit = cache_limit
        self._bits: dict = {}
        self._lock = threading.Lock()

    @staticmethod
    def _digest(sc: FeatureScale) -> bytes:
        return hashlib.blake2b(sc.data.tobytes(), digest_size=16).digest()

    def scale_bits(self, sc: FeatureScale, phi: float) -> int:
        key = (sc.index, sc.shape, self._digest(sc), float(phi))
        with self._lock:
            hit = self._bits.get(key)
        if hit is not None:
            return hit
        bits = encode_scale(sc, phi, self.config).bits
        with self._lock:
            if len(self._bits) >= self.cache_limit:
                self._bits.clear()
            self._bits[key] = bits
        return bits

    def measure_rate(self, p: FeaturePyramid, phis) -> RateReport:
        vals = _phi_values(phis, p.num_scales, self.config)
        bits = tuple(self.scale_bits(sc, phi) for sc, phi in zip(p.scales, vals))
        return RateReport(bits, tuple(int(s) for s in p.element_counts), (8 * FCMB_OVERHEAD_BYTES,) * len(bits))

    def reconstruct(self, p: FeaturePyramid, phis) -> FeaturePyramid:
        vals = _phi_values(phis, p.num_scales, self.config)
        if self.full_decode:
            streams, _ = encode_pyramid(p, vals, self.config)
            return decode_pyramid(streams, p)
        datas = []
        for sc, phi in zip(p.scales, vals):
            step = step_for_phi(phi, self.config.delta0)
            datas.append(dequantize(quantize(sc.data, step), step))
        return p.with_scales(datas)
