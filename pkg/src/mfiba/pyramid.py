"""Multiscale feature pyramids: types, the FPYR container, synthesis and distortion.

A pyramid holds scales ``0..n`` at progressively halved resolution plus an
optional pooled scale ``P``. For all size/weight arithmetic the pooled scale
takes index ``n + 1``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from mfiba._io import crc64

__all__ = [
    "FeatureScale",
    "FeaturePyramid",
    "PyramidSpec",
    "DistortionReport",
    "PyramidFormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedPayloadError",
    "ChecksumError",
    "PyramidInvariantError",
    "save_pyramid",
    "load_pyramid",
    "pyramid_to_bytes",
    "pyramid_from_bytes",
    "synth_pyramid",
    "pyramid_distortion",
]

FPYR_MAGIC = b"FPYR"
FPYR_VERSION = 1
_FLAG_POOL = 0x01
_HEADER = struct.Struct("<4sHBBI")
_DIMS = struct.Struct("<II")


class PyramidInvariantError(ValueError):
    """A pyramid violates a structural invariant (channels, halving, finiteness)."""


class PyramidFormatError(ValueError):
    """Base class for FPYR decoding failures."""


class BadMagicError(PyramidFormatError):
    pass


class VersionMismatchError(PyramidFormatError):
    pass


class TruncatedPayloadError(PyramidFormatError):
    pass


class ChecksumError(PyramidFormatError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureScale:
    index: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise PyramidInvariantError(f"scale {self.index}: expected C x H x W, got shape {arr.shape}")
        if arr.size == 0:
            raise PyramidInvariantError(f"scale {self.index}: empty tensor")
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def element_count(self) -> int:
        return int(self.data.size)

    def __eq__(self, other):
        if not isinstance(other, FeatureScale):
            return NotImplemented
        return (
            self.index == other.index
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Ordered scales ``0..n`` followed by the pooled scale when ``has_pool``."""

    scales: tuple[FeatureScale, ...]
    has_pool: bool = True
    source_id: str = ""
    object_size_param: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        self.validate()

    def validate(self) -> None:
        if len(self.scales) == 0:
            raise PyramidInvariantError("pyramid has no scales")
        if self.has_pool and len(self.scales) < 2:
            raise PyramidInvariantError("a pooled pyramid needs at least one regular scale")
        c0 = self.scales[0].shape[0]
        for pos, sc in enumerate(self.scales):
            if sc.index != pos:
                raise PyramidInvariantError(f"scale at position {pos} carries index {sc.index}")
            if sc.shape[0] != c0:
                raise PyramidInvariantError(
                    f"channel count mismatch: scale 0 has {c0}, scale {pos} has {sc.shape[0]}"
                )
            if pos > 0:
                _, hp, wp = self.scales[pos - 1].shape
                if sc.shape[1:] != (math.ceil(hp / 2), math.ceil(wp / 2)):
                    raise PyramidInvariantError(
                        f"scale {pos} dims {sc.shape[1:]} do not halve scale {pos - 1} dims {(hp, wp)}"
                    )
            if not np.all(np.isfinite(sc.data)):
                raise PyramidInvariantError(f"scale {pos} holds non-finite values")
        if self.object_size_param is not None and not 0.0 <= self.object_size_param <= 1.0:
            raise PyramidInvariantError("object_size_param must lie in [0, 1]")

    @property
    def n(self) -> int:
        """Index of the last regular (non-pooled) scale."""
        return len(self.scales) - (2 if self.has_pool else 1)

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def channels(self) -> int:
        return self.scales[0].shape[0]

    @property
    def element_counts(self) -> np.ndarray:
        return np.array([s.element_count for s in self.scales], dtype=np.int64)

    @property
    def S0(self) -> int:
        return self.scales[0].element_count

    def label(self, i: int) -> str:
        if self.has_pool and i == len(self.scales) - 1:
            return "P"
        return str(i)

    def replace_scale(self, i: int, data: np.ndarray) -> "FeaturePyramid":
        scales = list(self.scales)
        scales[i] = FeatureScale(i, data)
        return FeaturePyramid(tuple(scales), self.has_pool, self.source_id, self.object_size_param)

    def with_scales(self, datas: Sequence[np.ndarray]) -> "FeaturePyramid":
        scales = tuple(FeatureScale(i, d) for i, d in enumerate(datas))
        return FeaturePyramid(scales, self.has_pool, self.source_id, self.object_size_param)

    def same_geometry(self, other: "FeaturePyramid") -> bool:
        return self.has_pool == other.has_pool and [s.shape for s in self.scales] == [
            s.shape for s in other.scales
        ]

    def __eq__(self, other):
        if not isinstance(other, FeaturePyramid):
            return NotImplemented
        return self.has_pool == other.has_pool and self.scales == other.scales

    __hash__ = None  # type: ignore[assignment]


# -- FPYR container ---------------------------------------------------------


def pyramid_to_bytes(p: FeaturePyramid) -> bytes:
    p.validate()
    n_regular = p.num_scales - (1 if p.has_pool else 0)
    if n_regular > 255:
        raise PyramidInvariantError("at most 255 regular scales fit the container")
    out = bytearray(_HEADER.pack(FPYR_MAGIC, FPYR_VERSION, _FLAG_POOL if p.has_pool else 0, n_regular, p.channels))
    for sc in p.scales:
        _, h, w = sc.shape
        out += _DIMS.pack(h, w)
        out += sc.data.astype("<f4", copy=False).tobytes(order="C")
    out += struct.pack("<Q", crc64(bytes(out)))
    return bytes(out)


def save_pyramid(p: FeaturePyramid, sink: BinaryIO) -> int:
    """Write ``p`` as an FPYR container to ``sink``; returns the byte count."""
    blob = pyramid_to_bytes(p)
    written = sink.write(blob)
    if written is not None and written != len(blob):
        raise OSError(f"short write: {written} of {len(blob)} bytes")
    return len(blob)


def pyramid_from_bytes(blob: bytes, source_id: str = "", object_size_param: float | None = None) -> FeaturePyramid:
    if len(blob) < 4 or blob[:4] != FPYR_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {FPYR_MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError("truncated payload: header incomplete")
    _, version, flags, n_regular, channels = _HEADER.unpack_from(blob, 0)
    if version != FPYR_VERSION:
        raise VersionMismatchError(f"version mismatch: container v{version}, reader v{FPYR_VERSION}")
    has_pool = bool(flags & _FLAG_POOL)
    count = n_regular + (1 if has_pool else 0)
    pos = _HEADER.size
    datas = []
    for i in range(count):
        if pos + _DIMS.size > len(blob):
            raise TruncatedPayloadError(f"truncated payload: missing dims of scale {i}")
        h, w = _DIMS.unpack_from(blob, pos)
        pos += _DIMS.size
        nbytes = 4 * channels * h * w
        if pos + nbytes > len(blob):
            raise TruncatedPayloadError(
                f"truncated payload: scale {i} needs {nbytes} bytes, {len(blob) - pos} available"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=channels * h * w, offset=pos)
        datas.append(arr.reshape(channels, h, w).astype(np.float32))
        pos += nbytes
    if pos + 8 > len(blob):
        raise TruncatedPayloadError("truncated payload: missing CRC64 trailer")
    (stored,) = struct.unpack_from("<Q", blob, pos)
    if stored != crc64(blob[:pos]):
        raise ChecksumError("CRC64 mismatch")
    if pos + 8 != len(blob):
        raise PyramidFormatError(f"{len(blob) - pos - 8} trailing bytes after CRC64")
    scales = tuple(FeatureScale(i, d) for i, d in enumerate(datas))
    return FeaturePyramid(scales, has_pool, source_id, object_size_param)


def load_pyramid(source: BinaryIO, source_id: str = "", object_size_param: float | None = None) -> FeaturePyramid:
    """Read an FPYR container. Raises a distinct error per failure mode."""
    return pyramid_from_bytes(source.read(), source_id, object_size_param)


# -- synthesis ----------------------------------------------------------------


@dataclass(frozen=True)
class PyramidSpec:
    """Geometry and statistics for :func:`synth_pyramid`.

    ``std_decay`` sets the per-scale standard deviation to ``std_decay**i``;
    ``smoothing`` is the spatial Gaussian sigma (in pixels) of the source
    process at every scale.
    """

    n: int = 3
    channels: int = 256
    height: int = 64
    width: int = 64
    object_size_param: float = 0.5
    pool: bool = True
    std_decay: float = 0.9
    smoothing: float = 1.0

    def __post_init__(self):
        if self.n < 0 or self.channels <= 0 or self.height <= 0 or self.width <= 0:
            raise ValueError("pyramid spec dims must be positive (n >= 0)")
        if not 0.0 <= self.object_size_param <= 1.0:
            raise ValueError("object_size_param must lie in [0, 1]")
        if self.std_decay <= 0 or self.smoothing < 0:
            raise ValueError("std_decay must be positive and smoothing nonnegative")

    def shapes(self) -> list[tuple[int, int, int]]:
        h, w = self.height, self.width
        out = []
        for _ in range(self.n + 1 + (1 if self.pool else 0)):
            out.append((self.channels, h, w))
            h, w = math.ceil(h / 2), math.ceil(w / 2)
        return out


def synth_pyramid(seed: int, spec: PyramidSpec) -> FeaturePyramid:
    """Deterministic smoothed-Gaussian pyramid; a stand-in for backbone features."""
    rng = np.random.default_rng(seed)
    datas = []
    for i, shape in enumerate(spec.shapes()):
        x = rng.standard_normal(shape)
        if spec.smoothing > 0 and min(shape[1:]) > 1:
            x = gaussian_filter(x, sigma=(0.0, spec.smoothing, spec.smoothing), mode="wrap")
        sd = x.std()
        if sd > 0:
            x = (x - x.mean()) / sd
        datas.append((x * spec.std_decay**i).astype(np.float32))
    scales = tuple(FeatureScale(i, d) for i, d in enumerate(datas))
    return FeaturePyramid(scales, spec.pool, f"synth-{seed}", spec.object_size_param)


# -- distortion ---------------------------------------------------------------


@dataclass(frozen=True)
class DistortionReport:
    per_scale_mse: tuple[float, ...] = field(default_factory=tuple)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.per_scale_mse, dtype=np.float64)


def pyramid_distortion(ref: FeaturePyramid, deg: FeaturePyramid) -> DistortionReport:
    if not ref.same_geometry(deg):
        raise ValueError("pyramid shapes differ")
    mse = []
    for a, b in zip(ref.scales, deg.scales):
        diff = a.data.astype(np.float64) - b.data.astype(np.float64)
        mse.append(float(np.mean(diff * diff)))
    return DistortionReport(tuple(mse))


def load_pyramid_file(path, source_id: str | None = None, object_size_param: float | None = None) -> FeaturePyramid:
    with open(path, "rb") as fh:
        return load_pyramid(fh, source_id if source_id is not None else str(path), object_size_param)


def save_pyramid_file(p: FeaturePyramid, path) -> int:
    from mfiba._io import atomic_write_bytes

    blob = pyramid_to_bytes(p)
    atomic_write_bytes(path, blob)
    return len(blob)

