"""Flat gradient/mask vectors in two arithmetic domains.

``Float32`` follows ordinary IEEE single-precision arithmetic.  ``Fixed64``
stores signed fixed-point residues in the group Z_2^64, where addition wraps
and is therefore exact, associative and commutative.  Zero-sum masks only
cancel bit-exactly in the second domain.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"CGV1"
_HEADER = struct.Struct("<4sBBI")


class Domain(enum.IntEnum):
    FLOAT32 = 0
    FIXED64 = 1


class ShapeMismatchError(ValueError):
    """Operands disagree on domain, layer shape or fixed-point scale."""


class FixedPointRangeError(ValueError):
    def __init__(self, index: int, value: float, limit: float):
        super().__init__(f"value {value!r} at index {index} exceeds clamp_abs={limit}")
        self.index = index
        self.value = value


class PayloadFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointConfig:
    frac_bits: int = 24
    clamp_abs: float = 1024.0

    def __post_init__(self):
        if not 1 <= self.frac_bits <= 52:
            raise ValueError(f"frac_bits must be in [1, 52], got {self.frac_bits}")
        if not self.clamp_abs > 0:
            raise ValueError("clamp_abs must be positive")
        if self.clamp_abs * 2.0**self.frac_bits >= 2.0**62:
            raise ValueError("clamp_abs * 2^frac_bits must stay below 2^62")

    @property
    def scale(self) -> float:
        return 2.0**self.frac_bits

    def check_capacity(self, n: int) -> None:
        """Reject configurations whose n-fold aggregate could overflow."""
        if n * self.clamp_abs * self.scale >= 2.0**62:
            raise ValueError(
                f"{n} participants * clamp_abs {self.clamp_abs} * 2^{self.frac_bits} "
                "does not fit below 2^62"
            )


class GradVector:
    """Immutable flat vector with a per-layer shape.

    ``values`` is a read-only numpy array: ``float32`` lanes for the Float32
    domain, ``uint64`` residues for Fixed64.
    """

    __slots__ = ("domain", "values", "shape", "frac_bits")

    def __init__(self, domain: Domain, values, shape: Sequence[int], frac_bits: int = 0):
        domain = Domain(domain)
        dtype = np.float32 if domain is Domain.FLOAT32 else np.uint64
        arr = np.array(values, dtype=dtype, copy=True).reshape(-1)
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape) or sum(shape) != arr.size or arr.size == 0:
            raise ShapeMismatchError(f"shape {shape} does not cover {arr.size} lanes")
        if domain is Domain.FLOAT32 and frac_bits != 0:
            raise ValueError("Float32 vectors carry frac_bits=0")
        if domain is Domain.FIXED64 and not 1 <= frac_bits <= 52:
            raise ValueError(f"Fixed64 vectors need frac_bits in [1, 52], got {frac_bits}")
        arr.flags.writeable = False
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "frac_bits", int(frac_bits))

    def __setattr__(self, name, value):
        raise AttributeError("GradVector is immutable")

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, GradVector):
            return NotImplemented
        return (
            self.domain == other.domain
            and self.shape == other.shape
            and self.frac_bits == other.frac_bits
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self):
        return hash((self.domain, self.shape, self.frac_bits, self.values.tobytes()))

    def __repr__(self):
        return (
            f"GradVector({self.domain.name}, len={len(self)}, shape={self.shape}, "
            f"frac_bits={self.frac_bits})"
        )

    def __add__(self, other: GradVector) -> GradVector:
        return add(self, other)

    def __neg__(self) -> GradVector:
        return negate(self)

    def lanes_as_ints(self) -> list[int]:
        """Residues as Python ints (Fixed64 only); handy for big-integer oracles."""
        if self.domain is not Domain.FIXED64:
            raise TypeError("lanes_as_ints is defined for Fixed64 vectors")
        return [int(v) for v in self.values]

    def is_zero(self) -> bool:
        return not np.any(self.values)

    def to_float64(self) -> np.ndarray:
        if self.domain is Domain.FLOAT32:
            return self.values.astype(np.float64)
        return decode_fixed(self)


def _check_compatible(a: GradVector, b: GradVector) -> None:
    if a.domain != b.domain:
        raise ShapeMismatchError(f"domain mismatch: {a.domain.name} vs {b.domain.name}")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.frac_bits != b.frac_bits:
        raise ShapeMismatchError(f"frac_bits mismatch: {a.frac_bits} vs {b.frac_bits}")


def add(a: GradVector, b: GradVector) -> GradVector:
    _check_compatible(a, b)
    # uint64 array addition wraps modulo 2^64 without warnings
    return GradVector(a.domain, a.values + b.values, a.shape, a.frac_bits)


def negate(a: GradVector) -> GradVector:
    if a.domain is Domain.FIXED64:
        out = np.zeros_like(a.values) - a.values
    else:
        out = -a.values
    return GradVector(a.domain, out, a.shape, a.frac_bits)


def zeros(shape: Sequence[int], domain: Domain = Domain.FIXED64, frac_bits: int = 24) -> GradVector:
    fb = frac_bits if Domain(domain) is Domain.FIXED64 else 0
    dtype = np.float32 if Domain(domain) is Domain.FLOAT32 else np.uint64
    return GradVector(domain, np.zeros(sum(shape), dtype=dtype), shape, fb)


def fold(vectors: Iterable[GradVector]) -> GradVector:
    """Left fold under ``add`` in the given order."""
    it = iter(vectors)
    try:
        acc = next(it)
    except StopIteration:
        raise ValueError("cannot fold an empty sequence") from None
    for v in it:
        acc = add(acc, v)
    return acc


def from_floats(x, shape: Sequence[int] | None = None) -> GradVector:
    arr = np.asarray(x, dtype=np.float32).reshape(-1)
    return GradVector(Domain.FLOAT32, arr, shape or (arr.size,))


def encode_fixed(x, cfg: FixedPointConfig, shape: Sequence[int] | None = None) -> GradVector:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    bad = np.flatnonzero(~(np.abs(arr) <= cfg.clamp_abs))
    if bad.size:
        i = int(bad[0])
        raise FixedPointRangeError(i, float(arr[i]), cfg.clamp_abs)
    # scaling by a power of two is exact in float64; rint is round-half-even
    residues = np.rint(arr * cfg.scale).astype(np.int64).view(np.uint64)
    return GradVector(Domain.FIXED64, residues, shape or (arr.size,), cfg.frac_bits)


def decode_fixed(v: GradVector, cfg: FixedPointConfig | None = None) -> np.ndarray:
    if v.domain is not Domain.FIXED64:
        raise ShapeMismatchError("decode_fixed expects a Fixed64 vector")
    if cfg is not None and cfg.frac_bits != v.frac_bits:
        raise ShapeMismatchError(f"frac_bits mismatch: vector {v.frac_bits} vs config {cfg.frac_bits}")
    return v.values.view(np.int64).astype(np.float64) / 2.0**v.frac_bits


def to_domain(x, domain: Domain, cfg: FixedPointConfig | None, shape: Sequence[int]) -> GradVector:
    """Convert a float64 array into a vector of the requested domain."""
    if Domain(domain) is Domain.FIXED64:
        if cfg is None:
            raise ValueError("Fixed64 conversion needs a FixedPointConfig")
        return encode_fixed(x, cfg, shape)
    return from_floats(x, shape)


def serialize(v: GradVector) -> bytes:
    head = _HEADER.pack(MAGIC, int(v.domain), v.frac_bits, len(v.shape))
    layers = struct.pack(f"<{len(v.shape)}Q", *v.shape)
    dtype = "<f4" if v.domain is Domain.FLOAT32 else "<u8"
    return head + layers + v.values.astype(dtype).tobytes()


def deserialize(data: bytes) -> GradVector:
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise PayloadFormatError(f"payload too short for header ({len(data)} bytes)")
    magic, dom, frac_bits, n_layers = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PayloadFormatError(f"bad magic {magic!r}")
    try:
        domain = Domain(dom)
    except ValueError:
        raise PayloadFormatError(f"unknown domain tag {dom}") from None
    off = _HEADER.size
    if n_layers == 0 or len(data) < off + 8 * n_layers:
        raise PayloadFormatError("truncated layer table")
    shape = struct.unpack_from(f"<{n_layers}Q", data, off)
    off += 8 * n_layers
    width = 4 if domain is Domain.FLOAT32 else 8
    total = sum(shape)
    if len(data) != off + width * total:
        raise PayloadFormatError(
            f"expected {width * total} lane bytes, found {len(data) - off}"
        )
    dtype = "<f4" if domain is Domain.FLOAT32 else "<u8"
    lanes = np.frombuffer(data, dtype=dtype, offset=off, count=total)
    try:
        return GradVector(domain, lanes, shape, frac_bits)
    except ValueError as exc:
        raise PayloadFormatError(str(exc)) from exc


def payload_size(shape: Sequence[int], domain: Domain) -> int:
    width = 4 if Domain(domain) is Domain.FLOAT32 else 8
    return _HEADER.size + 8 * len(shape) + width * sum(shape)
