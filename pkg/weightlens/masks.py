"""
Mask types and the on-disk mask codec.

Mask file layout (all integers little-endian):

    magic      4 bytes  b"WLMK"
    version    u16      1
    name_len   u16
    name       name_len bytes, UTF-8
    m, n       u64, u64
    count      u64      number of set coordinates
    payload    ceil(m*n/8) bytes, row-major, np.packbits order (MSB first)
"""
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Set, Tuple, Union

import numpy as np

from weightlens.errors import ParseError, ShapeError

MASK_MAGIC = b"WLMK"
MASK_VERSION = 1
_FIXED = struct.Struct("<4sHH")
_DIMS = struct.Struct("<QQQ")


@dataclass(frozen=True)
class MaskSet:
    """A set of (row, col) coordinates over an m x n layer, held as a dense bool grid."""
    layer_name: str
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim == 1:
            bits = bits.reshape(1, -1)
        if bits.ndim != 2:
            raise ShapeError(f"{self.layer_name}: mask must be 2-D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_coordinates(cls, layer_name: str, shape: Tuple[int, int],
                         coordinates: Iterable[Tuple[int, int]]) -> "MaskSet":
        bits = np.zeros(shape, dtype=bool)
        coords = list(coordinates)
        if coords:
            rows, cols = zip(*coords)
            rows, cols = np.asarray(rows), np.asarray(cols)
            if rows.min() < 0 or cols.min() < 0 or rows.max() >= shape[0] or cols.max() >= shape[1]:
                raise ShapeError(f"{layer_name}: coordinate outside {shape}")
            bits[rows, cols] = True
        return cls(layer_name, bits)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.bits.shape)

    @property
    def m(self) -> int:
        return self.bits.shape[0]

    @property
    def n(self) -> int:
        return self.bits.shape[1]

    @property
    def size(self) -> int:
        return self.bits.size

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def density(self) -> float:
        return self.count / self.size if self.size else 0.0

    def coordinates(self) -> Set[Tuple[int, int]]:
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(self.bits))}

    def __len__(self) -> int:
        return self.count

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskSet):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))


@dataclass(frozen=True, eq=False)
class UpdateMask:
    """Changed-coordinate mask between two checkpoints, stored bit-packed."""
    layer_name: str
    m: int
    n: int
    packed: np.ndarray = field(repr=False)
    changed: int

    @classmethod
    def from_bits(cls, layer_name: str, bits: np.ndarray) -> "UpdateMask":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim == 1:
            bits = bits.reshape(1, -1)
        m, n = bits.shape
        return cls(layer_name, m, n, np.packbits(bits.ravel()), int(np.count_nonzero(bits)))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.m, self.n)

    @property
    def total(self) -> int:
        return self.m * self.n

    @property
    def density(self) -> float:
        return self.changed / self.total if self.total else 0.0

    @property
    def bits(self) -> np.ndarray:
        return np.unpackbits(self.packed, count=self.total).astype(bool).reshape(self.m, self.n)

    def to_mask_set(self) -> MaskSet:
        return MaskSet(self.layer_name, self.bits)


AnyMask = Union[MaskSet, UpdateMask]


def as_mask_set(mask: AnyMask) -> MaskSet:
    return mask.to_mask_set() if isinstance(mask, UpdateMask) else mask


def encode_mask(mask: AnyMask) -> bytes:
    if isinstance(mask, MaskSet):
        mask = UpdateMask.from_bits(mask.layer_name, mask.bits)
    name = mask.layer_name.encode("utf-8")
    return (
        _FIXED.pack(MASK_MAGIC, MASK_VERSION, len(name))
        + name
        + _DIMS.pack(mask.m, mask.n, mask.changed)
        + mask.packed.tobytes()
    )


def decode_mask(blob: bytes) -> UpdateMask:
    if len(blob) < _FIXED.size:
        raise ParseError("mask blob too short")
    magic, version, name_len = _FIXED.unpack_from(blob, 0)
    if magic != MASK_MAGIC or version != MASK_VERSION:
        raise ParseError(f"not a version-{MASK_VERSION} mask file (magic={magic!r}, version={version})")
    offset = _FIXED.size
    name = blob[offset:offset + name_len].decode("utf-8")
    offset += name_len
    m, n, count = _DIMS.unpack_from(blob, offset)
    offset += _DIMS.size
    payload = np.frombuffer(blob, dtype=np.uint8, offset=offset)
    if payload.size != math.ceil(m * n / 8):
        raise ParseError(f"mask {name}: payload has {payload.size} bytes, expected {math.ceil(m * n / 8)}")
    mask = UpdateMask(name, m, n, payload.copy(), int(count))
    if int(np.count_nonzero(mask.bits)) != count:
        raise ParseError(f"mask {name}: header count {count} disagrees with payload")
    return mask


def write_mask(path: Union[str, os.PathLike], mask: AnyMask) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_mask(mask))


def read_mask(path: Union[str, os.PathLike]) -> UpdateMask:
    with open(path, "rb") as fh:
        return decode_mask(fh.read())
