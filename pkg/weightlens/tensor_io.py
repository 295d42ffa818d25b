"""
Reader and writer for the single-file tensor archive layout:

    [8-byte little-endian header length N][N bytes of JSON metadata][payload]

Each metadata entry maps a tensor name to ``dtype``, ``shape`` and
``data_offsets`` (begin, end) relative to the start of the payload. An
optional ``__metadata__`` entry holds free-form string pairs.
"""
import fnmatch
import json
import logging
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from weightlens.bf16 import decode_bf16, encode_bf16
from weightlens.errors import IntegrityError, NotFound, ParseError, ShapeError, UnsupportedDtype

logger = logging.getLogger(__name__)

HEADER_LENGTH_BYTES = 8
# Guards against reading a garbage length as a multi-GB JSON blob.
MAX_HEADER_BYTES = 100 * 1024 * 1024

ITEM_SIZES = {
    "BOOL": 1, "U8": 1, "I8": 1, "F8_E4M3": 1, "F8_E5M2": 1,
    "I16": 2, "U16": 2, "F16": 2, "BF16": 2,
    "I32": 4, "U32": 4, "F32": 4,
    "I64": 8, "U64": 8, "F64": 8,
}

# On-disk dtype tag -> (WeightMatrix dtype, numpy storage dtype)
_LOADABLE = {
    "BF16": ("bf16", np.dtype("<u2")),
    "F32": ("f32", np.dtype("<f4")),
    "F16": ("f16", np.dtype("<f2")),
}
_WRITABLE = {
    "bf16": ("BF16", np.dtype("<u2")),
    "f32": ("F32", np.dtype("<f4")),
    "f64": ("F64", np.dtype("<f8")),
}


@dataclass(frozen=True)
class TensorEntry:
    dtype: str
    shape: Tuple[int, ...]
    begin: int
    end: int

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class CheckpointHandle:
    path: str
    index: "OrderedDict[str, TensorEntry]"
    data_offset: int
    metadata: Dict[str, str] = field(default_factory=dict)
    # Entries kept out of the index (rank > 2); carried so rewrites can pass them through.
    skipped: "OrderedDict[str, TensorEntry]" = field(default_factory=OrderedDict)
    order: Tuple[str, ...] = ()

    @property
    def total_params(self) -> int:
        return sum(entry.numel for entry in self.index.values())

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def entry(self, name: str) -> TensorEntry:
        try:
            return self.index[name]
        except KeyError:
            raise NotFound(f"Layer {name} not found in {self.path}") from None

    def raw_entry(self, name: str) -> TensorEntry:
        """Index lookup that also sees tensors skipped by the index."""
        if name in self.skipped:
            return self.skipped[name]
        return self.entry(name)

    def all_names(self) -> Tuple[str, ...]:
        return self.order or tuple(self.index)


@dataclass
class WeightMatrix:
    """
    One named tensor. ``data`` holds raw uint16 codes when ``dtype`` is
    ``bf16`` and float values otherwise; ``source_dtype`` remembers the on-disk
    tag when a widening conversion was applied.
    """
    layer_name: str
    dtype: str
    data: np.ndarray
    source_dtype: Optional[str] = None

    def __post_init__(self):
        if self.dtype not in ("bf16", "f32", "f64"):
            raise UnsupportedDtype(f"Unsupported matrix dtype {self.dtype!r} for {self.layer_name}")
        if self.data.ndim not in (1, 2):
            raise ShapeError(f"{self.layer_name}: expected rank 1 or 2, got shape {self.data.shape}")
        if self.source_dtype is None:
            self.source_dtype = self.dtype

    @classmethod
    def from_float(cls, layer_name: str, values, dtype: str = "bf16") -> "WeightMatrix":
        arr = np.asarray(values, dtype=np.float64)
        if dtype == "bf16":
            return cls(layer_name, "bf16", encode_bf16(arr))
        if dtype == "f32":
            return cls(layer_name, "f32", arr.astype(np.float32))
        return cls(layer_name, dtype, arr)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def rows(self) -> int:
        return self.data.shape[0] if self.data.ndim == 2 else 1

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    @property
    def is_bf16(self) -> bool:
        return self.dtype == "bf16"

    @property
    def widened(self) -> bool:
        return self.source_dtype != self.dtype

    def to_float64(self) -> np.ndarray:
        if self.is_bf16:
            return decode_bf16(self.data).astype(np.float64)
        return self.data.astype(np.float64)

    def to_bytes(self) -> bytes:
        _, storage = _WRITABLE[self.dtype]
        return np.ascontiguousarray(self.data, dtype=storage).tobytes()


@dataclass(frozen=True)
class LayerFilter:
    include: Tuple[str, ...] = ("*",)
    exclude: Tuple[str, ...] = ()
    min_rank: int = 2

    def __post_init__(self):
        object.__setattr__(self, "include", tuple(self.include))
        object.__setattr__(self, "exclude", tuple(self.exclude))
        if self.min_rank not in (1, 2):
            raise ValueError(f"min_rank must be 1 or 2, got {self.min_rank}")

    @classmethod
    def linear_only(cls) -> "LayerFilter":
        """Linear layers only: embeddings, the LM head and rank-1 tensors are dropped."""
        return cls(include=("*",), exclude=("*embed*", "*lm_head*", "*wte*", "*wpe*"), min_rank=2)

    @classmethod
    def everything(cls) -> "LayerFilter":
        return cls(include=("*",), exclude=(), min_rank=1)

    def matches(self, name: str, rank: int) -> bool:
        if rank < self.min_rank:
            return False
        if not any(fnmatch.fnmatchcase(name, pattern) for pattern in self.include):
            return False
        return not any(fnmatch.fnmatchcase(name, pattern) for pattern in self.exclude)

    def describe(self) -> Dict[str, object]:
        return {"include": list(self.include), "exclude": list(self.exclude), "min_rank": self.min_rank}


def open_checkpoint(path: Union[str, os.PathLike]) -> CheckpointHandle:
    """
    Parse the archive header and build the layer index. No payload is read.

    :param path: Path to a single-file tensor archive
    :raises ParseError: when the header is missing or malformed
    :raises IntegrityError: when a declared byte range runs past the end of file
    """
    path = os.fspath(path)
    file_size = os.path.getsize(path)
    with open(path, "rb") as fh:
        prefix = fh.read(HEADER_LENGTH_BYTES)
        if len(prefix) < HEADER_LENGTH_BYTES:
            raise ParseError(f"{path}: file too short for an archive header ({file_size} bytes)")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len == 0 or header_len > MAX_HEADER_BYTES:
            raise ParseError(f"{path}: implausible header length {header_len}")
        if HEADER_LENGTH_BYTES + header_len > file_size:
            raise ParseError(f"{path}: header length {header_len} exceeds file size {file_size}")
        raw = fh.read(header_len)

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=OrderedDict)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: header is not valid JSON metadata: {e}") from e
    if not isinstance(header, dict):
        raise ParseError(f"{path}: header must be a JSON object")

    data_offset = HEADER_LENGTH_BYTES + header_len
    payload_size = file_size - data_offset
    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise ParseError(f"{path}: __metadata__ must map strings to strings")
    metadata = dict(metadata)
    index: "OrderedDict[str, TensorEntry]" = OrderedDict()
    skipped: "OrderedDict[str, TensorEntry]" = OrderedDict()
    for name, raw in header.items():
        entry = _parse_entry(path, name, raw)
        if entry.end > payload_size:
            raise IntegrityError(
                f"{path}: tensor {name} declares bytes [{entry.begin}, {entry.end}) "
                f"but the payload holds only {payload_size} bytes"
            )
        if entry.rank not in (1, 2):
            logger.warning("Skipping %s: rank-%d tensors are not indexed", name, entry.rank)
            skipped[name] = entry
            continue
        index[name] = entry

    logger.info("Opened %s: %d tensors, %d parameters", path, len(index),
                sum(e.numel for e in index.values()))
    return CheckpointHandle(path=path, index=index, data_offset=data_offset, metadata=metadata,
                            skipped=skipped, order=tuple(header.keys()))


def _parse_entry(path: str, name: str, raw) -> TensorEntry:
    try:
        dtype = str(raw["dtype"])
        shape = tuple(int(d) for d in raw["shape"])
        begin, end = (int(o) for o in raw["data_offsets"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{path}: malformed entry for tensor {name}: {e}") from e
    if begin < 0 or end < begin or any(d < 0 for d in shape):
        raise ParseError(f"{path}: invalid offsets or shape for tensor {name}")
    item_size = ITEM_SIZES.get(dtype)
    if item_size is not None and (end - begin) != math.prod(shape) * item_size:
        raise ParseError(
            f"{path}: tensor {name} has {end - begin} bytes but shape {shape} of {dtype} "
            f"needs {math.prod(shape) * item_size}"
        )
    return TensorEntry(dtype=dtype, shape=shape, begin=begin, end=end)


def list_layers(h: CheckpointHandle, f: Optional[LayerFilter] = None) -> List[str]:
    """Names passing the filter, in archive metadata order."""
    f = f or LayerFilter()
    return [name for name, entry in h.index.items() if f.matches(name, entry.rank)]


def load_matrix(h: CheckpointHandle, layer: str) -> WeightMatrix:
    """
    Read one tensor's payload. bf16 payloads stay as raw codes; f16 payloads
    are widened to f32 with a warning.
    """
    entry = h.entry(layer)
    if entry.dtype not in _LOADABLE:
        raise UnsupportedDtype(f"Layer {layer} has dtype {entry.dtype}; only BF16, F32 and F16 are supported")
    kind, storage = _LOADABLE[entry.dtype]
    # Each call uses its own file handle so concurrent loads stay independent.
    with open(h.path, "rb") as fh:
        fh.seek(h.data_offset + entry.begin)
        data = np.fromfile(fh, dtype=storage, count=entry.numel)
    if data.size != entry.numel:
        raise IntegrityError(f"{h.path}: short read for {layer}")
    data = data.reshape(entry.shape)
    if kind == "f16":
        logger.warning("Layer %s is f16; widening to f32 (the bf16 probe will refuse it)", layer)
        return WeightMatrix(layer, "f32", data.astype(np.float32), source_dtype="f16")
    return WeightMatrix(layer, kind, data.astype(storage.newbyteorder("=")))


def iter_matrices(h: CheckpointHandle, f: Optional[LayerFilter] = None) -> Iterator[WeightMatrix]:
    for name in list_layers(h, f):
        yield load_matrix(h, name)


def read_raw(h: CheckpointHandle, layer: str) -> bytes:
    entry = h.raw_entry(layer)
    with open(h.path, "rb") as fh:
        fh.seek(h.data_offset + entry.begin)
        return fh.read(entry.end - entry.begin)


TensorSource = Union[WeightMatrix, Tuple[str, bytes, Sequence[int]]]


def write_archive(
    path: Union[str, os.PathLike],
    tensors: Mapping[str, TensorSource],
    metadata: Optional[Mapping[str, str]] = None,
) -> None:
    """
    Write tensors in mapping order.

    :param tensors: name -> WeightMatrix, or name -> (dtype tag, raw bytes, shape)
        for passing through payloads this tool does not decode
    :param metadata: Optional string key/value pairs stored under ``__metadata__``
    """
    header: "OrderedDict[str, object]" = OrderedDict()
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    payloads: List[bytes] = []
    offset = 0
    for name, tensor in tensors.items():
        if isinstance(tensor, WeightMatrix):
            tag, _ = _WRITABLE[tensor.dtype]
            blob, shape = tensor.to_bytes(), tensor.shape
        else:
            tag, blob, shape = tensor
        header[name] = {"dtype": tag, "shape": list(shape), "data_offsets": [offset, offset + len(blob)]}
        payloads.append(blob)
        offset += len(blob)

    encoded = json.dumps(header, separators=(",", ":")).encode("utf-8")
    # Pad with spaces so the payload starts 8-byte aligned.
    encoded += b" " * (-len(encoded) % 8)
    tmp_path = f"{os.fspath(path)}.partial"
    try:
        with open(tmp_path, "wb") as fh:
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            for blob in payloads:
                fh.write(blob)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.info("Wrote %d tensors to %s", len(payloads), path)
