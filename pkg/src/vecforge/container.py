"""On-disk tensor container and the in-memory objects it stores.

The file layout is the safetensors layout: an 8-byte little-endian unsigned
header length, a UTF-8 JSON header mapping tensor names to dtype, shape and
byte offsets (plus an optional ``__metadata__`` string map), then the raw
row-major little-endian payload. Only "F32" and "F64" scalars are accepted.

The writer is canonical: tensor names are laid out in lexicographic order,
the JSON uses a fixed key order and compact separators, and the header is
padded with spaces to an 8-byte boundary. Writing, reading back and writing
again therefore produces byte-identical files, which the tests rely on.

Two kinds of payload ride on the same layout:

* ``Checkpoint`` -- model weights plus the ordered list of linear layers.
* ``CovarianceSet`` -- per-layer input covariance, stored under the names
  ``<layer>.cov``, ``<layer>.count`` and ``<layer>.boost``.

The ``format`` metadata key disambiguates on read.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateName,
    IoFailure,
    MalformedHeader,
    ShapeMismatch,
)

_DTYPE_TO_STR = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}
_STR_TO_DTYPE = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}

_FORMAT_KEY = "format"
_LINEAR_KEY = "linear_layers"

_SYM_ABS_TOL = 1e-9
_PSD_REL_TOL = 1e-8


@dataclass
class TensorRecord:
    """A named tensor with a fixed on-disk scalar type."""

    name: str
    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.dtype not in _DTYPE_TO_STR:
            raise ShapeMismatch(
                f"tensor {self.name!r}: dtype {arr.dtype} not storable (float32/float64 only)"
            )
        self.array = np.ascontiguousarray(arr)

    @property
    def dtype(self) -> str:
        return _DTYPE_TO_STR[self.array.dtype]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def nbytes(self) -> int:
        return self.array.nbytes


@dataclass
class Checkpoint:
    """A set of named weight tensors plus merge-relevant bookkeeping.

    ``linear_layers`` is the ordered list of tensor names treated as linear
    maps (2-D, activations enter on the column side). Everything else is
    carried along verbatim by the merging pipeline.
    """

    tensors: dict[str, TensorRecord]
    linear_layers: list[str] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def get(self, name: str) -> np.ndarray:
        return self.tensors[name].array

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def validate(self) -> None:
        for name, rec in self.tensors.items():
            if rec.name != name:
                raise MalformedHeader(f"record name {rec.name!r} filed under {name!r}")
        for layer in self.linear_layers:
            if layer not in self.tensors:
                raise MalformedHeader(f"linear layer {layer!r} has no tensor")
            if self.tensors[layer].array.ndim != 2:
                raise ShapeMismatch(
                    f"linear layer {layer!r} is {self.tensors[layer].array.ndim}-D, expected 2-D"
                )
        if len(set(self.linear_layers)) != len(self.linear_layers):
            raise DuplicateName("linear_layers contains repeats")


def new_checkpoint(
    arrays: dict[str, np.ndarray],
    linear_layers: list[str] | None = None,
    metadata: dict[str, str] | None = None,
) -> Checkpoint:
    """Build a Checkpoint from plain arrays and validate it."""
    ck = Checkpoint(
        tensors={name: TensorRecord(name, arr) for name, arr in arrays.items()},
        linear_layers=list(linear_layers or []),
        metadata=dict(metadata or {}),
    )
    ck.validate()
    return ck


@dataclass
class CovEntry:
    """Covariance for one layer's input activations.

    ``matrix`` is the regularized covariance actually used downstream; the
    raw accumulation is ``matrix - diag_boost * I``. ``sample_count`` is the
    number of activation columns accumulated.
    """

    matrix: np.ndarray
    sample_count: int
    diag_boost: float = 0.0

    def raw(self) -> np.ndarray:
        if self.diag_boost == 0.0:
            return self.matrix
        return self.matrix - self.diag_boost * np.eye(self.matrix.shape[0])


@dataclass
class CovarianceSet:
    """Per-layer covariance entries produced from one task's activations."""

    entries: dict[str, CovEntry]
    task_id: str = ""

    def validate(self, check_psd: bool = True) -> None:
        for layer, entry in self.entries.items():
            mat = entry.matrix
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ShapeMismatch(f"{layer}: covariance must be square, got {mat.shape}")
            if mat.dtype != np.float64:
                raise ShapeMismatch(f"{layer}: covariance must be float64, got {mat.dtype}")
            if entry.sample_count < 1:
                raise ShapeMismatch(f"{layer}: sample_count must be >= 1")
            if entry.diag_boost < 0:
                raise ShapeMismatch(f"{layer}: diag_boost must be >= 0")
            asym = np.abs(mat - mat.T)
            bound = _SYM_ABS_TOL * np.maximum(1.0, np.abs(mat))
            if np.any(asym > bound):
                raise ShapeMismatch(f"{layer}: covariance is not symmetric within tolerance")
            if check_psd:
                raw = entry.raw()
                n = raw.shape[0]
                tr = float(np.trace(raw))
                lo = float(np.linalg.eigvalsh(raw).min()) if n else 0.0
                if lo < -_PSD_REL_TOL * max(tr, 0.0) / max(n, 1):
                    raise ShapeMismatch(
                        f"{layer}: covariance not positive semidefinite (min eig {lo:.3e})"
                    )


# --- byte-level serialization ----------------------------------------------


def _reject_duplicate_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateName(f"duplicate name in header: {key!r}")
        out[key] = value
    return out


def _encode(arrays: dict[str, np.ndarray], metadata: dict[str, str]) -> bytes:
    header: dict[str, object] = {}
    if metadata:
        for k, v in metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise MalformedHeader("metadata must map strings to strings")
        header["__metadata__"] = dict(sorted(metadata.items()))
    names = sorted(arrays)
    chunks = []
    offset = 0
    for name in names:
        if name == "__metadata__":
            raise DuplicateName("tensor name '__metadata__' is reserved")
        arr = arrays[name]
        if arr.dtype not in _DTYPE_TO_STR:
            raise ShapeMismatch(f"{name}: dtype {arr.dtype} not storable")
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        header[name] = {
            "dtype": _DTYPE_TO_STR[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    hjson = json.dumps(header, separators=(",", ":"), ensure_ascii=True).encode("utf-8")
    hjson += b" " * ((-(8 + len(hjson))) % 8)
    return struct.pack("<Q", len(hjson)) + hjson + b"".join(chunks)


def _decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(buf) < 8:
        raise MalformedHeader("file shorter than the 8-byte header length")
    (hlen,) = struct.unpack("<Q", buf[:8])
    if 8 + hlen > len(buf):
        raise MalformedHeader("declared header length exceeds file size")
    try:
        text = buf[8 : 8 + hlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"header is not UTF-8: {exc}") from exc
    try:
        header = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    payload = buf[8 + hlen :]
    arrays: dict[str, np.ndarray] = {}
    spans: list[tuple[int, int, str]] = []
    for name, desc in header.items():
        if not isinstance(desc, dict):
            raise MalformedHeader(f"{name}: descriptor must be an object")
        dtype_str = desc.get("dtype")
        if dtype_str not in _STR_TO_DTYPE:
            raise MalformedHeader(f"{name}: unsupported dtype {dtype_str!r}")
        shape = desc.get("shape")
        if not isinstance(shape, list) or not all(
            isinstance(d, int) and d >= 0 for d in shape
        ):
            raise MalformedHeader(f"{name}: bad shape {shape!r}")
        offsets = desc.get("data_offsets")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise MalformedHeader(f"{name}: bad data_offsets {offsets!r}")
        begin, end = offsets
        if begin < 0 or end < begin or end > len(payload):
            raise MalformedHeader(f"{name}: offsets [{begin}, {end}) outside payload")
        dtype = _STR_TO_DTYPE[dtype_str]
        count = 1
        for d in shape:
            count *= d
        if count * dtype.itemsize != end - begin:
            raise ShapeMismatch(
                f"{name}: shape {shape} x {dtype_str} wants {count * dtype.itemsize} bytes,"
                f" offsets give {end - begin}"
            )
        spans.append((begin, end, name))
        flat = np.frombuffer(payload, dtype=dtype, count=count, offset=begin)
        native = np.ascontiguousarray(flat.reshape(shape), dtype=dtype.newbyteorder("="))
        arrays[name] = native.copy() if not native.flags.owndata else native

    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin != cursor:
            raise MalformedHeader(
                f"{name}: payload not contiguous (gap or overlap at byte {cursor})"
            )
        cursor = end
    if cursor != len(payload):
        raise MalformedHeader(f"payload has {len(payload) - cursor} trailing bytes")
    return arrays, metadata


# --- object <-> arrays -------------------------------------------------------


def _checkpoint_to_arrays(ck: Checkpoint) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    ck.validate()
    meta = dict(ck.metadata)
    meta[_FORMAT_KEY] = "checkpoint"
    meta[_LINEAR_KEY] = json.dumps(ck.linear_layers, separators=(",", ":"))
    return {name: rec.array for name, rec in ck.tensors.items()}, meta


def _arrays_to_checkpoint(arrays: dict[str, np.ndarray], meta: dict[str, str]) -> Checkpoint:
    meta = dict(meta)
    meta.pop(_FORMAT_KEY, None)
    raw_layers = meta.pop(_LINEAR_KEY, "[]")
    try:
        layers = json.loads(raw_layers)
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"bad linear_layers metadata: {exc}") from exc
    if not isinstance(layers, list) or not all(isinstance(x, str) for x in layers):
        raise MalformedHeader("linear_layers metadata must be a JSON list of strings")
    ck = Checkpoint(
        tensors={name: TensorRecord(name, arr) for name, arr in arrays.items()},
        linear_layers=layers,
        metadata=meta,
    )
    ck.validate()
    return ck


_COV_SUFFIXES = (".cov", ".count", ".boost")


def _covset_to_arrays(cs: CovarianceSet) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    cs.validate(check_psd=False)
    arrays: dict[str, np.ndarray] = {}
    for layer, entry in cs.entries.items():
        arrays[layer + ".cov"] = np.ascontiguousarray(entry.matrix, dtype=np.float64)
        arrays[layer + ".count"] = np.array(entry.sample_count, dtype=np.float64)
        arrays[layer + ".boost"] = np.array(entry.diag_boost, dtype=np.float64)
    meta = {_FORMAT_KEY: "covariance", "task_id": cs.task_id}
    return arrays, meta


def _arrays_to_covset(arrays: dict[str, np.ndarray], meta: dict[str, str]) -> CovarianceSet:
    layers = sorted({n[: -len(".cov")] for n in arrays if n.endswith(".cov")})
    entries: dict[str, CovEntry] = {}
    seen = set()
    for layer in layers:
        try:
            mat = arrays[layer + ".cov"]
            count = arrays[layer + ".count"]
            boost = arrays[layer + ".boost"]
        except KeyError as exc:
            raise MalformedHeader(f"covariance entry {layer!r} missing {exc}") from exc
        if count.size != 1 or boost.size != 1:
            raise MalformedHeader(f"covariance entry {layer!r}: count/boost must be scalars")
        entries[layer] = CovEntry(
            matrix=np.ascontiguousarray(mat, dtype=np.float64),
            sample_count=int(count.reshape(-1)[0]),
            diag_boost=float(boost.reshape(-1)[0]),
        )
        seen.update(layer + s for s in _COV_SUFFIXES)
    extra = set(arrays) - seen
    if extra:
        raise MalformedHeader(f"unexpected tensors in covariance container: {sorted(extra)}")
    cs = CovarianceSet(entries=entries, task_id=meta.get("task_id", ""))
    cs.validate(check_psd=True)
    return cs


# --- public API --------------------------------------------------------------


def to_bytes(obj: Checkpoint | CovarianceSet) -> bytes:
    if isinstance(obj, Checkpoint):
        arrays, meta = _checkpoint_to_arrays(obj)
    elif isinstance(obj, CovarianceSet):
        arrays, meta = _covset_to_arrays(obj)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    return _encode(arrays, meta)


def from_bytes(buf: bytes) -> Checkpoint | CovarianceSet:
    arrays, meta = _decode(buf)
    kind = meta.get(_FORMAT_KEY, "checkpoint")
    if kind == "covariance":
        return _arrays_to_covset(arrays, meta)
    if kind == "checkpoint":
        return _arrays_to_checkpoint(arrays, meta)
    raise MalformedHeader(f"unknown container format {kind!r}")


def write_container(obj: Checkpoint | CovarianceSet, path: str | Path) -> None:
    buf = to_bytes(obj)
    try:
        Path(path).write_bytes(buf)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_container(path: str | Path) -> Checkpoint | CovarianceSet:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return from_bytes(buf)


def read_checkpoint(path: str | Path) -> Checkpoint:
    obj = read_container(path)
    if not isinstance(obj, Checkpoint):
        raise MalformedHeader(f"{path} holds a covariance set, expected a checkpoint")
    return obj


def read_covariances(path: str | Path) -> CovarianceSet:
    obj = read_container(path)
    if not isinstance(obj, CovarianceSet):
        raise MalformedHeader(f"{path} holds a checkpoint, expected a covariance set")
    return obj


def check_compat(a: Checkpoint, b: Checkpoint) -> list[tuple[str, str]]:
    """List every topology difference that blocks merging ``a`` with ``b``.

    An empty report means the two checkpoints are merge-compatible. The
    relation this induces is an equivalence: it compares the exact set of
    tensor names, their shapes, and the ordered linear layer list.
    """
    issues: list[tuple[str, str]] = []
    for name in sorted(set(a.tensors) | set(b.tensors)):
        if name not in a.tensors:
            issues.append((name, "missing-in-a"))
        elif name not in b.tensors:
            issues.append((name, "missing-in-b"))
        elif a.tensors[name].shape != b.tensors[name].shape:
            issues.append(
                (name, f"shape {list(a.tensors[name].shape)} vs {list(b.tensors[name].shape)}")
            )
    if a.linear_layers != b.linear_layers:
        issues.append(("<linear_layers>", "linear layer lists differ"))
    return issues
