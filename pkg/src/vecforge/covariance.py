"""Input-activation covariance: accumulation and regularization.

For a linear layer y = W x the purification pipeline needs the second
moment of the inputs it actually sees, C = sum_b X_b X_b^T accumulated over
batches whose columns are activation vectors. Accumulation is exact-order
and float64 throughout, so the result is independent of how the same
columns are split into batches (up to float addition order over batches,
which is fixed by the stream order).

``regularize_invertible`` makes C usable as a linear system: it walks the
boost schedule {0, eps, 2 eps, 4 eps, ...} with eps = 1e-6 * trace(C)/n
(floored at 1e-12) and returns the first C + boost*I that admits a Cholesky
factorization with strictly positive pivots.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg
from .container import CovarianceSet, CovEntry
from .errors import Degenerate, DimensionMismatch, EmptyStream, NotPositiveDefinite

_EPS_REL = 1e-6
_EPS_FLOOR = 1e-12
_MAX_DOUBLINGS = 128


@dataclass
class ActivationStream:
    """Ordered batches of column-vector activations for one layer."""

    layer_name: str
    batches: Sequence[np.ndarray]
    source_task: str = ""


def build_covariance(stream: ActivationStream) -> CovEntry:
    """Accumulate C = sum X X^T over the stream's batches.

    Returns an unregularized entry (diag_boost = 0). The accumulated matrix
    is positive semidefinite by construction and exactly symmetric.
    """
    batches = list(stream.batches)
    if not batches:
        raise EmptyStream(f"stream for layer {stream.layer_name!r} has no batches")
    first = np.asarray(batches[0])
    if first.ndim != 2:
        raise DimensionMismatch(
            f"layer {stream.layer_name!r}: batches must be 2-D, got ndim={first.ndim}"
        )
    n = first.shape[0]
    acc = np.zeros((n, n), dtype=np.float64)
    count = 0
    for batch in batches:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[0] != n:
            raise DimensionMismatch(
                f"layer {stream.layer_name!r}: batch shape {batch.shape} does not match"
                f" activation dim {n}"
            )
        acc = linalg.accumulate_covariance(acc, batch)
        count += batch.shape[1]
    return CovEntry(matrix=acc, sample_count=count, diag_boost=0.0)


def regularize_invertible(
    C: np.ndarray, identity_fallback: bool = False
) -> tuple[np.ndarray, float]:
    """Smallest boost on the doubling schedule making C + boost*I Cholesky-able.

    A zero-trace covariance (an all-zero stream) raises Degenerate unless
    ``identity_fallback`` is set, in which case the identity is returned
    with boost 1.0. Already-positive-definite input comes back unchanged
    with boost 0.0, so the operation is idempotent.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionMismatch(f"covariance must be square, got {C.shape}")
    n = C.shape[0]
    trace = float(np.trace(C))
    if trace <= 0.0:
        if identity_fallback:
            return np.eye(n), 1.0
        raise Degenerate("covariance has zero trace (no activation energy)")
    eps = max(_EPS_REL * trace / n, _EPS_FLOOR)
    boost = 0.0
    for _ in range(_MAX_DOUBLINGS):
        candidate = C if boost == 0.0 else C + boost * np.eye(n)
        try:
            linalg.cholesky(candidate)
        except NotPositiveDefinite:
            boost = eps if boost == 0.0 else 2.0 * boost
            continue
        return candidate, boost
    raise Degenerate(
        f"no boost on the doubling schedule (base {eps:.3e}) made the covariance"
        " positive definite"
    )


def regularize_entry(entry: CovEntry, identity_fallback: bool = False) -> CovEntry:
    """Regularize a raw covariance entry, preserving its sample count."""
    if entry.diag_boost != 0.0:
        return entry
    mat, boost = regularize_invertible(entry.matrix, identity_fallback=identity_fallback)
    return CovEntry(matrix=mat, sample_count=entry.sample_count, diag_boost=boost)


def build_covariance_set(
    streams: Sequence[ActivationStream],
    task_id: str = "",
    regularize: bool = True,
    identity_fallback: bool = False,
) -> CovarianceSet:
    """Build one covariance entry per stream and optionally regularize."""
    entries: dict[str, CovEntry] = {}
    for stream in streams:
        entry = build_covariance(stream)
        if regularize:
            entry = regularize_entry(entry, identity_fallback=identity_fallback)
        entries[stream.layer_name] = entry
    return CovarianceSet(entries=entries, task_id=task_id)


# --- activation batches on disk ----------------------------------------------
#
# Recorded activations ride in an ordinary tensor container under the names
# "<layer>.acts.<i>" with i numbering the batches in stream order.

_ACTS_RE = re.compile(r"^(?P<layer>.+)\.acts\.(?P<index>\d+)$")


def streams_to_container(streams: Sequence[ActivationStream], task_id: str = ""):
    from .container import Checkpoint, TensorRecord

    arrays = {}
    for stream in streams:
        for i, batch in enumerate(stream.batches):
            name = f"{stream.layer_name}.acts.{i}"
            arrays[name] = TensorRecord(name, np.asarray(batch, dtype=np.float64))
    meta = {"task_id": task_id} if task_id else {}
    return Checkpoint(tensors=arrays, linear_layers=[], metadata=meta)


def streams_from_container(ck) -> dict[str, ActivationStream]:
    found: dict[str, list[tuple[int, np.ndarray]]] = {}
    for name in ck.tensors:
        m = _ACTS_RE.match(name)
        if not m:
            raise DimensionMismatch(
                f"tensor {name!r} does not look like an activation batch"
                " (<layer>.acts.<i>)"
            )
        found.setdefault(m.group("layer"), []).append(
            (int(m.group("index")), ck.get(name))
        )
    task = ck.metadata.get("task_id", "")
    streams = {}
    for layer, batches in found.items():
        batches.sort(key=lambda pair: pair[0])
        streams[layer] = ActivationStream(
            layer_name=layer,
            batches=[b for _, b in batches],
            source_task=task,
        )
    return streams
