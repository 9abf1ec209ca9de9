"""Task vectors and their covariance-guided purification.

A task vector is the parameter delta a fine-tune added on top of a base
model. Three kinds flow through the toolkit:

* ``plain``: W_ft - W_base per tensor.
* ``dare``: plain vector with random per-element dropping at rate p and
  1/(1-p) rescaling of the survivors, which keeps the expectation equal to
  the plain vector.
* ``pave``: for each linear layer, the fine-tuned weight is projected onto
  the top singular directions of W_ft @ C, where C is the layer's input
  covariance, and mapped back through C^-1; the base weight is subtracted
  afterwards. Directions the task's activations never exercise carry mostly
  fine-tuning noise, and this construction discards them while preserving
  the layer's action on the activations that actually occur.

``apply_decomposer`` implements the projection for a family of decomposer
variants (plain/scaled/whitened/covariance-multiplied, plus random and
cross-task covariance controls used in ablation experiments).
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import linalg
from .container import Checkpoint, CovarianceSet, CovEntry, TensorRecord, check_compat
from .errors import (
    Degenerate,
    DimensionMismatch,
    IncompatibleTopology,
    InvalidRate,
    MalformedHeader,
    MissingCovariance,
    RankOutOfRange,
    ValidationError,
)

DECOMPOSER_VARIANTS = (
    "plain_svd",
    "scaled_svd",
    "whitened_svd",
    "co_svd",
    "co_svd_random",
    "co_svd_crosstask",
)

_NEEDS_COVARIANCE = {"scaled_svd", "whitened_svd", "co_svd", "co_svd_crosstask"}


@dataclass(frozen=True)
class DecomposerKind:
    """Selects how a linear layer is factored before rank truncation.

    ``crosstask_id`` names the task whose covariance is deliberately used in
    the mismatched-covariance control; ``random_seed`` keys the surrogate
    matrix of the random-projection control.
    """

    variant: str = "co_svd"
    crosstask_id: str | None = None
    random_seed: int = 0

    def validate(self) -> None:
        if self.variant not in DECOMPOSER_VARIANTS:
            raise ValidationError(
                f"unknown decomposer {self.variant!r}; expected one of {DECOMPOSER_VARIANTS}"
            )
        if self.variant == "co_svd_crosstask" and not self.crosstask_id:
            raise ValidationError("co_svd_crosstask requires crosstask_id")


@dataclass
class PurifiedLayer:
    """One linear layer's purified delta plus what the truncation discarded."""

    layer_name: str
    delta: np.ndarray
    rank_used: int
    residual_energy: float


@dataclass
class TaskVectorSet:
    """All per-tensor deltas for one task, tagged with how they were made."""

    task_id: str
    kind: str
    layers: dict[str, np.ndarray]
    purified: dict[str, PurifiedLayer] = field(default_factory=dict)
    provenance: dict[str, object] = field(default_factory=dict)


def _model_id(ck: Checkpoint) -> str:
    return ck.metadata.get("model_id", ck.metadata.get("task_id", ""))


_DELTA_SUFFIX = ".delta"


def task_vectors_to_container(vectors: TaskVectorSet) -> Checkpoint:
    """Pack a task vector set into a tensor container.

    Deltas are stored under "<tensor>.delta"; kind, task id, and provenance
    ride in the metadata so the set reloads without its source checkpoints.
    """
    arrays = {
        name + _DELTA_SUFFIX: TensorRecord(
            name + _DELTA_SUFFIX, np.asarray(delta, dtype=np.float64)
        )
        for name, delta in vectors.layers.items()
    }
    meta = {
        "kind": vectors.kind,
        "task_id": vectors.task_id,
        "provenance": json.dumps(vectors.provenance, sort_keys=True, default=str),
    }
    return Checkpoint(tensors=arrays, linear_layers=[], metadata=meta)


def task_vectors_from_container(ck: Checkpoint) -> TaskVectorSet:
    layers: dict[str, np.ndarray] = {}
    for name in ck.tensors:
        if not name.endswith(_DELTA_SUFFIX):
            raise MalformedHeader(
                f"tensor {name!r} does not look like a task vector delta"
                f" (<tensor>{_DELTA_SUFFIX})"
            )
        layers[name[: -len(_DELTA_SUFFIX)]] = ck.get(name).astype(np.float64)
    kind = ck.metadata.get("kind", "plain")
    if kind not in ("plain", "dare", "pave"):
        raise ValidationError(f"unknown task vector kind {kind!r}")
    try:
        provenance = json.loads(ck.metadata.get("provenance", "{}"))
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"bad provenance metadata: {exc}") from exc
    return TaskVectorSet(
        task_id=ck.metadata.get("task_id", ""),
        kind=kind,
        layers=layers,
        provenance=provenance,
    )


def _require_compatible(finetuned: Checkpoint, base: Checkpoint) -> None:
    issues = check_compat(finetuned, base)
    if issues:
        listing = "; ".join(f"{name}: {what}" for name, what in issues[:8])
        raise IncompatibleTopology(f"checkpoints are not merge-compatible: {listing}")


def plain_task_vector(finetuned: Checkpoint, base: Checkpoint) -> TaskVectorSet:
    """Per-tensor difference finetuned - base, computed in float64."""
    _require_compatible(finetuned, base)
    layers = {
        name: finetuned.get(name).astype(np.float64) - base.get(name).astype(np.float64)
        for name in finetuned.tensors
    }
    return TaskVectorSet(
        task_id=finetuned.metadata.get("task_id", _model_id(finetuned)),
        kind="plain",
        layers=layers,
    )


def _layer_generator(seed: int, layer_name: str) -> np.random.Generator:
    digest = hashlib.blake2b(
        f"dare\x1f{seed}\x1f{layer_name}".encode(), digest_size=16
    ).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def dare_task_vector(vectors: TaskVectorSet, p: float, seed: int) -> TaskVectorSet:
    """Drop each delta element with probability p, rescale survivors by 1/(1-p).

    Randomness is counter-based and keyed on (seed, layer name, element
    index): the mask for a layer never depends on which other layers exist
    or the order they are visited in. The output is unbiased, E[out] equals
    the input delta elementwise.
    """
    if not 0.0 <= p < 1.0:
        raise InvalidRate(f"drop rate must satisfy 0 <= p < 1, got {p}")
    assert vectors.kind == "plain", "DARE applies to plain task vectors"
    out: dict[str, np.ndarray] = {}
    for name in vectors.layers:
        delta = vectors.layers[name]
        draws = _layer_generator(seed, name).random(delta.shape)
        out[name] = np.where(draws >= p, delta / (1.0 - p), 0.0)
    return TaskVectorSet(
        task_id=vectors.task_id,
        kind="dare",
        layers=out,
        provenance={"p": p, "seed": seed},
    )


# --- decomposers -------------------------------------------------------------


def _general_invertible(M: np.ndarray) -> tuple[np.ndarray, float]:
    """Boost a general square matrix along the doubling schedule until its
    condition number is acceptable for a direct solve."""
    n = M.shape[0]
    eps = max(1e-6 * abs(float(np.trace(M))) / n, 1e-12)
    boost = 0.0
    for _ in range(128):
        candidate = M if boost == 0.0 else M + boost * np.eye(n)
        cond = np.linalg.cond(candidate)
        if np.isfinite(cond) and cond < 1e12:
            return candidate, boost
        boost = eps if boost == 0.0 else 2.0 * boost
    raise Degenerate("surrogate matrix could not be regularized to invertibility")


def _random_surrogate(seed: int, n: int) -> np.ndarray:
    digest = hashlib.blake2b(f"cosvd-random\x1f{seed}\x1f{n}".encode(), digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.uniform(-1.0, 1.0, size=(n, n))


def apply_decomposer(
    W: np.ndarray,
    entry: CovEntry | None,
    kind: DecomposerKind,
    r: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Rank-r purification of one linear weight matrix.

    Returns (W_purified, spectrum) where spectrum holds the singular values
    of the factored product (of W itself for plain_svd). All variants reduce
    to: factor a transformed W, keep the top r directions, undo the
    transform.
    """
    kind.validate()
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionMismatch(f"linear weight must be 2-D, got ndim={W.ndim}")
    variant = kind.variant
    if variant in _NEEDS_COVARIANCE:
        if entry is None:
            raise MissingCovariance(f"decomposer {variant} needs a covariance entry")
        if entry.matrix.shape[0] != W.shape[1]:
            raise DimensionMismatch(
                f"covariance dim {entry.matrix.shape[0]} does not match weight columns"
                f" {W.shape[1]}"
            )

    if variant == "plain_svd":
        factors = linalg.svd(W)
        return linalg.truncate(factors, r), factors.S

    if variant == "scaled_svd":
        raw_diag = np.clip(np.diag(entry.matrix) - entry.diag_boost, 0.0, None)
        scale = np.sqrt(raw_diag / max(entry.sample_count, 1))
        positive = scale[scale > 0.0]
        if positive.size == 0:
            scale = np.ones_like(scale)
        else:
            scale = np.maximum(scale, 1e-8 * float(positive.max()))
        factors = linalg.svd(W * scale[None, :])
        kept = linalg.truncate(factors, r)
        return kept / scale[None, :], factors.S

    if variant == "whitened_svd":
        L = linalg.cholesky(entry.matrix)
        factors = linalg.svd(W @ L.T)
        kept = linalg.truncate(factors, r)
        purified = scipy.linalg.solve_triangular(L, kept.T, lower=True).T
        return purified, factors.S

    if variant in ("co_svd", "co_svd_crosstask"):
        C = entry.matrix
        factors = linalg.svd(W @ C)
        kept = linalg.truncate(factors, r)
        purified = linalg.cholesky_solve(C, kept.T).T
        return purified, factors.S

    # co_svd_random
    surrogate, _ = _general_invertible(_random_surrogate(kind.random_seed, W.shape[1]))
    factors = linalg.svd(W @ surrogate)
    kept = linalg.truncate(factors, r)
    try:
        purified = np.linalg.solve(surrogate.T, kept.T).T
    except np.linalg.LinAlgError as exc:
        raise Degenerate(f"surrogate solve failed: {exc}") from exc
    return purified, factors.S


def _resolve_ranks(ranks, model_id: str) -> dict[str, int]:
    if hasattr(ranks, "layer_ranks"):
        return dict(ranks.layer_ranks(model_id))
    return dict(ranks)


def pave_purify(
    finetuned: Checkpoint,
    base: Checkpoint,
    covs: CovarianceSet,
    ranks,
    decomposer: DecomposerKind = DecomposerKind(),
    threads: int = 1,
) -> TaskVectorSet:
    """Purified task vector: truncate each linear layer in the covariance
    geometry, subtract the base afterwards.

    ``ranks`` is either a mapping layer -> rank or a rank allocation object
    exposing ``layer_ranks(model_id)``. Non-linear tensors pass through as
    plain deltas. With full rank everywhere the result reproduces the plain
    task vector up to solve roundoff.
    """
    decomposer.validate()
    _require_compatible(finetuned, base)
    rank_map = _resolve_ranks(ranks, _model_id(finetuned))

    def purify_layer(name: str) -> PurifiedLayer:
        W = finetuned.get(name).astype(np.float64)
        entry = covs.entries.get(name)
        if entry is None and decomposer.variant in _NEEDS_COVARIANCE:
            raise MissingCovariance(f"no covariance entry for linear layer {name!r}")
        if name not in rank_map:
            raise RankOutOfRange(f"no rank assigned for linear layer {name!r}")
        r = int(rank_map[name])
        purified, spectrum = apply_decomposer(W, entry, decomposer, r)
        delta = purified - base.get(name).astype(np.float64)
        residual = float(np.sum(spectrum[r:] ** 2))
        return PurifiedLayer(
            layer_name=name, delta=delta, rank_used=r, residual_energy=residual
        )

    linear = list(finetuned.linear_layers)
    if threads > 1 and len(linear) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(purify_layer, linear))
    else:
        results = [purify_layer(name) for name in linear]

    purified_layers = {p.layer_name: p for p in results}
    layers: dict[str, np.ndarray] = {}
    for name in finetuned.tensors:
        if name in purified_layers:
            layers[name] = purified_layers[name].delta
        else:
            layers[name] = finetuned.get(name).astype(np.float64) - base.get(name).astype(
                np.float64
            )
    return TaskVectorSet(
        task_id=finetuned.metadata.get("task_id", _model_id(finetuned)),
        kind="pave",
        layers=layers,
        purified=purified_layers,
        provenance={
            "decomposer": decomposer.variant,
            "crosstask_id": decomposer.crosstask_id,
            "random_seed": decomposer.random_seed,
        },
    )
