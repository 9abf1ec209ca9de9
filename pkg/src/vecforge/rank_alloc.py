"""Spectral rank allocation across tasks under a shared budget.

Uniform truncation wastes budget: some tasks concentrate their useful
energy in a few directions while others spread it out. The allocator works
per layer. Each model's singular values are normalized by that model's
largest value, every model starts at full rank R, and the globally smallest
normalized value at any model's current rank frontier is discarded until the
kept share of ranks drops to the target ratio rho. A model whose rank
reaches the floor gamma * R leaves the active set and keeps what it has.
The greedy minimizes the total discarded normalized energy
sum_i sum_{j > r_i} s_ij^2, which an exchange argument (and the exhaustive
search in the tests) shows is optimal given the floors.

Models can be exempted: they sit at full rank, still count toward the
budget denominator and the kept-rank sum, but are never truncated.
``progressive_full_rank`` grows the exempt set one task at a time, picking
the task whose merged score trails its individual score the most.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import purify
from .container import Checkpoint, CovarianceSet, check_compat
from .errors import (
    AllExempt,
    DimensionMismatch,
    IncompatibleTopology,
    InvalidBudget,
    IoFailure,
    MissingCovariance,
    ValidationError,
)


@dataclass
class SpectralProfile:
    """Per-layer singular value spectra of one model's factored layers."""

    model_id: str
    layers: dict[str, np.ndarray]

    def normalized(self, layer: str) -> np.ndarray:
        sigma = self.layers[layer]
        if sigma.size == 0 or sigma[0] <= 0.0:
            return np.zeros_like(sigma)
        return sigma / sigma[0]

    def validate(self) -> None:
        for layer, sigma in self.layers.items():
            if sigma.ndim != 1:
                raise DimensionMismatch(f"{layer}: spectrum must be 1-D")
            if np.any(sigma < 0):
                raise ValidationError(f"{layer}: singular values must be non-negative")
            if np.any(np.diff(sigma) > 1e-12 * max(1.0, float(sigma[0]) if sigma.size else 1.0)):
                raise ValidationError(f"{layer}: spectrum must be non-increasing")


@dataclass
class RankAllocation:
    """Kept rank per (model, layer) plus the budget that produced it."""

    model_order: list[str]
    layer_order: list[str]
    ranks: dict[str, dict[str, int]]
    full_ranks: dict[str, int]
    rho: float
    gamma: float
    exempt: frozenset[str] = field(default_factory=frozenset)

    def layer_ranks(self, model_id: str) -> dict[str, int]:
        if model_id not in self.ranks:
            raise MissingCovariance(f"no rank entries for model {model_id!r}")
        return dict(self.ranks[model_id])

    def kept_ratio(self, layer: str) -> float:
        total = sum(self.ranks[m][layer] for m in self.model_order)
        return total / (len(self.model_order) * self.full_ranks[layer])


def build_profiles(
    checkpoints: Sequence[Checkpoint],
    cov_sets: Sequence[CovarianceSet],
    decomposer: purify.DecomposerKind = purify.DecomposerKind(),
) -> list[SpectralProfile]:
    """Spectra of each model's linear layers in the decomposer geometry."""
    if len(checkpoints) != len(cov_sets):
        raise DimensionMismatch(
            f"{len(checkpoints)} checkpoints but {len(cov_sets)} covariance sets"
        )
    if not checkpoints:
        raise ValidationError("at least one checkpoint is required")
    first = checkpoints[0]
    for other in checkpoints[1:]:
        issues = check_compat(first, other)
        if issues:
            raise IncompatibleTopology(f"checkpoint topologies differ: {issues[:4]}")
    profiles = []
    for index, (ck, covs) in enumerate(zip(checkpoints, cov_sets)):
        model_id = ck.metadata.get("model_id", ck.metadata.get("task_id", f"model{index}"))
        spectra: dict[str, np.ndarray] = {}
        for layer in ck.linear_layers:
            entry = covs.entries.get(layer)
            if entry is None and decomposer.variant != "plain_svd":
                raise MissingCovariance(
                    f"model {model_id!r}: no covariance entry for layer {layer!r}"
                )
            W = ck.get(layer).astype(np.float64)
            _, spectrum = purify.apply_decomposer(W, entry, decomposer, 0)
            spectra[layer] = spectrum
        profile = SpectralProfile(model_id=model_id, layers=spectra)
        profile.validate()
        profiles.append(profile)
    return profiles


def allocate(
    profiles: Sequence[SpectralProfile],
    rho: float,
    gamma: float,
    exempt: frozenset[str] | set[str] = frozenset(),
) -> RankAllocation:
    """Greedy per-layer rank assignment meeting the budget rho with floor gamma.

    Within each layer, while the kept share sum_i r_i / (K * R) exceeds rho
    and truncatable models remain, the model whose frontier normalized
    singular value is globally smallest loses one rank. Ties prefer the
    model with the larger current rank, then the earlier model. Lowering rho
    only extends the removal sequence, so allocations are monotone in rho.
    """
    if not profiles:
        raise ValidationError("at least one profile is required")
    if not (0.0 < gamma <= rho <= 1.0):
        raise InvalidBudget(f"need 0 < gamma <= rho <= 1, got gamma={gamma}, rho={rho}")
    model_order = [p.model_id for p in profiles]
    if len(set(model_order)) != len(model_order):
        raise ValidationError(f"duplicate model ids in profiles: {model_order}")
    exempt = frozenset(exempt)
    unknown = exempt - set(model_order)
    if unknown:
        raise ValidationError(f"exempt ids not among profiles: {sorted(unknown)}")
    layer_order = list(profiles[0].layers)
    for p in profiles[1:]:
        if list(p.layers) != layer_order:
            raise DimensionMismatch(
                f"profile {p.model_id!r} has layers {list(p.layers)}, expected {layer_order}"
            )

    K = len(profiles)
    ranks: dict[str, dict[str, int]] = {m: {} for m in model_order}
    full_ranks: dict[str, int] = {}
    for layer in layer_order:
        R = int(profiles[0].layers[layer].shape[0])
        for p in profiles[1:]:
            if p.layers[layer].shape[0] != R:
                raise DimensionMismatch(
                    f"layer {layer!r}: spectrum lengths differ across models"
                )
        full_ranks[layer] = R
        spectra = [p.normalized(layer) for p in profiles]
        r = [R] * K
        active = [
            i for i, m in enumerate(model_order) if m not in exempt and R > 0
        ]
        while active and sum(r) > rho * K * R:
            best = None
            for i in active:
                key = (float(spectra[i][r[i] - 1]), -r[i], i)
                if best is None or key < best[0]:
                    best = (key, i)
            i = best[1]
            r[i] -= 1
            if r[i] <= gamma * R:
                active.remove(i)
        for i, m in enumerate(model_order):
            ranks[m][layer] = r[i]
    return RankAllocation(
        model_order=model_order,
        layer_order=layer_order,
        ranks=ranks,
        full_ranks=full_ranks,
        rho=rho,
        gamma=gamma,
        exempt=exempt,
    )


def per_model_ratios(alloc: RankAllocation) -> dict[str, float]:
    """Share of total rank each model keeps, summed over layers."""
    total_full = sum(alloc.full_ranks[l] for l in alloc.layer_order)
    out = {}
    for m in alloc.model_order:
        kept = sum(alloc.ranks[m][l] for l in alloc.layer_order)
        out[m] = kept / total_full if total_full else 0.0
    return out


def discarded_mass(profiles: Sequence[SpectralProfile], alloc: RankAllocation) -> float:
    """Total squared normalized singular mass the allocation throws away."""
    total = 0.0
    for p in profiles:
        for layer in alloc.layer_order:
            s = p.normalized(layer)
            r = alloc.ranks[p.model_id][layer]
            total += float(np.sum(s[r:] ** 2))
    return total


def progressive_full_rank(
    profiles: Sequence[SpectralProfile],
    alloc: RankAllocation,
    scores: Mapping[str, tuple[float, float]],
) -> RankAllocation:
    """Exempt the task hurt most by merging and re-run the allocator.

    ``scores`` maps model id to (merged score, individual score). The
    non-exempt task with the largest individual - merged gap becomes
    full-rank; on ties the earliest task in profile order wins. Raises
    AllExempt once every task is already exempt.
    """
    candidates = [m for m in alloc.model_order if m not in alloc.exempt]
    if not candidates:
        raise AllExempt("every task is already assigned full rank")
    missing = [m for m in candidates if m not in scores]
    if missing:
        raise ValidationError(f"scores missing for models: {missing}")
    best = None
    for m in candidates:
        merged, individual = scores[m]
        gap = individual - merged
        if best is None or gap > best[0]:
            best = (gap, m)
    picked = best[1]
    return allocate(profiles, alloc.rho, alloc.gamma, exempt=alloc.exempt | {picked})


# --- text serialization -------------------------------------------------------


def allocation_to_text(alloc: RankAllocation) -> str:
    lines = [
        "# vecforge rank allocation",
        f"# rho {alloc.rho!r}",
        f"# gamma {alloc.gamma!r}",
        "# exempt " + (",".join(sorted(alloc.exempt)) if alloc.exempt else "-"),
        "# columns: model\tlayer\tfull_rank\trank",
    ]
    for m in alloc.model_order:
        for layer in alloc.layer_order:
            lines.append(f"{m}\t{layer}\t{alloc.full_ranks[layer]}\t{alloc.ranks[m][layer]}")
    return "\n".join(lines) + "\n"


def allocation_from_text(text: str) -> RankAllocation:
    rho = gamma = None
    exempt: frozenset[str] = frozenset()
    model_order: list[str] = []
    layer_order: list[str] = []
    ranks: dict[str, dict[str, int]] = {}
    full_ranks: dict[str, int] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("rho "):
                rho = float(body[4:])
            elif body.startswith("gamma "):
                gamma = float(body[6:])
            elif body.startswith("exempt "):
                spec = body[7:].strip()
                exempt = frozenset() if spec == "-" else frozenset(spec.split(","))
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValidationError(f"bad allocation row: {raw!r}")
        model, layer, full, rank = parts
        if model not in ranks:
            ranks[model] = {}
            model_order.append(model)
        if layer not in full_ranks:
            full_ranks[layer] = int(full)
            layer_order.append(layer)
        elif full_ranks[layer] != int(full):
            raise ValidationError(f"layer {layer!r}: inconsistent full rank")
        ranks[model][layer] = int(rank)
    if rho is None or gamma is None:
        raise ValidationError("allocation text lacks rho/gamma headers")
    return RankAllocation(
        model_order=model_order,
        layer_order=layer_order,
        ranks=ranks,
        full_ranks=full_ranks,
        rho=rho,
        gamma=gamma,
        exempt=exempt,
    )


def write_allocation(alloc: RankAllocation, path: str | Path) -> None:
    try:
        Path(path).write_text(allocation_to_text(alloc))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_allocation(path: str | Path) -> RankAllocation:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return allocation_from_text(text)
