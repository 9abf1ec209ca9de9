"""Merging engines: combine task vectors into a single model.

All engines share one shape: take K task vector sets plus the base
checkpoint, produce a merged checkpoint. They accept task vectors of any
kind (plain, dare, pave), operate in float64 and cast back to each base
tensor's dtype at the end.

* average: base + mean of deltas.
* task_arithmetic: base + lambda * sum of deltas.
* ties: per-tensor magnitude trim to the top ceil(keep * N) entries per
  task, sign election by summed trimmed values, then a mean over the values
  that agree with the elected sign; base + lambda * merged.
* emr: sign election over raw deltas, a unified vector holding the largest
  agreeing magnitude per coordinate, and per-task boolean masks plus
  per-tensor rescalers that let each task reconstruct its own specialist
  model from the single unified vector.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import purify, rank_alloc
from .container import Checkpoint, CovarianceSet, TensorRecord, read_checkpoint, read_covariances
from .errors import (
    IncompatibleTopology,
    InvalidRate,
    IoFailure,
    MissingCovariance,
    ValidationError,
)
from .purify import DecomposerKind, TaskVectorSet

MERGE_METHODS = ("average", "task_arithmetic", "ties", "emr")


@dataclass
class PurifySettings:
    """Covariance-guided truncation applied to task vectors before merging."""

    decomposer: str = "co_svd"
    rho: float = 7 / 8
    gamma: float | None = None
    exempt: list[str] = field(default_factory=list)

    def effective_gamma(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return self.rho - (1.0 - self.rho) / 2.0


@dataclass
class RecipeInput:
    checkpoint: str
    covariance: str | None = None
    task_id: str | None = None


@dataclass
class MergeRecipe:
    """Everything needed to reproduce a merge byte-for-byte."""

    method: str
    inputs: list[RecipeInput]
    base: str
    lam: float = 1.0
    ties_trim_keep: float = 0.2
    dare_p: float | None = None
    purification: PurifySettings | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.method not in MERGE_METHODS:
            raise ValidationError(
                f"unknown merge method {self.method!r}; expected one of {MERGE_METHODS}"
            )
        if not self.inputs:
            raise ValidationError("recipe needs at least one input")
        if not self.base:
            raise ValidationError("recipe needs a base checkpoint")
        if not 0.0 <= self.lam <= 2.0:
            raise ValidationError(f"lambda must lie in [0, 2], got {self.lam}")
        if not 0.0 < self.ties_trim_keep <= 1.0:
            raise ValidationError(
                f"ties_trim_keep must lie in (0, 1], got {self.ties_trim_keep}"
            )
        if self.dare_p is not None and not 0.0 <= self.dare_p < 1.0:
            raise InvalidRate(f"dare_p must lie in [0, 1), got {self.dare_p}")
        if self.dare_p is not None and self.purification is not None:
            raise ValidationError(
                "dare_p and purification cannot be combined: random dropping is"
                " defined on plain task vectors"
            )
        if self.purification is not None:
            rho = self.purification.rho
            gamma = self.purification.effective_gamma()
            if not 0.0 < gamma <= rho <= 1.0:
                raise ValidationError(
                    f"purification budget needs 0 < gamma <= rho <= 1, got"
                    f" gamma={gamma}, rho={rho}"
                )


def recipe_to_dict(recipe: MergeRecipe) -> dict:
    out: dict[str, object] = {
        "method": recipe.method,
        "lambda": recipe.lam,
        "ties_trim_keep": recipe.ties_trim_keep,
        "dare_p": recipe.dare_p,
        "purification": None,
        "inputs": [
            {"checkpoint": i.checkpoint, "covariance": i.covariance, "task_id": i.task_id}
            for i in recipe.inputs
        ],
        "base": recipe.base,
        "seed": recipe.seed,
    }
    if recipe.purification is not None:
        out["purification"] = {
            "decomposer": recipe.purification.decomposer,
            "rho": recipe.purification.rho,
            "gamma": recipe.purification.effective_gamma(),
            "exempt": sorted(recipe.purification.exempt),
        }
    return out


def recipe_from_dict(data: dict) -> MergeRecipe:
    if not isinstance(data, dict):
        raise ValidationError("recipe must be a JSON object")
    known = {
        "method",
        "lambda",
        "ties_trim_keep",
        "dare_p",
        "purification",
        "inputs",
        "base",
        "seed",
    }
    extra = set(data) - known
    if extra:
        raise ValidationError(f"unknown recipe fields: {sorted(extra)}")
    pur = None
    if data.get("purification") is not None:
        p = data["purification"]
        pur_known = {"decomposer", "rho", "gamma", "exempt"}
        if not isinstance(p, dict) or set(p) - pur_known:
            raise ValidationError("bad purification block in recipe")
        pur = PurifySettings(
            decomposer=p.get("decomposer", "co_svd"),
            rho=float(p.get("rho", 7 / 8)),
            gamma=float(p["gamma"]) if p.get("gamma") is not None else None,
            exempt=list(p.get("exempt", [])),
        )
    inputs = []
    for i in data.get("inputs", []):
        if not isinstance(i, dict) or "checkpoint" not in i:
            raise ValidationError(f"bad recipe input: {i!r}")
        inputs.append(
            RecipeInput(
                checkpoint=i["checkpoint"],
                covariance=i.get("covariance"),
                task_id=i.get("task_id"),
            )
        )
    recipe = MergeRecipe(
        method=data.get("method", ""),
        inputs=inputs,
        base=data.get("base", ""),
        lam=float(data.get("lambda", 1.0)),
        ties_trim_keep=float(data.get("ties_trim_keep", 0.2)),
        dare_p=float(data["dare_p"]) if data.get("dare_p") is not None else None,
        purification=pur,
        seed=int(data.get("seed", 0)),
    )
    recipe.validate()
    return recipe


def load_recipe(path: str | Path) -> MergeRecipe:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"recipe is not valid JSON: {exc}") from exc
    return recipe_from_dict(data)


# --- engine helpers -----------------------------------------------------------


def _check_delta_topology(deltas: list[TaskVectorSet], base: Checkpoint) -> None:
    if not deltas:
        raise ValidationError("at least one task vector set is required")
    base_names = set(base.tensors)
    for tvs in deltas:
        names = set(tvs.layers)
        if names != base_names:
            missing = sorted(base_names - names)
            extra = sorted(names - base_names)
            raise IncompatibleTopology(
                f"task {tvs.task_id!r}: tensor names differ from base"
                f" (missing {missing[:4]}, extra {extra[:4]})"
            )
        for name in names:
            if tvs.layers[name].shape != base.get(name).shape:
                raise IncompatibleTopology(
                    f"task {tvs.task_id!r}: tensor {name!r} shape"
                    f" {tvs.layers[name].shape} vs base {base.get(name).shape}"
                )


def _assemble(base: Checkpoint, merged: dict[str, np.ndarray], tag: str) -> Checkpoint:
    tensors = {}
    for name, rec in base.tensors.items():
        out = (rec.array.astype(np.float64) + merged[name]).astype(rec.array.dtype)
        tensors[name] = TensorRecord(name, out)
    meta = dict(base.metadata)
    meta["merge_method"] = tag
    return Checkpoint(tensors=tensors, linear_layers=list(base.linear_layers), metadata=meta)


@dataclass
class EmrArtifacts:
    """Unified vector plus per-task masks and rescalers (per tensor)."""

    task_order: list[str]
    tau_uni: dict[str, np.ndarray]
    masks: dict[str, dict[str, np.ndarray]]
    lambdas: dict[str, dict[str, float]]


@dataclass
class MergedModel:
    """A merged checkpoint plus whatever the engine needs to reconstruct
    per-task specialists (EMR only)."""

    weights: Checkpoint
    recipe: MergeRecipe | None = None
    base: Checkpoint | None = None
    emr: EmrArtifacts | None = None


# --- engines -------------------------------------------------------------------


def merge_average(deltas: list[TaskVectorSet], base: Checkpoint) -> MergedModel:
    _check_delta_topology(deltas, base)
    merged = {}
    for name in base.tensors:
        stack = np.stack([tvs.layers[name] for tvs in deltas])
        merged[name] = stack.mean(axis=0)
    return MergedModel(weights=_assemble(base, merged, "average"), base=base)


def merge_task_arithmetic(
    deltas: list[TaskVectorSet], base: Checkpoint, lam: float
) -> MergedModel:
    _check_delta_topology(deltas, base)
    merged = {}
    for name in base.tensors:
        stack = np.stack([tvs.layers[name] for tvs in deltas])
        merged[name] = lam * stack.sum(axis=0)
    return MergedModel(weights=_assemble(base, merged, "task_arithmetic"), base=base)


def _trim_to_top(flat: np.ndarray, keep: float) -> np.ndarray:
    """Zero all but the ceil(keep * N) largest-magnitude entries.

    Ties at the threshold keep the lower flat index, via a stable sort on
    descending magnitude.
    """
    n = flat.size
    m = min(n, math.ceil(keep * n))
    out = np.zeros_like(flat)
    if m == 0:
        return out
    order = np.argsort(-np.abs(flat), kind="stable")
    kept = order[:m]
    out[kept] = flat[kept]
    return out


def merge_ties(
    deltas: list[TaskVectorSet], base: Checkpoint, lam: float, keep: float
) -> MergedModel:
    if not 0.0 < keep <= 1.0:
        raise ValidationError(f"trim keep fraction must lie in (0, 1], got {keep}")
    _check_delta_topology(deltas, base)
    merged = {}
    for name in base.tensors:
        shape = base.get(name).shape
        trimmed = np.stack(
            [_trim_to_top(tvs.layers[name].reshape(-1), keep) for tvs in deltas]
        )
        elected = np.sign(trimmed.sum(axis=0))
        agree = (np.sign(trimmed) == elected[None, :]) & (elected[None, :] != 0.0)
        counts = agree.sum(axis=0)
        sums = (trimmed * agree).sum(axis=0)
        out = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        merged[name] = (lam * out).reshape(shape)
    return MergedModel(weights=_assemble(base, merged, "ties"), base=base)


def merge_emr(deltas: list[TaskVectorSet], base: Checkpoint) -> MergedModel:
    _check_delta_topology(deltas, base)
    task_order = [tvs.task_id for tvs in deltas]
    if len(set(task_order)) != len(task_order):
        raise ValidationError(f"duplicate task ids in EMR inputs: {task_order}")
    tau_uni: dict[str, np.ndarray] = {}
    masks: dict[str, dict[str, np.ndarray]] = {t: {} for t in task_order}
    lambdas: dict[str, dict[str, float]] = {t: {} for t in task_order}
    for name in base.tensors:
        stack = np.stack([tvs.layers[name] for tvs in deltas])
        elected = np.sign(stack.sum(axis=0))
        agree = (np.sign(stack) == elected[None]) & (elected[None] != 0.0)
        mags = np.where(agree, np.abs(stack), 0.0)
        uni = elected * mags.max(axis=0)
        tau_uni[name] = uni
        for t, tvs in enumerate(deltas):
            mask = (stack[t] * uni > 0.0).astype(np.float64)
            denom = float(np.sum(np.abs(mask * uni)))
            numer = float(np.sum(np.abs(stack[t])))
            masks[tvs.task_id][name] = mask
            lambdas[tvs.task_id][name] = numer / denom if denom > 0.0 else 1.0
    artifacts = EmrArtifacts(
        task_order=task_order, tau_uni=tau_uni, masks=masks, lambdas=lambdas
    )
    return MergedModel(
        weights=_assemble(base, tau_uni, "emr"), base=base, emr=artifacts
    )


def reconstruct(merged: MergedModel, task_id: str) -> Checkpoint:
    """Rebuild one task's specialist weights from EMR artifacts."""
    if merged.emr is None:
        raise ValidationError("merged model carries no per-task artifacts")
    if merged.base is None:
        raise ValidationError("merged model carries no base reference")
    if task_id not in merged.emr.masks:
        raise ValidationError(
            f"unknown task {task_id!r}; have {merged.emr.task_order}"
        )
    out = {}
    for name, rec in merged.base.tensors.items():
        uni = merged.emr.tau_uni[name]
        mask = merged.emr.masks[task_id][name]
        lam = merged.emr.lambdas[task_id][name]
        arr = rec.array.astype(np.float64) + lam * mask * uni
        out[name] = TensorRecord(name, arr.astype(rec.array.dtype))
    meta = dict(merged.base.metadata)
    meta["merge_method"] = "emr-reconstructed"
    meta["task_id"] = task_id
    return Checkpoint(
        tensors=out,
        linear_layers=list(merged.base.linear_layers),
        metadata=meta,
    )


# --- EMR artifact serialization --------------------------------------------------


def emr_to_checkpoint(artifacts: EmrArtifacts) -> Checkpoint:
    """Pack EMR artifacts into a plain tensor container.

    Names: ``<layer>.uni`` (F64), ``<layer>.mask.<task>`` (F32 holding 0/1),
    ``<layer>.lambda.<task>`` (F64 scalar, the per-tensor rescaler).
    """
    arrays: dict[str, np.ndarray] = {}
    for name, uni in artifacts.tau_uni.items():
        arrays[name + ".uni"] = np.asarray(uni, dtype=np.float64)
        for task in artifacts.task_order:
            arrays[name + ".mask." + task] = artifacts.masks[task][name].astype(np.float32)
            arrays[name + ".lambda." + task] = np.array(
                artifacts.lambdas[task][name], dtype=np.float64
            )
    meta = {
        "kind": "emr-artifacts",
        "tasks": json.dumps(artifacts.task_order, separators=(",", ":")),
    }
    return Checkpoint(
        tensors={n: TensorRecord(n, a) for n, a in arrays.items()},
        linear_layers=[],
        metadata=meta,
    )


def emr_from_checkpoint(ck: Checkpoint) -> EmrArtifacts:
    try:
        task_order = json.loads(ck.metadata["tasks"])
    except (KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"container does not hold EMR artifacts: {exc}") from exc
    tau_uni: dict[str, np.ndarray] = {}
    masks: dict[str, dict[str, np.ndarray]] = {t: {} for t in task_order}
    lambdas: dict[str, dict[str, float]] = {t: {} for t in task_order}
    for name in ck.tensors:
        if name.endswith(".uni"):
            layer = name[: -len(".uni")]
            tau_uni[layer] = ck.get(name).astype(np.float64)
    for layer in tau_uni:
        for task in task_order:
            masks[task][layer] = ck.get(f"{layer}.mask.{task}").astype(np.float64)
            lambdas[task][layer] = float(ck.get(f"{layer}.lambda.{task}").reshape(-1)[0])
    return EmrArtifacts(
        task_order=task_order, tau_uni=tau_uni, masks=masks, lambdas=lambdas
    )


# --- recipe pipeline --------------------------------------------------------------


def _derive_seed(seed: int, task_id: str) -> int:
    digest = hashlib.blake2b(f"dare-task\x1f{seed}\x1f{task_id}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little") >> 1


def run_recipe(recipe: MergeRecipe, root: Path | None = None, threads: int = 1) -> MergedModel:
    """Execute a recipe end to end: load, vectorize, purify/drop, merge.

    Relative paths inside the recipe resolve against ``root`` (defaults to
    the current directory; the command line passes the recipe file's parent
    so recipes are self-contained).
    """
    recipe.validate()
    root = Path(root) if root is not None else Path(".")

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else root / path

    base = read_checkpoint(resolve(recipe.base))
    checkpoints: list[Checkpoint] = []
    task_ids: list[str] = []
    for index, inp in enumerate(recipe.inputs):
        ck = read_checkpoint(resolve(inp.checkpoint))
        task = inp.task_id or ck.metadata.get("task_id") or f"task{index}"
        ck.metadata["task_id"] = task
        ck.metadata.setdefault("model_id", task)
        checkpoints.append(ck)
        task_ids.append(task)
    if len(set(task_ids)) != len(task_ids):
        raise ValidationError(f"duplicate task ids in recipe inputs: {task_ids}")

    if recipe.purification is not None:
        cov_sets: list[CovarianceSet] = []
        for inp, task in zip(recipe.inputs, task_ids):
            if not inp.covariance:
                raise MissingCovariance(
                    f"input {task!r}: purification requires a covariance path"
                )
            cov_sets.append(read_covariances(resolve(inp.covariance)))
        settings = recipe.purification
        base_kind = DecomposerKind(
            variant=settings.decomposer
            if settings.decomposer != "co_svd_crosstask"
            else "co_svd",
        )
        profiles = rank_alloc.build_profiles(checkpoints, cov_sets, base_kind)
        alloc = rank_alloc.allocate(
            profiles,
            rho=settings.rho,
            gamma=settings.effective_gamma(),
            exempt=frozenset(settings.exempt),
        )
        deltas = []
        for i, (ck, covs) in enumerate(zip(checkpoints, cov_sets)):
            if settings.decomposer == "co_svd_crosstask":
                j = (i + 1) % len(checkpoints)
                kind = DecomposerKind(
                    variant="co_svd_crosstask", crosstask_id=task_ids[j]
                )
                covs = cov_sets[j]
            else:
                kind = DecomposerKind(variant=settings.decomposer)
            deltas.append(
                purify.pave_purify(ck, base, covs, alloc, kind, threads=threads)
            )
    else:
        deltas = [purify.plain_task_vector(ck, base) for ck in checkpoints]
        if recipe.dare_p is not None:
            deltas = [
                purify.dare_task_vector(d, recipe.dare_p, _derive_seed(recipe.seed, d.task_id))
                for d in deltas
            ]

    if recipe.method == "average":
        merged = merge_average(deltas, base)
    elif recipe.method == "task_arithmetic":
        merged = merge_task_arithmetic(deltas, base, recipe.lam)
    elif recipe.method == "ties":
        merged = merge_ties(deltas, base, recipe.lam, recipe.ties_trim_keep)
    else:
        merged = merge_emr(deltas, base)
    merged.recipe = recipe
    return merged
