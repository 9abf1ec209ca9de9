"""Synthetic evaluation bed: planted low-rank edits on toy models.

The workbench builds 2-layer feed-forward toys (y = W2 relu(W1 x)) where
every quantity the purification pipeline cares about is known exactly:

* a shared random base model with Gaussian entries scaled by the usual
  1/sqrt(fan_in),
* per task, a planted low-rank delta per layer (the "signal" that
  fine-tuning added), scaled to a target spectral norm and reading from
  the activations the task actually produces, the way accumulated
  gradient outer products would,
* isotropic Gaussian noise on every linear layer (the redundant part a
  fine-tune drags along, which purification should discard),
* a task-specific anisotropic input distribution supported on a
  low-dimensional subspace, which is what makes activation covariance
  informative.

Scores are argmax agreement with the noise-free planted reference model on
fresh task-distribution inputs, so 1.0 means indistinguishable from the
ideal specialist.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import (
    Checkpoint,
    CovarianceSet,
    new_checkpoint,
    read_checkpoint,
    write_container,
)
from .covariance import ActivationStream, build_covariance_set
from .errors import DimensionMismatch, IoFailure, ValidationError
from .merge import merge_task_arithmetic
from .purify import DecomposerKind, pave_purify, plain_task_vector
from .rank_alloc import allocate, build_profiles

LAYER1 = "layer1.weight"
LAYER2 = "layer2.weight"

DEFAULT_INPUT_DIM = 32
DEFAULT_HIDDEN_DIM = 48
DEFAULT_OUTPUT_DIM = 8
DEFAULT_PLANTED_RANK = 2
DEFAULT_NOISE_SCALE = 0.02
DEFAULT_SUBSPACE_DIM = 8
DEFAULT_ANISOTROPY = 3.0
DEFAULT_DELTA_SCALE = 1.0
DEFAULT_TASKS = 4

# noise_scale band used by the end-to-end merging experiments; drawn per
# suite so the redundancy level varies across repetitions
DEFAULT_NOISE_BAND = (0.04, 0.08)


def _generator(*parts) -> np.random.Generator:
    tag = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(tag.encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


@dataclass(frozen=True)
class ActivationDistribution:
    """Inputs live on a ``subspace_dim``-dimensional subspace; within it the
    per-direction standard deviations decay geometrically from ``anisotropy``
    down to 1."""

    subspace_dim: int
    anisotropy: float = 1.0

    def validate(self, input_dim: int) -> None:
        if not 1 <= self.subspace_dim <= input_dim:
            raise DimensionMismatch(
                f"subspace_dim {self.subspace_dim} outside [1, {input_dim}]"
            )
        if self.anisotropy < 1.0:
            raise ValidationError(f"anisotropy must be >= 1, got {self.anisotropy}")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: str
    seed: int
    input_dim: int = DEFAULT_INPUT_DIM
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    output_dim: int = DEFAULT_OUTPUT_DIM
    planted_rank: int = DEFAULT_PLANTED_RANK
    noise_scale: float = DEFAULT_NOISE_SCALE
    activation: ActivationDistribution = ActivationDistribution(
        DEFAULT_SUBSPACE_DIM, DEFAULT_ANISOTROPY
    )
    delta_scale: float = DEFAULT_DELTA_SCALE

    def validate(self) -> None:
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise DimensionMismatch("all dimensions must be >= 1")
        if not 0 <= self.planted_rank <= min(self.hidden_dim, self.input_dim):
            raise DimensionMismatch(
                f"planted_rank {self.planted_rank} exceeds layer rank bound"
            )
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0")
        self.activation.validate(self.input_dim)


@dataclass
class SyntheticSuite:
    """A base model, K fine-tuned toys, and their noise-free references."""

    base_seed: int
    specs: list[SyntheticTaskSpec]
    base: Checkpoint
    finetuned: list[Checkpoint]
    references: list[Checkpoint]
    ground_truth: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def spec_for(self, task_id: str) -> SyntheticTaskSpec:
        for spec in self.specs:
            if spec.task_id == task_id:
                return spec
        raise ValidationError(f"unknown task {task_id!r}")

    def reference_for(self, task_id: str) -> Checkpoint:
        for spec, ref in zip(self.specs, self.references):
            if spec.task_id == task_id:
                return ref
        raise ValidationError(f"unknown task {task_id!r}")


def _activation_basis(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = _generator("acts-basis", spec.seed)
    G = rng.standard_normal((spec.input_dim, spec.activation.subspace_dim))
    Q, _ = np.linalg.qr(G)
    return Q


def _activation_scales(spec: SyntheticTaskSpec) -> np.ndarray:
    d = spec.activation.subspace_dim
    return spec.activation.anisotropy ** np.linspace(1.0, 0.0, d)


def sample_inputs(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """n column vectors from the task's input distribution."""
    Q = _activation_basis(spec)
    scales = _activation_scales(spec)
    z = rng.standard_normal((spec.activation.subspace_dim, n))
    return Q @ (scales[:, None] * z)


def _planted(rng: np.random.Generator, rows: int, cols: int, rank: int,
             scale: float, col_basis: np.ndarray | None = None) -> np.ndarray:
    if rank == 0:
        return np.zeros((rows, cols))
    A = rng.standard_normal((rows, rank))
    if col_basis is not None:
        B = col_basis @ rng.standard_normal((col_basis.shape[1], rank))
    else:
        B = rng.standard_normal((cols, rank))
    P = A @ B.T
    top = np.linalg.norm(P, 2)
    if top > 0:
        P = P * (scale / top)
    return P


def _hidden_basis(layer1: np.ndarray, spec: SyntheticTaskSpec,
                  base_seed: int, n_probe: int = 512) -> np.ndarray | None:
    """Dominant directions of the rectified hidden activations under the
    task's input distribution.

    Gradient updates to the second layer are sums of outer products with
    observed hidden activations, so a plausible planted layer-2 edit must
    read from this span rather than from arbitrary hidden directions.
    Returns the top ``subspace_dim`` left singular vectors, or None when
    the probe activations vanish entirely."""
    rng = _generator("hidden-basis", base_seed, spec.seed)
    X = sample_inputs(spec, n_probe, rng)
    H = np.maximum(layer1 @ X, 0.0)
    if not np.any(H):
        return None
    U, _, _ = np.linalg.svd(H, full_matrices=False)
    m = min(spec.activation.subspace_dim, U.shape[1])
    return U[:, :m]


def synth_suite(
    specs: list[SyntheticTaskSpec],
    base_seed: int,
) -> SyntheticSuite:
    """Deterministically build the base, fine-tuned and reference models.

    Every fine-tuned linear layer is base + planted + noise where planted
    has exactly ``planted_rank`` and spectral norm ``delta_scale`` and the
    noise is isotropic Gaussian of scale ``noise_scale``. Planted
    components read from the activations the task actually produces (the
    input subspace for layer 1, the dominant rectified hidden directions
    for layer 2), the way accumulated gradient updates would.
    """
    if not specs:
        raise ValidationError("at least one task spec is required")
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate task ids: {ids}")
    first = specs[0]
    for spec in specs:
        spec.validate()
        if (spec.input_dim, spec.hidden_dim, spec.output_dim) != (
            first.input_dim,
            first.hidden_dim,
            first.output_dim,
        ):
            raise DimensionMismatch("all specs in a suite must share dimensions")

    rng_base = _generator("base", base_seed)
    W1 = rng_base.standard_normal((first.hidden_dim, first.input_dim)) / np.sqrt(
        first.input_dim
    )
    W2 = rng_base.standard_normal((first.output_dim, first.hidden_dim)) / np.sqrt(
        first.hidden_dim
    )
    base = new_checkpoint(
        {LAYER1: W1, LAYER2: W2},
        linear_layers=[LAYER1, LAYER2],
        metadata={"model_id": "base"},
    )

    finetuned: list[Checkpoint] = []
    references: list[Checkpoint] = []
    ground_truth: dict[str, dict[str, np.ndarray]] = {}
    for spec in specs:
        rng_p = _generator("plant", base_seed, spec.seed)
        Q = _activation_basis(spec)
        P1 = _planted(rng_p, spec.hidden_dim, spec.input_dim, spec.planted_rank,
                      spec.delta_scale, col_basis=Q)
        U_h = _hidden_basis(W1 + P1, spec, base_seed)
        P2 = _planted(rng_p, spec.output_dim, spec.hidden_dim, spec.planted_rank,
                      spec.delta_scale, col_basis=U_h)
        rng_n = _generator("noise", base_seed, spec.seed)
        E1 = spec.noise_scale * rng_n.standard_normal(P1.shape)
        E2 = spec.noise_scale * rng_n.standard_normal(P2.shape)
        meta = {"model_id": spec.task_id, "task_id": spec.task_id}
        finetuned.append(
            new_checkpoint(
                {LAYER1: W1 + P1 + E1, LAYER2: W2 + P2 + E2},
                linear_layers=[LAYER1, LAYER2],
                metadata=dict(meta),
            )
        )
        references.append(
            new_checkpoint(
                {LAYER1: W1 + P1, LAYER2: W2 + P2},
                linear_layers=[LAYER1, LAYER2],
                metadata=dict(meta),
            )
        )
        ground_truth[spec.task_id] = {LAYER1: P1, LAYER2: P2}
    return SyntheticSuite(
        base_seed=base_seed,
        specs=list(specs),
        base=base,
        finetuned=finetuned,
        references=references,
        ground_truth=ground_truth,
    )


def default_specs(
    n_tasks: int = DEFAULT_TASKS,
    seed: int = 0,
    noise_scale: float = DEFAULT_NOISE_SCALE,
    subspace_dim: int = DEFAULT_SUBSPACE_DIM,
    anisotropy: float = DEFAULT_ANISOTROPY,
    delta_scale: float = DEFAULT_DELTA_SCALE,
    input_dim: int = DEFAULT_INPUT_DIM,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    output_dim: int = DEFAULT_OUTPUT_DIM,
    planted_rank: int = DEFAULT_PLANTED_RANK,
) -> list[SyntheticTaskSpec]:
    """The default K-task suite layout, parameterized by one seed."""
    return [
        SyntheticTaskSpec(
            task_id=f"task{i}",
            seed=1000 * seed + i,
            input_dim=input_dim,
            hidden_dim=hidden_dim,
            output_dim=output_dim,
            planted_rank=planted_rank,
            noise_scale=noise_scale,
            activation=ActivationDistribution(subspace_dim, anisotropy),
            delta_scale=delta_scale,
        )
        for i in range(n_tasks)
    ]


def toy_forward(ck: Checkpoint, X: np.ndarray) -> np.ndarray:
    H = np.maximum(ck.get(LAYER1) @ X, 0.0)
    return ck.get(LAYER2) @ H


def run_activations(
    model: Checkpoint, spec: SyntheticTaskSpec, n_samples: int, seed: int
) -> dict[str, ActivationStream]:
    """Layer input activations for n task-distribution samples.

    Layer 1 sees the raw inputs; layer 2 sees the rectified hidden
    activations of the model actually passed in. n_samples = 0 yields
    batchless streams, which downstream accumulation rejects.
    """
    rng = _generator("acts", spec.seed, seed)
    if n_samples <= 0:
        return {
            LAYER1: ActivationStream(LAYER1, [], spec.task_id),
            LAYER2: ActivationStream(LAYER2, [], spec.task_id),
        }
    X = sample_inputs(spec, n_samples, rng)
    H = np.maximum(model.get(LAYER1) @ X, 0.0)
    return {
        LAYER1: ActivationStream(LAYER1, [X], spec.task_id),
        LAYER2: ActivationStream(LAYER2, [H], spec.task_id),
    }


def task_covariances(
    model: Checkpoint, spec: SyntheticTaskSpec, n_samples: int, seed: int
) -> CovarianceSet:
    streams = run_activations(model, spec, n_samples, seed)
    return build_covariance_set(
        [streams[LAYER1], streams[LAYER2]], task_id=spec.task_id
    )


def eval_model(
    weights: Checkpoint,
    spec: SyntheticTaskSpec,
    n_eval: int,
    seed: int,
    reference: Checkpoint,
) -> float:
    """Fraction of fresh task inputs where argmax output matches the
    reference specialist. The reference scores 1.0 against itself."""
    if n_eval < 1:
        raise ValidationError(f"n_eval must be >= 1, got {n_eval}")
    rng = _generator("eval", spec.seed, seed)
    X = sample_inputs(spec, n_eval, rng)
    got = np.argmax(toy_forward(weights, X), axis=0)
    want = np.argmax(toy_forward(reference, X), axis=0)
    return float(np.mean(got == want))


def figure3_experiment(
    suite: SyntheticSuite,
    ranks: list[int],
    decomposers: tuple[str, ...] = (
        "plain_svd",
        "co_svd",
        "co_svd_crosstask",
    ),
    n_samples: int = 1024,
    n_eval: int = 512,
    seed: int = 0,
) -> list[dict]:
    """Prune each fine-tuned toy at the given ranks and score the result.

    No merging happens here: the experiment isolates how much of a single
    specialist survives truncation under each decomposer. A rank r applies
    per layer as min(r, full rank of that layer). Cross-task rows use the
    next task's covariance; random rows use a seeded surrogate.
    """
    K = len(suite.specs)
    covs = [
        task_covariances(suite.finetuned[i], suite.specs[i], n_samples, seed)
        for i in range(K)
    ]
    rows: list[dict] = []
    for i, spec in enumerate(suite.specs):
        ft = suite.finetuned[i]
        full = {
            layer: min(ft.get(layer).shape) for layer in ft.linear_layers
        }
        for variant in decomposers:
            if variant == "co_svd_crosstask":
                j = (i + 1) % K
                kind = DecomposerKind(variant, crosstask_id=suite.specs[j].task_id)
                cov_set = covs[j]
            else:
                kind = DecomposerKind(variant, random_seed=seed)
                cov_set = covs[i]
            for r in ranks:
                rank_map = {layer: min(r, full[layer]) for layer in ft.linear_layers}
                tvs = pave_purify(ft, suite.base, cov_set, rank_map, kind)
                pruned = merge_task_arithmetic([tvs], suite.base, 1.0).weights
                score = eval_model(
                    pruned, spec, n_eval, seed, suite.references[i]
                )
                rows.append(
                    {
                        "decomposer": variant,
                        "rank": r,
                        "task": spec.task_id,
                        "score": score,
                        "seed": seed,
                    }
                )
    return rows


def merging_gain_experiment(
    suite: SyntheticSuite,
    rho: float = 0.75,
    lam: float = 0.3,
    gamma: float | None = None,
    decomposer: str = "co_svd",
    n_samples: int = 1024,
    n_eval: int = 2048,
    seed: int = 0,
) -> tuple[float, float]:
    """Mean eval score of plain task arithmetic vs the purified variant.

    Builds per-task covariances from the fine-tuned toys, merges all task
    vectors once without purification and once with covariance-guided
    truncation under a greedy rank budget, and scores both merges against
    each task's reference on the same eval draws. Returns
    (plain_score, purified_score)."""
    K = len(suite.specs)
    covs = [
        task_covariances(suite.finetuned[i], suite.specs[i], n_samples, seed)
        for i in range(K)
    ]
    plain = [plain_task_vector(ck, suite.base) for ck in suite.finetuned]
    merged_plain = merge_task_arithmetic(plain, suite.base, lam).weights
    profiles = build_profiles(suite.finetuned, covs)
    if gamma is None:
        gamma = rho - (1.0 - rho) / 2.0
    alloc = allocate(profiles, rho=rho, gamma=gamma)
    kind = DecomposerKind(decomposer, random_seed=seed)
    purified = [
        pave_purify(ck, suite.base, cov, alloc, kind)
        for ck, cov in zip(suite.finetuned, covs)
    ]
    merged_pure = merge_task_arithmetic(purified, suite.base, lam).weights
    score_plain = float(np.mean([
        eval_model(merged_plain, suite.specs[i], n_eval, seed, suite.references[i])
        for i in range(K)
    ]))
    score_pure = float(np.mean([
        eval_model(merged_pure, suite.specs[i], n_eval, seed, suite.references[i])
        for i in range(K)
    ]))
    return score_plain, score_pure


# --- suite directory layout -----------------------------------------------------


def _spec_to_dict(spec: SyntheticTaskSpec) -> dict:
    return {
        "task_id": spec.task_id,
        "seed": spec.seed,
        "input_dim": spec.input_dim,
        "hidden_dim": spec.hidden_dim,
        "output_dim": spec.output_dim,
        "planted_rank": spec.planted_rank,
        "noise_scale": spec.noise_scale,
        "delta_scale": spec.delta_scale,
        "activation": {
            "subspace_dim": spec.activation.subspace_dim,
            "anisotropy": spec.activation.anisotropy,
        },
    }


def _spec_from_dict(data: dict) -> SyntheticTaskSpec:
    act = data.get("activation", {})
    return SyntheticTaskSpec(
        task_id=data["task_id"],
        seed=int(data["seed"]),
        input_dim=int(data.get("input_dim", DEFAULT_INPUT_DIM)),
        hidden_dim=int(data.get("hidden_dim", DEFAULT_HIDDEN_DIM)),
        output_dim=int(data.get("output_dim", DEFAULT_OUTPUT_DIM)),
        planted_rank=int(data.get("planted_rank", DEFAULT_PLANTED_RANK)),
        noise_scale=float(data.get("noise_scale", DEFAULT_NOISE_SCALE)),
        delta_scale=float(data.get("delta_scale", DEFAULT_DELTA_SCALE)),
        activation=ActivationDistribution(
            subspace_dim=int(act.get("subspace_dim", DEFAULT_SUBSPACE_DIM)),
            anisotropy=float(act.get("anisotropy", DEFAULT_ANISOTROPY)),
        ),
    )


def save_suite(suite: SyntheticSuite, directory: str | Path) -> None:
    """Write base/task/reference checkpoints plus suite.json to a directory."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {directory}: {exc}") from exc
    write_container(suite.base, directory / "base.safetensors")
    for spec, ft, ref in zip(suite.specs, suite.finetuned, suite.references):
        write_container(ft, directory / f"task_{spec.task_id}.safetensors")
        write_container(ref, directory / f"ref_{spec.task_id}.safetensors")
    manifest = {
        "base_seed": suite.base_seed,
        "specs": [_spec_to_dict(s) for s in suite.specs],
    }
    try:
        (directory / "suite.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
    except OSError as exc:
        raise IoFailure(f"cannot write suite manifest: {exc}") from exc


def load_suite(directory: str | Path) -> SyntheticSuite:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "suite.json").read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read suite manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"suite manifest is not valid JSON: {exc}") from exc
    specs = [_spec_from_dict(d) for d in manifest["specs"]]
    base = read_checkpoint(directory / "base.safetensors")
    finetuned = []
    references = []
    ground_truth: dict[str, dict[str, np.ndarray]] = {}
    for spec in specs:
        ft = read_checkpoint(directory / f"task_{spec.task_id}.safetensors")
        ref = read_checkpoint(directory / f"ref_{spec.task_id}.safetensors")
        finetuned.append(ft)
        references.append(ref)
        ground_truth[spec.task_id] = {
            layer: ref.get(layer).astype(np.float64) - base.get(layer).astype(np.float64)
            for layer in base.linear_layers
        }
    return SyntheticSuite(
        base_seed=int(manifest.get("base_seed", 0)),
        specs=specs,
        base=base,
        finetuned=finetuned,
        references=references,
        ground_truth=ground_truth,
    )
