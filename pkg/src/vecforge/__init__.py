"""vecforge: covariance-guided task vector purification and model merging.

The toolkit treats a fine-tuned model as base + task vector, cleans each
task vector by truncating its linear layers in the geometry induced by the
layer's input-activation covariance, allocates truncation ranks across
tasks under a global budget, and merges the results with standard engines
(averaging, scaled addition, sign-elected trimming, unified-vector
reconstruction).
"""

from .container import (
    Checkpoint,
    CovarianceSet,
    CovEntry,
    TensorRecord,
    check_compat,
    new_checkpoint,
    read_checkpoint,
    read_container,
    read_covariances,
    write_container,
)
from .covariance import (
    ActivationStream,
    build_covariance,
    build_covariance_set,
    regularize_invertible,
)
from .errors import VecforgeError
from .linalg import SvdFactors, accumulate_covariance, cholesky_solve, svd, truncate
from .merge import (
    MergedModel,
    MergeRecipe,
    PurifySettings,
    RecipeInput,
    merge_average,
    merge_emr,
    merge_task_arithmetic,
    merge_ties,
    reconstruct,
    run_recipe,
)
from .purify import (
    DecomposerKind,
    PurifiedLayer,
    TaskVectorSet,
    apply_decomposer,
    dare_task_vector,
    pave_purify,
    plain_task_vector,
    task_vectors_from_container,
    task_vectors_to_container,
)
from .rank_alloc import (
    RankAllocation,
    SpectralProfile,
    allocate,
    build_profiles,
    per_model_ratios,
    progressive_full_rank,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationStream",
    "Checkpoint",
    "CovEntry",
    "CovarianceSet",
    "DecomposerKind",
    "MergeRecipe",
    "MergedModel",
    "PurifiedLayer",
    "PurifySettings",
    "RankAllocation",
    "RecipeInput",
    "SpectralProfile",
    "SvdFactors",
    "TaskVectorSet",
    "TensorRecord",
    "VecforgeError",
    "accumulate_covariance",
    "allocate",
    "apply_decomposer",
    "build_covariance",
    "build_covariance_set",
    "build_profiles",
    "check_compat",
    "cholesky_solve",
    "dare_task_vector",
    "merge_average",
    "merge_emr",
    "merge_task_arithmetic",
    "merge_ties",
    "new_checkpoint",
    "pave_purify",
    "per_model_ratios",
    "plain_task_vector",
    "progressive_full_rank",
    "read_checkpoint",
    "read_container",
    "read_covariances",
    "reconstruct",
    "regularize_invertible",
    "run_recipe",
    "svd",
    "task_vectors_from_container",
    "task_vectors_to_container",
    "truncate",
    "write_container",
]
