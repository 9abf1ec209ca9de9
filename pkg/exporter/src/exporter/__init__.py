"""Export weights and input covariances from transformer checkpoints into
the shared tensor container format."""

from .errors import (
    DtypeUnsupported,
    ExporterError,
    ExportIoError,
    HookFailure,
    InvalidManifest,
    SampleSourceEmpty,
    UnmappedLayer,
)
from .export import (
    capture_activations,
    export_covariance,
    export_weights,
    load_samples,
    random_token_samples,
    write_sample_file,
)
from .manifest import DTYPE_POLICIES, ExportManifest, load_manifest
from .models import TINY_PREFIX, discover_linear_layers, resolve_model, tiny_encoder

__all__ = [
    "DTYPE_POLICIES",
    "DtypeUnsupported",
    "ExportManifest",
    "ExporterError",
    "ExportIoError",
    "HookFailure",
    "InvalidManifest",
    "SampleSourceEmpty",
    "TINY_PREFIX",
    "UnmappedLayer",
    "capture_activations",
    "discover_linear_layers",
    "export_covariance",
    "export_weights",
    "load_manifest",
    "load_samples",
    "random_token_samples",
    "resolve_model",
    "tiny_encoder",
    "write_sample_file",
]
