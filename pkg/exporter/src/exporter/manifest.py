"""Export manifests: what to pull out of a model and under which names."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ExportIoError, InvalidManifest

DTYPE_POLICIES = ("preserve", "float32", "float64")


@dataclass
class ExportManifest:
    """Declares the source model, the module-to-layer name mapping, the
    token sample source for covariance estimation, and the dtype policy.

    The mapping goes from module paths inside the source model (as
    ``named_modules`` spells them) to layer names in the output container.
    It must be injective: two modules may not share an output name.
    """

    model_id: str
    mapping: dict[str, str] = field(default_factory=dict)
    sample_path: str = ""
    sample_count: int = 0
    dtype_policy: str = "preserve"

    def validate(self) -> None:
        if not self.model_id:
            raise InvalidManifest("model_id must be non-empty")
        if not self.mapping:
            raise InvalidManifest("mapping must contain at least one layer")
        for src, dst in self.mapping.items():
            if not isinstance(src, str) or not src:
                raise InvalidManifest(f"bad source module path {src!r}")
            if not isinstance(dst, str) or not dst:
                raise InvalidManifest(f"bad layer name {dst!r} for module {src!r}")
        names = list(self.mapping.values())
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise InvalidManifest(f"mapping is not injective; repeated names: {dupes}")
        if self.dtype_policy not in DTYPE_POLICIES:
            raise InvalidManifest(
                f"dtype_policy {self.dtype_policy!r} not one of {DTYPE_POLICIES}"
            )
        if self.sample_count < 0:
            raise InvalidManifest(f"sample count must be >= 0, got {self.sample_count}")


def load_manifest(path: str | Path) -> ExportManifest:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ExportIoError(f"cannot read manifest {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise InvalidManifest(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidManifest("manifest must be a JSON object")
    known = {"model_id", "mapping", "sample", "dtype_policy"}
    unknown = set(data) - known
    if unknown:
        raise InvalidManifest(f"unknown manifest fields: {sorted(unknown)}")
    sample = data.get("sample", {})
    if not isinstance(sample, dict) or set(sample) - {"path", "count"}:
        raise InvalidManifest("sample must be an object with keys path, count")
    mapping = data.get("mapping", {})
    if not isinstance(mapping, dict):
        raise InvalidManifest("mapping must be an object")
    manifest = ExportManifest(
        model_id=str(data.get("model_id", "")),
        mapping={str(k): str(v) for k, v in mapping.items()},
        sample_path=str(sample.get("path", "")),
        sample_count=int(sample.get("count", 0)),
        dtype_policy=str(data.get("dtype_policy", "preserve")),
    )
    manifest.validate()
    return manifest
