"""Weight and covariance export into the shared container format.

Weights are written exactly as the framework holds them (subject to the
manifest's dtype policy). Covariances are accumulated in float64 as
C = X X^T over token-position columns captured by forward hooks at each
mapped module's input, then mirrored off the lower triangle so the stored
matrix is exactly symmetric.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import safetensors.numpy
import torch

from .errors import (
    DtypeUnsupported,
    ExportIoError,
    HookFailure,
    SampleSourceEmpty,
    UnmappedLayer,
)
from .manifest import ExportManifest

_BATCH_SEQUENCES = 16


def _mapped_weight(model: torch.nn.Module, path: str) -> torch.Tensor:
    try:
        module = model.get_submodule(path)
    except AttributeError as exc:
        raise UnmappedLayer(f"model has no module at {path!r}") from exc
    weight = getattr(module, "weight", None)
    if weight is None or not isinstance(weight, torch.Tensor):
        raise UnmappedLayer(f"module {path!r} has no weight tensor")
    if weight.ndim != 2:
        raise UnmappedLayer(f"module {path!r} weight is {weight.ndim}-D, need 2-D")
    return weight.detach()


def _apply_policy(weight: torch.Tensor, policy: str, path: str) -> np.ndarray:
    if not weight.is_floating_point():
        raise DtypeUnsupported(f"{path!r} has non-floating dtype {weight.dtype}")
    if policy == "float32":
        return weight.to(torch.float32).cpu().numpy()
    if policy == "float64":
        return weight.to(torch.float64).cpu().numpy()
    if weight.dtype == torch.float32 or weight.dtype == torch.float64:
        return weight.cpu().numpy()
    raise DtypeUnsupported(
        f"{path!r} has dtype {weight.dtype}; policy 'preserve' exports only"
        " float32/float64 (set dtype_policy to convert)"
    )


_DTYPE_TAGS = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}


def _save(arrays: dict[str, np.ndarray], metadata: dict[str, str], out_path) -> None:
    """Serialize tensors in the standard container layout with a fixed key
    order (metadata and tensors sorted by name), so identical inputs always
    produce identical bytes. The stock writer iterates metadata in hash
    order, which breaks rerun determinism."""
    header: dict[str, object] = {"__metadata__": dict(sorted(metadata.items()))}
    offset = 0
    payload: list[bytes] = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise DtypeUnsupported(f"tensor {name!r} has dtype {arr.dtype}")
        raw = arr.tobytes()
        header[name] = {
            "dtype": tag,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payload.append(raw)
        offset += len(raw)
    head = json.dumps(header, separators=(",", ":")).encode()
    head += b" " * (-len(head) % 8)
    try:
        with open(out_path, "wb") as fh:
            fh.write(len(head).to_bytes(8, "little"))
            fh.write(head)
            for raw in payload:
                fh.write(raw)
    except OSError as exc:
        raise ExportIoError(f"cannot write {out_path}: {exc}") from exc


def export_weights(
    model: torch.nn.Module, manifest: ExportManifest, out_path: str | Path
) -> None:
    """Write every mapped weight to a checkpoint container, all mapped
    names listed as linear layers."""
    manifest.validate()
    arrays: dict[str, np.ndarray] = {}
    for src, dst in manifest.mapping.items():
        weight = _mapped_weight(model, src)
        arrays[dst] = np.ascontiguousarray(
            _apply_policy(weight, manifest.dtype_policy, src)
        )
    metadata = {
        "format": "checkpoint",
        "linear_layers": json.dumps(sorted(arrays), separators=(",", ":")),
        "model_id": manifest.model_id,
    }
    _save(arrays, metadata, out_path)


# --- token samples -----------------------------------------------------------


def random_token_samples(
    vocab_size: int, n_sequences: int, seq_len: int, seed: int = 0
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=(n_sequences, seq_len), dtype=np.int64)


def write_sample_file(ids: np.ndarray, path: str | Path) -> None:
    """Token ids ride in an ordinary container as a float64 tensor named
    ``input_ids`` so both toolkits can inspect the file."""
    arr = np.ascontiguousarray(np.asarray(ids), dtype=np.float64)
    _save(
        {"input_ids": arr},
        {"format": "checkpoint", "linear_layers": "[]"},
        path,
    )


def load_samples(path: str | Path) -> np.ndarray:
    try:
        arrays = safetensors.numpy.load_file(str(path))
    except Exception as exc:
        raise ExportIoError(f"cannot read sample file {path}: {exc}") from exc
    if "input_ids" not in arrays:
        raise SampleSourceEmpty(f"sample file {path} has no input_ids tensor")
    ids = np.asarray(arrays["input_ids"])
    if ids.ndim != 2 or ids.size == 0:
        raise SampleSourceEmpty(
            f"input_ids must be a non-empty 2-D tensor, got shape {ids.shape}"
        )
    return ids.astype(np.int64)


# --- activation capture -----------------------------------------------------


def capture_activations(
    model: torch.nn.Module,
    manifest: ExportManifest,
    ids: np.ndarray,
) -> dict[str, np.ndarray]:
    """Run the model over the token sequences and return, per mapped layer,
    the inputs seen at that module as float64 columns (features x tokens).

    Inputs are flattened over batch and sequence dimensions in row-major
    order, so column k is token position k % seq_len of sequence k // seq_len
    within the processed range.
    """
    manifest.validate()
    widths = {
        src: _mapped_weight(model, src).shape[1] for src in manifest.mapping
    }
    captured: dict[str, list[np.ndarray]] = {src: [] for src in manifest.mapping}

    def make_hook(src: str):
        def hook(module, inputs, output):
            if not inputs:
                raise HookFailure(f"hook at {src!r} saw no positional inputs")
            x = inputs[0]
            if not isinstance(x, torch.Tensor) or x.ndim < 1:
                raise HookFailure(f"hook at {src!r} captured a non-tensor input")
            if x.shape[-1] != widths[src]:
                raise HookFailure(
                    f"hook at {src!r} captured width {x.shape[-1]},"
                    f" weight expects {widths[src]}"
                )
            flat = x.detach().to(torch.float64).reshape(-1, x.shape[-1])
            captured[src].append(flat.cpu().numpy().T)

        return hook

    handles = [
        model.get_submodule(src).register_forward_hook(make_hook(src))
        for src in manifest.mapping
    ]
    try:
        model.eval()
        with torch.no_grad():
            for start in range(0, ids.shape[0], _BATCH_SEQUENCES):
                batch = torch.from_numpy(ids[start : start + _BATCH_SEQUENCES])
                model(input_ids=batch)
    finally:
        for handle in handles:
            handle.remove()

    out: dict[str, np.ndarray] = {}
    for src, dst in manifest.mapping.items():
        if not captured[src]:
            raise HookFailure(f"hook at {src!r} never fired during the forward pass")
        out[dst] = np.concatenate(captured[src], axis=1)
    return out


def export_covariance(
    model: torch.nn.Module,
    manifest: ExportManifest,
    sample_path: str | Path,
    n: int,
    out_path: str | Path,
) -> None:
    """Accumulate C = X X^T per mapped layer over exactly n token positions
    and write a covariance container (counts recorded, no diagonal boost)."""
    manifest.validate()
    ids = load_samples(sample_path)
    n_seq, seq_len = ids.shape
    total = n_seq * seq_len
    if n < 1:
        raise SampleSourceEmpty(f"need at least one token position, got n={n}")
    if n > total:
        raise SampleSourceEmpty(
            f"sample source holds {total} token positions, need {n}"
        )
    needed_seqs = math.ceil(n / seq_len)
    acts = capture_activations(model, manifest, ids[:needed_seqs])
    arrays: dict[str, np.ndarray] = {}
    for dst, X in acts.items():
        X = X[:, :n]
        gram = X @ X.T
        sym = np.tril(gram) + np.tril(gram, -1).T
        arrays[dst + ".cov"] = sym
        arrays[dst + ".count"] = np.array(float(n), dtype=np.float64)
        arrays[dst + ".boost"] = np.array(0.0, dtype=np.float64)
    metadata = {"format": "covariance", "task_id": manifest.model_id}
    _save(arrays, metadata, out_path)
