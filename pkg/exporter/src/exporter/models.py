"""Model construction and lookup.

The builtin ``tiny-encoder`` is a 2-layer BERT-style encoder instantiated
from a config with a fixed seed, so tests and demos never touch the network;
the export code paths are identical for a real downloaded checkpoint, which
can be passed as a local directory path.
"""

from __future__ import annotations

import torch
from transformers import BertConfig, BertModel

from .errors import ExportIoError

TINY_PREFIX = "tiny-encoder"


def tiny_encoder(seed: int = 0) -> torch.nn.Module:
    config = BertConfig(
        vocab_size=96,
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=48,
        max_position_embeddings=64,
        type_vocab_size=1,
    )
    torch.manual_seed(seed)
    model = BertModel(config)
    model.eval()
    return model


def resolve_model(model_id: str) -> torch.nn.Module:
    """``tiny-encoder[:seed]`` builds the builtin; anything else is treated
    as a local model directory loadable by the transformers library."""
    if model_id == TINY_PREFIX or model_id.startswith(TINY_PREFIX + ":"):
        seed = 0
        if ":" in model_id:
            try:
                seed = int(model_id.split(":", 1)[1])
            except ValueError as exc:
                raise ExportIoError(f"bad seed in model id {model_id!r}") from exc
        return tiny_encoder(seed)
    try:
        from transformers import AutoModel

        model = AutoModel.from_pretrained(model_id, local_files_only=True)
    except Exception as exc:
        raise ExportIoError(f"cannot load model {model_id!r}: {exc}") from exc
    model.eval()
    return model


def discover_linear_layers(model: torch.nn.Module) -> dict[str, str]:
    """Identity mapping over every 2-D linear module in the model, a
    convenient starting point for a manifest."""
    return {
        name: name
        for name, module in model.named_modules()
        if isinstance(module, torch.nn.Linear)
    }
