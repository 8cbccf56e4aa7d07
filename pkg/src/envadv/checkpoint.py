"""Versioned checkpoint container."""

from __future__ import annotations

import os
from pathlib import Path

import torch

from .nets import SpeakerModel, TrunkConfig

FORMAT_VERSION = 1


def save_checkpoint(path, model: SpeakerModel, dsp_hash: str, optimizers=None, epoch=-1,
                    best_val_metric=float("-inf"), state=None, config=None) -> None:
    """Write atomically so an interrupted save never leaves a truncated file."""
    blob = {
        "format_version": FORMAT_VERSION,
        "trunk_config": model.cfg.to_dict(),
        "dsp_hash": dsp_hash,
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "has_verif_head": model.verif_head is not None,
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "epoch": int(epoch),
        "best_val_metric": float(best_val_metric),
        "state": state or {},
        "config": config or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(model, blob)``; the model is in eval mode."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {version}")
    model = SpeakerModel(TrunkConfig(**blob["trunk_config"]))
    if blob["has_verif_head"]:
        model.add_verif_head()
    model.load_state_dict(blob["params"])
    model.eval()
    return model, blob
