"""On-disk checkpoint: a directory holding weights, index memory and config.

Layout::

    <dir>/manifest.json   format tag, version, model/train config echo,
                          normalization stats, data description
    <dir>/weights.npz     one named float64 array per parameter
    <dir>/memory.json     index-memory segment (InformerLite only)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Normalizer
from .memory import AttentionIndexMemory
from .models import ModelConfig, build_model

__all__ = ["Checkpoint", "CHECKPOINT_VERSION", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_FORMAT = "sparsecast.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    weights: dict[str, np.ndarray]
    normalizer: Normalizer
    memory: AttentionIndexMemory | None = None
    train_config: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def build(self):
        model = build_model(self.model_config)
        model.load_state_dict(self.weights)
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / "weights.npz", **ckpt.weights)
    memory_file = None
    if ckpt.memory is not None:
        memory_file = "memory.json"
        (path / memory_file).write_text(json.dumps(ckpt.memory.to_dict(), indent=2) + "\n")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "normalizer": ckpt.normalizer.to_dict(),
        "data": ckpt.data,
        "weights": "weights.npz",
        "weight_names": sorted(ckpt.weights),
        "memory": memory_file,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{path} is not a checkpoint directory (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    with np.load(path / manifest["weights"]) as npz:
        weights = {k: npz[k].copy() for k in npz.files}
    memory = None
    if manifest.get("memory"):
        memory = AttentionIndexMemory.from_dict(json.loads((path / manifest["memory"]).read_text()))
    return Checkpoint(
        model_config=ModelConfig(**manifest["model_config"]),
        weights=weights,
        normalizer=Normalizer.from_dict(manifest["normalizer"]),
        memory=memory,
        train_config=manifest.get("train_config", {}),
        data=manifest.get("data", {}),
    )
