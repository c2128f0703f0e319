"""JSON checkpoints: config, scaler and every parameter tensor.

Floats are written with ``repr`` precision (the JSON default), so a
save/load round trip reproduces parameters and predictions exactly.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import ContractError
from .backbone import Scaler
from .baselines import HistoryRegressor, IpwRegressor, McGcompModel, PropensityModel
from .datagen.dataset import config_hash, write_atomic
from .igc import BiasedIgcModel, IgcModel
from .training import SequenceModel, TrainConfig

FORMAT = "igcnet-checkpoint"
VERSION = 1

MODEL_KINDS = {cls.kind: cls for cls in (IgcModel, BiasedIgcModel, HistoryRegressor,
                                         PropensityModel, IpwRegressor, McGcompModel)}


class CheckpointError(ValueError):
    pass


def checkpoint_dict(model: SequenceModel, dataset_hash: Optional[str] = None) -> dict:
    cfg = model.cfg.to_dict()
    return {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "dims": {"d_y": model.d_y, "d_x": model.d_x, "d_a": model.d_a, "d_s": model.d_s},
        "config": cfg,
        "scaler": model.scaler.to_dict(),
        "tensors": {name: {"shape": list(t.values.shape), "data": t.values.reshape(-1).tolist()}
                    for name, t in model.store.items()},
        "meta": {"config_hash": config_hash(cfg), "seed": model.cfg.seed, "dataset_hash": dataset_hash,
                 "loss_history": [float(v) for v in model.loss_history]},
    }


def save_checkpoint(model: SequenceModel, path, dataset_hash: Optional[str] = None) -> None:
    write_atomic(Path(path), json.dumps(checkpoint_dict(model, dataset_hash), sort_keys=True) + "\n")


def model_from_dict(d: dict) -> SequenceModel:
    if d.get("format") != FORMAT:
        raise CheckpointError("not an igcnet checkpoint")
    if d.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
    cls = MODEL_KINDS.get(d.get("kind"))
    if cls is None:
        raise CheckpointError(f"unknown model kind {d.get('kind')!r}")
    cfg = TrainConfig.from_dict(d["config"])
    if config_hash(cfg.to_dict()) != d["meta"]["config_hash"]:
        raise CheckpointError("config hash mismatch")
    model = cls(cfg, scaler=Scaler.from_dict(d["scaler"]), **d["dims"])
    tensors = d["tensors"]
    if set(tensors) != set(model.store.names()):
        missing = sorted(set(model.store.names()) ^ set(tensors))
        raise CheckpointError(f"parameter names do not match the architecture: {missing}")
    for name, t in model.store.items():
        shape = tuple(tensors[name]["shape"])
        if shape != t.values.shape:
            raise CheckpointError(f"{name}: shape {shape} does not match {t.values.shape}")
        values = np.asarray(tensors[name]["data"], dtype=np.float64)
        if values.size != t.values.size:
            raise CheckpointError(f"{name}: expected {t.values.size} values, got {values.size}")
        t.values[...] = values.reshape(shape)
    model.loss_history = list(d["meta"].get("loss_history", []))
    model.dataset_hash = d["meta"].get("dataset_hash")
    return model


def load_checkpoint(path) -> SequenceModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint: {exc}") from exc
    return model_from_dict(d)
