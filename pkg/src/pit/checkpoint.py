"""Checkpoint directories: one tensor container per parameter plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, PitError
from .io import atomic_write, load_tensor, save_tensor
from .models import ArchConfig, Model, build, param_shapes

MANIFEST = "manifest.json"


def save_checkpoint(model: Model, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, p in model.params.items():
        fname = name + ".pitt"
        save_tensor(directory / fname, p.data)
        files[name] = fname
    manifest = {"config": model.config.to_dict(), "dtype": str(model.dtype), "params": files}
    if extra:
        manifest["extra"] = extra
    atomic_write(directory / MANIFEST, (json.dumps(manifest, indent=2) + "\n").encode())
    return directory


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        raise CheckpointError(f"{directory}: no {MANIFEST} (missing checkpoint?)")
    try:
        manifest = json.loads(mpath.read_text())
        config = ArchConfig.from_dict(manifest["config"])
        files = manifest["params"]
        dtype = np.dtype(manifest.get("dtype", "float32"))
    except (json.JSONDecodeError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{mpath}: malformed manifest ({e})") from e
    shapes = param_shapes(config)
    missing = [k for k in shapes if k not in files]
    if missing:
        raise CheckpointError(f"{mpath}: parameter {missing[0]} missing from manifest")
    unknown = [k for k in files if k not in shapes]
    if unknown:
        raise CheckpointError(f"{mpath}: parameter {unknown[0]} not part of the config")
    model = build(config, seed=0, dtype=dtype)
    for name, shape in shapes.items():
        try:
            arr = load_tensor(directory / files[name])
        except PitError as e:
            raise CheckpointError(f"parameter {name}: {e}") from e
        if arr.shape != shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape} does not match config {shape}")
        model.params[name].data[...] = arr
    return model
