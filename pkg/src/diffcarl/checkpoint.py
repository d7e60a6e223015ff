"""Portable parameter checkpoints and training-log CSVs.

A checkpoint is a single ``.npz`` file. Each tensor is stored under
``"<module>/<parameter>"`` and the entry ``"__manifest__"`` holds a JSON
document with the network spec, diffusion settings, observation scaler
and the array shapes, so a reader without torch can still inspect it.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
import torch

from .agent import CURVE_COLUMNS

MANIFEST_KEY = "__manifest__"
FORMAT = "diffcarl-checkpoint/1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Union[str, Path], modules: dict, manifest: dict) -> Path:
    path = Path(path)
    arrays = {}
    shapes = {}
    for name, module in modules.items():
        for pname, t in module.state_dict().items():
            key = f"{name}/{pname}"
            arrays[key] = t.detach().cpu().numpy()
            shapes[key] = list(arrays[key].shape)
    doc = {"format": FORMAT, **manifest, "shapes": shapes}
    arrays[MANIFEST_KEY] = np.frombuffer(json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[dict, dict]:
    """``(arrays, manifest)``; shapes are checked against the manifest."""
    with np.load(Path(path), allow_pickle=False) as z:
        if MANIFEST_KEY not in z.files:
            raise CheckpointError(f"{path}: no manifest")
        manifest = json.loads(z[MANIFEST_KEY].tobytes().decode("utf-8"))
        arrays = {k: z[k] for k in z.files if k != MANIFEST_KEY}
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {manifest.get('format')!r}")
    for key, shape in manifest["shapes"].items():
        if key not in arrays or list(arrays[key].shape) != shape:
            raise CheckpointError(f"{path}: array {key!r} missing or misshapen")
    return arrays, manifest


def restore_modules(modules: dict, arrays: dict) -> None:
    for name, module in modules.items():
        state = {}
        for pname, t in module.state_dict().items():
            key = f"{name}/{pname}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks {key!r}")
            if tuple(arrays[key].shape) != tuple(t.shape):
                raise CheckpointError(f"{key!r}: shape {arrays[key].shape} != {tuple(t.shape)}")
            state[pname] = torch.as_tensor(arrays[key], dtype=t.dtype)
        module.load_state_dict(state)


def write_curve(curve: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve.loc[:, list(CURVE_COLUMNS)].to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return path


def read_curve(path: Union[str, Path]) -> pd.DataFrame:
    df = pd.read_csv(path)
    if tuple(df.columns) != CURVE_COLUMNS:
        raise CheckpointError(f"{path}: expected columns {','.join(CURVE_COLUMNS)}")
    return df
