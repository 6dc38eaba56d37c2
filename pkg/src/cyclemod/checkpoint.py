"""Deterministic checkpoint archives.

A checkpoint is a zip file holding one ``meta.json`` plus raw little-endian
array blobs under ``arrays/``. Entry order, timestamps and JSON key order
are all fixed, so saving the same state twice produces identical bytes.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

_EPOCH = (1980, 1, 1, 0, 0, 0)
FORMAT_NAME = "cyclemod-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or structurally invalid checkpoint archive."""


def tensor_to_array(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def array_to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a).copy())


def write_archive(path: str | Path, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> Path:
    """Write meta plus arrays; ``meta['arrays']`` index is generated here."""
    path = Path(path)
    index: dict[str, Any] = {}
    payload: dict[str, bytes] = {}
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        index[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape)}
        payload[f"arrays/{name}"] = arr.tobytes()
    meta = dict(meta)
    meta["format"] = FORMAT_NAME
    meta["format_version"] = FORMAT_VERSION
    meta["arrays"] = index
    entries = [("meta.json", json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"))]
    entries.extend(sorted(payload.items()))
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, data in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o600 << 16
            zf.writestr(info, data)
    return path


def read_archive(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
            if meta.get("format") != FORMAT_NAME:
                raise CheckpointError(f"not a {FORMAT_NAME} archive: {path}")
            arrays = {}
            for name, spec in meta.get("arrays", {}).items():
                data = zf.read(f"arrays/{name}")
                arr = np.frombuffer(data, dtype=np.dtype(spec["dtype"]))
                arrays[name] = arr.reshape(spec["shape"]).copy()
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable checkpoint {path}: {err}") from None
    return meta, arrays
