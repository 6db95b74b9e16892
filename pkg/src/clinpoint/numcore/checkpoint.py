"""Checkpoint archive: a zip of ``.npy`` entries (little-endian float64, one per
named array) plus ``manifest.json``. Entry timestamps are pinned so identical
contents produce identical bytes."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def config_hash(config: Mapping[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], manifest: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shapes = {name: list(np.shape(a)) for name, a in arrays.items()}
    full_manifest = dict(manifest)
    full_manifest["arrays"] = shapes
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(full_manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name], dtype="<f8"),
                                      allow_pickle=False)
            zf.writestr(_entry(f"arrays/{name}.npy"), buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in manifest["arrays"]:
            raw = zf.read(f"arrays/{name}.npy")
            arrays[name] = np.lib.format.read_array(io.BytesIO(raw), allow_pickle=False).astype(np.float64)
    return arrays, manifest
