"""Checkpoint container: one zip archive per model.

Layout::

    <name>.ckpt (zip)
      meta.json            # JSON metadata header (free-form dict)
      params/<name>.npy    # one numpy array per parameter, keyed by name

Entries are written in sorted order with a fixed 1980 zip timestamp so the
same tensors always produce the same bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path: Path | str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_FIXED_DATE)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            if arr.ndim > 0:
                # ascontiguousarray would promote 0-d scalars to shape (1,)
                arr = np.ascontiguousarray(arr)
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr)
            info = zipfile.ZipInfo(f"params/{name}.npy", date_time=_FIXED_DATE)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            tensors: dict[str, np.ndarray] = {}
            for entry in zf.namelist():
                if entry.startswith("params/") and entry.endswith(".npy"):
                    name = entry[len("params/") : -len(".npy")]
                    tensors[name] = np.lib.format.read_array(io.BytesIO(zf.read(entry)))
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    return tensors, meta
