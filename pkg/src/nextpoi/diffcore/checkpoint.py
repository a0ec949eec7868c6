"""Checkpoint archive: a zip holding ``manifest.txt`` (one ``name<TAB>shape<TAB>dtype``
line per array), one raw little-endian blob per array under ``arrays/``, and an
optional ``meta.json``.

Entry timestamps are fixed so identical contents give identical bytes.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(arrays):
            if "\t" in name or "/" in name:
                raise ValueError(f"invalid array name {name!r}")
            arr = np.asarray(arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            shape = ",".join(str(s) for s in arr.shape)
            lines.append(f"{name}\t{shape}\t{le.dtype.str}")
            _entry(zf, f"arrays/{name}.bin", np.ascontiguousarray(le).tobytes())
        _entry(zf, "manifest.txt", ("\n".join(lines) + "\n").encode())
        if meta is not None:
            _entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path) as zf:
        manifest = zf.read("manifest.txt").decode()
        for line in manifest.splitlines():
            if not line:
                continue
            name, shape_s, dtype_s = line.split("\t")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            blob = zf.read(f"arrays/{name}.bin")
            arrays[name] = np.frombuffer(blob, dtype=np.dtype(dtype_s)).reshape(shape).astype(
                np.dtype(dtype_s).newbyteorder("="), copy=True
            )
        meta = json.loads(zf.read("meta.json")) if "meta.json" in zf.namelist() else {}
    return arrays, meta
