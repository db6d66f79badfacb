"""Named float32 arrays as a JSON manifest plus a raw little-endian blob.

Layout of ``<stem>.bin``: the arrays from the manifest, in manifest order,
each written row-major as IEEE-754 binary32 little-endian with no padding.
Each manifest entry carries ``name``, ``shape``, ``dtype`` ("<f4"),
``offset`` (bytes from the start of the blob) and ``nbytes``.
``<stem>.json`` additionally holds a free-form ``meta`` object.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from heterrec.errors import DataError

FORMAT = "heterrec-arrays-v1"


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> tuple[Path, Path]:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "<f4",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "byte_order": "little", "entries": entries, "meta": meta or {}}
    jpath, bpath = stem.with_suffix(".json"), stem.with_suffix(".bin")
    bpath.write_bytes(b"".join(chunks))
    jpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return jpath, bpath


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    stem = _stem(path)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise DataError(f"{stem}.json: unknown array manifest format {manifest.get('format')!r}")
    blob = stem.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise DataError(f"{stem}.bin truncated: entry {e['name']} ends at byte {end}, blob has {len(blob)}")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=e["dtype"]).astype(np.float32)
        out[e["name"]] = arr.reshape(e["shape"])
    return out, manifest.get("meta", {})
