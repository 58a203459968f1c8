"""On-disk container for named f32 tensors.

A bundle is a directory holding ``manifest.json`` plus raw little-endian
float32 data files (row-major, no padding, no header). The manifest lists
one record per tensor: name, shape, dtype, file, byte offset, and an
optional per-tensor metadata map; the bundle itself carries a free-form
metadata map. Round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError, SizeMismatch, UnsupportedVersion

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class TensorRecord:
    name: str
    array: np.ndarray  # float32, C-order
    metadata: dict = field(default_factory=dict)


@dataclass
class TensorBundle:
    metadata: dict = field(default_factory=dict)
    records: dict[str, TensorRecord] = field(default_factory=dict)

    def add(self, name: str, array, metadata: dict | None = None) -> TensorRecord:
        if name in self.records:
            raise ManifestError(f"duplicate tensor name {name!r}")
        arr = np.ascontiguousarray(np.asarray(array), dtype=np.float32)
        rec = TensorRecord(name=name, array=arr, metadata=dict(metadata or {}))
        self.records[name] = rec
        return rec

    def names(self) -> list[str]:
        return list(self.records)

    def get(self, name: str) -> TensorRecord:
        if name not in self.records:
            raise ManifestError(f"tensor {name!r} not in bundle")
        return self.records[name]

    def array(self, name: str) -> np.ndarray:
        """Tensor data widened to float64 for computation."""
        return self.get(name).array.astype(np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.records


def save_bundle(bundle: TensorBundle, path) -> None:
    """Write manifest.json plus one data file per tensor under tensors/.

    Output is deterministic for a given bundle: record order follows
    insertion order and data files are numbered sequentially.
    """
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, rec in enumerate(bundle.records.values()):
        rel = f"tensors/{idx:05d}.bin"
        data = np.ascontiguousarray(rec.array, dtype="<f4")
        data.tofile(root / rel)
        entry = {
            "name": rec.name,
            "shape": [int(s) for s in rec.array.shape],
            "dtype": "f32",
            "file": rel,
            "offset": 0,
        }
        if rec.metadata:
            entry["metadata"] = rec.metadata
        entries.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "metadata": bundle.metadata,
        "tensors": entries,
    }
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_bundle(path) -> TensorBundle:
    """Read a bundle directory, validating sizes and the format version."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ManifestError(f"no {MANIFEST_NAME} under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise ManifestError("manifest missing format_version")
    if manifest["format_version"] != FORMAT_VERSION:
        raise UnsupportedVersion(
            f"format_version {manifest['format_version']} not supported"
        )
    bundle = TensorBundle(metadata=dict(manifest.get("metadata", {})))
    for entry in manifest.get("tensors", []):
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            dtype = entry["dtype"]
            rel = entry["file"]
            offset = int(entry.get("offset", 0))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed tensor record: {entry!r}") from exc
        if dtype != "f32":
            raise ManifestError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if name in bundle.records:
            raise ManifestError(f"duplicate tensor name {name!r}")
        data_path = root / rel
        if not data_path.is_file():
            raise ManifestError(f"tensor {name!r}: data file {rel} missing")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        size = data_path.stat().st_size
        if offset < 0 or offset + nbytes > size:
            raise SizeMismatch(
                f"tensor {name!r}: needs {nbytes} bytes at offset {offset}, "
                f"file {rel} has {size}"
            )
        with open(data_path, "rb") as fh:
            fh.seek(offset)
            raw = fh.read(nbytes)
        if len(raw) != nbytes:
            raise SizeMismatch(f"tensor {name!r}: short read from {rel}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        bundle.records[name] = TensorRecord(
            name=name, array=arr, metadata=dict(entry.get("metadata", {}))
        )
    return bundle
