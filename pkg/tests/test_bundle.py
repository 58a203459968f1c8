"""TensorBundle format tests: round trips, encodings, validation."""

import hashlib
import json

import numpy as np
import pytest

from slimkit.bundle import TensorBundle, load_bundle, save_bundle
from slimkit.errors import ManifestError, SizeMismatch, UnsupportedVersion


def dir_hash(path):
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestRoundTrip:
    def test_empty_bundle(self, tmp_path):
        save_bundle(TensorBundle(metadata={"kind": "empty"}), tmp_path / "b")
        again = load_bundle(tmp_path / "b")
        assert again.names() == []
        assert again.metadata == {"kind": "empty"}

    def test_scalar_one_encoding(self, tmp_path):
        b = TensorBundle()
        b.add("one", np.array([[1.0]]))
        save_bundle(b, tmp_path / "b")
        raw = (tmp_path / "b" / "tensors" / "00000.bin").read_bytes()
        assert raw == bytes([0x00, 0x00, 0x80, 0x3F])

    def test_seeded_bundles_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        b = TensorBundle(metadata={"seed": 0})
        for i in range(100):
            shape = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(1, 4))))
            b.add(f"t{i:03d}", rng.normal(size=shape).astype(np.float32),
                  metadata={"i": i})
        save_bundle(b, tmp_path / "b1")
        loaded = load_bundle(tmp_path / "b1")
        save_bundle(loaded, tmp_path / "b2")
        assert dir_hash(tmp_path / "b1") == dir_hash(tmp_path / "b2")
        for name in b.names():
            np.testing.assert_array_equal(
                loaded.get(name).array, b.get(name).array
            )
            assert loaded.get(name).metadata == b.get(name).metadata

    def test_many_small_bundles(self, tmp_path):
        rng = np.random.default_rng(1)
        for i in range(50):
            b = TensorBundle(metadata={"i": i})
            for j in range(int(rng.integers(0, 5))):
                b.add(f"x{j}", rng.normal(size=(int(rng.integers(1, 5)),)))
            save_bundle(b, tmp_path / f"b{i}")
            again = load_bundle(tmp_path / f"b{i}")
            save_bundle(again, tmp_path / f"c{i}")
            assert dir_hash(tmp_path / f"b{i}") == dir_hash(tmp_path / f"c{i}")


class TestValidation:
    def _write_simple(self, tmp_path):
        b = TensorBundle()
        b.add("a", np.arange(6, dtype=np.float32).reshape(2, 3))
        save_bundle(b, tmp_path / "b")
        return tmp_path / "b"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            load_bundle(tmp_path / "nope")

    def test_bad_json(self, tmp_path):
        root = self._write_simple(tmp_path)
        (root / "manifest.json").write_text("{not json")
        with pytest.raises(ManifestError):
            load_bundle(root)

    def test_unsupported_version(self, tmp_path):
        root = self._write_simple(tmp_path)
        m = json.loads((root / "manifest.json").read_text())
        m["format_version"] = 99
        (root / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(UnsupportedVersion):
            load_bundle(root)

    def test_size_mismatch(self, tmp_path):
        root = self._write_simple(tmp_path)
        m = json.loads((root / "manifest.json").read_text())
        m["tensors"][0]["shape"] = [2, 4]  # 32 bytes > 24 on disk
        (root / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(SizeMismatch):
            load_bundle(root)

    def test_missing_data_file(self, tmp_path):
        root = self._write_simple(tmp_path)
        (root / "tensors" / "00000.bin").unlink()
        with pytest.raises(ManifestError):
            load_bundle(root)

    def test_duplicate_name_rejected_at_add(self):
        b = TensorBundle()
        b.add("a", np.zeros(2))
        with pytest.raises(ManifestError):
            b.add("a", np.zeros(2))

    def test_offset_reading(self, tmp_path):
        # two records packed into one file at different offsets
        root = tmp_path / "b"
        (root / "tensors").mkdir(parents=True)
        payload = np.arange(5, dtype="<f4").tobytes()
        (root / "tensors" / "packed.bin").write_bytes(payload)
        manifest = {
            "format_version": 1,
            "metadata": {},
            "tensors": [
                {"name": "head", "shape": [2], "dtype": "f32",
                 "file": "tensors/packed.bin", "offset": 0},
                {"name": "tail", "shape": [3], "dtype": "f32",
                 "file": "tensors/packed.bin", "offset": 8},
            ],
        }
        (root / "manifest.json").write_text(json.dumps(manifest))
        b = load_bundle(root)
        np.testing.assert_array_equal(b.get("head").array, [0.0, 1.0])
        np.testing.assert_array_equal(b.get("tail").array, [2.0, 3.0, 4.0])
