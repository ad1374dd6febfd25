"""On-disk formats: CGQG snapshot files and JSON manifests."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = b"CGQG"
SNAPSHOT_VERSION = 1
# magic, version, nx, ny, layers, dt, time, params hash (16 hex chars)
_HEADER = struct.Struct("<4sIIIIdd16s")


class FormatError(ValueError):
    pass


@dataclass
class SnapshotFile:
    """Layered fields ``(T, layers, ny, nx)`` plus a small header.

    The payload is little-endian float64 in layer-major order; the snapshot
    count follows from the payload length.
    """

    data: np.ndarray
    dt: float
    time: float
    params_hash: str

    def to_bytes(self) -> bytes:
        d = np.asarray(self.data, dtype=float)
        if d.ndim == 3:
            d = d[None]
        if d.ndim != 4:
            raise FormatError("snapshot data must be (T, layers, ny, nx)")
        _, layers, ny, nx = d.shape
        ph = self.params_hash.encode("ascii")
        if len(ph) != 16:
            raise FormatError("params hash must be 16 hex characters")
        head = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, nx, ny, layers, float(self.dt), float(self.time), ph)
        return head + np.ascontiguousarray(d, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> SnapshotFile:
        if len(blob) < _HEADER.size:
            raise FormatError("truncated snapshot header")
        magic, version, nx, ny, layers, dt, time, ph = _HEADER.unpack_from(blob)
        if magic != SNAPSHOT_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {version}")
        payload = blob[_HEADER.size :]
        per = 8 * nx * ny * layers
        if per == 0 or len(payload) % per:
            raise FormatError("payload length does not match header")
        data = np.frombuffer(payload, dtype="<f8").reshape(-1, layers, ny, nx).astype(float)
        return cls(data, dt, time, ph.decode("ascii"))

    def save(self, path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return sha256_bytes(blob)

    @classmethod
    def load(cls, path) -> SnapshotFile:
        return cls.from_bytes(Path(path).read_bytes())


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return sha256_bytes(canonical_json(cfg).encode())[:16]


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def read_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"no manifest at {p}")
    return json.loads(p.read_text())
