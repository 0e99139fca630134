"""ZSGT tensor files and named-tensor archives.

Layout: b"ZSGT", u32 rank, rank x u64 extents, little-endian f32 payload (row-major).
"""
from __future__ import annotations

import json
import struct
import zipfile
from pathlib import Path

import numpy as np

MAGIC = b"ZSGT"


def dumps(arr) -> bytes:
    a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a ZSGT tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    off = 8 + 8 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - off != 4 * n:
        raise ValueError(f"ZSGT payload has {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).copy()


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_archive(path, tensors: dict, manifest: dict) -> None:
    """Zip archive holding ``manifest.json`` plus one ``<name>.zsgt`` entry per tensor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest, tensors=sorted(tensors))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed timestamps keep archives byte-reproducible
        info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(tensors):
            zf.writestr(zipfile.ZipInfo(f"{name}.zsgt", date_time=(1980, 1, 1, 0, 0, 0)),
                        dumps(tensors[name]))


def load_archive(path) -> tuple[dict, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors = {name: loads(zf.read(f"{name}.zsgt")) for name in manifest["tensors"]}
    return tensors, manifest
