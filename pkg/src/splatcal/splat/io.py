"""Binary checkpoint for pixel-aligned Gaussian sets.

Layout (little-endian)::

    header   "<4s6I"  magic b"SPLC", version, count, SH degree, k_ref,
                      height, width
    records  count structured rows: d f4, quat 4f4, sh (ncoef*3)f4,
             scale 3f4, opacity f4, source_view i4, source_pixel 2i4
    trailer  uint32 byte length, then UTF-8 JSON with the cameras and any
             extra metadata

Stored values are the raw (pre-activation) parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ShapeError
from ..geometry import CameraIntrinsics, CameraPose
from .raster import GaussianSet
from .sh import MAX_DEGREE, num_coeffs

MAGIC = b"SPLC"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


def _record_dtype(ncoef: int) -> np.dtype:
    return np.dtype([("d", "<f4"), ("quat", "<f4", (4,)), ("sh", "<f4", (ncoef * 3,)),
                     ("scale", "<f4", (3,)), ("opacity", "<f4"), ("source_view", "<i4"),
                     ("source_pixel", "<i4", (2,))])


def save_checkpoint(path, g: GaussianSet, intrinsics: CameraIntrinsics, meta: dict | None = None) -> None:
    n = len(g)
    ncoef = num_coeffs(g.sh_degree)
    rec = np.zeros(n, dtype=_record_dtype(ncoef))
    rec["d"] = g.d_raw
    rec["quat"] = g.quats
    rec["sh"] = np.asarray(g.sh).reshape(n, ncoef * 3)
    rec["scale"] = g.scale_raw
    rec["opacity"] = g.opacity_raw
    rec["source_view"] = g.source_view
    rec["source_pixel"] = g.source_pixel
    doc = {"intrinsics": intrinsics.to_json(),
           "ref_poses": [p.to_json() for p in g.ref_poses]}
    if meta:
        doc.update(meta)
    blob = json.dumps(doc).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, g.sh_degree, g.k_ref, g.height, g.width))
        f.write(rec.tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_checkpoint(path):
    """Returns ``(gaussians, intrinsics, meta)``; ``meta`` is the full JSON trailer."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ShapeError(f"{path}: truncated header")
    magic, version, n, degree, k_ref, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ShapeError(f"{path}: not a splat checkpoint")
    if version != VERSION:
        raise ShapeError(f"{path}: unsupported version {version}")
    if degree > MAX_DEGREE:
        raise ShapeError(f"{path}: SH degree {degree} above {MAX_DEGREE}")
    ncoef = num_coeffs(degree)
    dt = _record_dtype(ncoef)
    end = _HEADER.size + n * dt.itemsize
    if len(data) < end + 4:
        raise ShapeError(f"{path}: truncated records")
    rec = np.frombuffer(data, dtype=dt, count=n, offset=_HEADER.size)
    (blen,) = struct.unpack_from("<I", data, end)
    doc = json.loads(data[end + 4:end + 4 + blen].decode("utf-8"))
    k = CameraIntrinsics.from_json(doc["intrinsics"])
    refs = tuple(CameraPose.from_json(p) for p in doc["ref_poses"])
    g = GaussianSet(
        d_raw=rec["d"].astype(np.float64), quats=rec["quat"].astype(np.float64),
        sh=rec["sh"].astype(np.float64).reshape(n, ncoef, 3),
        scale_raw=rec["scale"].astype(np.float64), opacity_raw=rec["opacity"].astype(np.float64),
        source_view=rec["source_view"].astype(np.int64),
        source_pixel=rec["source_pixel"].astype(np.int64),
        k_ref=k_ref, height=h, width=w, ref_poses=refs, sh_degree=degree)
    return g, k, doc
