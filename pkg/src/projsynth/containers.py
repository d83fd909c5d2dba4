"""File containers: volumes, projections, PGM previews, weight bundles.

Every container is a JSON sidecar next to a raw little-endian float32
binary. Volumes are stored x-fastest; projections u-fastest (row-major
with v as the slow axis). Weight bundles hold many named tensors in one
blob, guarded by a sha256 checksum.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import IntegrityError, LoadError

FORMAT_VERSION = 1


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise LoadError(f"container sidecar not found: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise LoadError(f"malformed sidecar {path}: {e}") from e


def _read_blob(sidecar_path, meta, n_expected):
    blob_path = Path(sidecar_path).parent / meta["data"]
    if not blob_path.exists():
        raise LoadError(f"raw payload not found: {blob_path}")
    data = np.fromfile(blob_path, dtype="<f4")
    if data.size != n_expected:
        raise LoadError(
            f"{blob_path}: payload holds {data.size} values, sidecar declares {n_expected}"
        )
    return data


# ---------------------------------------------------------------------------
# Volume container
# ---------------------------------------------------------------------------

def save_volume(path, volume):
    """Write a Volume3D as <path>.json + <path>.raw (f32le, x-fastest)."""
    path = Path(path)
    raw_name = path.name + ".raw"
    meta = {
        "format_version": FORMAT_VERSION,
        "dims": list(volume.dims),
        "spacing_mm": [float(s) for s in volume.spacing],
        "origin_mm": [float(o) for o in volume.origin],
        "dtype": "f32le",
        "modality": volume.modality,
        "data": raw_name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    volume.data.astype("<f4").ravel(order="F").tofile(path.parent / raw_name)
    with open(path.with_name(path.name + ".json"), "w") as f:
        json.dump(meta, f, indent=1)
    return path.with_name(path.name + ".json")


def load_volume(sidecar_path):
    from .projector import Volume3D

    meta = _read_json(sidecar_path)
    if meta.get("dtype") != "f32le":
        raise LoadError(f"unsupported dtype {meta.get('dtype')!r}")
    nx, ny, nz = meta["dims"]
    data = _read_blob(sidecar_path, meta, nx * ny * nz).reshape((nx, ny, nz), order="F")
    return Volume3D(
        dims=(nx, ny, nz),
        spacing=tuple(meta["spacing_mm"]),
        origin=tuple(meta["origin_mm"]),
        data=data,
        modality=meta.get("modality", "MR"),
    )


# ---------------------------------------------------------------------------
# Projection container
# ---------------------------------------------------------------------------

def save_projection(path, proj, pgm=False):
    """Write a ProjectionImage as <path>.json + <path>.raw, optional .pgm."""
    path = Path(path)
    raw_name = path.name + ".raw"
    meta = {
        "format_version": FORMAT_VERSION,
        "dims": list(proj.dims),
        "spacing_mm": [float(s) for s in proj.spacing],
        "dtype": "f32le",
        "modality": proj.modality,
        "data": raw_name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    proj.data.astype("<f4").ravel(order="C").tofile(path.parent / raw_name)
    if pgm:
        pgm_name = path.name + ".pgm"
        lo, hi = write_pgm16(path.parent / pgm_name, proj.data)
        meta["pgm"] = {"file": pgm_name, "min": lo, "max": hi}
    with open(path.with_name(path.name + ".json"), "w") as f:
        json.dump(meta, f, indent=1)
    return path.with_name(path.name + ".json")


def load_projection(sidecar_path):
    from .projector import ProjectionImage

    meta = _read_json(sidecar_path)
    if meta.get("dtype") != "f32le":
        raise LoadError(f"unsupported dtype {meta.get('dtype')!r}")
    nu, nv = meta["dims"]
    data = _read_blob(sidecar_path, meta, nu * nv).reshape((nv, nu), order="C")
    return ProjectionImage(
        dims=(nu, nv),
        spacing=tuple(meta["spacing_mm"]),
        data=data,
        modality=meta.get("modality", "MR"),
    )


def write_pgm16(path, image):
    """16-bit binary PGM with linear min-max mapping; returns (min, max)."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((image - lo) / span * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode())
        f.write(scaled.tobytes())
    return lo, hi


# ---------------------------------------------------------------------------
# Weights container (shared by generator models and evaluation networks)
# ---------------------------------------------------------------------------

def save_weights(path, tensors):
    """Save named float32 arrays: <path>.json manifest + <path>.bin blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_name = path.name + ".bin"
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "blob": blob_name,
        "tensors": entries,
        "checksum": "sha256:" + hashlib.sha256(blob).hexdigest(),
    }
    with open(path.parent / blob_name, "wb") as f:
        f.write(blob)
    with open(path.with_name(path.name + ".json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return path.with_name(path.name + ".json")


def load_weights(manifest_path):
    """Load a weights container back into an ordered {name: float32 array}.

    Raises LoadError for structural problems and IntegrityError when the
    blob does not match its recorded checksum.
    """
    manifest = _read_json(manifest_path)
    blob_path = Path(manifest_path).parent / manifest["blob"]
    if not blob_path.exists():
        raise LoadError(f"weights blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    recorded = manifest.get("checksum", "")
    actual = "sha256:" + hashlib.sha256(blob).hexdigest()
    if recorded != actual:
        raise IntegrityError(f"{blob_path}: checksum mismatch ({recorded} != {actual})")
    tensors = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        n_values = int(np.prod(shape)) if shape else 1
        if entry["length"] != n_values * 4:
            raise LoadError(
                f"tensor {name!r}: declared shape {shape} needs {n_values * 4} bytes, "
                f"manifest records {entry['length']}"
            )
        start, end = entry["offset"], entry["offset"] + entry["length"]
        if end > len(blob):
            raise LoadError(f"tensor {name!r}: blob truncated")
        tensors[name] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
    return tensors
