"""Array container: ``manifest.json`` plus one flat little-endian ``blob.bin``.

Used for model checkpoints and serialized graphs. Directories are written to
a temporary sibling and renamed into place, so readers never see a partial
artifact.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "blob.bin"
_ALIGN = 8


class ContainerError(ValueError):
    pass


def _le(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=1) + "\n"


def save_container(path, arrays: dict[str, np.ndarray], meta: dict, kind: str, version: int) -> Path:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(_le(arr.dtype), copy=False).tobytes(order="C")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": np.dtype(arr.dtype).name,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
        pad = (-offset) % _ALIGN
        if pad:
            chunks.append(b"\0" * pad)
            offset += pad
    blob = b"".join(chunks)
    manifest = {
        "kind": kind,
        "version": version,
        "byteorder": "little",
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "arrays": entries,
        "meta": meta,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / BLOB).write_bytes(blob)
        (tmp / MANIFEST).write_text(dumps_json(manifest), encoding="utf-8")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_container(path, kind: str, version: int) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise ContainerError(f"{path}: missing {Path(exc.filename).name}") from None
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {manifest.get('kind')!r}")
    if manifest.get("version") != version:
        raise ContainerError(
            f"{path}: {kind} format version {manifest.get('version')} is not supported "
            f"(this build reads version {version})"
        )
    if manifest.get("blob_bytes") != len(blob):
        raise ContainerError(
            f"{path}: blob length {len(blob)} does not match manifest ({manifest.get('blob_bytes')})"
        )
    if manifest.get("blob_sha256") not in (None, hashlib.sha256(blob).hexdigest()):
        raise ContainerError(f"{path}: blob checksum mismatch")
    arrays = {}
    for e in manifest["arrays"]:
        dt = _le(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] < 0 or e["offset"] + e["nbytes"] > len(blob) or count * dt.itemsize != e["nbytes"]:
            raise ContainerError(f"{path}: array {e['name']!r} lies outside the blob or has a bad length")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])
    return arrays, manifest.get("meta", {})


def digest(path) -> str:
    """sha256 over the container (manifest + blob) or a plain file."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path / MANIFEST, path / BLOB] if path.is_dir() else [path]
    for f in files:
        h.update(f.read_bytes())
    return h.hexdigest()
