"""Artifact and raster I/O.

Artifacts are canonical JSON (sorted keys, fixed float formatting) so identical
inputs produce byte-identical files. Wall-clock data goes to a ``.meta.json``
sidecar that is never hashed.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import yaml
from PIL import Image as PILImage

SCHEMA_VERSION = 1


def tool_version() -> str:
    from . import __version__

    return __version__


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(repr(float(obj)))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_artifact(path, kind: str, payload: dict, inputs: dict | None = None) -> str:
    """Write a versioned artifact; returns its sha256."""
    doc = {
        "kind": kind,
        "schema_version": SCHEMA_VERSION,
        "tool_version": tool_version(),
        "inputs": inputs or {},
        "payload": payload,
    }
    text = canonical_json(doc)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    meta = {"created_unix": time.time(), "artifact_sha256": sha256_bytes(text.encode())}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return meta["artifact_sha256"]


def read_artifact(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"artifact not found: {path}")
    doc = json.loads(path.read_text())
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"{path} holds a {doc.get('kind')!r} artifact, expected {kind!r}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {doc.get('schema_version')}")
    return doc


def read_structured(path):
    """Load a YAML or JSON manifest/sidecar."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path) as fh:
        return yaml.safe_load(fh)


def to_uint8(x) -> np.ndarray:
    # np.rint rounds half to even
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, x, dpi=None) -> None:
    """8-bit RGB PNG, or JPEG for .jpg/.jpeg suffixes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im = PILImage.fromarray(to_uint8(x), mode="RGB")
    extra = {} if dpi is None else {"dpi": (dpi, dpi)}
    if path.suffix.lower() in (".jpg", ".jpeg"):
        im.save(path, quality=95, **extra)
    else:
        im.save(path, optimize=False, **extra)
