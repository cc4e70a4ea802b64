"""Single-file binary artifact container and run manifests.

Checkpoints, corpora and generators all share one on-disk layout: a JSON
header describing the payload followed by raw little-endian tensor blobs
concatenated in header order.  The byte stream is deterministic for equal
inputs, so content hashes of artifact files are stable across runs.

Layout::

    b"PGAF"  magic
    uint32   header length (little-endian)
    header   UTF-8 JSON: {"kind", "meta", "tensors": [{name, shape, dtype}]}
    blobs    raw tensor bytes in header order
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from .errors import ShapeError

MAGIC = b"PGAF"

_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1"}


def _dtype_tag(arr: np.ndarray) -> str:
    tag = arr.dtype.newbyteorder("<").str if arr.dtype.itemsize > 1 else arr.dtype.str
    if tag not in _DTYPES:
        raise ShapeError(f"unsupported artifact dtype {arr.dtype}")
    return tag


def dumps_header(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_artifact(path, kind: str, meta: dict, tensors: dict) -> None:
    """Write an artifact file. ``tensors`` maps name -> ndarray."""
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag})
        blobs.append(arr.astype(tag, copy=False).tobytes())
    header = dumps_header({"kind": kind, "meta": meta, "tensors": entries})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(header)).tobytes())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_artifact(path):
    """Read an artifact file. Returns (kind, meta, tensors)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ShapeError(f"{path}: not an artifact file (bad magic {magic!r})")
        (hlen,) = np.frombuffer(fh.read(4), dtype="<u4")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ShapeError(f"{path}: truncated blob for {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header["kind"], header["meta"], tensors


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest(obj) -> str:
    """Stable hash of a JSON-serializable object."""
    return hashlib.sha256(dumps_header(obj)).hexdigest()


def array_sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def write_run_manifest(directory, command: str, config: dict, inputs: dict,
                       outputs: dict, seeds: dict) -> Path:
    """Record one CLI run. Returns the manifest path (named by content hash)."""
    body = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seeds": seeds,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "format_version": 1,
    }
    tag = digest({k: body[k] for k in ("command", "config", "inputs", "outputs", "seeds")})[:16]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{command}-{tag}.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True))
    return path
