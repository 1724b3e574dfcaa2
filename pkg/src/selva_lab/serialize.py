"""Binary tensor format, checkpoints and manifest helpers.

Tensor layout: ``b"SLVT"``, u32 version, u32 rank, rank x u64 dims, then the
values as little-endian float64.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"SLVT"
VERSION = 1


def tensor_to_bytes(array) -> bytes:
    array = np.asarray(getattr(array, "data", array), dtype="<f8")
    header = MAGIC + struct.pack("<II", VERSION, array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise InputError("not a SLVT tensor (bad magic)")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise InputError(f"unsupported SLVT version {version}")
    dims = struct.unpack_from(f"<{rank}Q", blob, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(blob) - offset != 8 * count:
        raise InputError("SLVT payload length does not match header")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)


def save_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def build_id() -> str:
    """Content hash of the package sources, stable across machines."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def save_checkpoint(directory, params: dict, trainable: dict, stage: int, extra: dict | None = None) -> Path:
    """Write ``params`` (name -> array) as one SLVT file each plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        arr = np.asarray(getattr(params[name], "data", params[name]))
        fname = f"{name}.slvt"
        save_tensor(directory / "params" / fname, arr)
        entries.append({"name": name, "shape": list(arr.shape), "trainable": bool(trainable.get(name, False)),
                        "stage": stage, "file": f"params/{fname}"})
    manifest = {"stage": stage, "parameters": entries}
    if extra:
        manifest.update(extra)
    write_json(directory / "manifest.json", manifest)
    return directory


def load_checkpoint(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    params = {e["name"]: load_tensor(directory / e["file"]) for e in manifest["parameters"]}
    return params, manifest


def checkpoint_digest(directory) -> str:
    directory = Path(directory)
    h = hashlib.sha256()
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(directory)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def ensure_writable(directory) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc
    if not os.access(directory, os.W_OK):
        raise OSError(f"output directory {directory} is not writable")
    return directory


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row) + "\n")
    return buf.getvalue()
