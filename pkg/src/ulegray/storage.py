"""On-disk layouts for banks, checkpoints, run records and the synthetic dataset.

Tensor file (``*.bin``), all integers little-endian::

    offset  size       field
    0       4          magic b"ULET"
    4       2          uint16 format version (1)
    6       1          uint8 dtype code (0 = float32, 1 = int64)
    7       1          uint8 rank r
    8       8*r        uint64 dims
    8+8r    ...        C-order payload, little-endian

With ``compress=True`` the whole file above is zlib-compressed and stored
under ``*.bin.z``.  Content hashes are SHA-256 over the uncompressed bytes.

Synthetic dataset tensors use a simpler fixed layout: a 16-byte header of four
little-endian uint32 dims followed by the little-endian payload.

Every artifact directory carries ``manifest.json`` (kind, schema_version,
content_hash, creation metadata).  Writes go to a temp file and are published
with ``os.replace``.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import io
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .errors import IntegrityError, InvariantError, MissingArtifactError, SchemaVersionError

TENSOR_MAGIC = b"ULET"
TENSOR_VERSION = 1
SCHEMA_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1}


@dataclasses.dataclass
class ArtifactManifest:
    kind: str  # bank | checkpoint | run_record
    content_hash: str
    schema_version: int = SCHEMA_VERSION
    created: dict = dataclasses.field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], content_hash=d["content_hash"],
                   schema_version=d["schema_version"], created=d.get("created", {}))


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = np.dtype(array.dtype.name)
    if dtype not in _CODES:
        raise TypeError(f"unsupported tensor dtype {array.dtype}")
    code = _CODES[dtype]
    header = TENSOR_MAGIC + struct.pack("<HBB", TENSOR_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 8 or data[:4] != TENSOR_MAGIC:
        raise IntegrityError(f"{source}: bad tensor magic")
    version, code, rank = struct.unpack_from("<HBB", data, 4)
    if version != TENSOR_VERSION:
        raise SchemaVersionError(f"{source}: tensor format version {version} not supported")
    if code not in _DTYPES:
        raise IntegrityError(f"{source}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", data, 8)
    offset = 8 + 8 * rank
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise IntegrityError(f"{source}: payload is {len(data) - offset} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype=dtype, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, array: np.ndarray, compress: bool = False) -> str:
    """Write ``array`` and return the content hash of the uncompressed encoding."""
    raw = encode_tensor(array)
    atomic_write(path, zlib.compress(raw, 6) if compress else raw)
    return sha256(raw)


def read_tensor(path, compressed: bool = False, expected_hash: str | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing tensor file: {path}")
    data = path.read_bytes()
    if compressed:
        try:
            data = zlib.decompress(data)
        except zlib.error as exc:
            raise IntegrityError(f"{path}: {exc}") from None
    if expected_hash is not None and sha256(data) != expected_hash:
        raise IntegrityError(f"{path}: content hash mismatch")
    return decode_tensor(data, str(path))


def write_raw16(path, array: np.ndarray) -> str:
    """Rank-4 tensor with a 16-byte (4 x uint32) shape header."""
    array = np.asarray(array)
    if array.ndim != 4:
        raise ValueError("raw16 tensors are rank 4")
    dtype = "<f4" if array.dtype.kind == "f" else "<i4"
    raw = struct.pack("<4I", *array.shape) + np.ascontiguousarray(array, dtype=dtype).tobytes()
    atomic_write(path, raw)
    return sha256(raw)


def read_raw16(path, dtype="<f4") -> tuple[np.ndarray, str]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16:
        raise IntegrityError(f"{path}: truncated header")
    dims = struct.unpack_from("<4I", data, 0)
    n = int(np.prod(dims, dtype=np.int64)) * np.dtype(dtype).itemsize
    if len(data) - 16 != n:
        raise IntegrityError(f"{path}: payload size {len(data) - 16} does not match shape {dims}")
    arr = np.frombuffer(data, dtype=dtype, offset=16).reshape(dims)
    return arr.astype(np.dtype(dtype).newbyteorder("="), copy=True), sha256(data)


def _creation_meta(extra: dict | None = None) -> dict:
    meta = {"code_version": __version__,
            "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    if extra:
        meta.update(extra)
    return meta


def _read_manifest(directory: Path, kind: str) -> dict:
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise MissingArtifactError(f"missing {kind} manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("kind") != kind:
        raise IntegrityError(f"{mpath}: expected kind {kind!r}, found {manifest.get('kind')!r}")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{mpath}: schema_version {manifest.get('schema_version')} not supported (expected {SCHEMA_VERSION})")
    return manifest


# ---------------------------------------------------------------- banks

def save_bank(path, bank, compress: bool = False) -> str:
    """Write a PerturbationBank to directory ``path``; returns its content hash."""
    path = Path(path)
    order = np.argsort(bank.sample_ids, kind="stable")
    fname = "delta.bin.z" if compress else "delta.bin"
    content_hash = write_tensor(path / fname, bank.delta[order].astype(np.float32), compress=compress)
    meta = {
        "epsilon": bank.epsilon,
        "variant": bank.variant,
        "gray_constrained": bank.gray_constrained,
        "sample_ids": [int(i) for i in bank.sample_ids[order]],
        "tensor_file": fname,
        "compressed": compress,
        "crafting_meta": bank.crafting_meta,
    }
    manifest = ArtifactManifest("bank", content_hash,
                                created=_creation_meta({"seed": bank.crafting_meta.get("spec", {}).get("seed")}))
    atomic_write_text(path / "bank.json", json.dumps(meta, indent=1, default=_json_default))
    atomic_write_text(path / "manifest.json", json.dumps(manifest.to_dict(), indent=1, default=_json_default))
    return content_hash


def load_bank(path):
    from .crafting import PerturbationBank

    path = Path(path)
    manifest = _read_manifest(path, "bank")
    meta_path = path / "bank.json"
    if not meta_path.exists():
        raise MissingArtifactError(f"missing bank metadata: {meta_path}")
    meta = json.loads(meta_path.read_text())
    delta = read_tensor(path / meta["tensor_file"], compressed=meta["compressed"],
                        expected_hash=manifest["content_hash"])
    bank = PerturbationBank(
        sample_ids=np.asarray(meta["sample_ids"], dtype=np.int64),
        delta=delta,
        epsilon=float(meta["epsilon"]),
        gray_constrained=bool(meta["gray_constrained"]),
        variant=meta["variant"],
        crafting_meta=meta["crafting_meta"],
    )
    bank.validate()  # budget + gray closure re-check
    return bank


def bank_hash(bank) -> str:
    order = np.argsort(bank.sample_ids, kind="stable")
    return sha256(encode_tensor(bank.delta[order].astype(np.float32)))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, epoch: int | None = None, metrics: dict | None = None,
                    extra: dict | None = None) -> str:
    """Parameter blob = concatenated tensor files, one per state_dict entry, in ``names`` order."""
    path = Path(path)
    state = model.state_dict()
    names, blob = [], io.BytesIO()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype.kind == "f":
            arr = arr.astype(np.float32)
        else:
            arr = arr.astype(np.int64)
        enc = encode_tensor(arr)
        names.append({"name": name, "nbytes": len(enc)})
        blob.write(enc)
    raw = blob.getvalue()
    content_hash = sha256(raw)
    atomic_write(path / "params.bin", raw)
    meta = {
        "arch": model.spec.arch,
        "model_spec": model.spec.to_dict(),
        "input_filters": [list(f) for f in model.input_filters],
        "epoch": epoch,
        "metrics": metrics or {},
        "tensors": names,
        "extra": extra or {},
    }
    atomic_write_text(path / "checkpoint.json", json.dumps(meta, indent=1, default=_json_default))
    manifest = ArtifactManifest("checkpoint", content_hash, created=_creation_meta())
    atomic_write_text(path / "manifest.json", json.dumps(manifest.to_dict(), indent=1))
    return content_hash


def load_checkpoint(path):
    """Returns ``(classifier, metadata)``."""
    import torch

    from .models import ModelSpec, build

    path = Path(path)
    manifest = _read_manifest(path, "checkpoint")
    meta_path, blob_path = path / "checkpoint.json", path / "params.bin"
    for p in (meta_path, blob_path):
        if not p.exists():
            raise MissingArtifactError(f"missing checkpoint file: {p}")
    meta = json.loads(meta_path.read_text())
    raw = blob_path.read_bytes()
    if sha256(raw) != manifest["content_hash"]:
        raise IntegrityError(f"{blob_path}: content hash mismatch")
    model = build(ModelSpec.from_dict(meta["model_spec"]),
                  input_filters=[tuple(f) for f in meta.get("input_filters", [])])
    state, offset = {}, 0
    for entry in meta["tensors"]:
        arr = decode_tensor(raw[offset:offset + entry["nbytes"]], f"{blob_path}:{entry['name']}")
        offset += entry["nbytes"]
        state[entry["name"]] = torch.from_numpy(arr)
    current = model.state_dict()
    for name, value in state.items():
        state[name] = value.to(current[name].dtype)
    model.load_state_dict(state)
    return model, meta


# ---------------------------------------------------------------- run records

def save_record(path, record) -> str:
    """``record.json`` (full record) + ``epochs.csv`` (per-epoch curves)."""
    path = Path(path)
    body = record.to_dict()
    text = json.dumps(body, indent=1, sort_keys=True, default=_json_default)
    content_hash = sha256(text.encode("utf-8"))
    atomic_write_text(path / "record.json", text)
    atomic_write_text(path / "epochs.csv", record.epochs_csv())
    manifest = ArtifactManifest("run_record", content_hash,
                                created=_creation_meta({"seed": record.seed}))
    atomic_write_text(path / "manifest.json", json.dumps(manifest.to_dict(), indent=1))
    return content_hash


def load_record(path):
    from .exploiter import RunRecord

    path = Path(path)
    manifest = _read_manifest(path, "run_record")
    rpath = path / "record.json"
    if not rpath.exists():
        raise MissingArtifactError(f"missing run record: {rpath}")
    data = rpath.read_bytes()
    if sha256(data) != manifest["content_hash"]:
        raise IntegrityError(f"{rpath}: content hash mismatch")
    record = RunRecord.from_dict(json.loads(data))
    if len(record.test_acc) != record.epochs_run:
        raise InvariantError(f"{rpath}: per-epoch arrays do not match epochs_run")
    return record


def _json_default(obj: Any):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if dataclasses.is_dataclass(obj):
        from ._serde import to_dict
        return to_dict(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
