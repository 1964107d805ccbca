"""On-disk formats for checkpoints and mask sets.

Both files share one layout: a magic line, a 10-digit header-length line, a
JSON header, then a binary blob. Checkpoint blobs are little-endian float32
tensors at header-declared offsets; mask blobs are bit-packed (one bit per
mask entry, packed per layer). Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .models import Checkpoint, MaskSet, NetworkSpec, param_defs

CHECKPOINT_MAGIC = b"NETCKPT1\n"
MASK_MAGIC = b"NETMASK1\n"
FORMAT_VERSION = 1


class FileFormatError(Exception):
    """Base for checkpoint/mask file errors."""


class CorruptHeaderError(FileFormatError):
    """Magic bytes or header structure are invalid."""


class ShapeMismatchError(FileFormatError):
    """A stored tensor's shape disagrees with the spec in the header."""


class TruncatedBlobError(FileFormatError):
    """The binary blob is shorter than the header claims."""


def _write_record(path, magic: bytes, header: dict, blob: bytes):
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(b"%010d\n" % len(header_bytes))
        f.write(header_bytes)
        f.write(b"\n")
        f.write(blob)


def _read_record(path, magic: bytes):
    raw = Path(path).read_bytes()
    if raw[: len(magic)] != magic:
        raise CorruptHeaderError(f"{path}: bad magic bytes (expected {magic!r})")
    pos = len(magic)
    line_end = raw.find(b"\n", pos)
    if line_end < 0:
        raise CorruptHeaderError(f"{path}: missing header-length line")
    try:
        header_len = int(raw[pos:line_end])
    except ValueError as exc:
        raise CorruptHeaderError(f"{path}: unparsable header length") from exc
    header_start = line_end + 1
    header_bytes = raw[header_start : header_start + header_len]
    if len(header_bytes) != header_len:
        raise CorruptHeaderError(f"{path}: header shorter than declared")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{path}: header is not valid JSON") from exc
    blob = raw[header_start + header_len + 1 :]
    return header, blob


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.weights):
        arr = np.ascontiguousarray(ckpt.weights[name], dtype="<f4")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "metadata": ckpt.metadata,
        "tensors": tensors,
    }
    _write_record(path, CHECKPOINT_MAGIC, header, b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    header, blob = _read_record(path, CHECKPOINT_MAGIC)
    for key in ("format_version", "spec", "metadata", "tensors"):
        if key not in header:
            raise CorruptHeaderError(f"{path}: header missing {key!r}")
    spec = NetworkSpec.from_dict(header["spec"])
    expected = {name: tuple(shape) for name, shape, _, _ in param_defs(spec)}
    weights = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise ShapeMismatchError(f"{path}: tensor {name!r} not part of spec {spec.spec_id!r}")
        if shape != expected[name]:
            raise ShapeMismatchError(f"{path}: tensor {name!r} has shape {shape}, spec wants {expected[name]}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise TruncatedBlobError(f"{path}: blob ends at {len(blob)} but {name!r} needs {end} bytes")
        arr = np.frombuffer(blob[entry["offset"] : end], dtype="<f4").reshape(shape)
        weights[name] = np.ascontiguousarray(arr, dtype=np.float32)
    missing = set(expected) - set(weights)
    if missing:
        raise ShapeMismatchError(f"{path}: missing tensors {sorted(missing)}")
    return Checkpoint(spec=spec, weights=weights, metadata=header["metadata"])


def save_masks(masks: MaskSet, path, metadata: dict | None = None) -> None:
    layers = []
    chunks = []
    offset = 0
    for name in sorted(masks.masks):
        arr = masks.masks[name]
        packed = np.packbits(arr.reshape(-1).astype(np.uint8)).tobytes()
        layers.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbits": int(arr.size), "nbytes": len(packed)}
        )
        chunks.append(packed)
        offset += len(packed)
    header = {"format_version": FORMAT_VERSION, "layers": layers, "metadata": metadata or {}}
    _write_record(path, MASK_MAGIC, header, b"".join(chunks))


def load_masks(path) -> tuple[MaskSet, dict]:
    header, blob = _read_record(path, MASK_MAGIC)
    if "layers" not in header:
        raise CorruptHeaderError(f"{path}: header missing 'layers'")
    out = {}
    for entry in header["layers"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise TruncatedBlobError(f"{path}: blob ends at {len(blob)} but {entry['name']!r} needs {end} bytes")
        packed = np.frombuffer(blob[entry["offset"] : end], dtype=np.uint8)
        bits = np.unpackbits(packed, count=entry["nbits"]).astype(np.float32)
        out[entry["name"]] = bits.reshape(entry["shape"])
    return MaskSet(out), header.get("metadata", {})
