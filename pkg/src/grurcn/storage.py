"""Binary tensor files, checkpoint containers, and dataset directories.

Tensor file layout (bit-exact round trip required):
  magic "GRCN" (4 bytes), format version u32=1, rank u32, one u32 per
  dimension, then the raw little-endian float64 payload in row-major order.
All integers are little-endian.

A checkpoint is a single file: one JSON manifest line (listing parameter
names in their documented order) followed by the concatenated tensor blobs
in that same order.

A dataset is a directory: ``manifest.json`` (generation spec, seed, split
sizes, class names, labels, per-clip ground truth) plus one tensor file per
clip named ``clip_<split>_<index>.grcn``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GRCN"
FORMAT_VERSION = 1
CHECKPOINT_FORMAT = "grcn-checkpoint"


class StorageError(ValueError):
    """Malformed or inconsistent on-disk data."""


def tensor_to_bytes(arr) -> bytes:
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    header = struct.pack("<4sII", MAGIC, FORMAT_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return header + dims + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor blob; returns (array, offset past the blob)."""
    if buf[offset:offset + 4] != MAGIC:
        raise StorageError("bad magic bytes; not a GRCN tensor")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise StorageError(f"unsupported format version {version}")
    pos = offset + 12
    dims = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = pos + 8 * count
    if end > len(buf):
        raise StorageError("truncated tensor payload")
    arr = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
    return arr, end


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    arr, end = tensor_from_bytes(Path(path).read_bytes())
    return arr


def save_checkpoint(path, named_params) -> None:
    """Write an ordered list of (name, tensor-like) pairs as one checkpoint file."""
    names = [name for name, _ in named_params]
    if len(set(names)) != len(names):
        raise StorageError("duplicate parameter names in checkpoint")
    manifest = {"format": CHECKPOINT_FORMAT, "version": FORMAT_VERSION, "names": names}
    blob = json.dumps(manifest, sort_keys=True).encode() + b"\n"
    for _, value in named_params:
        data = value.data if hasattr(value, "data") else value
        blob += tensor_to_bytes(data)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    nl = buf.index(b"\n")
    manifest = json.loads(buf[:nl].decode())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise StorageError("not a checkpoint file")
    offset = nl + 1
    out: dict[str, np.ndarray] = {}
    for name in manifest["names"]:
        arr, offset = tensor_from_bytes(buf, offset)
        out[name] = arr
    if offset != len(buf):
        raise StorageError("trailing bytes after last checkpoint tensor")
    return out


def _clip_filename(split: str, index: int) -> str:
    return f"clip_{split}_{index}.grcn"


def save_dataset(path, manifest: dict, splits: dict) -> None:
    """Write a dataset directory: manifest.json plus one clip file per clip.

    ``splits`` maps split name to a list of clips exposing ``.frames``.
    Labels and ground-truth metadata belong in the manifest.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for split, clips in splits.items():
        for i, clip in enumerate(clips):
            write_tensor(root / _clip_filename(split, i), clip.frames)


def load_dataset(path):
    """Read a dataset directory back as (manifest, {split: [(frames, label)]})."""
    root = Path(path)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    splits = {}
    for split, labels in manifest["labels"].items():
        clips = []
        for i, label in enumerate(labels):
            frames = read_tensor(root / _clip_filename(split, i))
            clips.append((frames, int(label)))
        splits[split] = clips
    return manifest, splits
