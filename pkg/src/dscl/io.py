"""File formats: DST1 tensor blobs, dataset manifests, checkpoint containers.

DST1 layout (all integers little-endian):
    bytes 0-3   magic "DST1"
    byte  4     dtype code (1=float32, 2=float64, 3=uint16)
    byte  5     rank r
    bytes 6-7   zero padding
    next r*8    extents as u64
    rest        row-major payload

A checkpoint container is a sequence of (u32 name length, UTF-8 name, DST1
blob) records; a zero name length terminates the sequence and the remaining
bytes are a UTF-8 metadata block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"DST1"

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u2")}
_CODE_FOR_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint16): 3}


class FormatError(ValueError):
    """Malformed file; carries the byte offset of the first bad field."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dtype = np.dtype(arr.dtype)
    if dtype not in _CODE_FOR_KIND:
        raise ValueError(f"dtype {dtype} is not serializable (float32/float64/uint16 only)")
    if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
        raise ValueError(f"extents must be positive, got shape {arr.shape}")
    header = MAGIC + struct.pack("<BBH", _CODE_FOR_KIND[dtype], arr.ndim, 0)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(dtype.newbyteorder("<"), copy=False).tobytes()
    return header + extents + payload


def tensor_from_bytes(buf: bytes, base_offset: int = 0):
    """Parse one DST1 blob; returns (ndarray, bytes consumed)."""
    if len(buf) < 8:
        raise FormatError("truncated header", base_offset + len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", base_offset)
    code, rank, pad = struct.unpack("<BBH", buf[4:8])
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", base_offset + 4)
    if pad != 0:
        raise FormatError("padding bytes must be zero", base_offset + 6)
    dtype = _DTYPE_CODES[code]
    need = 8 + 8 * rank
    if len(buf) < need:
        raise FormatError("truncated extent list", base_offset + len(buf))
    extents = struct.unpack(f"<{rank}Q", buf[8:need])
    if any(d == 0 for d in extents):
        raise FormatError("zero extent", base_offset + 8)
    count = int(np.prod(extents, dtype=np.uint64)) if rank else 1
    payload_len = count * dtype.itemsize
    if len(buf) < need + payload_len:
        raise FormatError("truncated payload", base_offset + len(buf))
    arr = np.frombuffer(buf[need : need + payload_len], dtype=dtype).reshape(extents)
    return arr.astype(arr.dtype.newbyteorder("=")), need + payload_len


def write_tensor(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tensor(path) -> Tensor:
    arr, consumed = tensor_from_bytes(Path(path).read_bytes())
    return Tensor(arr)


# -- dataset manifest ---------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: str
    class_ids: tuple
    mask_path: str | None = None

    def to_line(self) -> str:
        ids = ";".join(str(c) for c in self.class_ids)
        line = f"{self.image_id},{self.image_path},{ids}"
        if self.mask_path is not None:
            line += f",{self.mask_path}"
        return line


@dataclass
class DatasetManifest:
    """Index of a generated corpus; paths are relative to its directory."""

    entries: list
    num_classes: int
    seed: int = 0
    directory: Path = Path(".")

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest image ids must be unique")
        if self.num_classes < 2:
            raise ValueError("manifest needs at least 2 classes (background + 1)")

    def resolve(self, relative) -> Path:
        return Path(self.directory) / relative

    def to_text(self) -> str:
        return "".join(e.to_line() + "\n" for e in self.entries)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def parse_manifest_line(line: str) -> ManifestEntry:
    parts = line.rstrip("\n").split(",")
    if len(parts) not in (3, 4):
        raise ValueError(f"manifest line needs 3 or 4 comma fields, got {len(parts)}: {line!r}")
    image_id, image_path, ids_field = parts[0], parts[1], parts[2]
    if not image_id or not image_path:
        raise ValueError(f"empty id or path in manifest line {line!r}")
    class_ids = tuple(int(tok) for tok in ids_field.split(";") if tok != "")
    if not class_ids:
        raise ValueError(f"manifest line has no class ids: {line!r}")
    mask_path = parts[3] if len(parts) == 4 else None
    return ManifestEntry(image_id, image_path, class_ids, mask_path)


def read_manifest(path, num_classes=None) -> DatasetManifest:
    path = Path(path)
    entries = [
        parse_manifest_line(line)
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if num_classes is None:
        num_classes = max(max(e.class_ids) for e in entries) + 1
    return DatasetManifest(entries, num_classes, directory=path.parent)


# -- checkpoint container -----------------------------------------------------


def write_container(path, named_tensors, metadata: str) -> None:
    chunks = []
    for name, t in named_tensors:
        encoded = name.encode("utf-8")
        if not encoded:
            raise ValueError("container tensor names must be non-empty")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(tensor_to_bytes(t))
    chunks.append(struct.pack("<I", 0))
    chunks.append(metadata.encode("utf-8"))
    Path(path).write_bytes(b"".join(chunks))


def read_container(path):
    """Returns (list of (name, ndarray), metadata string)."""
    buf = Path(path).read_bytes()
    tensors = []
    pos = 0
    while True:
        if len(buf) - pos < 4:
            raise FormatError("truncated record header", pos)
        (name_len,) = struct.unpack("<I", buf[pos : pos + 4])
        pos += 4
        if name_len == 0:
            break
        if len(buf) - pos < name_len:
            raise FormatError("truncated record name", pos)
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        arr, consumed = tensor_from_bytes(buf[pos:], base_offset=pos)
        tensors.append((name, arr))
        pos += consumed
    metadata = buf[pos:].decode("utf-8")
    return tensors, metadata
