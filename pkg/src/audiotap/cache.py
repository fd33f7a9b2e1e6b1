"""On-disk cache of representation stacks, one binary record per utterance.

Record layout (all integers little-endian)::

    magic "WATC" | u32 format_version | u32 id_len | id (UTF-8)
    | u32 L | u32 n | u32 d | u8 dtype_tag | L*n*d values row-major

Row-major means (layer, frame, dim) order. ``dtype_tag`` is 0 for float16
and 1 for float32. Records are written atomically (temp file + rename), so
many readers can coexist with one writer per record, and concurrent writes
to distinct utterance ids are safe.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CacheFormatError, InvalidInputError, RecordNotFoundError
from .stack import DTYPE_TAGS, RepresentationStack

CACHE_MAGIC = b"WATC"
CACHE_FORMAT_VERSION = 1

_TAG_CODES = {"f16": 0, "f32": 1}
_CODE_TAGS = {v: k for k, v in _TAG_CODES.items()}
_TAG_DTYPES = {"f16": np.dtype("<f2"), "f32": np.dtype("<f4")}


def _record_name(utterance_id: str) -> str:
    return hashlib.sha256(utterance_id.encode("utf-8")).hexdigest()[:40] + ".watc"


class RepresentationCache:
    """Directory-backed store of :class:`RepresentationStack` records.

    Args:
        root: cache directory, created on first write.
        dtype: storage precision for new records, ``"f16"`` (default) or
            ``"f32"``. Half precision halves disk use; reads return the
            stored values bit-exactly.
    """

    def __init__(self, root: str | Path, dtype: str = "f16"):
        if dtype not in DTYPE_TAGS:
            raise InvalidInputError(f"unknown cache dtype {dtype!r}")
        self.root = Path(root)
        self.dtype = dtype

    def path_for(self, utterance_id: str) -> Path:
        return self.root / _record_name(utterance_id)

    def __contains__(self, utterance_id: str) -> bool:
        return self.path_for(utterance_id).exists()

    def write(self, stack: RepresentationStack, dtype: str | None = None) -> str:
        """Store ``stack`` (converted to the cache dtype); returns the id."""
        dtype = dtype or self.dtype
        stored = stack if stack.dtype_tag == dtype else stack.astype(dtype)
        values = np.ascontiguousarray(stored.values, dtype=_TAG_DTYPES[dtype])
        id_bytes = stack.utterance_id.encode("utf-8")
        L, n, d = values.shape

        self.root.mkdir(parents=True, exist_ok=True)
        final = self.path_for(stack.utterance_id)
        tmp = final.with_suffix(f".tmp{os.getpid()}")
        with open(tmp, "wb") as f:
            f.write(CACHE_MAGIC)
            f.write(struct.pack("<II", CACHE_FORMAT_VERSION, len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<IIIB", L, n, d, _TAG_CODES[dtype]))
            f.write(values.tobytes())
        os.replace(tmp, final)
        return stack.utterance_id

    def read(self, utterance_id: str, frame_rate: float | None = None) -> RepresentationStack:
        """Load one record; raises :class:`RecordNotFoundError` if absent.

        ``frame_rate`` is not stored in the record; pass the producing
        backbone's rate when downstream code needs real-time alignment
        (defaults to 1.0 otherwise).
        """
        path = self.path_for(utterance_id)
        if not path.exists():
            raise RecordNotFoundError(
                f"no cache record for utterance {utterance_id!r} in {self.root}")
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CACHE_MAGIC:
                raise CacheFormatError(f"{path}: bad magic {magic!r}")
            version, id_len = struct.unpack("<II", f.read(8))
            if version != CACHE_FORMAT_VERSION:
                raise CacheFormatError(
                    f"{path}: format version {version} not supported "
                    f"(expected {CACHE_FORMAT_VERSION})")
            stored_id = f.read(id_len).decode("utf-8")
            if stored_id != utterance_id:
                raise RecordNotFoundError(
                    f"{path}: record holds {stored_id!r}, not {utterance_id!r}")
            L, n, d, tag_code = struct.unpack("<IIIB", f.read(13))
            if tag_code not in _CODE_TAGS:
                raise CacheFormatError(f"{path}: unknown dtype tag {tag_code}")
            tag = _CODE_TAGS[tag_code]
            np_dtype = _TAG_DTYPES[tag]
            raw = f.read(L * n * d * np_dtype.itemsize)
            if len(raw) != L * n * d * np_dtype.itemsize:
                raise CacheFormatError(f"{path}: truncated payload")
            values = np.frombuffer(raw, dtype=np_dtype).reshape(L, n, d)
        return RepresentationStack(
            values=values.astype(DTYPE_TAGS[tag]),
            utterance_id=stored_id,
            frame_rate=frame_rate if frame_rate is not None else 1.0,
            dtype_tag=tag,
        )

    def ids(self) -> list[str]:
        """Utterance ids of every record in the cache (reads headers)."""
        found = []
        if not self.root.exists():
            return found
        for path in sorted(self.root.glob("*.watc")):
            with open(path, "rb") as f:
                if f.read(4) != CACHE_MAGIC:
                    continue
                _, id_len = struct.unpack("<II", f.read(8))
                found.append(f.read(id_len).decode("utf-8"))
        return found


def cache_write(stack: RepresentationStack, store: RepresentationCache) -> str:
    """Write one stack to the store; returns the record id."""
    return store.write(stack)


def cache_read(store: RepresentationCache, utterance_id: str) -> RepresentationStack:
    """Read one stack back from the store."""
    return store.read(utterance_id)
