"""Per-item continuous embeddings: loading, writing, and a deterministic stub.

Two on-disk forms are supported and selected by file extension:

* text (any extension except ``.bin``): UTF-8, whitespace separated, '.'
  decimal point. First line is ``count dim``, then one ``item_id v1 .. vdim``
  line per item. Values are written with ``repr`` so float64 round-trips
  bit-exactly.
* binary (``.bin``): magic ``EMBB``, version byte, little-endian u64 count and
  u32 dim, then per item a u16 length-prefixed UTF-8 id followed by ``dim``
  little-endian float32 values. Vectors round-trip bit-exactly once their
  values are float32-representable (e.g. after one write/load cycle).

The stub embedder hashes overlapping character 3-grams into ``dim`` signed
buckets and L2-normalizes, so items with more shared text get higher cosine
similarity in expectation. It replaces a real text encoder for desk-scale
experiments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from hashlib import blake2b
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

_BIN_MAGIC = b"EMBB"
_BIN_VERSION = 1


@dataclass(frozen=True)
class ItemEmbedding:
    item_id: str
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vector",
                           np.asarray(self.vector, dtype=np.float64))
        if not np.all(np.isfinite(self.vector)):
            raise DataError(f"non-finite embedding for item {self.item_id!r}")


@dataclass
class EmbeddingCatalog:
    """An ordered, immutable-after-construction collection of item embeddings."""

    entries: list[ItemEmbedding]
    dim: int
    _by_id: dict[str, ItemEmbedding] = field(init=False, repr=False)

    def __post_init__(self):
        by_id: dict[str, ItemEmbedding] = {}
        for e in self.entries:
            if e.vector.shape != (self.dim,):
                raise DataError(
                    f"item {e.item_id!r} has dimension {e.vector.shape[0]}, "
                    f"expected {self.dim}")
            if e.item_id in by_id:
                raise DataError(f"duplicate item_id {e.item_id!r}")
            by_id[e.item_id] = e
        self._by_id = by_id

    def __len__(self):
        return len(self.entries)

    def __contains__(self, item_id: str):
        return item_id in self._by_id

    def item_ids(self) -> list[str]:
        return [e.item_id for e in self.entries]

    def vector(self, item_id: str) -> np.ndarray:
        try:
            return self._by_id[item_id].vector
        except KeyError:
            raise DataError(f"unknown item_id {item_id!r}") from None

    def matrix(self) -> np.ndarray:
        """All vectors stacked in entry order, shape (n_items, dim)."""
        return np.stack([e.vector for e in self.entries])


def _is_binary(path: str | Path) -> bool:
    return Path(path).suffix == ".bin"


def peek_dim(path: str | Path) -> int:
    """Read just the header dimension of an embedding file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    if _is_binary(path):
        with open(path, "rb") as fh:
            if fh.read(4) != _BIN_MAGIC:
                raise DataError(f"{path}: bad magic")
            fh.read(1)
            _, dim = struct.unpack("<QI", fh.read(12))
            return dim
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
    if len(header) != 2:
        raise DataError(f"{path}: malformed header, expected 'count dim'")
    return int(header[1])


def load_embeddings(path: str | Path, expected_dim: int) -> EmbeddingCatalog:
    """Load a catalog, validating dimension, uniqueness, and finiteness.

    Errors name the offending 1-based data row.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    if expected_dim <= 0:
        raise ConfigError(f"expected_dim must be positive, got {expected_dim}")
    if _is_binary(path):
        entries = _load_binary(path, expected_dim)
    else:
        entries = _load_text(path, expected_dim)
    return EmbeddingCatalog(entries, expected_dim)


def _check_row(item_id: str, vec: np.ndarray, expected_dim: int, row: int,
               seen: set) -> None:
    if vec.shape[0] != expected_dim:
        raise DataError(
            f"row {row}: item {item_id!r} has dimension {vec.shape[0]}, "
            f"expected {expected_dim}")
    if not np.all(np.isfinite(vec)):
        raise DataError(f"row {row}: non-finite value for item {item_id!r}")
    if item_id in seen:
        raise DataError(f"row {row}: duplicate item_id {item_id!r}")
    seen.add(item_id)


def _load_text(path: Path, expected_dim: int) -> list[ItemEmbedding]:
    entries = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}: malformed header, expected 'count dim'")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise DataError(f"{path}: malformed header {header!r}") from None
        if dim != expected_dim:
            raise DataError(
                f"{path}: file dimension {dim} does not match expected "
                f"{expected_dim}")
        for row, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            item_id = fields[0]
            try:
                vec = np.array([float(v) for v in fields[1:]])
            except ValueError:
                raise DataError(f"row {row}: malformed numeric field") from None
            _check_row(item_id, vec, expected_dim, row, seen)
            entries.append(ItemEmbedding(item_id, vec))
    if len(entries) != count:
        raise DataError(
            f"{path}: header count {count} does not match {len(entries)} rows")
    return entries


def _load_binary(path: Path, expected_dim: int) -> list[ItemEmbedding]:
    entries = []
    seen: set[str] = set()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BIN_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        version = fh.read(1)[0]
        if version != _BIN_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        count, dim = struct.unpack("<QI", fh.read(12))
        if dim != expected_dim:
            raise DataError(
                f"{path}: file dimension {dim} does not match expected "
                f"{expected_dim}")
        for row in range(1, count + 1):
            raw_len = fh.read(2)
            if len(raw_len) < 2:
                raise DataError(f"row {row}: truncated record")
            (id_len,) = struct.unpack("<H", raw_len)
            item_id = fh.read(id_len).decode("utf-8")
            raw = fh.read(4 * dim)
            if len(raw) < 4 * dim:
                raise DataError(f"row {row}: truncated vector")
            vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            _check_row(item_id, vec, expected_dim, row, seen)
            entries.append(ItemEmbedding(item_id, vec))
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after {count} records")
    return entries


def write_embeddings(catalog: EmbeddingCatalog, path: str | Path) -> None:
    path = Path(path)
    if _is_binary(path):
        with open(path, "wb") as fh:
            fh.write(_BIN_MAGIC)
            fh.write(bytes([_BIN_VERSION]))
            fh.write(struct.pack("<QI", len(catalog), catalog.dim))
            for e in catalog.entries:
                raw_id = e.item_id.encode("utf-8")
                fh.write(struct.pack("<H", len(raw_id)))
                fh.write(raw_id)
                fh.write(e.vector.astype("<f4").tobytes())
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(catalog)} {catalog.dim}\n")
            for e in catalog.entries:
                if any(c.isspace() for c in e.item_id):
                    raise DataError(
                        f"item_id {e.item_id!r} contains whitespace, not "
                        f"representable in the text format")
                vals = " ".join(repr(float(v)) for v in e.vector)
                fh.write(f"{e.item_id} {vals}\n")


def stub_embed(item_id: str, text: str, dim: int, seed: int) -> ItemEmbedding:
    """Deterministic text embedding via hashed character 3-grams.

    Pure function of (text, dim, seed); item_id only labels the result. The
    returned vector has unit Euclidean norm.
    """
    if dim <= 0:
        raise ConfigError(f"dim must be positive, got {dim}")
    vec = np.zeros(dim)
    padded = "^^" + text + "$$"
    for i in range(len(padded) - 2):
        gram = padded[i:i + 3]
        h = blake2b(f"{seed}|{gram}".encode("utf-8"), digest_size=8).digest()
        val = int.from_bytes(h, "little")
        vec[(val >> 1) % dim] += 1.0 if val & 1 else -1.0
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # grams cancelled pairwise; fall back to a single deterministic spike
        h = blake2b(f"{seed}|{text}".encode("utf-8"), digest_size=8).digest()
        vec[int.from_bytes(h, "little") % dim] = 1.0
        norm = 1.0
    return ItemEmbedding(item_id, vec / norm)
