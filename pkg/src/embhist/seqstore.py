"""Append-only keyed store of quantized embedding records.

Sequences honor a retention window, a length cap, and strict exclusion of
anything at or after the query timestamp, so serving never needs a
real-time teacher pass. Records with equal timestamps are returned
later-inserted-first. The on-disk format is little-endian and documented
byte-exactly in FORMATS.md; every record carries a crc32 so single-byte
corruption is caught and reported with the record index.
"""

from __future__ import annotations

import struct
import zlib
from bisect import bisect_left, insort
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError, FormatError
from .quantization import Codec, QuantizedVec, codec_from_id, dequantize_batch

_MAGIC = b"LFSQ"
_VERSION = 1


@dataclass(frozen=True)
class EmbeddingRecord:
    key: int
    timestamp: int
    payload: QuantizedVec
    soft_label: float | None = None

    def __post_init__(self):
        if self.key < 0 or self.timestamp < 0:
            raise FormatError("key and timestamp must be non-negative")
        if self.soft_label is not None and not 0.0 <= self.soft_label <= 1.0:
            raise FormatError("soft label must lie in [0, 1]")


@dataclass(frozen=True)
class SequenceFeature:
    """Up to L dequantized entries, most recent first, zero padded."""

    entries: np.ndarray     # (L, d)
    mask: np.ndarray        # (L,) bool
    timestamps: np.ndarray  # (L,) int64, -1 on padding
    length: int

    @classmethod
    def empty(cls, seq_len: int, dim: int) -> "SequenceFeature":
        return cls(
            entries=np.zeros((seq_len, dim)),
            mask=np.zeros(seq_len, dtype=bool),
            timestamps=np.full(seq_len, -1, dtype=np.int64),
            length=0,
        )


class SequenceStore:
    def __init__(self, dim: int, codec: Codec):
        self.dim = dim
        self.codec = codec
        self._records: list[EmbeddingRecord] = []
        self._by_key: dict[int, list[tuple[int, int]]] = {}  # (timestamp, counter)
        self._frozen = False

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[EmbeddingRecord, ...]:
        return tuple(self._records)

    def freeze(self) -> None:
        """After freezing the store is immutable and safely shareable."""
        self._frozen = True

    def append(self, rec: EmbeddingRecord) -> None:
        if self._frozen:
            raise ConfigError("store is frozen")
        if rec.payload.dim != self.dim:
            raise FormatError(f"record dim {rec.payload.dim} != store dim {self.dim}")
        expected = self.codec.payload_size(self.dim)
        if len(rec.payload.payload) != expected:
            raise FormatError("payload length does not match the store codec")
        counter = len(self._records)
        self._records.append(rec)
        insort(self._by_key.setdefault(rec.key, []), (rec.timestamp, counter))

    def build_sequence(self, key: int, t_cur: int, seq_len: int,
                       window: int) -> SequenceFeature:
        """Most recent seq_len records of `key` with timestamp in
        [t_cur - window, t_cur); unknown keys give the empty sequence."""
        if seq_len < 1:
            raise ConfigError("sequence length cap must be >= 1")
        if window <= 0:
            raise ConfigError("retention window must be > 0")
        index = self._by_key.get(key)
        if not index:
            return SequenceFeature.empty(seq_len, self.dim)
        lo = bisect_left(index, (t_cur - window, -1))
        hi = bisect_left(index, (t_cur, -1))
        chosen = index[lo:hi][-seq_len:]
        if not chosen:
            return SequenceFeature.empty(seq_len, self.dim)
        chosen = chosen[::-1]  # most recent first; equal stamps: later insert first
        recs = [self._records[c] for _, c in chosen]
        values = dequantize_batch(self.codec, [r.payload.payload for r in recs], self.dim)
        out = SequenceFeature.empty(seq_len, self.dim)
        n = len(recs)
        out.entries[:n] = values
        out.mask[:n] = True
        out.timestamps[:n] = [r.timestamp for r in recs]
        return SequenceFeature(out.entries, out.mask, out.timestamps, n)

    def centroid(self) -> np.ndarray:
        if not self._records:
            raise DataError("store is empty")
        values = dequantize_batch(
            self.codec, [r.payload.payload for r in self._records], self.dim
        )
        return values.mean(axis=0)

    # -- persistence -------------------------------------------------------

    def persist(self, path) -> None:
        """Canonical order: (key, timestamp, insertion counter)."""
        order = sorted(
            range(len(self._records)),
            key=lambda i: (self._records[i].key, self._records[i].timestamp, i),
        )
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            centers = self.codec.codebook or ()
            fh.write(struct.pack("<IIBB", _VERSION, self.dim,
                                 self.codec_id(), len(centers)))
            for c in centers:
                fh.write(struct.pack("<d", c))
            fh.write(struct.pack("<Q", len(self._records)))
            for i in order:
                fh.write(_record_bytes(self._records[i]))

    def codec_id(self) -> int:
        from .quantization import CODEC_IDS

        return CODEC_IDS[self.codec.kind]

    @classmethod
    def load(cls, path) -> "SequenceStore":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 14:
            raise FormatError(f"truncated header: {len(blob)} bytes")
        if blob[:4] != _MAGIC:
            raise FormatError(f"bad magic {blob[:4]!r} at offset 0")
        version, dim, codec_id, n_centers = struct.unpack_from("<IIBB", blob, 4)
        if version != _VERSION:
            raise FormatError(f"unsupported store version {version}")
        off = 14
        centers = None
        if n_centers:
            centers = struct.unpack_from(f"<{n_centers}d", blob, off)
            off += 8 * n_centers
        codec = codec_from_id(codec_id, centers)
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
        store = cls(dim, codec)
        payload_len = codec.payload_size(dim)
        for i in range(count):
            rec, off = _parse_record(blob, off, i, payload_len, codec_id, dim)
            store.append(rec)
        if off != len(blob):
            raise FormatError(f"{len(blob) - off} trailing bytes at offset {off}")
        return store


def _record_bytes(rec: EmbeddingRecord) -> bytes:
    flag = 1 if rec.soft_label is not None else 0
    body = struct.pack("<Qq", rec.key, rec.timestamp) + bytes([flag])
    if flag:
        body += struct.pack("<d", rec.soft_label)
    body += rec.payload.payload
    return body + struct.pack("<I", zlib.crc32(body))


def _parse_record(blob: bytes, off: int, index: int, payload_len: int,
                  codec_id: int, dim: int):
    start = off
    fixed = 8 + 8 + 1
    if off + fixed > len(blob):
        raise FormatError(f"record {index} truncated at offset {off}")
    key, ts = struct.unpack_from("<Qq", blob, off)
    flag = blob[off + 16]
    off += fixed
    if flag not in (0, 1):
        raise FormatError(f"record {index}: bad soft-label flag {flag}")
    soft = None
    if flag:
        if off + 8 > len(blob):
            raise FormatError(f"record {index} truncated at offset {off}")
        (soft,) = struct.unpack_from("<d", blob, off)
        off += 8
    if off + payload_len + 4 > len(blob):
        raise FormatError(f"record {index} truncated at offset {off}")
    payload = blob[off : off + payload_len]
    off += payload_len
    (crc,) = struct.unpack_from("<I", blob, off)
    off += 4
    if zlib.crc32(blob[start : off - 4]) != crc:
        raise FormatError(f"record {index}: crc mismatch (corrupt payload)")
    if ts < 0:
        raise FormatError(f"record {index}: negative timestamp")
    if soft is not None and not 0.0 <= soft <= 1.0:
        raise FormatError(f"record {index}: soft label {soft} outside [0, 1]")
    return EmbeddingRecord(key, ts, QuantizedVec(codec_id, dim, payload), soft), off


def centroid_drift(store_a: SequenceStore, store_b: SequenceStore) -> float:
    """L2 distance between the mean dequantized embeddings of two stores."""
    if store_a.dim != store_b.dim:
        raise DimensionError("stores have different dims")
    return float(np.linalg.norm(store_a.centroid() - store_b.centroid()))
