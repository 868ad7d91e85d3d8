"""Bit-exact codecs for stored embeddings.

Four variants: fp32 passthrough, uniform int8, uniform int4
(code = clamp(round(z*8), -8, 7), value = code/8), and int4 with a learned
16-entry scalar codebook fitted by Lloyd's algorithm on the pooled scalars
of all dimensions. Nibble payloads store two codes per byte, low nibble
first; int4 codes are kept offset-by-8 as unsigned nibbles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, FormatError
from .prng import Stream, derive_seed

CODEC_IDS = {"fp32": 0, "int8_uniform": 1, "int4_uniform": 2, "int4_kmeans": 3}
_ID_TO_NAME = {v: k for k, v in CODEC_IDS.items()}


@dataclass(frozen=True)
class Codec:
    kind: str
    codebook: tuple[float, ...] | None = None  # int4_kmeans only, 16 ascending

    def __post_init__(self):
        if self.kind not in CODEC_IDS:
            raise FormatError(f"unknown codec {self.kind!r}")
        if self.kind == "int4_kmeans":
            if self.codebook is None or len(self.codebook) != 16:
                raise FormatError("int4_kmeans needs a 16-entry codebook")
            cb = np.asarray(self.codebook)
            if not np.all(np.diff(cb) > 0):
                raise FormatError("codebook must be strictly ascending")
        elif self.codebook is not None:
            raise FormatError(f"{self.kind} takes no codebook")

    @property
    def bits(self) -> int:
        return {"fp32": 32, "int8_uniform": 8, "int4_uniform": 4, "int4_kmeans": 4}[self.kind]

    def payload_size(self, dim: int) -> int:
        return (dim * self.bits + 7) // 8


@dataclass(frozen=True)
class QuantizedVec:
    codec_id: int
    dim: int
    payload: bytes


def pack_nibbles(codes: np.ndarray) -> bytes:
    """Pack signed codes in [-8, 7] as offset-by-8 nibbles, low nibble first."""
    c = np.asarray(codes, dtype=np.int64)
    if c.size and (c.min() < -8 or c.max() > 7):
        raise FormatError("nibble code out of range [-8, 7]")
    u = (c + 8).astype(np.uint8)
    if u.size % 2:
        u = np.concatenate([u, np.zeros(1, dtype=np.uint8)])
    return (u[0::2] | (u[1::2] << 4)).tobytes()


def unpack_nibbles(data: bytes, dim: int) -> np.ndarray:
    """Inverse of pack_nibbles; the padding nibble of an odd dim is ignored."""
    if len(data) != (dim + 1) // 2:
        raise FormatError(f"nibble payload length {len(data)} for dim {dim}")
    raw = np.frombuffer(data, dtype=np.uint8)
    lo = (raw & 0x0F).astype(np.int64)
    hi = (raw >> 4).astype(np.int64)
    codes = np.empty(2 * len(raw), dtype=np.int64)
    codes[0::2] = lo
    codes[1::2] = hi
    return codes[:dim] - 8


def _codes_matrix(codec: Codec, z: np.ndarray) -> np.ndarray:
    """Integer codes for a (n, d) batch; clamps inputs into [-1, 1] first."""
    zc = np.clip(z, -1.0, 1.0)
    if codec.kind == "int8_uniform":
        return np.clip(np.round(zc * 127.0), -128, 127).astype(np.int64)
    if codec.kind == "int4_uniform":
        return np.clip(np.round(zc * 8.0), -8, 7).astype(np.int64)
    if codec.kind == "int4_kmeans":
        centers = np.asarray(codec.codebook)
        # argmin over |z - c|; ties resolve to the lower index
        return np.abs(zc[..., None] - centers).argmin(axis=-1).astype(np.int64)
    raise FormatError(f"no integer codes for codec {codec.kind}")


def quantize(codec: Codec, z) -> QuantizedVec:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError("quantize expects a 1-D vector")
    dim = len(z)
    if codec.kind == "fp32":
        payload = np.clip(z, -1.0, 1.0).astype("<f4").tobytes()
    elif codec.kind == "int8_uniform":
        payload = (_codes_matrix(codec, z) & 0xFF).astype(np.uint8).tobytes()
    elif codec.kind == "int4_uniform":
        payload = pack_nibbles(_codes_matrix(codec, z))
    else:  # int4_kmeans: indices 0..15 stored as offset nibbles
        payload = pack_nibbles(_codes_matrix(codec, z) - 8)
    return QuantizedVec(CODEC_IDS[codec.kind], dim, payload)


def dequantize(codec: Codec, q: QuantizedVec) -> np.ndarray:
    if q.codec_id != CODEC_IDS[codec.kind]:
        raise FormatError("codec id mismatch")
    expected = codec.payload_size(q.dim)
    if len(q.payload) != expected:
        raise FormatError(
            f"truncated payload: {len(q.payload)} bytes, expected {expected}"
        )
    if codec.kind == "fp32":
        return np.frombuffer(q.payload, dtype="<f4").astype(np.float64)
    if codec.kind == "int8_uniform":
        codes = np.frombuffer(q.payload, dtype=np.uint8).astype(np.int64)
        codes = np.where(codes > 127, codes - 256, codes)
        return codes / 127.0
    codes = unpack_nibbles(q.payload, q.dim)
    if codec.kind == "int4_uniform":
        return codes / 8.0
    return np.asarray(codec.codebook)[codes + 8]


def dequantize_batch(codec: Codec, payloads: list[bytes], dim: int) -> np.ndarray:
    """Vectorized dequantize of many same-shape payloads into an (n, d) array."""
    if not payloads:
        return np.zeros((0, dim))
    blob = b"".join(payloads)
    n = len(payloads)
    if codec.kind == "fp32":
        return np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(n, dim)
    if codec.kind == "int8_uniform":
        codes = np.frombuffer(blob, dtype=np.uint8).astype(np.int64).reshape(n, dim)
        return np.where(codes > 127, codes - 256, codes) / 127.0
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, -1)
    codes = np.empty((n, 2 * raw.shape[1]), dtype=np.int64)
    codes[:, 0::2] = raw & 0x0F
    codes[:, 1::2] = raw >> 4
    codes = codes[:, :dim] - 8
    if codec.kind == "int4_uniform":
        return codes / 8.0
    return np.asarray(codec.codebook)[codes + 8]


def reconstruction_mse(codec: Codec, z: np.ndarray) -> float:
    """Mean squared error of quantize->dequantize over an (n, d) batch."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if codec.kind == "fp32":
        approx = np.clip(z, -1.0, 1.0).astype("<f4").astype(np.float64)
    elif codec.kind == "int8_uniform":
        approx = _codes_matrix(codec, z) / 127.0
    elif codec.kind == "int4_uniform":
        approx = _codes_matrix(codec, z) / 8.0
    else:
        approx = np.asarray(codec.codebook)[_codes_matrix(codec, z)]
    return float(np.mean((z - approx) ** 2))


def fit_kmeans_int4(samples, iters: int = 50, seed: int = 0) -> tuple[Codec, list[float]]:
    """Lloyd's algorithm with k-means++ init over the pooled scalar samples.

    Returns the fitted codec (centers sorted ascending) and the SSE per
    iteration, which is non-increasing. Empty clusters are reseeded to the
    sample farthest from its assigned center.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    uniq = np.unique(x)
    if len(uniq) < 16:
        raise DataError(f"k-means needs >= 16 distinct samples, got {len(uniq)}")

    stream = Stream(derive_seed(seed, "kmeanspp"))
    centers = np.empty(16)
    centers[0] = x[stream.randint(len(x))]
    d2 = (x - centers[0]) ** 2
    for k in range(1, 16):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass at chosen centers; pick an unused distinct value
            unused = np.setdiff1d(uniq, centers[:k])
            centers[k] = unused[0]
        else:
            centers[k] = x[stream.choice_weighted(d2)]
        d2 = np.minimum(d2, (x - centers[k]) ** 2)

    sse_history: list[float] = []
    for _ in range(iters):
        assign = np.abs(x[:, None] - centers[None, :]).argmin(axis=1)
        err = (x - centers[assign]) ** 2
        sse_history.append(float(err.sum()))
        new_centers = centers.copy()
        for k in range(16):
            members = x[assign == k]
            if len(members):
                new_centers[k] = members.mean()
            else:
                far = int(err.argmax())
                new_centers[k] = x[far]
                err[far] = 0.0
        if np.array_equal(new_centers, centers):
            break
        centers = new_centers
    assign = np.abs(x[:, None] - centers[None, :]).argmin(axis=1)
    sse_history.append(float(((x - centers[assign]) ** 2).sum()))
    order = np.argsort(centers, kind="mergesort")
    centers = centers[order]
    # strictly-ascending invariant: collapse of duplicate centers cannot
    # happen with >= 16 distinct samples and final Lloyd means, but guard it
    if not np.all(np.diff(centers) > 0):
        centers = np.unique(centers)
        fill = np.setdiff1d(uniq, centers)
        centers = np.sort(np.concatenate([centers, fill[: 16 - len(centers)]]))
    return Codec("int4_kmeans", tuple(float(c) for c in centers)), sse_history


def codec_from_id(codec_id: int, codebook=None) -> Codec:
    if codec_id not in _ID_TO_NAME:
        raise FormatError(f"unknown codec id {codec_id}")
    name = _ID_TO_NAME[codec_id]
    if name == "int4_kmeans":
        return Codec(name, tuple(codebook))
    return Codec(name)
