"""Bit-packed binary codes, popcount Hamming search, and the timing benchmark.

Bit layout: bit i of a code lives in byte i//8 at position i%8 (LSB first),
and bytes are grouped little-endian into 64-bit words. Logical code length L
is stored explicitly; padding bits past L are always zero. Code files store
exactly L/8 bytes per code, so the on-disk layout is identical regardless of
the in-memory word size.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EncodingError, MetricError, RetrievalError

WORD_BITS = 64

if hasattr(np, "bitwise_count"):
    def popcount(words: np.ndarray) -> np.ndarray:
        """Per-word population count."""
        return np.bitwise_count(words)
else:  # numpy < 2.0
    _LUT16 = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.uint8)

    def popcount(words: np.ndarray) -> np.ndarray:
        halves = words.view(np.uint16).reshape(*words.shape, 4)
        return _LUT16[halves].sum(axis=-1, dtype=np.uint64)


def _n_words(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


def _padding_mask(length: int, n_words: int) -> np.ndarray:
    """Mask with ones at every padding bit position past `length`."""
    mask = np.zeros(n_words, dtype="<u8")
    used = length % WORD_BITS
    if used:
        mask[length // WORD_BITS] = ~np.uint64((1 << used) - 1)
    return mask


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """uint8 {0,1} bits (last axis) -> little-endian uint64 words."""
    packed = np.packbits(bits, axis=-1, bitorder="little")
    pad = (-packed.shape[-1]) % 8
    if pad:
        packed = np.concatenate(
            [packed, np.zeros((*packed.shape[:-1], pad), dtype=np.uint8)], axis=-1
        )
    return packed.view("<u8")


def _unpack_bits(words: np.ndarray, length: int) -> np.ndarray:
    return np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")[..., :length]


@dataclass(frozen=True)
class HashCode:
    """A single binary code: L logical bits in little-endian packed words."""

    words: np.ndarray
    length: int
    stage: int = 0

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype="<u8")
        object.__setattr__(self, "words", words)
        if self.length < 1:
            raise EncodingError("code length must be positive")
        if words.shape != (_n_words(self.length),):
            raise EncodingError(
                f"{words.shape[0]} words cannot hold a {self.length}-bit code"
            )
        if (words & _padding_mask(self.length, words.shape[0])).any():
            raise EncodingError("padding bits past the logical length must be zero")


@dataclass(frozen=True)
class PackedCodes:
    """A batch of equal-length codes: n x n_words uint64."""

    words: np.ndarray
    length: int
    stage: int = 0

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype="<u8")
        object.__setattr__(self, "words", words)
        if words.ndim != 2 or words.shape[1] != _n_words(self.length):
            raise EncodingError(
                f"word matrix {words.shape} cannot hold {self.length}-bit codes"
            )
        if (words & _padding_mask(self.length, words.shape[1])).any():
            raise EncodingError("padding bits past the logical length must be zero")

    def __len__(self) -> int:
        return self.words.shape[0]

    def __getitem__(self, i: int) -> HashCode:
        return HashCode(self.words[i], self.length, self.stage)


def pack(signs, stage: int = 0) -> HashCode:
    """Pack a +-1 vector into a HashCode; bit i is set iff signs[i] == +1."""
    signs = np.asarray(signs)
    if signs.ndim != 1 or signs.size == 0:
        raise EncodingError("pack expects a non-empty 1-D sign vector")
    if not np.isin(signs, (-1, 1)).all():
        raise EncodingError("sign vector entries must be -1 or +1")
    return HashCode(_pack_bits((signs > 0).astype(np.uint8)), signs.size, stage)


def unpack(code: HashCode) -> np.ndarray:
    """Inverse of pack: returns an int8 +-1 vector of the logical length."""
    bits = _unpack_bits(code.words, code.length)
    return (bits.astype(np.int8) * 2) - 1


def pack_matrix(signs, stage: int = 0) -> PackedCodes:
    signs = np.asarray(signs)
    if signs.ndim != 2 or signs.size == 0:
        raise EncodingError("pack_matrix expects a non-empty N x L sign matrix")
    if not np.isin(signs, (-1, 1)).all():
        raise EncodingError("sign matrix entries must be -1 or +1")
    return PackedCodes(_pack_bits((signs > 0).astype(np.uint8)), signs.shape[1], stage)


def unpack_matrix(codes: PackedCodes) -> np.ndarray:
    bits = _unpack_bits(codes.words, codes.length)
    return (bits.astype(np.int8) * 2) - 1


def hamming_distance(a: HashCode, b: HashCode) -> int:
    """Number of differing bits between two equal-length codes."""
    if a.length != b.length:
        raise MetricError(f"code lengths differ: {a.length} vs {b.length}")
    return int(popcount(a.words ^ b.words).sum())


def distances_to_all(query: HashCode, codes: PackedCodes) -> np.ndarray:
    """Hamming distance from `query` to every code in the batch (int64)."""
    if query.length != codes.length:
        raise MetricError(f"code lengths differ: {query.length} vs {codes.length}")
    return popcount(codes.words ^ query.words[None, :]).sum(axis=1).astype(np.int64)


@dataclass
class GalleryIndex:
    """Immutable per-stage code arrays with aligned identity/camera ids.

    `s1_features` optionally carries the part-pooled stage-1 vectors (float32)
    needed by the learned exit policy. Safe for concurrent readers once built.
    """

    codes: dict[int, PackedCodes]
    ids: np.ndarray
    cams: np.ndarray
    s1_features: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint32)
        self.cams = np.ascontiguousarray(self.cams, dtype=np.uint32)
        n = self.ids.shape[0]
        if self.cams.shape != (n,):
            raise RetrievalError("ids and cams are not aligned")
        for stage, codes in self.codes.items():
            if len(codes) != n:
                raise RetrievalError(f"stage {stage} codes not aligned with ids")
        if self.s1_features is not None:
            self.s1_features = np.ascontiguousarray(self.s1_features, dtype=np.float32)
            if self.s1_features.shape[0] != n:
                raise RetrievalError("s1_features not aligned with ids")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def stage_codes(self, stage: int) -> PackedCodes:
        try:
            return self.codes[stage]
        except KeyError:
            raise RetrievalError(f"index holds no codes for stage {stage}") from None


@dataclass(frozen=True)
class TopK:
    """Ranked retrieval result, ordered by (distance, gallery position)."""

    positions: np.ndarray
    ids: np.ndarray
    distances: np.ndarray


def topk(
    query: HashCode,
    index: GalleryIndex,
    k: int,
    stage: int | None = None,
    query_id: int | None = None,
    query_cam: int | None = None,
    same_camera_filter: bool = False,
    skip_position: int | None = None,
) -> TopK:
    """Linear scan for the k nearest gallery codes.

    Ties break by ascending gallery position (stable sort). With
    `same_camera_filter`, gallery entries sharing both identity and camera
    with the query are dropped before ranking. `skip_position` removes a
    single gallery row (leave-one-out scans).
    """
    stage = query.stage if stage is None else stage
    codes = index.stage_codes(stage)
    dists = distances_to_all(query, codes)
    keep = np.ones(len(index), dtype=bool)
    if skip_position is not None:
        keep[skip_position] = False
    if same_camera_filter:
        if query_id is None or query_cam is None:
            raise RetrievalError("same-camera filtering needs query id and camera")
        keep &= ~((index.ids == query_id) & (index.cams == query_cam))
    positions = np.flatnonzero(keep)
    if positions.size == 0:
        raise RetrievalError("gallery is empty after filtering")
    order = positions[np.argsort(dists[positions], kind="stable")]
    order = order[: min(k, order.size)]
    return TopK(order, index.ids[order], dists[order])


def full_ranking(
    query: HashCode,
    index: GalleryIndex,
    stage: int | None = None,
    **kwargs,
) -> TopK:
    return topk(query, index, k=len(index), stage=stage, **kwargs)


# -- binary/continuous timing benchmark -----------------------------------------


@dataclass(frozen=True)
class BenchTiming:
    kind: str
    length: int
    n_gallery: int
    n_queries: int
    per_pair_s: float
    per_query_s: float


@dataclass(frozen=True)
class BenchRow:
    length: int
    binary_us: float
    continuous_us: float

    @property
    def ratio(self) -> float:
        return self.continuous_us / self.binary_us


def _scan_binary(gallery: PackedCodes, queries: PackedCodes) -> None:
    gw = gallery.words
    for q in queries.words:
        popcount(gw ^ q[None, :]).sum(axis=1)


def _scan_euclidean(gallery: np.ndarray, queries: np.ndarray) -> None:
    for q in queries:
        diff = gallery - q[None, :]
        np.sqrt((diff * diff).sum(axis=1))


def bench(
    distance_kind: str,
    length: int,
    n_gallery: int,
    n_queries: int,
    rng: np.random.Generator | None = None,
    repeats: int = 3,
) -> BenchTiming:
    """Time a full linear scan; single-threaded, monotonic wall clock.

    One warm-up pass runs before timing; the reported figure is the mean over
    `repeats` passes. Absolute numbers are environment-dependent and are
    reported, never asserted.
    """
    rng = rng or np.random.default_rng(0)
    if distance_kind == "hamming":
        signs = rng.integers(0, 2, size=(n_gallery + n_queries, length)) * 2 - 1
        codes = pack_matrix(signs)
        gallery = PackedCodes(codes.words[:n_gallery], length)
        queries = PackedCodes(codes.words[n_gallery:], length)
        run = lambda: _scan_binary(gallery, queries)
    elif distance_kind == "euclidean":
        data = rng.standard_normal((n_gallery + n_queries, length)).astype(np.float32)
        gallery, queries = data[:n_gallery], data[n_gallery:]
        run = lambda: _scan_euclidean(gallery, queries)
    else:
        raise ValueError(f"unknown distance kind {distance_kind!r}")

    run()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        run()
    elapsed = (time.perf_counter() - t0) / repeats
    return BenchTiming(
        kind=distance_kind,
        length=length,
        n_gallery=n_gallery,
        n_queries=n_queries,
        per_pair_s=elapsed / (n_gallery * n_queries),
        per_query_s=elapsed / n_queries,
    )


def bench_table(
    lengths: Sequence[int] = (128, 256, 512, 1024, 2048),
    n_gallery: int = 4000,
    n_queries: int = 50,
    rng: np.random.Generator | None = None,
    repeats: int = 3,
) -> list[BenchRow]:
    """Packed-Hamming vs dense-float Euclidean per-pair times across lengths."""
    rng = rng or np.random.default_rng(0)
    rows = []
    for length in lengths:
        b = bench("hamming", length, n_gallery, n_queries, rng=rng, repeats=repeats)
        c = bench("euclidean", length, n_gallery, n_queries, rng=rng, repeats=repeats)
        rows.append(
            BenchRow(
                length=length,
                binary_us=b.per_pair_s * 1e6,
                continuous_us=c.per_pair_s * 1e6,
            )
        )
    return rows


# -- file formats -----------------------------------------------------------------
#
# HRC1 code file:      magic "HRC1" | u32 stage | u32 L | u32 count |
#                      count * (L/8) code bytes | count * u32 identity ids |
#                      count * u32 source ids. All integers little-endian.
# HRE1 embedding file: magic "HRE1" | u32 dim | u32 count | count*dim f32 LE.


def write_codes_file(
    path: str | os.PathLike,
    codes: PackedCodes,
    ids: np.ndarray,
    cams: np.ndarray,
) -> None:
    if codes.length % 8:
        raise EncodingError("code files require a bit length divisible by 8")
    n = len(codes)
    ids = np.ascontiguousarray(ids, dtype="<u4")
    cams = np.ascontiguousarray(cams, dtype="<u4")
    if ids.shape != (n,) or cams.shape != (n,):
        raise EncodingError("ids/cams not aligned with codes")
    nbytes = codes.length // 8
    code_bytes = codes.words.view(np.uint8).reshape(n, -1)[:, :nbytes]
    with open(path, "wb") as fh:
        fh.write(b"HRC1")
        fh.write(struct.pack("<III", codes.stage, codes.length, n))
        fh.write(np.ascontiguousarray(code_bytes).tobytes())
        fh.write(ids.tobytes())
        fh.write(cams.tobytes())


def read_codes_file(path: str | os.PathLike) -> tuple[PackedCodes, np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != b"HRC1":
        raise EncodingError(f"{path}: not an HRC1 code file")
    stage, length, count = struct.unpack_from("<III", raw, 4)
    nbytes = length // 8
    offset = 16
    code_bytes = np.frombuffer(raw, dtype=np.uint8, count=count * nbytes, offset=offset)
    offset += count * nbytes
    ids = np.frombuffer(raw, dtype="<u4", count=count, offset=offset).copy()
    offset += count * 4
    cams = np.frombuffer(raw, dtype="<u4", count=count, offset=offset).copy()
    code_bytes = code_bytes.reshape(count, nbytes)
    pad = (-nbytes) % 8
    if pad:
        code_bytes = np.concatenate(
            [code_bytes, np.zeros((count, pad), dtype=np.uint8)], axis=1
        )
    words = np.ascontiguousarray(code_bytes).view("<u8")
    return PackedCodes(words, length, stage), ids, cams


def write_embeddings_file(path: str | os.PathLike, embeddings: np.ndarray) -> None:
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2:
        raise EncodingError("embedding files hold an N x dim matrix")
    with open(path, "wb") as fh:
        fh.write(b"HRE1")
        fh.write(struct.pack("<II", emb.shape[1], emb.shape[0]))
        fh.write(emb.tobytes())


def read_embeddings_file(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != b"HRE1":
        raise EncodingError(f"{path}: not an HRE1 embedding file")
    dim, count = struct.unpack_from("<II", raw, 4)
    emb = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=12)
    return emb.reshape(count, dim).copy()
