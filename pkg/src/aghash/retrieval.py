"""Binary code packing and Hamming-distance ranking.

Codes live in {-1, +1}^K. For storage and fast ranking they are packed
LSB-first into bytes (+1 -> bit 1, -1 -> bit 0); distances are computed in
the packed domain via XOR + popcount.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CODE_FILE_MAGIC = b"DAGH"
CODE_FILE_VERSION = 1

# popcount of every byte value, used to sum XOR results per row
_POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1).astype(np.uint16)


@dataclass(frozen=True)
class PackedCodes:
    """n binary codes of k bits each, packed row-wise into ceil(k/8) bytes.

    Bit j of a code is stored in byte j // 8 at bit position j % 8
    (least-significant-bit first). Pad bits in the final byte are zero.
    """

    n: int
    k: int
    bits: np.ndarray  # uint8, shape (n, ceil(k/8))

    def __post_init__(self):
        if self.bits.shape != (self.n, (self.k + 7) // 8):
            raise ValueError(
                f"bits shape {self.bits.shape} does not match n={self.n}, k={self.k}"
            )

    def row_bytes(self) -> int:
        return (self.k + 7) // 8


def _as_code_matrix(codes) -> np.ndarray:
    """Stack codes into an (n, k) int array over {-1, +1}."""
    if isinstance(codes, np.ndarray) and codes.ndim == 2:
        mat = codes
    else:
        rows = [np.asarray(c) for c in codes]
        if not rows:
            raise ValueError("no codes given")
        k = rows[0].shape[0]
        if any(r.ndim != 1 or r.shape[0] != k for r in rows):
            raise ValueError("codes have inconsistent lengths")
        mat = np.stack(rows)
    mat = mat.astype(np.int8)
    if not np.isin(mat, (-1, 1)).all():
        raise ValueError("codes must take values in {-1, +1}")
    return mat


def pack(codes) -> PackedCodes:
    """Pack a list of {-1,+1} codes (or an (n, k) array) into PackedCodes."""
    mat = _as_code_matrix(codes)
    n, k = mat.shape
    bits01 = (mat > 0).astype(np.uint8)
    packed = np.packbits(bits01, axis=1, bitorder="little")
    return PackedCodes(n=n, k=k, bits=packed)


def unpack(packed: PackedCodes) -> np.ndarray:
    """Unpack to an (n, k) int8 array over {-1, +1}. Inverse of pack()."""
    bits01 = np.unpackbits(packed.bits, axis=1, count=packed.k, bitorder="little")
    return (bits01.astype(np.int8) * 2) - 1


def hamming_distance(a, b) -> int:
    """Number of positions where two {-1,+1} codes differ.

    Satisfies dist = (K - a.b) / 2 for +-1 codes.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"code length mismatch: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


def _packed_distances(query_bits: np.ndarray, gallery_bits: np.ndarray) -> np.ndarray:
    """Hamming distances of one packed query row against all gallery rows."""
    xor = np.bitwise_xor(gallery_bits, query_bits[None, :])
    return _POPCOUNT[xor].sum(axis=1).astype(np.int64)


@dataclass(frozen=True)
class RankingResult:
    """Full gallery ordering for one query, nearest first.

    Ties in distance are broken by ascending gallery id so rankings are
    deterministic.
    """

    query_id: int
    gallery_ids: np.ndarray  # int64, shape (n,)
    distances: np.ndarray  # int64, shape (n,), non-decreasing


def rank_gallery(query, gallery: PackedCodes, query_id: int = 0) -> RankingResult:
    """Order the whole gallery by Hamming distance to `query` (a {-1,+1} code)."""
    query = np.asarray(query)
    if query.shape != (gallery.k,):
        raise ValueError(
            f"query length {query.shape} does not match gallery code length {gallery.k}"
        )
    qbits = np.packbits((query > 0).astype(np.uint8), bitorder="little")
    dists = _packed_distances(qbits, gallery.bits)
    # stable sort on distance keeps ascending-id order within ties
    order = np.argsort(dists, kind="stable")
    return RankingResult(
        query_id=query_id,
        gallery_ids=order.astype(np.int64),
        distances=dists[order],
    )


def within_radius(query, gallery: PackedCodes, r: int) -> set[int]:
    """Ids of all gallery codes within Hamming distance r of the query."""
    if not 0 <= r <= gallery.k:
        raise ValueError(f"radius {r} outside [0, {gallery.k}]")
    query = np.asarray(query)
    if query.shape != (gallery.k,):
        raise ValueError(
            f"query length {query.shape} does not match gallery code length {gallery.k}"
        )
    qbits = np.packbits((query > 0).astype(np.uint8), bitorder="little")
    dists = _packed_distances(qbits, gallery.bits)
    return set(np.flatnonzero(dists <= r).tolist())


def save_codes(path, packed: PackedCodes) -> None:
    """Write packed codes in the binary code-file format.

    Layout: magic "DAGH", little-endian u32 version, u32 k, u64 n, then
    n * ceil(k/8) payload bytes in row-major order (LSB-first bits).
    """
    header = CODE_FILE_MAGIC + struct.pack("<IIQ", CODE_FILE_VERSION, packed.k, packed.n)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(packed.bits.tobytes())


def load_codes(path) -> PackedCodes:
    """Read a code file written by save_codes()."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CODE_FILE_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {CODE_FILE_MAGIC!r}")
    version, k, n = struct.unpack("<IIQ", blob[4:20])
    if version != CODE_FILE_VERSION:
        raise ValueError(f"{path}: unsupported code file version {version}")
    row = (k + 7) // 8
    payload = blob[20:]
    if len(payload) != n * row:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, expected {n * row} for n={n}, k={k}"
        )
    bits = np.frombuffer(payload, dtype=np.uint8).reshape(n, row).copy()
    return PackedCodes(n=int(n), k=int(k), bits=bits)
