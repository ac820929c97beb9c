"""Block-sparse weight structures: binary masks over channel blocks and
compressed block-COO storage with relative column indices.

A "block" of a conv weight tensor O x h x k x I is the full h x k kernel
slab for b_o output channels and b_i input channels, so a b_o x b_i block
really holds b_o*h*k*b_i values.  Matrices are handled as h = k = 1.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

DEFAULT_GRANULARITIES = ((8, 8), (4, 16), (16, 4))

_MAGIC = b"BCOO"
_FORMAT_VERSION = 1
_DTYPE_CODES = {"i8": 0, "i16": 1, "i32": 2, "f32": 3, "f64": 4}
_DTYPE_NP = {"i8": np.int8, "i16": np.int16, "i32": np.int32,
             "f32": np.float32, "f64": np.float64}


class BlockError(ValueError):
    """Raised for invalid block shapes, grids or mismatched dimensions."""


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class BlockShape:
    """Block granularity: b_o output channels by b_i input channels."""

    b_o: int
    b_i: int

    def __post_init__(self):
        if self.b_o <= 0 or self.b_i <= 0:
            raise BlockError(f"block extents must be positive, got {self.b_o}x{self.b_i}")

    @staticmethod
    def of(b_o: int, b_i: int, permissive: bool = False) -> "BlockShape":
        if not permissive and (b_o, b_i) not in DEFAULT_GRANULARITIES:
            raise BlockError(
                f"granularity {b_o}x{b_i} not in {DEFAULT_GRANULARITIES}; "
                "pass permissive=True to allow arbitrary blocks")
        return BlockShape(b_o, b_i)


def grid_for(out_ch: int, in_ch: int, shape: BlockShape) -> tuple[int, int]:
    """Mask grid dimensions covering out_ch x in_ch channels."""
    if out_ch <= 0 or in_ch <= 0:
        raise BlockError(f"channel counts must be positive, got {out_ch}, {in_ch}")
    return ceil_div(out_ch, shape.b_o), ceil_div(in_ch, shape.b_i)


class BlockMask:
    """Binary grid over (output-block x input-block) coordinates.

    bits[r, c] == 1 keeps the block, 0 zeroes it.  Channel counts that do
    not divide the block extents are covered by a padded grid; the padding
    region holds zeros of the tensor, never widens nonzero structure.
    """

    def __init__(self, bits: np.ndarray, shape: BlockShape):
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.ndim != 2 or bits.size == 0:
            raise BlockError("mask must be a non-empty 2-D grid")
        if not np.isin(bits, (0, 1)).all():
            raise BlockError("mask entries must be 0 or 1")
        self.bits = bits
        self.shape = shape

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @classmethod
    def full(cls, out_ch: int, in_ch: int, shape: BlockShape) -> "BlockMask":
        r, c = grid_for(out_ch, in_ch, shape)
        return cls(np.ones((r, c), dtype=np.uint8), shape)

    def __eq__(self, other) -> bool:
        return (isinstance(other, BlockMask) and self.shape == other.shape
                and np.array_equal(self.bits, other.bits))

    def nnz(self) -> int:
        return int(self.bits.sum())

    def to_json(self) -> dict:
        return {
            "b_o": self.shape.b_o,
            "b_i": self.shape.b_i,
            "rows": self.rows,
            "cols": self.cols,
            "bits": "".join("1" if b else "0" for b in self.bits.ravel()),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BlockMask":
        rows, cols = int(doc["rows"]), int(doc["cols"])
        bits = np.frombuffer(doc["bits"].encode("ascii"), dtype=np.uint8) - ord("0")
        if bits.size != rows * cols:
            raise BlockError(f"mask bits length {bits.size} != rows*cols {rows * cols}")
        return cls(bits.reshape(rows, cols).copy(),
                   BlockShape(int(doc["b_o"]), int(doc["b_i"])))


def sparsity_ratio(mask: BlockMask, per_row: bool = False):
    """Fraction of zero blocks: per grid row, or the mean over rows.

    Per row: S = (N - sum_i bits[row, i]) / N with N the column count.
    """
    if mask.bits.size == 0:
        raise BlockError("empty mask")
    n = mask.cols
    rows = (n - mask.bits.sum(axis=1)) / float(n)
    if per_row:
        return rows
    return float(rows.mean())


def _check_weight_dims(weights: np.ndarray, mask: BlockMask) -> np.ndarray:
    if weights.ndim == 2:  # matrix: O x I with an implicit 1x1 kernel
        weights = weights[:, None, None, :]
    if weights.ndim != 4:
        raise BlockError(f"weights must be 4-D (O,h,k,I) or 2-D (O,I), got ndim={weights.ndim}")
    out_ch, _, _, in_ch = weights.shape
    r, c = grid_for(out_ch, in_ch, mask.shape)
    if r != mask.rows:
        raise BlockError(
            f"output-channel axis: {out_ch} channels need {r} block rows, mask has {mask.rows}")
    if c != mask.cols:
        raise BlockError(
            f"input-channel axis: {in_ch} channels need {c} block cols, mask has {mask.cols}")
    return weights


def apply_mask(weights: np.ndarray, mask: BlockMask) -> np.ndarray:
    """Zero every masked block of a dense O x h x k x I weight tensor."""
    squeeze = weights.ndim == 2
    w4 = _check_weight_dims(np.asarray(weights), mask)
    out = w4.copy()
    b_o, b_i = mask.shape.b_o, mask.shape.b_i
    out_ch, _, _, in_ch = w4.shape
    for r in range(mask.rows):
        for c in range(mask.cols):
            if mask.bits[r, c] == 0:
                out[r * b_o:min((r + 1) * b_o, out_ch), :, :,
                    c * b_i:min((c + 1) * b_i, in_ch)] = 0
    return out[:, 0, 0, :] if squeeze else out


class BlockCooWeight:
    """Nonzero blocks of a masked weight tensor in coordinate form.

    Blocks are sorted by (block_row, block_col); the stored column index is
    relative to the previous nonzero block in the same row (first one per
    row is absolute).  Payloads hold b_o*h*k*b_i values each, C_out x h x k
    x C_in layout with the input channel innermost; partial edge blocks are
    zero-padded to the full extent.
    """

    def __init__(self, shape: BlockShape, kernel_hw: tuple[int, int],
                 out_ch: int, in_ch: int,
                 block_rows: np.ndarray, block_cols_rel: np.ndarray,
                 payloads: np.ndarray):
        self.shape = shape
        self.kernel_hw = (int(kernel_hw[0]), int(kernel_hw[1]))
        self.out_ch = int(out_ch)
        self.in_ch = int(in_ch)
        self.block_rows = np.asarray(block_rows, dtype=np.int32)
        self.block_cols_rel = np.asarray(block_cols_rel, dtype=np.int32)
        self.payloads = payloads
        h, k = self.kernel_hw
        expect = (len(self.block_rows), shape.b_o, h, k, shape.b_i)
        if payloads.shape != expect:
            raise BlockError(f"payload shape {payloads.shape} != {expect}")

    @property
    def grid(self) -> tuple[int, int]:
        return grid_for(self.out_ch, self.in_ch, self.shape)

    @property
    def n_blocks(self) -> int:
        return len(self.block_rows)

    @property
    def block_cols(self) -> np.ndarray:
        """Absolute block-column indices recovered from the relative encoding."""
        cols = np.empty_like(self.block_cols_rel)
        prev_row, acc = -1, 0
        for i, (r, d) in enumerate(zip(self.block_rows, self.block_cols_rel)):
            acc = d if r != prev_row else acc + d
            cols[i] = acc
            prev_row = r
        return cols

    @property
    def payload_bytes(self) -> int:
        return int(self.payloads.nbytes)

    @property
    def block_payload_bytes(self) -> int:
        h, k = self.kernel_hw
        return self.shape.b_o * h * k * self.shape.b_i * self.payloads.itemsize

    def row_lists(self) -> list[np.ndarray]:
        """Per block-row arrays of absolute block columns (sorted)."""
        rows, _ = self.grid
        cols = self.block_cols
        return [cols[self.block_rows == r] for r in range(rows)]

    def row_index(self) -> list[np.ndarray]:
        """Per block-row arrays of indices into the block sequence."""
        rows, _ = self.grid
        idx = np.arange(self.n_blocks)
        return [idx[self.block_rows == r] for r in range(rows)]

    def mask(self) -> BlockMask:
        rows, cols = self.grid
        bits = np.zeros((rows, cols), dtype=np.uint8)
        bits[self.block_rows, self.block_cols] = 1
        return BlockMask(bits, self.shape)

    def to_dense(self) -> np.ndarray:
        """Decompress to a dense O x h x k x I tensor (edge padding dropped)."""
        rows, cols = self.grid
        b_o, b_i = self.shape.b_o, self.shape.b_i
        h, k = self.kernel_hw
        full = np.zeros((rows * b_o, h, k, cols * b_i), dtype=self.payloads.dtype)
        for i, (r, c) in enumerate(zip(self.block_rows, self.block_cols)):
            full[r * b_o:(r + 1) * b_o, :, :, c * b_i:(c + 1) * b_i] = self.payloads[i]
        return full[:self.out_ch, :, :, :self.in_ch]

    # -- serialization ----------------------------------------------------

    def dtype_name(self) -> str:
        for name, np_t in _DTYPE_NP.items():
            if self.payloads.dtype == np_t:
                return name
        raise BlockError(f"unsupported payload dtype {self.payloads.dtype}")

    def to_bytes(self) -> bytes:
        """Little-endian binary form; layout documented in docs/formats.md."""
        h, k = self.kernel_hw
        rows, cols = self.grid
        head = struct.pack(
            "<4sHBBHHHHIIIII", _MAGIC, _FORMAT_VERSION,
            _DTYPE_CODES[self.dtype_name()], 0,
            self.shape.b_o, self.shape.b_i, h, k,
            rows, cols, self.out_ch, self.in_ch, self.n_blocks)
        parts = [head]
        for i in range(self.n_blocks):
            parts.append(struct.pack("<II", int(self.block_rows[i]),
                                     int(self.block_cols_rel[i])))
            parts.append(np.ascontiguousarray(self.payloads[i]).astype(
                self.payloads.dtype, copy=False).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlockCooWeight":
        hdr = struct.unpack_from("<4sHBBHHHHIIIII", data, 0)
        if hdr[0] != _MAGIC:
            raise BlockError("bad magic in block-COO stream")
        if hdr[1] != _FORMAT_VERSION:
            raise BlockError(f"unsupported block-COO version {hdr[1]}")
        dtype_name = {v: n for n, v in _DTYPE_CODES.items()}[hdr[2]]
        b_o, b_i, h, k, rows, cols, out_ch, in_ch, nblk = hdr[4:]
        np_t = _DTYPE_NP[dtype_name]
        itemsize = np.dtype(np_t).itemsize
        off = struct.calcsize("<4sHBBHHHHIIIII")
        payload_n = b_o * h * k * b_i
        brs = np.empty(nblk, dtype=np.int32)
        bcs = np.empty(nblk, dtype=np.int32)
        payloads = np.empty((nblk, b_o, h, k, b_i), dtype=np_t)
        for i in range(nblk):
            brs[i], bcs[i] = struct.unpack_from("<II", data, off)
            off += 8
            payloads[i] = np.frombuffer(
                data, dtype=np_t, count=payload_n, offset=off).reshape(b_o, h, k, b_i)
            off += payload_n * itemsize
        return cls(BlockShape(b_o, b_i), (h, k), out_ch, in_ch, brs, bcs, payloads)

    def to_json(self) -> dict:
        """Debug form: header fields plus base64 payload blob."""
        doc = {
            "b_o": self.shape.b_o, "b_i": self.shape.b_i,
            "h": self.kernel_hw[0], "k": self.kernel_hw[1],
            "out_ch": self.out_ch, "in_ch": self.in_ch,
            "dtype": self.dtype_name(),
            "block_rows": self.block_rows.tolist(),
            "block_cols_rel": self.block_cols_rel.tolist(),
            "payload_b64": base64.b64encode(
                np.ascontiguousarray(self.payloads).tobytes()).decode("ascii"),
        }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "BlockCooWeight":
        shape = BlockShape(int(doc["b_o"]), int(doc["b_i"]))
        h, k = int(doc["h"]), int(doc["k"])
        brs = np.asarray(doc["block_rows"], dtype=np.int32)
        bcs = np.asarray(doc["block_cols_rel"], dtype=np.int32)
        raw = base64.b64decode(doc["payload_b64"])
        payloads = np.frombuffer(raw, dtype=_DTYPE_NP[doc["dtype"]]).reshape(
            len(brs), shape.b_o, h, k, shape.b_i).copy()
        return cls(shape, (h, k), int(doc["out_ch"]), int(doc["in_ch"]), brs, bcs, payloads)


def compress(weights: np.ndarray, mask: BlockMask) -> BlockCooWeight:
    """Store the blocks where mask == 1; decompress(compress(W)) == apply_mask(W)."""
    w4 = _check_weight_dims(np.asarray(weights), mask)
    out_ch, h, k, in_ch = w4.shape
    b_o, b_i = mask.shape.b_o, mask.shape.b_i
    rows, cols = mask.rows, mask.cols
    padded = np.zeros((rows * b_o, h, k, cols * b_i), dtype=w4.dtype)
    padded[:out_ch, :, :, :in_ch] = w4

    rr, cc = np.nonzero(mask.bits)
    order = np.lexsort((cc, rr))
    rr, cc = rr[order], cc[order]
    payloads = np.empty((len(rr), b_o, h, k, b_i), dtype=w4.dtype)
    rels = np.empty(len(rr), dtype=np.int32)
    prev_row, prev_col = -1, 0
    for i, (r, c) in enumerate(zip(rr, cc)):
        payloads[i] = padded[r * b_o:(r + 1) * b_o, :, :, c * b_i:(c + 1) * b_i]
        rels[i] = c if r != prev_row else c - prev_col
        prev_row, prev_col = r, c
    return BlockCooWeight(mask.shape, (h, k), out_ch, in_ch,
                          rr.astype(np.int32), rels, payloads)


def decompress(w: BlockCooWeight) -> np.ndarray:
    return w.to_dense()


def sha256_hex(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def save_bcoo(path, w: BlockCooWeight) -> str:
    """Write binary sidecar, return its hash string."""
    data = w.to_bytes()
    with open(path, "wb") as fh:
        fh.write(data)
    return sha256_hex(data)


def load_bcoo(path, expect_hash: str | None = None) -> BlockCooWeight:
    with open(path, "rb") as fh:
        data = fh.read()
    if expect_hash and sha256_hex(data) != expect_hash:
        raise BlockError(f"hash mismatch for {path}")
    return BlockCooWeight.from_bytes(data)


def save_mask_json(path, mask: BlockMask) -> str:
    data = (json.dumps(mask.to_json(), indent=2, sort_keys=True) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(data)
    return sha256_hex(data)
