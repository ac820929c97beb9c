"""Reference block-sparse kernels.

These are correctness oracles and payload producers, not tuned code: the
matmul walks the nonzero-block index lists of both operands with a merge
intersection, the convolution accumulates one nonzero block at a time.
Integer payloads give exact results (int64 accumulation).
"""

from __future__ import annotations

import numpy as np

from .blocks import BlockCooWeight, BlockError, BlockMask, ceil_div, compress


def _acc_dtype(dtype) -> np.dtype:
    return np.dtype(np.float64) if np.issubdtype(dtype, np.floating) else np.dtype(np.int64)


def _as_block_matrix(a, k: int | None = None) -> BlockCooWeight:
    """Normalize a matmul operand: block-COO, (dense, mask), or plain dense."""
    if isinstance(a, BlockCooWeight):
        if a.kernel_hw != (1, 1):
            raise BlockError("matmul operands must have a 1x1 kernel")
        return a
    if isinstance(a, tuple):
        dense, mask = a
        return compress(np.asarray(dense), mask)
    dense = np.asarray(a)
    if dense.ndim != 2:
        raise BlockError(f"dense matmul operand must be 2-D, got ndim={dense.ndim}")
    if k is None:
        raise BlockError("block extent required for a dense operand without a mask")
    from .blocks import BlockShape
    mask = BlockMask.full(dense.shape[0], dense.shape[1], BlockShape(k, k))
    return compress(dense, mask)


def merge_intersect(xs: np.ndarray, ys: np.ndarray) -> list[tuple[int, int]]:
    """Positions (i, j) with xs[i] == ys[j]; both inputs sorted ascending."""
    out = []
    i = j = 0
    while i < len(xs) and j < len(ys):
        if xs[i] == ys[j]:
            out.append((i, j))
            i += 1
            j += 1
        elif xs[i] < ys[j]:
            i += 1
        else:
            j += 1
    return out


def block_spmm_stats(a, b, transpose_b: bool = False):
    """Block-sparse matmul with the block multiply-accumulate count.

    Computes dense C = A_masked @ B_masked (or @ B_masked^T).  Products are
    formed only where both block masks are 1, found by merge-sorting the
    per-row (transposed B) or per-column block index lists.
    """
    if isinstance(b, BlockCooWeight) and b.kernel_hw != (1, 1):
        raise BlockError("matmul operands must have a 1x1 kernel")
    if not isinstance(b, BlockCooWeight):
        raise BlockError("b must be block-COO compressed")
    a = _as_block_matrix(a, k=b.shape.b_o)
    if a.shape.b_o != a.shape.b_i or b.shape.b_o != b.shape.b_i:
        raise BlockError("matmul blocks must be square k x k")
    if a.shape.b_o != b.shape.b_o:
        raise BlockError(f"block extent mismatch: {a.shape.b_o} vs {b.shape.b_o}")
    k = a.shape.b_o

    if transpose_b:
        inner_b, out_b = b.in_ch, b.out_ch
    else:
        inner_b, out_b = b.out_ch, b.in_ch
    if a.in_ch != inner_b:
        raise BlockError(f"inner dimensions disagree: {a.in_ch} vs {inner_b}")

    acc = _acc_dtype(a.payloads.dtype)
    rows_a, _ = a.grid
    n_out_blocks = ceil_div(out_b, k)
    c = np.zeros((rows_a * k, n_out_blocks * k), dtype=acc)

    a_cols = a.row_lists()
    a_idx = a.row_index()
    if transpose_b:
        # B^T: C[i, j] = sum_k A[i, k] * B[j, k]^T; walk B's block rows.
        b_lists, b_idx = b.row_lists(), b.row_index()
    else:
        # plain B: C[i, j] = sum_k A[i, k] * B[k, j]; walk B's block columns.
        cols = b.block_cols
        idx = np.arange(b.n_blocks)
        b_lists, b_idx = [], []
        for j in range(n_out_blocks):
            sel = cols == j
            rows_of_j = b.block_rows[sel]
            order = np.argsort(rows_of_j, kind="stable")
            b_lists.append(rows_of_j[order])
            b_idx.append(idx[sel][order])

    ap = a.payloads[:, :, 0, 0, :]
    bp = b.payloads[:, :, 0, 0, :]
    macs = 0
    for i in range(rows_a):
        for j in range(n_out_blocks):
            hits = merge_intersect(a_cols[i], b_lists[j])
            if not hits:
                continue
            blk = np.zeros((k, k), dtype=acc)
            for (ia, ib) in hits:
                lhs = ap[a_idx[i][ia]].astype(acc)
                rhs = bp[b_idx[j][ib]].astype(acc)
                blk += lhs @ (rhs.T if transpose_b else rhs)
            macs += len(hits)
            c[i * k:(i + 1) * k, j * k:(j + 1) * k] = blk
    return c[:a.out_ch, :out_b], macs


def block_spmm(a, b, transpose_b: bool = False) -> np.ndarray:
    c, _ = block_spmm_stats(a, b, transpose_b=transpose_b)
    return c


def _norm_pad(pad) -> tuple[int, int, int, int]:
    if isinstance(pad, int):
        pad = (pad, pad, pad, pad)
    pad = tuple(int(p) for p in pad)
    if len(pad) != 4:
        raise BlockError("pad must be an int or (top, bottom, left, right)")
    if any(p < 0 for p in pad):
        raise BlockError(f"negative pad {pad}")
    return pad


def block_sparse_conv(x: np.ndarray, w: BlockCooWeight,
                      bias: np.ndarray | None = None,
                      stride: int = 1, pad=0) -> np.ndarray:
    """Convolve an L x J x I input with block-COO weights.

    Equals a dense convolution with the masked weights; skipped blocks
    contribute nothing.  Output is M x N x O with int64 (or float64)
    accumulation, bias added per output channel.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise BlockError(f"input must be 3-D (rows, cols, channels), got ndim={x.ndim}")
    if x.shape[2] != w.in_ch:
        raise BlockError(f"input channel axis {x.shape[2]} != weight in_ch {w.in_ch}")
    pt, pb, pl, pr = _norm_pad(pad)
    if stride < 1:
        raise BlockError(f"stride must be >= 1, got {stride}")
    h, k = w.kernel_hw
    rows_g, cols_g = w.grid
    b_o, b_i = w.shape.b_o, w.shape.b_i

    acc = _acc_dtype(np.result_type(x.dtype, w.payloads.dtype))
    xp = np.zeros((x.shape[0] + pt + pb, x.shape[1] + pl + pr, cols_g * b_i), dtype=acc)
    xp[pt:pt + x.shape[0], pl:pl + x.shape[1], :x.shape[2]] = x

    out_h = (xp.shape[0] - h) // stride + 1
    out_w = (xp.shape[1] - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise BlockError("kernel larger than padded input")
    out = np.zeros((out_h, out_w, rows_g * b_o), dtype=acc)

    win = np.lib.stride_tricks.sliding_window_view(xp, (h, k), axis=(0, 1))
    win = win[::stride, ::stride]  # (out_h, out_w, C, h, k)
    cols_abs = w.block_cols
    for i in range(w.n_blocks):
        r, c = int(w.block_rows[i]), int(cols_abs[i])
        patch = win[:, :, c * b_i:(c + 1) * b_i]       # (oh, ow, b_i, h, k)
        pl_blk = w.payloads[i].astype(acc)             # (b_o, h, k, b_i)
        out[:, :, r * b_o:(r + 1) * b_o] += np.einsum(
            "xyihk,ohki->xyo", patch, pl_blk, optimize=True)
    out = out[:, :, :w.out_ch]
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (w.out_ch,):
            raise BlockError(f"bias length {bias.shape} != out channels {w.out_ch}")
        out = out + bias.astype(acc)
    return out
