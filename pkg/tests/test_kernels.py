import numpy as np
import pytest

from sparsemesh.blocks import BlockError, BlockMask, BlockShape, compress
from sparsemesh.kernels import (block_sparse_conv, block_spmm,
                                block_spmm_stats, merge_intersect)
from conftest import random_coo, random_mask
from oracles import (block_intersection_count, dense_conv, dense_matmul,
                     masked_dense)


def full_mask(o, i, k=8):
    return BlockMask.full(o, i, BlockShape(k, k))


class TestBlockSpmm:
    def test_zero_diagonal_instance(self):
        # C = A @ [[0, B1], [B2, 0]]: C0 = A1 B2, C1 = A0 B1, C2 = A3 B2, C3 = A2 B1
        rng = np.random.RandomState(0)
        a = rng.randint(-8, 8, size=(16, 16)).astype(np.int8)
        b = rng.randint(-8, 8, size=(16, 16)).astype(np.int8)
        bits = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        b_coo = compress(b, BlockMask(bits, BlockShape(8, 8)))
        c = block_spmm(a, b_coo)
        a64, b64 = a.astype(np.int64), masked_dense(b, bits, 8)
        assert np.array_equal(c, dense_matmul(a, b64))
        blk = lambda m, r, q: m[r * 8:(r + 1) * 8, q * 8:(q + 1) * 8]
        assert np.array_equal(blk(c, 0, 0), blk(a64, 0, 1) @ blk(b64, 1, 0))
        assert np.array_equal(blk(c, 0, 1), blk(a64, 0, 0) @ blk(b64, 0, 1))
        assert np.array_equal(blk(c, 1, 0), blk(a64, 1, 1) @ blk(b64, 1, 0))
        assert np.array_equal(blk(c, 1, 1), blk(a64, 1, 0) @ blk(b64, 0, 1))

    def test_all_ones_equals_matmul(self):
        rng = np.random.RandomState(1)
        a = rng.randint(-8, 8, size=(24, 32)).astype(np.int8)
        b = rng.randint(-8, 8, size=(32, 16)).astype(np.int8)
        c = block_spmm(a, compress(b, full_mask(32, 16)))
        assert np.array_equal(c, dense_matmul(a, b))

    @pytest.mark.parametrize("seed", range(20))
    def test_random_sparse_sparse_exact(self, seed):
        rng = np.random.RandomState(seed)
        wa, ma, a = random_coo(rng, 64, 64)
        wb, mb, b = random_coo(rng, 64, 64)
        c = block_spmm((wa[:, 0, 0, :], ma), b)
        ref = dense_matmul(masked_dense(wa[:, 0, 0, :], ma.bits, 8),
                           masked_dense(wb[:, 0, 0, :], mb.bits, 8))
        assert np.array_equal(c, ref)

    def test_transpose_b(self):
        rng = np.random.RandomState(2)
        wa, ma, _ = random_coo(rng, 32, 48)
        wb, mb, b = random_coo(rng, 40, 48)
        c = block_spmm((wa[:, 0, 0, :], ma), b, transpose_b=True)
        ref = dense_matmul(masked_dense(wa[:, 0, 0, :], ma.bits, 8),
                           masked_dense(wb[:, 0, 0, :], mb.bits, 8).T)
        assert np.array_equal(c, ref)

    def test_mac_count_equals_intersection(self):
        # block products computed only where both masks agree, never more
        for seed in range(10):
            rng = np.random.RandomState(seed)
            wa, ma, _ = random_coo(rng, 32, 32)
            wb, mb, b = random_coo(rng, 32, 32)
            _, macs = block_spmm_stats((wa[:, 0, 0, :], ma), b, transpose_b=True)
            assert macs == block_intersection_count(ma.bits, mb.bits)

    def test_block_shape_mismatch(self):
        rng = np.random.RandomState(3)
        _, _, a = random_coo(rng, 32, 32)
        wb = rng.randint(-8, 8, size=(32, 32)).astype(np.int8)
        b = compress(wb, BlockMask.full(32, 32, BlockShape(16, 4)))
        with pytest.raises(BlockError):
            block_spmm(a, b)

    def test_merge_intersect(self):
        xs, ys = np.array([0, 2, 5, 7]), np.array([2, 3, 5, 6, 8])
        assert merge_intersect(xs, ys) == [(1, 0), (2, 2)]


class TestBlockSparseConv:
    def test_channel_selection_1x1(self):
        # a single nonzero identity block forwards exactly those channels
        rng = np.random.RandomState(4)
        x = rng.randint(-8, 8, size=(5, 6, 16))
        w = np.zeros((16, 1, 1, 16), dtype=np.int8)
        w[8:, 0, 0, 8:] = np.eye(8, dtype=np.int8)
        bits = np.array([[0, 0], [0, 1]], dtype=np.uint8)
        out = block_sparse_conv(x, compress(w, BlockMask(bits, BlockShape(8, 8))))
        assert np.array_equal(out[:, :, 8:], x[:, :, 8:])
        assert not out[:, :, :8].any()

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_sparse_conv_matches_dense_oracle(self, stride, pad):
        rng = np.random.RandomState(5)
        x = rng.randint(-8, 8, size=(9, 11, 16))
        w, mask, coo = random_coo(rng, 16, 16, kernel=(3, 3))
        bias = rng.randint(-16, 16, size=16)
        got = block_sparse_conv(x, coo, bias, stride=stride, pad=pad)
        ref = dense_conv(x, masked_dense_4d(w, mask), bias, stride, pad)
        assert np.array_equal(got, ref)

    def test_all_zero_mask_gives_bias(self):
        rng = np.random.RandomState(6)
        x = rng.randint(-8, 8, size=(6, 6, 16))
        w = rng.randint(-8, 8, size=(16, 3, 3, 16)).astype(np.int8)
        mask = BlockMask(np.zeros((2, 2), dtype=np.uint8), BlockShape(8, 8))
        bias = rng.randint(-9, 9, size=16)
        out = block_sparse_conv(x, compress(w, mask), bias, pad=1)
        assert np.array_equal(out, np.broadcast_to(bias, out.shape))

    def test_negative_pad_rejected(self):
        rng = np.random.RandomState(7)
        _, _, coo = random_coo(rng, 8, 8, kernel=(3, 3))
        with pytest.raises(BlockError, match="negative pad"):
            block_sparse_conv(np.zeros((4, 4, 8)), coo, pad=-1)

    def test_channel_mismatch_rejected(self):
        rng = np.random.RandomState(8)
        _, _, coo = random_coo(rng, 8, 16, kernel=(1, 1))
        with pytest.raises(BlockError, match="channel"):
            block_sparse_conv(np.zeros((4, 4, 8)), coo)


def masked_dense_4d(w, mask):
    out = w.astype(np.int64).copy()
    b_o, b_i = mask.shape.b_o, mask.shape.b_i
    for r in range(mask.rows):
        for c in range(mask.cols):
            if mask.bits[r, c] == 0:
                out[r * b_o:(r + 1) * b_o, :, :, c * b_i:(c + 1) * b_i] = 0
    return out
