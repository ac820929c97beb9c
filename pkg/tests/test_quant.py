import numpy as np
import pytest

from sparsemesh.quant import QuantError, QuantParams, dequantize, quantize
from oracles import quantize_by_hand


def test_worked_example():
    # max 1.0 at 8 bits: delta = 1/128; 0.3 rounds to code 38
    q, p = quantize(np.array([-1.0, 0.3, 1.0]), 8)
    assert p.delta == 1.0 / 128 == 0.0078125
    deq = dequantize(q, p)
    assert deq[1] == 38 * p.delta == 0.296875
    hand, hd = quantize_by_hand([-1.0, 0.3, 1.0], 8)
    assert hd == p.delta
    assert np.allclose(deq, hand)


def test_max_element_fixed_point():
    # the peak maps to exactly 2^(N-1) * delta = max(|W|)
    q, p = quantize(np.array([0.5]), 8)
    assert q[0] == 128
    assert dequantize(q, p)[0] == 0.5


def test_all_zero_sentinel():
    q, p = quantize(np.zeros((3, 3)), 8)
    assert not q.any()
    assert p == QuantParams(8, 1.0)


def test_round_half_away_from_zero():
    q, p = quantize(np.array([1.0, 3.5 / 128, -3.5 / 128]), 8)
    assert q[1] == 4 and q[2] == -4


def test_error_bound_random():
    for seed in range(100):
        rng = np.random.RandomState(seed)
        w = rng.randn(*rng.randint(1, 9, size=rng.randint(1, 4))) * rng.uniform(0.1, 10)
        q, p = quantize(w, 8)
        assert np.all(np.abs(dequantize(q, p) - w) <= p.delta / 2 + 1e-15), f"seed {seed}"


def test_other_bit_widths():
    q, p = quantize(np.array([-2.0, 2.0]), 4)
    assert p.delta == 2.0 / 8
    assert q.tolist() == [-8, 8]


def test_errors():
    with pytest.raises(QuantError):
        quantize(np.array([]), 8)
    with pytest.raises(QuantError):
        quantize(np.array([1.0]), 1)
