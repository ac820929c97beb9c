"""Round-to-nearest symmetric quantizer: W_q = Delta * Round(W / Delta),
Delta = max(|W|) / 2^(N-1).

Rounding is half-away-from-zero.  The positive maximum element maps to
exactly +2^(N-1) * Delta, so integer codes span the symmetric range
[-2^(N-1), +2^(N-1)] and are stored in int32; packing to a signed N-bit
container is the caller's concern.  An all-zero tensor yields a zero code
tensor with the sentinel Delta = 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    n_bits: int = 8
    delta: float = 1.0


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize(w: np.ndarray, n_bits: int = 8) -> tuple[np.ndarray, QuantParams]:
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise QuantError("cannot quantize an empty tensor")
    if n_bits < 2:
        raise QuantError(f"n_bits must be >= 2, got {n_bits}")
    peak = float(np.max(np.abs(w)))
    if peak == 0.0:
        return np.zeros(w.shape, dtype=np.int32), QuantParams(n_bits, 1.0)
    half = 2 ** (n_bits - 1)
    delta = peak / half
    q = _round_half_away(w / delta)
    q = np.clip(q, -half, half).astype(np.int32)
    return q, QuantParams(n_bits, delta)


def dequantize(q: np.ndarray, params: QuantParams) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * params.delta
