"""Reference graph executor over int64 accumulators.

Runs a normalized graph numerically (no requantization between layers) so
transform passes can be checked for bit-exact equivalence: GEMM rewrites,
computation splits, and depth-wise tiling all stitch back to these values.
"""

from __future__ import annotations

import numpy as np

from .graph import GraphError, Layer, NetGraph
from .kernels import block_sparse_conv


def run_layer(layer: Layer, inputs: list[np.ndarray]) -> np.ndarray:
    if layer.op == "conv":
        return block_sparse_conv(inputs[0], layer.coo(), layer.bias,
                                 stride=layer.stride, pad=layer.pad)
    if layer.op == "pool":
        return pool(inputs[0], layer.kernel, layer.stride, layer.pad, layer.pool_mode)
    if layer.op == "eltwise":
        out = inputs[0].astype(np.int64)
        for x in inputs[1:]:
            out = out + x
        return out
    if layer.op in ("identity", "output_boundary"):
        return inputs[0].copy()
    if layer.op == "input_boundary":
        if layer.tile and "rows" in layer.tile:
            r0, r1 = layer.tile["rows"]
            return inputs[0][r0:r1].copy()
        return inputs[0].copy()
    if layer.op == "gemm":
        w = layer.weights_dense
        w2 = w[:, 0, 0, :] if w.ndim == 4 else w
        x = inputs[0]
        y = x.reshape(-1, x.shape[-1]).astype(np.int64) @ w2.T.astype(np.int64)
        if layer.bias is not None:
            y = y + layer.bias.astype(np.int64)
        return y.reshape(*x.shape[:-1], w2.shape[0])
    raise GraphError(f"cannot execute op {layer.op!r}")


def pool(x: np.ndarray, kernel, stride: int, pad, mode: str = "max") -> np.ndarray:
    h, k = kernel
    pt, pb, pl, pr = pad
    if mode == "max" and any(p > 0 for p in (pt, pb, pl, pr)):
        fill = np.iinfo(np.int64).min
    else:
        fill = 0
    xp = np.full((x.shape[0] + pt + pb, x.shape[1] + pl + pr, x.shape[2]),
                 fill, dtype=np.int64)
    xp[pt:pt + x.shape[0], pl:pl + x.shape[1]] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (h, k), axis=(0, 1))
    win = win[::stride, ::stride]
    if mode == "max":
        return win.max(axis=(3, 4))
    # avg on integers: floor division by the window size
    return win.sum(axis=(3, 4)) // (h * k)


def run_graph(g: NetGraph, feeds: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate every tensor; feeds maps graph input ids to arrays."""
    values: dict[str, np.ndarray] = {}
    for tid in g.inputs:
        if tid not in feeds:
            raise GraphError(f"missing feed for input {tid!r}")
        x = np.asarray(feeds[tid])
        want = g.tensors[tid].shape
        if len(want) == 3 and x.ndim == 2:     # lifted rank-2 input
            x = x[:, None, :]
        if tuple(x.shape) != tuple(want):
            raise GraphError(f"feed {tid!r} shape {x.shape} != declared {want}")
        values[tid] = x.astype(np.int64)
    for layer in g.layers:
        values[layer.output] = run_layer(layer, [values[t] for t in layer.inputs])
    return values
