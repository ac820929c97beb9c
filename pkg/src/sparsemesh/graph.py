"""Graph intermediate representation: layers that read tensors and write
one tensor, quantized tensor metadata, shape inference, and the GEMM to
1x1-convolution normalization.

Models are JSON documents (schema in docs/formats.md) with weights either
generated from a seed descriptor or referenced as binary sidecars by
path + hash.  Graphs are immutable after load; passes return new graphs.
"""

from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import (BlockCooWeight, BlockError, BlockMask, BlockShape,
                     apply_mask, compress, load_bcoo, sha256_hex)

SCHEMA_VERSION = 1
LAYER_OPS = ("conv", "gemm", "eltwise", "pool", "identity",
             "input_boundary", "output_boundary")


class SchemaError(ValueError):
    """Model document violates the schema; carries a JSON-pointer path."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer


class GraphError(ValueError):
    pass


@dataclass
class TensorRef:
    id: str
    shape: tuple[int, ...]            # (h, w, c); rank-2 before gemm normalization
    dtype: str = "i8"                 # i32 reserved for biases
    scale_position: int = 0           # power-of-two fraction position
    residency: str = "ddr"            # ddr | memtile | both, set once planned

    def bytes(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n * (4 if self.dtype == "i32" else 1)


@dataclass
class Layer:
    id: str
    op: str
    inputs: list[str]
    output: str
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)   # top, bottom, left, right
    out_channels: int | None = None
    block: BlockShape = field(default_factory=lambda: BlockShape(8, 8))
    weights_dense: np.ndarray | None = None
    weights_coo: BlockCooWeight | None = None
    mask: BlockMask | None = None
    bias: np.ndarray | None = None
    pool_mode: str = "max"
    sparsity_exempt: bool = False
    weight_spec: dict | None = None
    bias_spec: dict | None = None
    mask_spec: dict | None = None
    out_shape_decl: tuple[int, ...] | None = None
    tile: dict | None = None          # boundary layers: tile carve/copy info

    def has_weights(self) -> bool:
        return self.op in ("conv", "gemm")

    def effective_mask(self) -> BlockMask | None:
        if not self.has_weights():
            return None
        if self.mask is not None:
            return self.mask
        if self.weights_coo is not None:
            return self.weights_coo.mask()
        w = self.weights_dense
        return BlockMask.full(w.shape[0], w.shape[-1], self.block)

    def coo(self) -> BlockCooWeight:
        """Block-compressed weights (cached); dense weights compress lazily."""
        if self.weights_coo is None:
            self.weights_coo = compress(self.weights_dense, self.effective_mask())
        return self.weights_coo

    def weight_payload_bytes(self) -> int:
        return self.coo().payload_bytes


@dataclass
class NetGraph:
    name: str
    layers: list[Layer]               # topological order
    tensors: dict[str, TensorRef]
    inputs: list[str]
    outputs: list[str]
    metadata: dict = field(default_factory=dict)

    def layer(self, lid: str) -> Layer:
        for l in self.layers:
            if l.id == lid:
                return l
        raise GraphError(f"no layer {lid!r}")

    def producer(self, tensor_id: str) -> Layer | None:
        for l in self.layers:
            if l.output == tensor_id:
                return l
        return None

    def consumers(self, tensor_id: str) -> list[Layer]:
        return [l for l in self.layers if tensor_id in l.inputs]


# -- loading ---------------------------------------------------------------

def _need(doc: dict, key: str, ptr: str):
    if key not in doc:
        raise SchemaError(f"missing required field {key!r}", ptr)
    return doc[key]


def _materialize_weights(spec: dict, out_ch: int, kernel: tuple[int, int],
                         in_ch: int, ptr: str, sidecars: dict | None,
                         base_dir) -> tuple[np.ndarray | None, BlockCooWeight | None]:
    kind = _need(spec, "kind", ptr)
    h, k = kernel
    if kind == "seed":
        rng = np.random.RandomState(int(_need(spec, "seed", ptr)))
        lo, hi = int(spec.get("low", -8)), int(spec.get("high", 8))
        return rng.randint(lo, hi, size=(out_ch, h, k, in_ch)).astype(np.int8), None
    if kind == "inline_b64":
        raw = base64.b64decode(spec["data"])
        dense = np.frombuffer(raw, dtype=np.int8).reshape(out_ch, h, k, in_ch).copy()
        return dense, None
    if kind == "sidecar":
        path = _need(spec, "path", ptr)
        expect = spec.get("hash")
        fmt = spec.get("format", "bcoo")
        if sidecars is not None and path in sidecars:
            data = sidecars[path]
            if expect and sha256_hex(data) != expect:
                raise SchemaError(f"hash mismatch for sidecar {path!r}", ptr)
            if fmt == "bcoo":
                return None, BlockCooWeight.from_bytes(data)
            return np.frombuffer(data, dtype=np.int8).reshape(
                out_ch, h, k, in_ch).copy(), None
        if base_dir is None:
            raise SchemaError(f"sidecar {path!r} needs a base directory or inline data", ptr)
        full = base_dir / path
        if fmt == "bcoo":
            return None, load_bcoo(full, expect)
        data = full.read_bytes()
        if expect and sha256_hex(data) != expect:
            raise SchemaError(f"hash mismatch for sidecar {path!r}", ptr)
        return np.frombuffer(data, dtype=np.int8).reshape(out_ch, h, k, in_ch).copy(), None
    raise SchemaError(f"unknown weights kind {kind!r}", ptr)


def _materialize_bias(spec: dict | None, out_ch: int, ptr: str) -> np.ndarray | None:
    if spec is None:
        return None
    kind = _need(spec, "kind", ptr)
    if kind == "zeros":
        return np.zeros(out_ch, dtype=np.int32)
    if kind == "seed":
        rng = np.random.RandomState(int(_need(spec, "seed", ptr)))
        lo, hi = int(spec.get("low", -8)), int(spec.get("high", 8))
        return rng.randint(lo, hi, size=out_ch).astype(np.int32)
    raise SchemaError(f"unknown bias kind {kind!r}", ptr)


def _materialize_mask(spec: dict | None, ptr: str, sidecars: dict | None,
                      base_dir) -> BlockMask | None:
    if spec is None:
        return None
    kind = spec.get("kind", "inline")
    if kind == "inline":
        return BlockMask.from_json(spec)
    if kind == "sidecar":
        path = _need(spec, "path", ptr)
        if sidecars is not None and path in sidecars:
            return BlockMask.from_json(json.loads(sidecars[path].decode()))
        if base_dir is None:
            raise SchemaError(f"mask sidecar {path!r} needs a base directory", ptr)
        return BlockMask.from_json(json.loads((base_dir / path).read_text()))
    raise SchemaError(f"unknown mask kind {kind!r}", ptr)


def _norm_pad(pad, ptr: str) -> tuple[int, int, int, int]:
    if isinstance(pad, int):
        out = (pad, pad, pad, pad)
    elif isinstance(pad, (list, tuple)) and len(pad) == 4:
        out = tuple(int(p) for p in pad)
    else:
        raise SchemaError("pad must be an int or [top, bottom, left, right]", ptr)
    if any(p < 0 for p in out):
        raise SchemaError(f"negative pad {out}", ptr)
    return out


def loads(doc: dict, sidecars: dict[str, bytes] | None = None,
          base_dir=None) -> NetGraph:
    """Validate and materialize a model document into a NetGraph."""
    if not isinstance(doc, dict):
        raise SchemaError("model document must be a JSON object", "/")
    version = _need(doc, "schema_version", "/schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version}", "/schema_version")
    name = doc.get("name", "model")

    tensors: dict[str, TensorRef] = {}
    inputs = []
    for i, t in enumerate(_need(doc, "inputs", "/inputs")):
        ptr = f"/inputs/{i}"
        tid = _need(t, "id", ptr)
        shape = tuple(int(d) for d in _need(t, "shape", ptr))
        if len(shape) not in (2, 3) or any(d <= 0 for d in shape):
            raise SchemaError(f"bad input shape {shape}", ptr)
        tensors[tid] = TensorRef(tid, shape, t.get("dtype", "i8"),
                                 int(t.get("scale_position", 0)))
        inputs.append(tid)

    layers: list[Layer] = []
    seen_ids = set(inputs)
    for i, ld in enumerate(_need(doc, "layers", "/layers")):
        ptr = f"/layers/{i}"
        lid = _need(ld, "id", ptr)
        op = _need(ld, "op", ptr)
        if op not in LAYER_OPS:
            raise SchemaError(f"unknown op {op!r}", ptr)
        lin = list(_need(ld, "inputs", ptr))
        lout = _need(ld, "output", ptr)
        if lout in seen_ids or lout in tensors:
            raise SchemaError(f"tensor {lout!r} produced more than once", f"{ptr}/output")
        layer = Layer(id=lid, op=op, inputs=lin, output=lout)
        layer.stride = int(ld.get("stride", 1))
        layer.pad = _norm_pad(ld.get("pad", 0), f"{ptr}/pad")
        if "kernel" in ld:
            layer.kernel = (int(ld["kernel"][0]), int(ld["kernel"][1]))
        if "block" in ld:
            layer.block = BlockShape(int(ld["block"][0]), int(ld["block"][1]))
        layer.pool_mode = ld.get("mode", "max")
        layer.sparsity_exempt = bool(ld.get("sparsity_exempt", False))
        if "out_shape" in ld:
            layer.out_shape_decl = tuple(int(d) for d in ld["out_shape"])
        if "tile" in ld:
            layer.tile = dict(ld["tile"])
        if op in ("conv", "gemm"):
            layer.out_channels = int(_need(ld, "out_channels", ptr))
            if op == "gemm":
                layer.kernel = (1, 1)
        layers.append(layer)
        layer.weight_spec = ld.get("weights")
        layer.bias_spec = ld.get("bias")
        layer.mask_spec = ld.get("mask")
        seen_ids.add(lout)

    # reference integrity
    known = set(tensors) | {l.output for l in layers}
    for i, l in enumerate(layers):
        for j, tid in enumerate(l.inputs):
            if tid not in known:
                raise SchemaError(f"dangling tensor ref {tid!r}", f"/layers/{i}/inputs/{j}")
    for j, tid in enumerate(_need(doc, "outputs", "/outputs")):
        if tid not in known:
            raise SchemaError(f"dangling output ref {tid!r}", f"/outputs/{j}")

    layers = _toposort(layers, set(inputs))
    g = NetGraph(name, layers, tensors, inputs, list(doc["outputs"]),
                 dict(doc.get("metadata", {})))
    infer_shapes(g, sidecars=sidecars, base_dir=base_dir)
    return g


def _toposort(layers: list[Layer], available: set[str]) -> list[Layer]:
    """Stable topological order; cycles reported with a back-edge."""
    pending = list(layers)
    ordered: list[Layer] = []
    avail = set(available)
    while pending:
        progressed = False
        rest = []
        for l in pending:
            if all(t in avail for t in l.inputs):
                ordered.append(l)
                avail.add(l.output)
                progressed = True
            else:
                rest.append(l)
        if not progressed:
            l = rest[0]
            missing = [t for t in l.inputs if t not in avail][0]
            raise SchemaError(
                f"cycle detected: layer {l.id!r} waits on {missing!r} "
                f"(back-edge {missing!r} -> {l.id!r})", "/layers")
        pending = rest
    return ordered


def load_model(path) -> NetGraph:
    from pathlib import Path
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"model file {path} does not exist")
    doc = json.loads(p.read_text())
    return loads(doc, base_dir=p.parent)


# -- shape inference -------------------------------------------------------

def conv_out_hw(in_h: int, in_w: int, kernel, stride: int, pad) -> tuple[int, int]:
    h, k = kernel
    pt, pb, pl, pr = pad
    oh = (in_h + pt + pb - h) // stride + 1
    ow = (in_w + pl + pr - k) // stride + 1
    return oh, ow


def infer_shapes(g: NetGraph, sidecars=None, base_dir=None) -> NetGraph:
    """Compute every tensor shape with standard conv/pool arithmetic and
    materialize layer parameters; mismatches raise SchemaError."""
    for idx, l in enumerate(g.layers):
        ptr = f"/layers/{idx}"
        in_shapes = [g.tensors[t].shape for t in l.inputs]
        if l.op == "gemm":
            s = in_shapes[0]
            in_feat = s[-1]
            out_shape = (*s[:-1], l.out_channels)
        elif l.op == "conv":
            ih, iw, ic = in_shapes[0]
            oh, ow = conv_out_hw(ih, iw, l.kernel, l.stride, l.pad)
            if oh <= 0 or ow <= 0:
                raise SchemaError(f"conv collapses spatial dims to {oh}x{ow}", ptr)
            out_shape = (oh, ow, l.out_channels)
            in_feat = ic
        elif l.op == "pool":
            ih, iw, ic = in_shapes[0]
            oh, ow = conv_out_hw(ih, iw, l.kernel, l.stride, l.pad)
            out_shape = (oh, ow, ic)
        elif l.op == "eltwise":
            for s in in_shapes[1:]:
                if s != in_shapes[0]:
                    raise SchemaError(
                        f"eltwise inputs disagree: {in_shapes[0]} vs {s}", ptr)
            out_shape = in_shapes[0]
        elif l.op in ("identity", "output_boundary"):
            out_shape = tuple(l.tile["out_shape"]) if (l.tile and "out_shape" in l.tile) \
                else in_shapes[0]
        elif l.op == "input_boundary":
            out_shape = tuple(l.tile["out_shape"]) if l.tile else in_shapes[0]
        else:  # pragma: no cover
            raise SchemaError(f"unhandled op {l.op}", ptr)

        if l.out_shape_decl and tuple(l.out_shape_decl) != tuple(out_shape):
            raise SchemaError(
                f"declared shape {l.out_shape_decl} != computed {tuple(out_shape)}", ptr)
        if l.output not in g.tensors:
            g.tensors[l.output] = TensorRef(l.output, tuple(out_shape))
        else:
            g.tensors[l.output].shape = tuple(out_shape)

        if l.has_weights() and l.weights_dense is None and l.weights_coo is None:
            if l.weight_spec is None:
                raise SchemaError("conv/gemm layer needs weights", ptr)
            kern = (1, 1) if l.op == "gemm" else l.kernel
            dense, coo = _materialize_weights(
                l.weight_spec, l.out_channels, kern, in_feat, f"{ptr}/weights",
                sidecars, base_dir)
            l.weights_dense, l.weights_coo = dense, coo
            l.bias = _materialize_bias(l.bias_spec, l.out_channels, f"{ptr}/bias")
            l.mask = _materialize_mask(l.mask_spec, f"{ptr}/mask", sidecars, base_dir)
            if l.mask is not None and l.weights_dense is not None:
                l.weights_dense = apply_mask(l.weights_dense, l.mask)
    return g


# -- GEMM normalization ----------------------------------------------------

def gemm_to_conv(layer: Layer) -> Layer:
    """Rewrite a matrix multiply as a 1x1 convolution (stride 1, no pad).

    At h = k = 1 block sparsity over the weight matrix is identical to the
    unstructured case, so masks carry over unchanged.
    """
    if layer.op != "gemm":
        raise GraphError(f"layer {layer.id!r} is not a matrix multiply")
    new = copy.copy(layer)
    new.op = "conv"
    new.kernel = (1, 1)
    new.stride = 1
    new.pad = (0, 0, 0, 0)
    if layer.weights_dense is not None and layer.weights_dense.ndim == 2:
        new.weights_dense = layer.weights_dense[:, None, None, :]
    return new


def normalize_gemm(g: NetGraph) -> NetGraph:
    """Return a graph with every GEMM rewritten and rank-2 tensors lifted to
    (rows, 1, cols) activations."""
    g2 = NetGraph(g.name, [], {}, list(g.inputs), list(g.outputs), dict(g.metadata))
    for tid, t in g.tensors.items():
        shape = t.shape if len(t.shape) == 3 else (t.shape[0], 1, t.shape[1])
        g2.tensors[tid] = TensorRef(tid, shape, t.dtype, t.scale_position)
    for l in g.layers:
        g2.layers.append(gemm_to_conv(l) if l.op == "gemm" else copy.copy(l))
    return g2


# -- saving ----------------------------------------------------------------

def to_doc(g: NetGraph) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": g.name,
        "inputs": [
            {"id": t, "shape": list(g.tensors[t].shape),
             "dtype": g.tensors[t].dtype,
             "scale_position": g.tensors[t].scale_position}
            for t in g.inputs
        ],
        "outputs": list(g.outputs),
        "layers": [],
    }
    if g.metadata:
        doc["metadata"] = g.metadata
    for l in g.layers:
        ld = {"id": l.id, "op": l.op, "inputs": list(l.inputs), "output": l.output}
        if l.op in ("conv", "gemm", "pool", "input_boundary"):
            ld["kernel"] = list(l.kernel)
            ld["stride"] = l.stride
            ld["pad"] = list(l.pad)
        if l.op == "pool":
            ld["mode"] = l.pool_mode
        if l.has_weights():
            ld["out_channels"] = l.out_channels
            ld["block"] = [l.block.b_o, l.block.b_i]
            ld["weights"] = l.weight_spec
            if l.bias_spec is not None:
                ld["bias"] = l.bias_spec
            if l.mask_spec is not None:
                ld["mask"] = l.mask_spec
            if l.sparsity_exempt:
                ld["sparsity_exempt"] = True
        if l.out_shape_decl:
            ld["out_shape"] = list(l.out_shape_decl)
        if l.tile:
            ld["tile"] = l.tile
        doc["layers"].append(ld)
    return doc


def dumps(g: NetGraph) -> str:
    """Canonical text form: sorted keys, two-space indent, trailing newline."""
    return json.dumps(to_doc(g), indent=2, sort_keys=True) + "\n"


def save_model(path, g: NetGraph) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(g))
