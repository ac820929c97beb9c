"""Per-layer feasibility, Memtile allocation, and recursive computation
splitting down to per-core subvolumes.

The mesh executes one layer at a time as a SIMD cohort: the output is
split by width across the columns (one Memtile per column holds that
slice) and by output-channel blocks across the rows.  Every core receives
a congruent, ceil-padded slice; padding waste is charged to transfers and
compute, which is what makes oversized meshes inefficient on small
problems.  Splits are tried in the order W, C_out, H, C_in: width and
channel distribution are spatial, height chunking frees Memtile space
(with DDR round trips), per-core C_out passes re-stage weights, and a
C_in split is the last resort since it accumulates partial outputs
through the Memtile.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .blocks import ceil_div
from .graph import Layer, NetGraph
from .hw import HwConfig

DDR_WEIGHT_BASE = 0x4000_0000
DDR_ACT_BASE = 0x8000_0000


class PlannerError(RuntimeError):
    """Raised when a layer cannot be made to fit after maximal splitting."""


def quant64(n: int) -> int:
    """Round a core-bound transfer up to a whole number of 8x8 payloads."""
    return ceil_div(n, 64) * 64


def act_slice_bytes(shape: tuple[int, ...], n_m: int) -> int:
    """Per-Memtile bytes of an activation tensor split evenly by width."""
    h, w, c = shape
    return h * ceil_div(w, n_m) * c


# -- geometry ---------------------------------------------------------------

@dataclass
class PassSpec:
    p: int                     # output-channel pass index
    q: int                     # input-channel pass index
    rows_per_pass: int         # block rows of output channels per core
    cin_channels: int          # input channels visited by this pass
    cohort_blocks: int         # max nonzero blocks over the row groups
    dense_blocks: int          # padded dense block count of the slice


@dataclass
class Geometry:
    """Symmetric per-core slicing of one layer on a given mesh."""
    out_h: int
    out_w: int
    out_ch: int
    in_ch: int
    kernel: tuple[int, int]
    stride: int
    pad: tuple[int, int, int, int]
    w_slice: int               # output columns per mesh column (ceil)
    in_w_slice: int            # input columns needed per column, incl. halo
    rows: int                  # mesh rows = channel groups
    cols: int                  # mesh columns = width groups
    group_ch: int              # output channels per core (ceil-padded)
    block_payload: int = 0     # bytes per weight block (conv only)
    g_br: int = 0              # weight block rows per group (conv only)
    bc: int = 0                # weight block cols (conv only)
    cin_split: int = 1
    cout_passes: int = 1
    passes: list[PassSpec] = field(default_factory=list)
    dense_total_blocks: int = 0
    cohort_total_blocks: int = 0

    @property
    def padded_out_ch(self) -> int:
        return self.rows * self.group_ch

    def padded_weight_bytes(self) -> int:
        """DDR staging bytes: every group slot holds the cohort block count."""
        return self.rows * sum(ps.cohort_blocks for ps in self.passes) * self.block_payload

    def sparsity(self) -> float:
        if self.dense_total_blocks == 0:
            return 0.0
        return 1.0 - self.cohort_total_blocks / self.dense_total_blocks


def _passes_for(geom: Geometry, grouped: np.ndarray, b_i: int,
                rpp: int, cin_split: int) -> list[PassSpec]:
    bc = grouped.shape[2]
    cin_cols = ceil_div(bc, cin_split)
    out: list[PassSpec] = []
    for p in range(ceil_div(geom.g_br, rpp)):
        r0, r1 = p * rpp, min((p + 1) * rpp, geom.g_br)
        for q in range(cin_split):
            c0, c1 = q * cin_cols, min((q + 1) * cin_cols, bc)
            if c0 >= bc:
                continue
            counts = grouped[:, r0:r1, c0:c1].sum(axis=(1, 2))
            out.append(PassSpec(p, q, r1 - r0, (c1 - c0) * b_i,
                                int(counts.max()), (r1 - r0) * (c1 - c0)))
    return out


def _search_passes(cfg: HwConfig, layer: Layer, geom: Geometry,
                   mask_bits: np.ndarray) -> None:
    """Pick the C_out pass size and C_in split so one pass fits core memory.

    The weight buffer holds the cohort's nonzero blocks, so sparser masks
    admit larger passes (fewer weight reloads) than dense ones.
    """
    b_o, b_i = layer.block.b_o, layer.block.b_i
    h, k = geom.kernel
    budget = cfg.core_buffer_bytes
    br, bc = mask_bits.shape
    bias_bytes = 4 * geom.group_ch
    padded = np.zeros((geom.rows * geom.g_br, bc), dtype=np.int64)
    padded[:br] = mask_bits
    grouped = padded.reshape(geom.rows, geom.g_br, bc)

    cin_split = 1
    while cin_split <= bc:
        cin_cols = ceil_div(bc, cin_split)
        window = 2 * geom.in_w_slice * h * cin_cols * b_i
        partial = geom.w_slice * b_o * 4 if cin_split > 1 else 0
        chosen: list[PassSpec] | None = None
        for rpp in range(geom.g_br, 0, -1):
            passes = _passes_for(geom, grouped, b_i, rpp, cin_split)
            w_bytes = max(ps.cohort_blocks for ps in passes) * geom.block_payload
            out_row = 2 * geom.w_slice * rpp * b_o * (4 if cin_split > 1 else 1)
            if window + partial + out_row + w_bytes + bias_bytes <= budget:
                chosen = passes
                break
        if chosen is not None:
            geom.cin_split = cin_split
            geom.cout_passes = max(ps.p for ps in chosen) + 1
            geom.passes = chosen
            break
        cin_split *= 2
    else:
        raise PlannerError(
            f"failed: layer {layer.id!r} subvolume exceeds core memory "
            f"after maximal splitting (budget {budget} bytes)")
    geom.dense_total_blocks = geom.rows * geom.g_br * bc
    geom.cohort_total_blocks = geom.rows * sum(ps.cohort_blocks for ps in geom.passes)


def build_geometry(layer: Layer, g: NetGraph, cfg: HwConfig) -> Geometry:
    out_shape = g.tensors[layer.output].shape
    in_shape = g.tensors[layer.inputs[0]].shape
    out_h, out_w, out_ch = out_shape
    in_ch = in_shape[2]
    cols, rows = cfg.mesh_cols, cfg.mesh_rows

    if cfg.strict_splits and out_w % cols != 0:
        raise PlannerError(
            f"failed: layer {layer.id!r} width {out_w} does not divide evenly "
            f"across {cols} columns (strict mode)")
    w_slice = ceil_div(out_w, cols)

    if layer.op in ("conv", "pool"):
        h, k = layer.kernel
        stride = layer.stride
        pad = layer.pad
        in_w_slice = min((w_slice - 1) * stride + k, in_shape[1] + pad[2] + pad[3])
    else:
        h, k = 1, 1
        stride, pad = 1, (0, 0, 0, 0)
        in_w_slice = w_slice

    geom = Geometry(out_h, out_w, out_ch, in_ch, (h, k), stride, pad,
                    w_slice, in_w_slice, rows, cols, 0)
    if layer.op == "conv":
        coo = layer.coo()
        br, bc = coo.grid
        if cfg.strict_splits and br % rows != 0:
            raise PlannerError(
                f"failed: layer {layer.id!r} cannot break {br} weight block rows "
                f"evenly across {rows} core rows (strict mode)")
        geom.g_br = ceil_div(br, rows)
        geom.bc = bc
        geom.group_ch = geom.g_br * layer.block.b_o
        geom.block_payload = coo.block_payload_bytes
        _search_passes(cfg, layer, geom, coo.mask().bits.astype(np.int64))
    else:
        geom.group_ch = ceil_div(out_ch, rows)
        geom.passes = [PassSpec(0, 0, 0, in_ch, 0, 0)]
    return geom


# -- feasibility report ------------------------------------------------------

@dataclass
class FitsReport:
    layer_id: str
    fits_memtile: bool
    fits_core: bool
    in_bytes: int              # per-Memtile activation slices
    out_bytes: int
    weight_bytes: int          # per-Memtile share of the compressed weights
    memtile_budget: int
    core_bytes: int
    core_budget: int

    @property
    def fits(self) -> bool:
        return self.fits_memtile and self.fits_core


def fits(layer: Layer, g: NetGraph, cfg: HwConfig, used_bytes: int = 0) -> FitsReport:
    """Report whether the layer's tensors fit the Memtile budget (with
    `used_bytes` already occupied) and one unsplit pass fits core memory
    with double buffering."""
    n_m = cfg.memtile_count
    in_b = sum(act_slice_bytes(g.tensors[t].shape, n_m) for t in layer.inputs)
    out_b = act_slice_bytes(g.tensors[layer.output].shape, n_m)
    geom = build_geometry(layer, g, cfg)
    w_b = ceil_div(geom.padded_weight_bytes(), n_m) if layer.op == "conv" else 0
    memtile_ok = used_bytes + in_b + out_b + w_b <= cfg.memtile_bytes

    h, _ = geom.kernel
    if layer.op == "conv":
        window = 2 * geom.in_w_slice * h * geom.bc * layer.block.b_i
        out_row = 2 * geom.w_slice * geom.group_ch
        w_core = geom.g_br * geom.bc * geom.block_payload
        core_bytes = window + out_row + w_core + 4 * geom.group_ch
    else:
        core_bytes = 2 * geom.in_w_slice * h * geom.in_ch + 2 * geom.w_slice * geom.group_ch
    return FitsReport(layer.id, memtile_ok, core_bytes <= cfg.core_buffer_bytes,
                      in_b, out_b, w_b, cfg.memtile_bytes,
                      core_bytes, cfg.core_buffer_bytes)


# -- Memtile allocator -------------------------------------------------------

@dataclass
class AllocationEntry:
    tensor_id: str
    level: str                 # memtile | ddr
    offset: int
    bytes: int
    wrapped: bool = False      # wrap is forbidden within one tensor


class MemtileAllocator:
    """First-fit interval allocator over the symmetric per-column budget.

    One address space stands for every Memtile: tensors are width-sliced
    identically across columns, so their per-Memtile intervals coincide.
    The buffer is circular in use but an allocation never wraps; a tail
    fragment too small for a request is simply skipped.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.free: list[tuple[int, int]] = [(0, capacity)]  # (offset, size)
        self.live: dict[str, tuple[int, int]] = {}

    def alloc(self, key: str, size: int) -> int | None:
        if size <= 0:
            raise PlannerError(f"allocation of {size} bytes for {key!r}")
        for i, (off, avail) in enumerate(self.free):
            if avail >= size:
                self.free[i] = (off + size, avail - size)
                if self.free[i][1] == 0:
                    del self.free[i]
                self.live[key] = (off, size)
                return off
        return None

    def release(self, key: str) -> None:
        off, size = self.live.pop(key)
        self.free.append((off, size))
        self.free.sort()
        merged: list[tuple[int, int]] = []
        for f in self.free:
            if merged and merged[-1][0] + merged[-1][1] == f[0]:
                merged[-1] = (merged[-1][0], merged[-1][1] + f[1])
            else:
                merged.append(f)
        self.free = merged

    def largest_free(self) -> tuple[int, int]:
        if not self.free:
            return (0, 0)
        return max(self.free, key=lambda f: f[1])

    def used_bytes(self) -> int:
        return self.capacity - sum(s for _, s in self.free)


@dataclass
class Allocation:
    """Tensor homes after planning: Memtile offsets, DDR addresses, or both."""
    entries: dict[str, list[AllocationEntry]] = field(default_factory=dict)
    spilled_layers: list[str] = field(default_factory=list)
    streamed_layers: list[str] = field(default_factory=list)

    def add(self, entry: AllocationEntry) -> None:
        self.entries.setdefault(entry.tensor_id, []).append(entry)

    def homes(self, tensor_id: str) -> list[str]:
        return [e.level for e in self.entries.get(tensor_id, [])]

    def memtile_entry(self, tensor_id: str) -> AllocationEntry | None:
        for e in self.entries.get(tensor_id, []):
            if e.level == "memtile":
                return e
        return None

    def ddr_entry(self, tensor_id: str) -> AllocationEntry | None:
        for e in self.entries.get(tensor_id, []):
            if e.level == "ddr":
                return e
        return None


# -- split plans and subvolumes ----------------------------------------------

@dataclass
class SplitNode:
    axis: str                  # W | Cout | H | Cin
    factor: int
    combine: str | None = None # Cin splits accumulate through an eltwise add

    def to_json(self) -> dict:
        d = {"axis": self.axis, "factor": self.factor}
        if self.combine:
            d["combine"] = self.combine
        return d


@dataclass
class SplitPlan:
    layer_id: str
    nodes: list[SplitNode]

    def to_json(self) -> dict:
        return {"layer": self.layer_id, "nodes": [n.to_json() for n in self.nodes]}


@dataclass
class Subvolume:
    """Smallest per-core unit: all cores in the cohort get congruent slices."""
    layer_id: str
    core: tuple[int, int]
    height_range: tuple[int, int]
    width_range: tuple[int, int]
    channel_range: tuple[int, int]
    weight_block_rows: tuple[int, int]
    iterations: int
    ping_pong: bool
    width: int                 # symmetric (padded) extents used for timing
    channels: int
    in_channels: int
    kernel: tuple[int, int]

    def to_json(self) -> dict:
        return {
            "layer": self.layer_id, "core": list(self.core),
            "rows": list(self.height_range), "cols": list(self.width_range),
            "channels": list(self.channel_range),
            "weight_block_rows": list(self.weight_block_rows),
            "iterations": self.iterations, "ping_pong": self.ping_pong,
        }


# -- per-layer plan ----------------------------------------------------------

@dataclass
class Phase:
    kind: str                  # head | body | tail
    iters: int
    loadfm_bytes: int          # per iteration, per column channel
    comp_macs: int             # per iteration, per core
    writefm_bytes: int         # per iteration, per column channel


@dataclass
class PassExec:
    spec: PassSpec
    loadw_bytes: int           # per Memtile when weights stream per pass
    loadwm_bytes: int          # per row-group broadcast
    phases: list[Phase]


@dataclass
class ChunkPlan:
    r0: int
    r1: int
    load_in_bytes: int         # per Memtile, 0 when the input is resident
    write_out_bytes: int       # per Memtile, 0 when the output stays resident
    passes: list[PassExec]


@dataclass
class LayerPlan:
    layer_id: str
    op: str
    resident: bool
    weights_resident: bool
    geometry: Geometry
    inputs_from: dict[str, str]
    out_to: str                # memtile | ddr | both
    chunks: list[ChunkPlan]
    split_plan: SplitPlan
    subvolumes: list[Subvolume]
    sparsity: float
    loadw_once_bytes: int      # per Memtile, when weights are staged once
    addresses: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        g = self.geometry
        return {
            "layer": self.layer_id, "op": self.op,
            "resident": self.resident,
            "weights_resident": self.weights_resident,
            "inputs_from": self.inputs_from, "out_to": self.out_to,
            "w_slice": g.w_slice, "group_channels": g.group_ch,
            "cin_split": g.cin_split, "cout_passes": g.cout_passes,
            "sparsity": round(self.sparsity, 6),
            "chunks": [[c.r0, c.r1] for c in self.chunks],
            "split": self.split_plan.to_json(),
            "addresses": self.addresses,
            "subvolumes": [s.to_json() for s in self.subvolumes],
        }


@dataclass
class PlannedGraph:
    graph: NetGraph
    cfg: HwConfig
    allocation: Allocation
    layer_plans: list[LayerPlan]

    def plan_json(self) -> dict:
        return {
            "hw": self.cfg.to_json(),
            "layers": [lp.to_json() for lp in self.layer_plans],
            "spilled": self.allocation.spilled_layers,
        }

    def dumps(self) -> str:
        return json.dumps(self.plan_json(), indent=2, sort_keys=True) + "\n"


# -- chunk search ------------------------------------------------------------

def _chunk_rows_in(geom: Geometry, r0: int, r1: int) -> tuple[int, int]:
    """Input row span needed for output rows [r0, r1), clipped and unpadded."""
    h, _ = geom.kernel
    pt = geom.pad[0]
    in_h = (geom.out_h - 1) * geom.stride + h - geom.pad[0] - geom.pad[1]
    lo = max(0, r0 * geom.stride - pt)
    hi = min(in_h, (r1 - 1) * geom.stride - pt + h)
    return lo, hi


def _find_chunks(layer: Layer, geom: Geometry, cfg: HwConfig,
                 scratch: int, w_stage: int,
                 include_input: bool = True) -> list[tuple[int, int]]:
    """Largest symmetric height chunks whose working set fits the scratch."""
    n_m = cfg.memtile_count
    n_in = len(layer.inputs) if layer.op == "eltwise" else 1
    for n_r in range(geom.out_h, 0, -1):
        lo, hi = _chunk_rows_in(geom, 0, min(n_r, geom.out_h))
        in_b = n_in * (hi - lo) * geom.in_w_slice * geom.in_ch if include_input else 0
        out_b = n_r * ceil_div(geom.out_w, n_m) * geom.out_ch
        if in_b + out_b + w_stage <= scratch:
            n_chunks = ceil_div(geom.out_h, n_r)
            if cfg.strict_splits and geom.out_h % n_chunks != 0:
                continue
            size = ceil_div(geom.out_h, n_chunks)
            return [(i * size, min((i + 1) * size, geom.out_h))
                    for i in range(n_chunks)]
    raise PlannerError(
        f"failed: layer {layer.id!r} cannot stream even one output row "
        f"through {scratch} scratch bytes")


def _phases_for(geom: Geometry, r0: int, r1: int) -> list[tuple[str, int, int]]:
    """(kind, iters, window_rows) triples for a chunk of output rows."""
    h, _ = geom.kernel
    pt = geom.pad[0] if r0 == 0 else 0
    pb = geom.pad[1] if r1 == geom.out_h else 0
    rows = r1 - r0
    out = []
    head = 1 if pt > 0 and rows >= 1 else 0
    tail = 1 if pb > 0 and rows - head >= 1 else 0
    body = rows - head - tail
    if head:
        win = h - pt - (pb if rows == 1 else 0)
        out.append(("head", 1, max(1, win)))
    if body:
        out.append(("body", body, h))
    if tail:
        out.append(("tail", 1, max(1, h - pb)))
    return out


def _build_phases(layer: Layer, geom: Geometry, ps: PassSpec,
                  r0: int, r1: int) -> list[Phase]:
    b_o, b_i = layer.block.b_o, layer.block.b_i
    _, k = geom.kernel
    is_conv = layer.op == "conv"
    cin_last = ps.q == geom.cin_split - 1
    partial_in = quant64(geom.w_slice * ps.rows_per_pass * b_o * 4) \
        if (is_conv and ps.q > 0) else 0
    out_elem = 4 if (is_conv and geom.cin_split > 1 and not cin_last) else 1

    phases = []
    for kind, iters, win in _phases_for(geom, r0, r1):
        if is_conv:
            loadfm = quant64(win * geom.in_w_slice * ps.cin_channels) + partial_in
            macs = ps.cohort_blocks * geom.w_slice * b_o * b_i * k * win
            writefm = quant64(
                geom.rows * geom.w_slice * ps.rows_per_pass * b_o * out_elem)
        elif layer.op == "pool":
            loadfm = quant64(win * geom.in_w_slice * geom.in_ch)
            macs = geom.w_slice * geom.group_ch * geom.kernel[0] * geom.kernel[1]
            writefm = quant64(geom.rows * geom.w_slice * geom.group_ch)
        else:  # eltwise
            loadfm = len(layer.inputs) * quant64(geom.w_slice * geom.in_ch)
            macs = geom.w_slice * geom.group_ch
            writefm = quant64(geom.rows * geom.w_slice * geom.group_ch)
        phases.append(Phase(kind, iters, loadfm, macs, writefm))
    return phases


# -- the planner -------------------------------------------------------------

MOVE_OPS = ("identity", "input_boundary", "output_boundary")


def split(layer: Layer, g: NetGraph, cfg: HwConfig,
          scratch: int | None = None) -> SplitPlan:
    """Split tree for a layer: W and C_out across the mesh, then height
    chunks against the given Memtile scratch, then C_in passes."""
    geom = build_geometry(layer, g, cfg)
    nodes = [SplitNode("W", cfg.mesh_cols), SplitNode("Cout", cfg.mesh_rows)]
    if scratch is not None:
        w_stage = _stream_stage_bytes(geom, cfg)
        chunks = _find_chunks(layer, geom, cfg, scratch, w_stage)
        if len(chunks) > 1:
            nodes.append(SplitNode("H", len(chunks)))
    if geom.cout_passes > 1:
        nodes.append(SplitNode("Cout", geom.cout_passes))
    if geom.cin_split > 1:
        nodes.append(SplitNode("Cin", geom.cin_split, combine="eltwise_accumulate"))
    return SplitPlan(layer.id, nodes)


def _stream_stage_bytes(geom: Geometry, cfg: HwConfig) -> int:
    if not geom.passes or geom.block_payload == 0:
        return 0
    per_pass = max(geom.rows * ps.cohort_blocks * geom.block_payload
                   for ps in geom.passes)
    return ceil_div(per_pass, cfg.memtile_count)


def allocate(g: NetGraph, cfg: HwConfig):
    """Walk the schedule, homing tensors to Memtile or DDR.

    Greedy first-fit over the shared circular buffer; when a layer's
    inputs + output + weight share cannot all be placed, every tensor of
    that layer is evicted to DDR and the layer is marked for splitting.
    """
    n_m = cfg.memtile_count
    alloc = Allocation()
    mem = MemtileAllocator(cfg.memtile_bytes)

    last_use: dict[str, int] = {}
    for idx, l in enumerate(g.layers):
        for t in l.inputs:
            last_use[t] = idx
    for t in g.outputs:
        last_use[t] = len(g.layers)

    needs_ddr: set[str] = set(g.inputs) | set(g.outputs)
    resident: dict[str, int] = {}
    decisions: dict[str, dict] = {}
    geoms: dict[str, Geometry] = {}

    for idx, l in enumerate(g.layers):
        geom = build_geometry(l, g, cfg)
        geoms[l.id] = geom
        out_b = act_slice_bytes(g.tensors[l.output].shape, n_m)
        w_share = ceil_div(geom.padded_weight_bytes(), n_m) if l.op == "conv" else 0

        if l.op in MOVE_OPS:
            tile = l.tile or {}
            if tile.get("evict_source"):
                for t in l.inputs:
                    if t in resident:
                        mem.release(t)
                        del resident[t]
                    needs_ddr.add(t)
            virtual = bool(tile.get("virtual"))
            if l.op == "output_boundary" and l.inputs[0] not in resident:
                # the producer already streamed these rows to their DDR home
                virtual = True
            if virtual:
                needs_ddr.add(l.output)
                decisions[l.id] = {"resident": False, "scratch": None,
                                   "weights_resident": False, "virtual": True,
                                   "inputs_from": {t: "ddr" for t in l.inputs},
                                   "out_off": None}
                _release_dead(mem, resident, alloc, l, idx, last_use, g)
                continue
            # pure data movement: place the output if it fits, else DDR
            off = None if tile.get("force_ddr") else mem.alloc(l.output, out_b)
            dec = {"resident": off is not None, "scratch": None,
                   "weights_resident": False,
                   "inputs_from": {t: ("memtile" if t in resident else "ddr")
                                   for t in l.inputs},
                   "out_off": off}
            if off is not None:
                resident[l.output] = off
                alloc.add(AllocationEntry(l.output, "memtile", off, out_b))
            else:
                needs_ddr.add(l.output)
            decisions[l.id] = dec
            _release_dead(mem, resident, alloc, l, idx, last_use, g)
            continue

        todo = []
        for t in l.inputs:
            if t not in resident:
                todo.append((t, act_slice_bytes(g.tensors[t].shape, n_m)))
        placed = []
        ok = True
        for t, b in todo:
            off = mem.alloc(t, b)
            if off is None:
                ok = False
                break
            placed.append((t, off, b))
        w_off = out_off = None
        if ok and w_share:
            w_off = mem.alloc(f"w:{l.id}", w_share)
            ok = w_off is not None
        if ok:
            out_off = mem.alloc(l.output, out_b)
            ok = out_off is not None

        if ok:
            for t, off, b in placed:
                resident[t] = off
                alloc.add(AllocationEntry(t, "memtile", off, b))
            resident[l.output] = out_off
            alloc.add(AllocationEntry(l.output, "memtile", out_off, out_b))
            decisions[l.id] = {
                "mode": "full",
                "resident": True, "scratch": None, "weights_resident": w_share > 0,
                "inputs_from": {t: ("ddr" if any(t == p[0] for p in placed)
                                    else "memtile") for t in l.inputs},
                "out_off": out_off, "w_off": w_off,
            }
            # inputs loaded here came from DDR homes
            if w_share:
                mem.release(f"w:{l.id}")
            _release_dead(mem, resident, alloc, l, idx, last_use, g)
            continue

        # roll back partial placements
        for t, off, b in placed:
            mem.release(t)
        if w_off is not None:
            mem.release(f"w:{l.id}")

        # second try: keep activations resident, stream weights per pass
        if w_share:
            placed = []
            ok = True
            for t, b in todo:
                off = mem.alloc(t, b)
                if off is None:
                    ok = False
                    break
                placed.append((t, off, b))
            out_off = mem.alloc(l.output, out_b) if ok else None
            ok = out_off is not None
            if ok and mem.largest_free()[1] < _stream_stage_bytes(geom, cfg):
                ok = False
            if ok:
                for t, off, b in placed:
                    resident[t] = off
                    alloc.add(AllocationEntry(t, "memtile", off, b))
                resident[l.output] = out_off
                alloc.add(AllocationEntry(l.output, "memtile", out_off, out_b))
                decisions[l.id] = {
                    "mode": "full",
                    "resident": True, "scratch": mem.largest_free(),
                    "weights_resident": False,
                    "inputs_from": {t: ("ddr" if any(t == p[0] for p in placed)
                                        else "memtile") for t in l.inputs},
                    "out_off": out_off, "w_off": None,
                }
                _release_dead(mem, resident, alloc, l, idx, last_use, g)
                continue
            for t, off, b in placed:
                mem.release(t)
            if out_off is not None:
                mem.release(l.output)

        # middle path: inputs already resident, stream the output to DDR
        if not todo:
            w_off2 = mem.alloc(f"w:{l.id}", w_share) if w_share else None
            s_off, s_size = mem.largest_free()
            min_out = ceil_div(geom.out_w, n_m) * geom.out_ch
            w_stage = 0 if (w_off2 is not None or not w_share) \
                else _stream_stage_bytes(geom, cfg)
            if s_size >= min_out + w_stage:
                needs_ddr.add(l.output)
                alloc.streamed_layers.append(l.id)
                decisions[l.id] = {
                    "mode": "stream_out",
                    "resident": False, "scratch": (s_off, s_size),
                    "weights_resident": w_off2 is not None,
                    "inputs_from": {t: "memtile" for t in l.inputs},
                    "out_off": None, "w_off": w_off2,
                }
                if w_off2 is not None:
                    mem.release(f"w:{l.id}")
                _release_dead(mem, resident, alloc, l, idx, last_use, g)
                continue
            if w_off2 is not None:
                mem.release(f"w:{l.id}")

        # last resort: evict everything for this layer and stream both ways
        for t in l.inputs:
            if t in resident:
                mem.release(t)
                del resident[t]
            needs_ddr.add(t)
        needs_ddr.add(l.output)
        alloc.spilled_layers.append(l.id)
        s_off, s_size = mem.largest_free()
        decisions[l.id] = {
            "mode": "stream_all",
            "resident": False, "scratch": (s_off, s_size),
            "weights_resident": False,
            "inputs_from": {t: "ddr" for t in l.inputs},
            "out_off": None,
        }
        _release_dead(mem, resident, alloc, l, idx, last_use, g)

    # DDR homes: weights always, then every tensor that needs one
    ddr_addr = DDR_WEIGHT_BASE
    for l in g.layers:
        if l.op == "conv":
            b = geoms[l.id].padded_weight_bytes()
            alloc.add(AllocationEntry(f"w:{l.id}", "ddr", ddr_addr, b))
            ddr_addr += b
    ddr_addr = DDR_ACT_BASE
    for t in list(g.tensors):
        if t in needs_ddr:
            b = g.tensors[t].bytes()
            alloc.add(AllocationEntry(t, "ddr", ddr_addr, b))
            ddr_addr += b
    return alloc, decisions, geoms, needs_ddr


def _release_dead(mem, resident, alloc, layer, idx, last_use, g) -> None:
    for t in list(resident):
        if last_use.get(t, -1) <= idx and t != layer.output:
            mem.release(t)
            del resident[t]
    # a tensor never consumed again can go too, except graph outputs
    if last_use.get(layer.output, -1) <= idx and layer.output not in g.outputs:
        if layer.output in resident:
            mem.release(layer.output)
            del resident[layer.output]


def plan(g: NetGraph, cfg: HwConfig, pin_resident: set[str] | None = None) -> PlannedGraph:
    """Full plan: allocation, splits, chunks, passes, and subvolumes.

    pin_resident names tensors that must not spill (used by depth-wise
    tiling for intermediate tiles); violating a pin is a planner error.
    """
    n_m = cfg.memtile_count
    alloc, decisions, geoms, needs_ddr = allocate(g, cfg)
    if pin_resident:
        for t in sorted(pin_resident):
            if alloc.memtile_entry(t) is None or t in needs_ddr:
                raise PlannerError(
                    f"failed: tensor {t!r} was pinned resident but spilled")

    plans: list[LayerPlan] = []
    for l in g.layers:
        geom = geoms[l.id]
        dec = decisions[l.id]
        out_home = "memtile" if dec["resident"] or (l.op in MOVE_OPS and dec.get("out_off") is not None) else "ddr"
        if out_home == "memtile" and l.output in needs_ddr:
            out_home = "both"

        addresses = {}
        ddr_w = alloc.ddr_entry(f"w:{l.id}")
        if ddr_w:
            addresses["weights_ddr"] = ddr_w.offset
        me = alloc.memtile_entry(l.output)
        if me:
            addresses["out_memtile"] = me.offset
        de = alloc.ddr_entry(l.output)
        if de:
            addresses["out_ddr"] = de.offset
        for t in l.inputs:
            ie = alloc.memtile_entry(t) or alloc.ddr_entry(t)
            if ie:
                addresses[f"in_{t}"] = ie.offset
        if dec.get("w_off") is not None:
            addresses["weights_memtile"] = dec["w_off"]
        if dec.get("scratch"):
            addresses["scratch"] = dec["scratch"][0]

        if l.op in MOVE_OPS:
            plans.append(_plan_move(l, g, cfg, geom, dec, out_home, addresses))
            continue

        w_share = ceil_div(geom.padded_weight_bytes(), n_m) if l.op == "conv" else 0
        mode = dec.get("mode", "full")
        if mode == "full":
            chunks = [(0, geom.out_h)]
            split_plan = split(l, g, cfg, scratch=None)
        else:
            s_off, s_size = dec["scratch"]
            w_stage = 0
            if w_share and not dec["weights_resident"]:
                w_stage = _stream_stage_bytes(geom, cfg)
            chunks = _find_chunks(l, geom, cfg, s_size, w_stage,
                                  include_input=(mode == "stream_all"))
            split_plan = SplitPlan(l.id, [SplitNode("W", cfg.mesh_cols),
                                          SplitNode("Cout", cfg.mesh_rows)])
            if len(chunks) > 1:
                split_plan.nodes.append(SplitNode("H", len(chunks)))
            if geom.cout_passes > 1:
                split_plan.nodes.append(SplitNode("Cout", geom.cout_passes))
            if geom.cin_split > 1:
                split_plan.nodes.append(
                    SplitNode("Cin", geom.cin_split, combine="eltwise_accumulate"))

        weights_resident = bool(dec["weights_resident"])
        chunk_plans = []
        for (r0, r1) in chunks:
            load_in = write_out = 0
            if mode == "full":
                if any(v == "ddr" for v in dec["inputs_from"].values()):
                    load_in = sum(act_slice_bytes(g.tensors[t].shape, n_m)
                                  for t, v in dec["inputs_from"].items() if v == "ddr")
            elif mode == "stream_all":
                lo, hi = _chunk_rows_in(geom, r0, r1)
                load_in = (hi - lo) * geom.in_w_slice * geom.in_ch
                if l.op == "eltwise":
                    load_in = len(l.inputs) * (r1 - r0) * geom.in_w_slice * geom.in_ch
            if mode != "full":
                write_out = (r1 - r0) * ceil_div(geom.out_w, n_m) * geom.out_ch
            if out_home == "both" and mode == "full" and r1 == geom.out_h:
                write_out = act_slice_bytes(g.tensors[l.output].shape, n_m)

            passes = []
            for ps in geom.passes:
                loadw_stream = 0
                if l.op == "conv" and not weights_resident:
                    loadw_stream = ceil_div(
                        geom.rows * ps.cohort_blocks * geom.block_payload, n_m)
                loadwm = quant64(ps.cohort_blocks * geom.block_payload) \
                    if l.op == "conv" else 0
                passes.append(PassExec(ps, loadw_stream, loadwm,
                                       _build_phases(l, geom, ps, r0, r1)))
            chunk_plans.append(ChunkPlan(r0, r1, load_in, write_out, passes))

        # the resident path loads its DDR inputs once, ahead of chunk 0
        if dec["resident"] and chunk_plans and chunk_plans[0].load_in_bytes:
            for c in chunk_plans[1:]:
                c.load_in_bytes = 0

        subvols = _subvolumes(l, geom, chunks)
        plans.append(LayerPlan(
            l.id, l.op, dec["resident"], weights_resident, geom,
            dec["inputs_from"], out_home, chunk_plans, split_plan, subvols,
            geom.sparsity(),
            w_share if weights_resident else 0, addresses))
    return PlannedGraph(g, cfg, alloc, plans)


def _plan_move(l, g, cfg, geom, dec, out_home, addresses) -> LayerPlan:
    n_m = cfg.memtile_count
    src = l.inputs[0]
    load_in = write_out = 0
    if not dec.get("virtual"):
        if dec["inputs_from"].get(src) == "ddr":
            load_in = act_slice_bytes(g.tensors[l.output].shape, n_m)
        if out_home in ("ddr", "both"):
            write_out = act_slice_bytes(g.tensors[l.output].shape, n_m)
    chunk = ChunkPlan(0, geom.out_h, load_in, write_out, [])
    return LayerPlan(l.id, l.op, dec["resident"], False, geom,
                     dec["inputs_from"], out_home, [chunk],
                     SplitPlan(l.id, []), [], 0.0, 0, addresses)


def _subvolumes(l: Layer, geom: Geometry, chunks) -> list[Subvolume]:
    subs = []
    b_o = l.block.b_o if l.op == "conv" else 1
    for (r0, r1) in chunks:
        for r in range(geom.rows):
            ch0 = min(r * geom.group_ch, geom.out_ch)
            ch1 = min((r + 1) * geom.group_ch, geom.out_ch)
            for c in range(geom.cols):
                w0 = min(c * geom.w_slice, geom.out_w)
                w1 = min((c + 1) * geom.w_slice, geom.out_w)
                subs.append(Subvolume(
                    l.id, (r, c), (r0, r1), (w0, w1), (ch0, ch1),
                    (r * geom.g_br, (r + 1) * geom.g_br) if l.op == "conv" else (0, 0),
                    iterations=r1 - r0, ping_pong=(r1 - r0) > 1,
                    width=geom.w_slice, channels=geom.group_ch,
                    in_channels=geom.bc * l.block.b_i if l.op == "conv" else geom.in_ch,
                    kernel=geom.kernel))
    return subs
