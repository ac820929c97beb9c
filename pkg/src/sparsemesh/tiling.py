"""Depth-wise tiling: back-projection of output tiles through a layer
chain, generalized kernel/stride inference, live-tensor analysis, boundary
layer insertion, and unrolled schedule construction.

Tiling is by height (rows); channels are neglected by the projection.  A
chain L_0..L_j becomes a generalized convolution whose kernel k is the
input footprint of a 1x1 output tile and whose stride s is the footprint
growth per output unit.  Choosing M output tiles trades (M-1)(k-s) rows of
input reread for zero DDR traffic on the chain's intermediate tensors.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

from .blocks import ceil_div
from .graph import Layer, NetGraph, TensorRef, infer_shapes
from .hw import HwConfig
from .planner import PlannedGraph, act_slice_bytes

PROJECTABLE = ("conv", "pool", "eltwise", "identity", "tconv",
               "input_boundary", "output_boundary")


class TilingError(RuntimeError):
    pass


class InfeasibleTilingError(TilingError):
    pass


def _proj_params(layer) -> tuple[str, int, int, int]:
    """(kind, kernel_rows, stride, pad_top) for a layer or (kind, k, s) tuple."""
    if isinstance(layer, tuple):
        kind, k, s = layer
        return kind, k, s, 0
    if layer.op not in PROJECTABLE:
        raise TilingError(f"layer {layer.id!r} op {layer.op!r} is not projectable")
    if layer.op in ("conv", "pool", "tconv"):
        return layer.op, layer.kernel[0], layer.stride, layer.pad[0]
    return layer.op, 1, 1, 0


def project_rows(layer, u: int) -> int:
    """Input rows needed for u output rows of one layer (unclipped)."""
    kind, k, s, _ = _proj_params(layer)
    if u <= 0:
        raise TilingError(f"extent must be positive, got {u}")
    if kind == "tconv":
        return max(1, ceil_div(u - k, s) + 1)
    return (u - 1) * s + k


@dataclass
class Projection:
    """Per-layer required input row extents for a given output tile."""
    extents: dict[str, int]          # layer id -> rows required at its input
    input_rows: int                  # rows of the chain input tensor


def project(chain: list, u: int) -> Projection:
    """Back-propagate an output extent through a linear chain."""
    extents: dict[str, int] = {}
    cur = u
    for layer in reversed(chain):
        cur = project_rows(layer, cur)
        key = layer.id if hasattr(layer, "id") else f"op{len(extents)}"
        extents[key] = cur
    return Projection(extents, cur)


def project_graph(g: NetGraph, layer_ids: list[str], u: int) -> Projection:
    """Projection over a sub-DAG; fan-out joins take the elementwise max."""
    layers = [g.layer(lid) for lid in layer_ids]
    seg_set = {l.id for l in layers}
    need: dict[str, int] = {layers[-1].output: u}
    extents: dict[str, int] = {}
    for l in reversed(layers):
        if l.output not in need:
            raise TilingError(f"layer {l.id!r} output unused inside the segment")
        rows = project_rows(l, need[l.output])
        extents[l.id] = rows
        for t in l.inputs:
            need[t] = max(need.get(t, 0), rows)
    entry = layers[0].inputs[0]
    return Projection(extents, need[entry])


@dataclass
class GeneralizedConv:
    k: int
    s: int


def generalized_kernel(chain: list) -> GeneralizedConv:
    """k = footprint of a 1-row output; k + s = footprint of 2 rows."""
    k = project(chain, 1).input_rows
    ks = project(chain, 2).input_rows
    return GeneralizedConv(k, ks - k)


# -- live analysis and tile choice -------------------------------------------

def _tile_extents(g: NetGraph, layer_ids: list[str], u_rows: int) -> dict[str, int]:
    """Tile rows of every tensor in the segment for an output tile of u_rows."""
    layers = [g.layer(lid) for lid in layer_ids]
    need: dict[str, int] = {layers[-1].output: u_rows}
    for l in reversed(layers):
        rows = project_rows(l, need[l.output])
        for t in l.inputs:
            need[t] = max(need.get(t, 0), rows)
    return need


def live_analysis(g: NetGraph, layer_ids: list[str], u_rows: int,
                  cfg: HwConfig) -> int:
    """Peak per-Memtile bytes of active intermediate tensors while one tile
    walks the schedule; the chain input and output are not included."""
    layers = [g.layer(lid) for lid in layer_ids]
    chain_in = layers[0].inputs[0]
    chain_out = layers[-1].output
    extents = _tile_extents(g, layer_ids, u_rows)
    last_use = {}
    for i, l in enumerate(layers):
        for t in l.inputs:
            last_use[t] = i

    def tensor_bytes(t: str) -> int:
        full = g.tensors[t].shape
        rows = min(extents.get(t, full[0]), full[0])
        return act_slice_bytes((rows, full[1], full[2]), cfg.memtile_count)

    peak = 0
    live: set[str] = set()
    for i, l in enumerate(layers):
        if l.output not in (chain_in, chain_out):
            live.add(l.output)
        inter = [t for t in live | ({t for t in l.inputs} - {chain_in})
                 if t not in (chain_in, chain_out)]
        peak = max(peak, sum(tensor_bytes(t) for t in set(inter)))
        live = {t for t in live if last_use.get(t, i) > i}
    return peak


@dataclass
class TilePlan:
    layer_ids: list[str]
    m: int
    u_o: int                       # output tile rows
    k: int                         # generalized kernel
    s: int                         # generalized stride
    input_tile_rows: int           # (u_o - 1) s + k
    overlap: int                   # k - s
    reread_rows: int               # (M - 1)(k - s)
    peak_live_bytes: int

    def to_json(self) -> dict:
        return {
            "layers": self.layer_ids, "tiles": self.m, "u_o": self.u_o,
            "generalized_kernel": self.k, "generalized_stride": self.s,
            "input_tile_rows": self.input_tile_rows, "overlap": self.overlap,
            "reread_rows": self.reread_rows,
            "peak_live_bytes": self.peak_live_bytes,
        }


def _plan_for(g, layer_ids, u_o, cfg) -> TilePlan:
    chain = [g.layer(lid) for lid in layer_ids]
    gen = generalized_kernel(chain)
    out_h = g.tensors[chain[-1].output].shape[0]
    m = ceil_div(out_h, u_o)
    u_o = ceil_div(out_h, m)
    return TilePlan(list(layer_ids), m, u_o, gen.k, gen.s,
                    (u_o - 1) * gen.s + gen.k, gen.k - gen.s,
                    (m - 1) * (gen.k - gen.s),
                    live_analysis(g, layer_ids, u_o, cfg))


def choose_tiles(g: NetGraph, layer_ids: list[str], cfg: HwConfig,
                 tiles: int | None = None) -> TilePlan:
    """Largest output tile whose peak live bytes fit one Memtile (fewest
    tiles, zero DDR spill for intermediates); a fixed tile count is
    validated rather than searched."""
    chain = [g.layer(lid) for lid in layer_ids]
    out_h = g.tensors[chain[-1].output].shape[0]
    budget = cfg.memtile_bytes
    if tiles is not None:
        if tiles < 1 or tiles > out_h:
            raise InfeasibleTilingError(
                f"{tiles} tiles infeasible for {out_h} output rows")
        plan = _plan_for(g, layer_ids, ceil_div(out_h, tiles), cfg)
        if plan.peak_live_bytes > budget:
            raise InfeasibleTilingError(
                f"{tiles} tiles leave {plan.peak_live_bytes} live bytes, "
                f"over the {budget} byte Memtile")
        return plan
    lo, hi = 1, out_h
    if live_analysis(g, layer_ids, 1, cfg) > budget:
        raise InfeasibleTilingError(
            f"no feasible output tile for segment {layer_ids[0]}..{layer_ids[-1]}: "
            f"even one row exceeds the Memtile")
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if live_analysis(g, layer_ids, mid, cfg) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return _plan_for(g, layer_ids, lo, cfg)


# -- boundary insertion and unrolling ----------------------------------------

def tile_ranges(g: NetGraph, layer_ids: list[str], plan: TilePlan):
    """Per tile, per layer: output row range, input row range (clipped), and
    the pad rows the clipped carve retains."""
    chain = [g.layer(lid) for lid in layer_ids]
    out_h = g.tensors[chain[-1].output].shape[0]
    tiles = []
    for m in range(plan.m):
        a, b = m * plan.u_o, min((m + 1) * plan.u_o, out_h)
        per_layer = {}
        lo, hi = a, b
        for l in reversed(chain):
            kind, k, s, pt = _proj_params(l)
            in_h = g.tensors[l.inputs[0]].shape[0]
            raw_lo = lo * s - pt
            raw_hi = (hi - 1) * s - pt + k
            c_lo, c_hi = max(0, raw_lo), min(in_h, raw_hi)
            per_layer[l.id] = {
                "out": (lo, hi), "in": (c_lo, c_hi),
                "pad_top": c_lo - raw_lo, "pad_bottom": raw_hi - c_hi,
            }
            lo, hi = c_lo, c_hi
        tiles.append({"out": (a, b), "input": (lo, hi), "layers": per_layer})
    return tiles


def insert_boundaries(g: NetGraph, layer_ids: list[str], plan: TilePlan) -> NetGraph:
    """Graph with iteration layers bracketing the segment: I_b(M) carves the
    first tile's input window, I_e(M) copies a tile into the full output.
    Memory allocation on this schedule is legal for every iteration since
    tiles are congruent (the last may be shorter)."""
    ranges = tile_ranges(g, layer_ids, plan)
    return _build_tiled(g, layer_ids, plan, ranges[:1], single=True)


def unroll(g: NetGraph, layer_ids: list[str], plan: TilePlan) -> tuple[NetGraph, set[str]]:
    """Fully unrolled schedule I_b(0), L_0..L_n, I_e(0), ..., I_e(M-1).

    Returns the new graph and the set of tile tensors that must stay
    resident (zero DDR spill for the chain's intermediates).
    """
    ranges = tile_ranges(g, layer_ids, plan)
    return _build_tiled(g, layer_ids, plan, ranges, single=False), _pins(layer_ids, plan)


def _pins(layer_ids: list[str], plan: TilePlan) -> set[str]:
    """Tile tensors that must stay resident: the carved input and every
    intermediate; the last layer's tile may stream straight to DDR."""
    pins = set()
    for m in range(plan.m):
        pins.add(f"__tile{m}__{layer_ids[0]}__in")
        for lid in layer_ids[:-1]:
            pins.add(f"__tile{m}__{lid}")
    return pins


def _build_tiled(g: NetGraph, layer_ids: list[str], plan: TilePlan,
                 ranges, single: bool) -> NetGraph:
    chain = [g.layer(lid) for lid in layer_ids]
    seg_set = set(layer_ids)
    chain_in = chain[0].inputs[0]
    chain_out = chain[-1].output
    for l in chain[1:]:
        if len(l.inputs) != 1 or l.inputs[0] != chain[chain.index(l) - 1].output:
            raise TilingError("unroll needs a linear single-consumer segment")

    g2 = NetGraph(g.name, [], {}, list(g.inputs), list(g.outputs), dict(g.metadata))
    for tid, t in g.tensors.items():
        g2.tensors[tid] = TensorRef(tid, t.shape, t.dtype, t.scale_position)
    pre = []
    post = []
    seen_seg = False
    for l in g.layers:
        if l.id in seg_set:
            seen_seg = True
            continue
        (post if seen_seg else pre).append(copy.copy(l))
    g2.layers.extend(pre)

    full_out = g.tensors[chain_out].shape
    width, chans = g.tensors[chain_in].shape[1], g.tensors[chain_in].shape[2]
    for m, tr in enumerate(ranges):
        lo, hi = tr["input"]
        ib = Layer(id=f"ib{m}::{layer_ids[0]}", op="input_boundary",
                   inputs=[chain_in], output=f"__tile{m}__{layer_ids[0]}__in",
                   tile={"rows": [lo, hi], "out_shape": [hi - lo, width, chans],
                         "evict_source": True, "tiles": plan.m})
        g2.layers.append(ib)
        prev = ib.output
        for l in chain:
            info = tr["layers"][l.id]
            nl = copy.copy(l)
            nl.id = f"t{m}::{l.id}"
            nl.inputs = [prev]
            nl.output = f"__tile{m}__{l.id}"
            if l.op in ("conv", "pool"):
                nl.pad = (info["pad_top"], info["pad_bottom"], l.pad[2], l.pad[3])
            nl.out_shape_decl = None
            prev = nl.output
            g2.layers.append(nl)
        a, b = tr["out"]
        ie = Layer(id=f"ie{m}::{layer_ids[-1]}", op="output_boundary",
                   inputs=[prev], output=f"__tile{m}__{layer_ids[-1]}__out",
                   tile={"dst_rows": [a, b], "force_ddr": True,
                         "out_shape": [b - a, full_out[1], full_out[2]],
                         "tiles": plan.m})
        g2.layers.append(ie)
    stitch = Layer(id=f"stitch::{layer_ids[-1]}", op="output_boundary",
                   inputs=[f"__tile{len(ranges) - 1}__{layer_ids[-1]}__out"],
                   output=chain_out,
                   tile={"virtual": True, "out_shape": list(full_out)})
    g2.layers.append(stitch)
    g2.layers.extend(post)
    infer_shapes(g2)
    return g2


# -- tiled reference execution -----------------------------------------------

def execute_tiled(g: NetGraph, layer_ids: list[str], plan: TilePlan, x):
    """Run the segment tile by tile on the reference executor and stitch the
    output rows; bit-exact against the untiled chain."""
    import numpy as np
    from .refexec import run_layer

    chain = [g.layer(lid) for lid in layer_ids]
    ranges = tile_ranges(g, layer_ids, plan)
    out_shape = g.tensors[chain[-1].output].shape
    out = np.zeros(out_shape, dtype=np.int64)
    for tr in ranges:
        lo, hi = tr["input"]
        val = np.asarray(x)[lo:hi].astype(np.int64)
        for l in chain:
            info = tr["layers"][l.id]
            nl = copy.copy(l)
            if l.op in ("conv", "pool"):
                nl.pad = (info["pad_top"], info["pad_bottom"], l.pad[2], l.pad[3])
            val = run_layer(nl, [val])
        a, b = tr["out"]
        out[a:b] = val
    return out


def measured_reread_rows(g: NetGraph, layer_ids: list[str], plan: TilePlan) -> int:
    """Rows of the chain input read more than once across the tile carves."""
    ranges = tile_ranges(g, layer_ids, plan)
    total = sum(tr["input"][1] - tr["input"][0] for tr in ranges)
    lo = min(tr["input"][0] for tr in ranges)
    hi = max(tr["input"][1] for tr in ranges)
    return total - (hi - lo)


# -- segment selection over a baseline plan ------------------------------------

def spilled_runs(pg: PlannedGraph) -> list[list[str]]:
    """Maximal linear runs of projectable layers holding at least one
    spilled intermediate tensor, in schedule order."""
    g = pg.graph
    spilled_t = {t for t in g.tensors
                 if pg.allocation.memtile_entry(t) is None and t not in g.inputs}
    runs: list[list[str]] = []
    cur: list[str] = []
    for l in g.layers:
        linear = (l.op in ("conv", "pool", "identity") and len(l.inputs) == 1
                  and len(g.consumers(l.output)) <= 1)
        chained = bool(cur) and l.inputs[0] == g.layer(cur[-1]).output if cur else False
        if linear and (not cur or chained):
            cur.append(l.id)
        else:
            if len(cur) >= 2:
                runs.append(cur)
            cur = [l.id] if linear else []
    if len(cur) >= 2:
        runs.append(cur)

    out = []
    for run in runs:
        inter = [g.layer(lid).output for lid in run[:-1]]
        if any(t in spilled_t for t in inter):
            out.append(run)
    return out


def _input_tile_bytes(g: NetGraph, layer_ids: list[str], plan: TilePlan,
                      cfg: HwConfig) -> int:
    in_t = g.tensors[g.layer(layer_ids[0]).inputs[0]]
    rows = min(plan.input_tile_rows, in_t.shape[0])
    return act_slice_bytes((rows, in_t.shape[1], in_t.shape[2]), cfg.memtile_count)


def segment_feasible(g: NetGraph, layer_ids: list[str], m: int,
                     cfg: HwConfig) -> TilePlan | None:
    """Stricter than live_analysis: the carved input tile must coexist with
    the live intermediates (weights can always stream pass by pass)."""
    chain = [g.layer(lid) for lid in layer_ids]
    out_h = g.tensors[chain[-1].output].shape[0]
    if m > out_h:
        return None
    plan = _plan_for(g, layer_ids, ceil_div(out_h, m), cfg)
    if plan.peak_live_bytes + _input_tile_bytes(g, layer_ids, plan, cfg) \
            > cfg.memtile_bytes:
        return None
    return plan


def _max_weight_stage(g: NetGraph, layer_ids: list[str], cfg: HwConfig) -> int:
    from .planner import _stream_stage_bytes, build_geometry
    stage = 0
    for lid in layer_ids:
        l = g.layer(lid)
        if l.op == "conv":
            stage = max(stage, _stream_stage_bytes(build_geometry(l, g, cfg), cfg))
    return stage


def _search_tiles_strict(g: NetGraph, layer_ids: list[str],
                         cfg: HwConfig) -> TilePlan | None:
    """Fewest tiles whose intermediates plus carved input plus one staged
    weight pass fit one Memtile."""
    stage = _max_weight_stage(g, layer_ids, cfg)

    def ok(u: int) -> TilePlan | None:
        plan = _plan_for(g, layer_ids, u, cfg)
        if plan.peak_live_bytes + _input_tile_bytes(g, layer_ids, plan, cfg) \
                + stage <= cfg.memtile_bytes:
            return plan
        return None

    out_h = g.tensors[g.layer(layer_ids[-1]).output].shape[0]
    if ok(1) is None:
        return None
    lo, hi = 1, out_h
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if ok(mid) is not None:
            lo = mid
        else:
            hi = mid - 1
    return ok(lo)


def segment_benefit_ns(pg: PlannedGraph, sub: list[str], plan: TilePlan,
                       cfg: HwConfig):
    """Signed time delta of tiling a subrun: spilled intermediate round trips
    saved, minus weight rereads (DDR and the serialized core broadcasts),
    halo rereads, and any residency the chain endpoints lose."""
    from fractions import Fraction
    from .hw import bandwidth_fraction
    from .planner import build_geometry

    g = pg.graph
    alloc = pg.allocation
    n_m = cfg.memtile_count
    bw = {k: bandwidth_fraction(k, cfg) for k in
          ("LOAD", "LOADW", "WRITE", "LOADWM")}

    def round_trip(t: str) -> Fraction:
        per_mem = act_slice_bytes(g.tensors[t].shape, n_m)
        return Fraction(per_mem) / bw["WRITE"] + Fraction(per_mem) / bw["LOAD"]

    saved = Fraction(0)
    for lid in sub[:-1]:
        t = g.layer(lid).output
        if alloc.memtile_entry(t) is None:
            saved += round_trip(t)
    cost = Fraction(0)
    extra = plan.m - 1
    for lid in sub:
        l = g.layer(lid)
        if l.op == "conv":
            padded = build_geometry(l, g, cfg).padded_weight_bytes()
            cost += extra * (Fraction(padded, n_m) / bw["LOADW"]
                             + Fraction(padded) / bw["LOADWM"])
    chain_in = g.layer(sub[0]).inputs[0]
    in_shape = g.tensors[chain_in].shape
    halo = plan.reread_rows * ceil_div(in_shape[1], n_m) * in_shape[2]
    cost += Fraction(halo) / bw["LOAD"]
    if alloc.memtile_entry(chain_in) is not None and chain_in not in g.inputs:
        cost += round_trip(chain_in)
    chain_out = g.layer(sub[-1]).output
    if alloc.memtile_entry(chain_out) is not None:
        cost += round_trip(chain_out)
    return saved - cost


def find_tileable_segments(pg: PlannedGraph, m: int | None,
                           cfg: HwConfig) -> list[TilePlan]:
    """Longest feasible sub-runs of each spilled run, left to right, that
    save more DDR traffic than their rereads add."""
    g = pg.graph
    plans: list[TilePlan] = []
    for run in spilled_runs(pg):
        start = 0
        while start < len(run) - 1:
            found = None
            for length in range(len(run) - start, 1, -1):
                sub = run[start:start + length]
                inter = [g.layer(lid).output for lid in sub[:-1]]
                if not any(pg.allocation.memtile_entry(t) is None for t in inter):
                    continue
                if m is None:
                    found = _search_tiles_strict(g, sub, cfg)
                else:
                    found = segment_feasible(g, sub, m, cfg)
                if found is not None and found.m > 1 \
                        and segment_benefit_ns(pg, sub, found, cfg) > 0:
                    plans.append(found)
                    start += length
                    break
                found = None
            if found is None:
                start += 1
    return plans
