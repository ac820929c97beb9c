"""Pipeline orchestration shared by the HTTP service and the CLI client:
sparsify, compile (plan + codegen), estimate, and the depth-wise tiling
study."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import codegen, tiling
from .blocks import BlockShape, compress, save_bcoo, sha256_hex, sparsity_ratio
from .graph import NetGraph, dumps, loads, normalize_gemm, to_doc
from .hw import HwConfig, load_config
from .locksim import simulate
from .planner import PlannedGraph, plan
from .sparsify import ImportanceMeasure, SparsitySchedule, select_mask
from .timeline import EstimateReport, estimate_program, timeline_csv, timeline_svg


@dataclass
class SparsifyResult:
    graph: NetGraph
    doc: dict
    sidecars: dict[str, bytes]
    ratios: list[dict]


def sparsify_graph(g: NetGraph, target: float, shape: BlockShape,
                   measure: str = "l2", mode: str = "oneshot",
                   exempt_first: bool = True) -> SparsifyResult:
    """Mask every eligible conv at the target block sparsity and re-emit the
    model with block-COO weight sidecars plus JSON mask sidecars.

    The first conv of the network is exempt by default, as are layers
    flagged sparsity_exempt.
    """
    meas = ImportanceMeasure(measure)
    sched = SparsitySchedule(mode=mode, target=target, granularity=shape)
    g2 = copy.deepcopy(g)
    sidecars: dict[str, bytes] = {}
    ratios: list[dict] = []
    first_conv = next((l.id for l in g2.layers if l.op == "conv"), None)
    for l in g2.layers:
        if l.op != "conv":
            continue
        exempt = l.sparsity_exempt or (exempt_first and l.id == first_conv)
        dense = l.weights_dense if l.weights_dense is not None \
            else l.weights_coo.to_dense()
        if exempt or target == 0.0:
            mask = None
            achieved = 0.0
        else:
            mask = select_mask(dense, shape, meas, sched)
            achieved = sparsity_ratio(mask)
            l.mask = mask
            l.block = shape
            l.weights_coo = compress(dense, mask)
            l.weights_dense = None
            wname = f"w_{l.id}.bcoo"
            data = l.weights_coo.to_bytes()
            sidecars[wname] = data
            l.weight_spec = {"kind": "sidecar", "path": wname,
                             "hash": sha256_hex(data), "format": "bcoo"}
            mname = f"mask_{l.id}.json"
            import json as _json
            mdata = (_json.dumps(mask.to_json(), indent=2, sort_keys=True)
                     + "\n").encode()
            sidecars[mname] = mdata
            l.mask_spec = {"kind": "sidecar", "path": mname}
        ratios.append({"layer": l.id, "sparsity": round(achieved, 6),
                       "exempt": bool(exempt or target == 0.0)})
    return SparsifyResult(g2, to_doc(g2), sidecars, ratios)


@dataclass
class CompileResult:
    planned: PlannedGraph
    program: codegen.Program

    @property
    def asm(self) -> str:
        return codegen.to_text(self.program)


def compile_graph(g: NetGraph, cfg: HwConfig,
                  pins: set[str] | None = None) -> CompileResult:
    g2 = normalize_gemm(g)
    pg = plan(g2, cfg, pin_resident=pins)
    prog = codegen.emit_program(pg)
    simulate(prog)   # refuse to ship a program the lock checker rejects
    return CompileResult(pg, prog)


@dataclass
class EstimateResult:
    compiled: CompileResult
    report: EstimateReport
    events: list

    @property
    def total_seconds(self) -> float:
        return self.report.total_seconds

    def artifacts(self, emit: set[str]) -> dict[str, str]:
        out = {}
        if "plan" in emit:
            out["plan.json"] = self.compiled.planned.dumps()
        if "asm" in emit:
            out["program.bsasm"] = self.compiled.asm
        if "timeline" in emit:
            out["timeline.csv"] = timeline_csv(self.events)
            out["timeline.svg"] = timeline_svg(self.events)
        return out


def estimate_graph(g: NetGraph, cfg: HwConfig,
                   pins: set[str] | None = None) -> EstimateResult:
    compiled = compile_graph(g, cfg, pins=pins)
    report, events = estimate_program(compiled.program, cfg)
    return EstimateResult(compiled, report, events)


@dataclass
class TileStudyResult:
    totals: dict[str, float]
    tiles: dict[str, list[dict]]
    reports: dict[str, dict]
    estimates: dict[str, EstimateResult] = field(default_factory=dict)


def _tiled_estimate(g: NetGraph, cfg: HwConfig, tiles: int | None) -> tuple[EstimateResult, list]:
    base = estimate_graph(g, cfg)
    if tiles is not None and tiles <= 1:
        return base, []
    segments = tiling.find_tileable_segments(base.compiled.planned, tiles, cfg)
    if not segments:
        if tiles is None:
            return base, []
        raise tiling.InfeasibleTilingError(
            "no spilled segment can be tiled at the requested tile count")
    cur = g
    pins: set[str] = set()
    plans = []
    for seg_plan in segments:
        fresh = tiling.choose_tiles(cur, seg_plan.layer_ids, cfg, tiles=seg_plan.m)
        cur, seg_pins = tiling.unroll(cur, seg_plan.layer_ids, fresh)
        pins |= seg_pins
        plans.append(fresh)
    tiled = estimate_graph(cur, cfg, pins=pins)
    if tiles is None and tiled.total_seconds >= base.total_seconds:
        # zero-DDR tiles exist but do not pay off; keep the plain schedule
        return base, []
    return tiled, plans


def tile_study(g: NetGraph, cfg: HwConfig, tiles: int | None = None,
               target: float = 0.5, shape: BlockShape | None = None,
               measure: str = "l2") -> TileStudyResult:
    """The four-way comparison: spilled baseline, depth-wise tiled, sparse
    only, and tiled + sparse, under the configured DDR slowdown."""
    shape = shape or BlockShape(8, 8)
    dense = estimate_graph(g, cfg)
    tiled, tiled_plans = _tiled_estimate(g, cfg, tiles)
    sparse_g = sparsify_graph(g, target, shape, measure).graph
    sparse = estimate_graph(sparse_g, cfg)
    tiled_sparse, ts_plans = _tiled_estimate(sparse_g, cfg, tiles)
    totals = {
        "ddr_only": dense.total_seconds,
        "tiled": tiled.total_seconds,
        "sparse_only": sparse.total_seconds,
        "tiled_sparse": tiled_sparse.total_seconds,
    }
    return TileStudyResult(
        totals,
        {"tiled": [p.to_json() for p in tiled_plans],
         "tiled_sparse": [p.to_json() for p in ts_plans]},
        {k: v.report.to_json() for k, v in
         (("ddr_only", dense), ("tiled", tiled),
          ("sparse_only", sparse), ("tiled_sparse", tiled_sparse))},
        {"ddr_only": dense, "tiled": tiled,
         "sparse_only": sparse, "tiled_sparse": tiled_sparse})


def load_model_from(doc_or_path, sidecars: dict[str, bytes] | None = None) -> NetGraph:
    if isinstance(doc_or_path, dict):
        return loads(doc_or_path, sidecars=sidecars)
    from .graph import load_model
    return load_model(doc_or_path)


def hw_from(doc_or_path, ddr_slowdown: float | None = None,
            mesh: tuple[int, int] | None = None) -> HwConfig:
    if doc_or_path is None:
        doc = {}
    elif isinstance(doc_or_path, dict):
        doc = dict(doc_or_path)
    else:
        import json
        from pathlib import Path
        text = Path(doc_or_path).read_text().strip()
        doc = json.loads(text) if text else {}
    if mesh is not None:
        doc["mesh_rows"], doc["mesh_cols"] = mesh
        doc.setdefault("memtile_count", mesh[1])
    if ddr_slowdown is not None:
        doc["ddr_slowdown"] = ddr_slowdown
    return load_config(doc)
