"""Two-pass instruction emission: data movement first, then lock chains.

Per layer, pass one enumerates every load/store and compute phase from the
plan; pass two assigns per-layer monotonic lock ids, links the head, body
and tail phases into chains (k0 -> k2 -> k4 on the load side, k1 -> k3 ->
k5 on the store side) and records the dependency edges the lock simulator
checks.  The textual .bsasm form round-trips through parse_text unchanged;
the grammar is pinned in docs/formats.md.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .hw import HwConfig
from .planner import LayerPlan, PlannedGraph

PHASE_KINDS = ("head", "body", "tail")

CORE_IN_ADDR = 0x0000
CORE_OUT_ADDR = 0x2000
CORE_W_ADDR = 0x4000


class CodegenError(RuntimeError):
    pass


@dataclass
class Instr:
    kind: str                       # LOAD LOADW LOADFM LOADWM COMP WRITEFM WRITE
    layer: str
    bytes: int = 0                  # per iteration, per channel
    iters: int = 1
    macs: int = 0                   # COMP only, per iteration
    lock: str | None = None
    src_level: str = ""
    src_addr: int = 0
    dst_level: str = ""
    dst_addr: int = 0
    group: str = ""                 # pre | wm | head | body | tail | post, chunk/pass scoped
    channels: tuple = ()
    deps: list[int] = field(default_factory=list)   # indices within the layer


@dataclass
class LockChain:
    locks: list[str]

    def validate(self) -> None:
        if len(set(self.locks)) != len(self.locks):
            raise CodegenError(f"cyclic lock chain {self.locks}")


@dataclass
class LayerCode:
    layer_id: str
    instrs: list[Instr]
    chains: list[LockChain] = field(default_factory=list)


@dataclass
class Program:
    layers: list[LayerCode]

    def all_instrs(self):
        for lc in self.layers:
            for ins in lc.instrs:
                yield lc, ins

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, ins in self.all_instrs():
            out[ins.kind] = out.get(ins.kind, 0) + 1
        return out


def _phase_group(ci: int, pi: int, kind: str) -> str:
    return f"c{ci}.p{pi}.{kind}"


def emit_layer(lp: LayerPlan, cfg: HwConfig) -> LayerCode:
    """Pass one: the untied load/store/compute sequence for one layer."""
    ins: list[Instr] = []
    n_m = cfg.memtile_count
    cols = tuple(range(cfg.mesh_cols))
    geom = lp.geometry
    in_ddr = lp.addresses.get(f"in_{next(iter(lp.inputs_from), '')}", 0)
    out_mem = lp.addresses.get("out_memtile", lp.addresses.get("scratch", 0))
    out_ddr = lp.addresses.get("out_ddr", 0)
    w_ddr = lp.addresses.get("weights_ddr", 0)
    w_mem = lp.addresses.get("weights_memtile", lp.addresses.get("scratch", 0))

    for ci, chunk in enumerate(lp.chunks):
        if chunk.load_in_bytes:
            for m in range(n_m):
                ins.append(Instr(
                    "LOAD", lp.layer_id, bytes=chunk.load_in_bytes,
                    src_level="ddr", src_addr=in_ddr + chunk.r0 * geom.in_w_slice,
                    dst_level="memtile", dst_addr=lp.addresses.get("scratch", 0),
                    group=f"c{ci}.pre", channels=(("ddr.act", m),)))
        if ci == 0 and lp.weights_resident and lp.loadw_once_bytes:
            for m in range(n_m):
                ins.append(Instr(
                    "LOADW", lp.layer_id, bytes=lp.loadw_once_bytes,
                    src_level="ddr", src_addr=w_ddr,
                    dst_level="memtile", dst_addr=w_mem,
                    group=f"c{ci}.pre", channels=(("ddr.wgt", m),)))

        for pi, pe in enumerate(chunk.passes):
            if pe.loadw_bytes:
                for m in range(n_m):
                    ins.append(Instr(
                        "LOADW", lp.layer_id, bytes=pe.loadw_bytes,
                        src_level="ddr", src_addr=w_ddr,
                        dst_level="memtile", dst_addr=w_mem,
                        group=f"c{ci}.p{pi}.prew", channels=(("ddr.wgt", m),)))
            if pe.loadwm_bytes:
                for r in range(cfg.mesh_rows):
                    ins.append(Instr(
                        "LOADWM", lp.layer_id, bytes=pe.loadwm_bytes,
                        src_level="memtile", src_addr=w_mem,
                        dst_level="core", dst_addr=CORE_W_ADDR,
                        group=f"c{ci}.p{pi}.wm", channels=(("row.wgt", r),)))
            row_off = chunk.r0
            for ph in pe.phases:
                grp = _phase_group(ci, pi, ph.kind)
                src = lp.addresses.get(f"in_{next(iter(lp.inputs_from), '')}", 0)
                ins.append(Instr(
                    "LOADFM", lp.layer_id, bytes=ph.loadfm_bytes, iters=ph.iters,
                    src_level="memtile",
                    src_addr=src + row_off * geom.in_w_slice,
                    dst_level="core", dst_addr=CORE_IN_ADDR,
                    group=grp, channels=tuple(("col.dn", c) for c in cols)))
                ins.append(Instr(
                    "COMP", lp.layer_id, iters=ph.iters, macs=ph.comp_macs,
                    group=grp, channels=(("core", 0),)))
                ins.append(Instr(
                    "WRITEFM", lp.layer_id, bytes=ph.writefm_bytes, iters=ph.iters,
                    src_level="core", src_addr=CORE_OUT_ADDR,
                    dst_level="memtile",
                    dst_addr=out_mem + row_off * geom.w_slice,
                    group=grp, channels=tuple(("col.up", c) for c in cols)))
                row_off += ph.iters
        if chunk.write_out_bytes:
            for m in range(n_m):
                ins.append(Instr(
                    "WRITE", lp.layer_id, bytes=chunk.write_out_bytes,
                    src_level="memtile", src_addr=out_mem,
                    dst_level="ddr", dst_addr=out_ddr + chunk.r0 * geom.w_slice,
                    group=f"c{ci}.post",
                    channels=(("ddr.act", m), ("ddr.wgt", m))))
    return LayerCode(lp.layer_id, ins)


def chain_locks(code: LayerCode) -> LayerCode:
    """Pass two: lock assignment, head/body/tail chains, dependency edges.

    Phase transfers are numbered first so a lone conv reproduces the
    k0/k1 ... k5 pattern with chains k0->k2->k4 and k1->k3->k5; the pong
    buffer lock stays implicit.  Remaining data movement continues the same
    per-layer counter.
    """
    n = 0
    lid = code.layer_id
    for ins in code.instrs:
        if ins.group.endswith(PHASE_KINDS) and ins.kind in ("LOADFM", "WRITEFM"):
            ins.lock = f"{lid}.{n}"
            n += 1
    for ins in code.instrs:
        if ins.kind != "COMP" and ins.lock is None:
            ins.lock = f"{lid}.{n}"
            n += 1

    # chains over the load and store sides of each chunk/pass phase trio
    chains: list[LockChain] = []
    by_pass: dict[str, dict[str, list[Instr]]] = {}
    for ins in code.instrs:
        parts = ins.group.split(".")
        if parts[-1] in PHASE_KINDS and ins.kind in ("LOADFM", "WRITEFM"):
            key = ".".join(parts[:-1])
            by_pass.setdefault(key, {}).setdefault(ins.kind, []).append(ins)
    for key in by_pass:
        for kind in ("LOADFM", "WRITEFM"):
            seq = by_pass[key].get(kind, [])
            if len(seq) >= 2:
                chain = LockChain([i.lock for i in seq])
                chain.validate()
                chains.append(chain)
    code.chains = chains

    # dependency edges for the lock simulator
    idx = {id(ins): i for i, ins in enumerate(code.instrs)}
    prev_comp: Instr | None = None
    prev_any: Instr | None = None
    pending_load: list[Instr] = []
    pending_w: list[Instr] = []
    cur_phase: dict[str, Instr] = {}
    for ins in code.instrs:
        if ins.kind in ("LOAD", "LOADW"):
            (pending_load if ins.kind == "LOAD" else pending_w).append(ins)
            if prev_any is not None and prev_any.group.endswith(("post",) + PHASE_KINDS):
                ins.deps.append(idx[id(prev_any)])
        elif ins.kind == "LOADWM":
            ins.deps.extend(idx[id(p)] for p in pending_w)
        elif ins.kind == "LOADFM":
            ins.deps.extend(idx[id(p)] for p in pending_load)
            if "LOADFM" in cur_phase:
                ins.deps.append(idx[id(cur_phase["LOADFM"])])
            cur_phase["LOADFM"] = ins
        elif ins.kind == "COMP":
            if "LOADFM" in cur_phase:
                ins.deps.append(idx[id(cur_phase["LOADFM"])])
            if prev_comp is not None:
                ins.deps.append(idx[id(prev_comp)])
            prev_comp = ins
        elif ins.kind == "WRITEFM":
            if prev_comp is not None:
                ins.deps.append(idx[id(prev_comp)])
            if "WRITEFM" in cur_phase:
                ins.deps.append(idx[id(cur_phase["WRITEFM"])])
            cur_phase["WRITEFM"] = ins
        elif ins.kind == "WRITE":
            if prev_any is not None:
                ins.deps.append(idx[id(prev_any)])
        prev_any = ins
    # LOADWM gates the first COMP that follows it
    for i, ins in enumerate(code.instrs):
        if ins.kind == "COMP":
            for j in range(i - 1, -1, -1):
                pj = code.instrs[j]
                if pj.kind == "LOADWM":
                    ins.deps.append(j)
                    break
                if pj.kind == "COMP":
                    break
    return code


def emit_program(pg: PlannedGraph) -> Program:
    """Deterministic concatenation of per-layer sequences in schedule order."""
    layers = []
    for lp in pg.layer_plans:
        code = emit_layer(lp, pg.cfg)
        chain_locks(code)
        layers.append(code)
    return Program(layers)


# -- textual form ------------------------------------------------------------

_HEADER = "# bsasm v1"


def to_text(prog: Program) -> str:
    lines = [_HEADER]
    for lc in prog.layers:
        lines.append(f"## layer {lc.layer_id}")
        for chain in lc.chains:
            lines.append("## chain " + " -> ".join(chain.locks))
        for ins in lc.instrs:
            if ins.kind == "COMP":
                lines.append(f"COMP iteration {ins.iters} macs {ins.macs}")
            else:
                lines.append(
                    f"{ins.kind} lock {ins.lock} {ins.src_level} 0x{ins.src_addr:08x} "
                    f"{ins.dst_level} 0x{ins.dst_addr:08x} bytes {ins.bytes} "
                    f"iter {ins.iters}")
    return "\n".join(lines) + "\n"


_MOVE_RE = re.compile(
    r"^(?P<kind>[A-Z]+) lock (?P<lock>\S+) (?P<sl>\w+) 0x(?P<sa>[0-9a-f]+) "
    r"(?P<dl>\w+) 0x(?P<da>[0-9a-f]+) bytes (?P<bytes>\d+) iter (?P<iter>\d+)$")
_COMP_RE = re.compile(r"^COMP iteration (?P<iter>\d+) macs (?P<macs>\d+)$")


def parse_text(text: str) -> Program:
    lines = text.splitlines()
    if not lines or lines[0] != _HEADER:
        raise CodegenError("missing bsasm header")
    layers: list[LayerCode] = []
    cur: LayerCode | None = None
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("## layer "):
            cur = LayerCode(line[len("## layer "):], [])
            layers.append(cur)
            continue
        if line.startswith("## chain "):
            cur.chains.append(LockChain(line[len("## chain "):].split(" -> ")))
            continue
        m = _COMP_RE.match(line)
        if m:
            cur.instrs.append(Instr("COMP", cur.layer_id,
                                    iters=int(m["iter"]), macs=int(m["macs"])))
            continue
        m = _MOVE_RE.match(line)
        if not m:
            raise CodegenError(f"line {ln}: cannot parse {line!r}")
        cur.instrs.append(Instr(
            m["kind"], cur.layer_id, bytes=int(m["bytes"]), iters=int(m["iter"]),
            lock=m["lock"], src_level=m["sl"], src_addr=int(m["sa"], 16),
            dst_level=m["dl"], dst_addr=int(m["da"], 16)))
    return Program(layers)
