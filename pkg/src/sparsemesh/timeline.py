"""Analytic execution-time estimation for emitted programs.

Rules: compute time is operations divided by the peak MAC rate; transfers
are bytes over the per-kind channel bandwidth.  Single-iteration phases run
load, compute, store one after the other; multi-iteration phases pipeline
the three stages so the phase span is max(stage) * iterations.  DDR
activation and weight loads overlap on their two channels, weight
broadcasts to the cores halt everything and serialize, and every core of
the cohort runs the same span in parallel.

Spans are exact rationals in nanoseconds internally (no float drift);
reports convert to microseconds and seconds at the edge.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

from .codegen import Instr, Program
from .hw import HwConfig, bandwidth_fraction
from .planner import Subvolume

LANES = ("LOAD", "LOADW", "LOADFM", "LOADWM", "COMP", "WRITEFM", "WRITE")


@dataclass
class TimelineEvent:
    instr: str                 # lock id or kind tag
    lane: str                  # instruction kind
    layer: str
    start_ns: Fraction
    duration_ns: Fraction
    channels: tuple = ()

    @property
    def end_ns(self) -> Fraction:
        return self.start_ns + self.duration_ns

    @property
    def start_us(self) -> float:
        return float(self.start_ns) / 1000.0

    @property
    def duration_us(self) -> float:
        return float(self.duration_ns) / 1000.0


@dataclass
class LayerEstimate:
    layer: str
    start_ns: Fraction
    total_ns: Fraction
    comp_ns: Fraction
    comm_ns: Fraction
    kind_bytes: dict[str, int]
    kind_ns: dict[str, Fraction]

    @property
    def bottleneck(self) -> str:
        return "compute-bound" if self.comp_ns >= self.comm_ns else "communication-bound"

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "start_us": float(self.start_ns) / 1e3,
            "total_us": float(self.total_ns) / 1e3,
            "comp_us": float(self.comp_ns) / 1e3,
            "comm_us": float(self.comm_ns) / 1e3,
            "bottleneck": self.bottleneck,
            "bytes": dict(sorted(self.kind_bytes.items())),
            "us_per_kind": {k: float(v) / 1e3 for k, v in sorted(self.kind_ns.items())},
        }


@dataclass
class EstimateReport:
    total_ns: Fraction
    layers: list[LayerEstimate]

    @property
    def total_seconds(self) -> float:
        return float(self.total_ns) / 1e9

    def kind_totals(self) -> dict[str, dict]:
        agg: dict[str, dict] = {}
        for le in self.layers:
            for k, b in le.kind_bytes.items():
                a = agg.setdefault(k, {"bytes": 0, "us": 0.0})
                a["bytes"] += b
                a["us"] += float(le.kind_ns.get(k, 0)) / 1e3
        return dict(sorted(agg.items()))

    def to_json(self) -> dict:
        return {
            "total_seconds": self.total_seconds,
            "per_kind": self.kind_totals(),
            "layers": [le.to_json() for le in self.layers],
        }


def comp_ns(macs, cfg: HwConfig) -> Fraction:
    """Cycles = MACs / peak MACs per cycle, at clock_ghz cycles per ns."""
    return Fraction(macs) / (Fraction(cfg.macs_per_cycle) * Fraction(str(cfg.clock_ghz)))


def estimate_comp(sv: Subvolume, sparsity: float, cfg: HwConfig) -> float:
    """Microseconds for one subvolume: rows*width*C_out*C_in*h*k MACs,
    scaled by (1 - S), over macs_per_cycle at clock_ghz."""
    h, k = sv.kernel
    macs = Fraction(sv.iterations * sv.width * sv.channels * sv.in_channels * h * k)
    macs *= (1 - Fraction(str(sparsity)))
    return float(comp_ns(macs, cfg)) / 1e3


def transfer_ns(ins: Instr, cfg: HwConfig) -> Fraction:
    return Fraction(ins.bytes) / bandwidth_fraction(ins.kind, cfg)


def estimate_transfer(ins: Instr, cfg: HwConfig) -> float:
    """Microseconds for one iteration of a data-movement instruction."""
    return float(transfer_ns(ins, cfg)) / 1e3


def _instr_ns(ins: Instr, cfg: HwConfig) -> Fraction:
    if ins.kind == "COMP":
        return comp_ns(ins.macs, cfg)
    return transfer_ns(ins, cfg)


def estimate_program(prog: Program, cfg: HwConfig) -> tuple[EstimateReport, list[TimelineEvent]]:
    """Per-instruction spans, per-layer totals, and the network total."""
    events: list[TimelineEvent] = []
    layer_reports: list[LayerEstimate] = []
    clock = Fraction(0)

    for lc in prog.layers:
        layer_start = clock
        comp_total = Fraction(0)
        comm_total = Fraction(0)
        kind_bytes: dict[str, int] = {}
        kind_ns: dict[str, Fraction] = {}

        groups: list[list[Instr]] = []
        for ins in lc.instrs:
            if groups and groups[-1][0].group == ins.group:
                groups[-1].append(ins)
            else:
                groups.append([ins])

        for grp in groups:
            tag = grp[0].group.split(".")[-1]
            per = [(_instr_ns(i, cfg), i) for i in grp]
            if tag in ("pre", "prew", "post"):
                # parallel DDR channels; per-channel queues serialize
                chan_clock: dict = {}
                end = clock
                for dur, i in per:
                    start = max((chan_clock.get(c, clock) for c in i.channels),
                                default=clock)
                    events.append(TimelineEvent(i.lock or i.kind, i.kind, lc.layer_id,
                                                start, dur, i.channels))
                    for c in i.channels:
                        chan_clock[c] = start + dur
                    end = max(end, start + dur)
                advance = end
            elif tag == "wm":
                # synchronous and halting: weight broadcasts serialize
                t = clock
                for dur, i in per:
                    events.append(TimelineEvent(i.lock or i.kind, i.kind, lc.layer_id,
                                                t, dur, i.channels))
                    t += dur
                advance = t
            elif tag == "body" and grp[0].iters > 1:
                iters = grp[0].iters
                span = max(dur for dur, _ in per) * iters
                for dur, i in per:
                    events.append(TimelineEvent(i.lock or i.kind, i.kind, lc.layer_id,
                                                clock, dur * iters, i.channels))
                advance = clock + span
            else:
                # iteration one (or head/tail): synchronous and sequential
                t = clock
                for dur, i in per:
                    events.append(TimelineEvent(i.lock or i.kind, i.kind, lc.layer_id,
                                                t, dur * i.iters, i.channels))
                    t += dur * i.iters
                advance = t
            for dur, i in per:
                total = dur * i.iters
                if i.kind == "COMP":
                    comp_total += total
                else:
                    comm_total += total
                    kind_bytes[i.kind] = kind_bytes.get(i.kind, 0) + i.bytes * i.iters
                kind_ns[i.kind] = kind_ns.get(i.kind, Fraction(0)) + total
            clock = advance

        layer_reports.append(LayerEstimate(
            lc.layer_id, layer_start, clock - layer_start,
            comp_total, comm_total, kind_bytes, kind_ns))

    return EstimateReport(clock, layer_reports), events


# -- export ------------------------------------------------------------------

CSV_HEADER = ("instruction", "lane", "layer", "start_us", "duration_us")


def timeline_csv(events: list[TimelineEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for ev in sorted(events, key=lambda e: (e.start_ns, e.lane, e.instr)):
        w.writerow((ev.instr, ev.lane, ev.layer,
                    f"{ev.start_us:.6f}", f"{ev.duration_us:.6f}"))
    return buf.getvalue()


_LANE_COLORS = {
    "LOAD": "#1f77b4", "LOADW": "#9467bd", "LOADFM": "#2ca02c",
    "LOADWM": "#8c564b", "COMP": "#d62728", "WRITEFM": "#ff7f0e",
    "WRITE": "#7f7f7f",
}


def timeline_svg(events: list[TimelineEvent], width: int = 1000) -> str:
    """Deterministic Gantt rendering, one lane per instruction kind."""
    lane_h, pad = 28, 4
    height = lane_h * len(LANES) + 40
    end = max((float(e.end_ns) for e in events), default=1.0) or 1.0
    scale = (width - 120) / end
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<text x="4" y="14">total {end / 1e3:.3f} us</text>',
    ]
    for li, lane in enumerate(LANES):
        y = 24 + li * lane_h
        parts.append(f'<text x="4" y="{y + lane_h - 10}">{lane}</text>')
        for ev in sorted(events, key=lambda e: (e.start_ns, e.instr)):
            if ev.lane != lane or ev.duration_ns == 0:
                continue
            x = 100 + float(ev.start_ns) * scale
            w = max(0.5, float(ev.duration_ns) * scale)
            parts.append(
                f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{lane_h - pad}" '
                f'fill="{_LANE_COLORS[lane]}"><title>{ev.instr}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_timeline(events: list[TimelineEvent], fmt: str, path) -> None:
    if fmt == "csv":
        text = timeline_csv(events)
    elif fmt == "svg":
        text = timeline_svg(events)
    else:
        raise ValueError(f"unknown timeline format {fmt!r}")
    with open(path, "w") as fh:
        fh.write(text)
