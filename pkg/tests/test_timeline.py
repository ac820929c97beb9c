from fractions import Fraction

import numpy as np
import pytest

from sparsemesh.codegen import Instr, LayerCode, Program, emit_program
from sparsemesh.fixtures import fixture_graph
from sparsemesh.graph import loads
from sparsemesh.pipeline import estimate_graph, hw_from, sparsify_graph
from sparsemesh.planner import Subvolume, plan
from sparsemesh.timeline import (estimate_comp, estimate_program,
                                 estimate_transfer, timeline_csv, timeline_svg)
from sparsemesh.blocks import BlockShape


def one_row_subvolume(width=56, ch=64, in_ch=64):
    return Subvolume("l", (0, 0), (0, 1), (0, width), (0, ch), (0, 8),
                     iterations=1, ping_pong=False, width=width, channels=ch,
                     in_channels=in_ch, kernel=(3, 3))


class TestComp:
    def test_worked_example_to_the_nanosecond(self, hw44):
        # 56 * 64 * 64 * 9 = 2,064,384 MACs -> 8064 cycles -> 8.064 us
        sv = one_row_subvolume()
        assert estimate_comp(sv, 0.0, hw44) == 8.064

    def test_half_sparsity_halves(self, hw44):
        assert estimate_comp(one_row_subvolume(), 0.5, hw44) == 4.032

    def test_zero_size_slice(self, hw44):
        sv = one_row_subvolume(width=0)
        assert estimate_comp(sv, 0.0, hw44) == 0.0


class TestTransfer:
    def load_instr(self, kind, nbytes):
        return Instr(kind, "l", bytes=nbytes, channels=(("ddr.act", 0),),
                     group="c0.pre")

    def test_1mb_load_shared(self, hw44):
        assert estimate_transfer(self.load_instr("LOAD", 10**6), hw44) == 250.0

    def test_1mb_write_both_channels(self, hw44):
        assert estimate_transfer(self.load_instr("WRITE", 10**6), hw44) == 125.0

    def test_slowdown_16(self):
        cfg = hw_from({"ddr_slowdown": 16})
        assert estimate_transfer(self.load_instr("LOAD", 10**6), cfg) == 4000.0


class TestProgram:
    def single_write_program(self, nbytes=10**6):
        ins = Instr("WRITE", "l", bytes=nbytes, group="c0.post",
                    channels=(("ddr.act", 0), ("ddr.wgt", 0)), lock="l.0")
        return Program([LayerCode("l", [ins])])

    def test_single_write_total(self, hw44):
        report, events = estimate_program(self.single_write_program(), hw44)
        assert report.total_ns == Fraction(125000)
        assert report.total_seconds == 125e-6

    def test_pipelined_span_is_max_times_iters(self, hw44):
        g = loads({
            "schema_version": 1, "name": "t",
            "inputs": [{"id": "x", "shape": [10, 16, 64]}],
            "outputs": ["y"],
            "layers": [{"id": "c", "op": "conv", "inputs": ["x"], "output": "y",
                        "kernel": [3, 3], "stride": 1, "pad": 0,
                        "out_channels": 64, "weights": {"kind": "seed", "seed": 1}}],
        })
        prog = emit_program(plan(g, hw44))
        report, events = estimate_program(prog, hw44)
        body = [e for e in events if e.lane in ("LOADFM", "COMP", "WRITEFM")]
        iters = 8
        per_iter = [e.duration_ns / iters for e in body]
        starts = {e.start_ns for e in body}
        assert len(starts) == 1                      # stages run in parallel
        span = max(e.end_ns for e in body) - min(starts)
        assert span == max(per_iter) * iters         # never the sum

    def test_head_body_tail_shape(self, hw44):
        g = loads({
            "schema_version": 1, "name": "t",
            "inputs": [{"id": "x", "shape": [11, 16, 64]}],
            "outputs": ["y"],
            "layers": [{"id": "c", "op": "conv", "inputs": ["x"], "output": "y",
                        "kernel": [3, 3], "stride": 1, "pad": 1,
                        "out_channels": 64, "weights": {"kind": "seed", "seed": 1}}],
        })
        report, events = estimate_program(emit_program(plan(g, hw44)), hw44)
        comp = [e for e in events if e.lane == "COMP"]
        head, body, tail = comp
        assert head.duration_ns < body.duration_ns
        assert head.end_ns <= body.start_ns <= tail.start_ns

    def test_sparsity_never_slower_per_layer(self, hw44):
        g = fixture_graph("smallcnn")
        prev = None
        for target in (0.0, 0.25, 0.5, 0.75):
            sg = sparsify_graph(g, target, BlockShape(8, 8)).graph
            est = estimate_graph(sg, hw44)
            totals = [le.total_ns for le in est.report.layers]
            if prev is not None:
                assert all(t <= p for t, p in zip(totals, prev))
            prev = totals

    def test_channel_exclusivity(self, hw44):
        est = estimate_graph(fixture_graph("resnet_like"), hw44)
        by_channel = {}
        for ev in est.events:
            if ev.duration_ns == 0:
                continue
            for ch in ev.channels:
                by_channel.setdefault(ch, []).append((ev.start_ns, ev.end_ns))
        for ch, spans in by_channel.items():
            spans.sort()
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                assert s2 >= e1, f"overlap on {ch}"

    def test_doubling_bandwidth_halves_transfers_exactly(self):
        g = fixture_graph("smallcnn")
        c1 = hw_from(None)
        c2 = hw_from({"ddr_channel_gbps": 8.0, "memtile_core_gbps": 8.0})
        e1 = estimate_graph(g, c1)
        e2 = estimate_graph(g, c2)
        for a, b in zip(e1.events, e2.events):
            assert a.lane == b.lane
            if a.lane != "COMP":
                assert b.duration_ns * 2 == a.duration_ns
            else:
                assert b.duration_ns == a.duration_ns

    def test_bit_identical_reports(self, hw44):
        g = fixture_graph("inception_like")
        a = estimate_graph(g, hw44)
        b = estimate_graph(g, hw44)
        assert a.report.to_json() == b.report.to_json()
        assert timeline_csv(a.events) == timeline_csv(b.events)

    def test_bottleneck_tags(self, hw44):
        est = estimate_graph(fixture_graph("smallcnn"), hw44)
        for le in est.report.layers:
            assert le.bottleneck in ("compute-bound", "communication-bound")
            assert le.total_ns >= 0

    def test_total_equals_last_event_end(self, hw44):
        est = estimate_graph(fixture_graph("smallcnn"), hw44)
        assert est.report.total_ns == max(e.end_ns for e in est.events)


class TestExport:
    def test_empty_csv_has_header(self):
        assert timeline_csv([]) == "instruction,lane,layer,start_us,duration_us\n"

    def test_rows_sorted_by_start(self, hw44):
        est = estimate_graph(fixture_graph("smallcnn"), hw44)
        lines = timeline_csv(est.events).splitlines()[1:]
        starts = [float(l.split(",")[3]) for l in lines]
        assert starts == sorted(starts)

    def test_svg_lanes(self, hw44):
        est = estimate_graph(fixture_graph("smallcnn"), hw44)
        svg = timeline_svg(est.events)
        for lane in ("LOAD", "LOADW", "LOADFM", "LOADWM", "COMP", "WRITEFM", "WRITE"):
            assert f">{lane}</text>" in svg
        assert svg == timeline_svg(est.events)

    def test_export_files(self, hw44, tmp_path):
        from sparsemesh.timeline import export_timeline
        est = estimate_graph(fixture_graph("smallcnn"), hw44)
        export_timeline(est.events, "csv", tmp_path / "t.csv")
        export_timeline(est.events, "svg", tmp_path / "t.svg")
        assert (tmp_path / "t.csv").read_text().startswith("instruction,")
        assert (tmp_path / "t.svg").read_text().startswith("<svg")
        with pytest.raises(ValueError):
            export_timeline(est.events, "png", tmp_path / "t.png")
