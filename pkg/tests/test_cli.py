import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from sparsemesh.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def run(runner, *args):
    return runner.invoke(main, list(args), catch_exceptions=False)


def test_fixtures_cmd(runner):
    r = run(runner, "fixtures")
    assert r.exit_code == 0
    assert "smallcnn" in r.output and "vgg16" in r.output


def test_estimate_with_artifacts(runner, tmp_path):
    out = tmp_path / "build"
    r = run(runner, "estimate", "fixture:smallcnn", "--mesh", "2x2",
            "--emit-plan", "--emit-asm", "--emit-timeline", "--out", str(out))
    assert r.exit_code == 0
    assert "total:" in r.output
    for name in ("plan.json", "program.bsasm", "timeline.csv", "timeline.svg"):
        assert (out / name).exists(), name


def test_estimate_compare_sparsity(runner):
    r = run(runner, "estimate", "fixture:smallcnn", "--mesh", "4x4",
            "--compare-sparsity", "0.5")
    assert r.exit_code == 0
    assert "speedup" in r.output


def test_estimate_json_report(runner):
    r = run(runner, "estimate", "fixture:smallcnn", "--report", "json")
    doc = json.loads(r.output)
    assert "total_seconds" in doc and "layers" in doc


def test_sparsify_then_estimate_files(runner, tmp_path):
    out = tmp_path / "sp"
    r = run(runner, "sparsify", "fixture:smallcnn", "--target", "0.5",
            "--out", str(out))
    assert r.exit_code == 0
    assert "sparsity 0.50" in r.output
    model = out / "model.json"
    assert model.exists()
    assert list(out.glob("w_*.bcoo")) and list(out.glob("mask_*.json"))
    # the written model (with sidecars) estimates through the client path
    r2 = run(runner, "estimate", str(model), "--mesh", "4x4")
    assert r2.exit_code == 0


def test_compile_emits(runner, tmp_path):
    out = tmp_path / "b"
    r = run(runner, "compile", "fixture:smallcnn", "--mesh", "2x2",
            "--emit-asm", "--emit-plan", "--out", str(out))
    assert r.exit_code == 0
    assert (out / "program.bsasm").read_text().startswith("# bsasm v1")


def test_tile_study(runner):
    r = run(runner, "tile", "fixture:vgg16_front", "--mesh", "3x3",
            "--ddr-slowdown", "16", "--tiles", "2")
    assert r.exit_code == 0
    for key in ("ddr_only", "tiled", "sparse_only", "tiled_sparse"):
        assert key in r.output


def test_report_cmd(runner, tmp_path):
    r = run(runner, "estimate", "fixture:smallcnn", "--report", "json")
    doc = tmp_path / "rep.json"
    doc.write_text(r.output)
    r2 = run(runner, "report", str(doc))
    assert r2.exit_code == 0
    assert "total:" in r2.output


class TestExitCodes:
    def test_missing_model_is_schema_error(self, runner):
        r = runner.invoke(main, ["estimate", "no_such_model.json"])
        assert r.exit_code == 2

    def test_bad_json_is_schema_error(self, runner, tmp_path):
        bad = tmp_path / "m.json"
        bad.write_text("{nope")
        r = runner.invoke(main, ["estimate", str(bad)])
        assert r.exit_code == 2

    def test_planner_failure_is_3(self, runner, tmp_path):
        hw = tmp_path / "hw.json"
        hw.write_text(json.dumps({"strict_splits": True}))
        r = runner.invoke(main, ["estimate", "fixture:vgg16_front",
                                 "--mesh", "3x3", "--hw", str(hw)])
        assert r.exit_code == 3

    def test_infeasible_tiling_is_4(self, runner):
        r = runner.invoke(main, ["tile", "fixture:smallcnn",
                                 "--tiles", "1000"])
        assert r.exit_code == 4


def test_deterministic_artifacts(runner, tmp_path):
    outs = []
    for d in ("a", "b"):
        out = tmp_path / d
        run(runner, "estimate", "fixture:smallcnn", "--mesh", "3x3",
            "--emit-plan", "--emit-asm", "--emit-timeline", "--out", str(out))
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1]
