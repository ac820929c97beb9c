"""Command-line frontend: a thin client of the HTTP service.

By default requests run against an in-process ASGI app, so no server needs
to be up; --server points the same commands at a remote instance.  Exit
codes: 0 success, 2 schema/validation error, 3 planner failure, 4
infeasible tiling, 1 anything else.
"""

from __future__ import annotations

import base64
import json
import sys
from pathlib import Path

import click
import httpx

EXIT_CODES = {"schema": 2, "planner_failed": 3, "infeasible_tiling": 4}


class Client:
    def __init__(self, server: str | None):
        if server:
            self._client = httpx.Client(base_url=server, timeout=600.0)
        else:
            # no server given: run the service in-process over an ASGI portal
            from fastapi.testclient import TestClient
            from .service.app import app
            self._client = TestClient(app, raise_server_exceptions=False)

    def call(self, method: str, path: str, payload: dict | None = None) -> dict:
        r = self._client.request(method, path, json=payload)
        body = r.json()
        if r.status_code >= 400:
            err = body.get("error") or {"code": "schema", "message": json.dumps(body)}
            click.echo(f"error [{err['code']}]: {err['message']}", err=True)
            sys.exit(EXIT_CODES.get(err["code"], 1))
        return body


def _model_payload(model: str) -> dict:
    """Inline a model file (resolving its sidecars) or name a fixture."""
    if model.startswith("fixture:"):
        return {"fixture": model.split(":", 1)[1]}
    path = Path(model)
    if not path.exists():
        click.echo(f"error [schema]: model file {model} does not exist", err=True)
        sys.exit(2)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        click.echo(f"error [schema]: {model}: {e}", err=True)
        sys.exit(2)
    sidecars = {}
    for layer in doc.get("layers", []):
        for key in ("weights", "mask"):
            spec = layer.get(key)
            if isinstance(spec, dict) and spec.get("kind") == "sidecar":
                rel = spec["path"]
                data = (path.parent / rel).read_bytes()
                sidecars[rel] = base64.b64encode(data).decode("ascii")
    return {"model": doc, "sidecars": sidecars}


def _hw_payload(hw: str | None) -> dict | None:
    if hw is None:
        return None
    text = Path(hw).read_text().strip()
    return json.loads(text) if text else {}


def _write_artifacts(out_dir: str, artifacts: dict[str, str]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in sorted(artifacts.items()):
        (out / name).write_text(text)
        click.echo(f"wrote {out / name}")


def _print_report(report: dict, fmt: str) -> None:
    if fmt == "json":
        click.echo(json.dumps(report, indent=2, sort_keys=True))
        return
    click.echo(f"total: {report['total_seconds']:.6e} s")
    click.echo(f"{'layer':<24}{'total us':>12}{'comp us':>12}  bottleneck")
    for le in report["layers"]:
        click.echo(f"{le['layer']:<24}{le['total_us']:>12.3f}"
                   f"{le['comp_us']:>12.3f}  {le['bottleneck']}")


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Remote service URL; default runs the service in-process.")
@click.pass_context
def main(ctx, server):
    """Block-sparsity compiler and mesh timing estimator."""
    ctx.obj = Client(server)


@main.command()
@click.argument("model")
@click.option("--target", type=float, default=0.5, show_default=True)
@click.option("--block", default="8x8", show_default=True, help="b_o x b_i")
@click.option("--measure", type=click.Choice(["l1", "l2", "variance"]), default="l2",
              show_default=True)
@click.option("--mode", type=click.Choice(["oneshot", "incremental"]),
              default="oneshot", show_default=True)
@click.option("--out", default="sparsified", show_default=True, metavar="DIR")
@click.pass_obj
def sparsify(client: Client, model, target, block, measure, mode, out):
    """Mask and compress MODEL's conv weights at a target block sparsity."""
    b_o, b_i = (int(v) for v in block.lower().split("x"))
    payload = _model_payload(model)
    payload.update({"target": target, "block": [b_o, b_i],
                    "measure": measure, "mode": mode})
    res = client.call("POST", "/sparsify", payload)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "model.json").write_text(
        json.dumps(res["model"], indent=2, sort_keys=True) + "\n")
    for rel, b64 in sorted(res["sidecars"].items()):
        (out_dir / rel).write_bytes(base64.b64decode(b64))
    for row in res["ratios"]:
        tag = " (exempt)" if row["exempt"] else ""
        click.echo(f"{row['layer']:<24} sparsity {row['sparsity']:.2f}{tag}")
    click.echo(f"wrote {out_dir / 'model.json'} and {len(res['sidecars'])} sidecars")


@main.command("compile")
@click.argument("model")
@click.option("--hw", default=None, metavar="JSON", help="Hardware config file.")
@click.option("--mesh", default=None, metavar="RxC", help="Mesh override, e.g. 4x4.")
@click.option("--emit-plan", is_flag=True)
@click.option("--emit-asm", is_flag=True)
@click.option("--out", default="build", show_default=True, metavar="DIR")
@click.pass_obj
def compile_cmd(client: Client, model, hw, mesh, emit_plan, emit_asm, out):
    """Plan MODEL onto the mesh and emit the instruction stream."""
    payload = _model_payload(model)
    payload["hw"] = _hw_payload(hw)
    if mesh:
        r, c = (int(v) for v in mesh.lower().split("x"))
        payload["mesh"] = [r, c]
    res = client.call("POST", "/compile", payload)
    arts = {}
    if emit_plan:
        arts["plan.json"] = json.dumps(res["plan"], indent=2, sort_keys=True) + "\n"
    if emit_asm:
        arts["program.bsasm"] = res["asm"]
    if arts:
        _write_artifacts(out, arts)
    n = sum(len(lc) for lc in res["asm"].splitlines() if not lc.startswith("#"))
    click.echo(f"compiled {len(res['plan']['layers'])} layers")


@main.command()
@click.argument("model")
@click.option("--hw", default=None, metavar="JSON")
@click.option("--mesh", default=None, metavar="RxC")
@click.option("--ddr-slowdown", type=float, default=None)
@click.option("--compare-sparsity", type=float, default=None,
              help="Also estimate the model sparsified at this target.")
@click.option("--emit-plan", is_flag=True)
@click.option("--emit-asm", is_flag=True)
@click.option("--emit-timeline", is_flag=True)
@click.option("--report", "report_fmt", type=click.Choice(["table", "json"]),
              default="table", show_default=True)
@click.option("--out", default="build", show_default=True, metavar="DIR")
@click.pass_obj
def estimate(client: Client, model, hw, mesh, ddr_slowdown, compare_sparsity,
             emit_plan, emit_asm, emit_timeline, report_fmt, out):
    """Estimate MODEL's execution time on the configured mesh."""
    payload = _model_payload(model)
    payload.update({"hw": _hw_payload(hw), "ddr_slowdown": ddr_slowdown,
                    "compare_sparsity": compare_sparsity})
    if mesh:
        r, c = (int(v) for v in mesh.lower().split("x"))
        payload["mesh"] = [r, c]
    emit = [name for name, flag in
            (("plan", emit_plan), ("asm", emit_asm), ("timeline", emit_timeline))
            if flag]
    payload["emit"] = emit
    res = client.call("POST", "/estimate", payload)
    _print_report(res["report"], report_fmt)
    if res.get("sparse_report"):
        dense_t = res["report"]["total_seconds"]
        sparse_t = res["sparse_report"]["total_seconds"]
        click.echo(f"dense:  {dense_t:.6e} s")
        click.echo(f"sparse: {sparse_t:.6e} s  (speedup {dense_t / sparse_t:.2f}x)")
    if res["artifacts"]:
        _write_artifacts(out, res["artifacts"])


@main.command()
@click.argument("model")
@click.option("--hw", default=None, metavar="JSON")
@click.option("--mesh", default=None, metavar="RxC")
@click.option("--tiles", type=int, default=None, help="Tile count; default searches.")
@click.option("--ddr-slowdown", type=float, default=None)
@click.option("--target", type=float, default=0.5, show_default=True)
@click.option("--report", "report_fmt", type=click.Choice(["table", "json"]),
              default="table", show_default=True)
@click.pass_obj
def tile(client: Client, model, hw, mesh, tiles, ddr_slowdown, target, report_fmt):
    """Depth-wise tiling study: baseline vs tiled vs sparse vs tiled+sparse."""
    payload = _model_payload(model)
    payload.update({"hw": _hw_payload(hw), "ddr_slowdown": ddr_slowdown,
                    "tiles": tiles, "target": target})
    if mesh:
        r, c = (int(v) for v in mesh.lower().split("x"))
        payload["mesh"] = [r, c]
    res = client.call("POST", "/tile", payload)
    if report_fmt == "json":
        click.echo(json.dumps(res, indent=2, sort_keys=True))
        return
    for key in ("ddr_only", "tiled", "sparse_only", "tiled_sparse"):
        click.echo(f"{key:<14}{res['totals'][key]:.6e} s")
    for plan in res["tiles"]["tiled"]:
        click.echo(f"tiled segment {plan['layers'][0]}..{plan['layers'][-1]} "
                   f"with {plan['tiles']} tiles (k={plan['generalized_kernel']}, "
                   f"s={plan['generalized_stride']})")


@main.command()
@click.argument("report_file", type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["table", "json"]),
              default="table", show_default=True)
def report(report_file, fmt):
    """Render a saved estimate report."""
    doc = json.loads(Path(report_file).read_text())
    _print_report(doc, fmt)


@main.command()
@click.pass_obj
def fixtures(client: Client):
    """List the in-repo model fixtures."""
    for name in client.call("GET", "/fixtures")["fixtures"]:
        click.echo(name)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8008, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn
    uvicorn.run("sparsemesh.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
