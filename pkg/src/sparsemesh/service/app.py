"""FastAPI service wrapping the compiler pipeline.

Stateless: every request carries the model (inline document plus base64
sidecars, or a named in-repo fixture) and an optional hardware config.
Error codes map onto the CLI exit codes: schema -> 2, planner_failed -> 3,
infeasible_tiling -> 4.
"""

from __future__ import annotations

import base64

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__
from ..blocks import BlockShape
from ..fixtures import FIXTURES, fixture_doc
from ..graph import NetGraph, SchemaError, loads
from ..hw import HwConfigError
from ..pipeline import (compile_graph, estimate_graph, hw_from,
                        sparsify_graph, tile_study)
from ..planner import PlannerError
from ..sparsify import SparsifyError
from ..tiling import InfeasibleTilingError
from .schemas import (CompileRequest, CompileResponse, EstimateRequest,
                      EstimateResponse, ModelSource, SparsifyRequest,
                      SparsifyResponse, TileRequest, TileResponse)


class ServiceError(Exception):
    def __init__(self, code: str, message: str, status: int = 400):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status


def _load_source(src: ModelSource) -> NetGraph:
    if src.fixture:
        return loads(fixture_doc(src.fixture))
    if src.model is None:
        raise ServiceError("schema", "request needs a model document or fixture name", 422)
    sidecars = {p: base64.b64decode(b) for p, b in src.sidecars.items()}
    return loads(src.model, sidecars=sidecars)


def create_app() -> FastAPI:
    app = FastAPI(title="sparsemesh", version=__version__)

    @app.exception_handler(ServiceError)
    async def _service_error(_, exc: ServiceError):
        return JSONResponse(status_code=exc.status,
                            content={"error": {"code": exc.code,
                                               "message": exc.message}})

    def guard(fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except (SchemaError, KeyError, SparsifyError, HwConfigError) as e:
            raise ServiceError("schema", str(e), 422) from e
        except InfeasibleTilingError as e:
            raise ServiceError("infeasible_tiling", str(e), 400) from e
        except PlannerError as e:
            raise ServiceError("planner_failed", str(e), 400) from e

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/fixtures")
    def fixtures():
        return {"fixtures": sorted(FIXTURES)}

    @app.get("/hw/default")
    def hw_default():
        return hw_from(None).to_json()

    @app.post("/sparsify", response_model=SparsifyResponse)
    def sparsify(req: SparsifyRequest):
        g = guard(_load_source, req)
        res = guard(sparsify_graph, g, req.target,
                    BlockShape(req.block[0], req.block[1]),
                    req.measure, req.mode, req.exempt_first)
        return SparsifyResponse(
            model=res.doc,
            sidecars={p: base64.b64encode(b).decode("ascii")
                      for p, b in sorted(res.sidecars.items())},
            ratios=res.ratios)

    @app.post("/compile", response_model=CompileResponse)
    def compile_(req: CompileRequest):
        g = guard(_load_source, req)
        cfg = guard(hw_from, req.hw, mesh=req.mesh)
        res = guard(compile_graph, g, cfg)
        return CompileResponse(plan=res.planned.plan_json(), asm=res.asm)

    @app.post("/estimate", response_model=EstimateResponse)
    def estimate(req: EstimateRequest):
        g = guard(_load_source, req)
        cfg = guard(hw_from, req.hw, ddr_slowdown=req.ddr_slowdown, mesh=req.mesh)
        est = guard(estimate_graph, g, cfg)
        sparse_report = None
        if req.compare_sparsity is not None:
            sparse_g = guard(sparsify_graph, g, req.compare_sparsity,
                             BlockShape(req.block[0], req.block[1]),
                             req.measure).graph
            sparse_report = guard(estimate_graph, sparse_g, cfg).report.to_json()
        return EstimateResponse(report=est.report.to_json(),
                                sparse_report=sparse_report,
                                artifacts=est.artifacts(set(req.emit)))

    @app.post("/tile", response_model=TileResponse)
    def tile(req: TileRequest):
        g = guard(_load_source, req)
        cfg = guard(hw_from, req.hw, ddr_slowdown=req.ddr_slowdown, mesh=req.mesh)
        res = guard(tile_study, g, cfg, req.tiles, req.target,
                    BlockShape(req.block[0], req.block[1]), req.measure)
        return TileResponse(totals=res.totals, tiles=res.tiles, reports=res.reports)

    return app


app = create_app()
