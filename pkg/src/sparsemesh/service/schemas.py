"""Pydantic request/response models for the HTTP service.

Model documents ride inline as JSON objects (schema in docs/formats.md);
binary sidecars are base64-encoded by path.  Responses carry generated
artifacts as text so a thin client can persist them.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class ModelSource(BaseModel):
    model: dict | None = None
    fixture: str | None = None
    sidecars: dict[str, str] = Field(default_factory=dict)  # path -> base64


class SparsifyRequest(ModelSource):
    target: float = 0.5
    block: tuple[int, int] = (8, 8)
    measure: str = "l2"
    mode: str = "oneshot"
    exempt_first: bool = True


class LayerRatio(BaseModel):
    layer: str
    sparsity: float
    exempt: bool


class SparsifyResponse(BaseModel):
    model: dict
    sidecars: dict[str, str]
    ratios: list[LayerRatio]


class CompileRequest(ModelSource):
    hw: dict | None = None
    mesh: tuple[int, int] | None = None


class CompileResponse(BaseModel):
    plan: dict
    asm: str


class EstimateRequest(ModelSource):
    hw: dict | None = None
    mesh: tuple[int, int] | None = None
    ddr_slowdown: float | None = None
    emit: list[str] = Field(default_factory=list)   # plan | asm | timeline
    compare_sparsity: float | None = None
    block: tuple[int, int] = (8, 8)
    measure: str = "l2"


class EstimateResponse(BaseModel):
    report: dict
    sparse_report: dict | None = None
    artifacts: dict[str, str] = Field(default_factory=dict)


class TileRequest(ModelSource):
    hw: dict | None = None
    mesh: tuple[int, int] | None = None
    ddr_slowdown: float | None = None
    tiles: int | None = None
    target: float = 0.5
    block: tuple[int, int] = (8, 8)
    measure: str = "l2"


class TileResponse(BaseModel):
    totals: dict[str, float]
    tiles: dict[str, list[dict]]
    reports: dict[str, dict]


class ErrorBody(BaseModel):
    code: str
    message: str
