from __future__ import annotations

from pydantic import BaseModel, Field, field_validator


class HealthResponse(BaseModel):
    status: str = "ok"
    gallery_size: int
    code_bits: int
    encoder_loaded: bool


class QueryRequest(BaseModel):
    code: list[int]
    k: int = Field(10, ge=1)

    @field_validator("code")
    @classmethod
    def ternary(cls, v: list[int]) -> list[int]:
        if any(x not in (-1, 0, 1) for x in v):
            raise ValueError("code entries must be -1, 0 or 1")
        return v


class RankedItem(BaseModel):
    item_id: int
    distance: float
    label: int


class QueryResponse(BaseModel):
    results: list[RankedItem]
    note: str | None = None


class EncodeRequest(BaseModel):
    image_paths: list[str] = Field(..., min_length=1)


class EncodeResponse(BaseModel):
    codes: list[list[int]]


class EvaluateRequest(BaseModel):
    query_codes: list[list[int]] = Field(..., min_length=1)
    query_labels: list[int]
    k_grid: list[int] = [1, 5, 10, 20]
    map_cutoff: int | None = None


class MetricRow(BaseModel):
    metric: str
    k: str
    value: float


class EvaluateResponse(BaseModel):
    map: float
    metrics: list[MetricRow]
    pr_points: list[tuple[float, float]]
