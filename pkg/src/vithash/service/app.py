"""HTTP service over a loaded retrieval index (and optionally an encoder).

Run with ``vithash serve --index gallery.codes [--checkpoint final.pt]``.
The index is immutable once loaded, so concurrent requests are safe.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, HTTPException

from ..data import normalize, preprocess
from ..hashing import sign_quantize
from ..retrieval import RetrievalIndex, evaluate_index, query
from .schemas import (
    EncodeRequest,
    EncodeResponse,
    EvaluateRequest,
    EvaluateResponse,
    HealthResponse,
    MetricRow,
    QueryRequest,
    QueryResponse,
    RankedItem,
)

logger = logging.getLogger(__name__)


def create_app(index: RetrievalIndex, network=None, normalize_mean=(0.5, 0.5, 0.5),
               normalize_std=(0.5, 0.5, 0.5)) -> FastAPI:
    app = FastAPI(title="vithash retrieval", version="0.1.0")
    if network is not None:
        network.eval()

    def check_bits(n: int) -> None:
        if n != index.code_bits:
            raise HTTPException(status_code=422,
                                detail=f"code length {n} != index code length {index.code_bits}")

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(gallery_size=len(index), code_bits=index.code_bits,
                              encoder_loaded=network is not None)

    @app.post("/query", response_model=QueryResponse)
    def run_query(req: QueryRequest):
        check_bits(len(req.code))
        note = None
        if req.k > len(index):
            note = f"k={req.k} exceeds gallery size {len(index)}; returning all items"
        res = query(index, np.array(req.code, dtype=np.int8), req.k)
        items = [RankedItem(item_id=int(i), distance=float(d), label=int(lab))
                 for i, d, lab in zip(res.item_ids, res.distances, res.labels)]
        return QueryResponse(results=items, note=note)

    @app.post("/encode", response_model=EncodeResponse)
    def encode(req: EncodeRequest):
        if network is None:
            raise HTTPException(status_code=503, detail="service was started without a checkpoint")
        size = network.encoder.config.image_size
        tensors = []
        for p in req.image_paths:
            t = preprocess(p, size)
            if t is None:
                raise HTTPException(status_code=422, detail=f"cannot decode image {p}")
            tensors.append(t)
        with torch.no_grad():
            _, h = network(normalize(torch.stack(tensors), normalize_mean, normalize_std))
        return EncodeResponse(codes=sign_quantize(h).tolist())

    @app.post("/evaluate", response_model=EvaluateResponse)
    def run_evaluate(req: EvaluateRequest):
        if len(req.query_codes) != len(req.query_labels):
            raise HTTPException(status_code=422, detail="query codes and labels are misaligned")
        for c in req.query_codes:
            check_bits(len(c))
        report = evaluate_index(index, np.array(req.query_codes, dtype=np.int8),
                                np.array(req.query_labels), req.k_grid, req.map_cutoff)
        rows = [MetricRow(metric=m, k=k, value=v) for m, k, v in report.metric_rows()]
        return EvaluateResponse(map=report.map, metrics=rows, pr_points=report.pr_points)

    return app


def app_from_files(index_path: str | Path, checkpoint: str | Path | None = None) -> FastAPI:
    from ..training import load_network

    index = RetrievalIndex.load(index_path)
    network = None
    if checkpoint is not None:
        network, _ = load_network(checkpoint, code_bits=index.code_bits)
    return create_app(index, network)
