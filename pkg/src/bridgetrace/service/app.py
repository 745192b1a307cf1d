"""FastAPI application wrapping the tracing pipeline."""
from __future__ import annotations

import json
from functools import cached_property
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import pipeline
from ..errors import DataError, ModelError
from ..ledger import AbiRegistry, LedgerError, TxStore
from .schemas import (
    AnomalyReportModel,
    FlagRequest,
    FlagResponse,
    GraphRequest,
    GraphResponse,
    Health,
    PairModel,
    TraceRequest,
    TraceResponse,
)

# HTTP status per error class; clients map them back to exit codes.
STATUS = {"usage": 422, "data": 404, "model": 503}


class Backend:
    """Lazily loaded store and models shared by all requests."""

    def __init__(self, store_dir: Path, models_dir: Path | None = None):
        self.store_dir = Path(store_dir)
        self.models_dir = None if models_dir is None else Path(models_dir)

    @cached_property
    def store(self) -> TxStore:
        if not (self.store_dir / "chains").is_dir():
            raise DataError(f"{self.store_dir}: not a dataset directory (no chains/)")
        return TxStore.load(self.store_dir)

    @cached_property
    def abis(self) -> AbiRegistry:
        return AbiRegistry.load(self.store_dir / "abis")

    @cached_property
    def models(self) -> pipeline.Models:
        if self.models_dir is None:
            raise ModelError("service started without a models directory")
        return pipeline.Models.load(self.models_dir)


def _pairs(items: list[PairModel]) -> list[tuple[pipeline.TxRef, pipeline.TxRef]]:
    return [(pipeline.TxRef(p.deposit.chain, p.deposit.tx_hash), pipeline.TxRef(p.withdrawal.chain, p.withdrawal.tx_hash))
            for p in items]


def create_app(store_dir: Path, models_dir: Path | None = None) -> FastAPI:
    backend = Backend(store_dir, models_dir)
    app = FastAPI(title="bridgetrace", version="0.1.0")
    app.state.backend = backend

    def error(kind: str, detail: str) -> JSONResponse:
        return JSONResponse({"kind": kind, "detail": detail}, status_code=STATUS[kind])

    @app.exception_handler(RequestValidationError)
    async def _usage(_: Request, exc: RequestValidationError):
        msgs = [f"{'.'.join(str(x) for x in e['loc'][1:])}: {e['msg']}" for e in exc.errors()]
        return error("usage", "; ".join(msgs))

    @app.exception_handler(ValueError)
    async def _value(_: Request, exc: ValueError):
        return error("usage", str(exc))

    @app.exception_handler(DataError)
    async def _data(_: Request, exc: DataError):
        return error("data", str(exc))

    @app.exception_handler(LedgerError)
    async def _ledger(_: Request, exc: LedgerError):
        return error("data", f"{type(exc).__name__}: {exc}")

    @app.exception_handler(ModelError)
    async def _model(_: Request, exc: ModelError):
        return error("model", str(exc))

    @app.get("/health", response_model=Health)
    def health() -> Health:
        loaded = "models" in vars(backend)
        return Health(models_loaded=loaded, transactions=len(backend.store))

    @app.post("/trace", response_model=TraceResponse)
    def trace(req: TraceRequest) -> TraceResponse:
        res = pipeline.trace(pipeline.TxRef(req.chain, req.tx_hash), req.direction, backend.models,
                             backend.store, backend.abis)
        return TraceResponse.model_validate(res.to_json())

    @app.post("/flag", response_model=FlagResponse)
    def flag(req: FlagRequest) -> FlagResponse:
        reports = [pipeline.flag_anomalies(d, w, backend.store) for d, w in _pairs(req.pairs)]
        return FlagResponse(reports=[AnomalyReportModel.model_validate(r.to_json()) for r in reports])

    @app.post("/export-graph", response_model=GraphResponse)
    def export_graph(req: GraphRequest) -> GraphResponse:
        graph = pipeline.export_flow_graph(_pairs(req.pairs), backend.store)
        text = graph.to_dot() if req.format == "dot" else json.dumps(graph.to_json(), indent=1) + "\n"
        return GraphResponse(format=req.format, content=text)

    return app
