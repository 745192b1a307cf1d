"""Request and response models for the HTTP service."""
from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field, field_validator


class TxRefModel(BaseModel):
    chain: int = Field(ge=0)
    tx_hash: str

    @field_validator("tx_hash")
    @classmethod
    def _hex(cls, v: str) -> str:
        v = v.lower()
        if not (v.startswith("0x") and len(v) == 66 and all(c in "0123456789abcdef" for c in v[2:])):
            raise ValueError("tx_hash must be 0x followed by 64 hex digits")
        return v


class TraceRequest(BaseModel):
    tx_hash: str
    chain: int = Field(ge=0)
    direction: Literal["forward", "backward", "auto"] = "auto"

    @field_validator("tx_hash")
    @classmethod
    def _hex(cls, v: str) -> str:
        return TxRefModel(chain=0, tx_hash=v).tx_hash


class TraceResponse(BaseModel):
    query: TxRefModel
    direction: Literal["forward", "backward"]
    matched: TxRefModel | None
    score: float
    candidate_count: int
    status: Literal["matched", "no_clues", "empty_candidates", "not_cross_chain"]


class PairModel(BaseModel):
    deposit: TxRefModel
    withdrawal: TxRefModel


class FlagRequest(BaseModel):
    pairs: list[PairModel]


class AnomalyReportModel(BaseModel):
    deposit: TxRefModel
    withdrawal: TxRefModel
    deposit_amount: str
    withdrawal_amount: str
    flags: list[Literal["zero_deposit", "withdrawal_exceeds_deposit", "fee_above_3pct"]]
    fee_ratio: float


class FlagResponse(BaseModel):
    reports: list[AnomalyReportModel]


class GraphRequest(BaseModel):
    pairs: list[PairModel] = Field(min_length=1)
    format: Literal["dot", "json"] = "json"


class GraphResponse(BaseModel):
    format: Literal["dot", "json"]
    content: str


class Health(BaseModel):
    status: Literal["ok"] = "ok"
    models_loaded: bool
    transactions: int


class ErrorBody(BaseModel):
    kind: Literal["usage", "data", "model"]
    detail: str
