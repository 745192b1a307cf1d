"""End-to-end tracing: identification gates localization, which feeds association.

Also holds evaluation metrics, amount-rule anomaly flags and money-flow graph export.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .associate import AssocHyper, AssociatorModel, rank_and_select, score_candidates, train_associator
from .errors import DataError, ModelError
from .identify import IdentifyHyper, IdentifyModel, build_transfer_graph, train_identifier
from .ledger import ZERO_ADDRESS, AbiRegistry, Transaction, TxStore, UnknownChain
from .locate import (
    BACKWARD,
    FORWARD,
    ClueNotFound,
    DeltaTable,
    LocatorHyper,
    LocatorModel,
    calibrate_bridges,
    direction_for,
    extract_explicit_clues,
    fetch_candidates,
    parse_grid,
    train_labeler,
)

log = logging.getLogger(__name__)

MATCHED, NO_CLUES, EMPTY, NOT_CROSS = "matched", "no_clues", "empty_candidates", "not_cross_chain"
AUTO = "auto"
DEFAULT_GRID = "300:10800:300"
FEE_LIMIT = 0.03
FLAG_KINDS = ("zero_deposit", "withdrawal_exceeds_deposit", "fee_above_3pct")
# Which flag counts as the correct detection of each simulated attack.
EXPECTED_FLAG = {"zero_deposit": "zero_deposit", "unburned_wrap": "zero_deposit",
                 "inflated_withdrawal": "withdrawal_exceeds_deposit"}

MODEL_FILES = {"identify": "identify.ckpt", "locate": "locate.ckpt", "associate": "associate.ckpt",
               "deltas": "deltas.json"}


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


@dataclass
class Models:
    identifier: IdentifyModel
    labeler: LocatorModel
    associator: AssociatorModel
    deltas: DeltaTable
    history: dict = field(default_factory=dict, compare=False)  # training logs; not persisted

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.identifier.save(directory / MODEL_FILES["identify"])
        self.labeler.save(directory / MODEL_FILES["locate"])
        self.associator.save(directory / MODEL_FILES["associate"])
        self.deltas.save(directory / MODEL_FILES["deltas"])

    @classmethod
    def load(cls, directory: Path) -> "Models":
        directory = Path(directory)
        missing = [f for f in MODEL_FILES.values() if not (directory / f).is_file()]
        if missing:
            raise ModelError(f"{directory}: missing {', '.join(missing)}")
        try:
            deltas = DeltaTable.load(directory / MODEL_FILES["deltas"])
        except (ValueError, KeyError) as exc:
            raise ModelError(f"{directory / MODEL_FILES['deltas']}: {exc}") from exc
        return cls(IdentifyModel.load(directory / MODEL_FILES["identify"]),
                   LocatorModel.load(directory / MODEL_FILES["locate"]),
                   AssociatorModel.load(directory / MODEL_FILES["associate"]), deltas)


@dataclass
class TrainConfig:
    seed: int = 0
    grid: str = DEFAULT_GRID
    identify: IdentifyHyper = field(default_factory=IdentifyHyper)
    locate: LocatorHyper = field(default_factory=LocatorHyper)
    associate: AssocHyper = field(default_factory=AssocHyper)
    bridges: list[str] | None = None  # restrict labeler/associator training to these bridges


def train_identify_stage(dataset, cfg: TrainConfig, history: dict | None = None) -> IdentifyModel:
    model, log_ = train_identifier(dataset, IdentifyHyper(**{**vars(cfg.identify), "seed": cfg.seed}))
    if history is not None:
        history["identify"] = log_
    return model


def train_locate_stage(dataset, cfg: TrainConfig, history: dict | None = None) -> tuple[LocatorModel, DeltaTable]:
    held_out = () if cfg.bridges is None else tuple(
        b.spec.name for b in dataset.bridges if b.spec.name not in cfg.bridges)
    labeler, log_ = train_labeler(dataset.ner_annotations, LocatorHyper(**{**vars(cfg.locate), "seed": cfg.seed}),
                                  exclude_bridges=held_out)
    deltas, reports = calibrate_bridges(dataset, labeler, parse_grid(cfg.grid), bridges=cfg.bridges)
    if history is not None:
        history["locate"] = log_
        history["calibration"] = reports
    return labeler, deltas


def train_associate_stage(dataset, labeler, deltas, cfg: TrainConfig, history: dict | None = None) -> AssociatorModel:
    model, log_, stats = train_associator(dataset, labeler, deltas,
                                          AssocHyper(**{**vars(cfg.associate), "seed": cfg.seed}),
                                          bridges=None if cfg.bridges is None else set(cfg.bridges))
    if history is not None:
        history["associate"] = log_
        history["groups"] = stats
    return model


def train_all(dataset, cfg: TrainConfig | None = None, identifier: IdentifyModel | None = None) -> Models:
    """Train every stage; a given ``identifier`` is reused instead of retrained."""
    cfg = cfg or TrainConfig()
    history: dict = {}
    identifier = identifier or train_identify_stage(dataset, cfg, history)
    labeler, deltas = train_locate_stage(dataset, cfg, history)
    associator = train_associate_stage(dataset, labeler, deltas, cfg, history)
    return Models(identifier, labeler, associator, deltas, history)


# ---------------------------------------------------------------------------
# tracing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TxRef:
    chain: int
    tx_hash: str

    def to_json(self) -> dict:
        return {"chain": self.chain, "tx_hash": self.tx_hash}

    @classmethod
    def from_json(cls, d: dict) -> "TxRef":
        return cls(int(d["chain"]), str(d["tx_hash"]).lower())


@dataclass(frozen=True)
class TraceResult:
    query: TxRef
    direction: str
    matched: TxRef | None
    score: float
    candidate_count: int
    status: str

    def __post_init__(self):
        if (self.matched is not None) != (self.status == MATCHED):
            raise ValueError("matched must be present exactly when status is matched")

    def to_json(self) -> dict:
        return {"query": self.query.to_json(), "direction": self.direction,
                "matched": None if self.matched is None else self.matched.to_json(),
                "score": self.score, "candidate_count": self.candidate_count, "status": self.status}

    @classmethod
    def from_json(cls, d: dict) -> "TraceResult":
        m = d.get("matched")
        return cls(TxRef.from_json(d["query"]), d["direction"], None if m is None else TxRef.from_json(m),
                   float(d.get("score", 0.0)), int(d.get("candidate_count", 0)), d["status"])

    def to_text(self) -> str:
        q = f"{self.query.chain}:{self.query.tx_hash}"
        if self.matched is None:
            return f"{q} {self.direction} {self.status} candidates={self.candidate_count}"
        return (f"{q} {self.direction} -> {self.matched.chain}:{self.matched.tx_hash} "
                f"score={self.score:.6f} candidates={self.candidate_count}")


@dataclass
class TraceDetail:
    """A trace result plus the per-candidate scores behind it."""

    result: TraceResult
    candidates: list[Transaction]
    scores: np.ndarray


def _resolve(store: TxStore, ref: TxRef) -> Transaction:
    return store.get(ref.tx_hash, ref.chain)


def trace_detail(ref: TxRef, direction: str, models: Models, store: TxStore, abis: AbiRegistry) -> TraceDetail:
    if direction not in (FORWARD, BACKWARD, AUTO):
        raise ValueError(f"direction must be forward, backward or auto, got {direction!r}")
    tx = _resolve(store, ref)
    label, _ = models.identifier.classify(tx, abis)
    if direction == AUTO:
        if label == "NonCrossChain":
            return TraceDetail(TraceResult(ref, FORWARD, None, 0.0, 0, NOT_CROSS), [], np.zeros(0))
        direction = direction_for(label)
    elif label == "NonCrossChain":
        log.warning("%s classified NonCrossChain; tracing %s anyway", ref.tx_hash, direction)

    def done(status, count=0):
        return TraceDetail(TraceResult(ref, direction, None, 0.0, count, status), [], np.zeros(0))

    try:
        clues = extract_explicit_clues(tx, label, models.labeler, abis, store, models.deltas, direction=direction)
    except (ClueNotFound, UnknownChain):
        return done(NO_CLUES)
    cands = fetch_candidates(tx, clues, store).candidates
    if not cands:
        return done(EMPTY)
    enc = models.associator
    scores = score_candidates(enc.encode_transaction(tx, abis), enc.encode_transactions(cands, abis), enc)
    i, best = rank_and_select(scores, cands)
    result = TraceResult(ref, direction, TxRef(best.chain, best.tx_hash), float(scores.scores[i]),
                         len(cands), MATCHED)
    return TraceDetail(result, cands, np.asarray(scores.scores))


def trace(ref: TxRef, direction: str, models: Models, store: TxStore, abis: AbiRegistry) -> TraceResult:
    return trace_detail(ref, direction, models, store, abis).result


def trace_many(refs: list[TxRef], direction: str, models: Models, store: TxStore,
               abis: AbiRegistry) -> list[TraceResult]:
    out = [trace(r, direction, models, store, abis) for r in refs]
    return sorted(out, key=lambda r: (r.query.chain, r.query.tx_hash, r.direction))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    direction: str
    precision: float
    recall: float
    accuracy: float
    f1: float
    n_queries: int
    true_positives: int
    emitted: int

    def to_json(self) -> dict:
        return {"direction": self.direction, "precision": self.precision, "recall": self.recall,
                "accuracy": self.accuracy, "f1": self.f1, "n_queries": self.n_queries}


@dataclass(frozen=True)
class Query:
    ref: TxRef
    direction: str
    truth: TxRef


def queries_for(pairs, direction: str) -> list[Query]:
    out = []
    for p in pairs:
        src, dst = TxRef(p.src_chain, p.src_tx), TxRef(p.dst_chain, p.dst_tx)
        if direction in (FORWARD, "both"):
            out.append(Query(src, FORWARD, dst))
        if direction in (BACKWARD, "both"):
            out.append(Query(dst, BACKWARD, src))
    return out


def score_results(direction: str, queries: list[Query], results: list[TraceResult]) -> Metrics:
    """Precision over emitted matches, recall over labeled queries, accuracy over all queries."""
    tp = sum(1 for q, r in zip(queries, results) if r.status == MATCHED and r.matched == q.truth)
    emitted = sum(1 for r in results if r.status == MATCHED)
    n = len(queries)
    precision = tp / emitted if emitted else 0.0
    recall = tp / n if n else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(direction, precision, recall, recall, f1, n, tp, emitted)


def evaluate(dataset, models: Models, direction: str = "both", split: str = "test", bridges=None,
             results_out: list | None = None) -> Metrics:
    """Trace every labeled endpoint of the split with the classifier choosing the direction."""
    if direction not in (FORWARD, BACKWARD, "both"):
        raise ValueError(f"direction must be forward, backward or both, got {direction!r}")
    pairs = dataset.pairs_in(split, bridges)
    if not pairs:
        raise DataError(f"no labeled pairs in split {split!r}")
    queries = queries_for(pairs, direction)
    results = [trace(q.ref, AUTO, models, dataset.store, dataset.abis) for q in queries]
    if results_out is not None:
        results_out.extend(results)
    return score_results(direction, queries, results)


# ---------------------------------------------------------------------------
# anomaly flags
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnomalyReport:
    deposit: TxRef
    withdrawal: TxRef
    deposit_amount: int
    withdrawal_amount: int
    flags: tuple[str, ...]
    fee_ratio: float

    def to_json(self) -> dict:
        return {"deposit": self.deposit.to_json(), "withdrawal": self.withdrawal.to_json(),
                "deposit_amount": str(self.deposit_amount), "withdrawal_amount": str(self.withdrawal_amount),
                "flags": list(self.flags), "fee_ratio": self.fee_ratio}


def deposit_total(tx: Transaction) -> int:
    """Value moved into the bridge account (or burned) by the deposit."""
    sinks = {tx.to_addr, ZERO_ADDRESS}
    return sum(e.amount for e in build_transfer_graph(tx).edges if e.dst in sinks and e.src not in sinks)


def withdrawal_total(tx: Transaction) -> int:
    """Value released from the bridge account (or minted) by the withdrawal."""
    sources = {tx.to_addr, ZERO_ADDRESS}
    return sum(e.amount for e in build_transfer_graph(tx).edges if e.src in sources and e.dst not in sources)


def flag_amounts(deposit: int, withdrawal: int) -> tuple[tuple[str, ...], float]:
    fee_ratio = (deposit - withdrawal) / deposit if deposit > 0 else 0.0
    flags = []
    if deposit == 0 and withdrawal > 0:
        flags.append("zero_deposit")
    if withdrawal > deposit:
        flags.append("withdrawal_exceeds_deposit")
    if deposit > 0 and fee_ratio > FEE_LIMIT:
        flags.append("fee_above_3pct")
    return tuple(flags), fee_ratio


def flag_anomalies(deposit: TxRef, withdrawal: TxRef, store: TxStore) -> AnomalyReport:
    d_amt = deposit_total(_resolve(store, deposit))
    w_amt = withdrawal_total(_resolve(store, withdrawal))
    flags, ratio = flag_amounts(d_amt, w_amt)
    return AnomalyReport(deposit, withdrawal, d_amt, w_amt, flags, ratio)


# ---------------------------------------------------------------------------
# pair files
# ---------------------------------------------------------------------------


def pair_from_json(d: dict) -> tuple[TxRef, TxRef] | None:
    """(deposit, withdrawal) from a labeled pair or a trace result line; None if unmatched."""
    if "src_tx" in d:
        return TxRef(int(d["src_chain"]), d["src_tx"].lower()), TxRef(int(d["dst_chain"]), d["dst_tx"].lower())
    if "query" in d:
        r = TraceResult.from_json(d)
        if r.matched is None:
            return None
        return (r.query, r.matched) if r.direction == FORWARD else (r.matched, r.query)
    raise DataError(f"unrecognized pair record with keys {sorted(d)}")


def read_pairs(path: Path) -> list[tuple[TxRef, TxRef]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            pair = pair_from_json(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
        if pair is not None:
            out.append(pair)
    return out


# ---------------------------------------------------------------------------
# money-flow graph
# ---------------------------------------------------------------------------


ON_CHAIN, CROSS_CHAIN = "on_chain", "cross_chain"


@dataclass(frozen=True)
class FlowEdge:
    src: str
    dst: str
    amount: int
    fraction: float
    kind: str


@dataclass
class FlowGraph:
    nodes: dict[str, tuple[int, str]]  # node id -> (chain, address)
    edges: list[FlowEdge]

    def to_json(self) -> dict:
        return {"nodes": [{"id": k, "chain": c, "address": a} for k, (c, a) in sorted(self.nodes.items())],
                "edges": [{"from": e.src, "to": e.dst, "amount": str(e.amount), "amount_fraction": e.fraction,
                           "kind": e.kind} for e in self.edges]}

    def to_dot(self) -> str:
        lines = ["digraph flow {", "  rankdir=LR;"]
        for k, (c, a) in sorted(self.nodes.items()):
            lines.append(f'  "{k}" [label="{a[:10]}\\nchain {c}"];')
        for e in self.edges:
            style = ", style=dashed" if e.kind == CROSS_CHAIN else ""
            lines.append(f'  "{e.src}" -> "{e.dst}" [label="{e.fraction:.4f}"{style}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def node_id(chain: int, address: str) -> str:
    return f"{chain}:{address}"


def export_flow_graph(pairs: list[tuple[TxRef, TxRef]], store: TxStore) -> FlowGraph:
    """Address-level flow over the deposits and withdrawals of matched pairs.

    Deposit transfers stay on the source chain, with burns folded into the bridge
    account. Bridge releases and mints on the destination chain become cross-chain
    edges leaving the source-chain bridge account.
    """
    if not pairs:
        raise DataError("flow graph needs at least one matched pair")
    amounts: dict[tuple[str, str, str], int] = defaultdict(int)
    nodes: dict[str, tuple[int, str]] = {}

    def add(src, dst, amount, kind):
        if amount <= 0 or src == dst:
            return
        for n in (src, dst):
            chain, addr = n.split(":", 1)
            nodes[n] = (int(chain), addr)
        amounts[(src, dst, kind)] += amount

    for dref, wref in sorted(set(pairs), key=lambda p: (p[0].chain, p[0].tx_hash, p[1].chain, p[1].tx_hash)):
        d, w = _resolve(store, dref), _resolve(store, wref)
        bridge = node_id(d.chain, d.to_addr)
        for e in build_transfer_graph(d).edges:
            dst = d.to_addr if e.dst == ZERO_ADDRESS else e.dst
            add(node_id(d.chain, e.src), node_id(d.chain, dst), e.amount, ON_CHAIN)
        releases = {w.to_addr, ZERO_ADDRESS}
        for e in build_transfer_graph(w).edges:
            if e.src in releases and e.dst not in releases:
                add(bridge, node_id(w.chain, e.dst), e.amount, CROSS_CHAIN)
            elif e.src not in releases and e.dst not in releases:
                add(node_id(w.chain, e.src), node_id(w.chain, e.dst), e.amount, ON_CHAIN)
    outflow: dict[str, int] = defaultdict(int)
    for (src, _, _), amt in amounts.items():
        outflow[src] += amt
    edges = [FlowEdge(s, t, amt, amt / outflow[s], kind) for (s, t, kind), amt in sorted(amounts.items())]
    return FlowGraph(nodes, edges)
