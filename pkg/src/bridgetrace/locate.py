"""Candidate localization.

A BiLSTM+CRF labeler tags the tokens of an event declaration with clue roles.
The role-bearing parameters of a query transaction's events give the
counterpart chain and address; together with a time window they select the
candidate transactions on the counterpart chain.
"""
from __future__ import annotations

import dataclasses
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import DataError, ModelError
from .hashing import bucket, pad_ids
from .ledger import (
    AbiRegistry,
    EventDecl,
    Transaction,
    TxStore,
    UnknownChain,
    declaration_tokens,
    parse_event_signature,
    query_transactions,
)
from .nn import checkpoint

TAGS = ("O", "SRC_CHAIN", "DST_CHAIN", "SRC_ADDR", "DST_ADDR", "AMOUNT")
TAG_INDEX = {t: i for i, t in enumerate(TAGS)}
ROLE_TYPES = {"SRC_CHAIN": "uint", "DST_CHAIN": "uint", "SRC_ADDR": "address", "DST_ADDR": "address",
              "AMOUNT": "uint"}
FORWARD, BACKWARD = "forward", "backward"
DEFAULT_DELTA = 1800


class ClueNotFound(Exception):
    pass


class EmptyWindow(ValueError):
    pass


# ---------------------------------------------------------------------------
# labelers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoleAssignment:
    """Per-token tags plus the parameter chosen for each role."""

    tags: tuple[str, ...]
    roles: dict  # tag -> parameter index

    def param_for(self, tag: str) -> int | None:
        return self.roles.get(tag)


def assign_roles(decl: EventDecl, tags: list[str], confidence: np.ndarray) -> RoleAssignment:
    """Parameter role = majority non-O tag over its name tokens (tie -> O).

    A role claimed by several parameters goes to the one with the highest mean
    confidence; roles whose ABI type cannot carry them are dropped.
    """
    _, owners = declaration_tokens(decl)
    per_param: dict[int, list[int]] = {}
    for pos, owner in enumerate(owners):
        if owner is not None:
            per_param.setdefault(owner, []).append(pos)
    best: dict[str, tuple[float, int]] = {}
    for i, positions in sorted(per_param.items()):
        counts = Counter(tags[k] for k in positions if tags[k] != "O")
        if not counts:
            continue
        ranked = counts.most_common()
        if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
            continue
        tag = ranked[0][0]
        if decl.params[i].base_type != ROLE_TYPES[tag]:
            continue
        conf = float(np.mean([confidence[k] for k in positions]))
        if tag not in best or conf > best[tag][0]:
            best[tag] = (conf, i)
    return RoleAssignment(tuple(tags), {t: i for t, (_, i) in best.items()})


class GoldLabeler:
    """Labeler backed by known role names; used for calibration and as an oracle."""

    def __init__(self, role_names: dict[str, str]):
        self.role_names = dict(role_names)

    @classmethod
    def from_dataset(cls, dataset, bridges=None) -> "GoldLabeler":
        names = {}
        for b in dataset.bridges:
            if bridges is None or b.spec.name in bridges:
                names.update(b.spec.role_tags())
        return cls(names)

    def label_parameters(self, decl: EventDecl) -> RoleAssignment:
        _, owners = declaration_tokens(decl)
        tags = ["O" if o is None else self.role_names.get(decl.params[o].name, "O") for o in owners]
        return assign_roles(decl, tags, np.ones(len(tags)))


@dataclass
class LocatorHyper:
    seed: int = 0
    epochs: int = 120
    batch_size: int = 16
    lr: float = 5e-3
    hidden: int = 64
    embed_dim: int = 32
    buckets: int = 4096
    patience: int = 15


class LocatorModel:
    kind = "locate"

    def __init__(self, params: nn.Params, hyper: LocatorHyper):
        self.params = params
        self.hyper = hyper
        self._cache: dict[str, RoleAssignment] = {}

    @classmethod
    def init(cls, hyper: LocatorHyper) -> "LocatorModel":
        rng = np.random.Generator(np.random.PCG64(hyper.seed))
        p = {"tok": nn.uniform_init(rng, hyper.embed_dim, (hyper.buckets, hyper.embed_dim))}
        p.update(nn.init_bilstm(rng, hyper.embed_dim, hyper.hidden, "enc"))
        p.update(nn.init_dense(rng, 2 * hyper.hidden, len(TAGS), "emit"))
        K = len(TAGS)
        p.update({"crf.trans": np.zeros((K, K)), "crf.start": np.zeros(K), "crf.end": np.zeros(K)})
        return cls(p, hyper)

    @property
    def crf(self) -> nn.CrfParams:
        return nn.CrfParams(self.params["crf.trans"], self.params["crf.start"], self.params["crf.end"])

    def token_ids(self, tokens: list[str]) -> list[int]:
        return [bucket(t, self.hyper.buckets, "decl:") for t in tokens]

    def emissions(self, ids: np.ndarray, mask: np.ndarray):
        p = self.params
        x = p["tok"][ids]
        h, c_enc = nn.bilstm_forward(p, "enc", x, mask)
        em, c_emit = nn.dense_forward(p, "emit", h)
        return em, (ids, c_enc, c_emit)

    def emissions_backward(self, d_em: np.ndarray, cache) -> nn.Params:
        ids, c_enc, c_emit = cache
        dh, grads = nn.dense_backward(d_em, c_emit)
        dx, g = nn.bilstm_backward(self.params, dh, c_enc)
        grads.update(g)
        dtok = np.zeros_like(self.params["tok"])
        np.add.at(dtok, ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))
        grads["tok"] = dtok
        return grads

    def tag_tokens(self, tokens: list[str]) -> tuple[list[str], np.ndarray]:
        """Viterbi tags and the max-marginal score of each chosen tag."""
        if not tokens:
            return [], np.zeros(0)
        ids, mask = pad_ids([self.token_ids(tokens)])
        em, _ = self.emissions(ids, mask)
        path, _ = nn.crf_viterbi(em[0], self.crf)
        mm = nn.crf_max_marginals(em[0], self.crf)
        return [TAGS[k] for k in path], mm[np.arange(len(path)), path]

    def label_parameters(self, decl: EventDecl) -> RoleAssignment:
        key = decl.to_text()
        hit = self._cache.get(key)
        if hit is None:
            tokens, _ = declaration_tokens(decl)
            tags, conf = self.tag_tokens(tokens)
            hit = self._cache[key] = assign_roles(decl, tags, conf)
        return hit

    def save(self, path: Path) -> None:
        checkpoint.save(path, self.params, self.kind, dataclasses.asdict(self.hyper))

    @classmethod
    def load(cls, path: Path) -> "LocatorModel":
        try:
            params, header = checkpoint.load(path, cls.kind)
        except nn.CheckpointError as exc:
            raise ModelError(str(exc)) from exc
        return cls(params, LocatorHyper(**header["hyper"]))


def label_parameters(decl: EventDecl, model) -> RoleAssignment:
    if model is None:
        raise ModelError("no labeler loaded")
    return model.label_parameters(decl)


def _encode_annotations(model: LocatorModel, annotations):
    seqs = []
    for ann in annotations:
        tokens, _ = declaration_tokens(parse_event_signature(ann.signature))
        if len(tokens) != len(ann.tags):
            raise DataError(f"tag count mismatch for {ann.signature!r}")
        seqs.append((model.token_ids(tokens), [TAG_INDEX[t] for t in ann.tags]))
    return seqs


def token_accuracy(model: LocatorModel, seqs) -> float:
    right = total = 0
    for ids, gold in seqs:
        em, _ = model.emissions(*pad_ids([ids]))
        path, _ = nn.crf_viterbi(em[0], model.crf)
        right += sum(a == b for a, b in zip(path, gold))
        total += len(gold)
    return right / total if total else 0.0


@dataclass
class LabelerLog:
    epoch: int
    loss: float
    valid_accuracy: float


def train_labeler(annotations, hyper: LocatorHyper | None = None, exclude_bridges=()):
    """CRF negative log-likelihood with Adam; keeps the best validation token accuracy.

    Annotations carry their own split; ``exclude_bridges`` drops a bridge's
    declarations entirely (held-out vocabularies).
    """
    hyper = hyper or LocatorHyper()
    anns = [a for a in annotations if a.bridge not in set(exclude_bridges)]
    train = [a for a in anns if a.split == "train"]
    valid = [a for a in anns if a.split == "valid"]
    if not train or not valid:
        raise DataError("labeler training needs annotated declarations in train and valid")
    model = LocatorModel.init(hyper)
    tr, va = _encode_annotations(model, train), _encode_annotations(model, valid)
    rng = np.random.Generator(np.random.PCG64(hyper.seed + 1))
    state, adam = nn.AdamState(), nn.AdamHyper(lr=hyper.lr)
    best, best_acc, since, log = None, -1.0, 0, []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(tr))
        total = 0.0
        for s in range(0, len(order), hyper.batch_size):
            batch = [tr[int(i)] for i in order[s:s + hyper.batch_size]]
            ids, mask = pad_ids([b[0] for b in batch])
            em, cache = model.emissions(ids, mask)
            d_em = np.zeros_like(em)
            crf_g = nn.CrfParams.zeros(len(TAGS))
            crf = model.crf
            for j, (tok, gold) in enumerate(batch):
                T = len(tok)
                loss, de, g = nn.crf_nll_and_grad(em[j, :T], gold, crf)
                total += loss
                d_em[j, :T] = de
                crf_g.transitions += g.transitions
                crf_g.start += g.start
                crf_g.end += g.end
            n = len(batch)
            grads = model.emissions_backward(d_em / n, cache)
            grads.update({"crf.trans": crf_g.transitions / n, "crf.start": crf_g.start / n,
                          "crf.end": crf_g.end / n})
            nn.adam_step(model.params, grads, state, adam)
        acc = token_accuracy(model, va)
        log.append(LabelerLog(epoch, total / len(tr), acc))
        if acc > best_acc:
            best_acc, since = acc, 0
            best = {k: v.copy() for k, v in model.params.items()}
        else:
            since += 1
            if since >= hyper.patience:
                break
    model.params = best
    model._cache.clear()
    return model, log


# ---------------------------------------------------------------------------
# clues and candidates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeWindow:
    delta_s: int
    anchor: int
    direction: str

    def __post_init__(self):
        if self.delta_s <= 0:
            raise EmptyWindow("delta must be positive")
        if self.direction not in (FORWARD, BACKWARD):
            raise ValueError(f"bad direction {self.direction!r}")

    @property
    def bounds(self) -> tuple[int, int]:
        """Inclusive integer bounds: (anchor, anchor+delta] forward, [anchor-delta, anchor) backward."""
        if self.direction == FORWARD:
            return self.anchor + 1, self.anchor + self.delta_s
        return self.anchor - self.delta_s, self.anchor - 1


@dataclass(frozen=True)
class ExplicitClues:
    direction: str
    counterpart_chain: int | None  # None: address-only fallback across chains
    counterpart_address: str
    window: TimeWindow
    emitter: str | None = None


@dataclass
class CandidateSet:
    query: Transaction
    candidates: list[Transaction] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.candidates)


REQUIRED = {FORWARD: ("DST_CHAIN", "DST_ADDR"), BACKWARD: ("SRC_CHAIN", "SRC_ADDR")}


def direction_for(label: str) -> str:
    if label == "Deposit":
        return FORWARD
    if label == "Withdrawal":
        return BACKWARD
    raise ValueError(f"no tracing direction for label {label!r}")


def find_clue_values(tx: Transaction, direction: str, labeler, abis: AbiRegistry):
    """(chain or None, address, emitter) from the best clue-bearing log."""
    chain_tag, addr_tag = REQUIRED[direction]
    partial = None
    for idx, decl, ev in abis.decode_all(tx):
        emitter = tx.logs[idx].emitter
        roles = labeler.label_parameters(decl)
        ci, ai = roles.param_for(chain_tag), roles.param_for(addr_tag)
        if ai is None:
            continue
        address = ev.pairs[ai].value
        if ci is not None:
            return int(ev.pairs[ci].value), address, emitter
        if partial is None:
            partial = (None, address, emitter)
    if partial is None:
        raise ClueNotFound(f"no {addr_tag} parameter in {tx.tx_hash}")
    return partial


def extract_explicit_clues(tx: Transaction, label: str, labeler, abis: AbiRegistry, store: TxStore,
                           deltas: "DeltaTable | None" = None, direction: str | None = None) -> ExplicitClues:
    direction = direction or direction_for(label)
    chain, address, emitter = find_clue_values(tx, direction, labeler, abis)
    if chain is not None and chain not in store.chains:
        raise UnknownChain(chain)
    delta = (deltas or DeltaTable()).delta_for(emitter)
    return ExplicitClues(direction, chain, address, TimeWindow(delta, tx.timestamp, direction), emitter)


def fetch_candidates(query: Transaction, clues: ExplicitClues, store: TxStore) -> CandidateSet:
    lo, hi = clues.window.bounds
    chains = [clues.counterpart_chain] if clues.counterpart_chain is not None else [
        c for c in store.chains if c != query.chain]
    found = []
    for c in chains:
        found += [t for t in query_transactions(store, c, clues.counterpart_address, lo, hi)
                  if t.ok and t.tx_hash != query.tx_hash]
    if len(chains) > 1:
        found.sort(key=lambda t: t.sort_key)
    return CandidateSet(query, found)


# ---------------------------------------------------------------------------
# window calibration
# ---------------------------------------------------------------------------


@dataclass
class DeltaTable:
    """Per-bridge window sizes keyed by emitter address, with a fallback."""

    by_bridge: dict[str, int] = field(default_factory=dict)
    emitters: dict[str, str] = field(default_factory=dict)  # emitter -> bridge
    default: int = DEFAULT_DELTA

    def delta_for(self, emitter: str | None) -> int:
        bridge = self.emitters.get(emitter or "")
        return self.by_bridge.get(bridge, self.default) if bridge else self.default

    def to_json(self) -> dict:
        return {"by_bridge": dict(sorted(self.by_bridge.items())),
                "emitters": dict(sorted(self.emitters.items())), "default": self.default}

    @classmethod
    def from_json(cls, d: dict) -> "DeltaTable":
        return cls({k: int(v) for k, v in d["by_bridge"].items()}, dict(d["emitters"]), int(d["default"]))

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: Path) -> "DeltaTable":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class CalibrationReport:
    grid: list[int]
    recall: list[float]
    mean_size: list[float]
    delta_star: int
    n_queries: int

    def to_json(self) -> dict:
        return {"grid": self.grid, "recall": self.recall, "mean_candidate_set_size": self.mean_size,
                "delta_star": self.delta_star, "n_queries": self.n_queries}


def parse_grid(text: str) -> list[int]:
    """``lo:hi:step`` seconds, inclusive of hi when on-step."""
    try:
        lo, hi, step = (int(x) for x in text.split(":"))
    except ValueError as exc:
        raise ValueError(f"grid must be lo:hi:step, got {text!r}") from exc
    if lo <= 0 or step <= 0 or hi < lo:
        raise ValueError(f"bad grid {text!r}")
    return list(range(lo, hi + 1, step))


def plateau_delta(grid: list[int], recall: list[float]) -> int:
    """Smallest grid value whose recall reaches 99% of the best recall."""
    top = max(recall)
    for d, r in zip(grid, recall):
        if r >= 0.99 * top:
            return d
    return grid[-1]


def calibrate_delta(pairs, grid: list[int], store: TxStore, labeler, abis: AbiRegistry) -> CalibrationReport:
    """Recall of the true counterpart and mean candidate-set size per window size.

    Each pair contributes a forward query (deposit) and a backward query
    (withdrawal).
    """
    if not pairs:
        raise DataError("calibration needs labeled pairs")
    grid = [int(g) for g in grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] <= 0:
        raise ValueError("grid must be positive and strictly increasing")
    widest = grid[-1]
    offsets = []  # per query: (sorted candidate offsets, offset of the truth or None)
    for p in pairs:
        for q_hash, t_hash, direction in ((p.src_tx, p.dst_tx, FORWARD), (p.dst_tx, p.src_tx, BACKWARD)):
            q = store.get(q_hash)
            try:
                chain, address, _ = find_clue_values(q, direction, labeler, abis)
                if chain is not None and chain not in store.chains:
                    raise UnknownChain(chain)
            except (ClueNotFound, UnknownChain):
                offsets.append((np.zeros(0), None))
                continue
            clues = ExplicitClues(direction, chain, address, TimeWindow(widest, q.timestamp, direction))
            cands = fetch_candidates(q, clues, store).candidates
            offs = np.sort(np.array([abs(c.timestamp - q.timestamp) for c in cands], dtype=np.int64))
            truth = next((abs(c.timestamp - q.timestamp) for c in cands if c.tx_hash == t_hash), None)
            offsets.append((offs, truth))
    recall, sizes = [], []
    for d in grid:
        hit = sum(1 for _, t in offsets if t is not None and t <= d)
        recall.append(hit / len(offsets))
        sizes.append(float(np.mean([np.searchsorted(o, d, side="right") for o, _ in offsets])))
    return CalibrationReport(grid, recall, sizes, plateau_delta(grid, recall), len(offsets))


def calibrate_bridges(dataset, labeler, grid: list[int], bridges=None, split: str = "train"):
    """Calibrate every (selected) bridge on its labeled pairs; returns (DeltaTable, reports)."""
    table = DeltaTable(default=grid[-1])
    reports = {}
    for b in dataset.bridges:
        name = b.spec.name
        if bridges is not None and name not in bridges:
            continue
        pairs = [p for p in dataset.pairs_in(split, {name}) if not p.is_attack]
        if not pairs:
            continue
        rep = calibrate_delta(pairs, grid, dataset.store, labeler, dataset.abis)
        reports[name] = rep
        table.by_bridge[name] = rep.delta_star
        for addr in b.contracts.values():
            table.emitters[addr] = name
    return table, reports
