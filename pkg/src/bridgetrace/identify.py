"""Cross-chain transaction identification.

A transaction is described by 16 label-free statistics of its asset transfer
graph plus a 16-d learned encoding of its event names; a small classifier maps
the fused 32-d vector to Deposit, Withdrawal or NonCrossChain.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import DataError, ModelError
from .hashing import bucket, pad_bags
from .ledger import NATIVE, ZERO_ADDRESS, AbiRegistry, Transaction, token_transfers, tokenize_identifier
from .nn import checkpoint
from .nn.layers import tanh_backward

# Order doubles as tie precedence: argmax picks the first maximum.
LABELS = ("NonCrossChain", "Deposit", "Withdrawal")
NON_CROSS, DEPOSIT, WITHDRAWAL = range(3)
ASSET_DIM = 16
MESSAGE_DIM = 16
STAT_CLAMP = 50.0
WEI = 10**18


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    token: str
    amount: int
    origin: str  # "value", "internal" or "event"


@dataclass(frozen=True)
class TransferGraph:
    nodes: frozenset
    edges: tuple[Edge, ...]


def build_transfer_graph(tx: Transaction) -> TransferGraph:
    edges = []
    if tx.value > 0 and tx.to_addr:
        edges.append(Edge(tx.from_addr, tx.to_addr, NATIVE, tx.value, "value"))
    for it in tx.internal_transfers:
        edges.append(Edge(it.from_addr, it.to_addr, it.token, it.amount, "internal"))
    for src, dst, token, amount in token_transfers(tx):
        edges.append(Edge(src, dst, token, amount, "event"))
    nodes = frozenset(a for e in edges for a in (e.src, e.dst))
    return TransferGraph(nodes, tuple(edges))


def encode_asset_semantics(g: TransferGraph) -> np.ndarray:
    """Sixteen fixed graph statistics, each clamped to [0, 50]."""
    n_nodes, n_edges = len(g.nodes), len(g.edges)
    out_deg: dict[str, int] = {}
    in_deg: dict[str, int] = {}
    for e in g.edges:
        out_deg[e.src] = out_deg.get(e.src, 0) + 1
        in_deg[e.dst] = in_deg.get(e.dst, 0) + 1
    native = sum(e.amount for e in g.edges if e.token == NATIVE)
    amounts = [e.amount for e in g.edges]
    total = sum(amounts)
    entropy = 0.0
    if n_edges > 1 and total > 0:
        probs = sorted(a / total for a in amounts if a > 0)
        entropy = -sum(p * math.log(p) for p in probs) / math.log(n_edges)
    stats = [
        math.log1p(n_nodes),
        math.log1p(n_edges),
        math.log1p(len({e.token for e in g.edges})),
        math.log1p(native / WEI),
        math.log1p(sum(e.origin == "event" for e in g.edges)),
        max(out_deg.values(), default=0),
        max(in_deg.values(), default=0),
        2.0 * n_edges / n_nodes if n_nodes else 0.0,
        sum(e.amount == 0 for e in g.edges),
        math.log1p(sum(e.origin == "internal" for e in g.edges)),
        len(out_deg),
        len(in_deg),
        float(any(e.src == e.dst for e in g.edges)),
        float(any(e.dst == ZERO_ADDRESS for e in g.edges)),
        float(any(e.src == ZERO_ADDRESS for e in g.edges)),
        entropy,
    ]
    return np.clip(np.array(stats, dtype=np.float64), 0.0, STAT_CLAMP)


def event_names(tx: Transaction, abis: AbiRegistry) -> list[str]:
    names = []
    for lg in tx.logs:
        decl = abis.lookup(lg)
        if decl is not None:
            names.append(decl.name)
    return names


@dataclass
class IdentifyHyper:
    seed: int = 0
    epochs: int = 120
    batch_size: int = 128
    lr: float = 3e-3
    hidden: int = 64
    buckets: int = 4096
    embed_dim: int = 32
    patience: int = 20


class IdentifyModel:
    kind = "identify"

    def __init__(self, params: nn.Params, hyper: IdentifyHyper):
        self.params = params
        self.hyper = hyper

    @classmethod
    def init(cls, hyper: IdentifyHyper) -> "IdentifyModel":
        rng = np.random.Generator(np.random.PCG64(hyper.seed))
        e = hyper.embed_dim
        p = {"tok": nn.uniform_init(rng, e, (hyper.buckets, e))}
        p.update(nn.init_dense(rng, e, e, "msg1"))
        p.update(nn.init_dense(rng, e, MESSAGE_DIM, "msg2"))
        p.update(nn.init_dense(rng, ASSET_DIM + MESSAGE_DIM, hyper.hidden, "cls1"))
        p.update(nn.init_dense(rng, hyper.hidden, len(LABELS), "cls2"))
        return cls(p, hyper)

    # -- features -------------------------------------------------------------

    def token_ids(self, names: list[str]) -> list[int]:
        return [bucket(t, self.hyper.buckets, "ev:") for n in names for t in tokenize_identifier(n)]

    def featurize(self, txs: list[Transaction], abis: AbiRegistry):
        asset = np.stack([encode_asset_semantics(build_transfer_graph(t)) for t in txs]) if txs else np.zeros((0, ASSET_DIM))
        ids, mask = pad_bags([self.token_ids(event_names(t, abis)) for t in txs])
        return asset, ids, mask

    # -- network ---------------------------------------------------------------

    def _message(self, ids, mask):
        p = self.params
        pooled, c0 = nn.embed_mean_forward(p, "tok", ids, mask)
        z1, c1 = nn.dense_forward(p, "msg1", pooled)
        h1 = np.tanh(z1)
        z2, c2 = nn.dense_forward(p, "msg2", h1)
        m = np.tanh(z2)
        return m, (c0, c1, h1, c2, m)

    def forward(self, asset, ids, mask):
        p = self.params
        m, mc = self._message(ids, mask)
        x = np.concatenate([asset, m], axis=1)
        z, c3 = nn.dense_forward(p, "cls1", x)
        h = np.tanh(z)
        logits, c4 = nn.dense_forward(p, "cls2", h)
        return logits, (mc, c3, h, c4)

    def backward(self, dlogits, cache) -> nn.Params:
        (c0, c1, h1, c2, m), c3, h, c4 = cache
        dh, grads = nn.dense_backward(dlogits, c4)
        dx, g = nn.dense_backward(tanh_backward(dh, h), c3)
        grads.update(g)
        dm = dx[:, ASSET_DIM:]
        dh1, g = nn.dense_backward(tanh_backward(dm, m), c2)
        grads.update(g)
        dpooled, g = nn.dense_backward(tanh_backward(dh1, h1), c1)
        grads.update(g)
        grads.update(nn.embed_mean_backward(dpooled, c0))
        return grads

    # -- inference ---------------------------------------------------------------

    def message_vec(self, names: list[str]) -> np.ndarray:
        ids, mask = pad_bags([self.token_ids(names)])
        return self._message(ids, mask)[0][0]

    def semantics(self, tx: Transaction, abis: AbiRegistry) -> np.ndarray:
        asset = encode_asset_semantics(build_transfer_graph(tx))
        return np.concatenate([asset, self.message_vec(event_names(tx, abis))])

    def predict_proba(self, txs: list[Transaction], abis: AbiRegistry, chunk: int = 2048) -> np.ndarray:
        out = []
        for i in range(0, len(txs), chunk):
            logits, _ = self.forward(*self.featurize(txs[i:i + chunk], abis))
            out.append(nn.softmax(logits, axis=1))
        return np.concatenate(out) if out else np.zeros((0, len(LABELS)))

    def classify(self, tx: Transaction, abis: AbiRegistry) -> tuple[str, np.ndarray]:
        probs = self.predict_proba([tx], abis)[0]
        return LABELS[int(np.argmax(probs))], probs

    # -- persistence ---------------------------------------------------------------

    def save(self, path: Path) -> None:
        checkpoint.save(path, self.params, self.kind, dataclasses.asdict(self.hyper))

    @classmethod
    def load(cls, path: Path) -> "IdentifyModel":
        try:
            params, header = checkpoint.load(path, cls.kind)
        except nn.CheckpointError as exc:
            raise ModelError(str(exc)) from exc
        return cls(params, IdentifyHyper(**header["hyper"]))


def classify_tx(tx: Transaction, model: IdentifyModel, abis: AbiRegistry) -> tuple[str, np.ndarray]:
    return model.classify(tx, abis)


def tx_labels(dataset) -> dict[str, int]:
    """Ground-truth class per transaction hash."""
    labels = {t.tx_hash: NON_CROSS for t in dataset.store.transactions()}
    for p in dataset.pairs:
        labels[p.src_tx] = DEPOSIT
        labels[p.dst_tx] = WITHDRAWAL
    return labels


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int = len(LABELS)) -> float:
    scores = []
    for c in range(n_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


@dataclass
class TrainLog:
    epoch: int
    loss: float
    valid_f1: float


def train_identifier(dataset, hyper: IdentifyHyper | None = None, labels: dict[str, int] | None = None):
    """Minibatch Adam on cross-entropy; keeps the epoch with the best validation macro-F1.

    Returns (model, per-epoch log). ``labels`` overrides the ground truth (used by
    the shuffled-label sanity check).
    """
    hyper = hyper or IdentifyHyper()
    labels = labels if labels is not None else tx_labels(dataset)
    txs = dataset.store.transactions()
    split = dataset.split_assignment
    train = [t for t in txs if split.get(t.tx_hash) == "train"]
    valid = [t for t in txs if split.get(t.tx_hash) == "valid"]
    if not train or not valid:
        raise DataError("identify training needs non-empty train and valid splits")
    model = IdentifyModel.init(hyper)
    xa, xi, xm = model.featurize(train, dataset.abis)
    ya = np.array([labels[t.tx_hash] for t in train])
    va, vi, vm = model.featurize(valid, dataset.abis)
    yv = np.array([labels[t.tx_hash] for t in valid])
    rng = np.random.Generator(np.random.PCG64(hyper.seed + 1))
    state = nn.AdamState()
    adam = nn.AdamHyper(lr=hyper.lr)
    best, best_f1, since = None, -1.0, 0
    log = []
    onehot = np.eye(len(LABELS))
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for s in range(0, len(order), hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            logits, cache = model.forward(xa[idx], xi[idx], xm[idx])
            probs = nn.softmax(logits, axis=1)
            y = ya[idx]
            total += float(-np.log(probs[np.arange(len(idx)), y] + 1e-300).sum())
            grads = model.backward((probs - onehot[y]) / len(idx), cache)
            nn.adam_step(model.params, grads, state, adam)
        logits, _ = model.forward(va, vi, vm)
        f1 = macro_f1(yv, np.argmax(logits, axis=1))
        log.append(TrainLog(epoch, total / len(train), f1))
        if f1 > best_f1:
            best_f1, since = f1, 0
            best = {k: v.copy() for k, v in model.params.items()}
        else:
            since += 1
            if since >= hyper.patience:
                break
    model.params = best
    return model, log
