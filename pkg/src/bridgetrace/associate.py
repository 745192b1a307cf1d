"""Transaction association.

Each transaction becomes a set of typed key-value pairs (decoded event
parameters plus its amount-bearing fields). Keys and values are embedded,
fused, passed through a transformer block without positions and mean-pooled
into one vector. A shared-weight pairwise scorer compares the query embedding
with each candidate; the highest-scoring candidate is the counterpart.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import DataError, ModelError
from .hashing import bucket, pad_ids
from .ledger import KVPair, Transaction, UnknownChain, hex0x, token_transfers, tokenize_identifier
from .locate import BACKWARD, FORWARD, ClueNotFound, extract_explicit_clues, fetch_candidates
from .nn import checkpoint
from .nn.layers import tanh_backward

log = logging.getLogger(__name__)

NUMERIC, TEXT, ADDRESS = range(3)
KIND_OF = {"numeric": NUMERIC, "bool": NUMERIC, "text": TEXT, "bytes": TEXT, "address": ADDRESS}


class EmptyCandidates(Exception):
    pass


# ---------------------------------------------------------------------------
# key-value extraction and value encodings
# ---------------------------------------------------------------------------


def kv_pairs(tx: Transaction, abis, max_pairs: int = 32) -> list[KVPair]:
    """Decoded event parameters plus ``__value`` and ``__transfer_amount_i``.

    Booleans become numbers and byte strings become hex text. The list is put in
    a canonical order so the encoding ignores log and parameter order.
    """
    out = []
    for _, _, ev in abis.decode_all(tx):
        for kv in ev.pairs:
            if kv.kind == "bool":
                kv = KVPair(kv.key, "numeric", int(kv.value))
            elif kv.kind == "bytes":
                kv = KVPair(kv.key, "text", hex0x(kv.value))
            out.append(kv)
    out.append(KVPair("__value", "numeric", tx.value))
    amounts = sorted([a for *_, a in token_transfers(tx)] + [it.amount for it in tx.internal_transfers])
    out += [KVPair(f"__transfer_amount_{i}", "numeric", a) for i, a in enumerate(amounts)]
    out.sort(key=lambda kv: (kv.key, kv.kind, str(kv.value)))
    return out[:max_pairs]


def encode_numeric(value: int) -> np.ndarray:
    """IEEE-754 double bits of the nearest float, sign bit first."""
    raw = np.array([float(value)], dtype=">f8").tobytes()
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8)).astype(np.float64)


def text_tokens(text: str) -> list[str]:
    # whole string as an extra token keeps long identifiers (hashes) distinguishable
    return tokenize_identifier(text) + [text]


@dataclass
class TxFeatures:
    key_ids: list[list[int]]
    kinds: list[int]
    bits: np.ndarray  # [n_numeric, 64]
    text_ids: list[list[int]]
    addr_ids: list[int]

    @property
    def n(self) -> int:
        return len(self.kinds)


@dataclass
class AssocHyper:
    seed: int = 0
    epochs: int = 120
    batch_size: int = 32
    lr: float = 1e-3
    d: int = 64
    d_ff: int = 64
    sn_hidden: int = 64
    sn_out: int = 16
    embed_dim: int = 32
    text_buckets: int = 4096
    addr_buckets: int = 8192
    max_kv: int = 32
    min_candidates: int = 5
    patience: int = 10
    ln_eps: float = 1e-5
    remap: float = 0.5  # chance a training batch sees its names and values renamed at random
    batch_negatives: int = 4  # other queries' counterparts added to each training set


@dataclass
class AssociationScores:
    raw: np.ndarray
    normalized: np.ndarray
    scores: np.ndarray
    ranking: list[int]


class AssociatorModel:
    kind = "associate"

    def __init__(self, params: nn.Params, hyper: AssocHyper):
        self.params = params
        self.hyper = hyper
        self._features: dict[str, TxFeatures] = {}

    @classmethod
    def init(cls, hyper: AssocHyper) -> "AssociatorModel":
        rng = np.random.Generator(np.random.PCG64(hyper.seed))
        e, d = hyper.embed_dim, hyper.d
        p = {
            "txt": nn.uniform_init(rng, e, (hyper.text_buckets, e)),
            "addr": nn.uniform_init(rng, e, (hyper.addr_buckets, e)),
        }
        p.update(nn.init_dense(rng, e, d, "key"))
        p.update(nn.init_dense(rng, 64, d, "num"))
        p.update(nn.init_dense(rng, e, d, "text"))
        p.update(nn.init_dense(rng, e, d, "adr"))
        p.update(nn.init_dense(rng, 2 * d, d, "fuse"))
        p.update(nn.init_transformer_block(rng, d, hyper.d_ff, "tf"))
        p.update(nn.init_dense(rng, d, d, "out"))
        p.update(nn.init_siamese(rng, d, hyper.sn_hidden, hyper.sn_out, "sn"))
        return cls(p, hyper)

    # -- features ------------------------------------------------------------

    def _text_ids(self, text: str) -> list[int]:
        return [bucket(t, self.hyper.text_buckets, "txt:") for t in text_tokens(text)]

    def featurize_pairs(self, pairs: list[KVPair]) -> TxFeatures:
        h = self.hyper
        key_ids, kinds, bits, text_ids, addr_ids = [], [], [], [], []
        for kv in pairs:
            key_ids.append([bucket(t, h.text_buckets, "txt:") for t in tokenize_identifier(kv.key)])
            kind = KIND_OF[kv.kind]
            kinds.append(kind)
            if kind == NUMERIC:
                bits.append(encode_numeric(int(kv.value)))
            elif kind == TEXT:
                value = hex0x(kv.value) if isinstance(kv.value, bytes) else str(kv.value)
                text_ids.append(self._text_ids(value))
            else:
                addr_ids.append(bucket(str(kv.value), h.addr_buckets, "addr:"))
        return TxFeatures(key_ids, kinds, np.array(bits).reshape(-1, 64), text_ids, addr_ids)

    def features(self, tx: Transaction, abis) -> TxFeatures:
        hit = self._features.get(tx.tx_hash)
        if hit is None:
            hit = self._features[tx.tx_hash] = self.featurize_pairs(kv_pairs(tx, abis, self.hyper.max_kv))
        return hit

    # -- encoder -------------------------------------------------------------------

    def encode_value(self, kv: KVPair) -> np.ndarray:
        """Pre-MLP value encoding: 64 bits, pooled text embedding, or address embedding."""
        f = self.featurize_pairs([kv])
        if f.kinds[0] == NUMERIC:
            return f.bits[0]
        if f.kinds[0] == TEXT:
            return self.params["txt"][f.text_ids[0]].mean(axis=0)
        return self.params["addr"][f.addr_ids[0]].copy()

    def encode_forward(self, feats: list[TxFeatures]):
        p, d = self.params, self.hyper.d
        B = len(feats)
        L = max([1] + [f.n for f in feats])
        rows_b = np.array([b for b, f in enumerate(feats) for _ in range(f.n)], dtype=np.int64)
        rows_pos = np.array([i for f in feats for i in range(f.n)], dtype=np.int64)
        kinds = np.array([k for f in feats for k in f.kinds], dtype=np.int64)
        R = len(kinds)
        mask = np.zeros((B, L), dtype=bool)
        mask[rows_b, rows_pos] = True
        cache: dict = {"B": B, "L": L, "R": R, "rows": (rows_b, rows_pos), "mask": mask}
        X = np.zeros((B, L, d))
        if R:
            kid, kmask = pad_ids([k for f in feats for k in f.key_ids])
            kpool, cache["k0"] = nn.embed_mean_forward(p, "txt", kid, kmask)
            kz, cache["k1"] = nn.dense_forward(p, "key", kpool)
            kv = np.tanh(kz)
            val = np.zeros((R, d))
            idx_n, idx_t, idx_a = (np.flatnonzero(kinds == k) for k in (NUMERIC, TEXT, ADDRESS))
            cache["idx"] = (idx_n, idx_t, idx_a)
            if len(idx_n):
                z, cache["n1"] = nn.dense_forward(p, "num", np.concatenate([f.bits for f in feats]))
                val[idx_n] = np.tanh(z)
            if len(idx_t):
                tid, tmask = pad_ids([t for f in feats for t in f.text_ids])
                tpool, cache["t0"] = nn.embed_mean_forward(p, "txt", tid, tmask)
                z, cache["t1"] = nn.dense_forward(p, "text", tpool)
                val[idx_t] = np.tanh(z)
            if len(idx_a):
                aid = np.array([a for f in feats for a in f.addr_ids], dtype=np.int64)
                z, cache["a1"] = nn.dense_forward(p, "adr", p["addr"][aid])
                cache["aid"] = aid
                val[idx_a] = np.tanh(z)
            fz, cache["f1"] = nn.dense_forward(p, "fuse", np.concatenate([kv, val], axis=1))
            fused = np.tanh(fz)
            X[rows_b, rows_pos] = fused
            cache.update(kv=kv, val=val, fused=fused)
        Y, cache["tf"] = nn.transformer_block_forward(p, "tf", X, mask)
        m = mask[..., None].astype(float)
        count = np.maximum(m.sum(axis=1), 1.0)
        pooled = (Y * m).sum(axis=1) / count
        emb, cache["out"] = nn.dense_forward(p, "out", pooled)
        cache.update(m=m, count=count)
        return emb, cache

    def encode_backward(self, demb: np.ndarray, cache) -> nn.Params:
        p, d = self.params, self.hyper.d
        dpooled, grads = nn.dense_backward(demb, cache["out"])
        dY = (dpooled / cache["count"])[:, None, :] * cache["m"]
        dX, g = nn.transformer_block_backward(p, dY, cache["tf"])
        nn.add_grads(grads, g)
        R = cache["R"]
        if not R:
            return grads
        rows_b, rows_pos = cache["rows"]
        dfused = dX[rows_b, rows_pos]
        dcat, g = nn.dense_backward(tanh_backward(dfused, cache["fused"]), cache["f1"])
        nn.add_grads(grads, g)
        dkv, dval = dcat[:, :d], dcat[:, d:]
        dkpool, g = nn.dense_backward(tanh_backward(dkv, cache["kv"]), cache["k1"])
        nn.add_grads(grads, g)
        nn.add_grads(grads, nn.embed_mean_backward(dkpool, cache["k0"]))
        idx_n, idx_t, idx_a = cache["idx"]
        val = cache["val"]
        if len(idx_n):
            _, g = nn.dense_backward(tanh_backward(dval[idx_n], val[idx_n]), cache["n1"])
            nn.add_grads(grads, g)
        if len(idx_t):
            dtpool, g = nn.dense_backward(tanh_backward(dval[idx_t], val[idx_t]), cache["t1"])
            nn.add_grads(grads, g)
            nn.add_grads(grads, nn.embed_mean_backward(dtpool, cache["t0"]))
        if len(idx_a):
            dax, g = nn.dense_backward(tanh_backward(dval[idx_a], val[idx_a]), cache["a1"])
            nn.add_grads(grads, g)
            daddr = np.zeros_like(p["addr"])
            np.add.at(daddr, cache["aid"], dax)
            nn.add_grads(grads, {"addr": daddr})
        return grads

    def encode_transactions(self, txs: list[Transaction], abis, chunk: int = 512) -> np.ndarray:
        out = [self.encode_forward([self.features(t, abis) for t in txs[i:i + chunk]])[0]
               for i in range(0, len(txs), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.hyper.d))

    def encode_transaction(self, tx: Transaction, abis) -> np.ndarray:
        return self.encode_transactions([tx], abis)[0]

    # -- scoring ------------------------------------------------------------------------

    def score(self, q_emb: np.ndarray, cand_embs: np.ndarray) -> AssociationScores:
        return score_candidates(q_emb, cand_embs, self)

    # -- persistence ------------------------------------------------------------------

    def save(self, path: Path) -> None:
        checkpoint.save(path, self.params, self.kind, dataclasses.asdict(self.hyper))

    @classmethod
    def load(cls, path: Path) -> "AssociatorModel":
        try:
            params, header = checkpoint.load(path, cls.kind)
        except nn.CheckpointError as exc:
            raise ModelError(str(exc)) from exc
        return cls(params, AssocHyper(**header["hyper"]))


def encode_transaction(tx: Transaction, model: AssociatorModel, abis) -> np.ndarray:
    return model.encode_transaction(tx, abis)


def score_candidates(q_emb: np.ndarray, cand_embs: np.ndarray, model: AssociatorModel) -> AssociationScores:
    cand_embs = np.asarray(cand_embs, dtype=np.float64).reshape(-1, model.hyper.d)
    n = cand_embs.shape[0]
    if n == 0:
        raise EmptyCandidates("no candidates to score")
    ps, _ = nn.siamese_forward(model.params, "sn", np.asarray(q_emb).reshape(1, -1), cand_embs,
                               np.zeros(n, dtype=int), model.hyper.ln_eps)
    ranking = sorted(range(n), key=lambda i: (-ps.scores[i], i))
    return AssociationScores(ps.raw, ps.normalized, ps.scores, ranking)


def rank_and_select(scores: AssociationScores, candidates: list[Transaction]) -> tuple[int, Transaction]:
    """Highest score; ties go to the earlier timestamp, then lower block, then smaller hash."""
    if not candidates:
        raise EmptyCandidates("no candidates to select from")
    best = max(scores.scores)
    tied = [i for i, s in enumerate(scores.scores) if s == best]
    i = min(tied, key=lambda k: candidates[k].sort_key)
    return i, candidates[i]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class Group:
    query: str
    candidates: list[str]
    target: int
    direction: str


@dataclass
class GroupStats:
    built: int = 0
    no_clue: int = 0
    truth_missing: int = 0
    augmented: int = 0


class _Neighborhood:
    """Successful transactions per chain, sorted by time, for negative sampling."""

    def __init__(self, store):
        self.txs = {c: [t for t in store.transactions(c) if t.ok] for c in store.chains}
        self.times = {c: np.array([t.timestamp for t in v]) for c, v in self.txs.items()}

    def sample(self, chain: int, ts: int, exclude: set[str], k: int, rng, pool: int = 20) -> list[str]:
        txs, times = self.txs[chain], self.times[chain]
        at = int(np.searchsorted(times, ts))
        lo, hi = max(0, at - pool - len(exclude)), min(len(txs), at + pool + len(exclude))
        near = [i for i in range(lo, hi) if txs[i].tx_hash not in exclude]
        near.sort(key=lambda i: (abs(int(times[i]) - ts), i))
        near = near[:pool]
        pick = rng.permutation(len(near))[:k]
        return [txs[near[int(i)]].tx_hash for i in sorted(pick)]


def build_groups(dataset, pairs, labeler, deltas, min_candidates: int, rng,
                 stats: GroupStats | None = None) -> list[Group]:
    """Candidate sets for both directions of each pair, padded with neighborhood negatives."""
    stats = stats if stats is not None else GroupStats()
    store, abis = dataset.store, dataset.abis
    groups = []
    hood = _Neighborhood(store)
    for p in pairs:
        for q_hash, t_hash, direction in ((p.src_tx, p.dst_tx, FORWARD), (p.dst_tx, p.src_tx, BACKWARD)):
            q = store.get(q_hash)
            try:
                clues = extract_explicit_clues(q, "", labeler, abis, store, deltas, direction=direction)
            except (ClueNotFound, UnknownChain):
                stats.no_clue += 1
                continue
            cands = [t.tx_hash for t in fetch_candidates(q, clues, store).candidates]
            if t_hash not in cands:
                stats.truth_missing += 1
                continue
            if len(cands) < min_candidates:
                truth = store.get(t_hash)
                extra = hood.sample(truth.chain, truth.timestamp, set(cands) | {q_hash},
                                    min_candidates - len(cands), rng)
                if extra:
                    stats.augmented += 1
                cands = sorted(cands + extra, key=lambda h: store.get(h).sort_key)
            groups.append(Group(q_hash, cands, cands.index(t_hash), direction))
            stats.built += 1
    return groups


@dataclass
class AssocLog:
    epoch: int
    loss: float
    train_top1: float
    valid_top1: float
    valid_renamed_top1: float  # with names and values renamed, a stand-in for unseen bridges


def remap_tokens(feats: list[TxFeatures], hyper: AssocHyper, rng) -> list[TxFeatures]:
    """Rename key tokens, text tokens and addresses to random buckets, consistently across the batch.

    Equal values stay equal, so matching still works, but no specific name or value
    can be memorized.
    """
    txt = sorted({t for f in feats for ids in f.key_ids + f.text_ids for t in ids})
    adr = sorted({a for f in feats for a in f.addr_ids})
    to_txt = dict(zip(txt, rng.integers(0, hyper.text_buckets, len(txt)).tolist()))
    to_adr = dict(zip(adr, rng.integers(0, hyper.addr_buckets, len(adr)).tolist()))
    return [dataclasses.replace(f, key_ids=[[to_txt[t] for t in ids] for ids in f.key_ids],
                                text_ids=[[to_txt[t] for t in ids] for ids in f.text_ids],
                                addr_ids=[to_adr[a] for a in f.addr_ids]) for f in feats]


def with_batch_negatives(groups: list[Group], k: int, rng) -> list[Group]:
    """Append up to ``k`` counterparts of other same-direction queries in the batch as negatives.

    Each counterpart is then a positive for one query and a negative for others, so
    a candidate's look alone cannot decide its score.
    """
    out = []
    for i, g in enumerate(groups):
        pool = [o.candidates[o.target] for j, o in enumerate(groups) if j != i and o.direction == g.direction]
        pool = [h for h in dict.fromkeys(pool) if h not in g.candidates]
        pick = [pool[int(j)] for j in sorted(rng.permutation(len(pool))[:k])]
        out.append(dataclasses.replace(g, candidates=g.candidates + pick))
    return out


def _batch_loss(model: AssociatorModel, groups: list[Group], store, abis, train: bool, rng=None, always=False):
    hashes = []
    slot = {}
    for g in groups:
        for h in [g.query] + g.candidates:
            if h not in slot:
                slot[h] = len(hashes)
                hashes.append(h)
    feats = [model.features(store.get(h), abis) for h in hashes]
    if rng is not None and (always or rng.random() < model.hyper.remap):
        feats = remap_tokens(feats, model.hyper, rng)
    emb, cache = model.encode_forward(feats)
    qrows = np.array([slot[g.query] for g in groups])
    crows = np.array([slot[h] for g in groups for h in g.candidates])
    qidx = np.array([i for i, g in enumerate(groups) for _ in g.candidates])
    ps, scache = nn.siamese_forward(model.params, "sn", emb[qrows], emb[crows], qidx, model.hyper.ln_eps)
    total, correct, dscores, off = 0.0, 0, np.zeros(len(crows)), 0
    for g in groups:
        n = len(g.candidates)
        s = ps.scores[off:off + n]
        loss, grad = nn.softmax_xent(s, g.target)
        total += loss
        correct += int(np.argmax(s) == g.target)
        dscores[off:off + n] = grad / len(groups)
        off += n
    if not train:
        return total, correct, None
    dq, dd, grads = nn.siamese_backward(model.params, dscores, scache)
    demb = np.zeros_like(emb)
    np.add.at(demb, qrows, dq)
    np.add.at(demb, crows, dd)
    nn.add_grads(grads, model.encode_backward(demb, cache))
    return total, correct, grads


def evaluate_groups(model, groups, store, abis, batch: int = 64, renamed_seed: int | None = None) -> tuple[float, float]:
    """(mean loss, top-1 accuracy) without updating the model.

    With ``renamed_seed`` every batch is renamed by ``remap_tokens`` under that seed.
    """
    rng = None if renamed_seed is None else np.random.Generator(np.random.PCG64(renamed_seed))
    loss = correct = 0.0
    for s in range(0, len(groups), batch):
        l, c, _ = _batch_loss(model, groups[s:s + batch], store, abis, train=False, rng=rng, always=True)
        loss += l
        correct += c
    n = max(len(groups), 1)
    return loss / n, correct / n


def train_associator(dataset, labeler, deltas, hyper: AssocHyper | None = None, bridges=None):
    """Listwise softmax cross-entropy over candidate sets.

    Keeps the checkpoint with the best mean of plain and renamed validation top-1.

    Returns (model, log, GroupStats for the training split).
    """
    hyper = hyper or AssocHyper()
    rng = np.random.Generator(np.random.PCG64(hyper.seed + 1))
    stats = GroupStats()
    train = build_groups(dataset, dataset.pairs_in("train", bridges), labeler, deltas,
                         hyper.min_candidates, rng, stats)
    valid = build_groups(dataset, dataset.pairs_in("valid", bridges), labeler, deltas,
                         hyper.min_candidates, rng)
    if not train or not valid:
        raise DataError("associator training needs candidate sets in train and valid")
    if stats.truth_missing or stats.no_clue:
        log.warning("skipped %d pairs without clues and %d whose window missed the counterpart",
                    stats.no_clue, stats.truth_missing)
    model = AssociatorModel.init(hyper)
    store, abis = dataset.store, dataset.abis
    state, adam = nn.AdamState(), nn.AdamHyper(lr=hyper.lr)
    best, best_score, since, history = None, -1.0, 0, []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train))
        total = correct = 0.0
        for s in range(0, len(order), hyper.batch_size):
            batch = with_batch_negatives([train[int(i)] for i in order[s:s + hyper.batch_size]],
                                         hyper.batch_negatives, rng)
            l, c, grads = _batch_loss(model, batch, store, abis, train=True, rng=rng)
            total += l
            correct += c
            nn.adam_step(model.params, grads, state, adam)
        _, acc = evaluate_groups(model, valid, store, abis)
        _, renamed = evaluate_groups(model, valid, store, abis, renamed_seed=hyper.seed + 2)
        history.append(AssocLog(epoch, total / len(train), correct / len(train), acc, renamed))
        score = (acc + renamed) / 2
        if score > best_score:
            best_score, since = score, 0
            best = {k: v.copy() for k, v in model.params.items()}
            if score >= 1.0:
                break
        else:
            since += 1
            if since >= hyper.patience:
                break
    model.params = best
    return model, history, stats
