"""Chain data model, ABI event decoding and the indexed local transaction store.

Addresses and hashes are carried as lowercase ``0x``-prefixed hex strings;
amounts as Python ints (uint256 range).
"""
from __future__ import annotations

import bisect
import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from Crypto.Hash import keccak

ZERO_ADDRESS = "0x" + "00" * 20
NATIVE = "native"
WORD = 32
UINT256_MAX = (1 << 256) - 1


class LedgerError(Exception):
    pass


class ParseError(LedgerError):
    pass


class DecodeError(LedgerError):
    pass


class SignatureMismatch(DecodeError):
    pass


class UnknownChain(LedgerError):
    pass


class UnknownTx(LedgerError):
    pass


def keccak256(data: bytes) -> bytes:
    h = keccak.new(digest_bits=256)
    h.update(data)
    return h.digest()


def hex0x(b: bytes) -> str:
    return "0x" + b.hex()


def unhex(s: str) -> bytes:
    if s.startswith(("0x", "0X")):
        s = s[2:]
    return bytes.fromhex(s)


def norm_address(addr: str) -> str:
    raw = unhex(addr)
    if len(raw) != 20:
        raise ValueError(f"address must be 20 bytes: {addr!r}")
    return hex0x(raw)


# ---------------------------------------------------------------------------
# transactions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawLog:
    emitter: str
    topics: tuple[str, ...]
    data: bytes = b""


@dataclass(frozen=True)
class InternalTransfer:
    from_addr: str
    to_addr: str
    token: str  # token contract address or NATIVE
    amount: int


@dataclass
class Transaction:
    chain: int
    tx_hash: str
    block_number: int
    timestamp: int
    from_addr: str
    to_addr: str | None
    value: int = 0
    input_data: bytes = b""
    status: str = "success"
    logs: list[RawLog] = field(default_factory=list)
    internal_transfers: list[InternalTransfer] = field(default_factory=list)

    @property
    def sort_key(self) -> tuple[int, int, str]:
        return (self.timestamp, self.block_number, self.tx_hash)

    @property
    def ok(self) -> bool:
        return self.status == "success"

    def to_json(self) -> dict:
        return {
            "chain_id": self.chain,
            "tx_hash": self.tx_hash,
            "block_number": self.block_number,
            "timestamp": self.timestamp,
            "from": self.from_addr,
            "to": self.to_addr,
            "value": str(self.value),
            "input": hex0x(self.input_data),
            "status": self.status,
            "logs": [
                {"address": lg.emitter, "topics": list(lg.topics), "data": hex0x(lg.data)}
                for lg in self.logs
            ],
            "internal_transfers": [
                {"from": it.from_addr, "to": it.to_addr, "token": it.token, "amount": str(it.amount)}
                for it in self.internal_transfers
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Transaction":
        status = obj.get("status", "success")
        if status not in ("success", "failed"):
            raise ValueError(f"bad status {status!r}")
        return cls(
            chain=int(obj["chain_id"]),
            tx_hash=obj["tx_hash"].lower(),
            block_number=int(obj["block_number"]),
            timestamp=int(obj["timestamp"]),
            from_addr=norm_address(obj["from"]),
            to_addr=norm_address(obj["to"]) if obj.get("to") else None,
            value=int(obj.get("value", "0")),
            input_data=unhex(obj.get("input", "0x")),
            status=status,
            logs=[
                RawLog(
                    emitter=norm_address(lg["address"]),
                    topics=tuple(t.lower() for t in lg.get("topics", [])),
                    data=unhex(lg.get("data", "0x")),
                )
                for lg in obj.get("logs", [])
            ],
            internal_transfers=[
                InternalTransfer(
                    from_addr=norm_address(it["from"]),
                    to_addr=norm_address(it["to"]),
                    token=it["token"] if it["token"] == NATIVE else norm_address(it["token"]),
                    amount=int(it["amount"]),
                )
                for it in obj.get("internal_transfers", [])
            ],
        )


# ---------------------------------------------------------------------------
# event declarations
# ---------------------------------------------------------------------------

_TYPE_RE = re.compile(r"^(uint(\d*)|address|string|bytes(\d*)|bool)$")
_NAME_RE = re.compile(r"^[A-Za-z_$][A-Za-z0-9_$]*$")
_INDEX_MARK = re.compile(r"^index_topic_(\d+)$")


@dataclass(frozen=True)
class Param:
    name: str
    abi_type: str
    indexed: bool = False

    @property
    def base_type(self) -> str:
        """Type family without width: uint, address, string, bytes, bool."""
        for base in ("uint", "bytes"):
            if self.abi_type.startswith(base):
                return base
        return self.abi_type


@dataclass(frozen=True)
class EventDecl:
    name: str
    params: tuple[Param, ...]

    @property
    def canonical(self) -> str:
        return f"{self.name}({','.join(p.abi_type for p in self.params)})"

    @cached_property
    def topic0(self) -> str:
        return hex0x(keccak256(self.canonical.encode()))

    def to_text(self) -> str:
        """Render in the explorer-style form accepted by parse_event_signature."""
        parts = []
        k = 0
        for p in self.params:
            if p.indexed:
                k += 1
                parts.append(f"index_topic_{k} {p.abi_type} {p.name}")
            else:
                parts.append(f"{p.abi_type} {p.name}")
        return f"{self.name} ({', '.join(parts)})"


def _canonical_type(tok: str) -> str | None:
    m = _TYPE_RE.match(tok)
    if not m:
        return None
    if tok.startswith("uint"):
        bits = int(m.group(2)) if m.group(2) else 256
        if bits < 8 or bits > 256 or bits % 8:
            return None
        return f"uint{bits}"
    if tok.startswith("bytes") and m.group(3):
        n = int(m.group(3))
        return tok if 1 <= n <= 32 else None
    return tok


def parse_event_signature(text: str) -> EventDecl:
    """Parse ``Name (type [indexed] name, ...)``.

    Indexed parameters may be written explorer-style (``index_topic_2 address to``)
    or Solidity-style (``address indexed to``).
    """
    s = text.strip()
    depth = 0
    for ch in s:
        if ch == "(":
            depth += 1
            if depth > 1:
                raise ParseError(f"nested parentheses in {text!r}")
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise ParseError(f"unbalanced parentheses in {text!r}")
    if depth != 0:
        raise ParseError(f"unbalanced parentheses in {text!r}")
    m = re.match(r"^([A-Za-z_$][A-Za-z0-9_$]*)\s*\((.*)\)$", s, re.S)
    if not m:
        raise ParseError(f"not an event declaration: {text!r}")
    name, body = m.group(1), m.group(2).strip()
    params: list[Param] = []
    seen: set[str] = set()
    if body:
        for raw in body.split(","):
            toks = raw.split()
            if not toks:
                raise ParseError(f"empty parameter in {text!r}")
            indexed = False
            mark = _INDEX_MARK.match(toks[0])
            if mark:
                indexed = True
                toks = toks[1:]
            if len(toks) == 3 and toks[1] == "indexed":
                indexed = True
                toks = [toks[0], toks[2]]
            if len(toks) != 2:
                raise ParseError(f"malformed parameter {raw.strip()!r}")
            abi_type = _canonical_type(toks[0])
            if abi_type is None:
                raise ParseError(f"unknown type {toks[0]!r}")
            pname = toks[1]
            if not _NAME_RE.match(pname):
                raise ParseError(f"bad parameter name {pname!r}")
            if pname in seen:
                raise ParseError(f"duplicate parameter {pname!r}")
            seen.add(pname)
            params.append(Param(pname, abi_type, indexed))
    if sum(p.indexed for p in params) > 3:
        raise ParseError("more than 3 indexed parameters")
    return EventDecl(name, tuple(params))


# ---------------------------------------------------------------------------
# typed values and decoding
# ---------------------------------------------------------------------------

VALUE_KINDS = ("numeric", "address", "text", "bool", "bytes")


@dataclass(frozen=True)
class KVPair:
    key: str
    kind: str
    value: int | str | bool | bytes

    def __post_init__(self):
        if not self.key:
            raise ValueError("empty key")
        if self.kind not in VALUE_KINDS:
            raise ValueError(f"unknown value kind {self.kind!r}")


@dataclass(frozen=True)
class DecodedEvent:
    name: str
    pairs: tuple[KVPair, ...]

    def get(self, key: str):
        for kv in self.pairs:
            if kv.key == key:
                return kv.value
        raise KeyError(key)

    def as_dict(self) -> dict:
        return {kv.key: kv.value for kv in self.pairs}


def _decode_word(word: bytes, p: Param) -> KVPair:
    base = p.base_type
    if base == "uint":
        v = int.from_bytes(word, "big")
        bits = int(p.abi_type[4:])
        if v >> bits:
            raise DecodeError(f"{p.name}: value exceeds {p.abi_type}")
        return KVPair(p.name, "numeric", v)
    if base == "address":
        if any(word[:12]):
            raise DecodeError(f"{p.name}: dirty address padding")
        return KVPair(p.name, "address", hex0x(word[12:]))
    if base == "bool":
        v = int.from_bytes(word, "big")
        if v > 1:
            raise DecodeError(f"{p.name}: bool out of range")
        return KVPair(p.name, "bool", bool(v))
    if base == "string":
        try:
            return KVPair(p.name, "text", word.rstrip(b"\x00").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise DecodeError(f"{p.name}: invalid utf-8") from exc
    n = int(p.abi_type[5:]) if p.abi_type != "bytes" else WORD
    if any(word[n:]):
        raise DecodeError(f"{p.name}: dirty bytes padding")
    return KVPair(p.name, "bytes", word[:n])


def _encode_word(value, p: Param) -> bytes:
    base = p.base_type
    if base == "uint":
        v = int(value)
        if v < 0 or v >> int(p.abi_type[4:]):
            raise ValueError(f"{p.name}: {v} out of range for {p.abi_type}")
        return v.to_bytes(WORD, "big")
    if base == "address":
        return b"\x00" * 12 + unhex(value)
    if base == "bool":
        return int(bool(value)).to_bytes(WORD, "big")
    if base == "string":
        raw = value.encode("utf-8")
        if len(raw) > WORD or raw.endswith(b"\x00"):
            raise ValueError(f"{p.name}: string does not fit one word")
        return raw.ljust(WORD, b"\x00")
    raw = bytes(value)
    n = int(p.abi_type[5:]) if p.abi_type != "bytes" else WORD
    if len(raw) != n:
        raise ValueError(f"{p.name}: expected {n} bytes")
    return raw.ljust(WORD, b"\x00")


def encode_event(decl: EventDecl, values: dict, emitter: str) -> RawLog:
    """Inverse of decode_event for static (one-word) parameters."""
    topics = [decl.topic0]
    data = bytearray()
    for p in decl.params:
        word = _encode_word(values[p.name], p)
        if p.indexed:
            topics.append(hex0x(word))
        else:
            data += word
    return RawLog(emitter=emitter, topics=tuple(topics), data=bytes(data))


def decode_event(log: RawLog, decl: EventDecl) -> DecodedEvent:
    if not log.topics or log.topics[0] != decl.topic0:
        raise SignatureMismatch(f"topic0 does not match {decl.canonical}")
    indexed = [p for p in decl.params if p.indexed]
    plain = [p for p in decl.params if not p.indexed]
    if len(log.topics) != 1 + len(indexed):
        raise DecodeError(f"expected {1 + len(indexed)} topics, got {len(log.topics)}")
    if len(log.data) != WORD * len(plain):
        raise DecodeError(f"expected {WORD * len(plain)} data bytes, got {len(log.data)}")
    topic_words = iter(unhex(t) for t in log.topics[1:])
    slot = 0
    pairs = []
    for p in decl.params:
        if p.indexed:
            word = next(topic_words)
            if len(word) != WORD:
                raise DecodeError("topic is not 32 bytes")
        else:
            word = log.data[slot * WORD:(slot + 1) * WORD]
            slot += 1
        pairs.append(_decode_word(word, p))
    return DecodedEvent(decl.name, tuple(pairs))


TRANSFER = parse_event_signature(
    "Transfer (index_topic_1 address from, index_topic_2 address to, uint256 value)"
)


def token_transfers(tx: Transaction) -> Iterator[tuple[str, str, str, int]]:
    """ERC-20 Transfer events as (from, to, token, amount)."""
    topic = TRANSFER.topic0
    for lg in tx.logs:
        if lg.topics and lg.topics[0] == topic and len(lg.topics) == 3:
            try:
                ev = decode_event(lg, TRANSFER)
            except DecodeError:
                continue
            yield ev.get("from"), ev.get("to"), lg.emitter, ev.get("value")


def participants(tx: Transaction) -> set[str]:
    """Addresses a transaction touches as sender, recipient or transfer endpoint."""
    out = {tx.from_addr}
    if tx.to_addr:
        out.add(tx.to_addr)
    for it in tx.internal_transfers:
        out.add(it.from_addr)
        out.add(it.to_addr)
    for src, dst, _, _ in token_transfers(tx):
        out.add(src)
        out.add(dst)
    return out


# ---------------------------------------------------------------------------
# identifier tokenization
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[A-Z]+(?![a-z])|[A-Z]?[a-z]+|\d+")


def tokenize_identifier(name: str) -> list[str]:
    """Split on camelCase humps, digit/letter boundaries and underscores.

    >>> tokenize_identifier("destinationChainId")
    ['destination', 'chain', 'id']
    """
    return [t.lower() for t in _TOKEN_RE.findall(name)]


# ---------------------------------------------------------------------------
# ABI registry
# ---------------------------------------------------------------------------


class AbiRegistry:
    """Per-emitter event declarations, looked up by topic0."""

    def __init__(self, by_emitter: dict[str, list[EventDecl]] | None = None):
        self._decls: dict[str, dict[str, EventDecl]] = {}
        for emitter, decls in (by_emitter or {}).items():
            for d in decls:
                self.add(emitter, d)

    def add(self, emitter: str, decl: EventDecl) -> None:
        self._decls.setdefault(norm_address(emitter), {})[decl.topic0] = decl

    def lookup(self, log: RawLog) -> EventDecl | None:
        if not log.topics:
            return None
        hit = self._decls.get(log.emitter, {}).get(log.topics[0])
        if hit is None and log.topics[0] == TRANSFER.topic0:
            return TRANSFER
        return hit

    def emitters(self) -> list[str]:
        return sorted(self._decls)

    def declarations(self, emitter: str) -> list[EventDecl]:
        return list(self._decls.get(emitter, {}).values())

    def decode_all(self, tx: Transaction) -> list[tuple[int, EventDecl, DecodedEvent]]:
        """Decode every log with a known declaration; undecodable logs are skipped."""
        out = []
        for i, lg in enumerate(tx.logs):
            decl = self.lookup(lg)
            if decl is None:
                continue
            try:
                out.append((i, decl, decode_event(lg, decl)))
            except DecodeError:
                continue
        return out

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        for emitter in self.emitters():
            sigs = sorted(d.to_text() for d in self._decls[emitter].values())
            (directory / f"{emitter}.json").write_text(json.dumps(sigs, indent=1) + "\n")

    @classmethod
    def load(cls, directory: Path) -> "AbiRegistry":
        reg = cls()
        if directory.is_dir():
            for path in sorted(directory.glob("*.json")):
                for sig in json.loads(path.read_text()):
                    reg.add(path.stem, parse_event_signature(sig))
        return reg


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------


class TxStore:
    """In-memory transaction store with a per-(chain, address) time index.

    Immutable after construction; reads are safe from several threads.
    """

    def __init__(self, txs: Iterable[Transaction], chains: Iterable[int] | None = None):
        self._by_hash: dict[str, Transaction] = {}
        self._chains: dict[int, list[Transaction]] = {int(c): [] for c in (chains or ())}
        for tx in txs:
            if tx.tx_hash in self._by_hash:
                raise ValueError(f"duplicate tx hash {tx.tx_hash}")
            self._by_hash[tx.tx_hash] = tx
            self._chains.setdefault(tx.chain, []).append(tx)
        self._index: dict[tuple[int, str], list[Transaction]] = {}
        for chain, txs_ in self._chains.items():
            txs_.sort(key=lambda t: t.sort_key)
            for tx in txs_:
                for addr in participants(tx):
                    self._index.setdefault((chain, addr), []).append(tx)
        self._times = {k: [t.timestamp for t in v] for k, v in self._index.items()}

    @property
    def chains(self) -> list[int]:
        return sorted(self._chains)

    def __len__(self) -> int:
        return len(self._by_hash)

    def __contains__(self, tx_hash: str) -> bool:
        return tx_hash.lower() in self._by_hash

    def get(self, tx_hash: str, chain: int | None = None) -> Transaction:
        tx = self._by_hash.get(tx_hash.lower())
        if tx is None or (chain is not None and tx.chain != chain):
            raise UnknownTx(tx_hash)
        return tx

    def transactions(self, chain: int | None = None) -> list[Transaction]:
        if chain is None:
            return [t for c in self.chains for t in self._chains[c]]
        if chain not in self._chains:
            raise UnknownChain(chain)
        return list(self._chains[chain])

    def index_items(self) -> Iterator[tuple[tuple[int, str], list[Transaction]]]:
        return iter(self._index.items())

    def save(self, directory: Path) -> None:
        chain_dir = directory / "chains"
        chain_dir.mkdir(parents=True, exist_ok=True)
        for chain in self.chains:
            with open(chain_dir / f"{chain}.jsonl", "w") as fh:
                for tx in self._chains[chain]:
                    fh.write(json.dumps(tx.to_json(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, directory: Path) -> "TxStore":
        txs = []
        chains = []
        for path in sorted((directory / "chains").glob("*.jsonl"), key=lambda p: int(p.stem)):
            chains.append(int(path.stem))
            with open(path) as fh:
                for line in fh:
                    if line.strip():
                        txs.append(Transaction.from_json(json.loads(line)))
        return cls(txs, chains)


def query_transactions(
    store: TxStore, chain: int, address: str, t_lo: int, t_hi: int
) -> list[Transaction]:
    """Transactions on ``chain`` touching ``address`` with t_lo <= timestamp <= t_hi."""
    if t_lo > t_hi:
        raise ValueError("t_lo > t_hi")
    if chain not in store._chains:
        raise UnknownChain(chain)
    key = (chain, address.lower())
    txs = store._index.get(key)
    if not txs:
        return []
    times = store._times[key]
    lo = bisect.bisect_left(times, t_lo)
    hi = bisect.bisect_right(times, t_hi)
    return txs[lo:hi]


def sorted_txs(txs: Sequence[Transaction]) -> list[Transaction]:
    return sorted(txs, key=lambda t: t.sort_key)


BOUNDARY = "|"


def declaration_tokens(decl: EventDecl) -> tuple[list[str], list[int | None]]:
    """Token sequence the parameter labeler reads, with the owning parameter of each token.

    Layout: event-name tokens, then per parameter ``| <type family> <name tokens>``.
    Only name tokens carry an owner index; name, boundary and type tokens map to None.
    """
    tokens = tokenize_identifier(decl.name)
    owners: list[int | None] = [None] * len(tokens)
    for i, p in enumerate(decl.params):
        tokens += [BOUNDARY, p.base_type]
        owners += [None, None]
        name_toks = tokenize_identifier(p.name) or [p.name.lower()]
        tokens += name_toks
        owners += [i] * len(name_toks)
    return tokens, owners
