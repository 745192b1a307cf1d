import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgetrace.bridgesim import default_bridges, sample_events
from bridgetrace.ledger import (
    TRANSFER,
    AbiRegistry,
    DecodeError,
    KVPair,
    ParseError,
    RawLog,
    SignatureMismatch,
    Transaction,
    TxStore,
    UnknownChain,
    UnknownTx,
    declaration_tokens,
    decode_event,
    encode_event,
    keccak256,
    participants,
    parse_event_signature,
    query_transactions,
    tokenize_identifier,
)

FIG3 = (
    "FundsDeposited (uint256 amount, uint256 originChainId, uint256 destinationChainId, "
    "uint64 relayerFeePct, index_topic_1 uint32 depositId, uint32 quoteTimestamp, "
    "index_topic_2 address originToken, address recipient, index_topic_3 address depositor)"
)


def test_keccak_of_transfer_signature():
    assert keccak256(b"Transfer(address,address,uint256)").hex().startswith("ddf252ad")
    assert TRANSFER.topic0 == "0x" + keccak256(b"Transfer(address,address,uint256)").hex()


def test_parse_explorer_declaration():
    decl = parse_event_signature(FIG3)
    assert decl.name == "FundsDeposited"
    params = {p.name: p for p in decl.params}
    assert (params["originChainId"].abi_type, params["originChainId"].indexed) == ("uint256", False)
    assert (params["depositor"].abi_type, params["depositor"].indexed) == ("address", True)
    assert sum(p.indexed for p in decl.params) == 3


def test_parse_empty_and_transfer():
    assert parse_event_signature("E ()").params == ()
    decl = parse_event_signature("Transfer (index_topic_1 address from, index_topic_2 address to, uint256 value)")
    assert [p.name for p in decl.params] == ["from", "to", "value"]
    assert [p.indexed for p in decl.params] == [True, True, False]
    assert decl.canonical == "Transfer(address,address,uint256)"


def test_parse_solidity_style_and_uint_alias():
    decl = parse_event_signature("Sent(address indexed sender, uint amount)")
    assert decl.params[0].indexed and decl.params[1].abi_type == "uint256"


@pytest.mark.parametrize("bad", [
    "Broken (uint256 a", "E (foo x)", "E (uint256 a, uint256 a)", "E ((uint256 a))", "(uint256 a)",
    "E (index_topic_1 address a, index_topic_2 address b, index_topic_3 address c, index_topic_4 address d)",
    "E (uint7 a)", "E (bytes33 a)", "E (uint256)",
])
def test_parse_errors(bad):
    with pytest.raises(ParseError):
        parse_event_signature(bad)


def test_to_text_round_trip():
    for b in default_bridges():
        for decl in (b.deposit_decl, b.withdrawal_decl):
            assert parse_event_signature(decl.to_text()) == decl


def test_decode_minimal_amount_word():
    decl = parse_event_signature(FIG3)
    values = {p.name: 0 for p in decl.params if p.base_type == "uint"}
    values.update({p.name: "0x" + "11" * 20 for p in decl.params if p.base_type == "address"})
    values["amount"] = 1
    log = encode_event(decl, values, "0x" + "22" * 20)
    assert log.data[:32] == b"\x00" * 31 + b"\x01"
    assert decode_event(log, decl).pairs[0] == KVPair("amount", "numeric", 1)


def test_decode_cue_keys_present():
    bravo = next(b for b in default_bridges() if "messenger" in b.implicit_cues)
    decl = bravo.withdrawal_decl
    values = {p.name: (1 if p.base_type == "uint" else "0x" + "ab" * 20) for p in decl.params}
    ev = decode_event(encode_event(decl, values, "0x" + "33" * 20), decl)
    assert {"recipient", "nonce", "messenger"} <= set(ev.as_dict())


def test_decode_errors():
    decl = parse_event_signature(FIG3)
    values = {p.name: (0 if p.base_type == "uint" else "0x" + "11" * 20) for p in decl.params}
    log = encode_event(decl, values, "0x" + "22" * 20)
    with pytest.raises(SignatureMismatch):
        decode_event(log, TRANSFER)
    with pytest.raises(DecodeError):
        decode_event(RawLog(log.emitter, log.topics[:-1], log.data), decl)
    with pytest.raises(DecodeError):
        decode_event(RawLog(log.emitter, log.topics, log.data[:-1]), decl)
    # uint32 slot with bits above its width
    depid = RawLog(log.emitter, (log.topics[0], "0x" + "ff" * 32) + log.topics[2:], log.data)
    with pytest.raises(DecodeError):
        decode_event(depid, decl)


def test_decode_round_trip_sampled():
    for decl, values, log in sample_events(500, seed=3):
        ev = decode_event(log, decl)
        assert ev.as_dict() == values


@pytest.mark.parametrize("name,toks", [
    ("destinationChainId", ["destination", "chain", "id"]),
    ("originChainId", ["origin", "chain", "id"]),
    ("relayerFeePct", ["relayer", "fee", "pct"]),
    ("fromChainID", ["from", "chain", "id"]),
    ("amount0In", ["amount", "0", "in"]),
    ("token_address", ["token", "address"]),
    ("amountSD", ["amount", "sd"]),
])
def test_tokenize_examples(name, toks):
    assert tokenize_identifier(name) == toks


@settings(max_examples=200, deadline=None)
@given(st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,20}", fullmatch=True))
def test_tokenize_idempotent(name):
    toks = tokenize_identifier(name)
    assert tokenize_identifier("_".join(toks)) == toks


def test_declaration_tokens_layout():
    decl = parse_event_signature("Sent (address sender, uint256 destinationChainId)")
    tokens, owners = declaration_tokens(decl)
    assert tokens == ["sent", "|", "address", "sender", "|", "uint", "destination", "chain", "id"]
    assert owners == [None, None, None, 0, None, None, 1, 1, 1]


def _addr(i):
    return "0x" + f"{i:040x}"


def _random_store(rng, n=300, chains=(1, 2)):
    addrs = [_addr(i + 1) for i in range(8)]
    txs = []
    for i in range(n):
        a, b = rng.choice(addrs, size=2, replace=False)
        logs = []
        if rng.random() < 0.4:
            c = addrs[int(rng.integers(0, 8))]
            logs.append(encode_event(TRANSFER, {"from": b, "to": c, "value": int(rng.integers(0, 99))}, _addr(99)))
        txs.append(Transaction(
            chain=int(rng.choice(chains)), tx_hash="0x" + rng.bytes(32).hex(),
            block_number=int(rng.integers(0, 50)), timestamp=int(rng.integers(0, 500)),
            from_addr=a, to_addr=b, value=int(rng.integers(0, 5)), logs=logs,
            status="failed" if rng.random() < 0.1 else "success"))
    return TxStore(txs, chains), addrs


def test_query_matches_brute_force():
    rng = np.random.default_rng(0)
    store, addrs = _random_store(rng)
    for _ in range(200):
        chain = int(rng.choice([1, 2]))
        addr = addrs[int(rng.integers(0, 8))]
        lo = int(rng.integers(0, 500))
        hi = lo + int(rng.integers(0, 200))
        got = query_transactions(store, chain, addr, lo, hi)
        want = sorted(
            (t for t in store.transactions(chain) if addr in participants(t) and lo <= t.timestamp <= hi),
            key=lambda t: (t.timestamp, t.block_number, t.tx_hash))
        assert got == want
    full = query_transactions(store, 1, addrs[0], 0, 10**9)
    assert [t.sort_key for t in full] == sorted(t.sort_key for t in full)


def test_query_edges():
    rng = np.random.default_rng(1)
    store, addrs = _random_store(rng)
    used = {t.timestamp for t in store.transactions(1)}
    empty_t = next(t for t in range(1000) if t not in used)
    assert query_transactions(store, 1, addrs[0], empty_t, empty_t) == []
    with pytest.raises(UnknownChain):
        query_transactions(store, 77, addrs[0], 0, 1)
    with pytest.raises(ValueError):
        query_transactions(store, 1, addrs[0], 5, 4)


def test_store_index_consistency_and_io(tmp_path):
    rng = np.random.default_rng(2)
    store, _ = _random_store(rng)
    for (_, _), txs in store.index_items():
        for t in txs:
            assert store.get(t.tx_hash) is t
    with pytest.raises(UnknownTx):
        store.get("0x" + "00" * 32)
    store.save(tmp_path)
    again = TxStore.load(tmp_path)
    assert again.chains == store.chains
    assert [t.to_json() for t in again.transactions()] == [t.to_json() for t in store.transactions()]


def test_registry_decode_all_and_io(tmp_path):
    reg = AbiRegistry()
    decl = parse_event_signature(FIG3)
    emitter = _addr(5)
    reg.add(emitter, decl)
    values = {p.name: (3 if p.base_type == "uint" else _addr(9)) for p in decl.params}
    tx = Transaction(1, "0x" + "aa" * 32, 1, 1, _addr(1), emitter,
                     logs=[encode_event(decl, values, emitter), RawLog(emitter, (), b"")])
    got = reg.decode_all(tx)
    assert len(got) == 1 and got[0][2].as_dict() == values
    reg.save(tmp_path)
    assert AbiRegistry.load(tmp_path).declarations(emitter) == [decl]
