import collections
import dataclasses
import hashlib

import pytest

from bridgetrace.bridgesim import (
    AttackTemplate,
    BridgeSpec,
    ConfigError,
    LabeledDataset,
    WorldConfig,
    default_bridges,
    default_config,
    generate,
    gold_tags,
    inject_attacks,
    load_config,
)
from bridgetrace.ledger import decode_event, declaration_tokens, parse_event_signature, tokenize_identifier


def small_config(**kw):
    base = dict(seed=11, chains=[1, 56, 137], bridges=default_bridges()[:3], n_pairs_per_bridge=30,
                noise_ratio=1.0, lexicon_declarations=20)
    base.update(kw)
    return WorldConfig(**base)


def bridge_event(ds, tx, which):
    pair_bridge = next(b for b in ds.bridges if tx.to_addr in b.contracts.values())
    decl = pair_bridge.spec.deposit_decl if which == "deposit" else pair_bridge.spec.withdrawal_decl
    log = next(lg for lg in tx.logs if lg.topics[0] == decl.topic0)
    return pair_bridge.spec, decode_event(log, decl).as_dict()


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_seed_determinism(tmp_path):
    generate(small_config()).save(tmp_path / "a")
    generate(small_config()).save(tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    generate(small_config(seed=12)).save(tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_minimal_world():
    cfg = WorldConfig(seed=1, chains=[1, 56], bridges=default_bridges()[:1], n_pairs_per_bridge=1,
                      noise_ratio=0, lexicon_declarations=0)
    ds = generate(cfg)
    assert len(ds.store) == 2 and len(ds.pairs) == 1
    p = ds.pairs[0]
    assert {p.src_tx, p.dst_tx} == {t.tx_hash for t in ds.store.transactions()}


def test_fee_arithmetic():
    spec = dataclasses.replace(default_bridges()[0], fee_rate=0.003)
    assert spec.withdrawal_amount(10**18) == 10**18 - 3 * 10**15
    assert spec.withdrawal_amount(999) == 997  # fee floor(2.997) = 2


def test_pair_invariants(default_dataset):
    ds = default_dataset
    assert len(ds.pairs) >= 2000 and len(ds.bridges) >= 6 and len(ds.store.chains) >= 3
    for p in ds.pairs:
        d, w = ds.store.get(p.src_tx, p.src_chain), ds.store.get(p.dst_tx, p.dst_chain)
        assert d.timestamp < w.timestamp
        spec, dv = bridge_event(ds, d, "deposit")
        _, wv = bridge_event(ds, w, "withdrawal")
        lo, hi = spec.latency
        assert lo <= w.timestamp - d.timestamp <= hi
        for cue in spec.cue_names:
            assert dv[cue] == wv[cue]
        dep_amt, wd_amt = dv[spec.vocab["amount"]], wv[spec.vocab["amount"]]
        if not p.is_attack:
            assert wd_amt == spec.withdrawal_amount(dep_amt)
            assert 0 <= (dep_amt - wd_amt) / dep_amt <= 0.03
            assert dv[spec.vocab["dst_chain"]] == p.dst_chain
            assert wv[spec.vocab["src_chain"]] == p.src_chain
            assert dv[spec.vocab["recipient"]] == wv[spec.vocab["recipient"]]
            assert dv[spec.vocab["sender"]] == d.from_addr


def test_noise_kinds_present(default_dataset):
    ds = default_dataset
    paired = {h for p in ds.pairs for h in (p.src_tx, p.dst_tx)}
    noise = [t for t in ds.store.transactions() if t.tx_hash not in paired]
    assert len(noise) >= 3 * len(paired)
    assert any(t.status == "failed" for t in noise)
    assert any(not t.logs and t.value > 0 for t in noise)
    assert any(len(t.logs) == 3 for t in noise)  # swaps


def test_split_proportions(default_dataset):
    ds = default_dataset
    by_count = collections.defaultdict(collections.Counter)
    for t in ds.store.transactions():
        by_count[len(t.logs)][ds.split_assignment[t.tx_hash]] += 1
    checked = 0
    for count, c in by_count.items():
        n = sum(c.values())
        if n < 100:
            continue
        checked += 1
        for split, share in (("train", 0.7), ("valid", 0.15), ("test", 0.15)):
            assert abs(c[split] / n - share) <= 0.02, (count, c)
    assert checked >= 3
    for p in ds.pairs:
        assert ds.split_assignment[p.src_tx] == ds.split_assignment[p.dst_tx]


def test_ner_annotations_consistent(default_dataset):
    ds = default_dataset
    for ann in ds.ner_annotations:
        decl = parse_event_signature(ann.signature)
        tokens, owners = declaration_tokens(decl)
        assert len(ann.tags) == len(tokens)
        if ann.bridge is None:
            continue
        spec = ds.bridge(ann.bridge).spec
        roles = spec.role_tags()
        for tag, owner in zip(ann.tags, owners):
            want = "O" if owner is None else roles.get(decl.params[owner].name, "O")
            assert tag == want
    alpha = ds.bridge("alpha").spec
    tags = gold_tags(alpha.deposit_decl, alpha.role_tags())
    tokens, _ = declaration_tokens(alpha.deposit_decl)
    tagged = {" ".join(tokens[i] for i, t in enumerate(tags) if t == tag) for tag in ("DST_CHAIN",)}
    assert tagged == {" ".join(tokenize_identifier("destinationChainId"))}


def test_attacks_violate_rules(default_dataset):
    ds = default_dataset
    kinds = collections.Counter(p.attack_kind for p in ds.pairs if p.is_attack)
    assert set(kinds) == {"zero_deposit", "unburned_wrap", "inflated_withdrawal"}
    for p in ds.pairs:
        if not p.is_attack:
            continue
        d, w = ds.store.get(p.src_tx), ds.store.get(p.dst_tx)
        spec, dv = bridge_event(ds, d, "deposit")
        _, wv = bridge_event(ds, w, "withdrawal")
        amt = spec.vocab["amount"]
        if p.attack_kind == "zero_deposit":
            assert dv[amt] == 0 and wv[amt] > 0
        elif p.attack_kind == "unburned_wrap":
            assert not d.internal_transfers and d.value == 0
            assert all(lg.topics[0] == spec.deposit_decl.topic0 for lg in d.logs)
        else:
            assert wv[amt] > dv[amt]


def test_inject_zero_counts_is_identity():
    ds = generate(small_config())
    same = inject_attacks(ds, [AttackTemplate("zero_deposit", 0)])
    assert same is ds


def test_inject_keeps_hashes():
    ds = generate(small_config())
    out = inject_attacks(ds, [AttackTemplate("inflated_withdrawal", 3)])
    assert sum(p.is_attack for p in out.pairs) == 3
    assert [(p.src_tx, p.dst_tx) for p in out.pairs] == [(p.src_tx, p.dst_tx) for p in ds.pairs]


def test_save_load_round_trip(tmp_path):
    ds = generate(small_config(attack_spec=[AttackTemplate("zero_deposit", 2)]))
    ds.save(tmp_path)
    back = LabeledDataset.load(tmp_path)
    assert back.pairs == ds.pairs
    assert back.split_assignment == ds.split_assignment
    assert back.ner_annotations == ds.ner_annotations
    assert [b.to_json() for b in back.bridges] == [b.to_json() for b in ds.bridges]


@pytest.mark.parametrize("change", [
    dict(chains=[1]),
    dict(chains=[1, 1]),
    dict(n_pairs_per_bridge=0),
    dict(noise_ratio=-1),
    dict(attack_spec=[AttackTemplate("bogus", 1)]),
    dict(attack_spec=[AttackTemplate("zero_deposit", -1)]),
    dict(seed=-1),
])
def test_config_errors(change):
    with pytest.raises(ConfigError):
        generate(small_config(**change))


def test_bridge_spec_errors():
    good = default_bridges()[0]
    for bad in (
        dataclasses.replace(good, fee_rate=0.05),
        dataclasses.replace(good, latency=(0, 10)),
        dataclasses.replace(good, vocab={**good.vocab, "nonce": ""}),
        dataclasses.replace(good, vocab={**good.vocab, "recipient": "nobody"}),
        dataclasses.replace(good, mechanism="teleport"),
    ):
        with pytest.raises(ConfigError):
            bad.validate()


def test_load_config_yaml(tmp_path):
    path = tmp_path / "world.yaml"
    path.write_text("seed: 5\nn_pairs_per_bridge: 4\nnoise_ratio: 0.5\n"
                    "attack_spec:\n  - {kind: zero_deposit, count: 1}\n")
    cfg = load_config(path)
    assert cfg.seed == 5 and len(cfg.bridges) == len(default_bridges())
    assert WorldConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        WorldConfig.from_dict({"sede": 1})


def test_default_config_meets_scale():
    cfg = default_config()
    cfg.validate()
    assert len(cfg.bridges) >= 6 and len(cfg.chains) >= 3
    assert cfg.n_pairs_per_bridge * len(cfg.bridges) >= 2000 and cfg.noise_ratio >= 3
    assert len({b.mechanism for b in cfg.bridges}) == 3
    assert len({tuple(sorted(b.vocab.items())) for b in cfg.bridges}) == len(cfg.bridges)
    assert all(isinstance(b, BridgeSpec) for b in cfg.bridges)
