"""Deterministic multi-chain bridge world generator with ground-truth pairs.

All randomness comes from one ``numpy.random.PCG64`` stream family seeded by
``WorldConfig.seed`` (child streams via ``SeedSequence``), so a seed fixes the
dataset bit for bit.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ledger import (
    NATIVE,
    TRANSFER,
    ZERO_ADDRESS,
    AbiRegistry,
    EventDecl,
    InternalTransfer,
    RawLog,
    Transaction,
    TxStore,
    declaration_tokens,
    decode_event,
    encode_event,
    hex0x,
    parse_event_signature,
)

MECHANISMS = ("lock_mint", "burn_unlock", "liquidity_pool")
ROLES = ("src_chain", "dst_chain", "sender", "recipient", "amount", "nonce")
TAGS = ("O", "SRC_CHAIN", "DST_CHAIN", "SRC_ADDR", "DST_ADDR", "AMOUNT")
ROLE_TAG = {
    "src_chain": "SRC_CHAIN",
    "dst_chain": "DST_CHAIN",
    "sender": "SRC_ADDR",
    "recipient": "DST_ADDR",
    "amount": "AMOUNT",
}
ATTACK_KINDS = ("zero_deposit", "unburned_wrap", "inflated_withdrawal")
SPLITS = ("train", "valid", "test")
MAX_FEE_RATE = 0.03
T0 = 1_700_000_000
BLOCK_TIME = {1: 12, 56: 3, 137: 2, 10: 2, 42161: 1}


class ConfigError(ValueError):
    pass


@dataclass
class BridgeSpec:
    name: str
    mechanism: str
    vocab: dict[str, str]
    deposit_signature: str
    withdrawal_signature: str
    fee_rate: float = 0.003
    latency: tuple[int, int] = (30, 1800)
    implicit_cues: list[str] = field(default_factory=list)
    native: bool = False

    @property
    def deposit_decl(self) -> EventDecl:
        return parse_event_signature(self.deposit_signature)

    @property
    def withdrawal_decl(self) -> EventDecl:
        return parse_event_signature(self.withdrawal_signature)

    @property
    def cue_names(self) -> list[str]:
        """Fields whose values are replicated verbatim from deposit to withdrawal."""
        return [self.vocab["nonce"]] + [c for c in self.implicit_cues if c != self.vocab["nonce"]]

    @property
    def fee_ppm(self) -> int:
        return round(self.fee_rate * 1_000_000)

    def withdrawal_amount(self, deposit: int) -> int:
        return deposit - deposit * self.fee_ppm // 1_000_000

    def role_tags(self) -> dict[str, str]:
        return {self.vocab[r]: t for r, t in ROLE_TAG.items()}

    def validate(self) -> None:
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"{self.name}: unknown mechanism {self.mechanism!r}")
        missing = [r for r in ROLES if not self.vocab.get(r)]
        if missing:
            raise ConfigError(f"{self.name}: vocab lacks roles {missing}")
        if not 0.0 <= self.fee_rate <= MAX_FEE_RATE:
            raise ConfigError(f"{self.name}: fee_rate {self.fee_rate} outside [0, {MAX_FEE_RATE}]")
        lo, hi = self.latency
        if lo < 1 or hi < lo:
            raise ConfigError(f"{self.name}: bad latency range {self.latency}")
        try:
            dep, wd = self.deposit_decl, self.withdrawal_decl
        except Exception as exc:
            raise ConfigError(f"{self.name}: {exc}") from exc
        need = {
            "deposit": (dep, ("dst_chain", "sender", "recipient", "amount", "nonce")),
            "withdrawal": (wd, ("src_chain", "sender", "recipient", "amount", "nonce")),
        }
        kinds = {"src_chain": "uint", "dst_chain": "uint", "amount": "uint", "nonce": "uint",
                 "sender": "address", "recipient": "address"}
        for label, (decl, roles) in need.items():
            types = {p.name: p.base_type for p in decl.params}
            for role in roles:
                name = self.vocab[role]
                if types.get(name) != kinds[role]:
                    raise ConfigError(f"{self.name}: {label} event needs {kinds[role]} {name!r}")
        dep_types = {p.name: p.abi_type for p in dep.params}
        wd_types = {p.name: p.abi_type for p in wd.params}
        for cue in self.cue_names:
            if cue not in dep_types or dep_types[cue] != wd_types.get(cue):
                raise ConfigError(f"{self.name}: cue {cue!r} must appear with one type in both events")
        if dep.topic0 == wd.topic0:
            raise ConfigError(f"{self.name}: deposit and withdrawal events collide")


@dataclass
class AttackTemplate:
    kind: str
    count: int = 0

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.count < 0:
            raise ConfigError("attack count must be >= 0")


@dataclass
class WorldConfig:
    seed: int = 7
    chains: list[int] = field(default_factory=lambda: [1, 56, 137])
    bridges: list[BridgeSpec] = field(default_factory=list)
    n_pairs_per_bridge: int = 260
    noise_ratio: float = 3.0
    attack_spec: list[AttackTemplate] = field(default_factory=list)
    burst_rate: float = 0.25
    followup_share: float = 0.5
    span_days: float = 30.0
    lexicon_declarations: int = 500

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if len(self.chains) < 2 or len(set(self.chains)) != len(self.chains) or min(self.chains) <= 0:
            raise ConfigError("need at least two distinct positive chain ids")
        if self.n_pairs_per_bridge < 1:
            raise ConfigError("n_pairs_per_bridge must be >= 1")
        if self.noise_ratio < 0:
            raise ConfigError("noise_ratio must be >= 0")
        if not self.bridges:
            raise ConfigError("no bridges configured")
        names = [b.name for b in self.bridges]
        if len(set(names)) != len(names):
            raise ConfigError("bridge names must be unique")
        for b in self.bridges:
            b.validate()
        for a in self.attack_spec:
            a.validate()
        if sum(a.count for a in self.attack_spec) > self.n_pairs_per_bridge * len(self.bridges):
            raise ConfigError("more attacks requested than pairs available")
        if not 0 <= self.burst_rate <= 1 or not 0 <= self.followup_share <= 1:
            raise ConfigError("burst_rate and followup_share must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for b in d["bridges"]:
            b["latency"] = list(b["latency"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        bridges = []
        try:
            for b in d.pop("bridges", []):
                b = dict(b)
                if "latency" in b:
                    b["latency"] = tuple(b["latency"])
                bridges.append(BridgeSpec(**b))
            attacks = [AttackTemplate(**a) for a in d.pop("attack_spec", [])]
        except TypeError as exc:
            raise ConfigError(f"bad bridge or attack entry: {exc}") from exc
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg = cls(bridges=bridges or default_bridges(), attack_spec=attacks, **d)
        return cfg


def load_config(path: Path) -> WorldConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return WorldConfig.from_dict(data)


# ---------------------------------------------------------------------------
# default bridges
# ---------------------------------------------------------------------------


def default_bridges() -> list[BridgeSpec]:
    """Eight bridges, three mechanism families, eight naming vocabularies.

    Latency ranges include the 40/55/140 minute calibration anchors.
    """
    return [
        BridgeSpec(
            name="alpha",
            mechanism="liquidity_pool",
            vocab=dict(src_chain="originChainId", dst_chain="destinationChainId", sender="depositor",
                       recipient="recipient", amount="amount", nonce="depositId"),
            deposit_signature=(
                "FundsDeposited (uint256 amount, uint256 originChainId, uint256 destinationChainId, "
                "uint64 relayerFeePct, index_topic_1 uint32 depositId, uint32 quoteTimestamp, "
                "index_topic_2 address originToken, address recipient, index_topic_3 address depositor)"
            ),
            withdrawal_signature=(
                "FilledRelay (uint256 amount, uint256 totalFilledAmount, uint256 originChainId, "
                "uint256 destinationChainId, uint64 relayerFeePct, index_topic_1 uint32 depositId, "
                "index_topic_2 address relayer, address depositor, address recipient)"
            ),
            fee_rate=0.0025,
            latency=(30, 1800),
        ),
        BridgeSpec(
            name="bravo",
            mechanism="lock_mint",
            vocab=dict(src_chain="sourceChainId", dst_chain="destinationChainId", sender="sender",
                       recipient="recipient", amount="amount", nonce="nonce"),
            deposit_signature=(
                "TokensSent (index_topic_1 address sender, address recipient, uint256 amount, "
                "uint256 sourceChainId, uint256 destinationChainId, uint256 nonce, address messenger)"
            ),
            withdrawal_signature=(
                "TokensReceived (index_topic_1 address recipient, uint256 amount, uint256 sourceChainId, "
                "address sender, uint256 nonce, address messenger)"
            ),
            implicit_cues=["messenger"],
            fee_rate=0.003,
            latency=(30, 2400),
        ),
        BridgeSpec(
            name="charlie",
            mechanism="burn_unlock",
            vocab=dict(src_chain="fromChainID", dst_chain="toChainID", sender="account",
                       recipient="receiver", amount="amount", nonce="swapNonce"),
            deposit_signature=(
                "LogAnySwapOut (index_topic_1 address token, index_topic_2 address account, "
                "address receiver, uint256 amount, uint256 fromChainID, uint256 toChainID, uint256 swapNonce)"
            ),
            withdrawal_signature=(
                "LogAnySwapIn (index_topic_1 uint256 swapNonce, index_topic_2 address token, "
                "address account, address receiver, uint256 amount, uint256 fromChainID, uint256 toChainID)"
            ),
            fee_rate=0.001,
            latency=(60, 3300),
        ),
        BridgeSpec(
            name="delta",
            mechanism="lock_mint",
            vocab=dict(src_chain="fromChainId", dst_chain="toChainId", sender="fromAddress",
                       recipient="toAddress", amount="amount", nonce="crossChainId"),
            deposit_signature=(
                "LockEvent (address fromAssetHash, address fromAddress, uint64 toChainId, "
                "address toAddress, uint256 amount, uint64 fromChainId, uint256 crossChainId)"
            ),
            withdrawal_signature=(
                "UnlockEvent (address toAssetHash, address toAddress, uint256 amount, "
                "uint64 fromChainId, address fromAddress, uint256 crossChainId)"
            ),
            fee_rate=0.0,
            latency=(120, 8400),
        ),
        BridgeSpec(
            name="echo",
            mechanism="liquidity_pool",
            vocab=dict(src_chain="srcChainId", dst_chain="dstChainId", sender="srcAddress",
                       recipient="dstAddress", amount="amountSD", nonce="srcPoolNonce"),
            deposit_signature=(
                "SwapSent (uint16 dstChainId, uint16 srcChainId, index_topic_1 address srcAddress, "
                "address dstAddress, uint256 amountSD, uint256 srcPoolNonce, uint256 eqFee)"
            ),
            withdrawal_signature=(
                "SwapRemote (address dstAddress, uint256 amountSD, uint16 srcChainId, "
                "address srcAddress, uint256 srcPoolNonce, uint256 protocolFee)"
            ),
            fee_rate=0.0006,
            latency=(30, 1800),
            native=True,
        ),
        BridgeSpec(
            name="foxtrot",
            mechanism="burn_unlock",
            vocab=dict(src_chain="sourceChain", dst_chain="targetChain", sender="originSender",
                       recipient="targetAddress", amount="tokenAmount", nonce="sequence"),
            deposit_signature=(
                "TransferInitiated (index_topic_1 address originSender, uint16 targetChain, "
                "address targetAddress, uint256 tokenAmount, uint64 sequence, uint16 sourceChain, "
                "bytes32 vaaHash, uint256 arbiterFee)"
            ),
            withdrawal_signature=(
                "TransferRedeemed (index_topic_1 uint16 sourceChain, address originSender, "
                "address targetAddress, uint256 tokenAmount, uint64 sequence, bytes32 vaaHash)"
            ),
            implicit_cues=["vaaHash"],
            fee_rate=0.0,
            latency=(60, 1800),
        ),
        BridgeSpec(
            name="golf",
            mechanism="lock_mint",
            vocab=dict(src_chain="originDomain", dst_chain="destinationDomain", sender="caller",
                       recipient="beneficiary", amount="bridgedAmt", nonce="nonce"),
            deposit_signature=(
                "XCalled (index_topic_1 bytes32 transferId, uint256 nonce, uint32 originDomain, "
                "uint32 destinationDomain, address caller, address beneficiary, uint256 bridgedAmt, "
                "address delegate)"
            ),
            withdrawal_signature=(
                "Executed (index_topic_1 bytes32 transferId, uint256 nonce, uint32 originDomain, "
                "address caller, address beneficiary, uint256 bridgedAmt, uint256 routerFee)"
            ),
            implicit_cues=["transferId"],
            fee_rate=0.0005,
            latency=(120, 3000),
        ),
        BridgeSpec(
            name="hotel",
            mechanism="liquidity_pool",
            vocab=dict(src_chain="sendingChainId", dst_chain="receivingChainId", sender="user",
                       recipient="receivingAddress", amount="quantity", nonce="requestNonce"),
            deposit_signature=(
                "TokenDeposit (index_topic_1 address user, address receivingAddress, "
                "uint256 receivingChainId, address token, uint256 quantity, uint256 requestNonce, "
                "string memo)"
            ),
            withdrawal_signature=(
                "TokenWithdraw (index_topic_1 address receivingAddress, address token, uint256 quantity, "
                "uint256 fee, uint256 sendingChainId, address user, uint256 requestNonce, string memo)"
            ),
            implicit_cues=["memo"],
            fee_rate=0.002,
            latency=(30, 1500),
        ),
    ]


def default_config(seed: int = 7) -> WorldConfig:
    return WorldConfig(
        seed=seed,
        chains=[1, 56, 137],
        bridges=default_bridges(),
        n_pairs_per_bridge=260,
        noise_ratio=3.0,
        attack_spec=[AttackTemplate("zero_deposit", 8), AttackTemplate("unburned_wrap", 6),
                     AttackTemplate("inflated_withdrawal", 6)],
    )


# ---------------------------------------------------------------------------
# naming lexicon for the labeler corpus
# ---------------------------------------------------------------------------

LEXICON = {
    "src_chain": ["originChainId", "sourceChainId", "srcChainId", "fromChainId", "fromChainID",
                  "sourceChain", "originDomain", "sendingChainId", "srcChain", "originChain",
                  "fromChain", "srcDomain", "sourceDomain", "chainIdFrom", "srcChainID"],
    "dst_chain": ["destinationChainId", "destChainId", "dstChainId", "toChainId", "toChainID",
                  "targetChain", "destinationDomain", "receivingChainId", "dstChain", "destinationChain",
                  "toChain", "targetChainId", "dstDomain", "destChain", "chainIdTo", "remoteChainId"],
    "sender": ["depositor", "sender", "originSender", "fromAddress", "srcAddress", "account", "caller",
               "user", "sourceAddress", "payer", "srcSender", "fromAccount", "initiator", "owner"],
    "recipient": ["recipient", "receiver", "toAddress", "dstAddress", "targetAddress", "beneficiary",
                  "destinationAddress", "receivingAddress", "receipt", "destAddress", "toAccount",
                  "dstRecipient", "payee"],
    "amount": ["amount", "quantity", "tokenAmount", "amountSD", "bridgedAmt", "sendAmount", "inputAmount",
               "amt", "transferAmount", "outputAmount", "amountLD"],
}
DISTRACTORS = [
    ("relayerFeePct", "uint64"), ("quoteTimestamp", "uint32"), ("originToken", "address"),
    ("token", "address"), ("fromAssetHash", "address"), ("toAssetHash", "address"), ("eqFee", "uint256"),
    ("protocolFee", "uint256"), ("arbiterFee", "uint256"), ("routerFee", "uint256"), ("fee", "uint256"),
    ("totalFilledAmount", "uint256"), ("relayer", "address"), ("delegate", "address"),
    ("vaaHash", "bytes32"), ("transferId", "bytes32"), ("memo", "string"), ("deadline", "uint256"),
    ("gasLimit", "uint256"), ("refundAddress", "address"), ("messenger", "address"), ("nonce", "uint256"),
    ("depositId", "uint32"), ("swapNonce", "uint256"), ("crossChainId", "uint256"),
    ("srcPoolNonce", "uint256"), ("sequence", "uint64"), ("requestNonce", "uint256"),
    ("messageId", "bytes32"), ("tokenAddress", "address"), ("slippage", "uint32"), ("poolId", "uint256"),
    ("feeAmount", "uint256"), ("chainFee", "uint256"), ("router", "address"), ("isNative", "bool"),
    ("kappa", "bytes32"), ("consistencyLevel", "uint8"), ("toAssetAmount", "uint256"),
]
EVENT_NAMES = [
    "FundsDeposited", "FilledRelay", "TokensSent", "TokensReceived", "LogAnySwapOut", "LogAnySwapIn",
    "LockEvent", "UnlockEvent", "SwapSent", "SwapRemote", "TransferInitiated", "TransferRedeemed",
    "XCalled", "Executed", "TokenDeposit", "TokenWithdraw", "Send", "Relay", "Deposit", "Withdraw",
    "BridgeOut", "BridgeIn", "CrossChainTransfer", "MessageSent", "MessageReceived", "Locked", "Unlocked",
    "Minted", "Burned", "TokenRedeem", "TokenMint", "Claimed", "OrderCreated", "OrderFilled",
]
CHAIN_TYPES = ["uint256", "uint64", "uint32", "uint16"]

NOISE_DECLS = {
    "Transfer": TRANSFER,
    "Approval": parse_event_signature(
        "Approval (index_topic_1 address owner, index_topic_2 address spender, uint256 value)"),
    "Swap": parse_event_signature(
        "Swap (index_topic_1 address sender, uint256 amount0In, uint256 amount1In, uint256 amount0Out, "
        "uint256 amount1Out, index_topic_2 address to)"),
    "WrapDeposit": parse_event_signature("Deposit (index_topic_1 address dst, uint256 wad)"),
    "WrapWithdrawal": parse_event_signature("Withdrawal (index_topic_1 address src, uint256 wad)"),
}


# ---------------------------------------------------------------------------
# dataset containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledPair:
    src_chain: int
    src_tx: str
    dst_chain: int
    dst_tx: str
    bridge: str
    is_attack: bool = False
    attack_kind: str | None = None

    def to_json(self) -> dict:
        return {"src_chain": self.src_chain, "src_tx": self.src_tx, "dst_chain": self.dst_chain,
                "dst_tx": self.dst_tx, "bridge": self.bridge, "is_attack": self.is_attack,
                "attack_kind": self.attack_kind}

    @classmethod
    def from_json(cls, d: dict) -> "LabeledPair":
        return cls(int(d["src_chain"]), d["src_tx"].lower(), int(d["dst_chain"]), d["dst_tx"].lower(),
                   d["bridge"], bool(d.get("is_attack", False)), d.get("attack_kind"))


@dataclass(frozen=True)
class NerAnnotation:
    signature: str
    tags: tuple[str, ...]
    bridge: str | None = None
    split: str = "train"

    def to_json(self) -> dict:
        return {"signature": self.signature, "tags": list(self.tags), "bridge": self.bridge,
                "split": self.split}

    @classmethod
    def from_json(cls, d: dict) -> "NerAnnotation":
        return cls(d["signature"], tuple(d["tags"]), d.get("bridge"), d.get("split", "train"))


@dataclass
class BridgeDeployment:
    spec: BridgeSpec
    contracts: dict[int, str]
    relayers: dict[int, str]
    wrapped: dict[int, str]

    def to_json(self) -> dict:
        return {
            "spec": {**dataclasses.asdict(self.spec), "latency": list(self.spec.latency)},
            "contracts": {str(k): v for k, v in sorted(self.contracts.items())},
            "relayers": {str(k): v for k, v in sorted(self.relayers.items())},
            "wrapped": {str(k): v for k, v in sorted(self.wrapped.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "BridgeDeployment":
        spec = dict(d["spec"])
        spec["latency"] = tuple(spec["latency"])
        conv = lambda m: {int(k): v for k, v in m.items()}  # noqa: E731
        return cls(BridgeSpec(**spec), conv(d["contracts"]), conv(d["relayers"]), conv(d["wrapped"]))


@dataclass
class LabeledDataset:
    store: TxStore
    pairs: list[LabeledPair]
    ner_annotations: list[NerAnnotation]
    split_assignment: dict[str, str]
    abis: AbiRegistry
    bridges: list[BridgeDeployment]
    seed: int = 0

    def bridge(self, name: str) -> BridgeDeployment:
        for b in self.bridges:
            if b.spec.name == name:
                return b
        raise KeyError(name)

    def bridge_of_emitter(self, chain: int, emitter: str) -> str | None:
        for b in self.bridges:
            if b.contracts.get(chain) == emitter:
                return b.spec.name
        return None

    def pairs_in(self, split: str, bridges=None) -> list[LabeledPair]:
        return [p for p in self.pairs if self.split_assignment.get(p.src_tx) == split
                and (bridges is None or p.bridge in bridges)]

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        self.store.save(directory)
        self.abis.save(directory / "abis")
        labels = directory / "labels"
        labels.mkdir(parents=True, exist_ok=True)
        with open(labels / "pairs.jsonl", "w") as fh:
            for p in self.pairs:
                fh.write(json.dumps(p.to_json(), separators=(",", ":")) + "\n")
        with open(labels / "splits.jsonl", "w") as fh:
            for h in sorted(self.split_assignment):
                fh.write(json.dumps({"tx_hash": h, "split": self.split_assignment[h]},
                                    separators=(",", ":")) + "\n")
        (labels / "bridges.json").write_text(
            json.dumps({"seed": self.seed, "bridges": [b.to_json() for b in self.bridges]}, indent=1) + "\n")
        ner = directory / "ner"
        ner.mkdir(parents=True, exist_ok=True)
        with open(ner / "annotations.jsonl", "w") as fh:
            for a in self.ner_annotations:
                fh.write(json.dumps(a.to_json(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, directory: Path) -> "LabeledDataset":
        directory = Path(directory)
        store = TxStore.load(directory)
        abis = AbiRegistry.load(directory / "abis")
        labels = directory / "labels"

        def jsonl(path):
            if not path.exists():
                return []
            return [json.loads(x) for x in path.read_text().splitlines() if x.strip()]

        pairs = [LabeledPair.from_json(d) for d in jsonl(labels / "pairs.jsonl")]
        splits = {d["tx_hash"].lower(): d["split"] for d in jsonl(labels / "splits.jsonl")}
        meta = json.loads((labels / "bridges.json").read_text()) if (labels / "bridges.json").exists() else {}
        bridges = [BridgeDeployment.from_json(b) for b in meta.get("bridges", [])]
        ner = [NerAnnotation.from_json(d) for d in jsonl(directory / "ner" / "annotations.jsonl")]
        return cls(store, pairs, ner, splits, abis, bridges, int(meta.get("seed", 0)))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def gold_tags(decl: EventDecl, role_by_name: dict[str, str]) -> list[str]:
    tokens, owners = declaration_tokens(decl)
    return ["O" if o is None else role_by_name.get(decl.params[o].name, "O") for o in owners]


class _World:
    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        streams = ss.spawn(6)
        self.rng_deploy, self.rng_pairs, self.rng_noise, self.rng_split, self.rng_ner, self.rng_vals = (
            np.random.Generator(np.random.PCG64(s)) for s in streams
        )
        self.txs: list[Transaction] = []
        self.pairs: list[LabeledPair] = []
        self.recipient_of: dict[str, str] = {}
        self.abis = AbiRegistry()
        self.span = int(cfg.span_days * 86400)

    # -- primitives --------------------------------------------------------

    def address(self, rng=None) -> str:
        return hex0x((rng or self.rng_deploy).bytes(20))

    def tx_hash(self, rng) -> str:
        return hex0x(rng.bytes(32))

    def block(self, chain: int, ts: int) -> int:
        return 1_000_000 + chain * 7 + (ts - T0) // BLOCK_TIME.get(chain, 5)

    def make_tx(self, rng, chain, ts, sender, to, value=0, logs=(), internal=(), status="success"):
        tx = Transaction(
            chain=chain, tx_hash=self.tx_hash(rng), block_number=self.block(chain, ts), timestamp=int(ts),
            from_addr=sender, to_addr=to, value=int(value), input_data=rng.bytes(4) if to else b"",
            status=status, logs=list(logs), internal_transfers=list(internal),
        )
        self.txs.append(tx)
        return tx

    def transfer_log(self, token, src, dst, amount) -> RawLog:
        return encode_event(TRANSFER, {"from": src, "to": dst, "value": amount}, token)

    # -- deployment ----------------------------------------------------------

    def deploy(self):
        rng = self.rng_deploy
        chains = self.cfg.chains
        self.tokens = {c: [self.address() for _ in range(3)] for c in chains}
        self.pools = {c: [self.address() for _ in range(2)] for c in chains}
        self.weth = {c: self.address() for c in chains}
        self.deployments: list[BridgeDeployment] = []
        for spec in self.cfg.bridges:
            dep = BridgeDeployment(
                spec=spec,
                contracts={c: self.address() for c in chains},
                relayers={c: self.address() for c in chains},
                wrapped={c: self.address() for c in chains},
            )
            self.deployments.append(dep)
            for c in chains:
                self.abis.add(dep.contracts[c], spec.deposit_decl)
                self.abis.add(dep.contracts[c], spec.withdrawal_decl)
        for c in chains:
            for tok in self.tokens[c] + [dep.wrapped[c] for dep in self.deployments]:
                self.abis.add(tok, TRANSFER)
                self.abis.add(tok, NOISE_DECLS["Approval"])
            for pool in self.pools[c]:
                self.abis.add(pool, NOISE_DECLS["Swap"])
            self.abis.add(self.weth[c], NOISE_DECLS["WrapDeposit"])
            self.abis.add(self.weth[c], NOISE_DECLS["WrapWithdrawal"])
        total = self.cfg.n_pairs_per_bridge * len(self.cfg.bridges)
        self.users = [self.address() for _ in range(max(20, total // 2))]
        self.messengers = {d.spec.name: [self.address() for _ in range(3)] for d in self.deployments}
        self.nonce = {d.spec.name: int(rng.integers(1_000, 200_000)) for d in self.deployments}

    # -- bridge transfers --------------------------------------------------------

    def fill_value(self, p, rng, ctx):
        name = p.name.lower()
        base = p.base_type
        if base == "uint":
            bits = int(p.abi_type[4:])
            if "timestamp" in name or "deadline" in name:
                v = ctx["ts"] + (3600 if "deadline" in name else -int(rng.integers(0, 120)))
            elif "fee" in name or "pct" in name:
                v = int(rng.integers(0, 10**6))
            elif "amount" in name:
                v = ctx["amount"]
            else:
                v = int(rng.integers(0, 2**31))
            return v & ((1 << bits) - 1)
        if base == "address":
            if "token" in name or "asset" in name:
                return ctx["token"]
            if "relayer" in name:
                return ctx["relayer"]
            return self.address(rng)
        if base == "string":
            return "ref" + str(int(rng.integers(10_000, 99_999_999)))
        if base == "bool":
            return bool(rng.integers(0, 2))
        n = 32 if p.abi_type == "bytes" else int(p.abi_type[5:])
        return rng.bytes(n)

    def cue_value(self, spec, p, rng):
        if p.name == spec.vocab["nonce"]:
            self.nonce[spec.name] += 1
            return self.nonce[spec.name] & ((1 << int(p.abi_type[4:])) - 1)
        if p.base_type == "address":
            return self.messengers[spec.name][int(rng.integers(0, 3))]
        return self.fill_value(p, rng, {"ts": 0, "amount": 0, "token": ZERO_ADDRESS, "relayer": ZERO_ADDRESS})

    def bridge_pair(self, dep: BridgeDeployment, src, dst, sender, recipient, t_dep, amount, rng):
        spec = dep.spec
        vd, vw = spec.vocab, spec.vocab
        latency = int(rng.integers(spec.latency[0], spec.latency[1] + 1))
        t_wd = t_dep + latency
        wd_amount = spec.withdrawal_amount(amount)
        tok_idx = int(rng.integers(0, 3))
        bridge_src, bridge_dst = dep.contracts[src], dep.contracts[dst]
        if spec.mechanism == "burn_unlock":
            src_token, dst_token = dep.wrapped[src], self.tokens[dst][tok_idx]
        elif spec.mechanism == "lock_mint":
            src_token, dst_token = self.tokens[src][tok_idx], dep.wrapped[dst]
        else:
            src_token, dst_token = self.tokens[src][tok_idx], self.tokens[dst][tok_idx]

        cues = {}
        for p in spec.deposit_decl.params:
            if p.name in spec.cue_names:
                cues[p.name] = self.cue_value(spec, p, rng)
        role_vals_dep = {vd["dst_chain"]: dst, vd["src_chain"]: src, vd["sender"]: sender,
                         vd["recipient"]: recipient, vd["amount"]: amount}
        role_vals_wd = {vw["dst_chain"]: dst, vw["src_chain"]: src, vw["sender"]: sender,
                        vw["recipient"]: recipient, vw["amount"]: wd_amount}
        ctx_d = {"ts": t_dep, "amount": amount, "token": src_token, "relayer": dep.relayers[dst]}
        ctx_w = {"ts": t_wd, "amount": wd_amount, "token": dst_token, "relayer": dep.relayers[dst]}

        def values(decl, roles, ctx):
            out = {}
            for p in decl.params:
                if p.name in cues:
                    out[p.name] = cues[p.name]
                elif p.name in roles:
                    out[p.name] = roles[p.name]
                else:
                    out[p.name] = self.fill_value(p, rng, ctx)
            return out

        dep_event = encode_event(spec.deposit_decl, values(spec.deposit_decl, role_vals_dep, ctx_d), bridge_src)
        wd_event = encode_event(spec.withdrawal_decl, values(spec.withdrawal_decl, role_vals_wd, ctx_w), bridge_dst)

        if spec.native:
            dep_tx = self.make_tx(rng, src, t_dep, sender, bridge_src, value=amount, logs=[dep_event])
            wd_tx = self.make_tx(rng, dst, t_wd, dep.relayers[dst], bridge_dst, logs=[wd_event],
                                 internal=[InternalTransfer(bridge_dst, recipient, NATIVE, wd_amount)])
        else:
            sink = ZERO_ADDRESS if spec.mechanism == "burn_unlock" else bridge_src
            dep_tx = self.make_tx(rng, src, t_dep, sender, bridge_src,
                                  logs=[self.transfer_log(src_token, sender, sink, amount), dep_event])
            source = ZERO_ADDRESS if spec.mechanism == "lock_mint" else bridge_dst
            wd_tx = self.make_tx(rng, dst, t_wd, dep.relayers[dst], bridge_dst,
                                 logs=[wd_event, self.transfer_log(dst_token, source, recipient, wd_amount)])
        self.pairs.append(LabeledPair(src, dep_tx.tx_hash, dst, wd_tx.tx_hash, spec.name))
        self.recipient_of[wd_tx.tx_hash] = recipient

    def make_pairs(self):
        rng = self.rng_pairs
        chains = self.cfg.chains
        max_lat = max(d.spec.latency[1] for d in self.deployments)
        for dep in self.deployments:
            quota = self.cfg.n_pairs_per_bridge
            while quota > 0:
                k = 1
                if quota >= 2 and rng.random() < self.cfg.burst_rate:
                    k = int(min(quota, rng.integers(2, 4)))
                quota -= k
                src, dst = (int(c) for c in rng.choice(chains, size=2, replace=False))
                sender = self.users[int(rng.integers(0, len(self.users)))]
                recipient = sender if rng.random() < 0.7 else self.users[int(rng.integers(0, len(self.users)))]
                t = T0 + 3600 + int(rng.integers(0, max(1, self.span - 2 * max_lat - 7200)))
                for _ in range(k):
                    amount = int(10 ** (15 + 6 * rng.random()))
                    self.bridge_pair(dep, src, dst, sender, recipient, t, amount, rng)
                    t += int(rng.integers(20, 300))

    # -- background activity ---------------------------------------------------------

    def noise_tx(self, rng, chain, ts, user):
        kind = rng.choice(["native", "erc20", "swap", "approval", "wrap", "failed"],
                          p=[0.2, 0.25, 0.25, 0.15, 0.05, 0.10])
        other = self.users[int(rng.integers(0, len(self.users)))] if rng.random() < 0.6 else self.address(rng)
        amount = int(10 ** (14 + 7 * rng.random()))
        token = self.tokens[chain][int(rng.integers(0, 3))]
        if kind == "native":
            self.make_tx(rng, chain, ts, user, other, value=amount)
        elif kind == "erc20":
            self.make_tx(rng, chain, ts, user, token, logs=[self.transfer_log(token, user, other, amount)])
        elif kind == "swap":
            pool = self.pools[chain][int(rng.integers(0, 2))]
            token_out = self.tokens[chain][int(rng.integers(0, 3))]
            out_amount = amount * int(rng.integers(50, 150)) // 100
            swap = encode_event(NOISE_DECLS["Swap"], {"sender": user, "amount0In": amount, "amount1In": 0,
                                                       "amount0Out": 0, "amount1Out": out_amount, "to": user}, pool)
            self.make_tx(rng, chain, ts, user, pool, logs=[
                self.transfer_log(token, user, pool, amount),
                self.transfer_log(token_out, pool, user, out_amount), swap])
        elif kind == "approval":
            spender = self.deployments[int(rng.integers(0, len(self.deployments)))].contracts[chain]
            appr = encode_event(NOISE_DECLS["Approval"], {"owner": user, "spender": spender, "value": amount}, token)
            self.make_tx(rng, chain, ts, user, token, logs=[appr])
        elif kind == "wrap":
            weth = self.weth[chain]
            self.make_tx(rng, chain, ts, user, weth, value=amount,
                         logs=[encode_event(NOISE_DECLS["WrapDeposit"], {"dst": user, "wad": amount}, weth)])
        else:
            target = self.deployments[int(rng.integers(0, len(self.deployments)))].contracts[chain]
            self.make_tx(rng, chain, ts, user, target, status="failed")

    def make_noise(self):
        rng = self.rng_noise
        by_hash = {t.tx_hash: t for t in self.txs}
        n_noise = int(round(self.cfg.noise_ratio * 2 * len(self.pairs)))
        for _ in range(n_noise):
            if self.pairs and rng.random() < self.cfg.followup_share:
                pair = self.pairs[int(rng.integers(0, len(self.pairs)))]
                if rng.random() < 0.5:
                    wd = by_hash[pair.dst_tx]
                    user = self.recipient_of[pair.dst_tx]
                    self.noise_tx(rng, pair.dst_chain, wd.timestamp + int(rng.integers(1, 2400)), user)
                else:
                    dp = by_hash[pair.src_tx]
                    self.noise_tx(rng, pair.src_chain, dp.timestamp - int(rng.integers(1, 2400)), dp.from_addr)
            else:
                chain = int(self.cfg.chains[int(rng.integers(0, len(self.cfg.chains)))])
                user = self.users[int(rng.integers(0, len(self.users)))] if rng.random() < 0.7 else self.address(rng)
                self.noise_tx(rng, chain, T0 + int(rng.integers(0, self.span)), user)

    # -- splits and annotations --------------------------------------------------------

    def assign_splits(self, txs: list[Transaction], pairs: list[LabeledPair]) -> dict[str, str]:
        rng = self.rng_split
        by_hash = {t.tx_hash: t for t in txs}
        paired = set()
        strata: dict[tuple, list[list[str]]] = {}
        for p in pairs:
            paired.update((p.src_tx, p.dst_tx))
            key = ("pair", len(by_hash[p.src_tx].logs))
            strata.setdefault(key, []).append([p.src_tx, p.dst_tx])
        for t in sorted(txs, key=lambda t: t.sort_key):
            if t.tx_hash not in paired:
                strata.setdefault(("single", len(t.logs)), []).append([t.tx_hash])
        out = {}
        for key in sorted(strata):
            units = strata[key]
            order = rng.permutation(len(units))
            n = len(units)
            n_train = int(round(0.7 * n))
            n_valid = int(round(0.15 * n))
            for rank, idx in enumerate(order):
                split = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
                for h in units[idx]:
                    out[h] = split
        return out

    def annotations(self) -> list[NerAnnotation]:
        rng = self.rng_ner
        out = []
        for dep in self.deployments:
            spec = dep.spec
            for decl in (spec.deposit_decl, spec.withdrawal_decl):
                out.append(NerAnnotation(decl.to_text(), tuple(gold_tags(decl, spec.role_tags())), spec.name))
        generic = []
        for decl in NOISE_DECLS.values():
            generic.append((decl, {}))
        for _ in range(self.cfg.lexicon_declarations):
            generic.append(lexicon_declaration(rng))
        for decl, roles in generic:
            split = "train" if rng.random() < 0.8 else "valid"
            out.append(NerAnnotation(decl.to_text(), tuple(gold_tags(decl, roles)), None, split))
        return out


def lexicon_declaration(rng: np.random.Generator) -> tuple[EventDecl, dict[str, str]]:
    """A random bridge-like declaration drawn from the naming lexicon, with its role map."""
    from .ledger import Param

    params: list[tuple[str, str]] = []
    roles: dict[str, str] = {}
    used: set[str] = set()
    for role, prob in (("src_chain", 0.7), ("dst_chain", 0.8), ("sender", 0.8),
                       ("recipient", 0.85), ("amount", 0.9)):
        if rng.random() < prob:
            name = str(rng.choice(LEXICON[role]))
            if name in used:
                continue
            used.add(name)
            abi = str(rng.choice(CHAIN_TYPES)) if role.endswith("chain") else (
                "address" if role in ("sender", "recipient") else "uint256")
            params.append((name, abi))
            roles[name] = ROLE_TAG[role]
    for idx in rng.permutation(len(DISTRACTORS))[: int(rng.integers(1, 5))]:
        name, abi = DISTRACTORS[int(idx)]
        if name not in used:
            used.add(name)
            params.append((name, abi))
    order = rng.permutation(len(params))
    n_indexed = int(rng.integers(0, 4))
    plist = []
    for rank, i in enumerate(order):
        name, abi = params[int(i)]
        plist.append(Param(name, abi, indexed=rank < n_indexed and abi != "string"))
    event = str(rng.choice(EVENT_NAMES))
    return EventDecl(event, tuple(plist)), roles


def generate(config: WorldConfig) -> LabeledDataset:
    config.validate()
    w = _World(config)
    w.deploy()
    w.make_pairs()
    w.make_noise()
    txs = w.txs
    ds = LabeledDataset(
        store=TxStore(txs, config.chains),
        pairs=list(w.pairs),
        ner_annotations=w.annotations(),
        split_assignment={},
        abis=w.abis,
        bridges=w.deployments,
        seed=config.seed,
    )
    ds = inject_attacks(ds, config.attack_spec)
    ds.split_assignment = w.assign_splits(ds.store.transactions(), ds.pairs)
    return ds


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------


def _rewrite(tx: Transaction, **changes) -> Transaction:
    new = copy.copy(tx)
    for k, v in changes.items():
        setattr(new, k, v)
    return new


def _set_event_field(log: RawLog, decl: EventDecl, field_name: str, value) -> RawLog:
    vals = decode_event(log, decl).as_dict()
    vals[field_name] = value
    return encode_event(decl, vals, log.emitter)


def inject_attacks(dataset: LabeledDataset, templates: list[AttackTemplate]) -> LabeledDataset:
    """Turn benign pairs into attack pairs; returns a new dataset."""
    if not any(t.count for t in templates):
        return dataset
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([dataset.seed, 0xA77AC])))
    txs = {t.tx_hash: t for t in dataset.store.transactions()}
    pairs = list(dataset.pairs)
    free = [i for i, p in enumerate(pairs) if not p.is_attack]
    for tmpl in templates:
        tmpl.validate()
        take = min(tmpl.count, len(free))
        chosen = sorted(int(free.pop(int(rng.integers(0, len(free))))) for _ in range(take))
        for i in chosen:
            pair = pairs[i]
            dep = dataset.bridge(pair.bridge)
            spec = dep.spec
            d_tx, w_tx = txs[pair.src_tx], txs[pair.dst_tx]
            amount_key = spec.vocab["amount"]
            if tmpl.kind == "zero_deposit":
                logs = []
                for lg in d_tx.logs:
                    if lg.topics[0] == spec.deposit_decl.topic0:
                        lg = _set_event_field(lg, spec.deposit_decl, amount_key, 0)
                    elif lg.topics[0] == TRANSFER.topic0:
                        lg = _set_event_field(lg, TRANSFER, "value", 0)
                    logs.append(lg)
                txs[d_tx.tx_hash] = _rewrite(d_tx, logs=logs, value=0, internal_transfers=[])
            elif tmpl.kind == "unburned_wrap":
                logs = [lg for lg in d_tx.logs if lg.topics[0] != TRANSFER.topic0]
                txs[d_tx.tx_hash] = _rewrite(d_tx, logs=logs, value=0, internal_transfers=[])
            else:
                dep_amount = decode_event(
                    next(lg for lg in d_tx.logs if lg.topics[0] == spec.deposit_decl.topic0),
                    spec.deposit_decl).get(amount_key)
                inflated = dep_amount * int(rng.integers(2, 21))
                logs = []
                for lg in w_tx.logs:
                    if lg.topics[0] == spec.withdrawal_decl.topic0:
                        lg = _set_event_field(lg, spec.withdrawal_decl, amount_key, inflated)
                    elif lg.topics[0] == TRANSFER.topic0:
                        lg = _set_event_field(lg, TRANSFER, "value", inflated)
                    logs.append(lg)
                internal = [dataclasses.replace(it, amount=inflated) for it in w_tx.internal_transfers]
                txs[w_tx.tx_hash] = _rewrite(w_tx, logs=logs, internal_transfers=internal)
            pairs[i] = dataclasses.replace(pair, is_attack=True, attack_kind=tmpl.kind)
    return LabeledDataset(
        store=TxStore(txs.values(), dataset.store.chains),
        pairs=pairs,
        ner_annotations=list(dataset.ner_annotations),
        split_assignment=dict(dataset.split_assignment),
        abis=dataset.abis,
        bridges=dataset.bridges,
        seed=dataset.seed,
    )


def random_value(p, rng: np.random.Generator):
    """A uniformly drawn value that fits parameter ``p``'s ABI type."""
    base = p.base_type
    if base == "uint":
        bits = int(p.abi_type[4:])
        return int.from_bytes(rng.bytes(bits // 8), "big") >> int(rng.integers(0, bits))
    if base == "address":
        return hex0x(rng.bytes(20))
    if base == "bool":
        return bool(rng.integers(0, 2))
    if base == "string":
        return "".join(chr(int(c)) for c in rng.integers(97, 123, size=int(rng.integers(0, 32))))
    n = 32 if p.abi_type == "bytes" else int(p.abi_type[5:])
    return rng.bytes(n)


def sample_events(n: int, seed: int, bridges: list[BridgeSpec] | None = None):
    """Yield ``n`` (declaration, source values, encoded log) triples.

    Declarations alternate between bridge events and lexicon-drawn ones; values
    cover each type's full range.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xE7E7])))
    decls = [d for b in (bridges or default_bridges()) for d in (b.deposit_decl, b.withdrawal_decl)]
    decls += list(NOISE_DECLS.values())
    for i in range(n):
        decl = decls[i % len(decls)] if i % 2 == 0 else lexicon_declaration(rng)[0]
        values = {p.name: random_value(p, rng) for p in decl.params}
        yield decl, values, encode_event(decl, values, hex0x(rng.bytes(20)))
