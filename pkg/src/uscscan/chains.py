"""Upgrade-chain reconstruction and the upgrade-related security audits."""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from ._validation import ZERO_ADDRESS, normalize_address
from .bytecode import BytecodeFeatures, analyze_bytecode, format_selector
from .classifier import ContractAnalysis, Pattern, PatternClassification, detect_hierarchy_upgrader
from .ingest import (
    ContractRecord,
    CreationTrace,
    MigrationRecord,
    RpcError,
    StorageSample,
    TokenList,
    TransactionRecord,
    creation_trace_has_create2,
)
from .signatures import (
    NotACallError,
    TruncatedCalldataError,
    UpgradeFunctionDb,
    decode_upgrade_call,
    keccak256,
    keccak_selector,
)

UPGRADE_TO_AND_CALL = keccak_selector("upgradeToAndCall(address,bytes)")


class Category(str, enum.Enum):
    MISSING_ACCESS_CONTROL = "MissingAccessControl"
    UNINITIALIZED_LOGIC_CASE_I = "UninitializedLogicCaseI"
    UNINITIALIZED_LOGIC_CASE_II = "UninitializedLogicCaseII"
    SAME_ADDRESS = "SameAddress"
    ZERO_ADDRESS = "ZeroAddress"
    EOA_TARGET = "EOATarget"
    EMPTY_CONTRACT_TARGET = "EmptyContractTarget"
    NON_UPGRADEABLE_UUPS_TARGET = "NonUpgradeableUUPSTarget"
    OLD_CONTRACT_STILL_USED = "OldContractStillUsed"
    STALE_TOKEN_LISTING = "StaleTokenListing"
    HIERARCHY_UPGRADE = "HierarchyUpgrade"

    def __str__(self) -> str:
        return self.value


class Severity(str, enum.Enum):
    INFO = "info"
    WARN = "warn"
    CRITICAL = "critical"

    def __str__(self) -> str:
        return self.value


SEVERITY = {
    Category.NON_UPGRADEABLE_UUPS_TARGET: Severity.CRITICAL,
    Category.UNINITIALIZED_LOGIC_CASE_I: Severity.CRITICAL,
    Category.UNINITIALIZED_LOGIC_CASE_II: Severity.CRITICAL,
    Category.ZERO_ADDRESS: Severity.WARN,
    Category.EOA_TARGET: Severity.WARN,
    Category.EMPTY_CONTRACT_TARGET: Severity.WARN,
    Category.MISSING_ACCESS_CONTROL: Severity.WARN,
    Category.SAME_ADDRESS: Severity.INFO,
    Category.STALE_TOKEN_LISTING: Severity.INFO,
    Category.OLD_CONTRACT_STILL_USED: Severity.INFO,
    Category.HIERARCHY_UPGRADE: Severity.INFO,
}


@dataclass(frozen=True)
class UpgradeEvent:
    block: int
    tx_index: int
    tx_hash: str
    sender: str
    new_logic: str | None  # address, or code hash for metamorphic redeploys
    success: bool
    selector: int | None = None
    undecodable: bool = False

    @property
    def order_key(self) -> tuple:
        return (self.block, self.tx_index, self.tx_hash)

    def to_dict(self) -> dict:
        return {
            "block": self.block,
            "tx_index": self.tx_index,
            "tx_hash": self.tx_hash,
            "sender": self.sender,
            "new_logic": self.new_logic,
            "success": self.success,
            "selector": format_selector(self.selector) if self.selector is not None else None,
            "undecodable": self.undecodable,
        }


@dataclass(frozen=True)
class UpgradeChain:
    subject: str
    pattern: PatternClassification
    events: tuple[UpgradeEvent, ...] = ()
    attempted: tuple[UpgradeEvent, ...] = ()
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if any(not e.success for e in self.events) or any(e.success for e in self.attempted):
            raise ValueError("events must all succeed and attempted must all fail")

    def __len__(self) -> int:
        return len(self.events)

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "pattern": self.pattern.pattern.value,
            "uups": self.pattern.uups,
            "events": [e.to_dict() for e in self.events],
            "attempted": [e.to_dict() for e in self.attempted],
            "notes": list(self.notes),
        }


@dataclass(frozen=True)
class SecurityFinding:
    category: Category
    subject: str
    evidence: dict = field(default_factory=dict)
    chain_position: int | None = None

    def __post_init__(self):
        if not self.evidence:
            raise ValueError("a finding needs evidence")

    @property
    def severity(self) -> Severity:
        return SEVERITY[self.category]

    def to_dict(self) -> dict:
        obj = {
            "category": self.category.value,
            "severity": self.severity.value,
            "subject": self.subject,
            "evidence": self.evidence,
        }
        if self.chain_position is not None:
            obj["chain_position"] = self.chain_position
        return obj

    def sort_key(self) -> tuple:
        pos = -1 if self.chain_position is None else self.chain_position
        return (self.subject, pos, self.category.value, json.dumps(self.evidence, sort_keys=True))


@dataclass(frozen=True)
class DeferredCheck:
    """A check that could not run because a lookup failed."""

    subject: str
    check: str
    target: str | None
    reason: str
    chain_position: int | None = None

    def to_dict(self) -> dict:
        return {
            "kind": "unresolved",
            "subject": self.subject,
            "check": self.check,
            "target": self.target,
            "reason": self.reason,
            "chain_position": self.chain_position,
        }


def sort_findings(findings: Iterable[SecurityFinding]) -> list[SecurityFinding]:
    return sorted(findings, key=SecurityFinding.sort_key)


# -- chain construction -----------------------------------------------------


def build_upgrade_chain(
    subject: str,
    txs: Iterable[TransactionRecord],
    db: UpgradeFunctionDb,
    pattern: PatternClassification | None = None,
) -> UpgradeChain:
    """Upgrade events sent to ``subject``; failed ones land in ``attempted``."""
    subject = normalize_address(subject)
    events: list[UpgradeEvent] = []
    for tx in txs:
        if tx.to != subject:
            continue
        undecodable = False
        try:
            call = decode_upgrade_call(tx.input, db)
        except NotACallError:
            continue
        except TruncatedCalldataError as exc:
            call, undecodable = exc.partial, True
        if call.signature is None:
            continue
        new_logic = call.new_logic_candidates[0] if call.new_logic_candidates else None
        events.append(
            UpgradeEvent(tx.block, tx.tx_index, tx.hash, tx.sender, new_logic, tx.status,
                         call.selector, undecodable or new_logic is None)
        )
    events.sort(key=lambda e: e.order_key)
    return UpgradeChain(
        subject,
        pattern or PatternClassification(Pattern.NOT_UPGRADEABLE),
        tuple(e for e in events if e.success),
        tuple(e for e in events if not e.success),
    )


def code_hash(code: bytes) -> str:
    return "0x" + keccak256(code).hex()


def build_metamorphic_chain(
    address: str,
    creations: Iterable[tuple[ContractRecord, CreationTrace | None]],
    pattern: PatternClassification | None = None,
) -> UpgradeChain:
    """Chain of redeployments at one address, keyed by runtime code hash.

    Every redeploy after the first creation is an upgrade event, provided
    its creation trace shows CREATE2; others are excluded and noted.
    """
    address = normalize_address(address)
    creations = list(creations)
    if not creations:
        raise ValueError("need at least one creation")
    for record, _ in creations:
        if record.address != address:
            raise ValueError(f"creation at {record.address} does not belong to {address}")
    creations.sort(key=lambda c: (c[0].creation_block, c[0].creation_tx_index, c[0].creation_tx))
    notes: list[str] = []
    events: list[UpgradeEvent] = []
    for record, trace in creations[1:]:
        if not creation_trace_has_create2(trace):
            notes.append(f"excluded {record.creation_tx}: no CREATE2 in creation trace")
            continue
        events.append(
            UpgradeEvent(record.creation_block, record.creation_tx_index, record.creation_tx,
                         record.creator, code_hash(record.bytecode), True)
        )
    return UpgradeChain(
        address, pattern or PatternClassification(Pattern.METAMORPHIC), tuple(events), (),
        tuple(notes),
    )


# -- audits -----------------------------------------------------------------

Lookup = Callable[[str], object] | Mapping[str, object]


def _lookup(source: Lookup, key: str):
    if callable(source):
        return source(key)
    return source[key]


def audit_logic_targets(
    chain: UpgradeChain,
    code_lookup: Lookup,
    features_lookup: Lookup | None = None,
    db: UpgradeFunctionDb | None = None,
    deferred: list | None = None,
) -> list[SecurityFinding]:
    """Check every upgrade target for the logic-address defects.

    A repeated target only raises SameAddress; its code was judged at the
    previous position. Failed lookups go to ``deferred`` instead of being
    dropped.
    """
    findings: list[SecurityFinding] = []
    uups = chain.pattern.uups
    previous: str | None = None
    for pos, event in enumerate(chain.events):
        target = event.new_logic
        base = {"tx_hash": event.tx_hash, "new_logic": target}
        if target is None:
            if deferred is not None:
                deferred.append(DeferredCheck(chain.subject, "logic-target", None,
                                              "undecodable upgrade calldata", pos))
            previous = None
            continue
        if pos > 0 and target == previous:
            findings.append(SecurityFinding(
                Category.SAME_ADDRESS, chain.subject,
                {**base, "previous_tx_hash": chain.events[pos - 1].tx_hash}, pos))
            continue
        previous = target
        uups_issue = None
        if target == ZERO_ADDRESS:
            findings.append(SecurityFinding(Category.ZERO_ADDRESS, chain.subject, base, pos))
            uups_issue = "zero address"
        else:
            try:
                code = _lookup(code_lookup, target)
                if features_lookup is not None and code:
                    feats = _lookup(features_lookup, target)
                else:
                    feats = analyze_bytecode(code) if code else BytecodeFeatures()
            except (LookupError, RpcError) as exc:
                if deferred is not None:
                    deferred.append(DeferredCheck(chain.subject, "logic-target", target,
                                                  f"lookup failed: {exc!r}", pos))
                continue
            if not code:
                findings.append(SecurityFinding(Category.EOA_TARGET, chain.subject, base, pos))
                uups_issue = "no code"
            elif not feats.local_selectors and not feats.has_fallback:
                findings.append(SecurityFinding(
                    Category.EMPTY_CONTRACT_TARGET, chain.subject,
                    {**base, "code_size": len(code)}, pos))
            if uups and db is not None and not (feats.local_selectors & db.selectors()):
                uups_issue = uups_issue or "no upgrade function"
        if uups and uups_issue:
            findings.append(SecurityFinding(
                Category.NON_UPGRADEABLE_UUPS_TARGET, chain.subject,
                {**base, "reason": uups_issue}, pos))
    return findings


def audit_access_control(chain: UpgradeChain) -> list[SecurityFinding]:
    """Candidate missing-access-control: several upgraders, one of whom
    upgraded exactly once."""
    if len(chain.events) < 2:
        return []
    counts = Counter(e.sender for e in chain.events)
    one_shot = sorted(s for s, n in counts.items() if n == 1)
    if len(counts) < 2 or not one_shot:
        return []
    evidence = {
        "one_shot_senders": one_shot,
        "senders": sorted(counts),
        "upgrade_txs": [e.tx_hash for e in chain.events],
        "attempted_senders": sorted({e.sender for e in chain.attempted}),
        "status": "candidate: confirm the upgrade function lacks an owner check",
    }
    return [SecurityFinding(Category.MISSING_ACCESS_CONTROL, chain.subject, evidence)]


def audit_uninitialized_logic(
    logic: ContractAnalysis,
    storage: StorageSample,
    db: UpgradeFunctionDb | None = None,
    *,
    uups: bool | None = None,
    proxy: str | None = None,
) -> list[SecurityFinding]:
    """Flag never-initialised logic contracts that can be destroyed directly.

    ``uups`` defaults to whether the logic contract itself carries an
    upgrade function.
    """
    if not storage.all_zero:
        return []
    if uups is None:
        uups = bool(logic.upgrade_matches.local)
    base = {"sampled_slots": [hex(s) for s in storage.slots], "storage": "all zero"}
    if proxy is not None:
        base["proxy"] = proxy
    findings = []
    if logic.features.has_selfdestruct:
        findings.append(SecurityFinding(
            Category.UNINITIALIZED_LOGIC_CASE_I, logic.address,
            {**base, "opcode": "SELFDESTRUCT", "uups": uups}))
    if uups and UPGRADE_TO_AND_CALL in logic.features.local_selectors:
        findings.append(SecurityFinding(
            Category.UNINITIALIZED_LOGIC_CASE_II, logic.address,
            {**base, "selector": format_selector(UPGRADE_TO_AND_CALL)}))
    return findings


def _after(tx: TransactionRecord, m: MigrationRecord) -> bool | None:
    if m.time_unit == "block":
        return tx.block > m.announcement_time
    if tx.timestamp is None:
        return None
    return tx.timestamp > m.announcement_time


def audit_version(
    migrations: Iterable[MigrationRecord],
    txs: Iterable[TransactionRecord],
    tokenlists: Iterable[TokenList],
) -> list[SecurityFinding]:
    txs = list(txs)
    tokenlists = list(tokenlists)
    findings: list[SecurityFinding] = []
    for m in migrations:
        late, unknown = [], 0
        for tx in txs:
            if tx.to != m.old_address or not tx.status:
                continue
            after = _after(tx, m)
            if after is None:
                unknown += 1
            elif after:
                late.append(tx)
        if late:
            late.sort(key=lambda t: (t.block, t.tx_index, t.hash))
            evidence = {
                "new_address": m.new_address,
                "announcement_time": m.announcement_time,
                "time_unit": m.time_unit,
                "tx_count": len(late),
                "tx_hashes": [t.hash for t in late],
            }
            if unknown:
                evidence["txs_without_timestamp"] = unknown
            findings.append(SecurityFinding(Category.OLD_CONTRACT_STILL_USED, m.old_address, evidence))
        for tl in tokenlists:
            if m.old_address in tl.addresses and m.new_address not in tl.addresses:
                findings.append(SecurityFinding(
                    Category.STALE_TOKEN_LISTING, m.old_address,
                    {"list": tl.source, "new_address": m.new_address}))
    return findings


def audit_hierarchy(
    analysis: ContractAnalysis, proxy_upgrade_selectors: Iterable[int]
) -> list[SecurityFinding]:
    selectors = frozenset(proxy_upgrade_selectors)
    if not detect_hierarchy_upgrader(analysis, selectors):
        return []
    called = sorted(analysis.upgrade_matches.outbound & selectors)
    return [SecurityFinding(
        Category.HIERARCHY_UPGRADE, analysis.address,
        {"outbound_upgrade_selectors": [format_selector(s) for s in called]})]
