"""Rule-based upgrade-pattern classification."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable

from .bytecode import BytecodeFeatures, analyze_bytecode, format_selector
from .ingest import ContractRecord, CreationTrace, TransactionRecord, creation_trace_has_create2
from .signatures import UpgradeFunctionDb, UpgradeMatches, match_upgrade_selectors

DEFAULT_DIRECTION_THRESHOLD = 0.5


class Pattern(str, enum.Enum):
    PROXY = "Proxy"
    DATA_SEPARATION = "DataSeparation"
    STRATEGY = "Strategy"
    DATA_OR_STRATEGY = "DataOrStrategy"
    MIX = "Mix"
    METAMORPHIC = "Metamorphic"
    MIGRATION = "Migration"
    NOT_UPGRADEABLE = "NotUpgradeable"

    def __str__(self) -> str:
        return self.value


UPGRADEABLE = frozenset(Pattern) - {Pattern.NOT_UPGRADEABLE}


@dataclass(frozen=True)
class Evidence:
    rule: str  # proxy | strategy | metamorphic | direction
    clause: str
    satisfied: bool
    values: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "rule": self.rule,
            "clause": self.clause,
            "satisfied": self.satisfied,
            "values": list(self.values),
        }


@dataclass(frozen=True)
class ContractAnalysis:
    record: ContractRecord
    features: BytecodeFeatures
    upgrade_matches: UpgradeMatches = field(default_factory=UpgradeMatches)
    logic_address: str | None = None
    logic_features: BytecodeFeatures | None = None
    logic_matches: UpgradeMatches | None = None
    creation_trace: CreationTrace | None = None
    logic_probe: str | None = None

    def __post_init__(self):
        if self.logic_features is not None and self.logic_address is None:
            raise ValueError("logic_features requires a resolved logic_address")

    @property
    def address(self) -> str:
        return self.record.address


def analyze_contract(
    record: ContractRecord,
    db: UpgradeFunctionDb,
    *,
    logic_address: str | None = None,
    logic_code: bytes | None = None,
    creation_trace: CreationTrace | None = None,
    logic_probe: str | None = None,
    features: BytecodeFeatures | None = None,
    logic_features: BytecodeFeatures | None = None,
) -> ContractAnalysis:
    """Extract features for a contract (and its logic contract, if known) and
    intersect both with the upgrade db."""
    features = features or analyze_bytecode(record.bytecode)
    if logic_features is None and logic_address is not None and logic_code:
        logic_features = analyze_bytecode(logic_code)
    logic_matches = (
        match_upgrade_selectors(logic_features, db) if logic_features is not None else None
    )
    return ContractAnalysis(
        record=record,
        features=features,
        upgrade_matches=match_upgrade_selectors(features, db),
        logic_address=logic_address,
        logic_features=logic_features,
        logic_matches=logic_matches,
        creation_trace=creation_trace,
        logic_probe=logic_probe,
    )


@dataclass(frozen=True)
class PatternClassification:
    pattern: Pattern
    uups: bool = False
    evidence: tuple[Evidence, ...] = ()
    secondary: Pattern | None = None

    def __post_init__(self):
        if self.uups and self.pattern not in (Pattern.PROXY, Pattern.MIX):
            raise ValueError("uups only applies to Proxy or Mix")

    def satisfied(self, rule: str) -> bool:
        clauses = [e for e in self.evidence if e.rule == rule]
        return bool(clauses) and all(e.satisfied for e in clauses)

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern.value,
            "uups": self.uups,
            "secondary": self.secondary.value if self.secondary else None,
            "evidence": [e.to_dict() for e in self.evidence],
        }


def _sel(values: Iterable[int]) -> tuple[str, ...]:
    return tuple(format_selector(v) for v in sorted(values))


def _proxy_evidence(a: ContractAnalysis) -> list[Evidence]:
    f = a.features
    proxy_side = a.upgrade_matches.local
    logic_side = a.logic_matches.local if a.logic_matches is not None else frozenset()
    out = [
        Evidence("proxy", "Upg in Func_proxy or Func_logic", bool(proxy_side or logic_side),
                 _sel(proxy_side | logic_side)),
        Evidence("proxy", "DCALL", f.has_delegatecall, ("DELEGATECALL",) if f.has_delegatecall else ()),
        Evidence("proxy", "FBK", f.has_fallback, ("fallback",) if f.has_fallback else ()),
    ]
    if a.logic_address is None:
        out.append(Evidence("note", "logic contract unresolved", False))
    elif a.logic_features is None:
        out.append(Evidence("note", "logic contract has no code", False, (a.logic_address,)))
    return out


def _strategy_evidence(a: ContractAnalysis) -> list[Evidence]:
    f = a.features
    calls = tuple(n for n, flag in (("CALL", f.has_call), ("STATICCALL", f.has_staticcall)) if flag)
    return [
        Evidence("strategy", "Upg in Func_main", bool(a.upgrade_matches.local),
                 _sel(a.upgrade_matches.local)),
        Evidence("strategy", "CALL or SCALL", bool(calls), calls),
        Evidence("strategy", "OFunc_main nonempty", bool(f.outbound_selectors),
                 _sel(f.outbound_selectors)),
    ]


def _metamorphic_evidence(a: ContractAnalysis) -> list[Evidence]:
    f = a.features
    out = [Evidence("metamorphic", "SDES", f.has_selfdestruct,
                    ("SELFDESTRUCT",) if f.has_selfdestruct else ())]
    if a.creation_trace is None:
        out.append(Evidence("metamorphic", "creation trace unavailable", False))
    else:
        has = creation_trace_has_create2(a.creation_trace)
        out.append(Evidence("metamorphic", "CREATE2 in CallTrace_create", has,
                            (a.creation_trace.tx_hash,) if has else ()))
    return out


def _decide(metamorphic: bool, proxy: bool, strategy: bool, uups: bool) -> PatternClassification:
    if proxy and strategy:
        body = Pattern.MIX
    elif proxy:
        body = Pattern.PROXY
    elif strategy:
        body = Pattern.DATA_OR_STRATEGY
    else:
        body = Pattern.NOT_UPGRADEABLE
    if metamorphic:
        secondary = body if body is not Pattern.NOT_UPGRADEABLE else None
        return PatternClassification(Pattern.METAMORPHIC, secondary=secondary)
    return PatternClassification(body, uups and proxy)


def classify(analysis: ContractAnalysis) -> PatternClassification:
    """Apply the pattern rules to one contract.

    Metamorphic is decided first; a metamorphic contract that also satisfies
    the proxy or strategy rule keeps that pattern as ``secondary``. Migration
    is never produced here.
    """
    meta = _metamorphic_evidence(analysis)
    proxy = _proxy_evidence(analysis)
    strategy = _strategy_evidence(analysis)
    proxy_ok = all(e.satisfied for e in proxy if e.rule == "proxy")
    uups = proxy_ok and not analysis.upgrade_matches.local and bool(
        analysis.logic_matches and analysis.logic_matches.local
    )
    if uups:
        proxy.append(Evidence("proxy", "UUPS: upgrade function only in logic contract", True,
                              _sel(analysis.logic_matches.local)))
    result = _decide(
        all(e.satisfied for e in meta),
        proxy_ok,
        all(e.satisfied for e in strategy),
        uups,
    )
    return replace(result, evidence=tuple(meta + proxy + strategy))


def replay(evidence: Iterable[Evidence]) -> PatternClassification:
    """Rebuild a classification from its evidence clauses alone."""
    evidence = tuple(evidence)

    def rule(name: str) -> bool:
        clauses = [e for e in evidence if e.rule == name]
        return bool(clauses) and all(e.satisfied for e in clauses)

    proxy = rule("proxy")
    uups = any(e.rule == "proxy" and e.clause.startswith("UUPS") for e in evidence)
    result = _decide(rule("metamorphic"), proxy, rule("strategy"), uups)
    direction = [e for e in evidence if e.rule == "direction" and e.satisfied]
    if direction and result.pattern is Pattern.DATA_OR_STRATEGY:
        result = replace(result, pattern=Pattern(direction[-1].values[0]))
    return replace(result, evidence=evidence)


def resolve_strategy_vs_data(
    classification: PatternClassification,
    txs: Iterable[TransactionRecord],
    db: UpgradeFunctionDb | None = None,
    *,
    subject: str | None = None,
    threshold: float = DEFAULT_DIRECTION_THRESHOLD,
    contract_addresses: frozenset[str] | None = None,
) -> PatternClassification:
    """Split DataOrStrategy using who calls the subject.

    Non-upgrade calls coming mostly from contracts mean a data contract
    driven by its logic contract; mostly from EOAs (with outbound selectors
    present) means a strategy main contract. Calls whose sender kind is
    unknown are not counted.
    """
    if classification.pattern is not Pattern.DATA_OR_STRATEGY:
        return classification
    from_contract = from_eoa = 0
    for tx in txs:
        if subject is not None and tx.to != subject:
            continue
        if len(tx.input) < 4:
            continue
        if db is not None and int.from_bytes(tx.input[:4], "big") in db:
            continue
        kind = tx.caller_is_contract
        if kind is None and contract_addresses is not None:
            kind = tx.sender in contract_addresses
        if kind is None:
            continue
        if kind:
            from_contract += 1
        else:
            from_eoa += 1
    total = from_contract + from_eoa
    counts = (str(from_contract), str(from_eoa))
    if total == 0:
        note = Evidence("direction", "no decodable inbound calls with known sender", False)
        return replace(classification, evidence=classification.evidence + (note,))
    has_outbound = classification.satisfied("strategy")
    if from_contract / total > threshold:
        decided = Pattern.DATA_SEPARATION
    elif from_eoa / total > threshold and has_outbound:
        decided = Pattern.STRATEGY
    else:
        note = Evidence("direction", "no majority sender kind", False, counts)
        return replace(classification, evidence=classification.evidence + (note,))
    note = Evidence(
        "direction",
        f"inbound calls from contracts/EOAs = {from_contract}/{from_eoa}",
        True,
        (decided.value,) + counts,
    )
    return replace(classification, pattern=decided, evidence=classification.evidence + (note,))


def detect_hierarchy_upgrader(
    analysis: ContractAnalysis, proxy_upgrade_selectors: Iterable[int]
) -> bool:
    """True when the contract calls some proxy's upgrade function."""
    return bool(analysis.upgrade_matches.outbound & frozenset(proxy_upgrade_selectors))
