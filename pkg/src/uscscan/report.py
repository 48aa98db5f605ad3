"""Corpus pipeline: dedup, per-contract analysis, chains, audits, report.

Also holds the precision arithmetic used to score classifications against
hand labels.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Iterable, Mapping

from . import __version__
from .bytecode import DEFAULT_OUTBOUND_WINDOW, TEMPLATE_SET_VERSION, analyze_bytecode
from .chains import (
    Category,
    DeferredCheck,
    SecurityFinding,
    Severity,
    UpgradeChain,
    audit_access_control,
    audit_hierarchy,
    audit_logic_targets,
    audit_uninitialized_logic,
    audit_version,
    build_metamorphic_chain,
    build_upgrade_chain,
    sort_findings,
)
from .classifier import (
    DEFAULT_DIRECTION_THRESHOLD,
    ContractAnalysis,
    Pattern,
    PatternClassification,
    analyze_contract,
    classify,
    resolve_strategy_vs_data,
)
from .ingest import (
    DEFAULT_SAMPLE_SLOTS,
    ContractRecord,
    JsonRpcClient,
    StateSnapshot,
    CreationTrace,
    MigrationRecord,
    RpcError,
    StateSource,
    TokenList,
    TransactionRecord,
    fetch_storage_sample,
    load_fixtures,
    resolve_logic_address,
)
from .signatures import UpgradeFunctionDb, keccak256

EXIT_OK = 0
EXIT_CRITICAL = 2
EXIT_USAGE = 64
EXIT_INTERNAL = 70

REPORT_PATTERNS = (
    Pattern.PROXY,
    Pattern.DATA_SEPARATION,
    Pattern.STRATEGY,
    Pattern.DATA_OR_STRATEGY,
    Pattern.MIX,
    Pattern.METAMORPHIC,
    Pattern.MIGRATION,
    Pattern.NOT_UPGRADEABLE,
)


# -- dedup ------------------------------------------------------------------


@dataclass(frozen=True)
class BytecodeGroup:
    code_hash: str
    representative: ContractRecord
    member_count: int
    factory_created: bool
    members: tuple[ContractRecord, ...] = ()


def _creation_key(r: ContractRecord) -> tuple:
    return (r.creation_block, r.creation_tx_index, r.address)


def dedup_group(contracts: Iterable[ContractRecord]) -> list[BytecodeGroup]:
    """Group by identical runtime bytes (metadata trailer included); the
    earliest-created member represents the group."""
    buckets: dict[bytes, list[ContractRecord]] = defaultdict(list)
    for record in contracts:
        buckets[keccak256(record.bytecode)].append(record)
    groups = []
    for digest, members in buckets.items():
        members.sort(key=_creation_key)
        groups.append(BytecodeGroup(
            code_hash="0x" + digest.hex(),
            representative=members[0],
            member_count=len(members),
            factory_created=all(m.created_by_contract for m in members),
            members=tuple(members),
        ))
    groups.sort(key=lambda g: _creation_key(g.representative))
    return groups


# -- precision --------------------------------------------------------------


@dataclass(frozen=True)
class PrecisionRow:
    tp: int
    fp: int

    @property
    def precision(self) -> float | None:
        n = self.tp + self.fp
        return self.tp / n if n else None

    @property
    def percent(self) -> str | None:
        return format_percent(self.tp, self.tp + self.fp)


@dataclass(frozen=True)
class EvalMetrics:
    rows: dict[str, PrecisionRow]
    total: PrecisionRow
    coverage_gap: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        def row(r: PrecisionRow) -> dict:
            return {"tp": r.tp, "fp": r.fp, "precision": r.precision, "percent": r.percent}

        return {
            "rows": {k: row(v) for k, v in sorted(self.rows.items())},
            "total": row(self.total),
            "coverage_gap": list(self.coverage_gap),
        }


def format_percent(num: int, den: int) -> str | None:
    """``num/den`` as a percentage with 2 decimals, half-even rounding."""
    if den == 0:
        return None
    value = (Decimal(num) * 100 / Decimal(den)).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)
    return f"{value}%"


def evaluate_precision(
    predictions: Mapping[str, str], labels: Mapping[str, str]
) -> EvalMetrics:
    """Per-predicted-pattern precision over the labelled addresses.

    Rows exist only for patterns that were predicted for some labelled
    address; labels for unpredicted addresses are reported as a coverage gap.
    """
    tp: dict[str, int] = defaultdict(int)
    fp: dict[str, int] = defaultdict(int)
    gap = []
    for address, truth in labels.items():
        if address not in predictions:
            gap.append(address)
            continue
        predicted = str(predictions[address])
        if predicted == str(truth):
            tp[predicted] += 1
        else:
            fp[predicted] += 1
    rows = {p: PrecisionRow(tp[p], fp[p]) for p in set(tp) | set(fp)}
    total = PrecisionRow(sum(tp.values()), sum(fp.values()))
    return EvalMetrics(rows, total, tuple(sorted(gap)))


# -- configuration ----------------------------------------------------------


@dataclass
class ScanConfig:
    contracts: str | None = None
    transactions: str | None = None
    traces: str | None = None
    migrations: str | None = None
    tokenlists: list[str] = field(default_factory=list)
    state: str | None = None
    rpc: str | None = None
    db: str | None = None
    out_dir: str | None = None
    jobs: int = 1
    outbound_window: int = DEFAULT_OUTBOUND_WINDOW
    direction_threshold: float = DEFAULT_DIRECTION_THRESHOLD
    storage_sample_slots: list[int] = field(default_factory=lambda: list(DEFAULT_SAMPLE_SLOTS))

    # knobs that change results; paths and parallelism do not
    KNOBS = ("outbound_window", "direction_threshold", "storage_sample_slots")

    def update_from_file(self, path: str | Path) -> None:
        with open(path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("config must be a flat JSON object")
        for key, value in doc.items():
            if key.startswith("_") or key == "KNOBS" or not hasattr(self, key):
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(value, (dict, list)) and key not in ("tokenlists", "storage_sample_slots"):
                raise ValueError(f"config key {key!r} must be a scalar")
            setattr(self, key, value)

    def fingerprint(self, db: UpgradeFunctionDb) -> str:
        doc = {k: getattr(self, k) for k in self.KNOBS}
        doc["db_version"] = db.version
        doc["allowlist_version"] = db.rules.version
        doc["template_set"] = TEMPLATE_SET_VERSION
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


class UsageError(ValueError):
    """Missing or inconsistent inputs."""


# -- the pipeline -----------------------------------------------------------


@dataclass
class ScanResult:
    report: dict
    findings: list[SecurityFinding]
    classifications: dict[str, PatternClassification]
    chains: list[UpgradeChain]

    @property
    def has_critical(self) -> bool:
        return any(f.severity is Severity.CRITICAL for f in self.findings)

    @property
    def exit_code(self) -> int:
        return EXIT_CRITICAL if self.has_critical else EXIT_OK


def _index_traces(traces: Iterable[CreationTrace]) -> dict[str, CreationTrace]:
    return {t.tx_hash: t for t in traces}


class _Corpus:
    """Code and trace lookups shared by the worker pool (read-only after init)."""

    def __init__(self, contracts, traces, state: StateSource | None):
        self.code = {r.address: r.bytecode for r in contracts}
        self.traces = _index_traces(traces)
        self.state = state
        self.addresses = frozenset(self.code)

    def get_code(self, address: str) -> bytes:
        if address in self.code:
            return self.code[address]
        if self.state is None:
            raise LookupError(f"no code source for {address}")
        return self.state.get_code(address)


def _analyze(record: ContractRecord, corpus: _Corpus, db: UpgradeFunctionDb,
             config: ScanConfig, features=None) -> ContractAnalysis:
    features = features or analyze_bytecode(record.bytecode, config.outbound_window)
    logic_address = logic_code = probe = None
    if features.has_delegatecall and corpus.state is not None:
        resolution = resolve_logic_address(corpus.state, record.address)
        if resolution is not None:
            logic_address, probe = resolution.address, resolution.probe
            logic_code = corpus.get_code(logic_address)
    logic_features = (
        analyze_bytecode(logic_code, config.outbound_window) if logic_code else None
    )
    return analyze_contract(
        record, db,
        features=features,
        logic_address=logic_address,
        logic_features=logic_features,
        creation_trace=corpus.traces.get(record.creation_tx),
        logic_probe=probe,
    )


def open_state(config: ScanConfig) -> StateSource | None:
    """Offline snapshot if configured, else the RPC endpoint, else nothing."""
    if config.state:
        return StateSnapshot.load(config.state)
    if config.rpc:
        return JsonRpcClient(config.rpc)
    return None


def _load(path: str | None, kind: str) -> list:
    return load_fixtures(path, kind) if path else []


def run_corpus(
    config: ScanConfig,
    db: UpgradeFunctionDb | None = None,
    state: StateSource | None = None,
) -> ScanResult:
    """Run the whole pipeline over fixture files and build the report."""
    if not config.contracts:
        raise UsageError("a contracts file is required")
    db = db or UpgradeFunctionDb.load(config.db)
    if state is None:
        state = open_state(config)
    contracts: list[ContractRecord] = _load(config.contracts, "contracts")
    txs: list[TransactionRecord] = _load(config.transactions, "transactions")
    traces: list[CreationTrace] = _load(config.traces, "traces")
    migrations: list[MigrationRecord] = _load(config.migrations, "migrations")
    tokenlists: list[TokenList] = [tl for p in config.tokenlists for tl in load_fixtures(p, "tokenlist")]
    return analyze_corpus(contracts, txs, traces, migrations, tokenlists, db, config, state)


def analyze_corpus(
    contracts: list[ContractRecord],
    txs: list[TransactionRecord],
    traces: list[CreationTrace],
    migrations: list[MigrationRecord],
    tokenlists: list[TokenList],
    db: UpgradeFunctionDb,
    config: ScanConfig | None = None,
    state: StateSource | None = None,
) -> ScanResult:
    config = config or ScanConfig()
    errors: list[dict] = []
    deferred: list[DeferredCheck] = []

    # Several records at one address are successive creations there; the
    # latest one is the live contract.
    by_address: dict[str, list[ContractRecord]] = defaultdict(list)
    for record in contracts:
        by_address[record.address].append(record)
    current = [max(rs, key=_creation_key) for rs in by_address.values()]
    corpus = _Corpus(current, traces, state)

    groups = dedup_group(current)

    def work(group: BytecodeGroup):
        try:
            analysis = _analyze(group.representative, corpus, db, config)
            return analysis, classify(analysis), None
        except (RpcError, LookupError, ValueError) as exc:
            return None, None, {"address": group.representative.address, "error": repr(exc)}

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(work, groups))
    else:
        results = [work(g) for g in groups]

    txs_by_target: dict[str, list[TransactionRecord]] = defaultdict(list)
    for tx in txs:
        if tx.to is not None:
            txs_by_target[tx.to].append(tx)

    migrated = {m.old_address for m in migrations}
    classifications: dict[str, PatternClassification] = {}
    analyses: dict[str, ContractAnalysis] = {}
    counts = {p: {"raw": 0, "dedup": 0} for p in REPORT_PATTERNS}
    for group, (analysis, result, error) in zip(groups, results):
        if error is not None:
            errors.append(error)
            continue
        for member in group.members:
            member_analysis, member_result = analysis, result
            if member is not group.representative:
                # same code, but logic address and creation trace are per member
                member_analysis = _analyze(member, corpus, db, config, analysis.features)
                member_result = classify(member_analysis)
            member_result = resolve_strategy_vs_data(
                member_result, txs_by_target.get(member.address, ()), db,
                subject=member.address,
                threshold=config.direction_threshold,
                contract_addresses=corpus.addresses,
            )
            if member_result.pattern is Pattern.NOT_UPGRADEABLE and member.address in migrated:
                member_result = PatternClassification(Pattern.MIGRATION, evidence=member_result.evidence)
            classifications[member.address] = member_result
            analyses[member.address] = member_analysis
        pattern = classifications[group.representative.address].pattern
        counts[pattern]["raw"] += group.member_count
        if not group.factory_created:
            counts[pattern]["dedup"] += 1

    # migrations whose old contract is not in the corpus still form chains
    for m in migrations:
        classifications.setdefault(m.old_address, PatternClassification(Pattern.MIGRATION))

    chains: list[UpgradeChain] = []
    findings: list[SecurityFinding] = []
    proxy_selectors: set[int] = set()
    for address, analysis in analyses.items():
        c = classifications[address]
        if Pattern.PROXY in (c.pattern, c.secondary) or Pattern.MIX in (c.pattern, c.secondary):
            proxy_selectors |= analysis.upgrade_matches.local
            if analysis.logic_matches is not None:
                proxy_selectors |= analysis.logic_matches.local

    def code_lookup(address: str) -> bytes:
        return corpus.get_code(address)

    for address in sorted(classifications):
        result = classifications[address]
        pattern = result.pattern
        if pattern in (Pattern.NOT_UPGRADEABLE, Pattern.MIGRATION):
            continue
        if pattern is Pattern.METAMORPHIC:
            creations = [(r, corpus.traces.get(r.creation_tx)) for r in by_address[address]]
            chain = build_metamorphic_chain(address, creations, result)
        else:
            chain = build_upgrade_chain(address, txs_by_target.get(address, ()), db, result)
            findings += audit_logic_targets(chain, code_lookup, db=db, deferred=deferred)
        chains.append(chain)
        findings += audit_access_control(chain)

        analysis = analyses.get(address)
        if analysis is None:
            continue
        if pattern in (Pattern.STRATEGY, Pattern.DATA_OR_STRATEGY, Pattern.DATA_SEPARATION, Pattern.MIX):
            findings += audit_hierarchy(analysis, proxy_selectors)
        if (
            pattern in (Pattern.PROXY, Pattern.MIX)
            and analysis.logic_address is not None
            and analysis.logic_features is not None
            and state is not None
        ):
            logic_record = ContractRecord(
                analysis.logic_address, corpus.get_code(analysis.logic_address),
                analysis.record.creator, "0x" + "00" * 32, 0,
            )
            logic = analyze_contract(logic_record, db, features=analysis.logic_features)
            try:
                sample = fetch_storage_sample(state, analysis.logic_address, config.storage_sample_slots)
            except RpcError as exc:
                deferred.append(DeferredCheck(address, "uninitialized-logic",
                                              analysis.logic_address, repr(exc)))
                continue
            findings += audit_uninitialized_logic(logic, sample, db, uups=result.uups, proxy=address)

    for m in migrations:
        chains.append(UpgradeChain(
            m.old_address, classifications[m.old_address], notes=(f"migrated to {m.new_address}",)))
    findings += audit_version(migrations, txs, tokenlists)
    findings = sort_findings(findings)

    chain_counts = {p.value: 0 for p in REPORT_PATTERNS if p is not Pattern.NOT_UPGRADEABLE}
    for chain in chains:
        if chain.events or chain.pattern.pattern is Pattern.MIGRATION:
            chain_counts[chain.pattern.pattern.value] += 1

    finding_counts = {c.value: 0 for c in Category}
    subjects: dict[str, set[str]] = {c.value: set() for c in Category}
    for f in findings:
        finding_counts[f.category.value] += 1
        subjects[f.category.value].add(f.subject)

    report = {
        "header": {
            "tool": "uscscan",
            "version": __version__,
            "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
        "counts": {p.value: counts[p] for p in REPORT_PATTERNS},
        "chains": chain_counts,
        "findings": finding_counts,
        # SameAddress and friends can repeat within one chain; this is the per-contract view
        "findings_by_contract": {k: len(v) for k, v in subjects.items()},
        "errors": errors + [d.to_dict() for d in deferred],
        "config_fingerprint": config.fingerprint(db),
    }
    return ScanResult(report, findings, classifications, sorted(chains, key=lambda c: c.subject))


def report_body(report: dict) -> str:
    """Deterministic serialisation of everything but the run header."""
    return json.dumps({k: v for k, v in report.items() if k != "header"}, indent=2, sort_keys=True)


def write_outputs(result: ScanResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    with open(out / "findings.jsonl", "w") as fh:
        for f in result.findings:
            fh.write(json.dumps(f.to_dict(), sort_keys=True) + "\n")
    with open(out / "classifications.jsonl", "w") as fh:
        for address in sorted(result.classifications):
            c = result.classifications[address]
            fh.write(json.dumps({"address": address, "pattern": c.pattern.value,
                                 "uups": c.uups}, sort_keys=True) + "\n")
    with open(out / "chains.jsonl", "w") as fh:
        for chain in result.chains:
            fh.write(json.dumps(chain.to_dict(), sort_keys=True) + "\n")
