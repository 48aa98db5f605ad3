from __future__ import annotations

import json
import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uscscan.chains import (
    SEVERITY,
    Category,
    DeferredCheck,
    SecurityFinding,
    Severity,
    UpgradeChain,
    UpgradeEvent,
    audit_access_control,
    audit_logic_targets,
    build_metamorphic_chain,
    build_upgrade_chain,
    code_hash,
)
from uscscan.classifier import Pattern, PatternClassification
from uscscan.ingest import ContractRecord, CreationTrace, RpcError, TransactionRecord
from uscscan.signatures import UpgradeFunctionDb

from . import audit_scenarios
from .contracts import LOGIC_PLAIN, META_V1, META_V2, UPGRADE_TO, addr, txhash, upgrade_calldata

GOLDEN = Path(__file__).parent / "golden" / "audit_findings.json"
PROXY = addr(0x88)
L1, L2, L3 = addr(0x101), addr(0x102), addr(0x103)


@pytest.fixture(scope="module")
def db():
    return UpgradeFunctionDb.load()


def _up(n, target, block, index=0, sender=addr(0xA), status=True, to=PROXY):
    return TransactionRecord(txhash(n), sender, to, upgrade_calldata(UPGRADE_TO, target), block, index,
                             status=status)


def test_events_are_time_ordered(db):
    chain = build_upgrade_chain(PROXY, [_up(2, L2, 200), _up(1, L1, 100)], db)
    assert [(e.new_logic, e.block) for e in chain.events] == [(L1, 100), (L2, 200)]


def test_failed_upgrade_goes_to_attempted(db):
    chain = build_upgrade_chain(PROXY, [_up(1, L1, 100, status=False)], db)
    assert chain.events == () and [e.new_logic for e in chain.attempted] == [L1]


def test_non_upgrade_traffic_is_ignored(db):
    tx = TransactionRecord(txhash(1), addr(1), PROXY, bytes.fromhex("a9059cbb") + bytes(64), 1, 0)
    other = _up(2, L1, 5, to=addr(0x99))
    short = TransactionRecord(txhash(3), addr(1), PROXY, b"\x01", 1, 0)
    assert len(build_upgrade_chain(PROXY, [tx, other, short], db)) == 0


def test_truncated_upgrade_is_flagged(db):
    tx = TransactionRecord(txhash(1), addr(1), PROXY, UPGRADE_TO.to_bytes(4, "big") + bytes(8), 1, 0)
    (event,) = build_upgrade_chain(PROXY, [tx], db).events
    assert event.undecodable and event.new_logic is None
    deferred: list[DeferredCheck] = []
    chain = build_upgrade_chain(PROXY, [tx], db)
    assert audit_logic_targets(chain, {}, db=db, deferred=deferred) == []
    assert deferred[0].check == "logic-target"


def test_chain_rejects_mixed_outcomes():
    ok = UpgradeEvent(1, 0, txhash(1), addr(1), L1, True)
    with pytest.raises(ValueError):
        UpgradeChain(PROXY, PatternClassification(Pattern.PROXY), attempted=(ok,))


# -- metamorphic chains -----------------------------------------------------


def _creation(code, block, create2=True, n=0):
    tx = txhash(0xC00 + block + n)
    rec = ContractRecord(PROXY, code, addr(0xFAC), tx, block, True)
    return rec, CreationTrace(tx, PROXY, ("CREATE2",) if create2 else ("CREATE",))


def test_metamorphic_redeploy_is_one_event():
    chain = build_metamorphic_chain(PROXY, [_creation(META_V2, 50), _creation(META_V1, 10)])
    (event,) = chain.events
    assert event.block == 50 and event.new_logic == code_hash(META_V2)


def test_single_creation_has_no_events():
    assert build_metamorphic_chain(PROXY, [_creation(META_V1, 10)]).events == ()


def test_redeploy_without_create2_is_excluded():
    chain = build_metamorphic_chain(PROXY, [_creation(META_V1, 10), _creation(META_V2, 50, False)])
    assert chain.events == () and "no CREATE2" in chain.notes[0]


def test_metamorphic_rejects_foreign_address():
    rec, trace = _creation(META_V1, 10)
    other = ContractRecord(addr(1), META_V1, addr(2), txhash(1), 2)
    with pytest.raises(ValueError):
        build_metamorphic_chain(PROXY, [(rec, trace), (other, None)])


# -- audits -----------------------------------------------------------------


def _chain(db, targets, senders=None, uups=False):
    senders = senders or [addr(0xA)] * len(targets)
    txs = [_up(i + 1, t, 100 + i, sender=s) for i, (t, s) in enumerate(zip(targets, senders))]
    return build_upgrade_chain(PROXY, txs, db, PatternClassification(Pattern.PROXY, uups=uups))


def test_adjacent_duplicate_is_same_address(db):
    findings = audit_logic_targets(_chain(db, [L1, L1]), {L1: LOGIC_PLAIN})
    assert [(f.category, f.chain_position) for f in findings] == [(Category.SAME_ADDRESS, 1)]


def test_return_to_older_address_is_not_same_address(db):
    findings = audit_logic_targets(_chain(db, [L1, L2, L1]), {L1: LOGIC_PLAIN, L2: LOGIC_PLAIN})
    assert findings == []


def test_eoa_target(db):
    (f,) = audit_logic_targets(_chain(db, [L1]), {L1: b""})
    assert f.category is Category.EOA_TARGET and f.severity is Severity.WARN


def test_uups_target_without_upgrade_function_is_critical(db):
    findings = audit_logic_targets(_chain(db, [L1], uups=True), {L1: LOGIC_PLAIN}, db=db)
    assert [(f.category, f.severity) for f in findings] == [
        (Category.NON_UPGRADEABLE_UUPS_TARGET, Severity.CRITICAL)]


def test_failed_lookup_is_deferred(db):
    def boom(address):
        raise RpcError("down")

    deferred: list = []
    assert audit_logic_targets(_chain(db, [L1]), boom, deferred=deferred) == []
    assert deferred[0].target == L1 and deferred[0].to_dict()["kind"] == "unresolved"


@pytest.mark.parametrize("senders, expected", [
    ("ABA", ["B"]),
    ("AAA", None),
    ("AB", ["A", "B"]),
    ("AABB", None),
])
def test_access_control_filter(db, senders, expected):
    who = {"A": addr(0xA), "B": addr(0xB)}
    chain = _chain(db, [L1, L2, L3, L1][:len(senders)], [who[s] for s in senders])
    findings = audit_access_control(chain)
    if expected is None:
        assert findings == []
    else:
        (f,) = findings
        assert f.evidence["one_shot_senders"] == [who[s] for s in expected]


def test_every_category_has_a_severity():
    assert set(SEVERITY) == set(Category)


def test_finding_needs_evidence():
    with pytest.raises(ValueError):
        SecurityFinding(Category.ZERO_ADDRESS, PROXY, {})


def test_audit_golden_file(db):
    golden = json.loads(GOLDEN.read_text())
    produced = audit_scenarios.run_all(db)
    key = lambda r: json.dumps(r, sort_keys=True)  # noqa: E731
    for scenario, findings in produced.items():
        assert sorted(audit_scenarios.summarize(findings), key=key) == sorted(golden[scenario], key=key)
    attempted = {ch.subject: len(ch.attempted) for ch in audit_scenarios.chains(db).values() if ch.attempted}
    assert attempted == golden["attempted"]
    covered = {row["category"] for k, rows in golden.items() if k != "attempted" for row in rows}
    assert covered == {c.value for c in Category}


def test_findings_are_deterministic(db):
    a = audit_scenarios.run_all(db)
    b = audit_scenarios.run_all(db)
    assert {k: [f.to_dict() for f in v] for k, v in a.items()} == {k: [f.to_dict() for f in v] for k, v in b.items()}


# -- properties -------------------------------------------------------------


def random_upgrade_log(rng: random.Random, n: int) -> list[TransactionRecord]:
    """Upgrade txs with colliding blocks, shared tx indices and a few failures."""
    targets = [addr(0x500 + k) for k in range(4)]
    txs = []
    for i in range(n):
        txs.append(_up(rng.getrandbits(64), rng.choice(targets), rng.randint(1, 8), rng.randint(0, 3),
                       sender=addr(0xA + rng.randint(0, 2)), status=rng.random() > 0.2))
    return txs


@settings(max_examples=200, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(0, 20))
def test_chain_is_permutation_invariant(rng, n):
    db = UpgradeFunctionDb.load()
    txs = random_upgrade_log(rng, n)
    base = build_upgrade_chain(PROXY, txs, db)
    shuffled = txs[:]
    rng.shuffle(shuffled)
    assert build_upgrade_chain(PROXY, shuffled, db) == base
    keys = [e.order_key for e in base.events]
    assert keys == sorted(keys)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([L1, L2, L3]), max_size=8))
def test_same_address_iff_adjacent_repeat(targets):
    db = UpgradeFunctionDb.load()
    chain = _chain(db, targets)
    code = {L1: LOGIC_PLAIN, L2: LOGIC_PLAIN, L3: LOGIC_PLAIN}
    positions = [f.chain_position for f in audit_logic_targets(chain, code)
                 if f.category is Category.SAME_ADDRESS]
    assert positions == [i for i in range(1, len(targets)) if targets[i] == targets[i - 1]]
