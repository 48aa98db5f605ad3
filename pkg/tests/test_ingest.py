from __future__ import annotations

import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uscscan._validation import normalize_address
from uscscan.ingest import (
    BEACON_SLOT,
    IMPLEMENTATION_SLOT,
    ContractRecord,
    CreationTrace,
    FixtureError,
    JsonRpcClient,
    MigrationRecord,
    RpcError,
    RpcTransportError,
    StateSnapshot,
    TokenList,
    TransactionRecord,
    creation_trace_has_create2,
    fetch_storage_sample,
    load_fixtures,
    parse_announcement,
    read_fixtures,
    resolve_logic_address,
    write_fixtures,
)

from . import oracles
from .contracts import LOGIC_PLAIN, addr, txhash, word
from .rpc_stub import RpcStub

PROXY = addr(0x77)
LOGIC = addr(0x78)
BEACON = addr(0x79)
EOA = addr(0x7A)


def test_slot_constants_match_oracle():
    assert IMPLEMENTATION_SLOT == int.from_bytes(
        oracles.keccak256(b"eip1967.proxy.implementation"), "big") - 1
    assert BEACON_SLOT == int.from_bytes(oracles.keccak256(b"eip1967.proxy.beacon"), "big") - 1


# -- fixture files ----------------------------------------------------------


def _contract_line(**over):
    row = {"address": addr(1), "bytecode": "0x6001", "creator": addr(2),
           "creation_tx": txhash(3), "creation_block": 4}
    row.update(over)
    return json.dumps(row) + "\n"


def test_one_line_contracts_file():
    (rec,) = read_fixtures([_contract_line()], "contracts")
    assert rec == ContractRecord(addr(1), b"\x60\x01", addr(2), txhash(3), 4)


def test_empty_file_gives_no_records(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text("")
    assert load_fixtures(p, "contracts") == []


def test_odd_hex_reports_line_number():
    with pytest.raises(FixtureError, match="line 2"):
        read_fixtures([_contract_line(), _contract_line(bytecode="0x600")], "contracts")


def test_unknown_kind():
    with pytest.raises(ValueError):
        read_fixtures([], "blocks")


def test_mixed_case_addresses_normalize():
    upper = "0x" + "AB" * 20
    (rec,) = read_fixtures([_contract_line(address=upper, creator=upper.lower())], "contracts")
    assert rec.address == rec.creator == normalize_address(upper)


def test_migrations_csv_with_header_and_timestamps():
    text = ("old_address,new_address,announcement_time,note\n"
            f"{addr(1)},{addr(2)},120,moved\n"
            "# comment\n"
            f"{addr(3)},{addr(4)},2021-03-01T00:00:00Z,\n")
    a, b = read_fixtures(io.StringIO(text), "migrations")
    assert (a.announcement_time, a.time_unit, a.note) == (120, "block", "moved")
    assert (b.announcement_time, b.time_unit) == (1614556800, "timestamp")


def test_migration_to_same_address_is_rejected():
    with pytest.raises(FixtureError):
        read_fixtures([f"{addr(1)},{addr(1)},5\n"], "migrations")


def test_parse_announcement_naive_time_is_utc():
    assert parse_announcement("1970-01-02T00:00:00") == (86400, "timestamp")


def test_tokenlist_document():
    doc = {"name": "list", "tokens": [{"address": "0x" + "CD" * 20, "symbol": "X"}]}
    (tl,) = read_fixtures([json.dumps(doc)], "tokenlist")
    assert tl == TokenList("list", frozenset({"0x" + "cd" * 20}))


def test_traces_and_create2():
    line = json.dumps({"tx_hash": txhash(1), "created_address": addr(1), "opcodes": ["call", "CREATE2"]})
    (trace,) = read_fixtures([line], "traces")
    assert creation_trace_has_create2(trace)
    assert not creation_trace_has_create2(CreationTrace(txhash(1), addr(1), ("CREATE",)))
    assert not creation_trace_has_create2(CreationTrace(txhash(1), addr(1), ()))
    assert not creation_trace_has_create2(None)


_addr = st.integers(0, 2**160 - 1).map(normalize_address)
_hash = st.binary(min_size=32, max_size=32).map(lambda b: "0x" + b.hex())
_contracts = st.builds(ContractRecord, _addr, st.binary(max_size=64), _addr, _hash,
                       st.integers(0, 10**8), st.booleans(), st.integers(0, 500))
_txs = st.builds(TransactionRecord, _hash, _addr, st.one_of(st.none(), _addr), st.binary(max_size=100),
                 st.integers(0, 10**8), st.integers(0, 500), st.booleans(),
                 st.one_of(st.none(), st.booleans()), st.one_of(st.none(), st.integers(0, 2**40)))
_traces = st.builds(CreationTrace, _hash, _addr,
                    st.lists(st.sampled_from(["CALL", "CREATE", "CREATE2", "SSTORE"]), max_size=6)
                    .map(tuple))


@settings(max_examples=60, deadline=None)
@given(st.lists(_contracts, max_size=5))
def test_contracts_round_trip(records):
    assert read_fixtures(io.StringIO(write_fixtures(records, "contracts")), "contracts") == records


@settings(max_examples=60, deadline=None)
@given(st.lists(_txs, max_size=5))
def test_transactions_round_trip(records):
    assert read_fixtures(io.StringIO(write_fixtures(records, "transactions")), "transactions") == records


@settings(max_examples=60, deadline=None)
@given(st.lists(_traces, max_size=5))
def test_traces_round_trip(records):
    assert read_fixtures(io.StringIO(write_fixtures(records, "traces")), "traces") == records


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(_addr, _addr), max_size=5), st.integers(0, 2**33),
       st.sampled_from(["block", "timestamp"]))
def test_migrations_round_trip(pairs, when, unit):
    records = [MigrationRecord(a, b, when, "", unit) for a, b in pairs if a != b]
    out = read_fixtures(io.StringIO(write_fixtures(records, "migrations")), "migrations")
    assert out == records


@settings(max_examples=40, deadline=None)
@given(st.frozensets(_addr, max_size=5), st.text(alphabet="abcdef ", max_size=8))
def test_tokenlist_round_trip(addresses, name):
    records = [TokenList(name, addresses)]
    assert read_fixtures(io.StringIO(write_fixtures(records, "tokenlist")), "tokenlist") == records


# -- state access -----------------------------------------------------------


def _snapshot(**storage) -> StateSnapshot:
    return StateSnapshot({
        PROXY: {"code": "0x6001", "storage": storage},
        LOGIC: {"code": "0x" + LOGIC_PLAIN.hex()},
        BEACON: {"code": "0x6002", "calls": {"0x5c60da1b": word(LOGIC)}},
    })


def test_storage_sample_fresh_contract_is_zero():
    sample = fetch_storage_sample(_snapshot(), LOGIC, range(32))
    assert sample.all_zero and sample.slots == list(range(32))


def test_storage_sample_with_owner_at_151():
    snap = StateSnapshot({LOGIC: {"storage": {"151": word(EOA)}}})
    assert not fetch_storage_sample(snap, LOGIC, [0, 151]).all_zero


def test_empty_slot_list():
    sample = fetch_storage_sample(_snapshot(), LOGIC, [])
    assert sample.all_zero and sample.slots == []


def test_resolve_via_implementation_slot():
    r = resolve_logic_address(_snapshot(**{hex(IMPLEMENTATION_SLOT): word(LOGIC)}), PROXY)
    assert (r.address, r.probe) == (LOGIC, "implementation-slot")


def test_resolve_via_beacon():
    r = resolve_logic_address(_snapshot(**{hex(BEACON_SLOT): word(BEACON)}), PROXY)
    assert (r.address, r.probe) == (LOGIC, "beacon")


def test_resolve_via_slot0_requires_code():
    assert resolve_logic_address(_snapshot(**{"0x0": word(LOGIC)}), PROXY).probe == "slot0"
    assert resolve_logic_address(_snapshot(**{"0x0": word(EOA)}), PROXY) is None


def test_resolve_nothing():
    assert resolve_logic_address(_snapshot(), PROXY) is None


def test_standard_slot_wins_over_slot0():
    other = addr(0x99)
    snap = _snapshot(**{hex(IMPLEMENTATION_SLOT): word(LOGIC), "0x0": word(other)})
    snap.set_code(other, b"\x00")
    for _ in range(3):
        assert resolve_logic_address(snap, PROXY).address == LOGIC


def test_snapshot_json_round_trip():
    snap = _snapshot(**{hex(IMPLEMENTATION_SLOT): word(LOGIC)})
    again = StateSnapshot(snap.to_json())
    assert again.to_json() == snap.to_json()


# -- JSON-RPC client against a local endpoint -------------------------------


def test_rpc_reads_code_and_storage():
    snap = _snapshot(**{hex(IMPLEMENTATION_SLOT): word(LOGIC)})
    with RpcStub(snap) as stub:
        client = JsonRpcClient(stub.url)
        assert client.get_code(LOGIC) == LOGIC_PLAIN
        assert client.get_code(EOA) == b""
        assert client.get_storage_at(PROXY, IMPLEMENTATION_SLOT) == bytes.fromhex(word(LOGIC)[2:])
        assert resolve_logic_address(client, PROXY).address == LOGIC
        n = len(stub.requests)
        client.get_code(LOGIC)
        assert len(stub.requests) == n  # cached


def test_rpc_retries_transient_failures():
    with RpcStub(_snapshot(), fail_first=2) as stub:
        client = JsonRpcClient(stub.url, backoff=0.01)
        assert client.get_code(LOGIC) == LOGIC_PLAIN
        assert len(stub.requests) == 3


def test_rpc_gives_up_with_retriable_error():
    with RpcStub(_snapshot(), fail_first=100, status=429) as stub:
        client = JsonRpcClient(stub.url, backoff=0.001, max_attempts=3)
        with pytest.raises(RpcTransportError) as info:
            client.get_code(LOGIC)
        assert info.value.retriable and len(stub.requests) == 3


def test_rpc_error_object_is_not_retried():
    with RpcStub(_snapshot()) as stub:
        client = JsonRpcClient(stub.url, backoff=0.001)
        with pytest.raises(RpcError) as info:
            client._post("eth_unknown", [])
        assert not info.value.retriable and len(stub.requests) == 1


def test_unreachable_endpoint_is_retriable():
    client = JsonRpcClient("http://127.0.0.1:9", max_attempts=2, backoff=0.001, timeout=0.5)
    with pytest.raises(RpcTransportError) as info:
        client.get_code(LOGIC)
    assert info.value.retriable


def test_rpc_client_is_thread_safe():
    from concurrent.futures import ThreadPoolExecutor

    snap = _snapshot(**{hex(s): word(addr(s + 1)) for s in range(20)})
    with RpcStub(snap) as stub:
        client = JsonRpcClient(stub.url, max_in_flight=4)
        with ThreadPoolExecutor(8) as pool:
            words = list(pool.map(lambda s: client.get_storage_at(PROXY, s % 20), range(80)))
    assert words == [bytes.fromhex(word(addr(s % 20 + 1))[2:]) for s in range(80)]
