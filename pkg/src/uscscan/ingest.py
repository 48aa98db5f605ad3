"""Fixture loaders, chain-state access (JSON-RPC or offline snapshot) and
logic-address resolution."""

from __future__ import annotations

import csv
import io
import json
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Protocol

import requests

from ._validation import (
    ZERO_ADDRESS,
    address_from_word,
    normalize_address,
    normalize_hash,
    parse_hex,
)
from .signatures import keccak256

IMPLEMENTATION_SLOT = 0x360894A13BA1A3210667C828492DB98DCA3E2076CC3735A920A3CA505D382BBC
BEACON_SLOT = 0xA3F0AD74E5423AEBFD80D3EF4346578335A9A72AEAEE59FF6CB3582B35133D50
ADMIN_SLOT = 0xB53127684A568B3173AE13B9F8A6016E243E63B6E8EE1178D6A717850B5D6103
IMPLEMENTATION_CALL = bytes.fromhex("5c60da1b")  # implementation()

DEFAULT_SAMPLE_SLOTS: tuple[int, ...] = tuple(range(32)) + (ADMIN_SLOT, IMPLEMENTATION_SLOT)

ZERO_WORD = b"\0" * 32


def eip1967_slot(label: str) -> int:
    """keccak256(label) - 1, the standard proxy slot derivation."""
    return int.from_bytes(keccak256(label.encode()), "big") - 1


# -- records ----------------------------------------------------------------


@dataclass(frozen=True)
class ContractRecord:
    address: str
    bytecode: bytes
    creator: str
    creation_tx: str
    creation_block: int
    created_by_contract: bool = False
    creation_tx_index: int = 0

    def __post_init__(self):
        if self.creation_block < 0:
            raise ValueError("creation_block must be >= 0")


@dataclass(frozen=True)
class TransactionRecord:
    hash: str
    sender: str
    to: str | None
    input: bytes
    block: int
    tx_index: int
    status: bool = True
    # Unknown unless the source supplied it; see classifier direction rule.
    caller_is_contract: bool | None = None
    timestamp: int | None = None


@dataclass(frozen=True)
class CreationTrace:
    tx_hash: str
    created_address: str
    opcodes: tuple[str, ...]


@dataclass(frozen=True)
class MigrationRecord:
    old_address: str
    new_address: str
    announcement_time: int
    note: str = ""
    # "block" or "timestamp"; the comparison happens in whichever was supplied.
    time_unit: str = "block"

    def __post_init__(self):
        if self.old_address == self.new_address:
            raise ValueError("migration old and new address must differ")


@dataclass(frozen=True)
class StorageSample:
    address: str
    words: dict[int, bytes] = field(default_factory=dict)

    @property
    def all_zero(self) -> bool:
        return not any(any(w) for w in self.words.values())

    @property
    def slots(self) -> list[int]:
        return sorted(self.words)


@dataclass(frozen=True)
class TokenList:
    source: str
    addresses: frozenset[str]


def creation_trace_has_create2(trace: CreationTrace | None) -> bool:
    return trace is not None and "CREATE2" in trace.opcodes


# -- fixture files ----------------------------------------------------------

KINDS = ("contracts", "transactions", "traces", "migrations", "tokenlist")


class FixtureError(ValueError):
    def __init__(self, kind: str, line: int, message: str):
        super().__init__(f"{kind}: line {line}: {message}")
        self.kind = kind
        self.line = line


def _int(value) -> int:
    if isinstance(value, bool):
        raise ValueError("expected integer")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        return int(value, 0)
    raise ValueError(f"expected integer, got {value!r}")


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if value in (0, 1):
        return bool(value)
    if isinstance(value, str) and value.lower() in ("true", "false", "0x1", "0x0", "1", "0"):
        return value.lower() in ("true", "0x1", "1")
    raise ValueError(f"expected boolean, got {value!r}")


def _contract(obj: dict) -> ContractRecord:
    return ContractRecord(
        address=normalize_address(obj["address"]),
        bytecode=parse_hex(obj.get("bytecode") or "0x", "bytecode"),
        creator=normalize_address(obj["creator"]),
        creation_tx=normalize_hash(obj["creation_tx"]),
        creation_block=_int(obj["creation_block"]),
        created_by_contract=_bool(obj.get("created_by_contract", False)),
        creation_tx_index=_int(obj.get("creation_tx_index", 0)),
    )


def _transaction(obj: dict) -> TransactionRecord:
    flag = obj.get("caller_is_contract")
    ts = obj.get("timestamp")
    return TransactionRecord(
        hash=normalize_hash(obj["hash"]),
        sender=normalize_address(obj["from"]),
        to=normalize_address(obj["to"]) if obj.get("to") else None,
        input=parse_hex(obj.get("input") or "0x", "input"),
        block=_int(obj["block"]),
        tx_index=_int(obj["tx_index"]),
        status=_bool(obj.get("status", True)),
        caller_is_contract=None if flag is None else _bool(flag),
        timestamp=None if ts is None else _int(ts),
    )


def _trace(obj: dict) -> CreationTrace:
    ops = obj["opcodes"]
    if not isinstance(ops, list) or not all(isinstance(o, str) for o in ops):
        raise ValueError("opcodes must be a list of names")
    return CreationTrace(
        tx_hash=normalize_hash(obj["tx_hash"]),
        created_address=normalize_address(obj["created_address"]),
        opcodes=tuple(o.upper() for o in ops),
    )


def parse_announcement(text: str) -> tuple[int, str]:
    """Block number, or an ISO-8601 date/time converted to a unix timestamp."""
    text = text.strip()
    try:
        return int(text, 0), "block"
    except ValueError:
        pass
    moment = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return int(moment.timestamp()), "timestamp"


def _migration(row: list[str]) -> MigrationRecord:
    if len(row) < 3:
        raise ValueError("expected old_address,new_address,announcement_time[,note]")
    when, unit = parse_announcement(row[2])
    return MigrationRecord(
        old_address=normalize_address(row[0].strip()),
        new_address=normalize_address(row[1].strip()),
        announcement_time=when,
        note=",".join(row[3:]).strip(),
        time_unit=unit,
    )


_JSONL = {"contracts": _contract, "transactions": _transaction, "traces": _trace}


def read_fixtures(stream: Iterable[str], kind: str) -> list:
    """Parse fixture text of ``kind`` from an iterable of lines."""
    if kind not in KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")
    if kind == "tokenlist":
        text = "".join(stream)
        if not text.strip():
            return []
        try:
            doc = json.loads(text)
            addresses = frozenset(normalize_address(t["address"]) for t in doc.get("tokens", []))
            return [TokenList(str(doc.get("name", "")), addresses)]
        except (ValueError, KeyError, TypeError) as exc:
            raise FixtureError(kind, 1, str(exc)) from None
    if kind == "migrations":
        out = []
        for lineno, row in enumerate(csv.reader(stream), 1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "old_address":
                continue
            try:
                out.append(_migration(row))
            except (ValueError, KeyError) as exc:
                raise FixtureError(kind, lineno, str(exc)) from None
        return out
    parse = _JSONL[kind]
    out = []
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            out.append(parse(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise FixtureError(kind, lineno, str(exc)) from None
    return out


def load_fixtures(path: str | Path, kind: str) -> list:
    if kind not in KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")
    with open(path, newline="") as fh:
        return read_fixtures(fh, kind)


def _hex(data: bytes) -> str:
    return "0x" + data.hex()


def record_to_json(record) -> dict:
    if isinstance(record, ContractRecord):
        return {
            "address": record.address,
            "bytecode": _hex(record.bytecode),
            "creator": record.creator,
            "creation_tx": record.creation_tx,
            "creation_block": record.creation_block,
            "created_by_contract": record.created_by_contract,
            "creation_tx_index": record.creation_tx_index,
        }
    if isinstance(record, TransactionRecord):
        obj = {
            "hash": record.hash,
            "from": record.sender,
            "to": record.to,
            "input": _hex(record.input),
            "block": record.block,
            "tx_index": record.tx_index,
            "status": record.status,
        }
        if record.caller_is_contract is not None:
            obj["caller_is_contract"] = record.caller_is_contract
        if record.timestamp is not None:
            obj["timestamp"] = record.timestamp
        return obj
    if isinstance(record, CreationTrace):
        return {
            "tx_hash": record.tx_hash,
            "created_address": record.created_address,
            "opcodes": list(record.opcodes),
        }
    raise TypeError(f"no JSON form for {type(record).__name__}")


def write_fixtures(records: Iterable, kind: str) -> str:
    """Canonical text for ``records``; ``read_fixtures`` inverts it."""
    if kind not in KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}")
    records = list(records)
    if kind == "tokenlist":
        if not records:
            return ""
        (tl,) = records
        return json.dumps(
            {"name": tl.source, "tokens": [{"address": a} for a in sorted(tl.addresses)]},
            indent=2,
        ) + "\n"
    if kind == "migrations":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["old_address", "new_address", "announcement_time", "note"])
        for m in records:
            when = (
                str(m.announcement_time)
                if m.time_unit == "block"
                else datetime.fromtimestamp(m.announcement_time, timezone.utc).isoformat()
            )
            writer.writerow([m.old_address, m.new_address, when, m.note])
        return buf.getvalue()
    return "".join(json.dumps(record_to_json(r), sort_keys=True) + "\n" for r in records)


# -- chain state ------------------------------------------------------------


class RpcError(RuntimeError):
    """JSON-RPC level failure (error object or malformed result)."""

    retriable = False


class RpcTransportError(RpcError):
    """Network failure; safe to retry."""

    retriable = True


class StateSource(Protocol):
    def get_code(self, address: str) -> bytes: ...

    def get_storage_at(self, address: str, slot: int) -> bytes: ...

    def call(self, address: str, data: bytes) -> bytes: ...


class JsonRpcClient:
    """Minimal eth_* client with retry/backoff, bounded concurrency and a
    per-run cache keyed by (method, params)."""

    def __init__(
        self,
        url: str,
        block: str = "latest",
        max_attempts: int = 5,
        backoff: float = 0.25,
        max_in_flight: int = 8,
        timeout: float = 10.0,
    ):
        self.url = url
        self.block = block
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._cache: dict[tuple, bytes] = {}
        self._lock = threading.Lock()
        self._ids = iter(range(1, 1 << 62))
        self._session = requests.Session()

    def _post(self, method: str, params: list):
        with self._lock:
            req_id = next(self._ids)
        payload = {"jsonrpc": "2.0", "id": req_id, "method": method, "params": params}
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._session.post(self.url, json=payload, timeout=self.timeout)
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = RpcTransportError(f"{method}: HTTP {resp.status_code}")
                    continue
                body = resp.json()
            except (requests.RequestException, ValueError) as exc:
                last = RpcTransportError(f"{method}: {exc}")
                continue
            if "error" in body:
                raise RpcError(f"{method}: {body['error']}")
            return body.get("result")
        assert last is not None
        raise last

    def _cached(self, key: tuple, fetch) -> bytes:
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = fetch()
        with self._lock:
            self._cache.setdefault(key, value)
        return value

    def _hex_result(self, method: str, params: list) -> bytes:
        result = self._post(method, params)
        if not isinstance(result, str):
            raise RpcError(f"{method}: unexpected result {result!r}")
        try:
            return parse_hex(result)
        except ValueError as exc:
            raise RpcError(f"{method}: {exc}") from None

    def get_code(self, address: str) -> bytes:
        address = normalize_address(address)
        return self._cached(
            ("code", address),
            lambda: self._hex_result("eth_getCode", [address, self.block]),
        )

    def get_storage_at(self, address: str, slot: int) -> bytes:
        address = normalize_address(address)
        return self._cached(
            ("storage", address, slot),
            lambda: self._hex_result(
                "eth_getStorageAt", [address, hex(slot), self.block]
            ).rjust(32, b"\0"),
        )

    def call(self, address: str, data: bytes) -> bytes:
        address = normalize_address(address)
        return self._cached(
            ("call", address, data),
            lambda: self._hex_result("eth_call", [{"to": address, "data": _hex(data)}, self.block]),
        )


class StateSnapshot:
    """Offline stand-in for an RPC endpoint.

    JSON layout::

        {"0xaddr": {"code": "0x...", "storage": {"0x0": "0x..."},
                    "calls": {"0x5c60da1b": "0x..."}}}
    """

    def __init__(self, accounts: dict | None = None):
        self._accounts: dict[str, dict] = {}
        for addr, acct in (accounts or {}).items():
            self._accounts[normalize_address(addr)] = {
                "code": parse_hex(acct.get("code") or "0x"),
                "storage": {
                    _int(k): parse_hex(v).rjust(32, b"\0")
                    for k, v in (acct.get("storage") or {}).items()
                },
                "calls": {
                    parse_hex(k): parse_hex(v) for k, v in (acct.get("calls") or {}).items()
                },
            }

    @classmethod
    def load(cls, path: str | Path) -> "StateSnapshot":
        with open(path) as fh:
            return cls(json.load(fh))

    def to_json(self) -> dict:
        return {
            addr: {
                "code": _hex(a["code"]),
                "storage": {hex(k): _hex(v) for k, v in sorted(a["storage"].items())},
                "calls": {_hex(k): _hex(v) for k, v in sorted(a["calls"].items())},
            }
            for addr, a in sorted(self._accounts.items())
        }

    def set_code(self, address: str, code: bytes) -> None:
        acct = self._accounts.setdefault(
            normalize_address(address), {"code": b"", "storage": {}, "calls": {}}
        )
        acct["code"] = bytes(code)

    def get_code(self, address: str) -> bytes:
        return self._accounts.get(normalize_address(address), {}).get("code", b"")

    def get_storage_at(self, address: str, slot: int) -> bytes:
        acct = self._accounts.get(normalize_address(address))
        if acct is None:
            return ZERO_WORD
        return acct["storage"].get(slot, ZERO_WORD)

    def call(self, address: str, data: bytes) -> bytes:
        acct = self._accounts.get(normalize_address(address))
        if acct is None:
            return b""
        return acct["calls"].get(bytes(data), b"")


def fetch_code(source: StateSource, address: str) -> bytes:
    return source.get_code(address)


def fetch_storage_sample(
    source: StateSource, address: str, slots: Iterable[int] = DEFAULT_SAMPLE_SLOTS
) -> StorageSample:
    """Read every slot; any failure propagates, so no partial sample escapes."""
    address = normalize_address(address)
    words = {slot: source.get_storage_at(address, slot) for slot in slots}
    return StorageSample(address, words)


@dataclass(frozen=True)
class LogicResolution:
    address: str
    probe: str  # "implementation-slot" | "beacon" | "slot0"


def _word_address(word: bytes) -> str | None:
    if not any(word):
        return None
    addr = address_from_word(word)
    return None if addr == ZERO_ADDRESS else addr


def resolve_logic_address(source: StateSource, proxy: str) -> LogicResolution | None:
    """Implementation behind ``proxy``.

    Probes, first hit wins: the standard implementation slot; the standard
    beacon slot followed by ``implementation()`` on the beacon; slot 0 if it
    holds an address that has code.
    """
    proxy = normalize_address(proxy)
    addr = _word_address(source.get_storage_at(proxy, IMPLEMENTATION_SLOT))
    if addr:
        return LogicResolution(addr, "implementation-slot")

    beacon = _word_address(source.get_storage_at(proxy, BEACON_SLOT))
    if beacon:
        try:
            ret = source.call(beacon, IMPLEMENTATION_CALL)
        except RpcTransportError:
            raise
        except RpcError:
            ret = b""
        if len(ret) >= 32:
            addr = _word_address(ret[:32])
            if addr:
                return LogicResolution(addr, "beacon")

    addr = _word_address(source.get_storage_at(proxy, 0))
    if addr and source.get_code(addr):
        return LogicResolution(addr, "slot0")
    return None
