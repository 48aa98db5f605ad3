"""Upgrade-function selector database and upgrade-calldata decoding."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from Crypto.Hash import keccak

from ._validation import address_from_word, parse_hex
from .bytecode import BytecodeFeatures, format_selector

KEYWORDS = ("upgrade", "update", "change", "replace", "set")
RELATED_WORDS = (
    "contract", "implementation", "logic", "target", "code",
    "module", "address", "proxy", "delegate",
)
ALLOWLIST_VERSION = "related-words-v1"
MANUAL = "manual"

_SIG = re.compile(r"^([A-Za-z_$][A-Za-z0-9_$]*)\((.*)\)$")
_UINT = re.compile(r"^u?int(\d*)$")
_BYTES_N = re.compile(r"^bytes(\d+)$")


class SignatureError(ValueError):
    """Malformed function signature."""


class SelectorCollisionError(ValueError):
    """Two different signatures share a 4-byte selector."""


class NotACallError(ValueError):
    """Calldata shorter than a selector."""


class TruncatedCalldataError(ValueError):
    """Argument area shorter than the signature's head; carries the partial decode."""

    def __init__(self, message: str, partial: "DecodedUpgradeCall"):
        super().__init__(message)
        self.partial = partial


def keccak256(data: bytes) -> bytes:
    return keccak.new(digest_bits=256, data=data).digest()


def _check_type(name: str) -> str:
    if name in ("address", "bool", "bytes", "string"):
        return name
    m = _UINT.match(name)
    if m:
        bits = m.group(1)
        if not bits:  # uint / int alias
            return name + "256"
        if int(bits) % 8 == 0 and 8 <= int(bits) <= 256:
            return name
    m = _BYTES_N.match(name)
    if m and 1 <= int(m.group(1)) <= 32:
        return name
    raise SignatureError(f"unsupported ABI type {name!r}")


@dataclass(frozen=True)
class FunctionSignature:
    name: str
    param_types: tuple[str, ...] = ()

    @property
    def canonical(self) -> str:
        return f"{self.name}({','.join(self.param_types)})"

    @property
    def address_param_indices(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.param_types) if t == "address")

    @classmethod
    def parse(cls, text: str) -> "FunctionSignature":
        m = _SIG.match("".join(text.split()))
        if not m:
            raise SignatureError(f"malformed signature {text!r}")
        name, args = m.groups()
        types = tuple(_check_type(t) for t in args.split(",")) if args else ()
        return cls(name, types)

    def __str__(self) -> str:
        return self.canonical


def keccak_selector(sig: FunctionSignature | str) -> int:
    """First four bytes of keccak-256 over the canonical signature."""
    if isinstance(sig, str):
        sig = FunctionSignature.parse(sig)
    return int.from_bytes(keccak256(sig.canonical.encode("ascii"))[:4], "big")


@dataclass(frozen=True)
class KeywordRules:
    keywords: tuple[str, ...] = KEYWORDS
    related_words: tuple[str, ...] = RELATED_WORDS
    manual: frozenset[str] = frozenset()  # canonical signatures
    version: str = ALLOWLIST_VERSION

    def keyword_of(self, name: str) -> str | None:
        lowered = name.lower()
        for kw in self.keywords:
            if kw in lowered:
                return kw
        return None

    def is_related(self, name: str) -> bool:
        lowered = name.lower()
        return any(w in lowered for w in self.related_words)

    def retains(self, sig: FunctionSignature) -> str | None:
        """Keyword the signature is filed under, or None if it is dropped."""
        if sig.canonical in self.manual:
            return MANUAL
        kw = self.keyword_of(sig.name)
        if kw is not None and self.is_related(sig.name):
            return kw
        return None


@dataclass(frozen=True)
class UpgradeEntry:
    signature: FunctionSignature
    keyword: str
    address_param_indices: tuple[int, ...]


@dataclass(frozen=True)
class UpgradeFunctionDb:
    entries: Mapping[int, UpgradeEntry]
    rules: KeywordRules = field(default_factory=KeywordRules)

    def __contains__(self, selector: int) -> bool:
        return selector in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, selector: int) -> UpgradeEntry | None:
        return self.entries.get(selector)

    def selectors(self) -> frozenset[int]:
        return frozenset(self.entries)

    def verify(self) -> None:
        """Re-derive every key from its signature."""
        for selector, entry in self.entries.items():
            if keccak_selector(entry.signature) != selector:
                raise SelectorCollisionError(
                    f"{entry.signature} does not hash to {format_selector(selector)}"
                )

    @property
    def version(self) -> str:
        digest = hashlib.sha256()
        for selector in sorted(self.entries):
            entry = self.entries[selector]
            digest.update(f"{selector:08x}:{entry.signature}:{entry.keyword}\n".encode())
        digest.update(self.rules.version.encode())
        digest.update(",".join(self.rules.related_words).encode())
        return digest.hexdigest()[:16]

    @classmethod
    def load(cls, path: str | Path | None = None, rules: KeywordRules | None = None):
        """Compile a db file; the bundled default when ``path`` is None."""
        if path is None:
            text = resources.files("uscscan.data").joinpath("upgrade_functions.txt").read_text()
        else:
            text = Path(path).read_text()
        signatures, manual = parse_signature_file(text.splitlines())
        rules = rules or KeywordRules()
        rules = KeywordRules(rules.keywords, rules.related_words, rules.manual | manual, rules.version)
        return compile_db(signatures, rules)


def parse_signature_file(lines: Iterable[str]) -> tuple[list[FunctionSignature], frozenset[str]]:
    """Parse the db text format: one signature per line, ``#`` comments,
    ``!`` marks a manual-allowlist entry."""
    signatures: list[FunctionSignature] = []
    manual: set[str] = set()
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        is_manual = text.startswith("!")
        try:
            sig = FunctionSignature.parse(text.lstrip("!"))
        except SignatureError as exc:
            raise SignatureError(f"line {lineno}: {exc}") from None
        signatures.append(sig)
        if is_manual:
            manual.add(sig.canonical)
    return signatures, frozenset(manual)


def read_signature_dump(path: str | Path) -> tuple[list[FunctionSignature], int]:
    """Signatures from a JSON Lines 4-byte-directory dump.

    Entries using types outside the supported subset are skipped; the
    number skipped is returned alongside.
    """
    out: list[FunctionSignature] = []
    skipped = 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                out.append(FunctionSignature.parse(json.loads(line)["signature"]))
            except (SignatureError, KeyError, json.JSONDecodeError):
                skipped += 1
    return out, skipped


def compile_db(
    signatures: Iterable[FunctionSignature], rules: KeywordRules | None = None
) -> UpgradeFunctionDb:
    rules = rules or KeywordRules()
    entries: dict[int, UpgradeEntry] = {}
    for sig in signatures:
        keyword = rules.retains(sig)
        if keyword is None:
            continue
        selector = keccak_selector(sig)
        existing = entries.get(selector)
        if existing is not None:
            if existing.signature != sig:
                raise SelectorCollisionError(
                    f"{format_selector(selector)}: {existing.signature} vs {sig}"
                )
            continue
        entries[selector] = UpgradeEntry(sig, keyword, sig.address_param_indices)
    return UpgradeFunctionDb(entries, rules)


@dataclass(frozen=True)
class UpgradeMatches:
    local: frozenset[int] = frozenset()
    outbound: frozenset[int] = frozenset()

    def to_dict(self) -> dict:
        return {
            "local": [format_selector(s) for s in sorted(self.local)],
            "outbound": [format_selector(s) for s in sorted(self.outbound)],
        }


def match_upgrade_selectors(features: BytecodeFeatures, db: UpgradeFunctionDb) -> UpgradeMatches:
    keys = db.selectors()
    return UpgradeMatches(features.local_selectors & keys, features.outbound_selectors & keys)


@dataclass(frozen=True)
class DecodedUpgradeCall:
    selector: int
    signature: FunctionSignature | None
    new_logic_candidates: tuple[str, ...]
    raw_words: tuple[bytes, ...]


def decode_upgrade_call(calldata: bytes | str, db: UpgradeFunctionDb) -> DecodedUpgradeCall:
    """Selector plus address arguments of an upgrade call.

    Only head words are read: a dynamic parameter contributes its offset
    word and nothing else.
    """
    data = parse_hex(calldata, "calldata")
    if len(data) < 4:
        raise NotACallError(f"calldata of {len(data)} bytes has no selector")
    selector = int.from_bytes(data[:4], "big")
    args = data[4:]
    words = tuple(args[k:k + 32] for k in range(0, len(args) - len(args) % 32, 32))
    entry = db.get(selector)
    if entry is None:
        return DecodedUpgradeCall(selector, None, (), words)
    addresses = tuple(
        address_from_word(words[i]) for i in entry.address_param_indices if i < len(words)
    )
    decoded = DecodedUpgradeCall(selector, entry.signature, addresses, words)
    needed = len(entry.signature.param_types)
    if len(words) < needed:
        raise TruncatedCalldataError(
            f"{entry.signature} needs {needed} argument words, calldata has {len(words)}",
            decoded,
        )
    return decoded
