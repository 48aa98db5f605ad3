"""Input normalisation shared by loaders, estimators and the CLI."""

from __future__ import annotations

import re

ZERO_ADDRESS = "0x" + "00" * 20

_HEX = re.compile(r"^(0x)?[0-9a-fA-F]*$")


def parse_hex(value: str | bytes | bytearray, what: str = "hex") -> bytes:
    """Bytes from a 0x-prefixed (or bare) hex string; bytes pass through."""
    if isinstance(value, (bytes, bytearray)):
        return bytes(value)
    if not isinstance(value, str):
        raise TypeError(f"{what}: expected hex string or bytes, got {type(value).__name__}")
    text = value.strip()
    if not _HEX.match(text):
        raise ValueError(f"{what}: not a hex string: {value[:20]!r}")
    if text[:2].lower() == "0x":
        text = text[2:]
    if len(text) % 2:
        raise ValueError(f"{what}: odd-length hex string")
    return bytes.fromhex(text)


def normalize_address(value: str | bytes | int) -> str:
    """Lowercase 0x-prefixed 20-byte address."""
    if isinstance(value, int):
        if not 0 <= value < 1 << 160:
            raise ValueError(f"address out of range: {value}")
        return "0x" + value.to_bytes(20, "big").hex()
    raw = parse_hex(value, "address")
    if len(raw) != 20:
        raise ValueError(f"address must be 20 bytes, got {len(raw)}")
    return "0x" + raw.hex()


def normalize_hash(value: str | bytes) -> str:
    raw = parse_hex(value, "hash")
    if len(raw) != 32:
        raise ValueError(f"hash must be 32 bytes, got {len(raw)}")
    return "0x" + raw.hex()


def address_from_word(word: bytes) -> str:
    """Low 20 bytes of a 32-byte word as an address."""
    return "0x" + word[-20:].rjust(20, b"\0").hex()


def parse_selector(value: str | int | bytes) -> int:
    if isinstance(value, int):
        if not 0 <= value < 1 << 32:
            raise ValueError(f"selector out of range: {value}")
        return value
    raw = parse_hex(value, "selector")
    if len(raw) != 4:
        raise ValueError("selector must be 4 bytes")
    return int.from_bytes(raw, "big")


def check_bytecode(value) -> bytes:
    """Runtime code from bytes or hex; ``None`` means no code."""
    if value is None:
        return b""
    return parse_hex(value, "bytecode")
