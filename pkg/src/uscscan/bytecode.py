"""Disassembly of EVM runtime code and extraction of the opcode/selector
evidence used by the pattern rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

from . import opcodes as op

# Versioned so reports can fingerprint which dispatcher shapes were recognised.
TEMPLATE_SET_VERSION = "dispatch-v1"
DEFAULT_OUTBOUND_WINDOW = 64

_DUPS = ("DUP1", "DUP2")
_SPLIT_CMP = ("GT", "LT")
# Instructions a revert-only or stop-only fall-through may contain.
_INERT = frozenset(
    {
        "JUMPDEST", "POP", "CALLVALUE", "CALLDATASIZE", "ISZERO", "LT", "GT",
        "SLT", "SGT", "EQ", "AND", "OR", "NOT", "SUB",
        "JUMP", "JUMPI", "REVERT", "STOP", "INVALID",
    }
)


class Instruction(NamedTuple):
    offset: int
    opcode: int
    name: str
    push_operand: bytes | None = None
    truncated: bool = False

    @property
    def size(self) -> int:
        return 1 + (len(self.push_operand) if self.push_operand is not None else 0)

    @property
    def raw(self) -> bytes:
        return bytes([self.opcode]) + (self.push_operand or b"")

    @property
    def is_push(self) -> bool:
        return self.push_operand is not None

    @property
    def push_width(self) -> int:
        return op.push_width(self.opcode)

    @property
    def operand_int(self) -> int:
        return int.from_bytes(self.push_operand or b"", "big")

    def __str__(self) -> str:
        text = f"{self.offset:#06x} {self.name}"
        if self.push_operand is not None:
            text += f" 0x{self.push_operand.hex()}"
            if self.truncated:
                text += " (truncated)"
        return text


@dataclass(frozen=True)
class InstructionStream:
    code: bytes
    instructions: tuple[Instruction, ...]
    metadata_trailer: bytes | None = None

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def to_bytes(self) -> bytes:
        body = b"".join(ins.raw for ins in self.instructions)
        return body + (self.metadata_trailer or b"")

    @cached_property
    def index_by_offset(self) -> dict[int, int]:
        return {ins.offset: i for i, ins in enumerate(self.instructions)}

    @cached_property
    def names(self) -> tuple[str, ...]:
        return tuple(ins.name for ins in self.instructions)


@dataclass(frozen=True)
class BytecodeFeatures:
    has_call: bool = False
    has_staticcall: bool = False
    has_delegatecall: bool = False
    has_selfdestruct: bool = False
    has_create2: bool = False
    has_fallback: bool = False
    local_selectors: frozenset[int] = field(default_factory=frozenset)
    outbound_selectors: frozenset[int] = field(default_factory=frozenset)

    def to_dict(self) -> dict:
        return {
            "has_call": self.has_call,
            "has_staticcall": self.has_staticcall,
            "has_delegatecall": self.has_delegatecall,
            "has_selfdestruct": self.has_selfdestruct,
            "has_create2": self.has_create2,
            "has_fallback": self.has_fallback,
            "local_selectors": [format_selector(s) for s in sorted(self.local_selectors)],
            "outbound_selectors": [format_selector(s) for s in sorted(self.outbound_selectors)],
        }


def format_selector(selector: int) -> str:
    return f"0x{selector:08x}"


# -- metadata trailer -------------------------------------------------------


def _cbor_item(data: bytes, pos: int, depth: int = 0) -> int:
    """Return the position after one well-formed CBOR item, or raise ValueError."""
    if depth > 16 or pos >= len(data):
        raise ValueError("cbor: truncated")
    head = data[pos]
    major, info = head >> 5, head & 0x1F
    pos += 1
    if info < 24:
        value = info
    elif info <= 27:
        width = 1 << (info - 24)
        if pos + width > len(data):
            raise ValueError("cbor: truncated argument")
        value = int.from_bytes(data[pos:pos + width], "big")
        pos += width
    else:
        raise ValueError("cbor: indefinite or reserved length")

    if major in (0, 1):
        return pos
    if major in (2, 3):
        if pos + value > len(data):
            raise ValueError("cbor: string overruns")
        return pos + value
    if major in (4, 5):
        for _ in range(value * (2 if major == 5 else 1)):
            pos = _cbor_item(data, pos, depth + 1)
        return pos
    if major == 6:
        return _cbor_item(data, pos, depth + 1)
    # major 7: only false/true/null/undefined and floats
    if info in (20, 21, 22, 23, 25, 26, 27):
        return pos
    raise ValueError("cbor: unsupported simple value")


def split_metadata(code: bytes) -> tuple[bytes, bytes | None]:
    """Split ``code`` into (executable part, compiler metadata trailer).

    The trailer is a CBOR map (solc) or array (vyper) followed by its own
    2-byte big-endian length. Anything malformed stays executable.
    """
    if len(code) < 3:
        return code, None
    length = int.from_bytes(code[-2:], "big")
    if length == 0 or length + 2 > len(code):
        return code, None
    segment = code[-2 - length:-2]
    head = segment[0]
    if head >> 5 not in (4, 5) or head & 0x1F == 0:
        return code, None
    try:
        end = _cbor_item(segment, 0)
    except ValueError:
        return code, None
    if end != length:
        return code, None
    return code[:-2 - length], code[-2 - length:]


# -- disassembly ------------------------------------------------------------


_NAMES = tuple(op.name_of(b) for b in range(256))
_WIDTHS = tuple(op.push_width(b) for b in range(256))


def disassemble(code: bytes | bytearray) -> InstructionStream:
    """Decode ``code`` into instructions. Total: never raises on byte content."""
    code = bytes(code)
    body, trailer = split_metadata(code)
    out: list[Instruction] = []
    append = out.append
    i, n = 0, len(body)
    while i < n:
        opcode = body[i]
        width = _WIDTHS[opcode]
        if width:
            operand = body[i + 1:i + 1 + width]
            append(Instruction(i, opcode, _NAMES[opcode], operand, len(operand) < width))
            i += 1 + len(operand)
        else:
            append(Instruction(i, opcode, _NAMES[opcode]))
            i += 1
    return InstructionStream(code, tuple(out), trailer)


# -- dispatcher templates ---------------------------------------------------


class DispatchSite(NamedTuple):
    start: int  # index of the first instruction of the template
    push_index: int  # index of the constant push
    jumpi_index: int
    value: int
    split: bool  # GT/LT binary-search node rather than an equality test


def _is_small_push(ins: Instruction, max_width: int = 4) -> bool:
    return ins.is_push and not ins.truncated and 1 <= ins.push_width <= max_width


def _match_site(ins: tuple[Instruction, ...], i: int) -> DispatchSite | None:
    n = len(ins)
    j = i
    leading_dup = ins[j].name in _DUPS
    if leading_dup:
        j += 1
    if j >= n or not _is_small_push(ins[j]):
        return None
    push_index = j
    j += 1
    if not leading_dup and j < n and ins[j].name in _DUPS:
        j += 1
    if j >= n:
        return None
    split = False
    if ins[j].name == "EQ":
        j += 1
    elif ins[j].name == "SUB" and j + 1 < n and ins[j + 1].name == "ISZERO":
        j += 2
    elif ins[j].name in _SPLIT_CMP:
        split = True
        j += 1
    else:
        return None
    if j + 1 >= n or not _is_small_push(ins[j]) or ins[j + 1].name != "JUMPI":
        return None
    return DispatchSite(i, push_index, j + 1, ins[push_index].operand_int, split)


def dispatch_sites(stream: InstructionStream) -> list[DispatchSite]:
    """All equality and split comparison sites, one per constant push."""
    seen: dict[int, DispatchSite] = {}
    ins = stream.instructions
    for i in range(len(ins)):
        site = _match_site(ins, i)
        if site is not None and site.push_index not in seen:
            seen[site.push_index] = site
    return sorted(seen.values(), key=lambda s: s.push_index)


def extract_local_selectors(stream: InstructionStream) -> frozenset[int]:
    """Selectors compared against calldata by the dispatcher.

    Narrow pushes are zero-extended on the left, so ``PUSH3 0xaabbcc``
    yields ``0x00aabbcc``.
    """
    return frozenset(s.value for s in dispatch_sites(stream) if not s.split)


def _block_end(ins: tuple[Instruction, ...], i: int) -> int:
    """Index one past the basic block containing instruction ``i``."""
    j = i + 1
    while j < len(ins):
        if ins[j].name == "JUMPDEST":
            return j
        if ins[j - 1].opcode in op.TERMINATORS or not op.is_known(ins[j - 1].opcode):
            return j
        j += 1
    return j


def extract_outbound_selectors(
    stream: InstructionStream, window: int = DEFAULT_OUTBOUND_WINDOW
) -> frozenset[int]:
    """4-byte constants pushed toward an external call site.

    A PUSH4 outside dispatcher comparisons counts when CALL/STATICCALL/
    DELEGATECALL follows in the same basic block or within ``window``
    instructions, or when the constant is MSTOREd in its block and some
    external call follows later in the code.
    """
    ins = stream.instructions
    calls = [i for i, x in enumerate(ins) if x.opcode in op.EXTERNAL_CALLS]
    if not calls:
        return frozenset()
    dispatch_pushes = {s.push_index for s in dispatch_sites(stream)}
    last_call = calls[-1]
    found: set[int] = set()
    for i, x in enumerate(ins):
        if x.name != "PUSH4" or x.truncated or i in dispatch_pushes:
            continue
        if i + 1 < len(ins) and ins[i + 1].name == "AND":
            continue  # selector mask, not a selector
        if last_call <= i:
            continue
        end = _block_end(ins, i)
        limit = max(end, i + window + 1)
        if any(i < c < limit for c in calls):
            found.add(x.operand_int)
            continue
        if any(ins[k].name == "MSTORE" for k in range(i + 1, end)):
            found.add(x.operand_int)
    return frozenset(found)


# -- fallback ---------------------------------------------------------------


def _jump_target(stream: InstructionStream, jump_index: int) -> int | None:
    ins = stream.instructions
    if jump_index == 0 or not ins[jump_index - 1].is_push:
        return None
    target = stream.index_by_offset.get(ins[jump_index - 1].operand_int)
    if target is None or ins[target].name != "JUMPDEST":
        return None
    return target


def _reaches_code(stream: InstructionStream, start: int) -> bool:
    """Walk constant jumps from ``start``; True once anything beyond a bare
    revert/stop is reachable."""
    ins = stream.instructions
    todo, visited = [start], set()
    while todo:
        j = todo.pop()
        while j < len(ins) and j not in visited:
            visited.add(j)
            x = ins[j]
            if x.is_push or x.name == "PUSH0" or x.name.startswith(("DUP", "SWAP")):
                j += 1
                continue
            if x.name not in _INERT:
                return True
            if x.name == "JUMP":
                target = _jump_target(stream, j)
                if target is None:
                    return True  # computed jump: real code lives here
                todo.append(target)
                break
            if x.name == "JUMPI":
                target = _jump_target(stream, j)
                if target is None:
                    return True
                todo.append(target)
            elif x.name in ("REVERT", "STOP", "INVALID"):
                break
            j += 1
    return False


def detect_fallback(stream: InstructionStream) -> bool:
    """Whether a call matching no selector executes real code.

    With a dispatcher, the no-match fall-through paths are walked; a bare
    revert or stop is not a fallback. Without one, any nonempty code with an
    external call is treated as a forwarder.
    """
    ins = stream.instructions
    sites = dispatch_sites(stream)
    if not sites:
        return bool(ins) and any(x.opcode in op.EXTERNAL_CALLS for x in ins)
    starts = {s.start for s in sites} | {s.push_index for s in sites}
    for site in sites:
        nxt = site.jumpi_index + 1
        if nxt >= len(ins) or nxt in starts:
            continue
        if _reaches_code(stream, nxt):
            return True
    return False


def extract_features(
    stream: InstructionStream, outbound_window: int = DEFAULT_OUTBOUND_WINDOW
) -> BytecodeFeatures:
    present = {x.opcode for x in stream.instructions}
    return BytecodeFeatures(
        has_call=op.CALL in present,
        has_staticcall=op.STATICCALL in present,
        has_delegatecall=op.DELEGATECALL in present,
        has_selfdestruct=op.SELFDESTRUCT in present,
        has_create2=op.CREATE2 in present,
        has_fallback=detect_fallback(stream),
        local_selectors=extract_local_selectors(stream),
        outbound_selectors=extract_outbound_selectors(stream, outbound_window),
    )


def analyze_bytecode(
    code: bytes, outbound_window: int = DEFAULT_OUTBOUND_WINDOW
) -> BytecodeFeatures:
    return extract_features(disassemble(code), outbound_window)
