"""Toy instruction set: opcode classes, instructions, program images and a
two-pass assembler.

Assembly text format (one item per line)::

    ; comment                  everything after ';' is ignored
    .entry main                entry point (label or number); defaults to
                               the ``start`` or ``main`` label, else the
                               first instruction
    .data 0x8000               move the data cursor
    .segment lib               start a named code segment at the cursor
    label:                     binds to the next emitted item
    loop: ADD r0, 1            label and instruction on one line
    buf: .word 0, 0, 7         data words, placed at the data cursor

Operands are registers (``sp``, ``bp``, ``r0``..``r3``), integers
(decimal, ``0x`` hex, negative), label names, or memory references
``[r1]``, ``[bp-2]``, ``[0x8000]``, ``[label+1]``.

Memory is word addressed. An instruction occupies one word, or two when any
operand carries an immediate word.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Union

WORD_MASK = 0xFFFFFFFF

CODE_BASE = 0x1000
DATA_BASE = 0x8000

REGISTERS = ("sp", "bp", "r0", "r1", "r2", "r3")


class OpcodeClass(str, enum.Enum):
    CALL = "CALL"
    RET = "RET"
    BRANCH = "BRANCH"
    OTHER = "OTHER"

    def __str__(self) -> str:
        return self.value


class DecodeError(ValueError):
    """Raised for unknown mnemonics or misaligned code ranges."""


class AssemblyError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        prefix = f"line {lineno}: " if lineno is not None else ""
        super().__init__(prefix + message)


# Operand kinds accepted at each position: r=register, i=immediate,
# m=memory reference.
_ARITY: dict[str, tuple[tuple[str, ...], ...]] = {
    "MOV": (("r",), ("r", "i")),
    "LOAD": (("r",), ("m",)),
    "STORE": (("m",), ("r", "i")),
    "PUSH": (("r", "i"),),
    "POP": (("r",),),
    "ADD": (("r",), ("r", "i")),
    "SUB": (("r",), ("r", "i")),
    "CMP": (("r",), ("r", "i")),
    "JMP": (("r", "i"),),
    "JE": (("i",),),
    "JNE": (("i",),),
    "JA": (("i",),),
    "JB": (("i",),),
    "CALL": (("i",),),
    "CALLR": (("r",),),
    "RET": (),
    "NOP": (),
    "IN": (("r",),),
    "OUT": (("r", "i"),),
    "HALT": (),
}

# Mnemonics with an optional trailing operand (RET n drops n extra words).
_OPTIONAL_TAIL: dict[str, tuple[str, ...]] = {"RET": ("i",)}

_CLASS_TABLE: dict[str, OpcodeClass] = {
    "CALL": OpcodeClass.CALL,
    "CALLR": OpcodeClass.CALL,
    "RET": OpcodeClass.RET,
    "JMP": OpcodeClass.BRANCH,
    "JE": OpcodeClass.BRANCH,
    "JNE": OpcodeClass.BRANCH,
    "JA": OpcodeClass.BRANCH,
    "JB": OpcodeClass.BRANCH,
}

MNEMONICS = tuple(_ARITY)


def classify(mnemonic: str) -> OpcodeClass:
    """Return the opcode class of *mnemonic*."""
    key = mnemonic.upper()
    if key not in _ARITY:
        raise DecodeError(f"unknown mnemonic {mnemonic!r}")
    return _CLASS_TABLE.get(key, OpcodeClass.OTHER)


class Reg(NamedTuple):
    name: str

    def __str__(self) -> str:
        return self.name


class Imm(NamedTuple):
    value: int

    def __str__(self) -> str:
        return _fmt_int(self.value)


class Mem(NamedTuple):
    base: str | None
    disp: int = 0

    def __str__(self) -> str:
        if self.base is None:
            return f"[{_fmt_int(self.disp)}]"
        if self.disp == 0:
            return f"[{self.base}]"
        sign = "+" if self.disp > 0 else "-"
        return f"[{self.base}{sign}{abs(self.disp)}]"

    @property
    def has_immediate(self) -> bool:
        return self.base is None or self.disp != 0


Operand = Union[Reg, Imm, Mem]


class TraceEvent(NamedTuple):
    """One executed instruction as seen by the trace consumers."""

    seq: int
    tid: int
    addr: int
    cls: OpcodeClass
    mnemonic: str


def _fmt_int(value: int) -> str:
    return hex(value) if value >= 256 else str(value)


def _kind(op: Operand) -> str:
    if isinstance(op, Reg):
        return "r"
    if isinstance(op, Imm):
        return "i"
    return "m"


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple[Operand, ...] = ()

    def __post_init__(self) -> None:
        mnemonic = self.mnemonic.upper()
        object.__setattr__(self, "mnemonic", mnemonic)
        object.__setattr__(self, "operands", tuple(self.operands))
        if mnemonic not in _ARITY:
            raise DecodeError(f"unknown mnemonic {self.mnemonic!r}")
        allowed = _ARITY[mnemonic]
        ops = self.operands
        if len(ops) == len(allowed) + 1 and mnemonic in _OPTIONAL_TAIL:
            allowed = allowed + (_OPTIONAL_TAIL[mnemonic],)
        if len(ops) != len(allowed):
            raise DecodeError(
                f"{mnemonic} takes {len(_ARITY[mnemonic])} operand(s), got {len(ops)}"
            )
        for pos, (op, kinds) in enumerate(zip(ops, allowed)):
            if _kind(op) not in kinds:
                raise DecodeError(f"{mnemonic}: operand {pos + 1} ({op}) has the wrong kind")
            if isinstance(op, Reg) and op.name not in REGISTERS:
                raise DecodeError(f"{mnemonic}: unknown register {op.name!r}")

    @property
    def cls(self) -> OpcodeClass:
        return _CLASS_TABLE.get(self.mnemonic, OpcodeClass.OTHER)

    @property
    def encoded_len(self) -> int:
        for op in self.operands:
            if isinstance(op, Imm) or (isinstance(op, Mem) and op.has_immediate):
                return 2
        return 1

    def __str__(self) -> str:
        if not self.operands:
            return self.mnemonic
        return f"{self.mnemonic} " + ", ".join(str(op) for op in self.operands)


@dataclass(frozen=True)
class ProgramImage:
    """An assembled program.

    ``code`` maps instruction start addresses to instructions and covers the
    contiguous range ``[code_start, code_end)``. ``segments`` names
    sub-ranges of that range (``"code"`` for the program itself and, when
    linked, ``"lib"``).
    """

    code: Mapping[int, Instruction]
    entry: int
    data: Mapping[int, int] = field(default_factory=dict)
    symbols: Mapping[str, int] = field(default_factory=dict)
    segments: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        code = dict(sorted(self.code.items()))
        object.__setattr__(self, "code", code)
        object.__setattr__(self, "data", dict(sorted(self.data.items())))
        object.__setattr__(self, "symbols", dict(self.symbols))
        if not code:
            raise ValueError("program image has no code")
        prev_end = None
        for addr, ins in code.items():
            if prev_end is not None and addr != prev_end:
                raise ValueError(f"code is not contiguous at {addr:#x}")
            prev_end = addr + ins.encoded_len
        object.__setattr__(self, "_addrs", tuple(code))
        if not self.segments:
            object.__setattr__(self, "segments", {"code": (self.code_start, self.code_end)})
        if self.entry not in code:
            raise ValueError(f"entry {self.entry:#x} is not an instruction boundary")

    @property
    def code_start(self) -> int:
        return self._addrs[0]

    @property
    def code_end(self) -> int:
        last = self._addrs[-1]
        return last + self.code[last].encoded_len

    def in_code(self, addr: int) -> bool:
        return self.code_start <= addr < self.code_end

    def segment_of(self, addr: int) -> str | None:
        for name, (lo, hi) in self.segments.items():
            if lo <= addr < hi:
                return name
        return None

    def addresses(self) -> tuple[int, ...]:
        return self._addrs


# ---------------------------------------------------------------- assembler

_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*):")
_NAME_RE = re.compile(r"^[A-Za-z_.$][\w.$]*$")
_MEM_RE = re.compile(r"^\[\s*([^\]+\-]+?)\s*(?:([+\-])\s*([^\]]+?)\s*)?\]$")


def _parse_int(text: str) -> int | None:
    try:
        return int(text, 0)
    except ValueError:
        return None


class _Pending(NamedTuple):
    lineno: int
    mnemonic: str
    operands: list[str]
    addr: int


def assemble(source: str, base: int = CODE_BASE, data_base: int = DATA_BASE) -> ProgramImage:
    """Assemble *source* into a :class:`ProgramImage` (two passes)."""
    symbols: dict[str, int] = {}
    pending_labels: list[tuple[str, int]] = []
    items: list[_Pending] = []
    data_items: list[tuple[int, int, list[str]]] = []
    segments: list[tuple[str, int]] = [("code", base)]
    entry_ref: tuple[str, int] | None = None
    pc = base
    dc = data_base

    def bind(addr: int) -> None:
        for name, lineno in pending_labels:
            if name in symbols:
                raise AssemblyError(f"duplicate label {name!r}", lineno)
            symbols[name] = addr
        pending_labels.clear()

    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        while line:
            m = _LABEL_RE.match(line)
            if not m:
                break
            pending_labels.append((m.group(1), lineno))
            line = line[m.end():].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        args = [a.strip() for a in rest.split(",")] if rest else []
        if head.startswith("."):
            directive = head.lower()
            if directive == ".word":
                bind(dc)
                if not args:
                    raise AssemblyError(".word needs at least one value", lineno)
                data_items.append((lineno, dc, args))
                dc += len(args)
            elif directive == ".entry":
                if len(args) != 1:
                    raise AssemblyError(".entry takes one operand", lineno)
                entry_ref = (args[0], lineno)
            elif directive == ".data":
                value = _parse_int(rest)
                if value is None:
                    raise AssemblyError(".data needs a numeric address", lineno)
                dc = value
            elif directive == ".segment":
                if not _NAME_RE.match(rest):
                    raise AssemblyError(".segment needs a name", lineno)
                segments.append((rest, pc))
            else:
                raise AssemblyError(f"unknown directive {head!r}", lineno)
            continue
        mnemonic = head.upper()
        if mnemonic not in _ARITY:
            raise AssemblyError(f"unknown mnemonic {head!r}", lineno)
        bind(pc)
        ins_len = _probe_len(mnemonic, args, lineno)
        items.append(_Pending(lineno, mnemonic, args, pc))
        pc += ins_len
    bind(pc)

    code: dict[int, Instruction] = {}
    for item in items:
        ops = tuple(_parse_operand(text, symbols, item.lineno) for text in item.operands)
        try:
            ins = Instruction(item.mnemonic, ops)
        except DecodeError as exc:
            raise AssemblyError(str(exc), item.lineno) from None
        if ins.encoded_len != _probe_len(item.mnemonic, item.operands, item.lineno):
            raise AssemblyError("operand size changed between passes", item.lineno)
        code[item.addr] = ins
    if not code:
        raise AssemblyError("no instructions")

    data: dict[int, int] = {}
    for lineno, addr, args in data_items:
        for offset, text in enumerate(args):
            value = _resolve_value(text, symbols, lineno)
            data[addr + offset] = value & WORD_MASK

    if entry_ref is not None:
        entry = _resolve_value(entry_ref[0], symbols, entry_ref[1])
    else:
        entry = symbols.get("start", symbols.get("main", base))
    if entry not in code:
        raise AssemblyError(f"entry {entry:#x} is not an instruction")

    seg_map: dict[str, tuple[int, int]] = {}
    bounds = [start for _, start in segments[1:]] + [pc]
    for (name, start), end in zip(segments, bounds):
        if end > start:
            seg_map[name] = (start, end)
    return ProgramImage(code=code, entry=entry, data=data, symbols=symbols, segments=seg_map)


def _probe_len(mnemonic: str, args: list[str], lineno: int) -> int:
    # Size is decided syntactically so the first pass can lay out addresses.
    for text in args:
        if text in REGISTERS:
            continue
        m = _MEM_RE.match(text)
        if m:
            base_txt, sign, disp = m.groups()
            if base_txt in REGISTERS and sign is None:
                continue
            if base_txt in REGISTERS and sign is not None:
                value = _parse_int(disp)
                if value == 0:
                    continue
            return 2
        return 2
    return 1


def _resolve_value(text: str, symbols: Mapping[str, int], lineno: int) -> int:
    value = _parse_int(text)
    if value is not None:
        return value
    if _NAME_RE.match(text):
        if text not in symbols:
            raise AssemblyError(f"undefined label {text!r}", lineno)
        return symbols[text]
    for sign in "+-":
        if sign in text[1:]:
            left, right = text.rsplit(sign, 1)
            offset = _resolve_value(right.strip(), symbols, lineno)
            return _resolve_value(left.strip(), symbols, lineno) + (offset if sign == "+" else -offset)
    raise AssemblyError(f"bad operand {text!r}", lineno)


def _parse_operand(text: str, symbols: Mapping[str, int], lineno: int) -> Operand:
    if not text:
        raise AssemblyError("empty operand", lineno)
    if text in REGISTERS:
        return Reg(text)
    if text.startswith("["):
        m = _MEM_RE.match(text)
        if not m:
            raise AssemblyError(f"bad memory operand {text!r}", lineno)
        base_txt, sign, disp_txt = m.groups()
        if base_txt in REGISTERS:
            disp = 0
            if sign is not None:
                disp = _resolve_value(disp_txt, symbols, lineno)
                disp = disp if sign == "+" else -disp
            return Mem(base_txt, disp)
        inner = text[1:-1].strip()
        return Mem(None, _resolve_value(inner, symbols, lineno))
    return Imm(_resolve_value(text, symbols, lineno) & WORD_MASK)


# ------------------------------------------------------------- disassembler

def disassemble(image: ProgramImage, start: int | None = None, stop: int | None = None) -> list[tuple[int, Instruction]]:
    """Return ``(address, instruction)`` pairs tiling ``[start, stop)``.

    Both bounds must fall on instruction boundaries (``stop`` may also be
    the end of the code segment).
    """
    start = image.code_start if start is None else start
    stop = image.code_end if stop is None else stop
    if stop < start:
        raise DecodeError(f"empty or reversed range {start:#x}..{stop:#x}")
    if start == stop:
        if start not in image.code and start != image.code_end:
            raise DecodeError(f"{start:#x} is not an instruction boundary")
        return []
    if not (image.in_code(start) and image.code_start < stop <= image.code_end):
        raise DecodeError(f"range {start:#x}..{stop:#x} leaves the code segment")
    if start not in image.code:
        raise DecodeError(f"{start:#x} is not an instruction boundary")
    if stop != image.code_end and stop not in image.code:
        raise DecodeError(f"{stop:#x} is not an instruction boundary")
    out = []
    addr = start
    while addr < stop:
        ins = image.code[addr]
        out.append((addr, ins))
        addr += ins.encoded_len
    return out


def to_source(image: ProgramImage) -> str:
    """Render *image* as assembly text that reassembles to an equal image."""
    by_addr: dict[int, list[str]] = {}
    for name, addr in sorted(image.symbols.items(), key=lambda kv: (kv[1], kv[0])):
        by_addr.setdefault(addr, []).append(name)
    seg_starts = {lo: name for name, (lo, _) in image.segments.items() if name != "code"}
    lines = [f".entry {image.entry:#x}"]
    code_labels = set()
    for addr, ins in image.code.items():
        if addr in seg_starts:
            lines.append(f".segment {seg_starts[addr]}")
        for name in by_addr.get(addr, ()):
            lines.append(f"{name}:")
            code_labels.add(name)
        lines.append(f"    {ins}")
    if image.code_end in by_addr:
        for name in by_addr[image.code_end]:
            # Labels at the end of code bind to the code cursor.
            lines.append(f"{name}:")
            code_labels.add(name)
    data_labels = {n for n in image.symbols if n not in code_labels}
    cursor = None
    for addr, value in image.data.items():
        if addr != cursor:
            lines.append(f".data {addr:#x}")
        names = [n for n in by_addr.get(addr, ()) if n in data_labels]
        prefix = "".join(f"{n}: " for n in names)
        lines.append(f"{prefix}.word {value}")
        cursor = addr + 1
    orphan = sorted(n for n in data_labels if image.symbols[n] not in image.data)
    if orphan:
        raise ValueError(f"symbols {orphan} cannot be rendered as source")
    return "\n".join(lines) + "\n"


def format_listing(pairs: Iterable[tuple[int, Instruction]]) -> str:
    return "\n".join(f"{addr:#06x}: {ins}" for addr, ins in pairs)
