"""Deterministic executor for :class:`~ropwatch.isa.ProgramImage`.

The stack grows downward from ``STACK_TOP`` and may not go below
``STACK_LIMIT``. Words between ``STACK_TOP`` and ``MEM_TOP`` play the role
of the environment area above the initial frame, so an overflowing copy can
spill into it.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .isa import (
    WORD_MASK,
    Imm,
    Instruction,
    Mem,
    OpcodeClass,
    ProgramImage,
    Reg,
    TraceEvent,
)

MEM_TOP = 0x10000
STACK_LIMIT = 0xE000
STACK_TOP = 0xFF00
DEFAULT_STEPS = 1_000_000

BUFFER_WORDS = 16
FILLER_WORD = 0x41414141

# Fault kinds.
STACK_OVERFLOW = "StackOverflow"
STACK_UNDERFLOW = "StackUnderflow"
BAD_ADDRESS = "BadAddress"
DECODE_ERROR = "DecodeError"

GENERAL_REGS = ("r0", "r1", "r2", "r3")


class MachineFault(Exception):
    def __init__(self, kind: str, addr: int):
        super().__init__(f"{kind} at {addr:#x}")
        self.kind = kind
        self.addr = addr


class Memory(dict):
    """Sparse word memory; unwritten cells read as zero."""

    def __missing__(self, addr: int) -> int:
        return 0


@dataclass
class MachineState:
    regs: dict[str, int] = field(default_factory=dict)
    memory: Memory = field(default_factory=Memory)
    ip: int = 0
    flags: tuple[bool, bool, bool] = (False, False, False)  # equal, below, above
    halted: bool = False
    input_queue: deque = field(default_factory=deque)
    output: list[int] = field(default_factory=list)
    inputs_read: int = 0
    stack_limit: int = STACK_LIMIT
    mem_top: int = MEM_TOP

    @classmethod
    def initial(cls, image: ProgramImage, inputs: Iterable[int] = ()) -> "MachineState":
        regs = {name: 0 for name in GENERAL_REGS}
        regs["sp"] = STACK_TOP
        regs["bp"] = STACK_TOP
        memory = Memory(image.data)
        return cls(regs=regs, memory=memory, ip=image.entry,
                   input_queue=deque(w & WORD_MASK for w in inputs))

    @property
    def sp(self) -> int:
        return self.regs["sp"]

    @property
    def bp(self) -> int:
        return self.regs["bp"]

    def digest(self) -> str:
        """Hash of the architectural state outside the stack region.

        Stack words are left out: two payloads that differ only in gadget
        addresses leave different bytes on the stack while computing the
        same result.
        """
        h = hashlib.sha256()
        regs = ",".join(f"{k}={self.regs[k]:x}" for k in sorted(self.regs))
        h.update(f"ip={self.ip:x};{regs};flags={self.flags};halted={self.halted};".encode())
        cells = sorted((a, v) for a, v in self.memory.items()
                       if not (self.stack_limit <= a < self.mem_top) and v)
        h.update(repr(cells).encode())
        h.update(repr(self.output).encode())
        return h.hexdigest()


def _value(state: MachineState, op) -> int:
    if isinstance(op, Reg):
        return state.regs[op.name]
    return op.value


def _ea(state: MachineState, op: Mem, at: int) -> int:
    addr = op.disp if op.base is None else (state.regs[op.base] + op.disp) & WORD_MASK
    if not 0 <= addr < state.mem_top:
        raise MachineFault(BAD_ADDRESS, at)
    return addr


def push(state: MachineState, value: int, at: int) -> None:
    sp = state.regs["sp"] - 1
    if sp < state.stack_limit:
        raise MachineFault(STACK_OVERFLOW, at)
    state.memory[sp] = value & WORD_MASK
    state.regs["sp"] = sp


def pop(state: MachineState, at: int) -> int:
    sp = state.regs["sp"]
    if sp >= state.mem_top:
        raise MachineFault(STACK_UNDERFLOW, at)
    if sp < state.stack_limit:
        raise MachineFault(STACK_OVERFLOW, at)
    state.regs["sp"] = sp + 1
    return state.memory[sp]


def execute(state: MachineState, addr: int, ins: Instruction) -> None:
    """Apply *ins* (located at *addr*) to *state*."""
    m = ins.mnemonic
    ops = ins.operands
    regs = state.regs
    next_ip = addr + ins.encoded_len
    if m == "MOV":
        regs[ops[0].name] = _value(state, ops[1])
    elif m == "LOAD":
        regs[ops[0].name] = state.memory[_ea(state, ops[1], addr)]
    elif m == "STORE":
        state.memory[_ea(state, ops[0], addr)] = _value(state, ops[1])
    elif m == "PUSH":
        push(state, _value(state, ops[0]), addr)
    elif m == "POP":
        regs[ops[0].name] = pop(state, addr)
    elif m == "ADD":
        regs[ops[0].name] = (regs[ops[0].name] + _value(state, ops[1])) & WORD_MASK
    elif m == "SUB":
        regs[ops[0].name] = (regs[ops[0].name] - _value(state, ops[1])) & WORD_MASK
    elif m == "CMP":
        a, b = regs[ops[0].name], _value(state, ops[1])
        state.flags = (a == b, a < b, a > b)
    elif m == "JMP":
        next_ip = _value(state, ops[0])
    elif m in ("JE", "JNE", "JA", "JB"):
        equal, below, above = state.flags
        taken = {"JE": equal, "JNE": not equal, "JA": above, "JB": below}[m]
        if taken:
            next_ip = ops[0].value
    elif m == "CALL" or m == "CALLR":
        push(state, next_ip, addr)
        next_ip = _value(state, ops[0])
    elif m == "RET":
        next_ip = pop(state, addr)
        if ops:
            sp = regs["sp"] + ops[0].value
            if sp > state.mem_top:
                raise MachineFault(STACK_UNDERFLOW, addr)
            regs["sp"] = sp
    elif m == "NOP":
        pass
    elif m == "IN":
        if state.input_queue:
            regs[ops[0].name] = state.input_queue.popleft()
            state.inputs_read += 1
        else:
            regs[ops[0].name] = 0
    elif m == "OUT":
        state.output.append(_value(state, ops[0]))
    elif m == "HALT":
        state.halted = True
    else:  # pragma: no cover - Instruction validates mnemonics
        raise MachineFault(DECODE_ERROR, addr)
    state.ip = next_ip


@dataclass(frozen=True)
class Exit:
    kind: str  # "Halted" | "Fault" | "StepLimit"
    fault: str | None = None
    addr: int | None = None

    def __str__(self) -> str:
        if self.kind == "Fault":
            return f"Fault({self.fault}, {self.addr:#x})"
        return self.kind


HALTED = Exit("Halted")
STEP_LIMIT = Exit("StepLimit")


@dataclass(frozen=True)
class ExecutionRecord:
    events: tuple[TraceEvent, ...]
    exit: Exit
    state: MachineState = field(compare=False, repr=False)
    final_state: str = ""

    @property
    def faulted(self) -> bool:
        return self.exit.kind == "Fault"

    def counts(self) -> dict[OpcodeClass, int]:
        out = {cls: 0 for cls in OpcodeClass}
        for ev in self.events:
            out[ev.cls] += 1
        return out


def run(image: ProgramImage, inputs: Iterable[int] = (), max_steps: int = DEFAULT_STEPS,
        tid: int = 0) -> ExecutionRecord:
    """Execute *image* from its entry point and record every instruction."""
    if max_steps <= 0:
        raise ValueError("step budget must be positive")
    state = MachineState.initial(image, inputs)
    code = image.code
    events: list[TraceEvent] = []
    exit_ = STEP_LIMIT
    for seq in range(max_steps):
        ip = state.ip
        ins = code.get(ip)
        if ins is None:
            kind = DECODE_ERROR if image.in_code(ip) else BAD_ADDRESS
            exit_ = Exit("Fault", kind, ip)
            break
        events.append(TraceEvent(seq, tid, ip, ins.cls, ins.mnemonic))
        try:
            execute(state, ip, ins)
        except MachineFault as fault:
            exit_ = Exit("Fault", fault.kind, fault.addr)
            break
        if state.halted:
            exit_ = HALTED
            break
    return ExecutionRecord(tuple(events), exit_, state, state.digest())


def payload_words(payload) -> list[int]:
    if hasattr(payload, "words"):
        return list(payload.words())
    return [int(w) & WORD_MASK for w in payload]


def first_ret(image: ProgramImage) -> int:
    for addr, ins in image.code.items():
        if ins.cls is OpcodeClass.RET and not ins.operands:
            return addr
    raise ValueError("image has no bare RET to use as a slide")


def exploit_input(image: ProgramImage, payload, padding: int,
                  buffer_words: int = BUFFER_WORDS, filler: int = FILLER_WORD) -> list[int]:
    """Build the input that overflows ``copyn`` with *payload*.

    The first ``buffer_words`` padding words fill the buffer; any further
    padding words land on the return slot and above, so they are set to the
    address of a bare RET and slide execution onto the payload.
    """
    if "copyn" not in image.symbols:
        raise ValueError("image has no copyn routine")
    if padding < buffer_words:
        raise ValueError(f"padding {padding} does not reach the return address")
    words = payload_words(payload)
    slide = first_ret(image) if padding > buffer_words else filler
    pad = [filler] * buffer_words + [slide] * (padding - buffer_words)
    return [padding + len(words)] + pad + words


def exploit_run(image: ProgramImage, payload, padding: int = BUFFER_WORDS,
                buffer_words: int = BUFFER_WORDS, max_steps: int = DEFAULT_STEPS,
                tid: int = 0) -> ExecutionRecord:
    """Run the vulnerable image with an overflowing input carrying *payload*."""
    return run(image, exploit_input(image, payload, padding, buffer_words),
               max_steps=max_steps, tid=tid)


def interleave(records: Sequence[Sequence[TraceEvent]], order: Sequence[int]) -> list[TraceEvent]:
    """Merge per-thread event lists following *order* (a list of indices
    into *records*), renumbering ``seq`` globally."""
    cursors = [0] * len(records)
    out = []
    for seq, which in enumerate(order):
        ev = records[which][cursors[which]]
        cursors[which] += 1
        out.append(ev._replace(seq=seq))
    return out
