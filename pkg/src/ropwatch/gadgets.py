"""Gadget discovery and ROP chain generation.

Two gadgets are *similar* when they leave the same end state (registers,
flags, stack pointer delta, written memory, output, consumed input and
return target) on every state of a seeded probe sample. This is an
approximation of semantic equivalence: it never merges gadgets whose
effects differ on the probes, and the probe sample is drawn wide enough
that accidental collisions are not expected.
"""

from __future__ import annotations

import functools
import hashlib
import itertools
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

from .isa import (
    WORD_MASK,
    Imm,
    Instruction,
    Mem,
    OpcodeClass,
    ProgramImage,
    Reg,
)
from .vm import (
    GENERAL_REGS,
    STACK_LIMIT,
    STACK_TOP,
    MachineFault,
    MachineState,
    Memory,
    execute,
)

MAX_GADGET_LEN = 6
DEFAULT_PROBES = 32
DEFAULT_CAP = 730
FAULTING = "faulting"

CODE_SEGMENT = "CodeSegment"
LIBRARY = "Library"
_SEGMENT_FOR_SOURCE = {CODE_SEGMENT: "code", LIBRARY: "lib"}
_RET = Instruction("RET")


class ChainBuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class Gadget:
    addr: int
    body: tuple[Instruction, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "body", tuple(self.body))
        if not 1 <= len(self.body) <= MAX_GADGET_LEN:
            raise ValueError(f"gadget length {len(self.body)} outside 1..{MAX_GADGET_LEN}")
        if self.body[-1].cls is not OpcodeClass.RET:
            raise ValueError("gadget must end in a return")
        if any(ins.cls is not OpcodeClass.OTHER for ins in self.body[:-1]):
            raise ValueError("gadget body may not call or branch")

    @property
    def mnemonics(self) -> list[str]:
        return [ins.mnemonic for ins in self.body]

    @property
    def effect_sig(self) -> str:
        return effect_signature(self)

    def __str__(self) -> str:
        return f"{self.addr:#06x}: " + "; ".join(str(i) for i in self.body)


@dataclass(frozen=True)
class JmpLink:
    """A code fragment that reaches a RET through an unconditional JMP.

    ``body`` is the executed path: the fragment, the JMP, then the jump
    target's straight-line tail up to and including the RET.
    """

    addr: int
    body: tuple[Instruction, ...]

    @property
    def mnemonics(self) -> list[str]:
        return [ins.mnemonic for ins in self.body]

    @property
    def effect_sig(self) -> str:
        return effect_signature(self)

    def __str__(self) -> str:
        return f"{self.addr:#06x}: " + "; ".join(str(i) for i in self.body)


Slot = Union[Gadget, JmpLink]


# -------------------------------------------------------------------- scan

def scan_gadgets(image: ProgramImage, max_len: int = MAX_GADGET_LEN,
                 segment: str | None = None) -> list[Gadget]:
    """Every instruction boundary from which at most *max_len* instructions
    reach a RET without a call or branch, sorted by address."""
    if not 1 <= max_len <= MAX_GADGET_LEN:
        raise ValueError(f"max_len must be in 1..{MAX_GADGET_LEN}")
    lo, hi = (image.segments[segment] if segment else (image.code_start, image.code_end))
    code = image.code
    out = []
    for addr in image.addresses():
        if not lo <= addr < hi:
            continue
        body = []
        cur = addr
        while len(body) < max_len and cur in code:
            ins = code[cur]
            body.append(ins)
            if ins.cls is not OpcodeClass.OTHER:
                break
            cur += ins.encoded_len
        if body and body[-1].cls is OpcodeClass.RET:
            out.append(Gadget(addr, tuple(body)))
    return out


def scan_jmp_links(image: ProgramImage, max_len: int = 4, max_tail: int = 8,
                   segment: str | None = None) -> list[JmpLink]:
    """Fragments ending in ``JMP imm`` whose target runs straight into a RET."""
    lo, hi = (image.segments[segment] if segment else (image.code_start, image.code_end))
    code = image.code
    out = []
    for addr in image.addresses():
        if not lo <= addr < hi:
            continue
        body = []
        cur = addr
        while len(body) < max_len and cur in code:
            ins = code[cur]
            body.append(ins)
            if ins.cls is not OpcodeClass.OTHER:
                break
            cur += ins.encoded_len
        if not body or body[-1].mnemonic != "JMP" or not isinstance(body[-1].operands[0], Imm):
            continue
        tail = []
        cur = body[-1].operands[0].value
        while len(tail) < max_tail and cur in code:
            ins = code[cur]
            tail.append(ins)
            if ins.cls is not OpcodeClass.OTHER:
                break
            cur += ins.encoded_len
        if tail and tail[-1].cls is OpcodeClass.RET:
            out.append(JmpLink(addr, tuple(body + tail)))
    return out


# ------------------------------------------------------- effect signatures

class _ProbeMemory(Memory):
    def __init__(self, salt: int):
        super().__init__()
        self.salt = salt

    def __missing__(self, addr: int) -> int:
        x = (addr * 0x9E3779B1 + self.salt * 0x85EBCA6B) & WORD_MASK
        x ^= x >> 15
        return (x * 0x2C1B3C6D) & WORD_MASK


@dataclass(frozen=True)
class ProbeState:
    regs: tuple[tuple[str, int], ...]
    flags: tuple[bool, bool, bool]
    salt: int
    inputs: tuple[int, ...]


@functools.lru_cache(maxsize=16)
def probe_states(seed: int = 0, count: int = DEFAULT_PROBES) -> tuple[ProbeState, ...]:
    """Seeded sample of machine states used to compare gadget effects."""
    if count < 1:
        raise ValueError("need at least one probe state")
    rng = random.Random(seed)
    probes = []
    for _ in range(count):
        regs = {r: rng.randrange(0x9000, STACK_LIMIT) for r in GENERAL_REGS}
        regs["bp"] = rng.randrange(STACK_LIMIT + 0x100, STACK_TOP - 0x100)
        regs["sp"] = rng.randrange(STACK_LIMIT + 0x100, STACK_TOP - 0x100)
        flags = (rng.random() < 0.5, rng.random() < 0.5, rng.random() < 0.5)
        inputs = tuple(rng.randrange(1 << 32) for _ in range(4))
        probes.append(ProbeState(tuple(sorted(regs.items())), flags, rng.randrange(1 << 32), inputs))
    return tuple(probes)


def _end_state(body: Sequence[Instruction], probe: ProbeState):
    state = MachineState(regs=dict(probe.regs), memory=_ProbeMemory(probe.salt),
                         ip=0, flags=probe.flags, input_queue=deque(probe.inputs))
    sp0 = state.regs["sp"]
    for ins in body:
        if ins.mnemonic == "HALT":
            return None
        try:
            execute(state, state.ip, ins)
        except MachineFault:
            return None
    regs = tuple((k, v) for k, v in sorted(state.regs.items()) if k != "sp")
    written = tuple(sorted(dict.items(state.memory)))
    return (regs, state.regs["sp"] - sp0, state.flags, written,
            tuple(state.output), state.inputs_read, state.ip)


@functools.lru_cache(maxsize=None)
def _signature(body: tuple[Instruction, ...], seed: int, count: int) -> str:
    h = hashlib.sha256()
    for probe in probe_states(seed, count):
        end = _end_state(body, probe)
        if end is None:
            return FAULTING
        h.update(repr(end).encode())
    return h.hexdigest()


def effect_signature(g: Slot, seed: int = 0, count: int = DEFAULT_PROBES) -> str:
    """Digest of *g*'s end state over the probe sample, or ``FAULTING``."""
    return _signature(tuple(g.body), seed, count)


def find_similar(g: Slot, pool: Sequence[Slot], seed: int = 0,
                 count: int = DEFAULT_PROBES) -> list[Slot]:
    sig = effect_signature(g, seed, count)
    if sig == FAULTING:
        return []
    same = [h for h in pool
            if h.addr != g.addr and effect_signature(h, seed, count) == sig]
    return sorted(same, key=lambda h: h.addr)


# ------------------------------------------------------------------ chains

@dataclass(frozen=True)
class RopChain:
    slots: tuple[Slot, ...]
    inline_data: tuple[tuple[int, ...], ...] = ()
    source: str = LIBRARY
    terminator: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "slots", tuple(self.slots))
        data = tuple(tuple(d) for d in self.inline_data) or tuple(() for _ in self.slots)
        if len(data) != len(self.slots):
            raise ValueError("inline_data needs one entry per slot")
        object.__setattr__(self, "inline_data", data)
        if not self.slots:
            raise ValueError("a chain needs at least one slot")

    @property
    def addresses(self) -> tuple[int, ...]:
        return tuple(s.addr for s in self.slots)

    def words(self) -> list[int]:
        out = []
        for slot, data in zip(self.slots, self.inline_data):
            out.append(slot.addr)
            out.extend(data)
        if self.terminator is not None:
            out.append(self.terminator)
        return out

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "slots": [{"addr": f"{s.addr:#x}", "mnemonics": s.mnemonics} for s in self.slots],
            "inline_data": {str(i): list(d) for i, d in enumerate(self.inline_data) if d},
            "terminator": None if self.terminator is None else f"{self.terminator:#x}",
        }

    @classmethod
    def from_json(cls, obj: Mapping, image: ProgramImage) -> "RopChain":
        slots = []
        for entry in obj["slots"]:
            addr = int(entry["addr"], 16) if isinstance(entry["addr"], str) else int(entry["addr"])
            slots.append(_decode_slot(image, addr, list(entry["mnemonics"])))
        data = obj.get("inline_data", {})
        inline = tuple(tuple(int(w) for w in data.get(str(i), ())) for i in range(len(slots)))
        term = obj.get("terminator")
        if isinstance(term, str):
            term = int(term, 16)
        return cls(tuple(slots), inline, obj.get("source", LIBRARY), term)


def _decode_slot(image: ProgramImage, addr: int, mnemonics: list[str]) -> Slot:
    body = []
    cur = addr
    while len(body) < len(mnemonics):
        ins = image.code.get(cur)
        if ins is None:
            raise ValueError(f"chain slot {addr:#x} does not decode in this image")
        body.append(ins)
        if ins.mnemonic == "JMP":
            cur = ins.operands[0].value if isinstance(ins.operands[0], Imm) else -1
        else:
            cur += ins.encoded_len
    if [i.mnemonic for i in body] != [m.upper() for m in mnemonics]:
        raise ValueError(f"chain slot {addr:#x} does not match the image")
    if any(i.mnemonic == "JMP" for i in body):
        return JmpLink(addr, tuple(body))
    return Gadget(addr, tuple(body))


def _template(*instructions: Instruction) -> tuple[Instruction, ...]:
    return tuple(instructions) + (_RET,)


def _pick(pool: Sequence[Slot], body: tuple[Instruction, ...], seed: int, count: int) -> Slot | None:
    want = _signature(body, seed, count)
    for g in pool:
        if effect_signature(g, seed, count) == want:
            return g
    return None


def build_chain(pool: Sequence[Slot], writes: Sequence[tuple[int, int]], *,
                terminator: int | None, source: str = LIBRARY, seed: int = 0,
                count: int = DEFAULT_PROBES) -> RopChain:
    """Plan a chain that stores each ``value`` at ``address`` in *writes*.

    Each write uses a pop for the value, a pop for the address and a store
    gadget, matched by effect against canonical ``POP r; RET`` and
    ``STORE [rb], rs; RET`` forms. The lowest-address match is used.
    """
    if not writes:
        raise ValueError("nothing to write")
    pool = sorted(pool, key=lambda g: g.addr)
    for rs, rb in itertools.permutations(GENERAL_REGS, 2):
        store = _pick(pool, _template(Instruction("STORE", (Mem(rb), Reg(rs)))), seed, count)
        pop_s = _pick(pool, _template(Instruction("POP", (Reg(rs),))), seed, count)
        pop_b = _pick(pool, _template(Instruction("POP", (Reg(rb),))), seed, count)
        if store and pop_s and pop_b:
            break
    else:
        raise ChainBuildError("pool lacks pop/store gadgets for a write chain")
    slots: list[Slot] = []
    inline: list[tuple[int, ...]] = []
    for addr, value in writes:
        slots += [pop_s, pop_b, store]
        inline += [(value & WORD_MASK,), (addr & WORD_MASK,), ()]
    return RopChain(tuple(slots), tuple(inline), source, terminator)


def default_writes(image: ProgramImage, n: int) -> list[tuple[int, int]]:
    marker = image.symbols["marker"]
    values = (0xC0DE, 0xBEEF, 0xF00D, 0xFACE)
    return [(marker + i, values[i % len(values)]) for i in range(n)]


def base_chain(image: ProgramImage, source: str = LIBRARY, n_writes: int | None = None,
               max_len: int = MAX_GADGET_LEN, seed: int = 0) -> RopChain:
    """The first chain against *image*, from the given gadget source.

    Defaults to one marker write for code-segment gadgets and two for the
    library, ending at the image's ``exit`` symbol.
    """
    segment = _SEGMENT_FOR_SOURCE[source]
    pool = scan_gadgets(image, max_len, segment=segment)
    n = n_writes if n_writes is not None else (1 if source == CODE_SEGMENT else 2)
    return build_chain(pool, default_writes(image, n), terminator=image.symbols.get("exit"),
                       source=source, seed=seed)


def jmp_gadget_chain(image: ProgramImage, n_writes: int = 1, seed: int = 0) -> RopChain:
    """Chain whose links each reach their RET through a JMP."""
    pool = scan_jmp_links(image, segment="code")
    return build_chain(pool, default_writes(image, n_writes), terminator=image.symbols.get("exit"),
                       source=CODE_SEGMENT, seed=seed)


def _alternatives(base: RopChain, pools, seed: int, count: int) -> list[list[Slot]]:
    if isinstance(pools, Mapping):
        pools = [pools.get(i, pools.get(str(i), ())) for i in range(len(base.slots))]
    if len(pools) != len(base.slots):
        raise ValueError("need one pool per chain slot")
    options = []
    for slot, pool in zip(base.slots, pools):
        if all(g.addr != slot.addr for g in pool):
            raise ValueError(f"pool for slot {slot.addr:#x} does not contain it")
        options.append([slot] + find_similar(slot, pool, seed, count))
    return options


def count_variants(base: RopChain, pools, seed: int = 0, count: int = DEFAULT_PROBES) -> int:
    return math.prod(len(opts) for opts in _alternatives(base, pools, seed, count))


def enumerate_variants(base: RopChain, pools, cap: int = DEFAULT_CAP, seed: int = 0,
                       count: int = DEFAULT_PROBES) -> list[RopChain]:
    """Chains obtained by swapping each slot for similar gadgets.

    Mixed-radix order with the last slot varying fastest; the first chain is
    *base* itself. At most *cap* chains are returned.
    """
    if cap < 1:
        raise ValueError("cap must be at least 1")
    options = _alternatives(base, pools, seed, count)
    out = []
    for combo in itertools.islice(itertools.product(*options), cap):
        out.append(RopChain(tuple(combo), base.inline_data, base.source, base.terminator))
    return out


def source_pools(image: ProgramImage, chain: RopChain, max_len: int = MAX_GADGET_LEN) -> list[list[Slot]]:
    """Per-slot pools drawn from the segment the chain's gadgets come from."""
    if any(isinstance(s, JmpLink) for s in chain.slots):
        pool = scan_jmp_links(image, segment=_SEGMENT_FOR_SOURCE[chain.source])
    else:
        pool = scan_gadgets(image, max_len, segment=_SEGMENT_FOR_SOURCE[chain.source])
    return [pool] * len(chain.slots)


def generate_attacks(image: ProgramImage, count: int, code_share: float = 30 / 730,
                     seed: int = 0) -> list[RopChain]:
    """*count* chains split between code-segment and library gadgets."""
    if count < 1:
        raise ValueError("need at least one attack")
    n_code = min(count, max(1, round(count * code_share))) if count > 1 else 0
    chains = []
    for source, n in ((CODE_SEGMENT, n_code), (LIBRARY, count - n_code)):
        if n == 0:
            continue
        base = base_chain(image, source, seed=seed)
        variants = enumerate_variants(base, source_pools(image, base), cap=n, seed=seed)
        if len(variants) < n:
            raise ChainBuildError(f"only {len(variants)} {source} variants available, need {n}")
        chains.extend(variants)
    return chains
