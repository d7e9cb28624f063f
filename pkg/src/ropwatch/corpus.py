"""Program corpus: the vulnerable target, the shared library every program is
linked against, and seeded generators for legitimate programs.

Every generated program links ``toylib`` after its own code, so gadget
pools exist in both the program's code segment and the library segment.
Calling convention for library routines: arguments in ``r0``/``r1``, result
in ``r0``, everything else preserved.
"""

from __future__ import annotations

import functools
import random
from dataclasses import dataclass, field

from .isa import ProgramImage, assemble

SCRATCH = "scratch"

VULNERABLE_SOURCE = """\
; Reads a length word and copies that many input words into a 16-word stack
; buffer without checking the length.
.entry main
main:
    PUSH bp
    MOV bp, sp
    CALL init
    CALL copyn
    STORE [result], r0
    CALL report
    CALL getcount
    MOV r1, statuscell
    CALL setstatus
    CALL keep0
    MOV sp, bp
    POP bp
exit:
    HALT

init:                   ; zero the result cells, keeps r1
    PUSH r1
    MOV r1, result
    MOV r0, 0
    STORE [r1], r0
    ADD r1, 1
    STORE [r1], r0
    POP r1
    NOP
    RET

copyn:                  ; r0 = sum of the copied words
    SUB sp, 16
    MOV r1, sp
    IN r2
    MOV r0, 0
copy_loop:
    CMP r2, 0
    JE copy_done
    IN r3
    STORE [r1], r3
    ADD r0, r3
    ADD r1, 1
    SUB r2, 1
    JMP copy_loop
copy_done:
    ADD sp, 16
    RET

report:                 ; print result, bump count; keeps r0, r1
    PUSH r0
    PUSH r1
    LOAD r1, [result]
    OUT r1
    LOAD r1, [count]
    ADD r1, 1
    STORE [count], r1
    POP r1
    NOP
    POP r0
    RET

getcount:               ; r0 = count, keeps r1
    PUSH r1
    LOAD r1, [count]
    MOV r0, r1
    POP r1
    JMP common_ret

setstatus:              ; [r1] = r0
    NOP
    STORE [r1], r0
    JMP common_ret

keep0:                  ; print r0, keeps it
    PUSH r0
    OUT r0
    POP r0
    JMP common_ret

common_ret:             ; shared padded epilogue
    ADD r2, 0
    ADD r3, 0
    NOP
    NOP
    NOP
    NOP
    RET

; helpers below are not reached from main
save:                   ; [r1] = r0, logging r0 + 7
    PUSH r0
    ADD r0, 7
    OUT r0
    POP r0
    NOP
    STORE [r1], r0
    RET

clamp:                  ; r0 = r0 + r1 - 16, keeps r1
    PUSH r1
    ADD r0, r1
    SUB r0, 16
    OUT r0
    POP r1
    RET

fold:                   ; r0 = r0 + [r1], keeps r1
    PUSH r1
    LOAD r1, [r1]
    ADD r0, r1
    OUT r0
    POP r1
    NOP
    RET

emit1:                  ; print r0 + 1, keeps r0
    PUSH r0
    ADD r0, 1
    OUT r0
    NOP
    POP r0
    RET

put:                    ; [r1] = r0, logging r0
    PUSH r2
    MOV r2, r0
    OUT r2
    POP r2
    STORE [r1], r0
    NOP
    RET

result: .word 0
count: .word 0
statuscell: .word 0
marker: .word 0, 0, 0, 0
scratch: .word 0, 0, 0, 0, 0, 0, 0, 0
"""

MARKER_SYMBOL = "marker"

_LIB_TAILS = (
    "    POP {x}\n    RET\n",
    "    NOP\n    POP {x}\n    RET\n",
    "    POP {x}\n    NOP\n    RET\n",
    "    POP {x}\n    ADD {x}, 0\n    RET\n",
)

_STORE_TAILS = (
    "    STORE [r1], r0\n    RET\n",
    "    NOP\n    STORE [r1], r0\n    RET\n",
    "    STORE [r1], r0\n    NOP\n    RET\n",
)


@dataclass(frozen=True)
class LibRoutine:
    name: str
    kind: str  # "emit" | "mix" | "put" | "arg"


def _toylib() -> tuple[str, tuple[LibRoutine, ...]]:
    parts: list[str] = []
    routines: list[LibRoutine] = []
    k = 3
    # Families are laid out in separate blocks so gadgets of different
    # kinds sit far apart, as they do in a real libc.
    for x in ("r0", "r2", "r1", "r3"):
        for rep in range(2):
            for t, tail in enumerate(_LIB_TAILS):
                name = f"lib_emit_{x}_{rep}{t}"
                parts.append(
                    f"{name}:\n"
                    f"    PUSH {x}\n    ADD {x}, {k}\n    OUT {x}\n    SUB {x}, 1\n    OUT {x}\n"
                    + tail.format(x=x)
                )
                routines.append(LibRoutine(name, "emit"))
                k += 2
        for rep in range(2):
            name = f"lib_mix_{x}_{rep}"
            other = "r2" if x != "r2" else "r3"
            parts.append(
                f"{name}:\n"
                f"    PUSH {other}\n    MOV {other}, r0\n    ADD {other}, r1\n    ADD {other}, {k}\n"
                f"    MOV r0, {other}\n    POP {other}\n    RET\n"
            )
            routines.append(LibRoutine(name, "mix"))
            k += 1
    for rep in range(3):
        for t, tail in enumerate(_STORE_TAILS):
            name = f"lib_put_{rep}{t}"
            parts.append(
                f"{name}:\n"
                f"    PUSH r2\n    MOV r2, r0\n    ADD r2, {k}\n    OUT r2\n    POP r2\n"
                + tail
            )
            routines.append(LibRoutine(name, "put"))
            k += 3
    for rep in range(2):
        name = f"lib_arg_{rep}"
        parts.append(
            f"{name}:                 ; callee pops its stack argument\n"
            f"    PUSH r2\n    LOAD r2, [sp+2]\n    ADD r0, r2\n    ADD r0, {k}\n    OUT r0\n"
            f"    POP r2\n    RET 1\n"
        )
        routines.append(LibRoutine(name, "arg"))
        k += 1
    return "".join(parts), tuple(routines)


TOYLIB_SOURCE, TOYLIB_ROUTINES = _toylib()
CALLABLE_ROUTINES = tuple(r.name for r in TOYLIB_ROUTINES if r.kind != "arg")


def link(source: str) -> ProgramImage:
    """Assemble *source* with ``toylib`` appended as the ``lib`` segment."""
    return assemble(source.rstrip("\n") + "\n.segment lib\n" + TOYLIB_SOURCE)


@functools.lru_cache(maxsize=None)
def vulnerable_image() -> ProgramImage:
    return link(VULNERABLE_SOURCE)


# ------------------------------------------------------------ legit programs

@dataclass(frozen=True)
class CorpusProgram:
    name: str
    archetype: str
    source: str
    inputs: tuple[int, ...] = ()
    expect: frozenset = field(default_factory=frozenset)  # indicators expected to alert

    def image(self) -> ProgramImage:
        if self.archetype == "vulnerable":
            return vulnerable_image()
        return link_cached(self.source)


@functools.lru_cache(maxsize=512)
def link_cached(source: str) -> ProgramImage:
    return link(source)


_DATA_TAIL = "scratch: .word 0, 0, 0, 0, 0, 0, 0, 0\nacc: .word 0\n"


def _random_ops(rng: random.Random, n: int, lib_rate: float = 0.0,
                regs: tuple[str, ...] = ("r0", "r1", "r2", "r3")) -> list[str]:
    ops = []
    for _ in range(n):
        if lib_rate and rng.random() < lib_rate:
            ops.append(f"MOV r1, {SCRATCH}")
            ops.append(f"CALL {rng.choice(CALLABLE_ROUTINES)}")
            continue
        x, y = rng.sample(regs, 2)
        roll = rng.randrange(6)
        if roll == 0:
            ops.append(f"MOV {x}, {rng.randrange(1, 500)}")
        elif roll == 1:
            ops.append(f"ADD {x}, {y}")
        elif roll == 2:
            ops.append(f"SUB {x}, {rng.randrange(1, 9)}")
        elif roll == 3:
            ops.append(f"STORE [{SCRATCH}+{rng.randrange(8)}], {x}")
        elif roll == 4:
            ops.append(f"LOAD {x}, [{SCRATCH}+{rng.randrange(8)}]")
        else:
            ops.append(f"OUT {x}")
    return ops


def _body(lines: list[str]) -> str:
    return "".join(f"    {line}\n" for line in lines)


def straight_line(rng: random.Random, idx: int) -> CorpusProgram:
    ops = _random_ops(rng, rng.randrange(10, 40), lib_rate=0.15)
    src = ("main:\n" + _body(["PUSH bp", "MOV bp, sp"] + ops + ["MOV sp, bp", "POP bp", "HALT"])
           + _DATA_TAIL)
    return CorpusProgram(f"straight-{idx:03d}", "straight", src)


def nested_calls(rng: random.Random, idx: int) -> CorpusProgram:
    depth = rng.randrange(2, 7)
    funcs = []
    for i in range(depth):
        pre = _random_ops(rng, rng.randrange(0, 4))
        if i + 1 < depth:
            inner = [f"CALL f{i + 1}"]
        else:
            inner = [f"MOV r1, {SCRATCH}", f"CALL {rng.choice(CALLABLE_ROUTINES)}"] \
                if rng.random() < 0.5 else _random_ops(rng, 2)
        funcs.append(
            f"f{i}:\n" + _body(
                ["PUSH bp", "MOV bp, sp", "PUSH r2", f"ADD r0, {i + 1}", "MOV r2, r0"]
                + pre + inner
                + ["ADD r0, r2", f"STORE [{SCRATCH}+{i % 8}], r0", "OUT r0",
                   "POP r2", "MOV sp, bp", "POP bp", "RET"]
            )
        )
    calls = rng.randrange(1, 4)
    main = ["PUSH bp", "MOV bp, sp", f"MOV r0, {rng.randrange(100)}"]
    for _ in range(calls):
        main += ["CALL f0"] + _random_ops(rng, rng.randrange(1, 4))
    main += ["MOV sp, bp", "POP bp", "HALT"]
    src = "main:\n" + _body(main) + "".join(funcs) + _DATA_TAIL
    return CorpusProgram(f"nested-{idx:03d}", "nested", src)


def recursive(rng: random.Random, idx: int) -> CorpusProgram:
    n = rng.randrange(3, 13)
    step = rng.choice(("ADD r0, r1", "ADD r0, r0", "SUB r0, r1"))
    src = (
        "main:\n" + _body(["PUSH bp", "MOV bp, sp", f"MOV r0, {n}", "CALL rec",
                           "OUT r0", "MOV sp, bp", "POP bp", "HALT"])
        + "rec:\n" + _body([
            "PUSH bp", "MOV bp, sp", "PUSH r1", "CMP r0, 0", "JE rec_base",
            "MOV r1, r0", "SUB r0, 1", "CALL rec",
            step, "STORE [acc], r0", "OUT r0", "POP r1", "MOV sp, bp", "POP bp", "RET",
        ])
        + "rec_base:\n" + _body([f"MOV r0, {rng.randrange(1, 5)}", "POP r1", "MOV sp, bp",
                                 "POP bp", "RET"])
        + _DATA_TAIL
    )
    return CorpusProgram(f"recursive-{idx:03d}", "recursive", src)


def loop_heavy(rng: random.Random, idx: int) -> CorpusProgram:
    outer = rng.randrange(2, 8)
    inner = rng.randrange(2, 10)
    body = _random_ops(rng, rng.randrange(1, 5), regs=("r0", "r1", "r2"))
    lib = rng.choice(CALLABLE_ROUTINES)
    src = (
        "main:\n" + _body(["PUSH bp", "MOV bp, sp", f"MOV r3, {outer}"])
        + "outer:\n" + _body(["PUSH r3", f"MOV r3, {inner}"])
        + "inner:\n" + _body(body + ["PUSH r3", f"MOV r1, {SCRATCH}", f"CALL {lib}",
                                      "POP r3", "ADD r2, r0", "SUB r3, 1", "CMP r3, 0",
                                      "JNE inner"])
        + _body(["POP r3", "OUT r2", "SUB r3, 1", "CMP r3, 0", "JNE outer",
                 "MOV sp, bp", "POP bp", "HALT"])
        + _DATA_TAIL
    )
    return CorpusProgram(f"loop-{idx:03d}", "loop", src)


def jump_past_ret(rng: random.Random, idx: int) -> CorpusProgram:
    rounds = rng.randrange(3, 9)
    limit = rng.randrange(5, 40)
    src = (
        "main:\n" + _body(["PUSH bp", "MOV bp, sp", f"MOV r3, {rounds}"])
        + "again:\n" + _body(["MOV r0, r3", f"ADD r0, {rng.randrange(0, 30)}", "CALL risky"])
        + "resume:\n" + _body(["OUT r0", "SUB r3, 1", "CMP r3, 0", "JNE again",
                               "MOV sp, bp", "POP bp", "HALT"])
        + "risky:\n" + _body(["PUSH bp", "MOV bp, sp", "ADD r0, 3", f"CMP r0, {limit}", "JA raise",
                              "OUT r0", "ADD r0, 1", f"STORE [{SCRATCH}], r0", "NOP",
                              "MOV sp, bp", "POP bp", "RET"])
        + "raise:                  ; unwind the frame and drop the return address\n"
        + _body(["MOV sp, bp", "POP bp", "POP r2", "MOV r0, 0", "JMP resume"])
        + _DATA_TAIL
    )
    return CorpusProgram(f"jumppast-{idx:03d}", "jump-past-ret", src)


def vulnerable_benign(rng: random.Random, idx: int) -> CorpusProgram:
    length = rng.randrange(0, 17)
    inputs = (length,) + tuple(rng.randrange(1, 1000) for _ in range(length))
    return CorpusProgram(f"vulnerable-{idx:03d}", "vulnerable", VULNERABLE_SOURCE, inputs)


def tailcall(rng: random.Random, idx: int) -> CorpusProgram:
    """Enters a function with JMP after pushing the return address by hand,
    so its RET has no matching CALL."""
    src = (
        "main:\n" + _body(["PUSH bp", "MOV bp, sp", f"MOV r0, {rng.randrange(50)}",
                           "PUSH after_work", "JMP work"])
        + "after_work:\n" + _body(["OUT r0", "MOV sp, bp", "POP bp", "HALT"])
        + "work:\n" + _body(["PUSH bp", "MOV bp, sp", "ADD r0, 2", "OUT r0",
                             f"STORE [{SCRATCH}], r0", "MOV sp, bp", "POP bp", "RET"])
        + _DATA_TAIL
    )
    return CorpusProgram(f"tailcall-{idx:03d}", "tailcall", src, expect=frozenset({"parity"}))


def tinyloop(rng: random.Random, idx: int) -> CorpusProgram:
    """Recursive counting loop with a one-instruction body per return."""
    n = rng.randrange(4, 12)
    src = (
        "main:\n" + _body([f"MOV r0, {n}", "MOV r1, 0", "CALL tick", "OUT r1", "HALT"])
        + "tick:\n" + _body(["CMP r0, 0", "JE tick_base", "SUB r0, 1", "CALL tick",
                             "ADD r1, 1", "RET"])
        + "tick_base:\n" + _body(["RET"])
        + _DATA_TAIL
    )
    return CorpusProgram(f"tinyloop-{idx:03d}", "tinyloop", src, expect=frozenset({"gap"}))


CLEAN_ARCHETYPES = {
    "straight": straight_line,
    "nested": nested_calls,
    "recursive": recursive,
    "loop": loop_heavy,
    "jump-past-ret": jump_past_ret,
    "vulnerable": vulnerable_benign,
}

FP_ARCHETYPES = {"tailcall": tailcall, "tinyloop": tinyloop}

# Archetypes that break the call/ret pairing on purpose.
UNPAIRED_ARCHETYPES = frozenset({"tailcall", "jump-past-ret"})


# Share of each FP-prone archetype in the legitimate corpus, per 270 programs.
FP_RATES = {"tailcall": 3, "tinyloop": 5}
FP_RATE_BASE = 270


def fp_counts(count: int) -> dict[str, int]:
    """How many programs of each FP-prone archetype a corpus of *count* gets:
    the rates above, rounded, at least one each while room remains."""
    out = {}
    room = count - 1
    for name, rate in FP_RATES.items():
        n = min(room, max(1, round(count * rate / FP_RATE_BASE)))
        out[name] = max(0, n)
        room -= out[name]
    return out


def legit_programs(seed: int, count: int) -> list[CorpusProgram]:
    """Seeded legitimate corpus: the ``tailcall`` and ``tinyloop`` programs
    first (see :func:`fp_counts`), the rest cycling through the clean
    archetypes."""
    if count < 1:
        raise ValueError("need at least one legitimate program")
    rng = random.Random(seed)
    programs = []
    for name, n in fp_counts(count).items():
        make = FP_ARCHETYPES[name]
        programs.extend(make(rng, i) for i in range(n))
    names = list(CLEAN_ARCHETYPES)
    for i in range(count - len(programs)):
        make = CLEAN_ARCHETYPES[names[i % len(names)]]
        programs.append(make(rng, i))
    return programs
