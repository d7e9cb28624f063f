import itertools

import pytest

from ropwatch import corpus, gadgets
from ropwatch.gadgets import (
    FAULTING,
    Gadget,
    RopChain,
    base_chain,
    count_variants,
    effect_signature,
    enumerate_variants,
    find_similar,
    generate_attacks,
    jmp_gadget_chain,
    scan_gadgets,
    scan_jmp_links,
    source_pools,
)
from ropwatch.isa import Imm, Instruction, Mem, OpcodeClass, Reg, assemble, disassemble
from ropwatch.vm import MachineFault, MachineState, execute, exploit_run


def brute_force_gadgets(image, max_len=6):
    """Every window of the linear disassembly that ends in RET with only
    plain instructions before it."""
    pairs = disassemble(image)
    found = set()
    for i in range(len(pairs)):
        for j in range(i, min(i + max_len, len(pairs))):
            body = [ins for _, ins in pairs[i:j + 1]]
            if body[-1].cls is OpcodeClass.RET and all(b.cls is OpcodeClass.OTHER for b in body[:-1]):
                found.add((pairs[i][0], tuple(body)))
    return found


def _as_set(gs):
    return {(g.addr, g.body) for g in gs}


def test_scan_trivial():
    img = assemble("MOV r0, 1\nPOP r1\nRET\nCALL 0x1000\nNOP\nRET 1\n")
    got = scan_gadgets(img)
    assert [(g.addr, g.mnemonics) for g in got] == [
        (0x1000, ["MOV", "POP", "RET"]), (0x1002, ["POP", "RET"]), (0x1003, ["RET"]),
        (0x1006, ["NOP", "RET"]), (0x1007, ["RET"]),
    ]
    assert _as_set(scan_gadgets(img, max_len=2)) == brute_force_gadgets(img, 2)
    with pytest.raises(ValueError):
        scan_gadgets(img, max_len=7)


def test_scan_matches_oracle_on_corpus(vuln):
    assert _as_set(scan_gadgets(vuln)) == brute_force_gadgets(vuln)
    for prog in corpus.legit_programs(3, 16):
        img = prog.image()
        for n in (1, 3, 6):
            assert _as_set(scan_gadgets(img, n)) == brute_force_gadgets(img, n)


def test_scan_by_segment(vuln):
    lo, hi = vuln.segments["lib"]
    lib = scan_gadgets(vuln, segment="lib")
    assert lib and all(lo <= g.addr < hi for g in lib)
    code = scan_gadgets(vuln, segment="code")
    assert _as_set(lib) | _as_set(code) == _as_set(scan_gadgets(vuln))


def test_gadget_validation():
    with pytest.raises(ValueError):
        Gadget(0x1000, (Instruction("NOP"),))
    with pytest.raises(ValueError):
        Gadget(0x1000, (Instruction("JMP", (Imm(0x1000),)), Instruction("RET")))


# --- similarity -----------------------------------------------------------

def _g(*lines):
    img = assemble("\n".join(lines) + "\n")
    return Gadget(0x1000, tuple(ins for _, ins in disassemble(img)))


def _probe_oracle(a, b, trials=16):
    """Run both bodies with vm.execute from identical random states."""
    import random

    rng = random.Random(99)
    for _ in range(trials):
        regs = {r: rng.randrange(0x8000, 0xE000) for r in ("r0", "r1", "r2", "r3", "bp")}
        regs["sp"] = 0xF000
        stack = {0xF000 + i: rng.randrange(1 << 32) for i in range(8)}
        outs = []
        for g in (a, b):
            st = MachineState(regs=dict(regs))
            st.memory.update(stack)
            try:
                for ins in g.body:
                    execute(st, 0x1000, ins)
            except MachineFault:
                return False
            outs.append((st.regs, st.ip, st.flags, dict(st.memory), st.output, st.halted))
        if outs[0] != outs[1]:
            return False
    return True


PAIRS = [
    (("POP r0", "RET"), ("NOP", "POP r0", "RET"), True),
    (("POP r0", "RET"), ("POP r0", "NOP", "RET"), True),
    (("POP r0", "RET"), ("POP r0", "ADD r0, 0", "RET"), True),
    (("POP r0", "RET"), ("POP r1", "RET"), False),
    (("POP r0", "RET"), ("POP r0", "ADD r0, 1", "RET"), False),
    (("RET",), ("PUSH r0", "POP r0", "RET"), False),  # writes memory below sp
    (("RET",), ("NOP", "NOP", "RET"), True),
    (("RET",), ("CMP r0, r1", "RET"), False),
    (("OUT r1", "RET"), ("OUT r1", "NOP", "RET"), True),
    (("STORE [r1], r0", "RET"), ("NOP", "STORE [r1], r0", "RET"), True),
    (("STORE [r1], r0", "RET"), ("STORE [r1+1], r0", "RET"), False),
    (("LOAD r0, [r1]", "RET"), ("LOAD r0, [r1]", "NOP", "RET"), True),
]


@pytest.mark.parametrize("a,b,expect", PAIRS)
def test_similarity_against_probe_oracle(a, b, expect):
    ga, gb = _g(*a), _g(*b)
    assert _probe_oracle(ga, gb) is expect
    assert (effect_signature(ga) == effect_signature(gb)) is expect


def test_faulting_and_halt_never_similar():
    h = _g("HALT", "RET")
    assert effect_signature(h) == FAULTING
    assert find_similar(h, [h, _g("HALT", "NOP", "RET")]) == []


def test_find_similar_excludes_self_and_sorts(vuln):
    pool = scan_gadgets(vuln)
    g = next(g for g in pool if g.mnemonics == ["POP", "RET"])
    sims = find_similar(g, pool)
    assert g not in sims
    assert [s.addr for s in sims] == sorted(s.addr for s in sims)
    assert all(s.body[-2] == g.body[0] or len(s.body) > 2 for s in sims)


# --- counting and enumeration ---------------------------------------------

FIXTURE = """\
a0: POP r0
    RET
a1: NOP
    POP r0
    RET
b0: POP r1
    RET
c0: POP r2
    RET
b1: NOP
    POP r1
    RET
b2: POP r1
    NOP
    RET
"""


@pytest.fixture(scope="module")
def fixture_image():
    return assemble(FIXTURE)


def _labelled_pool(img):
    # Only the labelled gadgets; scanned suffixes like a1+1 would add more.
    return [_slot(img, n) for n in ("a0", "a1", "b0", "c0", "b1", "b2")]


def _slot(img, name):
    return next(g for g in scan_gadgets(img) if g.addr == img.symbols[name])


@pytest.mark.parametrize("names,expected", [
    (("a0", "b0", "c0"), 6),      # alternatives (1, 2, 0)
    (("c0",), 1),
    (("a0", "a0"), 4),
    (("b0", "b0", "b0"), 27),
    (("a1", "b2", "c0", "a0"), 2 * 3 * 1 * 2),
])
def test_count_is_product(fixture_image, names, expected):
    chain = RopChain(tuple(_slot(fixture_image, n) for n in names))
    pool = _labelled_pool(fixture_image)
    pools = [pool] * len(names)
    alts = [len(find_similar(s, pool)) for s in chain.slots]
    assert count_variants(chain, pools) == expected
    assert expected == eval("*".join(str(1 + a) for a in alts))
    variants = enumerate_variants(chain, pools)
    assert len(variants) == expected
    assert len({v.addresses for v in variants}) == expected


def test_enumeration_order_and_cap(fixture_image):
    chain = RopChain(tuple(_slot(fixture_image, n) for n in ("a0", "b0", "c0")))
    pool = _labelled_pool(fixture_image)
    s = fixture_image.symbols
    got = [v.addresses for v in enumerate_variants(chain, [pool] * 3)]
    expected = list(itertools.product((s["a0"], s["a1"]), (s["b0"], s["b1"], s["b2"]), (s["c0"],)))
    assert got == expected
    assert got[0] == chain.addresses
    assert [v.addresses for v in enumerate_variants(chain, [pool] * 3, cap=4)] == expected[:4]
    with pytest.raises(ValueError):
        enumerate_variants(chain, [pool] * 3, cap=0)


def test_pools_by_mapping_and_missing_slot(fixture_image):
    chain = RopChain((_slot(fixture_image, "a0"),))
    assert count_variants(chain, {0: _labelled_pool(fixture_image)}) == 2
    # the scanned pool also holds the POP r0; RET suffix of a1
    assert count_variants(chain, {0: scan_gadgets(fixture_image)}) == 3
    with pytest.raises(ValueError):
        count_variants(chain, [[_slot(fixture_image, "b0")]])
    with pytest.raises(ValueError):
        count_variants(chain, [])


# --- chains --------------------------------------------------------------

def interpret_chain(chain, symbols):
    """Independent model of a chain: the stack is the chain's word list and
    each gadget body acts on a register file and a write log."""
    stack = list(chain.words())
    regs, writes = {}, {}
    while stack:
        addr = stack.pop(0)
        if addr == symbols["exit"]:
            return writes
        slot = next(s for s in chain.slots if s.addr == addr)
        for ins in slot.body:
            m, ops = ins.mnemonic, ins.operands
            if m == "POP":
                regs[ops[0].name] = stack.pop(0)
            elif m == "STORE":
                mem = ops[0]
                writes[regs[mem.base] + mem.disp] = regs[ops[1].name]
            elif m == "ADD" and isinstance(ops[1], Imm):
                regs[ops[0].name] = regs[ops[0].name] + ops[1].value
            elif m in ("NOP", "RET", "JMP"):
                pass
            else:
                raise AssertionError(f"unmodelled {ins}")
    raise AssertionError("chain never reached exit")


@pytest.mark.parametrize("source", [gadgets.CODE_SEGMENT, gadgets.LIBRARY])
def test_base_chain_marker_against_interpreter(vuln, source):
    chain = base_chain(vuln, source)
    marker = vuln.symbols["marker"]
    writes = interpret_chain(chain, vuln.symbols)
    assert writes == dict(gadgets.default_writes(vuln, len(writes)))
    rec = exploit_run(vuln, chain)
    assert rec.exit.kind == "Halted"
    for addr, value in writes.items():
        assert rec.state.memory[addr] == value
    assert marker in writes


def test_base_chain_shapes(vuln):
    code = base_chain(vuln, gadgets.CODE_SEGMENT)
    lib = base_chain(vuln, gadgets.LIBRARY)
    lo, hi = vuln.segments["lib"]
    assert all(not lo <= a < hi for a in code.addresses)
    assert all(lo <= a < hi for a in lib.addresses)
    assert len(code.slots) == 3 and len(lib.slots) == 6
    assert code.terminator == lib.terminator == vuln.symbols["exit"]


def test_variant_counts(vuln):
    for source, expected in ((gadgets.CODE_SEGMENT, 36), (gadgets.LIBRARY, 1_440_000)):
        base = base_chain(vuln, source)
        assert count_variants(base, source_pools(vuln, base)) == expected


def test_chain_json_roundtrip(vuln):
    chain = base_chain(vuln, gadgets.LIBRARY)
    again = RopChain.from_json(chain.to_json(), vuln)
    assert again == chain
    bad = chain.to_json()
    bad["slots"][0]["mnemonics"] = ["HALT"]
    with pytest.raises(ValueError):
        RopChain.from_json(bad, vuln)


def test_chain_requires_slots():
    with pytest.raises(ValueError):
        RopChain(())


def test_generate_attacks_split(vuln):
    chains = generate_attacks(vuln, 146)
    sources = [c.source for c in chains]
    assert sources.count(gadgets.CODE_SEGMENT) == 6
    assert sources.count(gadgets.LIBRARY) == 140
    assert len({c.addresses for c in chains}) == 146
    assert generate_attacks(vuln, 146) == chains
    with pytest.raises(gadgets.ChainBuildError):
        generate_attacks(vuln, 730, code_share=0.5)


def test_jmp_links_and_chain(vuln):
    links = scan_jmp_links(vuln, segment="code")
    assert links
    for link in links:
        assert link.body[-1].cls is OpcodeClass.RET
        assert any(ins.mnemonic == "JMP" for ins in link.body)
    chain = jmp_gadget_chain(vuln)
    rec = exploit_run(vuln, chain)
    assert rec.exit.kind == "Halted"
    assert rec.state.memory[vuln.symbols["marker"]] == 0xC0DE
