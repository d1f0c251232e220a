"""Virtual machine semantics: arithmetic, memory protection, faults, scheduling, oracle."""
from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowlab.asmfmt import parse_program
from shadowlab.loader import load
from shadowlab.machine import (ATTACKER, AccessContext, FaultKind, InterleavingScript, Machine,
                               MachineError, is_canonical, popcnt64)

MASK64 = (1 << 64) - 1
u64 = st.integers(min_value=0, max_value=MASK64)


def machine_for(body: str, data: str = "", **kw) -> Machine:
    src = f".entry main\n{data}\n.func main\n{body}\n    ret\n"
    return load(parse_program(src), **kw)


def run(body: str, data: str = "", **kw):
    m = machine_for(body, data, **kw)
    fault = m.run(100_000)
    return m, fault


# ----------------------------------------------------------------- oracles
def test_arithmetic_wraps_at_64_bits():
    m, fault = run("    mov g1, -1\n    add g1, 2\n    out g1\n    mov g2, 1\n    shl g2, 63\n"
                   "    shl g2, 1\n    out g2\n    mov g3, 0\n    sub g3, 1\n    out g3\n")
    assert fault is None
    assert m.threads[0].outputs == [1, 0, MASK64]


def test_popcnt_and_flags():
    m, fault = run("    mov g1, 0xF0F0\n    popcnt g2, g1\n    out g2\n    cmp g2, 8\n"
                   "    je same\n    out 0\nsame:\n    mov g3, -5\n    cmp g3, 3\n    jl less\n"
                   "    out 0\nless:\n    out 1\n")
    assert fault is None
    assert m.threads[0].outputs == [8, 1]


def test_movb_replaces_low_byte_only():
    m, fault = run("    mov g1, blob\n    mov g2, 0x1200\n    movb g2, [g1]\n    out g2\n",
                   ".data blob 8 0xAB")
    assert fault is None
    assert m.threads[0].outputs == [0x12AB]


def test_non_canonical_jump_faults_at_the_jump():
    m, fault = run("    mov g1, 1\n    shl g1, 48\n    jmp g1\n")
    assert fault.kind is FaultKind.NON_CANONICAL
    assert fault.address == 1 << 48


def test_unmapped_load_faults():
    _, fault = run("    mov g1, 0x10\n    mov g2, [g1]\n")
    assert fault.kind is FaultKind.UNMAPPED


def test_code_is_not_readable():
    m = machine_for("    mov g1, main\n    mov g2, [g1]\n")
    assert m.run(100).kind is FaultKind.PERMISSION


def test_fault_is_atomic():
    # a faulting pop must leave both sp and the destination untouched
    m = machine_for("    mov g3, 7\n    mov sp, 0x10\n    pop g3\n")
    t = m.threads[0]
    fault = m.run(100)
    assert fault.kind is FaultKind.UNMAPPED
    assert t.regs[3] == 7
    assert t.regs[16] == 0x10
    assert t.halted and t.fault == fault


def test_abort_is_a_shadow_mismatch():
    _, fault = run("    abort\n")
    assert fault.kind is FaultKind.SHADOW_MISMATCH


def test_key_permission_denies_write_and_access():
    m = machine_for("    nop\n", ".data secret 8 5")
    addr = m.symbols["secret"]
    m.key_scheme = True
    m.set_key(addr, 8, 3)
    t = m.threads[0]
    t.kperm = 0b10 << 6          # write-disable key 3
    assert m.access_memory(addr, 8, "read", AccessContext(thread=0)) == 5
    with pytest.raises(Exception) as info:
        m.access_memory(addr, 8, "write", AccessContext(thread=0), 1)
    assert info.value.kind is FaultKind.KEY
    t.kperm = 0b01 << 6          # access-disable key 3
    with pytest.raises(Exception) as info:
        m.access_memory(addr, 8, "read", AccessContext(thread=0))
    assert info.value.kind is FaultKind.KEY


def test_wrkperm_requires_zeroed_companions():
    _, fault = run("    mov g2, 1\n    wrkperm 0\n")
    assert fault.kind is FaultKind.PERMISSION
    m, fault = run("    xor g2, g2\n    xor g3, g3\n    wrkperm 0xC\n")
    assert fault is None
    assert m.threads[0].kperm == 0xC


def test_bounds_check_faults_inside_region():
    m = machine_for("    mov g1, 0x5000\n    bndcl [g1]\n    bndcu [g1]\n")
    m.bnd = (0x4000, 0x6000)
    assert m.run(100).kind is FaultKind.BOUNDS
    m = machine_for("    mov g1, 0x7000\n    bndcl [g1]\n    bndcu [g1]\n")
    m.bnd = (0x4000, 0x6000)
    assert m.run(100) is None


def test_resolved_immediate_out_of_range_is_rejected():
    with pytest.raises(MachineError, match="exceeds 32 bits"):
        machine_for("    mov g1, main+0x7FFFFFFF\n")


def test_step_budget():
    m = machine_for("spin:\n    jmp spin\n")
    with pytest.raises(MachineError):
        m.run(50)


# ------------------------------------------------------------ scheduling
SPAWN = (".entry main\n.func main\n    spawn worker, 1\n    mov g5, g0\n    out 100\n"
         "    join g5\n    out 101\n    ret\n.func worker\n    out g1\n    out g1\n    ret\n")


def test_round_robin_is_deterministic():
    def trace():
        m = load(parse_program(SPAWN))
        m.trace = []
        assert m.run(1000) is None
        return m.trace, [t.outputs for t in m.threads]

    a, b = trace(), trace()
    assert a == b
    assert a[1] == [[100, 101], [1, 1]]


def test_script_picks_threads_and_logs_skips():
    m = load(parse_program(SPAWN))
    m.trace = []
    m.script = InterleavingScript({0: 5})
    assert m.run(1000) is None
    assert m.trace[0] == "0,SKIP,5"


def test_attacker_steps_run_between_instructions():
    m = machine_for("    mov g1, flag\n    mov g2, [g1]\n    out g2\n", ".data flag 8 0")
    addr = m.symbols["flag"]
    m.attacker_queue.append(lambda s: s.poke(addr, 99))
    m.script = InterleavingScript({1: ATTACKER})
    assert m.run(100) is None
    assert m.threads[0].outputs == [99]


def test_trace_lines_name_thread_and_effects():
    m = machine_for("    mov g1, 3\n")
    m.trace = []
    m.run(100)
    first = m.trace[0].split(",")
    assert first[:2] == ["0", "0"]
    assert first[3] == "mov" and "g1=0x3" in first[4]


# ----------------------------------------------------------------- oracle
def test_oracle_balances_calls_and_returns():
    src = (".entry main\n.func main\n    call leaf\n    call leaf\n    ret\n"
           ".func leaf\n    ret\n")
    m = load(parse_program(src))
    assert m.run(1000) is None
    assert m.calls == 3 and m.returns == 3
    assert not m.threads[0].oracle
    assert not m.divergences


def test_oracle_flags_a_diverted_return():
    src = (".entry main\n.func main\n    call leaf\n    out 1\n    ret\n"
           ".func leaf\n    mov g1, other\n    mov [sp], g1\n    ret\n"
           ".func other\n    out 2\n    halt\n")
    m = load(parse_program(src))
    assert m.run(1000) is None
    assert m.threads[0].outputs == [2]
    assert len(m.divergences) == 1
    assert m.threads[0].derailed


# ------------------------------------------------------------- properties
@given(u64)
def test_popcnt_matches_bit_count(v):
    assert popcnt64(v) == bin(v).count("1")


@given(u64)
def test_canonical_means_high_bits_clear(v):
    assert is_canonical(v) == (v < (1 << 48))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, (1 << 31) - 1), st.integers(0, (1 << 31) - 1),
       st.sampled_from(["add", "sub", "xor", "or", "and"]))
def test_alu_matches_python(a, b, op):
    m, fault = run(f"    mov g1, {a}\n    mov g2, {b}\n    {op} g1, g2\n    out g1\n")
    expect = {"add": a + b, "sub": a - b, "xor": a ^ b, "or": a | b, "and": a & b}[op] & MASK64
    assert fault is None
    assert m.threads[0].outputs == [expect]


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=63))
def test_fault_shift_makes_any_difference_non_canonical(bit):
    # the Fault policy: popcnt of a nonzero XOR shifted into the high bits
    diff = 1 << bit
    assert not is_canonical((popcnt64(diff) << 48) | 0x400000)


@given(u64, u64)
def test_popcnt_of_xor_is_zero_iff_equal(a, b):
    assert (popcnt64(a ^ b) == 0) == (a == b)


def test_popcnt_of_xor_on_the_8_bit_lattice():
    for a in range(256):
        for b in range(256):
            assert (popcnt64(a ^ b) == 0) == (a == b)


@given(st.integers(0, (1 << 48) - 1))
def test_high_bits_make_any_address_non_canonical(addr):
    assert is_canonical(addr)
    assert not any(is_canonical(addr | (p << 48)) for p in range(1, 64))
