"""Shadow-stack instrumentation of MiniISA programs.

Every protected function gets a prologue that copies its return address
into the shadow region and an epilogue that replaces ``ret`` with a pop,
a shadow load, a validation step and an indirect jump. Tail calls are
rewritten so the tail-calling frame retracts its own entry first.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .asmfmt import Function, Program
from .config import Mapping, ShadowConfig, Validation, Variant
from .isa import Instruction, Mem, Reg, I, M, R, insn


class InstrumentError(ValueError):
    """The program cannot be instrumented under the requested configuration."""


RA_REG = "g0"        # return-address scratch in prologues
POP_REG = "g10"      # program copy of the return address
SHADOW_REG = "g11"   # shadow copy of the return address


def _p(op, *ops, **attrs):
    return insn(op, *ops, cat="prologue", **attrs)


def _e(op, *ops, **attrs):
    return insn(op, *ops, cat="epilogue", **attrs)


def _v(op, *ops, **attrs):
    return insn(op, *ops, cat="validation", **attrs)


# ------------------------------------------------------------------ prologue
def make_prologue(cfg: ShadowConfig) -> List[Instruction]:
    """Instructions that push the incoming return address onto the shadow stack."""
    if cfg.variant is Variant.POP_JMP_ONLY:
        return []
    r = cfg.reserved
    ra = _p("mov", R(RA_REG), M("sp"), ra=True)
    mapping = cfg.mapping
    if mapping is Mapping.PARALLEL_CONSTANT:
        return [ra, _p("mov", M("sp", cfg.offset), R(RA_REG), sw=True)]
    if mapping is Mapping.PARALLEL_REGISTER:
        return [ra, _p("mov", M("sp", index=r), R(RA_REG), sw=True)]
    if mapping is Mapping.COMPACT_REGISTER:
        return [ra,
                _p("mov", M(r), R(RA_REG), sw=True),
                _p("mov", M(r, 8), R("sp"), sw=True),
                _p("lea", R(r), M(r, 16))]
    if mapping is Mapping.COMPACT_SEGMENT:
        return [ra,
                _p("mov", R("g10"), M(None, 0, seg=True)),
                _p("mov", M("g10"), R(RA_REG), sw=True),
                _p("mov", M("g10", 8), R("sp"), sw=True),
                _p("add", R("g10"), I(16)),
                _p("mov", M(None, 0, seg=True), R("g10"), sw=True)]
    # compact global: g2/g3 are borrowed and restored around the update
    return [_p("mov", R("g10"), R("g2")),
            _p("mov", R("g11"), R("g3")),
            ra,
            _p("mov", R("g3"), I("GLOBAL_WORD")),
            _p("mov", R("g2"), M("g3")),
            _p("mov", M("g2"), R(RA_REG), sw=True),
            _p("mov", M("g2", 8), R("sp"), sw=True),
            _p("add", M("g3"), I(16), sw=True),
            _p("mov", R("g2"), R("g10")),
            _p("mov", R("g3"), R("g11"))]


# ------------------------------------------------------------------ epilogue
def shadow_load(cfg: ShadowConfig, popped: bool = True) -> List[Instruction]:
    """Load the shadow return address into g11 and retract the shadow pointer.

    ``popped`` says whether the program return address has already been
    popped (parallel slots are addressed relative to SP).
    """
    r = cfg.reserved
    adj = -8 if popped else 0
    mapping = cfg.mapping
    if mapping is Mapping.PARALLEL_CONSTANT:
        return [_e("mov", R(SHADOW_REG), M("sp", cfg.offset + adj))]
    if mapping is Mapping.PARALLEL_REGISTER:
        return [_e("mov", R(SHADOW_REG), M("sp", adj, index=r))]
    if mapping is Mapping.COMPACT_REGISTER:
        return [_e("mov", R(SHADOW_REG), M(r, -16)),
                _e("lea", R(r), M(r, -16))]
    if mapping is Mapping.COMPACT_SEGMENT:
        return [_e("mov", R(SHADOW_REG), M(None, 0, seg=True)),
                _e("sub", R(SHADOW_REG), I(16)),
                _e("mov", M(None, 0, seg=True), R(SHADOW_REG), sw=True),
                _e("mov", R(SHADOW_REG), M(SHADOW_REG))]
    return [_e("mov", R(SHADOW_REG), I("GLOBAL_WORD")),
            _e("sub", M(SHADOW_REG), I(16), sw=True),
            _e("mov", R(SHADOW_REG), M(SHADOW_REG)),
            _e("mov", R(SHADOW_REG), M(SHADOW_REG))]


def shadow_retract(cfg: ShadowConfig) -> List[Instruction]:
    """Drop the top shadow entry without reading it (tail calls under UseShadow)."""
    r = cfg.reserved
    mapping = cfg.mapping
    if not mapping.compact:
        return []
    if mapping is Mapping.COMPACT_REGISTER:
        return [_e("lea", R(r), M(r, -16))]
    if mapping is Mapping.COMPACT_SEGMENT:
        return [_e("mov", R(SHADOW_REG), M(None, 0, seg=True)),
                _e("sub", R(SHADOW_REG), I(16)),
                _e("mov", M(None, 0, seg=True), R(SHADOW_REG), sw=True)]
    return [_e("mov", R(SHADOW_REG), I("GLOBAL_WORD")),
            _e("sub", M(SHADOW_REG), I(16), sw=True)]


def _check(policy: Validation, target) -> List[Instruction]:
    """Validation of g10 against g11 ending in a jump to ``target``."""
    if policy is Validation.CMP:
        return [_v("cmp", R(POP_REG), R(SHADOW_REG)),
                _v("jne", I("__ss_abort")),
                _e("jmp", target)]
    if policy is Validation.FAULT:
        return [_v("xor", R(SHADOW_REG), R(POP_REG)),
                _v("popcnt", R(SHADOW_REG), R(SHADOW_REG)),
                _v("shl", R(SHADOW_REG), I(48)),
                _v("or", R(SHADOW_REG), R(POP_REG)),
                _e("jmp", R(SHADOW_REG))]
    if policy is Validation.LBP:
        return [_v("xor", R(SHADOW_REG), R(POP_REG)),
                _v("popcnt", R(SHADOW_REG), R(SHADOW_REG)),
                _v("movb", R(SHADOW_REG), M(SHADOW_REG, "LBP_LAST")),
                _e("jmp", target)]
    return [_e("jmp", R(SHADOW_REG))]


def make_epilogue(cfg: ShadowConfig) -> List[Instruction]:
    """Replacement for a ``ret`` instruction."""
    if cfg.variant is Variant.POP_JMP_ONLY:
        return [_e("pop", R(POP_REG)), _e("jmp", R(POP_REG), ret=True)]
    if cfg.variant is Variant.MAINTAIN_ONLY:
        return shadow_load(cfg, popped=False) + [insn("ret")]
    seq = [_e("pop", R(POP_REG))] + shadow_load(cfg) + _check(cfg.validation, R(POP_REG))
    seq[-1] = seq[-1].with_attrs(ret=True)
    return seq


def rewrite_tail_call(cfg: ShadowConfig, jump: Instruction) -> List[Instruction]:
    """Replacement for ``jmp f @tail``: retire this frame's shadow entry, then jump."""
    target = jump.operands[0]
    attrs = {k: v for k, v in jump.attrs.items()}
    final = Instruction("jmp", (target,), attrs)
    if cfg.variant is Variant.POP_JMP_ONLY:
        return [final]
    if cfg.variant is Variant.MAINTAIN_ONLY or cfg.validation is Validation.USE_SHADOW:
        return shadow_retract(cfg) + [final]
    policy = Validation.LBP if cfg.validation is Validation.FAULT else cfg.validation
    check = _check(policy, target)
    check[-1] = final
    return [_e("mov", R(POP_REG), M("sp"))] + shadow_load(cfg, popped=False) + check


# ---------------------------------------------------------------- the pass
def _uses_register(f: Function, reg: str) -> Optional[int]:
    for i, ins in enumerate(f.instructions):
        for o in ins.operands:
            if isinstance(o, Reg) and o.name == reg:
                return i
            if isinstance(o, Mem) and reg in (o.base, o.index):
                return i
    return None


def _relabel(seq: List[Instruction], labels) -> List[Instruction]:
    if labels and seq:
        first = seq[0]
        seq = [Instruction(first.op, first.operands, dict(first.attrs), tuple(labels))] + seq[1:]
    return seq


def instrument_function(f: Function, cfg: ShadowConfig) -> Function:
    out: List[Instruction] = list(make_prologue(cfg))
    for ins in f.instructions:
        if ins.op == "ret" and not ins.attrs.get("cat"):
            out.extend(_relabel(make_epilogue(cfg), ins.labels))
        elif ins.op == "jmp" and ins.attrs.get("tail"):
            out.extend(_relabel(rewrite_tail_call(cfg, ins), ins.labels))
        else:
            out.append(ins)
    return Function(f.name, out, f.protected, f.runtime)


def instrument(p: Program, cfg: ShadowConfig) -> Program:
    """Instrument every protected, non-runtime function of ``p``."""
    q = p.copy()
    if cfg.mapping.uses_register:
        for f in q.functions:
            if f.protected and not f.runtime:
                at = _uses_register(f, cfg.reserved)
                if at is not None:
                    raise InstrumentError(
                        f"function {f.name} uses reserved register {cfg.reserved} "
                        f"(instruction {at}: {f.instructions[at].op})")
    q.functions = [instrument_function(f, cfg) if f.protected and not f.runtime else f
                   for f in q.functions]
    return q


def hook_unwind(p: Program) -> Program:
    """Link shadow-aware setjmp/longjmp instead of the plain ones."""
    q = p.copy()
    q.hooks = tuple(sorted(set(q.hooks) | {"unwind"}))
    return q


def hook_threads(p: Program) -> Program:
    """Give every spawned thread its own shadow state."""
    q = p.copy()
    q.hooks = tuple(sorted(set(q.hooks) | {"threads"}))
    return q


def added_counts(original: Program, instrumented: Program) -> Dict[str, int]:
    """Static instructions added per function."""
    before = {f.name: len(f.instructions) for f in original.functions}
    return {f.name: len(f.instructions) - before.get(f.name, 0) for f in instrumented.functions}


# ------------------------------------------------------------------ checks
def find_rereads(p: Program) -> List[Tuple[str, int]]:
    """Epilogue sites that read the popped return-address slot again.

    A re-read after the pop races with other threads; the epilogues here
    must only use the popped register.
    """
    bad = []
    for f in p.functions:
        after_pop = False
        for i, ins in enumerate(f.instructions):
            if ins.op == "pop" and ins.category == "epilogue":
                after_pop = True
                continue
            if after_pop:
                m = ins.mem_operand()
                if m is not None and m.base == "sp" and m.index is None and m.disp == -8 and not m.seg:
                    bad.append((f.name, i))
                if ins.attrs.get("ret"):
                    after_pop = False
    return bad


@dataclass
class EpilogueOutcome:
    jumped: bool
    target: Optional[int] = None
    fault: Optional[str] = None


class EpilogueHarness:
    """Runs one epilogue at a time with chosen return addresses on the two stacks.

    The machine is loaded once; every run restores registers, the shadow
    pointer and the touched slots before starting.
    """

    def __init__(self, cfg: ShadowConfig):
        from .asmfmt import parse_program
        from .isa import REG_INDEX
        from .loader import load

        p = parse_program(".entry probe\n.func probe unprotected\n    nop\n")
        p.function("probe").instructions = make_epilogue(cfg)
        self.cfg = cfg
        self.m = m = load(p, cfg)
        self.t = t = m.threads[0]
        self.start, self.end = m.layout.functions["probe"]
        self.reg = REG_INDEX[cfg.reserved]
        self.sp = t.regs[16] - 64
        self.regs = list(t.regs)
        self.regs[16] = self.sp
        self.kperm = t.kperm
        self.abort = m.symbols["__ss_abort"]
        self.word = m.symbols["GLOBAL_WORD"]
        self.ptr0 = self._ptr()

    def _ptr(self) -> int:
        mapping, m, t = self.cfg.mapping, self.m, self.t
        if mapping is Mapping.COMPACT_REGISTER:
            return t.regs[self.reg]
        if mapping is Mapping.COMPACT_SEGMENT:
            return m.peek(t.seg)
        if mapping is Mapping.COMPACT_GLOBAL:
            return m.peek(self.word)
        return 0

    def _reset(self, program_ra: int, shadow_ra: int) -> None:
        m, t, sp = self.m, self.t, self.sp
        t.regs[:] = self.regs
        t.ip, t.halted, t.fault, t.kperm = self.start, False, None, self.kperm
        t.oracle, t.derailed = [(program_ra, sp)], False
        m.fault = None
        m.poke(sp, program_ra)
        mapping = self.cfg.mapping
        if mapping is Mapping.PARALLEL_CONSTANT:
            m.poke(sp + self.cfg.offset, shadow_ra)
        elif mapping is Mapping.PARALLEL_REGISTER:
            m.poke((sp + t.regs[self.reg]) & ((1 << 64) - 1), shadow_ra)
        else:
            ptr = self.ptr0
            m.poke(ptr, shadow_ra)
            m.poke(ptr + 8, sp)
            if mapping is Mapping.COMPACT_REGISTER:
                t.regs[self.reg] = ptr + 16
            elif mapping is Mapping.COMPACT_SEGMENT:
                m.poke(t.seg, ptr + 16)
            else:
                m.poke(self.word, ptr + 16)

    def run(self, program_ra: int, shadow_ra: int) -> "EpilogueOutcome":
        self._reset(program_ra, shadow_ra)
        m, t = self.m, self.t
        while self.start <= t.ip < self.end:
            ins = m.code[t.ip]
            _, fault = m.step()
            if fault is not None:
                return EpilogueOutcome(False, fault=fault.kind.value)
            if ins.is_ret or ins.op == "ret":
                return EpilogueOutcome(True, target=t.ip)
        _, fault = m.step()          # the abort stub
        return EpilogueOutcome(False, fault=fault.kind.value if fault else None)


def run_epilogue(cfg: ShadowConfig, program_ra: int, shadow_ra: int) -> EpilogueOutcome:
    """Run one epilogue for a (program return address, shadow return address) pair."""
    return EpilogueHarness(cfg).run(program_ra, shadow_ra)
