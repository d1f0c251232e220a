"""Shadow-region integrity schemes.

Key scheme (thread centric): protected pages carry a key; each thread's
KPERM word write-disables it except inside toggle brackets.
Bounds scheme (code centric): every unprivileged store is preceded by a
two-instruction range check. Privileged move (code centric): only stores
tagged with the region id may write protected pages. Information hiding
relies on the region's address staying secret and enforces nothing.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

from .asmfmt import Function, Program
from .config import Integrity, ShadowConfig
from .isa import Instruction, Mem, Reg, I, R, insn
from .machine import AccessContext, FaultKind, Page

ARG_REGS = ("g2", "g3")      # must be zero for wrkperm
SAVE_REGS = ("g8", "g9")


@dataclass
class IntegrityScheme:
    kind: Integrity
    key: int = 1
    low: int = 0
    high: int = 0
    region: int = 1

    def __post_init__(self):
        if not 0 <= self.key <= 15:
            raise ValueError("key id must be in 0..15")
        if not 0 <= self.region <= 255:
            raise ValueError("region id must be in 0..255")
        if self.low % 4096 or self.high % 4096:
            raise ValueError("protected bounds must be page aligned")

    @property
    def locked_kperm(self) -> int:
        """KPERM with the write-disable bit set for the shadow key."""
        return 1 << (2 * self.key + 1) if self.kind is Integrity.KEY else 0

    @property
    def protected_key(self) -> int:
        return self.region if self.kind is Integrity.PRIV_MOVE else self.key

    def adjudicate(self, ctx: AccessContext, addr: int, page: Page) -> Optional[FaultKind]:
        return adjudicate_store(self, ctx, addr, page)


def adjudicate_store(scheme: IntegrityScheme, ctx: AccessContext, addr: int,
                     page: Optional[Page] = None) -> Optional[FaultKind]:
    """Return a fault kind if the store must be denied, else None.

    Key-scheme checks live in the VM's access path (they depend on KPERM);
    here the key scheme only confirms the store is permitted by the word.
    """
    kind = scheme.kind
    if kind in (Integrity.NONE, Integrity.INFO_HIDING, Integrity.KEY):
        return None
    protected = (page.key == scheme.protected_key) if page is not None else scheme.low <= addr < scheme.high
    if not protected:
        return None
    if kind is Integrity.BOUNDS:
        return FaultKind.BOUNDS if ctx.checked else None
    if kind is Integrity.PRIV_MOVE:
        return None if ctx.priv == scheme.region else FaultKind.PERMISSION
    return None


# ------------------------------------------------------------ instrumentation
def _touches_args(ins: Instruction) -> bool:
    for o in ins.operands:
        if isinstance(o, Reg) and o.name in ARG_REGS:
            return True
        if isinstance(o, Mem) and (o.base in ARG_REGS or o.index in ARG_REGS):
            return True
    return False


def key_bracket(scheme_key: int):
    lock = 1 << (2 * scheme_key + 1)
    before = [
        insn("mov", R(SAVE_REGS[0]), R(ARG_REGS[0]), cat="integrity"),
        insn("mov", R(SAVE_REGS[1]), R(ARG_REGS[1]), cat="integrity"),
        insn("xor", R(ARG_REGS[0]), R(ARG_REGS[0]), cat="integrity"),
        insn("xor", R(ARG_REGS[1]), R(ARG_REGS[1]), cat="integrity"),
        insn("wrkperm", I(0), cat="integrity"),
    ]
    after = [
        insn("wrkperm", I(lock), cat="integrity"),
        insn("mov", R(ARG_REGS[0]), R(SAVE_REGS[0]), cat="integrity"),
        insn("mov", R(ARG_REGS[1]), R(SAVE_REGS[1]), cat="integrity"),
    ]
    return before, after


def _runs(instrs: List[Instruction]):
    """Maximal runs of equal category, as (start, end) half-open ranges."""
    start = 0
    for i in range(1, len(instrs) + 1):
        if i == len(instrs) or instrs[i].category != instrs[start].category or instrs[i].labels and i != start:
            yield start, i
            start = i


def _bracket_function(f: Function, key: int) -> None:
    out: List[Instruction] = []
    instrs = f.instructions
    for start, end in _runs(instrs):
        run = instrs[start:end]
        sw = [i for i, ins in enumerate(run) if ins.attrs.get("sw")]
        if not sw:
            out.extend(run)
            continue
        lo, hi = sw[0], sw[-1]
        if run[0].category in ("prologue", "epilogue", "validation"):
            args = [i for i, ins in enumerate(run) if _touches_args(ins)]
            if args:
                lo, hi = min(lo, args[0]), max(hi, args[-1])
        before, after = key_bracket(key)
        if run[lo].labels:
            before[0] = Instruction(before[0].op, before[0].operands, before[0].attrs, run[lo].labels)
            run[lo] = Instruction(run[lo].op, run[lo].operands, run[lo].attrs, ())
        out.extend(run[:lo] + before + run[lo:hi + 1] + after + run[hi + 1:])
    f.instructions = out


def _bounds_function(f: Function) -> None:
    out: List[Instruction] = []
    for ins in f.instructions:
        if ins.is_store() and not ins.attrs.get("sw"):
            m = ins.mem_operand()
            checks = [insn("bndcl", m, cat="integrity"), insn("bndcu", m, cat="integrity")]
            if ins.labels:
                checks[0] = Instruction("bndcl", (m,), {"cat": "integrity"}, ins.labels)
                ins = Instruction(ins.op, ins.operands, ins.attrs, ())
            out.extend(checks)
        out.append(ins)
    f.instructions = out


def apply_integrity(p: Program, cfg: ShadowConfig) -> Program:
    """Add the scheme's instrumentation to an already shadow-instrumented program."""
    q = p.copy()
    kind = cfg.integrity
    for f in q.functions:
        if not (f.protected or f.runtime):
            continue
        if kind is Integrity.KEY:
            _bracket_function(f, cfg.key_id)
        elif kind is Integrity.BOUNDS:
            _bounds_function(f)
        elif kind is Integrity.PRIV_MOVE:
            f.instructions = [ins.with_attrs(priv=cfg.region_id) if ins.attrs.get("sw") else ins
                              for ins in f.instructions]
    return q


# ----------------------------------------------------------------- cost model
@dataclass
class CostRow:
    scheme: str
    static_added: int
    dynamic_added: int
    per_call_delta: float

    def cells(self):
        return [self.scheme, self.static_added, self.dynamic_added, f"{self.per_call_delta:.3f}"]


COST_COLUMNS = ("scheme", "static-added", "dynamic-added", "per-call-delta")


def integrity_cost(program: Program, cfg: ShadowConfig, schemes=None, seed: int = 0) -> List[CostRow]:
    """Added instructions of each scheme relative to the same config without integrity."""
    from .runner import build, execute

    schemes = schemes or [Integrity.INFO_HIDING, Integrity.KEY, Integrity.BOUNDS, Integrity.PRIV_MOVE]
    base_cfg = ShadowConfig(cfg.mapping, cfg.validation, Integrity.NONE, cfg.offset, cfg.reserved)
    base_prog = build(program, base_cfg)
    base_run = execute(base_prog, base_cfg, seed=seed)
    rows = []
    for s in schemes:
        c = ShadowConfig(cfg.mapping, cfg.validation, Integrity(s), cfg.offset, cfg.reserved)
        prog = build(program, c)
        run = execute(prog, c, seed=seed)
        dyn = run.metrics.dynamic - base_run.metrics.dynamic
        calls = max(run.metrics.calls, 1)
        rows.append(CostRow(Integrity(s).value, prog.static_size() - base_prog.static_size(), dyn, dyn / calls))
    return rows
