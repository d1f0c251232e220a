"""Lay a Program out in a fresh Machine under a ShadowConfig."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import config as C
from .asmfmt import Program, split_symbol
from .config import Integrity, Mapping, ShadowConfig
from .integrity import IntegrityScheme
from .isa import INSN_SIZE, REG_INDEX, Imm, Mem, Reg, fits_imm32
from .machine import Decoded, Machine, MachineError, Thread
from .runtime import with_runtime


class LayoutError(RuntimeError):
    """Address-space layout conflict; reported as a compatibility finding."""


@dataclass
class ShadowLayout:
    cfg: Optional[ShadowConfig]
    stack_size: int
    shadow_size: int
    rng: random.Random
    hook_threads: bool = False
    inherit_offset: bool = False
    regions: List[Tuple[int, int]] = field(default_factory=list)
    protected_pages: List[Tuple[int, int]] = field(default_factory=list)
    hidden_base: Optional[int] = None

    @property
    def hiding(self) -> bool:
        return self.cfg is not None and self.cfg.integrity is Integrity.INFO_HIDING

    def _hidden_slot(self, size: int, m: Machine) -> int:
        for _ in range(64):
            base = C.HIDE_ZONE + self.rng.randrange(C.HIDE_SLOTS) * C.PAGE
            if not m.is_mapped(base, size + C.PAGE):
                return base
        raise LayoutError("no free hidden slot")

    def _map_shadow(self, m: Machine, lo: int, size: int) -> None:
        if m.is_mapped(lo, size):
            raise LayoutError(f"shadow region {lo:#x}..{lo + size:#x} overlaps an existing mapping")
        m.map_region(lo, size)
        self.regions.append((lo, lo + size))
        self.protected_pages.append((lo, size))

    def setup_thread(self, m: Machine, t: Thread, parent: Optional[Thread] = None) -> None:
        cfg = self.cfg
        if cfg is None:
            return
        reg = REG_INDEX[cfg.reserved]
        mapping = cfg.mapping
        child = parent is not None
        if child and not self.hook_threads:
            # an unaware thread library: registers start from the parent's values
            if mapping.uses_register:
                t.regs[reg] = parent.regs[reg]
            t.seg = parent.seg
            if mapping is Mapping.PARALLEL_CONSTANT or (mapping is Mapping.PARALLEL_REGISTER):
                self._map_parallel(m, t, t.regs[reg] if mapping.uses_register else cfg.offset)
            return

        if mapping is Mapping.COMPACT_GLOBAL:
            if child:
                return          # one shared pointer word: no per-thread state by design
            base = self._compact_base(m, 0)
            self._map_shadow(m, base, self.shadow_size)
            m.map_region(C.GLOBAL_WORD, C.PAGE)
            self.protected_pages.append((C.GLOBAL_WORD, C.PAGE))
            m.poke(C.GLOBAL_WORD, base)
            self._bookkeep(t, base, base)
        elif mapping is Mapping.COMPACT_SEGMENT:
            base = self._compact_base(m, t.tid)
            self._map_shadow(m, base, self.shadow_size)
            m.poke(base, base + C.SEGMENT_HEADER)
            t.seg = base
            self._bookkeep(t, base, base + C.SEGMENT_HEADER)
        elif mapping is Mapping.COMPACT_REGISTER:
            base = self._compact_base(m, t.tid)
            self._map_shadow(m, base, self.shadow_size)
            t.regs[reg] = base
            self._bookkeep(t, base, base)
        elif mapping is Mapping.PARALLEL_CONSTANT:
            self._map_parallel(m, t, cfg.offset)
        else:
            if child and not self.inherit_offset:
                lo = self._hidden_slot(self.stack_size, m) if self.hiding else self._parallel_slot(m)
                offset = lo - t.stack_lo
            elif child:
                offset = parent.regs[reg]
            elif self.hiding:
                offset = self._hidden_slot(self.stack_size, m) - t.stack_lo
            else:
                offset = cfg.offset
            t.regs[reg] = offset & ((1 << 64) - 1)
            self._map_parallel(m, t, offset)

    def _parallel_slot(self, m: Machine) -> int:
        lo = C.PARALLEL_ZONE
        while m.is_mapped(lo, self.stack_size):
            lo += self.stack_size
        return lo

    def _map_parallel(self, m: Machine, t: Thread, offset: int) -> None:
        lo = t.stack_lo + offset
        self._map_shadow(m, lo, self.stack_size)
        if self.hidden_base is None:
            self.hidden_base = lo
        t.shadow_lo, t.shadow_hi = lo, lo + self.stack_size
        t.shadow_entries = lo

    def _compact_base(self, m: Machine, index: int) -> int:
        if self.hiding:
            base = self._hidden_slot(self.shadow_size, m)
        else:
            base = C.SHADOW_BASE + index * C.SHADOW_THREAD_STRIDE
        if self.hidden_base is None:
            self.hidden_base = base
        return base

    @staticmethod
    def _bookkeep(t: Thread, lo: int, entries: int) -> None:
        t.shadow_lo = lo
        t.shadow_entries = entries

    def finish_bookkeeping(self, t: Thread) -> None:
        if self.cfg is not None and self.cfg.mapping.compact and t.shadow_hi == 0 and t.shadow_lo:
            t.shadow_hi = t.shadow_lo + self.shadow_size


@dataclass
class Image:
    """Code layout facts the harness needs after loading."""

    symbols: Dict[str, int]
    functions: Dict[str, Tuple[int, int]]       # name -> [start, end) addresses
    program: Program
    layout: ShadowLayout
    scheme: Optional[IntegrityScheme]


def _resolve(value, symbols: Dict[str, int], where: str) -> int:
    if isinstance(value, int):
        return value
    sym, addend = split_symbol(value)
    if sym not in symbols:
        raise MachineError(f"unresolved symbol {sym!r} in {where}")
    return symbols[sym] + addend


def _decode_operand(o, symbols, where):
    if isinstance(o, Reg):
        return ("r", REG_INDEX[o.name])
    if isinstance(o, Imm):
        v = _resolve(o.value, symbols, where)
        if not fits_imm32(v):
            raise MachineError(f"immediate {v:#x} exceeds 32 bits in {where}")
        return ("i", v)
    d = _resolve(o.disp, symbols, where)
    if not fits_imm32(d):
        raise MachineError(f"displacement {d:#x} exceeds 32 bits in {where}")
    return ("m", REG_INDEX[o.base] if o.base else -1, REG_INDEX[o.index] if o.index else -1, d, o.seg)


def load(p: Program, cfg: Optional[ShadowConfig] = None, seed: int = 0,
         inherit_offset: bool = False) -> Machine:
    """Build a machine ready to run ``p`` from its entry function."""
    if p.entry is None:
        raise MachineError("program has no entry function")
    prog = with_runtime(p, cfg)
    rng = random.Random(seed)
    stack_size = prog.stack_size or (cfg.stack_size if cfg else C.DEFAULT_STACK)
    shadow_size = prog.shadow_size or (cfg.shadow_size if cfg else C.DEFAULT_COMPACT_SHADOW)

    symbols: Dict[str, int] = {"LBP_LAST": C.LBP_LAST, "GLOBAL_WORD": C.GLOBAL_WORD}
    functions: Dict[str, Tuple[int, int]] = {}
    addr = C.CODE_BASE
    placed = []
    for f in prog.functions:
        start = addr
        symbols[f.name] = addr
        for ins in f.instructions:
            for lab in ins.labels:
                symbols[lab] = addr
            placed.append((addr, f.name, ins))
            addr += INSN_SIZE
        functions[f.name] = (start, addr)
    code_end = addr
    daddr = C.DATA_BASE
    data_at = {}
    for d in prog.data:
        symbols[d.name] = daddr
        data_at[d.name] = daddr
        daddr += (d.size + 15) // 16 * 16

    code: Dict[int, Decoded] = {}
    for a, fname, ins in placed:
        where = f"{fname}@{a:#x}"
        ops = tuple(_decode_operand(o, symbols, where) for o in ins.operands)
        code[a] = Decoded(ins.op, ops, dict(ins.attrs), fname, ins.op, a)

    m = Machine(code, symbols)
    m.map_region(C.CODE_BASE, code_end - C.CODE_BASE, readable=False, writable=False)
    if daddr > C.DATA_BASE:
        m.map_region(C.DATA_BASE, daddr - C.DATA_BASE)
        for d in prog.data:
            for i, v in enumerate(d.init):
                m.poke(data_at[d.name] + 8 * i, v)
    m.map_region(C.LBP_PAGE, C.PAGE, readable=True, writable=False)
    m.map_region(C.LBP_GUARD, C.PAGE, readable=False, writable=False)

    stack_lo = C.STACK_TOP - stack_size
    m.map_region(stack_lo, stack_size)
    sp = C.STACK_TOP - 8
    m.poke(sp, symbols["__exit"])
    main = m.add_thread(symbols[prog.entry], sp)
    main.stack_lo, main.stack_hi = stack_lo, C.STACK_TOP
    main.oracle.append((symbols["__exit"], sp))
    main.max_depth = 1
    m.calls = 1                 # the loader's call into the entry function

    layout = ShadowLayout(cfg, stack_size, shadow_size, rng,
                          hook_threads="threads" in prog.hooks, inherit_offset=inherit_offset)
    layout.setup_thread(m, main)
    layout.finish_bookkeeping(main)

    scheme = None
    if cfg is not None and cfg.integrity is not Integrity.NONE:
        scheme = _install_scheme(m, cfg, layout)
        main.kperm = scheme.locked_kperm

    def spawn(machine: Machine, parent: Thread, target: int, arg: int) -> int:
        lo = min(t.stack_lo for t in machine.threads) - stack_size
        while machine.is_mapped(lo, stack_size):
            lo -= stack_size
        machine.map_region(lo, stack_size)
        csp = lo + stack_size - 8
        machine.poke(csp, symbols["__thread_exit"])
        t = machine.add_thread(target, csp)
        t.stack_lo, t.stack_hi = lo, lo + stack_size
        t.regs[1] = arg
        t.oracle.append((symbols["__thread_exit"], csp))
        t.max_depth = 1
        machine.calls += 1
        layout.setup_thread(machine, t, parent)
        layout.finish_bookkeeping(t)
        if scheme is not None:
            _protect_new_regions(machine, scheme, layout)
            t.kperm = scheme.locked_kperm
        return t.tid

    m.spawn_handler = spawn
    m.layout = Image(symbols, functions, prog, layout, scheme)
    return m


def _install_scheme(m: Machine, cfg: ShadowConfig, layout: ShadowLayout) -> IntegrityScheme:
    kind = cfg.integrity
    lo = min(a for a, _ in layout.protected_pages) if layout.protected_pages else 0
    hi = max(a + s for a, s in layout.protected_pages) if layout.protected_pages else 0
    hi = (hi + C.PAGE - 1) // C.PAGE * C.PAGE
    scheme = IntegrityScheme(kind, key=cfg.key_id, low=lo, high=hi, region=cfg.region_id)
    m.scheme = scheme
    if kind is Integrity.KEY:
        m.key_scheme = True
    if kind is Integrity.BOUNDS:
        m.bnd = (lo, hi)
    _protect_new_regions(m, scheme, layout)
    return scheme


def _protect_new_regions(m: Machine, scheme: IntegrityScheme, layout: ShadowLayout) -> None:
    if scheme.kind in (Integrity.KEY, Integrity.BOUNDS, Integrity.PRIV_MOVE):
        for lo, size in layout.protected_pages:
            m.set_key(lo, size, scheme.protected_key)
