"""Deterministic MiniISA virtual machine.

Paged sparse memory with per-page permissions and 4-bit protection keys,
canonical-address faults, simulated threads driven by an explicit
scheduler, and a ground-truth call-stack oracle kept outside simulated
memory.
"""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from .isa import INSN_SIZE, MASK64, REGISTERS, SP

PAGE_SIZE = 4096
PAGE_SHIFT = 12
ATTACKER = -1


class FaultKind(str, enum.Enum):
    NON_CANONICAL = "NonCanonicalAddress"
    PERMISSION = "PermissionDenied"
    KEY = "KeyDenied"
    BOUNDS = "BoundsDenied"
    UNMAPPED = "Unmapped"
    SHADOW_MISMATCH = "ShadowMismatchAbort"


class MachineError(RuntimeError):
    """Malformed program or VM misuse; never a simulated fault."""


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    address: int
    thread: int
    step: int

    def record(self) -> str:
        return f"FAULT,{self.kind.value},{self.address:#x},{self.step}"


class _FaultSignal(Exception):
    def __init__(self, kind: FaultKind, address: int):
        super().__init__(kind, address)
        self.kind = kind
        self.address = address


@dataclass
class Page:
    base: int
    readable: bool = True
    writable: bool = True
    key: int = 0
    data: bytearray = field(default_factory=lambda: bytearray(PAGE_SIZE))

    def __post_init__(self):
        if self.base % PAGE_SIZE:
            raise MachineError(f"page base {self.base:#x} not aligned")
        if not 0 <= self.key <= 15:
            raise MachineError("protection key must be in 0..15")


@dataclass(frozen=True)
class AccessContext:
    priv: int = 0             # privileged-move region id, 0 = untagged
    checked: bool = False     # program store covered by bounds instrumentation
    shadow_write: bool = False
    attacker: bool = False
    thread: int = 0


@dataclass
class Decoded:
    """Loader-resolved instruction: operands are ('r', idx) / ('i', v) / ('m', b, x, d, seg)."""

    op: str
    operands: Tuple[tuple, ...]
    attrs: dict
    function: str = ""
    text: str = ""
    addr: int = 0

    def __post_init__(self):
        self.cat = str(self.attrs.get("cat", "application"))
        self.priv = int(self.attrs.get("priv", 0))
        self.sw = bool(self.attrs.get("sw", False))
        self.is_ret = bool(self.attrs.get("ret", False))
        self.unwind = bool(self.attrs.get("unwind", False))


@dataclass
class Thread:
    tid: int
    regs: List[int] = field(default_factory=lambda: [0] * len(REGISTERS))
    ip: int = 0
    seg: int = 0
    kperm: int = 0
    eq: bool = False
    lt: bool = False
    bnd_flag: bool = False
    halted: bool = False
    fault: Optional[Fault] = None
    outputs: List[int] = field(default_factory=list)
    # ground truth: (return address, address of the return-address slot)
    oracle: List[Tuple[int, int]] = field(default_factory=list)
    derailed: bool = False
    max_depth: int = 0
    # shadow bookkeeping filled in by the loader / thread hook
    shadow_lo: int = 0
    shadow_hi: int = 0
    shadow_entries: int = 0
    shadow_hw: int = 0
    stack_lo: int = 0
    stack_hi: int = 0
    stack_min_sp: int = 0


@dataclass
class Divergence:
    thread: int
    step: int
    expected: Optional[int]
    actual: int


@dataclass
class InterleavingScript:
    """Explicit (step -> thread id) choices; unscripted steps go round robin."""

    choices: Dict[int, int] = field(default_factory=dict)


def is_canonical(addr: int) -> bool:
    """User-space canonical form: bits 48..63 all clear."""
    return (addr & MASK64) >> 48 == 0


def popcnt64(value: int) -> int:
    return bin(value & MASK64).count("1")


def _signed(v: int) -> int:
    return v - (1 << 64) if v >> 63 else v


class Machine:
    """The machine state plus the stepping logic.

    Memory and code are shared by all threads; registers, SEG, KPERM and the
    oracle stack are per thread.
    """

    def __init__(self, code: Dict[int, Decoded], symbols: Optional[Dict[str, int]] = None):
        self.code = code
        self.symbols = dict(symbols or {})
        self.pages: Dict[int, Page] = {}
        self.threads: List[Thread] = []
        self.scheme = None          # integrity scheme, duck-typed: .adjudicate(...)
        self.key_scheme = False
        self.bnd: Tuple[int, int] = (0, 0)
        self.spawn_handler: Optional[Callable[["Machine", Thread, int, int], int]] = None
        self.script = InterleavingScript()
        self.attacker_queue: List[Callable[["Machine"], None]] = []
        self.force_attacker = False
        self.step_index = 0
        self.dyn_count = 0
        self.by_category: Counter = Counter()
        self.calls = 0
        self.returns = 0
        self.unwinds = 0
        self.discarded = 0          # frames dropped by unwinding instead of returning
        self.shadow_writes = 0
        self.fault: Optional[Fault] = None
        self.divergences: List[Divergence] = []
        self.trace: Optional[List[str]] = None
        self._effects: Optional[List[str]] = None
        self._rr = 0
        self.layout = None          # loader-provided layout description
        self.findings: List[str] = []

    # ----------------------------------------------------------------- memory
    def map_region(self, lo: int, size: int, readable=True, writable=True, key=0) -> None:
        base = lo - lo % PAGE_SIZE
        end = lo + size
        while base < end:
            if base in self.pages:
                raise MachineError(f"page {base:#x} already mapped")
            self.pages[base] = Page(base, readable, writable, key)
            base += PAGE_SIZE

    def is_mapped(self, lo: int, size: int) -> bool:
        base = lo - lo % PAGE_SIZE
        while base < lo + size:
            if base in self.pages:
                return True
            base += PAGE_SIZE
        return False

    def set_key(self, lo: int, size: int, key: int) -> None:
        base = lo - lo % PAGE_SIZE
        while base < lo + size:
            self.pages[base].key = key
            base += PAGE_SIZE

    def poke(self, addr: int, value: int, size: int = 8) -> None:
        """Loader/test write that bypasses all checks."""
        data = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
        for i, b in enumerate(data):
            a = addr + i
            self.pages[a - a % PAGE_SIZE].data[a % PAGE_SIZE] = b

    def peek(self, addr: int, size: int = 8) -> int:
        out = bytearray()
        for i in range(size):
            a = addr + i
            page = self.pages.get(a - a % PAGE_SIZE)
            out.append(page.data[a % PAGE_SIZE] if page else 0)
        return int.from_bytes(out, "little")

    def access_memory(self, addr: int, size: int, mode: str, ctx: AccessContext,
                      value: int = 0) -> int:
        """Checked access; raises _FaultSignal before any effect commits.

        Check order: canonicality, mapping, page permission, key permission,
        then the integrity scheme's store adjudication.
        """
        addr &= MASK64
        if not is_canonical(addr) or not is_canonical(addr + size - 1):
            raise _FaultSignal(FaultKind.NON_CANONICAL, addr)
        first = addr >> PAGE_SHIFT
        last = (addr + size - 1) >> PAGE_SHIFT
        pages = []
        for pno in range(first, last + 1):
            page = self.pages.get(pno << PAGE_SHIFT)
            if page is None:
                raise _FaultSignal(FaultKind.UNMAPPED, max(addr, pno << PAGE_SHIFT))
            pages.append(page)
        write = mode == "write"
        for page in pages:
            if not (page.writable if write else page.readable):
                raise _FaultSignal(FaultKind.PERMISSION, max(addr, page.base))
        if self.key_scheme:
            kperm = self.threads[ctx.thread].kperm if ctx.thread >= 0 else 0
            for page in pages:
                k = page.key
                if (kperm >> (2 * k)) & 1 or (write and (kperm >> (2 * k + 1)) & 1):
                    raise _FaultSignal(FaultKind.KEY, max(addr, page.base))
        if write and self.scheme is not None:
            for page in pages:
                kind = self.scheme.adjudicate(ctx, addr, page)
                if kind is not None:
                    raise _FaultSignal(kind, addr)
        if write:
            data = (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
            if len(pages) == 1:
                off = addr & (PAGE_SIZE - 1)
                pages[0].data[off:off + size] = data
            else:
                self.poke(addr, value, size)
            if self._effects is not None:
                self._effects.append(f"[{addr:#x}]={value & MASK64:#x}")
            return 0
        if len(pages) == 1:
            off = addr & (PAGE_SIZE - 1)
            return int.from_bytes(pages[0].data[off:off + size], "little")
        return self.peek(addr, size)

    # ---------------------------------------------------------------- threads
    def add_thread(self, ip: int, sp: int) -> Thread:
        t = Thread(tid=len(self.threads))
        t.ip = ip
        t.regs[SP] = sp
        t.stack_min_sp = sp
        self.threads.append(t)
        return t

    def live(self, tid: int) -> bool:
        return 0 <= tid < len(self.threads) and not self.threads[tid].halted

    @property
    def running(self) -> bool:
        return self.fault is None and any(not t.halted for t in self.threads)

    def schedule_next(self) -> int:
        return schedule_next(self, self.script)

    # ---------------------------------------------------------------- helpers
    def _ea(self, t: Thread, m: tuple) -> int:
        _, b, x, d, seg = m
        a = d
        if b >= 0:
            a += t.regs[b]
        if x >= 0:
            a += t.regs[x]
        if seg:
            a += t.seg
        return a & MASK64

    def _read(self, t: Thread, o: tuple, ins: Decoded, size: int = 8) -> int:
        k = o[0]
        if k == "r":
            return t.regs[o[1]]
        if k == "i":
            return o[1] & MASK64
        return self.access_memory(self._ea(t, o), size, "read", AccessContext(thread=t.tid))

    def _store_ctx(self, t: Thread, ins: Decoded) -> AccessContext:
        return AccessContext(priv=ins.priv, checked=not ins.sw, shadow_write=ins.sw, thread=t.tid)

    def _write(self, t: Thread, o: tuple, value: int, ins: Decoded, pending: list) -> None:
        """Register writes are deferred into ``pending`` so faults stay atomic."""
        if o[0] == "r":
            pending.append((o[1], value & MASK64))
        elif o[0] == "m":
            addr = self._ea(t, o)
            self.access_memory(addr, 8, "write", self._store_ctx(t, ins), value)
            if ins.sw:
                self._note_shadow_write(t, addr, 8)
        else:
            raise MachineError(f"cannot write to immediate in {ins.text}")

    def _note_shadow_write(self, t: Thread, addr: int, size: int) -> None:
        self.shadow_writes += 1
        if t.shadow_lo <= addr < t.shadow_hi and addr >= t.shadow_entries:
            t.shadow_hw = max(t.shadow_hw, addr + size - t.shadow_entries)

    def _jump_target(self, value: int) -> int:
        value &= MASK64
        if not is_canonical(value):
            raise _FaultSignal(FaultKind.NON_CANONICAL, value)
        return value

    def _on_call(self, t: Thread, ra: int, slot: int) -> None:
        self.calls += 1
        t.oracle.append((ra, slot))
        t.max_depth = max(t.max_depth, len(t.oracle))

    def _on_return(self, t: Thread, target: int) -> None:
        self.returns += 1
        if t.derailed:
            if t.oracle:
                t.oracle.pop()
            return
        expected = t.oracle.pop()[0] if t.oracle else None
        if expected != target:
            self.divergences.append(Divergence(t.tid, self.step_index, expected, target))
            t.derailed = True

    def _on_unwind(self, t: Thread, new_sp: int) -> None:
        self.unwinds += 1
        while t.oracle and t.oracle[-1][1] < new_sp:
            t.oracle.pop()
            self.discarded += 1

    # ------------------------------------------------------------------- step
    def step(self) -> Tuple[str, Optional[Fault]]:
        return step(self)

    def run(self, max_steps: int = 5_000_000, monitor=None) -> Optional[Fault]:
        """Step until every thread halts, a fault latches, or the monitor stops."""
        n = 0
        while self.running:
            if n >= max_steps:
                raise MachineError(f"step budget {max_steps} exhausted")
            if monitor is not None and monitor.before_step(self):
                break
            step(self)
            n += 1
        return self.fault


def schedule_next(state: Machine, script: InterleavingScript) -> int:
    """Pick the thread for the next step; pure function of state and script."""
    if state.force_attacker and state.attacker_queue:
        return ATTACKER
    want = script.choices.get(state.step_index)
    if want is not None:
        if want == ATTACKER and state.attacker_queue:
            return ATTACKER
        if want != ATTACKER and state.live(want):
            return want
        if state.trace is not None:
            state.trace.append(f"{state.step_index},SKIP,{want}")
    n = len(state.threads)
    for i in range(n):
        tid = (state._rr + i) % n
        if not state.threads[tid].halted:
            state._rr = (tid + 1) % n
            return tid
    return 0


def step(state: Machine) -> Tuple[str, Optional[Fault]]:
    """Execute exactly one instruction (or one attacker action)."""
    tid = schedule_next(state, state.script)
    if tid == ATTACKER:
        action = state.attacker_queue.pop(0)
        state.force_attacker = bool(state.attacker_queue) and state.force_attacker
        if not state.attacker_queue:
            state.force_attacker = False
        try:
            action(state)
        except _FaultSignal as f:
            fault = Fault(f.kind, f.address, ATTACKER, state.step_index)
            state.fault = fault
            if state.trace is not None:
                state.trace.append(fault.record())
            state.step_index += 1
            return "fault", fault
        state.step_index += 1
        return "executed", None

    t = state.threads[tid]
    if t.halted:
        raise MachineError("stepping a halted thread")
    ins = state.code.get(t.ip)
    if ins is None:
        fault = Fault(FaultKind.UNMAPPED, t.ip, tid, state.step_index)
        return _latch(state, t, fault)
    ip = t.ip
    if state.trace is not None:
        state._effects = []
    try:
        _execute(state, t, ins)
    except _FaultSignal as f:
        state._effects = None
        return _latch(state, t, Fault(f.kind, f.address, tid, state.step_index))
    state.dyn_count += 1
    state.by_category[ins.cat] += 1
    if t.regs[SP] < t.stack_min_sp:
        t.stack_min_sp = t.regs[SP]
    if state.trace is not None:
        state.trace.append(f"{state.step_index},{tid},{ip:#x},{ins.op},{';'.join(state._effects)}")
        state._effects = None
    state.step_index += 1
    return ("halted", None) if t.halted else ("executed", None)


def _latch(state: Machine, t: Thread, fault: Fault):
    t.fault = fault
    t.halted = True
    state.fault = fault
    if state.trace is not None:
        state.trace.append(fault.record())
    return "fault", fault


def _execute(state: Machine, t: Thread, ins: Decoded) -> None:
    op = ins.op
    ops = ins.operands
    regs = t.regs
    next_ip = t.ip + INSN_SIZE
    pending: list = []

    if op == "mov":
        state._write(t, ops[0], state._read(t, ops[1], ins), ins, pending)
    elif op == "movb":
        byte = state._read(t, ops[1], ins, size=1)
        r = ops[0][1]
        pending.append((r, (regs[r] & ~0xFF & MASK64) | byte))
    elif op in _ALU:
        dst, src = ops
        a = state._read(t, dst, ins)
        b = state._read(t, src, ins)
        state._write(t, dst, _ALU[op](a, b), ins, pending)
    elif op == "cmp":
        a = state._read(t, ops[0], ins)
        b = state._read(t, ops[1], ins)
        t.eq = a == b
        t.lt = _signed(a) < _signed(b)
    elif op == "lea":
        pending.append((ops[0][1], state._ea(t, ops[1])))
    elif op == "popcnt":
        pending.append((ops[0][1], popcnt64(state._read(t, ops[1], ins))))
    elif op == "push":
        value = state._read(t, ops[0], ins)
        new_sp = (regs[SP] - 8) & MASK64
        state.access_memory(new_sp, 8, "write", AccessContext(priv=ins.priv, thread=t.tid), value)
        pending.append((SP, new_sp))
    elif op == "pop":
        sp = regs[SP]
        value = state.access_memory(sp, 8, "read", AccessContext(thread=t.tid))
        pending.append((SP, (sp + 8) & MASK64))
        pending.append((ops[0][1], value))
    elif op == "call":
        target = state._jump_target(state._read(t, ops[0], ins))
        new_sp = (regs[SP] - 8) & MASK64
        state.access_memory(new_sp, 8, "write", AccessContext(thread=t.tid), next_ip)
        pending.append((SP, new_sp))
        state._on_call(t, next_ip, new_sp)
        next_ip = target
    elif op == "ret":
        sp = regs[SP]
        target = state._jump_target(state.access_memory(sp, 8, "read", AccessContext(thread=t.tid)))
        pending.append((SP, (sp + 8) & MASK64))
        state._on_return(t, target)
        next_ip = target
    elif op == "jmp":
        target = state._jump_target(state._read(t, ops[0], ins))
        if ins.is_ret:
            state._on_return(t, target)
        elif ins.unwind:
            state._on_unwind(t, regs[SP])
        next_ip = target
    elif op in _JCC:
        if _JCC[op](t):
            next_ip = ops[0][1]
    elif op == "wrkperm":
        if regs[2] or regs[3]:
            raise _FaultSignal(FaultKind.PERMISSION, t.ip)
        t.kperm = state._read(t, ops[0], ins) & 0xFFFF_FFFF
    elif op == "bndcl":
        t.bnd_flag = state._ea(t, ops[0]) >= state.bnd[0]
    elif op == "bndcu":
        addr = state._ea(t, ops[0])
        if t.bnd_flag and addr < state.bnd[1]:
            raise _FaultSignal(FaultKind.BOUNDS, addr)
    elif op == "spawn":
        target = state._jump_target(state._read(t, ops[0], ins))
        arg = state._read(t, ops[1], ins)
        if state.spawn_handler is None:
            raise MachineError("program spawns threads but no spawn handler is installed")
        pending.append((0, state.spawn_handler(state, t, target, arg)))
    elif op == "join":
        if state.live(state._read(t, ops[0], ins)):
            next_ip = t.ip
    elif op == "out":
        t.outputs.append(state._read(t, ops[0], ins))
    elif op == "halt":
        t.halted = True
        if t.tid == 0:
            for other in state.threads:
                other.halted = True
    elif op == "abort":
        raise _FaultSignal(FaultKind.SHADOW_MISMATCH, t.ip)
    elif op == "nop":
        pass
    else:
        raise MachineError(f"unknown opcode {op!r}")

    for r, v in pending:
        regs[r] = v
        if state._effects is not None:
            state._effects.append(f"{REGISTERS[r]}={v:#x}")
    t.ip = next_ip


_ALU = {
    "add": lambda a, b: (a + b) & MASK64,
    "sub": lambda a, b: (a - b) & MASK64,
    "xor": lambda a, b: a ^ b,
    "or": lambda a, b: a | b,
    "and": lambda a, b: a & b,
    "shl": lambda a, b: (a << (b & 63)) & MASK64,
    "shr": lambda a, b: a >> (b & 63),
}

_JCC = {
    "jne": lambda t: not t.eq,
    "je": lambda t: t.eq,
    "jl": lambda t: t.lt,
    "jge": lambda t: not t.lt,
}
