"""Scripted attacks on return addresses and shadow state.

The attacker is a pseudo-thread with arbitrary read and write access to
program-writable memory. It acts once, when its trigger fires, by writing
a payload whose addresses are computed from a declared leak set.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .asmfmt import Program
from .config import Mapping, ShadowConfig
from .isa import REG_INDEX, SP
from .machine import ATTACKER, AccessContext, Fault, FaultKind, Machine


class ScenarioError(ValueError):
    """Malformed or inapplicable attack scenario."""


class AttackKind(str, enum.Enum):
    SEQ_OVERFLOW = "SeqOverflow"
    ARB_WRITE_RA = "ArbWriteRA"
    STACK_PIVOT = "StackPivot"
    TOCTOU_WRITE = "ToctouWrite"
    SHADOW_DISCLOSE = "ShadowDisclose"
    SHADOW_OVERWRITE = "ShadowOverwrite"
    CALLBACK_CLOBBER = "CallbackClobber"


class Outcome(str, enum.Enum):
    HIJACKED = "Hijacked"
    PREVENTED = "Prevented"
    CRASHED = "Crashed"
    NO_EFFECT = "NoEffect"


TRIGGERS = ("at_step", "at_label", "after_call", "after_ra_load", "before_ret_jump")
LEAK_CLASSES = ("stack", "code", "data", "shadow")
SHADOW_SYMBOLS = ("shadow_ra", "shadow_ptr", "shadow_base")


@dataclass
class AttackScenario:
    kind: AttackKind
    trigger: Tuple[str, str]
    payload: List[Tuple[str, str]] = field(default_factory=list)
    goal: str = "win"
    arg: int = 0
    leaks: Tuple[str, ...] = ("stack", "code")
    victim: int = 0
    name: str = ""

    def __post_init__(self):
        self.kind = AttackKind(self.kind)
        if self.trigger[0] not in TRIGGERS:
            raise ScenarioError(f"unknown trigger {self.trigger[0]!r}")
        bad = set(self.leaks) - set(LEAK_CLASSES)
        if bad:
            raise ScenarioError(f"unknown leak classes {sorted(bad)}")


@dataclass
class AttackResult:
    outcome: Outcome
    fault: Optional[str] = None
    steps: int = 0
    delivered: bool = False
    trace: Optional[List[str]] = None
    note: str = ""
    divergences: int = 0        # returns whose target differed from the true call stack

    @property
    def label(self) -> str:
        if self.outcome in (Outcome.PREVENTED, Outcome.CRASHED) and self.fault:
            return f"{self.outcome.value}({self.fault})"
        return self.outcome.value


# ------------------------------------------------------------- expressions
_TERM = re.compile(r"\s*([+-])?\s*(0x[0-9a-fA-F]+|\d+|[A-Za-z_.$][\w.$]*)")


def expression_symbols(expr: str) -> List[str]:
    return [t for _, t in _TERM.findall(expr) if not t[0].isdigit()]


def evaluate(expr: str, env: Dict[str, int]) -> int:
    pos, total = 0, 0
    expr = expr.strip()
    first = True
    while pos < len(expr):
        m = _TERM.match(expr, pos)
        if not m or (not first and not m.group(1)):
            raise ScenarioError(f"bad expression {expr!r}")
        sign = -1 if m.group(1) == "-" else 1
        tok = m.group(2)
        if tok[0].isdigit():
            value = int(tok, 0)
        elif tok in env:
            value = env[tok]
        else:
            raise KeyError(tok)
        total += sign * value
        pos = m.end()
        first = False
    if first:
        raise ScenarioError("empty expression")
    return total


def _leak_class(sym: str, p: Program) -> Optional[str]:
    if sym == "arg":
        return None
    if sym == "sp":
        return "stack"
    if sym in SHADOW_SYMBOLS:
        return "shadow"
    if any(d.name == sym for d in p.data):
        return "data"
    return "code"


def validate(p: Program, s: AttackScenario) -> None:
    """Goal must be a label; every payload symbol must be covered by the leak set."""
    labels = p.labels()
    if s.goal not in labels:
        raise ScenarioError(f"goal {s.goal!r} is not a program label")
    known = set(labels) | {d.name for d in p.data} | {"sp", "arg"} | set(SHADOW_SYMBOLS)
    leaks = set(s.leaks)
    if s.kind is AttackKind.SHADOW_DISCLOSE:
        leaks.add("shadow")          # obtained by the disclosure step itself
    for addr, value in s.payload:
        for sym in expression_symbols(addr) + expression_symbols(value):
            if sym not in known:
                raise ScenarioError(f"payload symbol {sym!r} is unknown")
            cls = _leak_class(sym, p)
            if cls is not None and cls not in leaks:
                raise ScenarioError(f"payload uses {sym!r} but the leak set lacks {cls!r}")
    if s.trigger[0] != "at_step" and s.trigger[1] not in labels:
        raise ScenarioError(f"trigger target {s.trigger[1]!r} is not a program label")


# ------------------------------------------------------------ file format
def parse_scenario(text: str) -> AttackScenario:
    """Line-oriented scenario: ``kind``, ``trigger``, ``goal``, ``arg``, ``leak``,
    ``write ADDR VALUE`` and ``fill ADDR VALUE...`` (consecutive words)."""
    fields: Dict[str, object] = {"payload": []}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if key == "kind":
                fields["kind"] = AttackKind(rest)
            elif key == "name":
                fields["name"] = rest
            elif key == "trigger":
                kind, _, target = rest.partition(" ")
                fields["trigger"] = (kind, target.strip())
            elif key == "goal":
                fields["goal"] = rest
            elif key == "arg":
                fields["arg"] = int(rest, 0)
            elif key == "leak":
                fields["leaks"] = tuple(rest.split())
            elif key == "victim":
                fields["victim"] = int(rest, 0)
            elif key == "write":
                addr, value = rest.split()
                fields["payload"].append((addr, value))
            elif key == "fill":
                addr, *values = rest.split()
                for i, v in enumerate(values):
                    fields["payload"].append((f"{addr}+{8 * i}" if i else addr, v))
            else:
                raise ScenarioError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"line {lineno}: {exc}") from None
    for required in ("kind", "trigger"):
        if required not in fields:
            raise ScenarioError(f"scenario lacks {required!r}")
    return AttackScenario(**fields)


def format_scenario(s: AttackScenario) -> str:
    lines = [f"kind {s.kind.value}"]
    if s.name:
        lines.append(f"name {s.name}")
    lines += [f"trigger {s.trigger[0]} {s.trigger[1]}".rstrip(),
              f"goal {s.goal}", f"arg {s.arg:#x}", f"leak {' '.join(s.leaks)}"]
    if s.victim:
        lines.append(f"victim {s.victim}")
    lines += [f"write {a} {v}" for a, v in s.payload]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ chain builder
def build_rop_chain(gadgets: Dict[str, str], goal: str, at: str = "sp+32",
                    pivot_to: Optional[str] = None) -> List[Tuple[str, str]]:
    """Payload placing [pop-arg gadget, argument, goal] in ascending slots.

    With ``pivot_to`` the return-address slot gets the stack-pivot gadget
    and the chain is laid out at the pivot destination instead.
    """
    if not gadgets:
        return []
    if "pop_arg" not in gadgets:
        raise ScenarioError("gadget table lacks a pop-argument gadget")
    chain_at = at
    payload: List[Tuple[str, str]] = []
    if pivot_to is not None:
        if "pivot" not in gadgets:
            raise ScenarioError("gadget table lacks a stack-pivot gadget")
        payload += [(at, gadgets["pivot"]), (f"{at}+8", pivot_to)]
        chain_at = pivot_to
    payload += [(chain_at, gadgets["pop_arg"]), (f"{chain_at}+8", "arg"), (f"{chain_at}+16", goal)]
    return payload


VICTIM_GADGETS = {"pop_arg": "gadget_pop_g1", "pivot": "gadget_pivot"}
WIN_ARG = 0x5348


def rop_scenario(pivot: bool = False) -> AttackScenario:
    """The stock post-prologue overwrite of bar's return address."""
    if pivot:
        payload = build_rop_chain(VICTIM_GADGETS, "win", "sp+32", pivot_to="scratch")
        return AttackScenario(AttackKind.STACK_PIVOT, ("at_label", "bar_vuln"), payload,
                              arg=WIN_ARG, leaks=("stack", "code", "data"), name="stack-pivot")
    payload = build_rop_chain(VICTIM_GADGETS, "win", "sp+32")
    return AttackScenario(AttackKind.ARB_WRITE_RA, ("at_label", "bar_vuln"), payload,
                          arg=WIN_ARG, name="rop-chain")


def shadow_overwrite_scenario(disclose: bool = False) -> AttackScenario:
    """Overwrite both bar's return address and its shadow copy."""
    payload = build_rop_chain(VICTIM_GADGETS, "win", "sp+32") + [("shadow_ra", "gadget_pop_g1")]
    kind = AttackKind.SHADOW_DISCLOSE if disclose else AttackKind.SHADOW_OVERWRITE
    leaks = ("stack", "code") if disclose else ("stack", "code", "shadow")
    return AttackScenario(kind, ("at_label", "bar_vuln"), payload, arg=WIN_ARG, leaks=leaks,
                          name="shadow-disclose" if disclose else "shadow-overwrite")


# --------------------------------------------------------------- execution
def _shadow_env(m: Machine, cfg: Optional[ShadowConfig], tid: int) -> Dict[str, int]:
    """Shadow addresses as an attacker with the base disclosed would compute them."""
    if cfg is None:
        return {}
    t = m.threads[tid]
    env = {"shadow_base": t.shadow_lo}
    mapping = cfg.mapping
    if mapping.compact:
        if mapping is Mapping.COMPACT_REGISTER:
            ptr = t.regs[REG_INDEX[cfg.reserved]]
        elif mapping is Mapping.COMPACT_SEGMENT:
            ptr = m.peek(t.seg)
        else:
            ptr = m.peek(m.symbols["GLOBAL_WORD"])
        env["shadow_ptr"] = ptr
        env["shadow_ra"] = ptr - 16
    elif t.oracle:
        env["shadow_ra"] = t.oracle[-1][1] + (t.shadow_lo - t.stack_lo)
    return env


def _trigger_addresses(m: Machine, kind: str, target: str) -> Tuple[int, ...]:
    if kind in ("at_label", "after_call"):
        return (m.symbols[target],)
    lo, hi = m.layout.functions[target]
    if kind == "after_ra_load":
        for a in range(lo, hi, 4):
            if m.code[a].attrs.get("ra"):
                return (a + 4,)
        return (lo,)                 # no prologue load: the window never closes
    return tuple(a for a in range(lo, hi, 4) if m.code[a].is_ret or m.code[a].op == "ret")


class _Attacker:
    """Run monitor that fires the payload once and watches for the goal."""

    def __init__(self, m: Machine, cfg: Optional[ShadowConfig], s: AttackScenario):
        self.cfg = cfg
        self.s = s
        self.goal = m.symbols[s.goal]
        kind, target = s.trigger
        self.at_step = int(target, 0) if kind == "at_step" else None
        self.addresses = () if kind == "at_step" else _trigger_addresses(m, kind, target)
        self.fired = False
        self.delivered = False
        self.hijacked = False
        self.aborted = ""

    def before_step(self, m: Machine) -> bool:
        for t in m.threads:
            if not t.halted and t.ip == self.goal and t.regs[1] == self.s.arg:
                self.hijacked = True
                return True
        if self.fired or not m.live(self.s.victim):
            return False
        victim = m.threads[self.s.victim]
        if (m.step_index == self.at_step) if self.at_step is not None else victim.ip in self.addresses:
            self.fired = True
            m.attacker_queue.append(self._act)
            m.force_attacker = True
        return False

    def _act(self, m: Machine) -> None:
        s = self.s
        t = m.threads[s.victim]
        env = dict(m.symbols)
        env.update(sp=t.regs[SP], arg=s.arg)
        if s.kind is AttackKind.SHADOW_DISCLOSE:
            if not leak_scan(m, self.cfg).found:
                self.aborted = "shadow location not disclosed"
                return
        env.update(_shadow_env(m, self.cfg, s.victim))
        ctx = AccessContext(priv=0, checked=True, attacker=True, thread=s.victim)
        for addr_expr, value_expr in s.payload:
            try:
                addr = evaluate(addr_expr, env)
                value = evaluate(value_expr, env)
            except KeyError:
                continue             # no shadow state to aim at in this configuration
            self.delivered = True
            m.access_memory(addr, 8, "write", ctx, value)


_INTEGRITY_DENIALS = (FaultKind.KEY, FaultKind.BOUNDS, FaultKind.PERMISSION)


def is_prevention(m: Machine, fault: Fault) -> bool:
    """Whether a fault was raised by a validation step or an integrity check."""
    if fault.kind is FaultKind.SHADOW_MISMATCH:
        return True
    if fault.thread == ATTACKER:
        return fault.kind in _INTEGRITY_DENIALS
    ins = m.code.get(m.threads[fault.thread].ip)
    if ins is None:
        return False
    if ins.cat in ("validation", "integrity"):
        return True
    if ins.is_ret and fault.kind is FaultKind.NON_CANONICAL:
        return True
    return ins.sw and fault.kind in _INTEGRITY_DENIALS


def run_scenario(p: Program, cfg: Optional[ShadowConfig], s: AttackScenario, seed: int = 0,
                 trace: bool = False, max_steps: int = 200_000) -> AttackResult:
    """Build ``p`` under ``cfg``, run it with the attacker armed and adjudicate."""
    from .loader import load
    from .machine import MachineError
    from .runner import build

    validate(p, s)
    if s.kind is AttackKind.CALLBACK_CLOBBER:
        return callback_clobber(p, cfg, seed)
    m = load(build(p, cfg), cfg, seed=seed)
    if trace:
        m.trace = []
    attacker = _Attacker(m, cfg, s)
    try:
        fault = m.run(max_steps, attacker)
    except MachineError as exc:
        return AttackResult(Outcome.CRASHED, None, m.step_index, attacker.delivered, m.trace, str(exc))
    note = attacker.aborted
    result = _adjudicate(m, attacker, fault, note)
    result.divergences = len(m.divergences)
    return result


def _adjudicate(m: Machine, attacker: "_Attacker", fault, note: str) -> AttackResult:
    if attacker.hijacked:
        return AttackResult(Outcome.HIJACKED, None, m.step_index, True, m.trace, note)
    if fault is not None:
        kind = fault.kind.value
        if attacker.delivered and is_prevention(m, fault):
            return AttackResult(Outcome.PREVENTED, kind, m.step_index, True, m.trace, note)
        return AttackResult(Outcome.CRASHED, kind, m.step_index, attacker.delivered, m.trace, note)
    if not attacker.delivered:
        return AttackResult(Outcome.NO_EFFECT, None, m.step_index, False, m.trace, note)
    return AttackResult(Outcome.PREVENTED, None, m.step_index, True, m.trace,
                        note or "attack absorbed: the corrupted return address was never used")


# ------------------------------------------------------------------ TOCTTOU
TOCTOU_MODES = ("window", "late", "post-validation")


def toctou_scenario(mode: str = "window") -> AttackScenario:
    """Write bar's return-address slot at one of three points.

    ``window``: after the call retires and before the prologue loads the
    return address. ``late``: one instruction after that load.
    ``post-validation``: the popped slot, just before the final jump.
    """
    if mode == "window":
        trigger, at = ("after_call", "bar"), "sp"
    elif mode == "late":
        trigger, at = ("after_ra_load", "bar"), "sp"
    elif mode == "post-validation":
        trigger, at = ("before_ret_jump", "bar"), "sp-8"
    else:
        raise ScenarioError(f"unknown TOCTTOU mode {mode!r}; expected one of {TOCTOU_MODES}")
    payload = build_rop_chain(VICTIM_GADGETS, "win", at)
    return AttackScenario(AttackKind.TOCTOU_WRITE, trigger, payload, arg=WIN_ARG, name=f"toctou-{mode}")


def toctou_probe(p: Program, cfg: Optional[ShadowConfig], mode: str = "window",
                 seed: int = 0) -> AttackResult:
    """Demonstrates that the window exists; says nothing about how likely it is to be hit."""
    return run_scenario(p, cfg, toctou_scenario(mode), seed)


# ------------------------------------------------------------------ leak scan
@dataclass
class LeakReport:
    found: bool
    locations: List[str] = field(default_factory=list)
    method: str = ""


def leak_scan(m: Machine, cfg: Optional[ShadowConfig]) -> LeakReport:
    """Search program-readable memory (and constant offsets in code) for the shadow location."""
    if cfg is None or m.layout is None:
        return LeakReport(False)
    regions = m.layout.layout.regions
    if not regions:
        return LeakReport(False)
    bases = {lo for lo, _ in regions}

    def points_in(v: int) -> bool:
        return v in bases or any(lo <= v < hi for lo, hi in regions)

    locations = []
    for base in sorted(m.pages):
        page = m.pages[base]
        if not page.readable or any(lo <= base < hi for lo, hi in regions):
            continue
        data = page.data
        for off in range(0, len(data), 8):
            word = int.from_bytes(data[off:off + 8], "little")
            if word and points_in(word):
                locations.append(f"{base + off:#x}")
    if locations:
        return LeakReport(True, locations, "memory")
    if cfg.mapping is Mapping.PARALLEL_CONSTANT:
        for t in m.threads:
            for addr in sorted(m.code):
                for o in m.code[addr].operands:
                    if o[0] == "m" and o[1] == SP and o[2] < 0 and points_in(t.stack_lo + o[3]):
                        return LeakReport(True, [f"code@{addr:#x}"], "computation")
    return LeakReport(False)


# ----------------------------------------------------------------- callbacks
def callback_clobber(p: Program, cfg: Optional[ShadowConfig], seed: int = 0) -> AttackResult:
    """Run a protected/unprotected callback chain and report whether it survives."""
    from .runner import run_program

    base = run_program(p, None, seed=seed)
    run = run_program(p, cfg, seed=seed)
    steps = run.machine.step_index if run.machine is not None else 0
    if run.layout_error:
        return AttackResult(Outcome.CRASHED, "LayoutError", steps, note=run.layout_error)
    if run.fault is not None:
        return AttackResult(Outcome.CRASHED, run.fault.kind.value, steps,
                            note="shadow state clobbered by unprotected code")
    if run.outputs != base.outputs:
        return AttackResult(Outcome.CRASHED, None, steps, note="output differs from baseline")
    return AttackResult(Outcome.NO_EFFECT, None, steps)
