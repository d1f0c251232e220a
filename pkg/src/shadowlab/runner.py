"""Build and execute programs under a configuration."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional

from .asmfmt import Program
from .config import Integrity, ShadowConfig
from .integrity import apply_integrity
from .loader import LayoutError, load
from .machine import Fault, InterleavingScript, Machine, MachineError
from .metrics import RunMetrics, compare_to_oracle
from .runtime import with_runtime
from .shadow_pass import instrument

DEFAULT_HOOKS = ("threads", "unwind")
DEFAULT_MAX_STEPS = 2_000_000


def build(p: Program, cfg: Optional[ShadowConfig], hooks: Iterable[str] = DEFAULT_HOOKS) -> Program:
    """Instrumented copy of ``p``; ``cfg=None`` is the uninstrumented baseline."""
    if cfg is None:
        return p.copy()
    q = instrument(p, cfg)
    q.hooks = tuple(sorted(set(q.hooks) | set(hooks)))
    # runtime routines are linked now so the integrity pass covers their stores
    q = with_runtime(q, cfg)
    if cfg.integrity is not Integrity.NONE:
        q = apply_integrity(q, cfg)
    return q


@dataclass
class RunResult:
    machine: Optional[Machine]
    metrics: RunMetrics
    outputs: List[List[int]]
    fault: Optional[Fault]
    divergences: List[dict] = field(default_factory=list)
    layout_error: Optional[str] = None

    @property
    def clean(self) -> bool:
        return self.fault is None and self.layout_error is None

    @property
    def balanced(self) -> bool:
        """Clean exit with every call returned and every shadow entry retired."""
        m = self.machine
        if not self.clean or m is None:
            return False
        cfg = m.layout.layout.cfg
        for t in m.threads:
            if t.oracle:
                return False
            if cfg is not None and cfg.mapping.compact and _shadow_depth(m, t) != 0:
                return False
        return True


def _shadow_depth(m: Machine, t) -> int:
    from .config import Mapping
    from .isa import REG_INDEX
    cfg = m.layout.layout.cfg
    if cfg.mapping is Mapping.COMPACT_REGISTER:
        ptr = t.regs[REG_INDEX[cfg.reserved]]
    elif cfg.mapping is Mapping.COMPACT_SEGMENT:
        ptr = m.peek(t.seg)
    else:
        if t.tid != 0:
            return 0
        ptr = m.peek(m.symbols["GLOBAL_WORD"])
    return (ptr - t.shadow_entries) // 16


def execute(p: Program, cfg: Optional[ShadowConfig], seed: int = 0,
            script: Optional[InterleavingScript] = None, trace: bool = False,
            max_steps: int = DEFAULT_MAX_STEPS, inherit_offset: bool = False,
            monitor=None, prepare=None, baseline_static: int = 0) -> RunResult:
    """Load an already built program and run it to completion."""
    try:
        m = load(p, cfg, seed=seed, inherit_offset=inherit_offset)
    except LayoutError as exc:
        return RunResult(None, RunMetrics(), [], None, layout_error=str(exc))
    if script is not None:
        m.script = script
    if trace:
        m.trace = []
    if prepare is not None:
        prepare(m)
    try:
        fault = m.run(max_steps, monitor)
    except LayoutError as exc:
        metrics = RunMetrics.from_machine(m, baseline_static, p.static_size())
        return RunResult(m, metrics, [t.outputs for t in m.threads], None, layout_error=str(exc))
    metrics = RunMetrics.from_machine(m, baseline_static, p.static_size())
    return RunResult(m, metrics, [list(t.outputs) for t in m.threads], fault,
                     compare_to_oracle(m).divergences)


def run_program(p: Program, cfg: Optional[ShadowConfig], seed: int = 0,
                hooks: Iterable[str] = DEFAULT_HOOKS, **kw) -> RunResult:
    return execute(build(p, cfg, hooks), cfg, seed=seed, baseline_static=p.static_size(), **kw)
