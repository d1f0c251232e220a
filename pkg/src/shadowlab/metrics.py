"""Run counters, oracle comparison, compatibility matrix and reports.

Overheads are reported as instruction counts and ratios of counts, never
as wall-clock percentages.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from .config import Mapping, ShadowConfig, Validation, Variant
from .isa import CATEGORIES
from .machine import Machine

REPORT_SCHEMA = "shadowlab-report"
REPORT_VERSION = 1


@dataclass
class RunMetrics:
    dynamic: int = 0
    by_category: Dict[str, int] = field(default_factory=dict)
    static_baseline: int = 0
    static_instrumented: int = 0
    shadow_high_water: int = 0
    stack_high_water: int = 0
    shadow_allocated: int = 0
    calls: int = 0
    returns: int = 0
    unwinds: int = 0
    discarded: int = 0
    outstanding: int = 0
    max_depth: int = 0

    @classmethod
    def from_machine(cls, m: Machine, static_baseline: int = 0, static_instrumented: int = 0):
        cats = {c: m.by_category.get(c, 0) for c in CATEGORIES}
        for c, n in m.by_category.items():
            cats.setdefault(c, n)
        layout = m.layout.layout if m.layout is not None else None
        allocated = sum(hi - lo for lo, hi in layout.regions) if layout is not None else 0
        return cls(
            dynamic=m.dyn_count,
            by_category=cats,
            static_baseline=static_baseline,
            static_instrumented=static_instrumented,
            shadow_high_water=max((t.shadow_hw for t in m.threads), default=0),
            stack_high_water=max((t.stack_hi - t.stack_min_sp for t in m.threads), default=0),
            shadow_allocated=allocated,
            calls=m.calls,
            returns=m.returns,
            unwinds=m.unwinds,
            discarded=m.discarded,
            outstanding=sum(len(t.oracle) for t in m.threads),
            max_depth=max((t.max_depth for t in m.threads), default=0),
        )

    def check_conservation(self) -> List[str]:
        """Violated counter invariants; empty when all hold."""
        problems = []
        if sum(self.by_category.values()) != self.dynamic:
            problems.append("category counts do not sum to the dynamic count")
        if self.calls != self.returns + self.discarded + self.outstanding:
            problems.append("calls differ from returns plus discarded and outstanding frames")
        return problems


@dataclass
class OracleVerdict:
    divergences: List[dict]

    @property
    def clean(self) -> bool:
        return not self.divergences


def compare_to_oracle(m: Machine) -> OracleVerdict:
    """Returns whose target differed from the ground-truth call stack."""
    return OracleVerdict([
        {"thread": d.thread, "step": d.step, "expected": d.expected, "actual": d.actual}
        for d in m.divergences
    ])


# ------------------------------------------------------------ breakdowns
@dataclass
class BreakdownRow:
    variant: str
    dynamic: int
    added: int
    added_per_call: float
    prologue: int
    epilogue: int
    validation: int

    def cells(self):
        return [self.variant, self.dynamic, self.added, f"{self.added_per_call:.3f}",
                self.prologue, self.epilogue, self.validation]


BREAKDOWN_COLUMNS = ("variant", "dynamic", "added", "added-per-call", "prologue", "epilogue", "validation")


def overhead_breakdown(p, mapping: Mapping = Mapping.COMPACT_REGISTER,
                       validation: Validation = Validation.USE_SHADOW, seed: int = 0) -> List[BreakdownRow]:
    """Dynamic counts of baseline, ret-to-pop/jmp only, shadow maintenance only, and both."""
    from .runner import run_program

    base = run_program(p, None, seed=seed)
    rows = [BreakdownRow("baseline", base.metrics.dynamic, 0, 0.0, 0, 0, 0)]
    for variant in (Variant.POP_JMP_ONLY, Variant.MAINTAIN_ONLY, Variant.FULL):
        cfg = ShadowConfig(mapping, validation, variant=variant)
        run = run_program(p, cfg, seed=seed)
        if not run.clean:
            raise RuntimeError(f"breakdown run {variant.value} did not exit cleanly")
        added = run.metrics.dynamic - base.metrics.dynamic
        cats = run.metrics.by_category
        rows.append(BreakdownRow(variant.value, run.metrics.dynamic, added,
                                 added / max(run.metrics.calls, 1), cats.get("prologue", 0),
                                 cats.get("epilogue", 0), cats.get("validation", 0)))
    return rows


def additivity_gap(rows: Sequence[BreakdownRow]) -> float:
    """|full - (pop-jmp-only + maintain-only)| as a fraction of the baseline count."""
    by = {r.variant: r for r in rows}
    gap = abs(by["full"].added - (by["pop-jmp-only"].added + by["maintain-only"].added))
    return gap / by["baseline"].dynamic


# -------------------------------------------------------- compatibility
SUPPORTED, UNSUPPORTED, DEPENDS = "✓", "✗", "✦"
COMPAT_COLUMNS = ("threading", "unwinding", "unprotected")

# the published compatibility cells, one row per mapping
PUBLISHED_MATRIX = {
    Mapping.COMPACT_GLOBAL: (UNSUPPORTED, SUPPORTED, SUPPORTED),
    Mapping.COMPACT_SEGMENT: (SUPPORTED, SUPPORTED, SUPPORTED),
    Mapping.COMPACT_REGISTER: (SUPPORTED, SUPPORTED, DEPENDS),
    Mapping.PARALLEL_CONSTANT: (UNSUPPORTED, SUPPORTED, SUPPORTED),
    Mapping.PARALLEL_REGISTER: (DEPENDS, SUPPORTED, SUPPORTED),
}


@dataclass
class CompatCell:
    symbol: str
    primary: str        # outcome of the standard test
    variant: str        # outcome of the implementation variant


def _verdict(run, base) -> str:
    if run.layout_error:
        return "layout-conflict"
    if run.fault is not None:
        return run.fault.kind.value
    if run.outputs != base.outputs:
        return "wrong-output"
    if not run.balanced:
        return "unbalanced"
    return "pass"


def _cell(primary: str, variant: str) -> CompatCell:
    if primary != "pass":
        return CompatCell(UNSUPPORTED, primary, variant)
    return CompatCell(SUPPORTED if variant == "pass" else DEPENDS, primary, variant)


def compat_matrix(suite: Optional[Dict[str, object]] = None, validation: Validation = Validation.CMP,
                  seed: int = 0) -> Dict[Mapping, Dict[str, CompatCell]]:
    """Run the threading, unwinding and callback tests under every mapping.

    A cell is supported when the standard test passes, implementation
    dependent when the standard test passes but its variant fails, and
    unsupported when the standard test fails. Variants: threads whose
    offset register is inherited from the parent instead of set by the
    thread hook; unprotected code that clobbers the reserved register.
    """
    from .runner import run_program
    from .workloads import workload

    suite = suite or {}
    threads = suite.get("threads") or workload("threads")
    ladder = suite.get("unwinding") or workload("setjmp_ladder")
    callback = suite.get("callback") or workload("sorter")
    clobber = suite.get("callback_clobber") or workload("sorter_clobber")
    bases = {k: run_program(v, None, seed=seed) for k, v in
             (("t", threads), ("u", ladder), ("c", callback), ("k", clobber))}
    out: Dict[Mapping, Dict[str, CompatCell]] = {}
    for mapping in Mapping:
        cfg = ShadowConfig(mapping, validation)
        t1 = _verdict(run_program(threads, cfg, seed=seed), bases["t"])
        t2 = _verdict(run_program(threads, cfg, seed=seed, inherit_offset=True), bases["t"])
        u1 = _verdict(run_program(ladder, cfg, seed=seed), bases["u"])
        c1 = _verdict(run_program(callback, cfg, seed=seed), bases["c"])
        c2 = _verdict(run_program(clobber, cfg, seed=seed), bases["k"])
        out[mapping] = {"threading": _cell(t1, t2), "unwinding": _cell(u1, u1),
                        "unprotected": _cell(c1, c2)}
    return out


def matrix_symbols(matrix) -> Dict[Mapping, tuple]:
    return {m: tuple(row[c].symbol for c in COMPAT_COLUMNS) for m, row in matrix.items()}


# ------------------------------------------------------------- memory
@dataclass
class MemoryReport:
    mapping: str
    shadow_allocated: int
    shadow_high_water: int
    stack_high_water: int
    stack_size: int
    max_depth: int

    @property
    def allocated_ratio(self) -> float:
        return self.shadow_allocated / self.stack_size if self.stack_size else 0.0

    @property
    def used_ratio(self) -> float:
        return self.shadow_high_water / self.stack_high_water if self.stack_high_water else 0.0

    def cells(self):
        return [self.mapping, self.shadow_allocated, self.shadow_high_water, self.stack_high_water,
                self.max_depth, f"{self.allocated_ratio:.3f}", f"{self.used_ratio:.3f}"]


MEMORY_COLUMNS = ("mapping", "shadow-allocated", "shadow-high-water", "stack-high-water",
                  "max-depth", "allocated/stack", "shadow/stack-used")


def memory_overhead(cfg: ShadowConfig, run) -> MemoryReport:
    """Shadow memory of one completed run, per thread maxima.

    Allocation counts one thread's region: the full stack size for
    parallel mappings, the compact region size otherwise.
    """
    m = run.machine
    layout = m.layout.layout
    per_thread = layout.stack_size if not cfg.mapping.compact else layout.shadow_size
    return MemoryReport(cfg.mapping.value, per_thread, run.metrics.shadow_high_water,
                        run.metrics.stack_high_water, layout.stack_size, run.metrics.max_depth)


# ------------------------------------------------------------- reports
REPORT_FORMATS = ("text", "json", "csv")


@dataclass
class Section:
    title: str
    columns: Sequence[str]
    rows: List[list]
    notes: List[str] = field(default_factory=list)


def _plain(v):
    if isinstance(v, float):
        return f"{v:.3f}"
    if hasattr(v, "value"):
        return v.value
    return v


def emit_report(sections: Sequence[Section], fmt: str = "text") -> str:
    """Render sections as aligned text, a versioned JSON document, or CSV.

    Output depends only on the sections given, so equal inputs render to
    byte-identical documents.
    """
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {', '.join(REPORT_FORMATS)}")
    if fmt == "json":
        doc = {"schema": REPORT_SCHEMA, "version": REPORT_VERSION, "sections": [
            {"title": s.title, "columns": list(s.columns),
             "rows": [[_plain(v) for v in r] for r in s.rows], "notes": list(s.notes)}
            for s in sections]}
        return json.dumps(doc, indent=2, ensure_ascii=False, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for i, s in enumerate(sections):
            if i:
                w.writerow([])
            w.writerow([f"# {s.title}"])
            w.writerow(list(s.columns))
            for r in s.rows:
                w.writerow([_plain(v) for v in r])
        return buf.getvalue()
    out = []
    for s in sections:
        cells = [[str(c) for c in s.columns]] + [[str(_plain(v)) for v in r] for r in s.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(s.columns))]
        out.append(s.title)
        out.append("=" * len(s.title))
        for j, row in enumerate(cells):
            out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
            if j == 0:
                out.append("  ".join("-" * w for w in widths))
        out.extend(s.notes)
        out.append("")
    return "\n".join(out)


def metrics_section(title: str, rows: Sequence[tuple]) -> Section:
    """rows: (label, RunMetrics, status)."""
    cols = ("run", "status", "dynamic") + tuple(CATEGORIES) + (
        "static-baseline", "static-instrumented", "calls", "returns", "shadow-high-water",
        "stack-high-water")
    body = []
    for label, mt, status in rows:
        body.append([label, status, mt.dynamic] + [mt.by_category.get(c, 0) for c in CATEGORIES] + [
            mt.static_baseline, mt.static_instrumented, mt.calls, mt.returns,
            mt.shadow_high_water, mt.stack_high_water])
    return Section(title, cols, body)


def breakdown_section(rows: Sequence[BreakdownRow], mapping: Mapping = Mapping.COMPACT_REGISTER) -> Section:
    gap = additivity_gap(rows)
    return Section(f"Overhead breakdown ({mapping.value}, dynamic instructions)", BREAKDOWN_COLUMNS,
                   [r.cells() for r in rows],
                   [f"additivity gap |full - (pop-jmp-only + maintain-only)| / baseline = {gap:.6f}"])


def matrix_section(matrix) -> Section:
    rows = []
    for mapping in Mapping:
        row = matrix[mapping]
        rows.append([mapping.value] + [row[c].symbol for c in COMPAT_COLUMNS])
    agree = matrix_symbols(matrix) == PUBLISHED_MATRIX
    return Section("Compatibility matrix", ("mapping",) + COMPAT_COLUMNS, rows,
                   [f"{SUPPORTED} supported, {UNSUPPORTED} not supported, {DEPENDS} implementation dependent",
                    f"matches the published table: {'yes' if agree else 'no'}"])


def attack_section(results: Sequence[tuple]) -> Section:
    """results: (config label, scenario name, AttackResult)."""
    rows = [[cfg, name, r.label, r.steps] for cfg, name, r in results]
    return Section("Attack outcomes", ("config", "scenario", "outcome", "steps"), rows)


def memory_section(reports: Sequence[MemoryReport]) -> Section:
    return Section("Memory overhead (bytes)", MEMORY_COLUMNS, [r.cells() for r in reports])
