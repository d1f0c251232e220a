"""One check per primary acceptance criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary,
then asserts, so a failing criterion also fails the suite.
"""
from __future__ import annotations

import itertools
import random

from conftest import ACCEPTANCE_LINES, ALL_CONFIGS
from shadowlab import workloads
from shadowlab.attacks import (Outcome, leak_scan, rop_scenario, run_scenario,
                               shadow_overwrite_scenario, toctou_probe)
from shadowlab.config import Integrity, Mapping, ShadowConfig, Validation
from shadowlab.metrics import PUBLISHED_MATRIX, additivity_gap, compat_matrix, matrix_symbols, \
    memory_overhead, overhead_breakdown
from shadowlab.runner import _shadow_depth, run_program
from shadowlab.runtime import unwind_source
from shadowlab.shadow_pass import EpilogueHarness, make_prologue

PROLOGUE_SIZES = {Mapping.PARALLEL_CONSTANT: 2, Mapping.PARALLEL_REGISTER: 2,
                  Mapping.COMPACT_REGISTER: 4, Mapping.COMPACT_SEGMENT: 6,
                  Mapping.COMPACT_GLOBAL: 10}


def record(name: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}"
    if detail:
        line += f"  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


PROLOGUE_OPS = {
    Mapping.PARALLEL_CONSTANT: ["mov", "mov"],
    Mapping.PARALLEL_REGISTER: ["mov", "mov"],
    Mapping.COMPACT_REGISTER: ["mov", "mov", "mov", "lea"],
    Mapping.COMPACT_SEGMENT: ["mov", "mov", "mov", "mov", "add", "mov"],
    Mapping.COMPACT_GLOBAL: ["mov"] * 7 + ["add", "mov", "mov"],
}


def test_prologue_sizes():
    got = {m: make_prologue(ShadowConfig(m, Validation.CMP)) for m in Mapping}
    sizes = {m: len(seq) for m, seq in got.items()}
    shapes = all([i.op for i in got[m]] == PROLOGUE_OPS[m] for m in Mapping)
    record("prologue sizes 2/2/4/6/10", sizes == PROLOGUE_SIZES and shapes,
           " ".join(f"{m.value}={n}" for m, n in sizes.items()))


def test_security_sweep(victim):
    bad = []
    for pivot in (False, True):
        s = rop_scenario(pivot)
        base = run_scenario(victim, None, s)
        if base.outcome is not Outcome.HIJACKED:
            bad.append(f"baseline/{s.name}={base.label}")
        for cfg in ALL_CONFIGS:
            r = run_scenario(victim, cfg, s)
            if r.outcome is not Outcome.PREVENTED:
                bad.append(f"{cfg.label}/{s.name}={r.label}")
    record("security sweep: 40 prevented, baselines hijacked", not bad, ", ".join(bad[:5]))


def test_toctou():
    victim = workloads.workload("rop_victim")
    expected = {"window": Outcome.HIJACKED, "late": Outcome.PREVENTED,
                "post-validation": Outcome.PREVENTED}
    bad = []
    for cfg in ALL_CONFIGS:
        for mode, want in expected.items():
            r = toctou_probe(victim, cfg, mode)
            if r.outcome is not want:
                bad.append(f"{cfg.label}/{mode}={r.label}")
    record("TOCTTOU window hijacks, later and post-validation writes are prevented",
           not bad, ", ".join(bad[:5]))


def _ra_pairs(n: int, seed: int = 2024):
    rng = random.Random(seed)
    pairs = []
    for _ in range(n):
        shadow = rng.randrange(1 << 48)
        roll = rng.random()
        if roll < 0.25:
            program = shadow
        elif roll < 0.5:
            program = shadow ^ (1 << rng.randrange(64))
        else:
            program = rng.randrange(1 << 64)
        pairs.append((program, shadow))
    return pairs


def _grid():
    base = [0x400000, 0x400004, 0x7FFFFFFFFFF8, 0x0]
    flips = [0, 2, 47, 48, 63]
    values = base + [b ^ (1 << f) for b in base for f in flips]
    return [(a, b) for a, b in itertools.product(values, base)]


def test_validation_equivalence(victim):
    bad = []
    pairs = _ra_pairs(10_000)
    for policy in (Validation.CMP, Validation.FAULT, Validation.LBP):
        h = EpilogueHarness(ShadowConfig(Mapping.COMPACT_REGISTER, policy))
        for program, shadow in pairs:
            o = h.run(program, shadow)
            differ = program != shadow
            if o.jumped == differ or (o.jumped and o.target != shadow):
                bad.append(f"{policy.value}:{program:#x}/{shadow:#x}")
                break
    for mapping, policy in itertools.product(Mapping, Validation):
        h = EpilogueHarness(ShadowConfig(mapping, policy))
        for program, shadow in _grid():
            o = h.run(program, shadow)
            if policy is Validation.USE_SHADOW:
                ok = o.jumped and o.target == shadow
            else:
                ok = o.jumped != (program != shadow)
            if not ok:
                bad.append(f"{mapping.value}/{policy.value}:{program:#x}/{shadow:#x}")
                break
    # UseShadow under a real attack never follows the program's copy
    s = rop_scenario(False)
    for mapping in Mapping:
        cfg = ShadowConfig(mapping, Validation.USE_SHADOW)
        r = run_scenario(victim, cfg, s)
        if r.outcome is Outcome.HIJACKED or not r.delivered or r.divergences:
            bad.append(f"{mapping.value}/use-shadow {r.label} divergences={r.divergences}")
    record("validation equivalence over 10^4 pairs and grid", not bad, ", ".join(bad[:5]))


def test_published_matrix():
    got = matrix_symbols(compat_matrix())
    mism = [f"{m.value}:{got[m]}!={PUBLISHED_MATRIX[m]}" for m in Mapping if got[m] != PUBLISHED_MATRIX[m]]
    record("compatibility matrix equals the published table", not mism, ", ".join(mism))


class _UnwindWatch:
    """After every unwind, the compact shadow must sit on the oracle's top entry."""

    def __init__(self):
        self.seen = 0
        self.checks = 0
        self.errors = []

    def before_step(self, m):
        if m.unwinds == self.seen:
            return False
        self.seen = m.unwinds
        t = m.threads[0]
        depth = _shadow_depth(m, t)
        # the shadow holds one entry per instrumented frame; the oracle's
        # bottom entry is the loader's call into the entry function
        if depth != len(t.oracle):
            self.errors.append(f"depth {depth} vs oracle {len(t.oracle)}")
        else:
            ptr = t.shadow_entries + 16 * depth
            top = (m.peek(ptr - 16), m.peek(ptr - 8))
            if top != t.oracle[-1]:
                self.errors.append(f"top {top} vs oracle {t.oracle[-1]}")
        self.checks += 1
        return False


def test_unwinding():
    p = workloads.workload("setjmp_ladder")
    base = run_program(p, None)
    bad = []
    for mapping in Mapping:
        cfg = ShadowConfig(mapping, Validation.CMP)
        if mapping.compact:
            watch = _UnwindWatch()
            run = run_program(p, cfg, monitor=watch)
            if watch.errors or watch.checks == 0:
                bad.append(f"{mapping.value}: {watch.errors[:1] or 'no unwind seen'}")
        else:
            run = run_program(p, cfg)
            if "__lj_loop" in unwind_source(cfg) or "[seg:" in unwind_source(cfg):
                bad.append(f"{mapping.value}: longjmp adjusts the shadow")
        if run.outputs != base.outputs or not run.balanced:
            bad.append(f"{mapping.value}: outputs {run.outputs} balanced={run.balanced}")
    record("unwinding restores the (RA, SP) entry; parallel needs no adjustment",
           not bad, ", ".join(bad[:5]))


def test_breakdown_additivity():
    rows = overhead_breakdown(workloads.workload("fib", 20))
    gap = additivity_gap(rows)
    record("breakdown additivity on fib(20) within 1%", gap <= 0.01, f"gap={gap:.4%}")


def test_memory_overhead():
    bad = []
    for name, n in (("fib", 10), ("fib", 15), ("mutual", 50), ("mutual", 200)):
        p = workloads.workload(name, n)
        for mapping in Mapping:
            cfg = ShadowConfig(mapping, Validation.CMP)
            run = run_program(p, cfg)
            rep = memory_overhead(cfg, run)
            if mapping.compact:
                ok = rep.shadow_high_water == 16 * rep.max_depth
            else:
                ok = rep.shadow_allocated == rep.stack_size
            if not ok:
                bad.append(f"{name}({n})/{mapping.value}: {rep}")
    record("memory: parallel = stack size, compact = 16 bytes x depth", not bad, ", ".join(bad[:3]))


def test_integrity(victim):
    bad = []
    s = shadow_overwrite_scenario()
    want = {Integrity.KEY: "KeyDenied", Integrity.BOUNDS: "BoundsDenied",
            Integrity.PRIV_MOVE: "PermissionDenied"}
    for mapping in Mapping:
        for integrity in (Integrity.KEY, Integrity.BOUNDS, Integrity.PRIV_MOVE, Integrity.INFO_HIDING):
            cfg = ShadowConfig(mapping, Validation.CMP, integrity=integrity)
            r = run_scenario(victim, cfg, s)
            if integrity is Integrity.INFO_HIDING:
                ok = r.outcome is Outcome.HIJACKED
            else:
                ok = r.outcome is Outcome.PREVENTED and r.fault == want[integrity]
            if not ok:
                bad.append(f"{cfg.label}/{integrity.value}={r.label}")
    fib = workloads.workload("fib")
    hidden = ShadowConfig(Mapping.COMPACT_REGISTER, Validation.CMP, integrity=Integrity.INFO_HIDING)
    run = run_program(fib, hidden)
    if leak_scan(run.machine, hidden).found:
        bad.append("compact-register leaks under info-hiding")
    glob = ShadowConfig(Mapping.COMPACT_GLOBAL, Validation.CMP, integrity=Integrity.INFO_HIDING)
    run = run_program(fib, glob)
    rep = leak_scan(run.machine, glob)
    if not rep.found or f"{run.machine.symbols['GLOBAL_WORD']:#x}" not in rep.locations:
        bad.append(f"compact-global word not found: {rep}")
    record("integrity schemes stop the shadow overwrite; leak scan as expected",
           not bad, ", ".join(bad[:5]))


def test_transparency(standard_programs):
    bad = []
    for name, p in standard_programs.items():
        base = run_program(p, None)
        for cfg in ALL_CONFIGS:
            run = run_program(p, cfg)
            if run.outputs != base.outputs or not run.balanced:
                bad.append(f"{name}/{cfg.label}")
    record("transparency across 20 configs and 6 workloads", not bad, ", ".join(bad[:5]))
