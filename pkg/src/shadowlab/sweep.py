"""Batch sweeps over the configuration grid.

Configuration files are line-oriented ``key = value`` text; ``#`` starts a
comment. Lists are comma separated. Unknown keys are errors.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Set, Tuple

from .config import ConfigError, Integrity, Mapping, ShadowConfig, Validation

DEFAULT_INTEGRITY = (Integrity.INFO_HIDING, Integrity.KEY, Integrity.BOUNDS, Integrity.PRIV_MOVE)


@dataclass
class SweepConfig:
    mappings: Tuple[Mapping, ...] = tuple(Mapping)
    validations: Tuple[Validation, ...] = tuple(Validation)
    integrity: Tuple[Integrity, ...] = DEFAULT_INTEGRITY
    workloads: Tuple[str, ...] = ("fib",)
    size: Optional[int] = None
    attacks: Tuple[str, ...] = ("rop_chain", "stack_pivot")
    compat: bool = True
    breakdown: bool = True
    breakdown_workload: str = "fib"
    breakdown_size: Optional[int] = None
    seed: int = 0
    explicit: Set[str] = field(default_factory=set)

    def cells(self) -> List[Tuple[str, ShadowConfig]]:
        return [(w, ShadowConfig(m, v, i)) for w in self.workloads for m in self.mappings
                for v in self.validations for i in self.integrity]


def _list(value: str, enum=None):
    items = tuple(x.strip() for x in value.split(",") if x.strip())
    if enum is None:
        return items
    if items == ("none",):
        return (Integrity.NONE,) if enum is Integrity else ()
    try:
        return tuple(enum(x) for x in items)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("yes", "true", "1", "on"):
        return True
    if v in ("no", "false", "0", "off"):
        return False
    raise ConfigError(f"expected yes/no, got {value!r}")


def _opt_int(value: str) -> Optional[int]:
    return None if value.strip() in ("", "default") else int(value, 0)


_KEYS = {
    "mappings": lambda v: _list(v, Mapping),
    "validations": lambda v: _list(v, Validation),
    "integrity": lambda v: _list(v, Integrity),
    "workloads": _list,
    "size": _opt_int,
    "attacks": lambda v: () if v.strip() == "none" else _list(v),
    "compat": _bool,
    "breakdown": _bool,
    "breakdown_workload": str.strip,
    "breakdown_size": _opt_int,
    "seed": lambda v: int(v, 0),
}


def parse_sweep_config(text: str) -> SweepConfig:
    cfg = SweepConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _KEYS:
            raise ConfigError(f"sweep config line {lineno}: expected one of {', '.join(sorted(_KEYS))} = value")
        try:
            setattr(cfg, key, _KEYS[key](value))
        except ValueError as exc:
            raise ConfigError(f"sweep config line {lineno}: {exc}") from None
        cfg.explicit.add(key)
    return cfg


def _run_cell(job):
    """One grid cell; failures are reported in the row, never raised."""
    from .runner import run_program
    from .workloads import workload

    name, cfg, size, seed = job
    label = f"{name}:{cfg.label}"
    try:
        run = run_program(workload(name, size), cfg, seed=seed)
    except Exception as exc:  # recorded per cell; the sweep continues
        return label, None, f"error: {type(exc).__name__}: {exc}"
    if run.layout_error:
        status = "layout-conflict"
    elif run.fault is not None:
        status = run.fault.kind.value
    else:
        status = "clean" if run.balanced else "unbalanced"
    return label, run.metrics, status


def _run_attack(job):
    from .attacks import parse_scenario, run_scenario
    from .workloads import scenario_source, workload

    name, cfg, seed = job
    s = parse_scenario(scenario_source(name))
    return (cfg.label if cfg else "baseline", s.name or name,
            run_scenario(workload("rop_victim"), cfg, s, seed=seed))


def run_sweep(cfg: SweepConfig, fmt: str = "text", jobs: int = 1) -> str:
    from .metrics import (Section, attack_section, breakdown_section, compat_matrix, emit_report,
                          matrix_section, metrics_section, overhead_breakdown)
    from .runner import run_program
    from .workloads import workload

    jobs_cells = [(w, c, cfg.size, cfg.seed) for w, c in cfg.cells()]
    attack_jobs = []
    for name in cfg.attacks:
        attack_jobs.append((name, None, cfg.seed))
        attack_jobs += [(name, ShadowConfig(m, v), cfg.seed) for m in cfg.mappings for v in cfg.validations]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, jobs_cells))
            attacks = list(pool.map(_run_attack, attack_jobs))
    else:
        cells = [_run_cell(j) for j in jobs_cells]
        attacks = [_run_attack(j) for j in attack_jobs]

    sections = []
    baseline_rows = []
    for w in cfg.workloads:
        base = run_program(workload(w, cfg.size), None, seed=cfg.seed)
        baseline_rows.append((f"{w}:baseline", base.metrics, "clean" if base.clean else "fault"))
    from .metrics import RunMetrics
    rows = baseline_rows + [(label, m or RunMetrics(), status) for label, m, status in cells]
    grid = metrics_section(f"Grid ({len(cells)} cells)", rows)
    failed = sum(1 for _, _, st in cells if st != "clean")
    grid.notes.append(f"cells not clean: {failed}")
    sections.append(grid)
    if attacks:
        sections.append(attack_section(attacks))
    if cfg.compat:
        sections.append(matrix_section(compat_matrix(seed=cfg.seed)))
    if cfg.breakdown:
        p = workload(cfg.breakdown_workload, cfg.breakdown_size)
        sections.append(breakdown_section(overhead_breakdown(p, seed=cfg.seed)))
    return emit_report(sections, fmt)
