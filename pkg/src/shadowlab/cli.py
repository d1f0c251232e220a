"""Command-line entry point.

Exit codes:
  0   clean run (or an attack that had no effect)
  1   attack prevented
  2   usage error (bad flags, unreadable or malformed input)
  3   attack hijacked control flow
  4   internal error
  5   attack crashed the program without being prevented
  10  run faulted: NonCanonicalAddress
  11  run faulted: PermissionDenied
  12  run faulted: KeyDenied
  13  run faulted: BoundsDenied
  14  run faulted: Unmapped
  15  run faulted: ShadowMismatchAbort
  16  run stopped: address-space layout conflict
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .asmfmt import (ParseError, Program, dumps_canonical, emit_program, loads_canonical,
                     parse_program)
from .config import (ConfigError, Integrity, Mapping, ShadowConfig, Validation, Variant,
                     parse_int)
from .machine import FaultKind, MachineError

EXIT_CLEAN, EXIT_PREVENTED, EXIT_USAGE, EXIT_HIJACKED, EXIT_INTERNAL, EXIT_CRASHED = 0, 1, 2, 3, 4, 5
FAULT_EXIT = {kind: 10 + i for i, kind in enumerate(FaultKind)}
EXIT_LAYOUT = 16
SEED_ENV = "SHADOWLAB_SEED"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ inputs
def _read_program(ref: str, n: Optional[int] = None) -> Program:
    """A path to a .msa or canonical .json program, or the name of a shipped workload."""
    from . import workloads

    path = Path(ref)
    if path.exists():
        text = path.read_text()
        p = loads_canonical(text) if path.suffix == ".json" else parse_program(text)
        if n is not None:
            raise UsageError("--size only applies to shipped workloads")
        return p
    if ref in workloads.names():
        return workloads.workload(ref, n)
    raise UsageError(f"no such program file or workload: {ref}")


def _read_scenario(ref: str):
    from . import workloads
    from .attacks import parse_scenario

    path = Path(ref)
    if path.exists():
        return parse_scenario(path.read_text())
    if ref in workloads.SCENARIOS:
        return parse_scenario(workloads.scenario_source(ref))
    raise UsageError(f"no such scenario file or shipped scenario: {ref}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw, 0)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _config(args) -> Optional[ShadowConfig]:
    if args.map is None:
        if args.validate or args.integrity or args.offset is not None or args.variant:
            raise UsageError("--validate/--integrity/--offset/--variant need --map")
        return None
    kw = dict(mapping=args.map, validation=args.validate or "use-shadow",
              integrity=args.integrity or "none", variant=args.variant or "full",
              reserved=args.reserved)
    if args.offset is not None:
        kw["offset"] = args.offset
    return ShadowConfig(**kw)


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands
def cmd_asm(args) -> int:
    p = parse_program(Path(args.input).read_text())
    _write(dumps_canonical(p), args.output)
    return EXIT_CLEAN


def cmd_disasm(args) -> int:
    text = Path(args.input).read_text()
    p = loads_canonical(text) if args.input.endswith(".json") else parse_program(text)
    _write(emit_program(p, annotate=args.annotate), args.output)
    return EXIT_CLEAN


def cmd_instrument(args) -> int:
    from .runner import build
    from .shadow_pass import added_counts

    cfg = _config(args)
    if cfg is None:
        raise UsageError("instrument needs --map")
    p = _read_program(args.input)
    q = build(p, cfg, hooks=() if args.no_hooks else ("threads", "unwind"))
    _write(emit_program(q, annotate=args.annotate), args.output)
    for name, n in sorted(added_counts(p, q).items()):
        print(f"{name}: +{n}", file=sys.stderr)
    return EXIT_CLEAN


def cmd_run(args) -> int:
    from .attacks import Outcome, run_scenario
    from .metrics import attack_section, emit_report, memory_overhead, memory_section, metrics_section
    from .runner import run_program

    cfg = _config(args)
    seed = args.seed if args.seed is not None else _default_seed()
    p = _read_program(args.program, args.size)
    label = cfg.label if cfg else "baseline"
    if args.attack:
        s = _read_scenario(args.attack)
        result = run_scenario(p, cfg, s, seed=seed)
        _write(emit_report([attack_section([(label, s.name or s.kind.value, result)])], args.format),
               args.output)
        return {Outcome.HIJACKED: EXIT_HIJACKED, Outcome.PREVENTED: EXIT_PREVENTED,
                Outcome.CRASHED: EXIT_CRASHED, Outcome.NO_EFFECT: EXIT_CLEAN}[result.outcome]
    hooks = () if args.no_hooks else ("threads", "unwind")
    run = run_program(p, cfg, seed=seed, hooks=hooks, trace=bool(args.trace))
    status = "clean" if run.clean else (run.fault.kind.value if run.fault else "layout-conflict")
    sections = [metrics_section(f"Run {label}", [(label, run.metrics, status)])]
    if cfg is not None and run.machine is not None:
        sections.append(memory_section([memory_overhead(cfg, run)]))
    sections[0].notes.extend(f"thread {i} output: {' '.join(str(v) for v in out)}"
                             for i, out in enumerate(run.outputs))
    _write(emit_report(sections, args.format), args.output)
    if args.trace and run.machine is not None:
        Path(args.trace).write_text("\n".join(run.machine.trace) + "\n")
    if run.layout_error:
        print(f"layout conflict: {run.layout_error}", file=sys.stderr)
        return EXIT_LAYOUT
    if run.fault is not None:
        return FAULT_EXIT[run.fault.kind]
    return EXIT_CLEAN


def cmd_matrix(args) -> int:
    from .metrics import compat_matrix, emit_report, matrix_section

    seed = args.seed if args.seed is not None else _default_seed()
    _write(emit_report([matrix_section(compat_matrix(seed=seed))], args.format), args.output)
    return EXIT_CLEAN


def cmd_sweep(args) -> int:
    from .sweep import parse_sweep_config, run_sweep

    cfg = parse_sweep_config(Path(args.config).read_text() if args.config else "")
    if args.seed is not None:
        cfg.seed = args.seed
    elif "seed" not in cfg.explicit:
        cfg.seed = _default_seed()
    _write(run_sweep(cfg, fmt=args.format, jobs=args.jobs), args.output)
    return EXIT_CLEAN


# ------------------------------------------------------------------ parser
def _config_flags(sp) -> None:
    sp.add_argument("--map", choices=[m.value for m in Mapping], help="shadow-stack mapping")
    sp.add_argument("--validate", choices=[v.value for v in Validation], help="epilogue validation policy")
    sp.add_argument("--integrity", choices=[i.value for i in Integrity], help="shadow-region integrity scheme")
    sp.add_argument("--variant", choices=[v.value for v in Variant], help="breakdown variant")
    sp.add_argument("--offset", type=parse_int, help="parallel-constant offset (32-bit)")
    sp.add_argument("--reserved", default="g15", help="reserved register for register mappings")
    sp.add_argument("--no-hooks", action="store_true",
                    help="do not link the thread and unwind hooks")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shadowlab", description="Shadow-stack design-space laboratory.",
                                 epilog="Exit codes are listed in the module documentation (shadowlab.cli).")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("asm", help="assemble MiniISA text into canonical JSON")
    sp.add_argument("input")
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_asm)

    sp = sub.add_parser("disasm", help="render a program as canonical MiniISA text")
    sp.add_argument("input")
    sp.add_argument("-o", "--output")
    sp.add_argument("--annotate", action="store_true", help="comment instrumentation categories")
    sp.set_defaults(func=cmd_disasm)

    sp = sub.add_parser("instrument", help="instrument a program and print it")
    sp.add_argument("input")
    sp.add_argument("-o", "--output")
    sp.add_argument("--annotate", action="store_true")
    _config_flags(sp)
    sp.set_defaults(func=cmd_instrument)

    sp = sub.add_parser("run", help="run a program or workload, optionally under attack")
    sp.add_argument("program", help="path to .msa/.json or a shipped workload name")
    _config_flags(sp)
    sp.add_argument("--seed", type=parse_int)
    sp.add_argument("--size", type=parse_int, help="size parameter of a shipped workload")
    sp.add_argument("--attack", help="scenario file or shipped scenario name")
    sp.add_argument("--format", choices=("text", "json", "csv"), default="text")
    sp.add_argument("--trace", help="write the execution trace to this file")
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run a configuration grid and write one report")
    sp.add_argument("config", nargs="?", help="key=value sweep configuration (default grid if omitted)")
    sp.add_argument("--format", choices=("text", "json", "csv"), default="text")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--seed", type=parse_int)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("matrix", help="reproduce the compatibility matrix")
    sp.add_argument("--format", choices=("text", "json", "csv"), default="text")
    sp.add_argument("--seed", type=parse_int)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_matrix)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_CLEAN
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError, OSError, ValueError) as exc:
        print(f"shadowlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MachineError as exc:
        print(f"shadowlab: machine error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"shadowlab: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
