"""MiniISA runtime library: exit stubs and setjmp/longjmp.

Jump buffer layout (72 bytes)::

    0  return address of the setjmp call     40 g15 (unless reserved)
    8  caller SP after setjmp returns        48 RA of the shadow entry on top
    16 g12   24 g13   32 g14                 56 SP of the shadow entry on top
                                             64 shadow-pointer snapshot
"""
from __future__ import annotations

from typing import Optional

from .asmfmt import Function, Program, parse_program
from .config import Mapping, ShadowConfig

JMPBUF_SIZE = 72

STUBS = """
.func __rt unprotected runtime
__exit:
    halt
__thread_exit:
    halt
__ss_abort:
    abort
"""


def _load_ptr(cfg: ShadowConfig, dst: str) -> str:
    if cfg.mapping is Mapping.COMPACT_REGISTER:
        return f"    mov {dst}, {cfg.reserved}\n"
    if cfg.mapping is Mapping.COMPACT_SEGMENT:
        return f"    mov {dst}, [seg:0]\n"
    return f"    mov {dst}, GLOBAL_WORD\n    mov {dst}, [{dst}]\n"


def _store_ptr(cfg: ShadowConfig, src: str) -> str:
    if cfg.mapping is Mapping.COMPACT_REGISTER:
        return f"    mov {cfg.reserved}, {src}\n"
    if cfg.mapping is Mapping.COMPACT_SEGMENT:
        return f"    mov [seg:0], {src} @sw\n"
    return f"    mov g10, GLOBAL_WORD\n    mov [g10], {src} @sw\n"


def unwind_source(cfg: Optional[ShadowConfig]) -> str:
    """setjmp/longjmp for ``cfg``; plain versions for baseline and parallel mappings."""
    compact = cfg is not None and cfg.mapping.compact
    keep_reserved = cfg is not None and cfg.mapping.uses_register
    save15 = "" if keep_reserved else "    mov [g1+40], g15\n"
    load15 = "" if keep_reserved else "    mov g15, [g1+40]\n"

    setjmp = (
        ".func setjmp unprotected runtime\n"
        "    mov g10, [sp]\n"
        "    mov [g1], g10\n"
        "    lea g10, [sp+8]\n"
        "    mov [g1+8], g10\n"
        "    mov [g1+16], g12\n"
        "    mov [g1+24], g13\n"
        "    mov [g1+32], g14\n"
        + save15
    )
    if compact:
        setjmp += (
            _load_ptr(cfg, "g6")
            + "    mov g10, [g6-16]\n"
            "    mov [g1+48], g10\n"
            "    mov g10, [g6-8]\n"
            "    mov [g1+56], g10\n"
            "    mov [g1+64], g6\n"
        )
    setjmp += "    xor g0, g0\n    ret\n"

    longjmp = ".func longjmp unprotected runtime\n"
    if compact:
        # pop shadow entries until the (RA, SP) pair saved by setjmp is on top
        longjmp += (
            _load_ptr(cfg, "g6")
            + "    mov g7, [g1+64]\n"
            "__lj_loop:\n"
            "    cmp g6, g7\n"
            "    jl __lj_stale\n"
            "    mov g10, [g6-16]\n"
            "    mov g11, [g1+48]\n"
            "    cmp g10, g11\n"
            "    jne __lj_pop\n"
            "    mov g10, [g6-8]\n"
            "    mov g11, [g1+56]\n"
            "    cmp g10, g11\n"
            "    je __lj_found\n"
            "__lj_pop:\n"
            "    sub g6, 16\n"
            "    jmp __lj_loop\n"
            "__lj_stale:\n"
            "    jmp __ss_abort\n"
            "__lj_found:\n"
            + _store_ptr(cfg, "g6")
        )
    longjmp += (
        "    mov g12, [g1+16]\n"
        "    mov g13, [g1+24]\n"
        "    mov g14, [g1+32]\n"
        + load15
        + "    mov g0, g2\n"
        "    mov g10, [g1]\n"
        "    mov sp, [g1+8]\n"
        "    jmp g10 @unwind\n"
    )
    return setjmp + longjmp


def _functions(src: str):
    return parse_program(src).functions


def stub_functions():
    return _functions(STUBS)


def unwind_functions(cfg: Optional[ShadowConfig]):
    return _functions(unwind_source(cfg))


def with_runtime(p: Program, cfg: Optional[ShadowConfig] = None) -> Program:
    """Copy of ``p`` with stubs and any missing unwind routines appended.

    The shadow-aware setjmp/longjmp are used only when the program carries
    the ``unwind`` hook; otherwise the plain versions are linked.
    """
    q = p.copy()
    if not q.has_function("__rt"):
        q.functions.extend(stub_functions())
    refs = set(q.references())
    if ({"setjmp", "longjmp"} & refs) and not q.has_function("setjmp"):
        q.functions.extend(unwind_functions(cfg if "unwind" in q.hooks else None))
    return q


def is_runtime(f: Function) -> bool:
    return f.runtime
