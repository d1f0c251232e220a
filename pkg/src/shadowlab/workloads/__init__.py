"""Standard workloads shipped with the package."""
from __future__ import annotations

from importlib import resources
from typing import Dict, List, Optional

from ..asmfmt import Program, parse_program

STANDARD = ("fib", "countdown", "mutual", "setjmp_ladder", "pingpong", "sorter")
EXTRA = ("threads", "sorter_clobber", "rop_victim")

# data word that sets each workload's size parameter
PARAMETERS = {"fib": "fib_n", "countdown": "count_n", "mutual": "mutual_n",
              "setjmp_ladder": "ladder_depth"}


def names() -> List[str]:
    return list(STANDARD + EXTRA)


def source(name: str) -> str:
    if name not in STANDARD + EXTRA:
        raise KeyError(f"unknown workload {name!r}; known: {', '.join(names())}")
    return resources.files(__package__).joinpath(f"{name}.msa").read_text()


def workload(name: str, n: Optional[int] = None) -> Program:
    """Parse a shipped workload, optionally overriding its size parameter."""
    p = parse_program(source(name))
    if n is not None:
        if name not in PARAMETERS:
            raise ValueError(f"workload {name!r} has no size parameter")
        for d in p.data:
            if d.name == PARAMETERS[name]:
                d.init = (n,)
    return p


def standard() -> Dict[str, Program]:
    return {name: workload(name) for name in STANDARD}


SCENARIOS = ("rop_chain", "stack_pivot", "shadow_overwrite", "toctou_window")


def scenario_source(name: str) -> str:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}")
    return resources.files(__package__).joinpath(f"{name}.atk").read_text()
