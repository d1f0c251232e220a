"""Shadow-stack design-space laboratory on a small simulated ISA."""
from .asmfmt import Program, emit_program, parse_program
from .config import Integrity, Mapping, ShadowConfig, Validation, Variant
from .runner import build, execute, run_program

__version__ = "0.1.0"

__all__ = [
    "Integrity", "Mapping", "Program", "ShadowConfig", "Validation", "Variant",
    "build", "emit_program", "execute", "parse_program", "run_program",
]
