"""Design-space points and the fixed address-space layout."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .isa import fits_imm32

PAGE = 4096

# Address-space layout. Everything a 32-bit immediate must reach stays below 2**31.
LBP_PAGE = 0x0010_0000          # readable page; the guard page follows it
LBP_GUARD = LBP_PAGE + PAGE
LBP_LAST = LBP_GUARD - 1
CODE_BASE = 0x0040_0000
GLOBAL_WORD = 0x0FFF_F000       # CompactGlobal shadow-stack pointer word
SHADOW_BASE = 0x1000_0000       # compact regions, one per thread
SHADOW_THREAD_STRIDE = 0x0010_0000
SHADOW_ZONE_END = 0x2000_0000
DATA_BASE = 0x2000_0000
STACK_TOP = 0x7000_0000
PARALLEL_ZONE = 0x5000_0000     # per-thread parallel regions chosen by the thread hook
HIDE_ZONE = 0x1000_0000_0000    # information-hiding randomisation window
HIDE_SLOTS = 1 << 24

DEFAULT_STACK = 64 * 1024
DEFAULT_COMPACT_SHADOW = 4 * 1024
SEGMENT_HEADER = 16             # segment base holds the pointer word, entries follow
ENTRY_SIZE = 16


class Mapping(str, enum.Enum):
    COMPACT_GLOBAL = "compact-global"
    COMPACT_SEGMENT = "compact-segment"
    COMPACT_REGISTER = "compact-register"
    PARALLEL_CONSTANT = "parallel-constant"
    PARALLEL_REGISTER = "parallel-register"

    @property
    def compact(self) -> bool:
        return self.value.startswith("compact")

    @property
    def uses_register(self) -> bool:
        return self in (Mapping.COMPACT_REGISTER, Mapping.PARALLEL_REGISTER)


class Validation(str, enum.Enum):
    CMP = "cmp"
    FAULT = "fault"
    LBP = "lbp"
    USE_SHADOW = "use-shadow"


class Integrity(str, enum.Enum):
    INFO_HIDING = "info-hiding"
    KEY = "key"
    BOUNDS = "bounds"
    PRIV_MOVE = "priv-move"
    NONE = "none"


class Variant(str, enum.Enum):
    """Cost-decomposition variants used by the overhead breakdown."""

    FULL = "full"
    POP_JMP_ONLY = "pop-jmp-only"
    MAINTAIN_ONLY = "maintain-only"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ShadowConfig:
    mapping: Mapping
    validation: Validation = Validation.USE_SHADOW
    integrity: Integrity = Integrity.NONE
    # ParallelConstant: shadow = stack + offset. Two stack sizes keeps one
    # extra thread stack clear of the main stack, but not two.
    offset: int = 2 * DEFAULT_STACK
    reserved: str = "g15"
    variant: Variant = Variant.FULL
    shadow_size: int = DEFAULT_COMPACT_SHADOW
    stack_size: int = DEFAULT_STACK
    key_id: int = 1
    region_id: int = 1

    def __post_init__(self):
        for name, kind in (("mapping", Mapping), ("validation", Validation),
                           ("integrity", Integrity), ("variant", Variant)):
            value = getattr(self, name)
            if not isinstance(value, kind):
                object.__setattr__(self, name, kind(value))
        if not fits_imm32(self.offset) or not fits_imm32(self.offset - 8):
            raise ConfigError(f"parallel offset {self.offset:#x} does not fit a 32-bit immediate")
        if self.offset % 8:
            raise ConfigError("parallel offset must be 8-byte aligned")
        if not 0 <= self.key_id <= 15:
            raise ConfigError("key id must be in 0..15")
        if not 0 < self.region_id <= 255:
            raise ConfigError("region id must be in 1..255")
        if self.reserved not in ("g12", "g13", "g14", "g15"):
            raise ConfigError("reserved register must be callee-saved (g12..g15)")

    @property
    def label(self) -> str:
        s = f"{self.mapping.value}/{self.validation.value}"
        if self.integrity is not Integrity.NONE:
            s += f"/{self.integrity.value}"
        if self.variant is not Variant.FULL:
            s += f"/{self.variant.value}"
        return s


def all_configs(integrity: Integrity = Integrity.NONE):
    """The 20 mapping x validation points."""
    return [ShadowConfig(m, v, integrity) for m in Mapping for v in Validation]


def parse_int(text: str) -> int:
    return int(text, 0)


def optional_config(mapping: Optional[str], **kw) -> Optional[ShadowConfig]:
    if mapping in (None, "", "none", "baseline"):
        return None
    return ShadowConfig(Mapping(mapping), **kw)
