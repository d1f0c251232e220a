"""MiniISA instruction model shared by the assembler, passes and VM."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

REGISTERS = tuple(f"g{i}" for i in range(16)) + ("sp",)
REG_INDEX = {name: i for i, name in enumerate(REGISTERS)}
SP = REG_INDEX["sp"]

INSN_SIZE = 4
MASK64 = (1 << 64) - 1
IMM_MIN = -(1 << 31)
IMM_MAX = (1 << 31) - 1

# opcode -> operand count
OPCODES: Dict[str, int] = {
    "mov": 2, "movb": 2, "push": 1, "pop": 1,
    "call": 1, "ret": 0, "jmp": 1,
    "jne": 1, "je": 1, "jl": 1, "jge": 1,
    "cmp": 2, "xor": 2, "or": 2, "and": 2, "add": 2, "sub": 2,
    "shl": 2, "shr": 2, "lea": 2, "popcnt": 2,
    "wrkperm": 1, "bndcl": 1, "bndcu": 1,
    "spawn": 2, "join": 1, "out": 1,
    "halt": 0, "abort": 0, "nop": 0,
}

CATEGORIES = ("application", "prologue", "epilogue", "validation", "integrity")


def fits_imm32(value: int) -> bool:
    return IMM_MIN <= value <= IMM_MAX


@dataclass(frozen=True)
class Reg:
    name: str


@dataclass(frozen=True)
class Imm:
    # int, or a symbol resolved by the loader
    value: Union[int, str]


@dataclass(frozen=True)
class Mem:
    base: Optional[str] = None
    index: Optional[str] = None
    disp: Union[int, str] = 0
    seg: bool = False


Operand = Union[Reg, Imm, Mem]


@dataclass
class Instruction:
    """One MiniISA instruction.

    ``attrs`` carries pass metadata that survives a text round-trip:
    ``cat`` (cost category), ``priv`` (privileged-move region id),
    ``sw`` (writes shadow state), ``ret`` (jump that acts as a return),
    ``tail`` (tail-call jump), ``unwind`` (longjmp transfer), ``ra`` (the
    prologue's return-address load).
    """

    op: str
    operands: Tuple[Operand, ...] = ()
    attrs: Dict[str, object] = field(default_factory=dict)
    labels: Tuple[str, ...] = ()

    @property
    def priv(self) -> int:
        return int(self.attrs.get("priv", 0))

    @property
    def category(self) -> str:
        return str(self.attrs.get("cat", "application"))

    def mem_operand(self) -> Optional[Mem]:
        for o in self.operands:
            if isinstance(o, Mem):
                return o
        return None

    def is_store(self) -> bool:
        """True for instructions whose destination is an explicit memory operand."""
        if self.op in ("mov", "add", "sub", "xor", "or", "and", "shl", "shr") and self.operands:
            return isinstance(self.operands[0], Mem)
        return False

    def with_attrs(self, **kw) -> "Instruction":
        attrs = dict(self.attrs)
        attrs.update(kw)
        return Instruction(self.op, self.operands, attrs, self.labels)


def insn(op: str, *operands: Operand, **attrs) -> Instruction:
    return Instruction(op, tuple(operands), dict(attrs))


def R(name: str) -> Reg:
    return Reg(name)


def I(value: Union[int, str]) -> Imm:
    return Imm(value)


def M(base: Optional[str] = None, disp: Union[int, str] = 0, index: Optional[str] = None,
      seg: bool = False) -> Mem:
    return Mem(base, index, disp, seg)
