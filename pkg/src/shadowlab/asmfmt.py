"""MiniISA text format: parser, emitter and a canonical JSON form.

Grammar (one item per line, ``;`` starts a comment, opcodes case-insensitive)::

    .entry main
    .stack 65536
    .shadow 4096
    .data buf 64 1, 2, 3          ; size in bytes, optional 64-bit initial words
    .func name [unprotected] [runtime]
    label:
        mov g0, [sp+8]   @cat=prologue @sw
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .isa import (OPCODES, REGISTERS, Imm, Instruction, Mem, Operand, Reg, fits_imm32)

# symbols provided by the loader rather than the program text
BUILTIN_SYMBOLS = frozenset({
    "__exit", "__thread_exit", "__ss_abort", "LBP_LAST", "GLOBAL_WORD",
    "setjmp", "longjmp",
})


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0, unresolved=()):
        self.line = line
        self.col = col
        self.unresolved = list(unresolved)
        where = f"line {line}, col {col}: " if line else ""
        super().__init__(where + message)


@dataclass
class Function:
    name: str
    instructions: List[Instruction] = field(default_factory=list)
    protected: bool = True
    runtime: bool = False

    @property
    def tail_sites(self) -> List[int]:
        return [i for i, ins in enumerate(self.instructions) if ins.attrs.get("tail")]

    @property
    def ret_sites(self) -> List[int]:
        return [i for i, ins in enumerate(self.instructions) if ins.op == "ret"]


@dataclass
class DataObject:
    name: str
    size: int
    init: Tuple[int, ...] = ()


@dataclass
class Program:
    functions: List[Function] = field(default_factory=list)
    data: List[DataObject] = field(default_factory=list)
    entry: Optional[str] = None
    stack_size: Optional[int] = None
    shadow_size: Optional[int] = None
    hooks: Tuple[str, ...] = ()

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def has_function(self, name: str) -> bool:
        return any(f.name == name for f in self.functions)

    def labels(self) -> Dict[str, Tuple[str, int]]:
        """label -> (function, instruction index); function names map to index 0."""
        out: Dict[str, Tuple[str, int]] = {}
        for f in self.functions:
            out[f.name] = (f.name, 0)
            for i, ins in enumerate(f.instructions):
                for lab in ins.labels:
                    out[lab] = (f.name, i)
        return out

    def references(self) -> List[str]:
        refs = []
        for f in self.functions:
            for ins in f.instructions:
                for o in ins.operands:
                    sym = _symbol_of(o)
                    if sym is not None:
                        refs.append(sym)
        return refs

    def static_size(self) -> int:
        return sum(len(f.instructions) for f in self.functions)

    def copy(self) -> "Program":
        return program_from_dict(program_to_dict(self))


def _symbol_of(o: Operand) -> Optional[str]:
    v = o.value if isinstance(o, Imm) else o.disp if isinstance(o, Mem) else None
    if isinstance(v, str):
        return split_symbol(v)[0]
    return None


def split_symbol(expr: str) -> Tuple[str, int]:
    m = re.fullmatch(r"([A-Za-z_.$][\w.$]*)\s*([+-]\s*(?:0x[0-9a-fA-F]+|\d+))?", expr.strip())
    if not m:
        raise ValueError(f"bad symbol expression {expr!r}")
    addend = int(m.group(2).replace(" ", ""), 0) if m.group(2) else 0
    return m.group(1), addend


# ------------------------------------------------------------------ parsing
_NUM = re.compile(r"[+-]?(0x[0-9a-fA-F_]+|\d[\d_]*)$")
_SYM = re.compile(r"[A-Za-z_.$][\w.$]*$")
_LABEL = re.compile(r"\s*([A-Za-z_.$][\w.$]*)\s*:(?!\S*\])")


def _num(text: str) -> Optional[int]:
    t = text.strip()
    if _NUM.match(t):
        return int(t.replace("_", ""), 0)
    return None


def _split_operands(text: str) -> List[str]:
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur)
    return [p.strip() for p in parts]


def _parse_value(tok: str, lineno: int, col: int):
    n = _num(tok)
    if n is not None:
        if not fits_imm32(n):
            raise ParseError(f"immediate {tok} exceeds 32 bits", lineno, col)
        return n
    try:
        sym, addend = split_symbol(tok)
    except ValueError:
        raise ParseError(f"bad operand {tok!r}", lineno, col) from None
    if not fits_imm32(addend):
        raise ParseError(f"addend in {tok} exceeds 32 bits", lineno, col)
    return sym if addend == 0 else f"{sym}{addend:+d}"


def _parse_mem(body: str, lineno: int, col: int) -> Mem:
    seg = False
    body = body.strip()
    if body.lower().startswith("seg:"):
        seg = True
        body = body[4:]
    terms = re.findall(r"([-+]?)([^-+]+)", body.replace(" ", ""))
    base = index = None
    disp_int = 0
    disp_sym = None
    for sign, term in terms:
        t = term.lower()
        if t in REGISTERS:
            if sign == "-":
                raise ParseError(f"cannot subtract register {t}", lineno, col)
            if base is None:
                base = t
            elif index is None:
                index = t
            else:
                raise ParseError("at most base and index registers", lineno, col)
            continue
        n = _num(term)
        if n is not None:
            disp_int += -n if sign == "-" else n
        elif _SYM.match(term) and sign != "-" and disp_sym is None:
            disp_sym = term
        else:
            raise ParseError(f"bad memory term {term!r}", lineno, col)
    if not fits_imm32(disp_int):
        raise ParseError(f"displacement {disp_int:#x} exceeds signed 32 bits", lineno, col)
    if disp_sym is not None:
        disp = disp_sym if disp_int == 0 else f"{disp_sym}{disp_int:+d}"
    else:
        disp = disp_int
    return Mem(base, index, disp, seg)


def _parse_operand(tok: str, lineno: int, col: int) -> Operand:
    t = tok.strip()
    if t.startswith("["):
        if not t.endswith("]"):
            raise ParseError(f"unterminated memory operand {t!r}", lineno, col)
        return _parse_mem(t[1:-1], lineno, col)
    if t.lower() in REGISTERS:
        return Reg(t.lower())
    return Imm(_parse_value(t, lineno, col))


def _parse_attrs(tokens: List[str], lineno: int) -> Dict[str, object]:
    attrs: Dict[str, object] = {}
    for tok in tokens:
        key, _, val = tok[1:].partition("=")
        if not key:
            raise ParseError(f"empty attribute {tok!r}", lineno)
        if not val:
            attrs[key] = True
        else:
            n = _num(val)
            attrs[key] = n if n is not None else val
    if "priv" in attrs and not (isinstance(attrs["priv"], int) and 0 <= attrs["priv"] <= 255):
        raise ParseError("privilege tag must be an integer 0..255", lineno)
    return attrs


def parse_program(text: str) -> Program:
    prog = Program()
    current: Optional[Function] = None
    pending_labels: List[str] = []
    seen: Dict[str, int] = {}
    uses: Dict[str, int] = {}

    def define(label: str, lineno: int):
        if label in seen:
            raise ParseError(f"duplicate label {label!r} (first defined on line {seen[label]})", lineno)
        seen[label] = lineno

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].rstrip()
        if not line.strip():
            continue
        stripped = line.strip()
        if stripped.startswith("."):
            parts = stripped.split(None, 3)
            d = parts[0].lower()
            try:
                if d == ".entry":
                    prog.entry = parts[1]
                elif d == ".stack":
                    prog.stack_size = int(parts[1], 0)
                elif d == ".shadow":
                    prog.shadow_size = int(parts[1], 0)
                elif d == ".hook":
                    prog.hooks = tuple(sorted(set(prog.hooks) | {parts[1]}))
                elif d == ".data":
                    name, size = parts[1], int(parts[2], 0)
                    init = tuple(int(v, 0) for v in parts[3].replace(",", " ").split()) if len(parts) > 3 else ()
                    if len(init) * 8 > size:
                        raise ParseError(f"data {name}: initialiser larger than size", lineno)
                    define(name, lineno)
                    prog.data.append(DataObject(name, size, init))
                elif d == ".func":
                    if pending_labels:
                        raise ParseError(f"labels {pending_labels} not attached to an instruction", lineno)
                    flags = {p.lower() for p in stripped.split()[2:]}
                    unknown = flags - {"unprotected", "runtime"}
                    if unknown:
                        raise ParseError(f"unknown function flags {sorted(unknown)}", lineno)
                    define(parts[1], lineno)
                    current = Function(parts[1], protected="unprotected" not in flags,
                                       runtime="runtime" in flags)
                    prog.functions.append(current)
                else:
                    raise ParseError(f"unknown directive {d}", lineno, 1)
            except (IndexError, ValueError) as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(f"malformed directive: {stripped}", lineno, 1) from None
            continue

        while True:
            m = _LABEL.match(line)
            if not m:
                break
            define(m.group(1), lineno)
            pending_labels.append(m.group(1))
            line = line[m.end():]
        if not line.strip():
            continue
        if current is None:
            raise ParseError("instruction outside .func", lineno, 1)
        col = len(raw) - len(raw.lstrip()) + 1
        body = line.strip()
        attr_tokens = re.findall(r"@[\w=.-]+", body)
        body = re.sub(r"@[\w=.-]+", "", body).strip()
        op, _, rest = body.partition(" ")
        op = op.lower()
        if op not in OPCODES:
            raise ParseError(f"unknown opcode {op!r}", lineno, col)
        operands = tuple(_parse_operand(t, lineno, col) for t in _split_operands(rest)) if rest.strip() else ()
        if len(operands) != OPCODES[op]:
            raise ParseError(f"{op} takes {OPCODES[op]} operands, got {len(operands)}", lineno, col)
        if sum(isinstance(o, Mem) for o in operands) > 1:
            raise ParseError("at most one memory operand", lineno, col)
        ins = Instruction(op, operands, _parse_attrs(attr_tokens, lineno), tuple(pending_labels))
        for o in operands:
            sym = _symbol_of(o)
            if sym is not None:
                uses.setdefault(sym, lineno)
        pending_labels = []
        current.instructions.append(ins)

    if pending_labels:
        raise ParseError(f"labels {pending_labels} not attached to an instruction")
    check_references(prog, uses)
    return prog


def check_references(prog: Program, uses: Optional[Dict[str, int]] = None) -> None:
    """Raise if an operand names an undefined label; ``uses`` maps symbols to source lines."""
    known = set(prog.labels()) | {d.name for d in prog.data} | BUILTIN_SYMBOLS
    missing = sorted({r for r in prog.references() if r not in known})
    if missing:
        uses = uses or {}
        where = [f"{m} (line {uses[m]})" if m in uses else m for m in missing]
        err = ParseError(f"unresolved labels: {', '.join(where)}", unresolved=missing)
        err.line = min((uses[m] for m in missing if m in uses), default=0)
        raise err
    if prog.entry is not None and not prog.has_function(prog.entry):
        raise ParseError(f"entry {prog.entry!r} is not a function", unresolved=[prog.entry])


# ----------------------------------------------------------------- emitting
def fmt_int(v: int) -> str:
    if -4096 < v < 4096:
        return str(v)
    return f"-{-v:#x}" if v < 0 else f"{v:#x}"


def fmt_operand(o: Operand) -> str:
    if isinstance(o, Reg):
        return o.name
    if isinstance(o, Imm):
        return fmt_int(o.value) if isinstance(o.value, int) else o.value
    parts = [p for p in (o.base, o.index) if p]
    s = "+".join(parts)
    if isinstance(o.disp, str):
        s = f"{s}+{o.disp}" if s else o.disp
    elif o.disp or not s:
        d = fmt_int(o.disp)
        s = f"{s}{d}" if s and d.startswith("-") else (f"{s}+{d}" if s else d)
    return f"[seg:{s}]" if o.seg else f"[{s}]"


def fmt_attrs(attrs: Dict[str, object]) -> str:
    out = []
    for k in sorted(attrs):
        v = attrs[k]
        if v is True:
            out.append(f"@{k}")
        elif v is not False and v is not None:
            out.append(f"@{k}={v}")
    return " ".join(out)


def fmt_instruction(ins: Instruction) -> str:
    s = ins.op
    if ins.operands:
        s += " " + ", ".join(fmt_operand(o) for o in ins.operands)
    a = fmt_attrs(ins.attrs)
    return f"{s} {a}" if a else s


def emit_program(p: Program, annotate: bool = False) -> str:
    lines = ["; MiniISA program"]
    if p.entry:
        lines.append(f".entry {p.entry}")
    if p.stack_size is not None:
        lines.append(f".stack {p.stack_size}")
    if p.shadow_size is not None:
        lines.append(f".shadow {p.shadow_size}")
    for h in p.hooks:
        lines.append(f".hook {h}")
    for d in p.data:
        init = " " + ", ".join(fmt_int(v) for v in d.init) if d.init else ""
        lines.append(f".data {d.name} {d.size}{init}")
    for f in p.functions:
        flags = ("" if f.protected else " unprotected") + (" runtime" if f.runtime else "")
        lines.append(f".func {f.name}{flags}")
        last_cat = None
        for ins in f.instructions:
            for lab in ins.labels:
                lines.append(f"{lab}:")
            text = "    " + fmt_instruction(ins)
            if annotate and ins.category != last_cat and ins.category != "application":
                text = f"{text:<48}; {ins.category}"
            last_cat = ins.category
            lines.append(text)
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------- canonical JSON
def _operand_to_obj(o: Operand):
    if isinstance(o, Reg):
        return {"reg": o.name}
    if isinstance(o, Imm):
        return {"imm": o.value}
    return {"mem": {"base": o.base, "index": o.index, "disp": o.disp, "seg": o.seg}}


def _operand_from_obj(obj) -> Operand:
    if "reg" in obj:
        return Reg(obj["reg"])
    if "imm" in obj:
        return Imm(obj["imm"])
    m = obj["mem"]
    return Mem(m["base"], m["index"], m["disp"], m["seg"])


def program_to_dict(p: Program) -> dict:
    return {
        "format": "shadowlab-program",
        "version": 1,
        "entry": p.entry,
        "stack_size": p.stack_size,
        "shadow_size": p.shadow_size,
        "hooks": list(p.hooks),
        "data": [{"name": d.name, "size": d.size, "init": list(d.init)} for d in p.data],
        "functions": [
            {
                "name": f.name,
                "protected": f.protected,
                "runtime": f.runtime,
                "instructions": [
                    {"op": i.op, "operands": [_operand_to_obj(o) for o in i.operands],
                     "attrs": dict(sorted(i.attrs.items())), "labels": list(i.labels)}
                    for i in f.instructions
                ],
            }
            for f in p.functions
        ],
    }


def program_from_dict(obj: dict) -> Program:
    if obj.get("format") != "shadowlab-program":
        raise ParseError("not a shadowlab program document")
    return Program(
        functions=[
            Function(
                f["name"],
                [Instruction(i["op"], tuple(_operand_from_obj(o) for o in i["operands"]),
                             dict(i["attrs"]), tuple(i["labels"])) for i in f["instructions"]],
                f["protected"], f.get("runtime", False))
            for f in obj["functions"]
        ],
        data=[DataObject(d["name"], d["size"], tuple(d["init"])) for d in obj["data"]],
        entry=obj["entry"],
        stack_size=obj["stack_size"],
        shadow_size=obj["shadow_size"],
        hooks=tuple(obj.get("hooks", ())),
    )


def dumps_canonical(p: Program) -> str:
    return json.dumps(program_to_dict(p), indent=1, sort_keys=True) + "\n"


def loads_canonical(text: str) -> Program:
    return program_from_dict(json.loads(text))


def load(p: Program, cfg=None, seed: int = 0, **kw):
    """Lay the program out in a fresh machine; see :func:`shadowlab.loader.load`."""
    from .loader import load as _load
    return _load(p, cfg, seed, **kw)
