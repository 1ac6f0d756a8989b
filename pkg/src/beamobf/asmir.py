"""Typed instruction IR for textual BEAM assembly.

Operands and instructions convert to and from the literal terms of
:mod:`beamobf.sterm`.  Unknown opcodes and unrecognised operand shapes are
carried through opaquely so that decode/encode never loses information.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Union

from .sterm import Atom, Bin, format_term, parse_forms, print_forms

MAX_REGISTER = 1024
MAX_ARITY = 255


class AsmError(ValueError):
    """Malformed module, function, or instruction."""


# ---------------------------------------------------------------------------
# Operands


@dataclass(frozen=True, slots=True)
class X:
    index: int

    def __post_init__(self):
        if not 0 <= self.index < MAX_REGISTER:
            raise AsmError(f"x register index out of range: {self.index}")


@dataclass(frozen=True, slots=True)
class Y:
    index: int

    def __post_init__(self):
        if not 0 <= self.index < MAX_REGISTER:
            raise AsmError(f"y register index out of range: {self.index}")


@dataclass(frozen=True, slots=True)
class FLabel:
    label: int  # 0 means "no fail path"


@dataclass(frozen=True, slots=True)
class AtomOp:
    name: str
    tagged: bool = True  # {atom,N} vs a bare atom


@dataclass(frozen=True, slots=True)
class IntOp:
    value: int
    tagged: bool = True  # {integer,N} vs a bare integer


@dataclass(frozen=True, slots=True)
class FloatOp:
    value: float


@dataclass(frozen=True, slots=True)
class LiteralOp:
    term: object

    def __hash__(self):
        return hash(format_term(self.term))

    def __eq__(self, other):
        return isinstance(other, LiteralOp) and format_term(self.term) == format_term(other.term)


@dataclass(frozen=True, slots=True)
class NilOp:
    pass


@dataclass(frozen=True, slots=True)
class ExtFunc:
    module: str
    function: str
    arity: int

    def __post_init__(self):
        if not 0 <= self.arity <= MAX_ARITY:
            raise AsmError(f"extfunc arity out of range: {self.arity}")


@dataclass(frozen=True, slots=True)
class OperandList:
    items: tuple
    tagged: bool = False  # {list,[...]} vs a bare [...]


@dataclass(frozen=True, slots=True)
class Raw:
    """An operand shape the IR does not interpret (kept verbatim)."""
    term: object

    def __hash__(self):
        return hash(format_term(self.term))

    def __eq__(self, other):
        return isinstance(other, Raw) and format_term(self.term) == format_term(other.term)


Operand = Union[X, Y, FLabel, AtomOp, IntOp, FloatOp, LiteralOp, NilOp, ExtFunc, OperandList, Raw]
Register = Union[X, Y]

NIL = NilOp()
NO_FAIL = FLabel(0)


def decode_operand(t) -> Operand:
    if isinstance(t, tuple) and len(t) >= 1 and isinstance(t[0], Atom):
        tag = t[0].name
        if len(t) == 2:
            v = t[1]
            if tag == "x" and type(v) is int and 0 <= v < MAX_REGISTER:
                return X(v)
            if tag == "y" and type(v) is int and 0 <= v < MAX_REGISTER:
                return Y(v)
            if tag == "f" and type(v) is int and v >= 0:
                return FLabel(v)
            if tag == "atom" and isinstance(v, Atom):
                return AtomOp(v.name)
            if tag == "integer" and type(v) is int:
                return IntOp(v)
            if tag == "float" and type(v) is float:
                return FloatOp(v)
            if tag == "literal":
                return LiteralOp(v)
            if tag == "list" and isinstance(v, list):
                return OperandList(tuple(decode_operand(e) for e in v), tagged=True)
        if (tag == "extfunc" and len(t) == 4 and isinstance(t[1], Atom)
                and isinstance(t[2], Atom) and type(t[3]) is int and 0 <= t[3] <= MAX_ARITY):
            return ExtFunc(t[1].name, t[2].name, t[3])
    if isinstance(t, Atom):
        if t.name == "nil":
            return NIL
        return AtomOp(t.name, tagged=False)
    if type(t) is int:
        return IntOp(t, tagged=False)
    if isinstance(t, list):
        return OperandList(tuple(decode_operand(e) for e in t))
    return Raw(t)


def encode_operand(op: Operand):
    if isinstance(op, X):
        return (Atom("x"), op.index)
    if isinstance(op, Y):
        return (Atom("y"), op.index)
    if isinstance(op, FLabel):
        return (Atom("f"), op.label)
    if isinstance(op, AtomOp):
        return (Atom("atom"), Atom(op.name)) if op.tagged else Atom(op.name)
    if isinstance(op, IntOp):
        return (Atom("integer"), op.value) if op.tagged else op.value
    if isinstance(op, FloatOp):
        return (Atom("float"), op.value)
    if isinstance(op, LiteralOp):
        return (Atom("literal"), op.term)
    if isinstance(op, NilOp):
        return Atom("nil")
    if isinstance(op, ExtFunc):
        return (Atom("extfunc"), Atom(op.module), Atom(op.function), op.arity)
    if isinstance(op, OperandList):
        items = [encode_operand(e) for e in op.items]
        return (Atom("list"), items) if op.tagged else items
    if isinstance(op, Raw):
        return op.term
    raise TypeError(f"not an operand: {op!r}")


def registers_in(op: Operand) -> Iterator[Register]:
    if isinstance(op, (X, Y)):
        yield op
    elif isinstance(op, OperandList):
        for e in op.items:
            yield from registers_in(e)


# ---------------------------------------------------------------------------
# Opcode table

PLAIN = "plain"
LABEL = "label"
FUNC_INFO = "func_info"
TEST = "test"
CALL = "call"
TERMINATOR = "terminator"
RECEIVE = "receive_family"
TRY = "try_family"
CONSTRUCTION = "construction"
CLASSES = (PLAIN, LABEL, FUNC_INFO, TEST, CALL, TERMINATOR, RECEIVE, TRY, CONSTRUCTION)

# name -> (accepted operand counts, class)
OPCODES: dict[str, tuple[tuple[int, ...], str]] = {
    "label": ((1,), LABEL),
    "func_info": ((3,), FUNC_INFO),
    "line": ((1,), PLAIN),
    "move": ((2,), PLAIN),
    "swap": ((2,), PLAIN),
    "init": ((1,), PLAIN),
    "kill": ((1,), PLAIN),
    "init_yregs": ((1,), PLAIN),
    "trim": ((2,), PLAIN),
    "allocate": ((2,), PLAIN),
    "allocate_zero": ((2,), PLAIN),
    "allocate_heap": ((3,), PLAIN),
    "allocate_heap_zero": ((3,), PLAIN),
    "test_heap": ((2,), PLAIN),
    "deallocate": ((1,), PLAIN),
    "bif": ((4,), PLAIN),
    "gc_bif": ((5,), PLAIN),
    "get_tuple_element": ((3,), PLAIN),
    "set_tuple_element": ((3,), PLAIN),
    "get_list": ((3,), PLAIN),
    "get_hd": ((2,), PLAIN),
    "get_tl": ((2,), PLAIN),
    "put_list": ((3,), PLAIN),
    "send": ((0,), PLAIN),
    "bs_start_match4": ((4,), PLAIN),
    "call": ((2,), CALL),
    "call_ext": ((2,), CALL),
    "call_only": ((2,), TERMINATOR),
    "call_last": ((3,), TERMINATOR),
    "call_ext_only": ((2,), TERMINATOR),
    "call_ext_last": ((3,), TERMINATOR),
    "return": ((0,), TERMINATOR),
    "jump": ((1,), TERMINATOR),
    "select_val": ((3,), TERMINATOR),
    "select_tuple_arity": ((3,), TERMINATOR),
    "badmatch": ((1,), TERMINATOR),
    "if_end": ((0,), TERMINATOR),
    "case_end": ((1,), TERMINATOR),
    "raise": ((2,), TERMINATOR),
    "test": ((3, 5), TEST),
    "loop_rec": ((2,), RECEIVE),
    "loop_rec_end": ((1,), RECEIVE),
    "wait": ((1,), RECEIVE),
    "wait_timeout": ((2,), RECEIVE),
    "remove_message": ((0,), RECEIVE),
    "timeout": ((0,), RECEIVE),
    "recv_marker_reserve": ((1,), RECEIVE),
    "recv_marker_bind": ((2,), RECEIVE),
    "recv_marker_clear": ((1,), RECEIVE),
    "recv_marker_use": ((1,), RECEIVE),
    "try": ((2,), TRY),
    "try_end": ((1,), TRY),
    "try_case": ((1,), TRY),
    "try_case_end": ((1,), TRY),
    "catch": ((2,), TRY),
    "catch_end": ((1,), TRY),
    "put_tuple": ((2,), CONSTRUCTION),
    "put_tuple2": ((2,), CONSTRUCTION),
    "put": ((1,), CONSTRUCTION),
    "bs_init2": ((6,), CONSTRUCTION),
    "bs_init_bits": ((6,), CONSTRUCTION),
    "bs_put_string": ((2,), CONSTRUCTION),
    "bs_put_integer": ((5,), CONSTRUCTION),
    "bs_put_binary": ((5,), CONSTRUCTION),
    "bs_put_float": ((5,), CONSTRUCTION),
    "bs_put_utf8": ((3,), CONSTRUCTION),
    "bs_put_utf16": ((3,), CONSTRUCTION),
    "bs_put_utf32": ((3,), CONSTRUCTION),
}

# Opcodes in the table whose operands the passes never interpret.  Fixtures may
# contain them without failing the opcode-table soundness check.
OPAQUE_MANIFEST = frozenset({"line"})

BS_PUT_OPCODES = frozenset(op for op in OPCODES if op.startswith("bs_put_"))
RECEIVE_OPENERS = frozenset({"loop_rec"})
RECEIVE_CLOSERS = frozenset({"loop_rec_end", "remove_message", "timeout", "wait", "wait_timeout"})

# terminators that end a function activation without a successor in the same function
NO_SUCCESSOR = frozenset({"return", "badmatch", "call_only", "call_last", "call_ext_only",
                          "call_ext_last", "if_end", "case_end", "raise", "try_case_end"})


@dataclass(frozen=True)
class Instruction:
    opcode: str
    operands: tuple = ()
    opaque: bool = False  # True when not decoded through the opcode table

    @property
    def klass(self) -> str:
        if self.opaque:
            return PLAIN
        return OPCODES.get(self.opcode, ((), PLAIN))[1]

    @property
    def known(self) -> bool:
        return not self.opaque and self.opcode in OPCODES

    def op(self, i: int) -> Operand:
        return self.operands[i]

    def labels(self) -> list[int]:
        """Every nonzero label referenced by the instruction's operands."""
        out = []
        stack = list(self.operands)
        while stack:
            o = stack.pop(0)
            if isinstance(o, FLabel) and o.label:
                out.append(o.label)
            elif isinstance(o, OperandList):
                stack[0:0] = list(o.items)
        return out

    def __str__(self) -> str:
        return format_term(encode_instruction(self))


def ins(opcode: str, *operands) -> Instruction:
    """Convenience constructor used by passes and tests."""
    return Instruction(opcode, tuple(operands))


def decode_instruction(t) -> Instruction:
    if isinstance(t, Atom):
        name, args = t.name, ()
    elif isinstance(t, tuple) and t and isinstance(t[0], Atom):
        name, args = t[0].name, t[1:]
    else:
        raise AsmError(f"not an instruction: {format_term(t)}")
    entry = OPCODES.get(name)
    if entry is None:
        return Instruction(name, tuple(Raw(a) for a in args), opaque=True)
    counts, _ = entry
    if len(args) not in counts:
        raise AsmError(f"{name} expects {' or '.join(map(str, counts))} operands, "
                       f"got {len(args)}: {format_term(t)}")
    if name == "label":
        if type(args[0]) is not int or args[0] <= 0:
            raise AsmError(f"bad label: {format_term(t)}")
        return Instruction(name, (IntOp(args[0], tagged=False),))
    return Instruction(name, tuple(decode_operand(a) for a in args))


def encode_instruction(i: Instruction):
    if i.opaque:
        args = tuple(o.term for o in i.operands)
    else:
        args = tuple(encode_operand(o) for o in i.operands)
    if not args and (i.opaque or OPCODES.get(i.opcode, ((0,),))[0] == (0,)):
        return Atom(i.opcode)
    return (Atom(i.opcode),) + args


def label_of(i: Instruction) -> Optional[int]:
    if i.opcode == "label" and not i.opaque:
        return i.operands[0].value
    return None


def mklabel(n: int) -> Instruction:
    return Instruction("label", (IntOp(n, tagged=False),))


# ---------------------------------------------------------------------------
# Functions and modules


@dataclass(frozen=True)
class FunctionDef:
    name: str
    arity: int
    entry: int
    body: tuple

    def __post_init__(self):
        body = self.body
        if not body or label_of(body[0]) is None:
            raise AsmError(f"{self.name}/{self.arity}: first instruction must be a label")
        positions = [k for k, i in enumerate(body) if label_of(i) == self.entry]
        if len(positions) != 1:
            raise AsmError(f"{self.name}/{self.arity}: entry label {self.entry} "
                           f"must occur exactly once")
        k = positions[0]
        if k == 0 or body[k - 1].opcode != "func_info":
            raise AsmError(f"{self.name}/{self.arity}: func_info must precede entry label")

    @property
    def key(self) -> tuple[str, int]:
        return (self.name, self.arity)

    def labels(self) -> dict[int, int]:
        """Label id -> body index."""
        return {label_of(i): k for k, i in enumerate(self.body) if label_of(i) is not None}

    def with_body(self, body: Iterable[Instruction]) -> "FunctionDef":
        return replace(self, body=tuple(body))


@dataclass(frozen=True)
class ModuleAsm:
    name: str
    exports: tuple = ()
    attributes: tuple = ()
    functions: tuple = ()
    label_count: int = 0

    def function(self, name: str, arity: int) -> FunctionDef:
        for f in self.functions:
            if f.name == name and f.arity == arity:
                return f
        raise KeyError(f"{name}/{arity}")

    def replace_function(self, f: FunctionDef) -> "ModuleAsm":
        funcs = tuple(f if g.key == f.key else g for g in self.functions)
        return replace(self, functions=funcs).restamp()

    def max_label(self) -> int:
        return max((label_of(i) or 0 for f in self.functions for i in f.body), default=0)

    def restamp(self) -> "ModuleAsm":
        """Raise the label count if passes inserted labels past it."""
        top = self.max_label()
        if self.label_count < top:
            return replace(self, label_count=top)
        return self

    def validate(self) -> None:
        seen: dict[int, str] = {}
        for f in self.functions:
            for i in f.body:
                n = label_of(i)
                if n is None:
                    continue
                if n in seen:
                    raise AsmError(f"duplicate label {n} in {f.name}/{f.arity} "
                                   f"(also in {seen[n]})")
                seen[n] = f"{f.name}/{f.arity}"
        defined = {f.key for f in self.functions}
        for e in self.exports:
            if tuple(e) not in defined:
                raise AsmError(f"export {e[0]}/{e[1]} is not defined")
        if self.label_count < self.max_label():
            raise AsmError(f"label count {self.label_count} below highest label {self.max_label()}")
        for f in self.functions:
            known = set(f.labels())
            for i in f.body:
                for lab in i.labels():
                    if lab not in known and lab not in seen:
                        raise AsmError(f"{f.name}/{f.arity}: reference to undefined label {lab}")


def _function_from_term(t) -> FunctionDef:
    if not (isinstance(t, tuple) and len(t) == 5 and t[0] == Atom("function")
            and isinstance(t[1], Atom) and type(t[2]) is int and type(t[3]) is int
            and isinstance(t[4], list)):
        raise AsmError(f"malformed function: {format_term(t)[:80]}")
    body = tuple(decode_instruction(i) for i in t[4])
    return FunctionDef(t[1].name, t[2], t[3], body)


def _exports_from_term(t) -> tuple:
    if not isinstance(t, list):
        raise AsmError("exports must be a list")
    out = []
    for e in t:
        if not (isinstance(e, tuple) and len(e) == 2 and isinstance(e[0], Atom) and type(e[1]) is int):
            raise AsmError(f"bad export entry: {format_term(e)}")
        out.append((e[0].name, e[1]))
    return tuple(out)


def decode_module(forms) -> ModuleAsm:
    """Decode either a five-element module term or an ``.S`` form sequence."""
    if isinstance(forms, tuple):
        forms = [forms]
    if (len(forms) == 1 and isinstance(forms[0], tuple) and len(forms[0]) == 5
            and isinstance(forms[0][0], Atom) and forms[0][0].name != "function"):
        name, exports, attrs, funcs, nlabels = forms[0]
        if not isinstance(funcs, list) or type(nlabels) is not int or not isinstance(attrs, list):
            raise AsmError("malformed module tuple")
        m = ModuleAsm(name.name, _exports_from_term(exports), tuple(attrs),
                      tuple(_function_from_term(f) for f in funcs), nlabels)
        m.validate()
        return m
    return _decode_s_forms(forms)


def _decode_s_forms(forms) -> ModuleAsm:
    name = None
    exports: tuple = ()
    attributes: list = []
    nlabels = None
    functions: list[FunctionDef] = []
    current = None  # [name, arity, entry, body]

    def flush():
        if current is not None:
            functions.append(FunctionDef(current[0], current[1], current[2],
                                         tuple(current[3])))

    for t in forms:
        if isinstance(t, tuple) and t and isinstance(t[0], Atom):
            head = t[0].name
            if head == "function" and len(t) == 4:
                if not (isinstance(t[1], Atom) and type(t[2]) is int and type(t[3]) is int):
                    raise AsmError(f"malformed function header: {format_term(t)}")
                flush()
                current = [t[1].name, t[2], t[3], []]
                continue
            if current is None:
                if head == "module" and len(t) == 2 and isinstance(t[1], Atom):
                    name = t[1].name
                    continue
                if head in ("exports", "export") and len(t) == 2:
                    exports = _exports_from_term(t[1])
                    continue
                if head == "attributes" and len(t) == 2 and isinstance(t[1], list):
                    attributes.extend(t[1])
                    continue
                if head == "labels" and len(t) == 2 and type(t[1]) is int:
                    nlabels = t[1]
                    continue
                attributes.append(t)  # unknown header annotation, kept opaquely
                continue
        if current is None:
            raise AsmError(f"instruction outside a function: {format_term(t)[:80]}")
        current[3].append(decode_instruction(t))
    flush()
    if name is None:
        raise AsmError("missing {module, Name} form")
    m = ModuleAsm(name, exports, tuple(attributes), tuple(functions), 0)
    m = replace(m, label_count=nlabels if nlabels is not None else m.max_label())
    m.validate()
    return m


def encode_module(m: ModuleAsm):
    """Five-element module term ``{Name, Exports, Attrs, Functions, LabelCount}``."""
    m = m.restamp()
    funcs = [(Atom("function"), Atom(f.name), f.arity, f.entry,
              [encode_instruction(i) for i in f.body]) for f in m.functions]
    exports = [(Atom(n), a) for n, a in m.exports]
    return (Atom(m.name), exports, list(m.attributes), funcs, m.label_count)


def module_to_forms(m: ModuleAsm) -> list:
    """The ``.S`` form sequence for a module."""
    m = m.restamp()
    forms = [(Atom("module"), Atom(m.name)),
             (Atom("exports"), [(Atom(n), a) for n, a in m.exports]),
             (Atom("attributes"), list(m.attributes)),
             (Atom("labels"), m.label_count)]
    for f in m.functions:
        forms.append((Atom("function"), Atom(f.name), f.arity, f.entry))
        forms.extend(encode_instruction(i) for i in f.body)
    return forms


def format_module(m: ModuleAsm) -> str:
    """Canonical ``.S`` text: headers flush left, instructions indented."""
    lines = []
    for t in module_to_forms(m):
        text = format_term(t) + "."
        head = t[0].name if isinstance(t, tuple) else t.name
        if head in ("module", "exports", "attributes", "labels"):
            lines.append(text)
        elif head == "function":
            lines.append("")
            lines.append(text)
        elif head == "label":
            lines.append("  " + text)
        else:
            lines.append("    " + text)
    return "\n".join(lines) + "\n"


def parse_module(text: str) -> ModuleAsm:
    return decode_module(parse_forms(text))


# ---------------------------------------------------------------------------
# Construction spans


@dataclass(frozen=True)
class Span:
    kind: str                  # "tuple" or "binary"
    head: int                  # body index of put_tuple / bs_init*
    members: tuple             # body indices of put / bs_put_* instructions
    foreign: tuple             # body indices of other instructions inside the span
    declared: Optional[int]    # element count or bit size; None if register-sized
    filled: Optional[int]      # elements / bits filled; None if not statically known
    size_register: Optional[Register] = None

    @property
    def static(self) -> bool:
        return self.declared is not None and self.filled is not None

    @property
    def complete(self) -> bool:
        return not self.static or self.filled == self.declared

    @property
    def contiguous(self) -> bool:
        return not self.foreign

    @property
    def end(self) -> int:
        return max((self.head,) + self.members)


def _static_int(op: Operand) -> Optional[int]:
    if isinstance(op, IntOp):
        return op.value
    return None


def bs_put_bits(i: Instruction) -> Optional[int]:
    """Statically known bit size of a bs_put_* instruction, or None."""
    if i.opcode == "bs_put_string":
        n = _static_int(i.operands[0])
        return None if n is None else 8 * n
    if i.opcode in ("bs_put_integer", "bs_put_float", "bs_put_binary"):
        size = _static_int(i.operands[1])
        unit = _static_int(i.operands[2])
        if size is None or unit is None:
            return None
        return size * unit
    if i.opcode == "bs_put_utf32":
        return 32
    return None  # utf8/utf16 depend on the character


_SPAN_BARRIER = frozenset({LABEL, TERMINATOR, TEST, CALL, RECEIVE, TRY, FUNC_INFO})


def construction_spans(f: FunctionDef) -> tuple[list[Span], list[str]]:
    """Find tuple and binary construction spans and diagnose under-filled ones."""
    spans: list[Span] = []
    diags: list[str] = []
    body = f.body
    for k, i in enumerate(body):
        if i.opcode == "put_tuple" and not i.opaque:
            declared = _static_int(i.operands[0])
            members, foreign = [], []
            j = k + 1
            while j < len(body) and (declared is None or len(members) < declared):
                nxt = body[j]
                if nxt.opcode == "put":
                    members.append(j)
                elif nxt.klass in _SPAN_BARRIER or nxt.klass == CONSTRUCTION:
                    break
                else:
                    foreign.append(j)
                j += 1
            foreign = [q for q in foreign if members and q < members[-1]]
            span = Span("tuple", k, tuple(members), tuple(foreign), declared, len(members))
            spans.append(span)
            if not span.complete:
                diags.append(f"{f.name}/{f.arity}: put_tuple at {k} declares {declared} "
                             f"elements but only {len(members)} follow")
        elif i.opcode in ("bs_init2", "bs_init_bits") and not i.opaque:
            size_op = i.operands[1]
            scale = 8 if i.opcode == "bs_init2" else 1
            declared = None if _static_int(size_op) is None else _static_int(size_op) * scale
            size_reg = size_op if isinstance(size_op, (X, Y)) else None
            members, foreign = [], []
            filled: Optional[int] = 0
            j = k + 1
            while j < len(body):
                if declared is not None and filled is not None and filled >= declared:
                    break
                nxt = body[j]
                if nxt.opcode in BS_PUT_OPCODES:
                    members.append(j)
                    bits = bs_put_bits(nxt)
                    filled = None if bits is None or filled is None else filled + bits
                elif nxt.klass in _SPAN_BARRIER or nxt.klass == CONSTRUCTION:
                    break
                else:
                    foreign.append(j)
                j += 1
            foreign = [q for q in foreign if members and q < members[-1]]
            span = Span("binary", k, tuple(members), tuple(foreign), declared,
                        filled if declared is not None else None, size_reg)
            spans.append(span)
            if not span.complete:
                diags.append(f"{f.name}/{f.arity}: {i.opcode} at {k} declares {declared} "
                             f"bits but {filled} are filled")
    return spans, diags
