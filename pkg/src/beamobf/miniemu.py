"""A miniature single-process BEAM emulator over the assembly IR.

It is the differential-testing oracle for the obfuscation passes, so it
models exactly the parts of the machine those passes touch: x registers,
y stack frames, a self-addressed mailbox with a save position, catch/try
handlers, tuple and binary construction, mutable tuple updates, a reduction
counter, and an abstract heap-copy cost model.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .asmir import (AtomOp, ExtFunc, FLabel, FloatOp, FunctionDef, IntOp, LiteralOp,
                    ModuleAsm, NilOp, OperandList, Raw, X, Y, label_of)
from .sterm import Atom, Bin, ImproperList, format_term

FAULT_REASONS = ("badmatch", "badarg", "uninitialized-read", "receive-context",
                 "deadlock-wait", "fuel")
CATCHABLE = frozenset({"badmatch", "badarg"})
DEFAULT_FUEL = 10_000_000

TRUE = Atom("true")
FALSE = Atom("false")


class _Uninit:
    __slots__ = ()

    def __repr__(self):
        return "UNINIT"


UNINIT = _Uninit()


# ---------------------------------------------------------------------------
# Runtime values


class HTuple:
    """A heap tuple.  Identity matters: set_tuple_element mutates in place."""
    __slots__ = ("elems",)

    def __init__(self, elems):
        self.elems = elems

    def __eq__(self, other):
        return isinstance(other, HTuple) and self.elems == other.elems

    __hash__ = None

    def __repr__(self):
        return "HTuple(%r)" % (self.elems,)


@dataclass(eq=False)
class MatchCtx:
    bin: Bin
    pos: int = 0

    @property
    def remaining(self) -> int:
        return self.bin.bits - self.pos


@dataclass(frozen=True)
class Pid:
    n: int = 0


@dataclass(eq=False)
class CatchTag:
    kind: str         # "catch" or "try"
    handler: int      # program counter of the handler label
    cdepth: int       # call stack depth when installed
    ydepth: int       # index of the y frame holding the tag
    seq: int


@dataclass(eq=False)
class PendingBin:
    declared: int
    dst: object
    acc: int = 0
    nbits: int = 0


def to_runtime(t):
    if isinstance(t, tuple):
        return HTuple([to_runtime(e) for e in t])
    if isinstance(t, list):
        return [to_runtime(e) for e in t]
    if isinstance(t, ImproperList):
        return ImproperList(tuple(to_runtime(e) for e in t.items), to_runtime(t.tail))
    return t


def to_term(v):
    if isinstance(v, HTuple):
        return tuple(to_term(e) for e in v.elems)
    if isinstance(v, list):
        return [to_term(e) for e in v]
    if isinstance(v, ImproperList):
        return ImproperList(tuple(to_term(e) for e in v.items), to_term(v.tail))
    if isinstance(v, MatchCtx):
        return Atom("#MatchState")
    if isinstance(v, Pid):
        return Atom("<0.%d.0>" % v.n)
    if isinstance(v, (CatchTag, PendingBin)) or v is UNINIT:
        return Atom("#Internal")
    return v


def exact_eq(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, HTuple):
        return len(a.elems) == len(b.elems) and all(map(exact_eq, a.elems, b.elems))
    if isinstance(a, list):
        return len(a) == len(b) and all(map(exact_eq, a, b))
    return a == b


def _rank(v) -> int:
    if isinstance(v, (int, float)):
        return 0
    if isinstance(v, Atom):
        return 1
    if isinstance(v, Pid):
        return 5
    if isinstance(v, HTuple):
        return 6
    if isinstance(v, list):
        return 8 if not v else 9
    if isinstance(v, ImproperList):
        return 9
    if isinstance(v, Bin):
        return 10
    return 11


def compare(a, b) -> int:
    """Erlang term order (numbers compare by value)."""
    ra, rb = _rank(a), _rank(b)
    if ra != rb:
        return -1 if ra < rb else 1
    if ra == 0:
        return (a > b) - (a < b)
    if ra == 1:
        return (a.name > b.name) - (a.name < b.name)
    if ra == 6:
        if len(a.elems) != len(b.elems):
            return -1 if len(a.elems) < len(b.elems) else 1
        for x, y in zip(a.elems, b.elems):
            c = compare(x, y)
            if c:
                return c
        return 0
    if ra in (8, 9):
        a_items = list(a.items) + [a.tail] if isinstance(a, ImproperList) else a
        b_items = list(b.items) + [b.tail] if isinstance(b, ImproperList) else b
        for x, y in zip(a_items, b_items):
            c = compare(x, y)
            if c:
                return c
        return (len(a_items) > len(b_items)) - (len(a_items) < len(b_items))
    if ra == 10:
        ka, kb = (a.data, a.bits), (b.data, b.bits)
        return (ka > kb) - (ka < kb)
    if ra == 5:
        return (a.n > b.n) - (a.n < b.n)
    return 0


def loose_eq(a, b) -> bool:
    return compare(a, b) == 0


# ---------------------------------------------------------------------------
# Results


@dataclass
class Counters:
    steps: int = 0
    heap_words_copied: int = 0
    messages_sent: int = 0
    messages_removed: int = 0
    reductions: int = 0
    clock: int = 0

    def as_term(self):
        return [(Atom("steps"), self.steps),
                (Atom("heap_words_copied"), self.heap_words_copied),
                (Atom("messages_sent"), self.messages_sent),
                (Atom("messages_removed"), self.messages_removed),
                (Atom("reductions"), self.reductions),
                (Atom("clock"), self.clock)]


@dataclass
class EmuResult:
    outcome: str                       # "value" | "fault" | "fuel"
    value: object = None               # a Term when outcome == "value"
    reason: Optional[str] = None       # one of FAULT_REASONS otherwise
    detail: object = None              # a Term describing the fault
    counters: Counters = field(default_factory=Counters)
    mailbox_residue: int = 0
    log: list = field(default_factory=list)

    def key(self) -> tuple:
        """What differential comparison looks at."""
        if self.outcome == "value":
            return ("value", format_term(self.value))
        return (self.outcome, self.reason)

    def as_term(self):
        if self.outcome == "value":
            out = (Atom("value"), self.value)
        else:
            out = (Atom(self.outcome), Atom(self.reason), self.detail if self.detail is not None else [])
        return (Atom("result"), out, self.counters.as_term(),
                (Atom("mailbox_residue"), self.mailbox_residue))


class EmuFault(Exception):
    def __init__(self, reason: str, detail=None):
        super().__init__(reason)
        assert reason in FAULT_REASONS, reason
        self.reason = reason
        self.detail = detail


def _fault_term(detail):
    return to_term(detail) if detail is not None else None


# ---------------------------------------------------------------------------
# BIF table


def _num(v):
    if type(v) not in (int, float):
        raise EmuFault("badarg", Atom("badarith"))
    return v


def _int(v):
    if type(v) is not int:
        raise EmuFault("badarg", Atom("badarith"))
    return v


def _bool(b: bool) -> Atom:
    return TRUE if b else FALSE


def _setelement(emu, args):
    i, t, v = args
    if not isinstance(t, HTuple) or type(i) is not int or not 1 <= i <= len(t.elems):
        raise EmuFault("badarg", Atom("setelement"))
    elems = list(t.elems)
    emu.counters.heap_words_copied += len(elems)
    elems[i - 1] = v
    return HTuple(elems)


def _element(emu, args):
    i, t = args
    if not isinstance(t, HTuple) or type(i) is not int or not 1 <= i <= len(t.elems):
        raise EmuFault("badarg", Atom("element"))
    return t.elems[i - 1]


def _make_tuple(emu, args):
    n, v = args
    if type(n) is not int or n < 0:
        raise EmuFault("badarg", Atom("make_tuple"))
    return HTuple([v] * n)


def _tuple_size(emu, args):
    if not isinstance(args[0], HTuple):
        raise EmuFault("badarg", Atom("tuple_size"))
    return len(args[0].elems)


def _display(emu, args):
    emu.log.append(format_term(to_term(args[0])))
    return TRUE


def _unique_integer(emu, args):
    emu.unique += 1
    return emu.unique


def _send(emu, args):
    emu.deliver(args[1])
    return args[1]


def _process_info(emu, args):
    if args[1] == Atom("reductions"):
        return HTuple([Atom("reductions"), emu.counters.reductions])
    raise EmuFault("badarg", Atom("process_info"))


def _bump(emu, args):
    emu.counters.reductions += _int(args[0])
    return TRUE


def _div(a, b):
    if _int(b) == 0:
        raise EmuFault("badarg", Atom("badarith"))
    q = abs(_int(a)) // abs(b)
    return q if (a >= 0) == (b > 0) else -q


def _rem(a, b):
    return _int(a) - _div(a, b) * b


def _shift(a, b, left):
    _int(a), _int(b)
    if not left:
        b = -b
    return a << b if b >= 0 else a >> -b


BIFS: dict[tuple[str, int], Callable] = {
    ("+", 2): lambda e, a: _num(a[0]) + _num(a[1]),
    ("-", 2): lambda e, a: _num(a[0]) - _num(a[1]),
    ("*", 2): lambda e, a: _num(a[0]) * _num(a[1]),
    ("-", 1): lambda e, a: -_num(a[0]),
    ("div", 2): lambda e, a: _div(a[0], a[1]),
    ("rem", 2): lambda e, a: _rem(a[0], a[1]),
    ("band", 2): lambda e, a: _int(a[0]) & _int(a[1]),
    ("bor", 2): lambda e, a: _int(a[0]) | _int(a[1]),
    ("bxor", 2): lambda e, a: _int(a[0]) ^ _int(a[1]),
    ("bsl", 2): lambda e, a: _shift(a[0], a[1], True),
    ("bsr", 2): lambda e, a: _shift(a[0], a[1], False),
    ("=:=", 2): lambda e, a: _bool(exact_eq(a[0], a[1])),
    ("=/=", 2): lambda e, a: _bool(not exact_eq(a[0], a[1])),
    ("==", 2): lambda e, a: _bool(loose_eq(a[0], a[1])),
    ("/=", 2): lambda e, a: _bool(not loose_eq(a[0], a[1])),
    ("<", 2): lambda e, a: _bool(compare(a[0], a[1]) < 0),
    (">", 2): lambda e, a: _bool(compare(a[0], a[1]) > 0),
    ("=<", 2): lambda e, a: _bool(compare(a[0], a[1]) <= 0),
    (">=", 2): lambda e, a: _bool(compare(a[0], a[1]) >= 0),
    ("not", 1): lambda e, a: _bool(a[0] == FALSE),
    ("self", 0): lambda e, a: e.pid,
    ("unique_integer", 0): _unique_integer,
    ("unique_integer", 1): _unique_integer,
    ("setelement", 3): _setelement,
    ("element", 2): _element,
    ("make_tuple", 2): _make_tuple,
    ("tuple_size", 1): _tuple_size,
    ("display", 1): _display,
    ("send", 2): _send,
    ("!", 2): _send,
    ("process_info", 2): _process_info,
    ("bump_reductions", 1): _bump,
    ("get_module_info", 1): lambda e, a: [HTuple([Atom("module"), a[0]])],
    ("get_module_info", 2): lambda e, a: (a[0] if a[1] == Atom("module") else []),
}


# ---------------------------------------------------------------------------
# The machine


class Halt(Exception):
    def __init__(self, value):
        self.value = value


class Emulator:
    """One emulator instance; single-threaded, reusable across calls."""

    def __init__(self, module: ModuleAsm, fuel: int = DEFAULT_FUEL, strict: bool = True,
                 trace: bool = False, record_reads: bool = False):
        self.module = module
        self.fuel = fuel
        self.strict = strict
        self.trace_enabled = trace
        self.record_reads = record_reads
        self.prog: list = []
        self.where: list = []          # pc -> (function key, body index)
        self.label_pc: dict[int, int] = {}
        self.entry_pc: dict[tuple[str, int], int] = {}
        for f in module.functions:
            base = len(self.prog)
            for k, i in enumerate(f.body):
                lab = label_of(i)
                if lab is not None:
                    self.label_pc[lab] = base + k
                handler = getattr(self, "op_" + i.opcode, None)
                if i.opaque or handler is None:
                    handler = self.op_unknown
                self.prog.append((handler, i))
                self.where.append((f.key, k))
            self.entry_pc[f.key] = self.label_pc[f.entry]
        self.pid = Pid(0)
        self.mailbox: list = []
        self.unique = 0
        self.log: list = []
        self.trace: list = []
        self.reads: list = []
        self.counters = Counters()
        self._seq = 0
        self._reset_activation()

    # -- state -------------------------------------------------------------

    def _reset_activation(self):
        self.x: dict[int, object] = {}
        self.ystack: list[list] = []
        self.cstack: list[int] = []
        self.save = 0
        self.recv_open = False
        self.pending_tuple = None
        self.pending_bin: Optional[PendingBin] = None
        self.pc = 0

    def deliver(self, msg):
        self.mailbox.append(msg)
        self.counters.messages_sent += 1

    def _uninit(self, what):
        if self.strict:
            raise EmuFault("uninitialized-read", to_term_reg(what))
        return []

    def read(self, op):
        t = type(op)
        if t is X:
            if self.record_reads:
                self.reads.append((self.pc, op))
            v = self.x.get(op.index, UNINIT)
            return self._uninit(op) if v is UNINIT else v
        if t is Y:
            if self.record_reads:
                self.reads.append((self.pc, op))
            if not self.ystack or op.index >= len(self.ystack[-1]):
                return self._uninit(op)
            v = self.ystack[-1][op.index]
            return self._uninit(op) if v is UNINIT else v
        if t is IntOp:
            return op.value
        if t is AtomOp:
            return Atom(op.name)
        if t is LiteralOp:
            return to_runtime(op.term)
        if t is NilOp:
            return []
        if t is FloatOp:
            return op.value
        if t is OperandList:
            return [self.read(e) for e in op.items]
        raise EmuFault("badarg", (Atom("bad_operand"), format_term(Raw(op).term) if False else Atom("operand")))

    def write(self, op, v):
        t = type(op)
        if t is X:
            self.x[op.index] = v
        elif t is Y:
            if not self.ystack or op.index >= len(self.ystack[-1]):
                raise EmuFault("badarg", Atom("no_stack_slot"))
            self.ystack[-1][op.index] = v
        else:
            raise EmuFault("badarg", Atom("bad_destination"))

    def jump(self, flabel):
        self.pc = self.label_pc[flabel.label]

    # -- running -----------------------------------------------------------

    def invoke(self, name: str, arity: int, args: Sequence, runtime: bool = False) -> EmuResult:
        """Call ``name/arity`` with ``args`` (terms, or runtime values if ``runtime``)."""
        key = (name, arity)
        if key not in self.entry_pc:
            raise KeyError(f"{name}/{arity} is not defined")
        if len(args) != arity:
            raise ValueError(f"{name}/{arity} called with {len(args)} arguments")
        self.start(name, arity, args, runtime)
        try:
            self._loop()
        except (Halt, EmuFault) as e:
            return self.result(e)
        raise AssertionError("unreachable")

    def start(self, name: str, arity: int, args: Sequence, runtime: bool = False):
        """Set up an activation of ``name/arity`` without running it."""
        self._reset_activation()
        for k, a in enumerate(args):
            self.x[k] = a if runtime else to_runtime(a)
        self.pc = self.entry_pc[(name, arity)]
        self.last_value = None

    def result(self, stop) -> EmuResult:
        """Build the result for a Halt or EmuFault that ended the run."""
        outcome, value, reason, detail = "value", None, None, None
        if isinstance(stop, Halt):
            self.last_value = stop.value
            value = to_term(stop.value)
        else:
            outcome = "fuel" if stop.reason == "fuel" else "fault"
            reason, detail = stop.reason, _fault_term(stop.detail)
        return EmuResult(outcome, value, reason, detail,
                         Counters(**vars(self.counters)), len(self.mailbox), list(self.log))

    def step(self):
        """Execute one instruction; raises Halt or EmuFault when the run ends."""
        counters = self.counters
        if counters.steps >= self.fuel:
            raise EmuFault("fuel", counters.steps)
        counters.steps += 1
        handler, i = self.prog[self.pc]
        if self.trace_enabled:
            fkey, k = self.where[self.pc]
            self.trace.append((counters.steps, fkey, k, i.opcode))
        try:
            handler(i)
        except EmuFault as f:
            if f.reason in CATCHABLE and self._unwind(f):
                return
            raise

    def _loop(self):
        prog = self.prog
        counters = self.counters
        fuel = self.fuel
        while True:
            if counters.steps >= fuel:
                raise EmuFault("fuel", counters.steps)
            counters.steps += 1
            handler, i = prog[self.pc]
            if self.trace_enabled:
                fkey, k = self.where[self.pc]
                self.trace.append((counters.steps, fkey, k, i.opcode))
            try:
                handler(i)
            except EmuFault as f:
                if f.reason in CATCHABLE and self._unwind(f):
                    continue
                raise

    def _unwind(self, f: EmuFault) -> bool:
        best = None
        for d, frame in enumerate(self.ystack):
            for slot in frame:
                if isinstance(slot, CatchTag) and (best is None or slot.seq > best.seq):
                    best = slot
        if best is None:
            return False
        reason = self._reason_value(f)
        del self.cstack[best.cdepth:]
        del self.ystack[best.ydepth + 1:]
        self.recv_open = False
        self.pending_tuple = None
        self.pending_bin = None
        if best.kind == "catch":
            self.x = {0: HTuple([Atom("EXIT"), reason])}
        else:
            self.x = {0: Atom("error"), 1: reason, 2: []}
        self.pc = best.handler
        return True

    @staticmethod
    def _reason_value(f: EmuFault):
        if f.reason == "badmatch":
            return HTuple([Atom("badmatch"), to_runtime(f.detail)])
        return to_runtime(f.detail) if f.detail is not None else Atom("badarg")

    # -- generic -----------------------------------------------------------

    def op_unknown(self, i):
        raise EmuFault("badarg", (Atom("unknown_opcode"), Atom(i.opcode)))

    def op_label(self, i):
        self.pc += 1

    op_line = op_label
    op_test_heap = op_label
    op_recv_marker_reserve = op_label
    op_recv_marker_bind = op_label
    op_recv_marker_clear = op_label
    op_recv_marker_use = op_label

    def op_func_info(self, i):
        raise EmuFault("badmatch", Atom("function_clause"))

    def op_move(self, i):
        self.write(i.operands[1], self.read(i.operands[0]))
        self.pc += 1

    def op_swap(self, i):
        a, b = i.operands
        va, vb = self.read(a), self.read(b)
        self.write(a, vb)
        self.write(b, va)
        self.pc += 1

    def op_init(self, i):
        self.write(i.operands[0], [])
        self.pc += 1

    op_kill = op_init

    def op_init_yregs(self, i):
        for y in i.operands[0].items:
            self.write(y, [])
        self.pc += 1

    def op_trim(self, i):
        n = i.operands[0].value
        self.ystack[-1] = self.ystack[-1][n:]
        self.pc += 1

    def op_allocate(self, i):
        self.ystack.append([UNINIT] * i.operands[0].value)
        self.pc += 1

    op_allocate_heap = op_allocate

    def op_allocate_zero(self, i):
        self.ystack.append([[] for _ in range(i.operands[0].value)])
        self.pc += 1

    op_allocate_heap_zero = op_allocate_zero

    def op_deallocate(self, i):
        if not self.ystack:
            raise EmuFault("badarg", Atom("no_stack_frame"))
        self.ystack.pop()
        self.pc += 1

    # -- calls -------------------------------------------------------------

    def _args(self, arity):
        return [self.read(X(k)) for k in range(arity)]

    def _bif(self, name, args):
        fn = BIFS.get((name, len(args)))
        if fn is None:
            raise EmuFault("badarg", (Atom("undef"), Atom(name), len(args)))
        self.counters.reductions += 1
        return fn(self, args)

    def _do_return(self):
        if not self.cstack:
            raise Halt(self.read(X(0)))
        self.pc = self.cstack.pop()
        self.x = {0: self.x.get(0, UNINIT)}

    def _local_target(self, ext: ExtFunc):
        if ext.module == self.module.name and (ext.function, ext.arity) in self.entry_pc:
            return self.entry_pc[(ext.function, ext.arity)]
        return None

    def op_call(self, i):
        self.counters.reductions += 1
        self.cstack.append(self.pc + 1)
        self.jump(i.operands[1])

    def op_call_only(self, i):
        self.counters.reductions += 1
        self.jump(i.operands[1])

    def op_call_last(self, i):
        self.counters.reductions += 1
        self.ystack.pop()
        self.jump(i.operands[1])

    def op_call_ext(self, i):
        ext = i.operands[1]
        target = self._local_target(ext)
        if target is not None:
            self.counters.reductions += 1
            self.cstack.append(self.pc + 1)
            self.pc = target
            return
        result = self._bif(ext.function, self._args(ext.arity))
        self.x = {0: result}
        self.pc += 1

    def op_call_ext_only(self, i):
        ext = i.operands[1]
        target = self._local_target(ext)
        if target is not None:
            self.counters.reductions += 1
            self.pc = target
            return
        result = self._bif(ext.function, self._args(ext.arity))
        self.x = {0: result}
        self._do_return()

    def op_call_ext_last(self, i):
        self.ystack.pop()
        ext = i.operands[1]
        target = self._local_target(ext)
        if target is not None:
            self.counters.reductions += 1
            self.pc = target
            return
        result = self._bif(ext.function, self._args(ext.arity))
        self.x = {0: result}
        self._do_return()

    def op_return(self, i):
        self._do_return()

    def op_bif(self, i):
        name, fail, args, dst = i.operands
        self._guarded_bif(name.name, fail, args, dst)

    def op_gc_bif(self, i):
        name, fail, _live, args, dst = i.operands
        self._guarded_bif(name.name, fail, args, dst)

    def _guarded_bif(self, name, fail, args, dst):
        values = [self.read(a) for a in args.items]
        try:
            result = self._bif(name, values)
        except EmuFault as f:
            if f.reason in CATCHABLE and fail.label:
                self.jump(fail)
                return
            raise
        self.write(dst, result)
        self.pc += 1

    def op_send(self, i):
        self.counters.reductions += 1
        msg = self.read(X(1))
        if not isinstance(self.read(X(0)), Pid):
            raise EmuFault("badarg", Atom("send"))
        self.deliver(msg)
        self.x[0] = msg
        self.pc += 1

    # -- control -----------------------------------------------------------

    def op_jump(self, i):
        self.jump(i.operands[0])

    def op_select_val(self, i):
        src, fail, table = i.operands
        v = self.read(src)
        items = table.items
        for k in range(0, len(items), 2):
            if exact_eq(v, self.read(items[k])):
                self.jump(items[k + 1])
                return
        self.jump(fail)

    def op_select_tuple_arity(self, i):
        src, fail, table = i.operands
        v = self.read(src)
        items = table.items
        if isinstance(v, HTuple):
            for k in range(0, len(items), 2):
                if items[k].value == len(v.elems):
                    self.jump(items[k + 1])
                    return
        self.jump(fail)

    def op_badmatch(self, i):
        raise EmuFault("badmatch", self.read(i.operands[0]))

    def op_if_end(self, i):
        raise EmuFault("badmatch", Atom("if_clause"))

    def op_case_end(self, i):
        raise EmuFault("badmatch", self.read(i.operands[0]))

    def op_try_case_end(self, i):
        raise EmuFault("badmatch", self.read(i.operands[0]))

    def op_raise(self, i):
        raise EmuFault("badarg", self.read(i.operands[1]))

    def op_test(self, i):
        kind = i.operands[0].name
        fail = i.operands[1]
        if len(i.operands) == 5:  # {test,Kind,Fail,Live,Args,Dst}
            args = [self.read(a) for a in i.operands[3].items]
            ok, result = _TESTS5[kind](self, args)
            if ok:
                self.write(i.operands[4], result)
        else:
            ok = _TESTS[kind](self, i.operands[2].items)
        if ok:
            self.pc += 1
        else:
            self.jump(fail)

    # -- tuples and lists --------------------------------------------------

    def op_get_tuple_element(self, i):
        src, idx, dst = i.operands
        t = self.read(src)
        if not isinstance(t, HTuple) or idx.value >= len(t.elems):
            raise EmuFault("badarg", Atom("get_tuple_element"))
        self.write(dst, t.elems[idx.value])
        self.pc += 1

    def op_set_tuple_element(self, i):
        val, tup, idx = i.operands
        v = self.read(val)
        t = self.read(tup)
        if not isinstance(t, HTuple) or idx.value >= len(t.elems):
            raise EmuFault("badarg", Atom("set_tuple_element"))
        t.elems[idx.value] = v
        self.counters.heap_words_copied += 1
        self.pc += 1

    def op_put_tuple(self, i):
        n = self.read(i.operands[0]) if isinstance(i.operands[0], (X, Y)) else i.operands[0].value
        t = HTuple([UNINIT] * n)
        self.write(i.operands[1], t)
        self.pending_tuple = [t, 0] if n else None
        self.pc += 1

    def op_put(self, i):
        if self.pending_tuple is None:
            raise EmuFault("badarg", Atom("put_without_tuple"))
        t, k = self.pending_tuple
        t.elems[k] = self.read(i.operands[0])
        k += 1
        self.pending_tuple = [t, k] if k < len(t.elems) else None
        self.pc += 1

    def op_put_tuple2(self, i):
        dst, items = i.operands
        self.write(dst, HTuple([self.read(e) for e in items.items]))
        self.pc += 1

    def op_get_list(self, i):
        src, hd, tl = i.operands
        v = self.read(src)
        if not isinstance(v, list) or not v:
            raise EmuFault("badarg", Atom("get_list"))
        self.write(hd, v[0])
        self.write(tl, v[1:])
        self.pc += 1

    def op_get_hd(self, i):
        v = self.read(i.operands[0])
        if not isinstance(v, list) or not v:
            raise EmuFault("badarg", Atom("get_hd"))
        self.write(i.operands[1], v[0])
        self.pc += 1

    def op_get_tl(self, i):
        v = self.read(i.operands[0])
        if not isinstance(v, list) or not v:
            raise EmuFault("badarg", Atom("get_tl"))
        self.write(i.operands[1], v[1:])
        self.pc += 1

    def op_put_list(self, i):
        h, t, dst = i.operands
        hv, tv = self.read(h), self.read(t)
        self.write(dst, [hv] + tv if isinstance(tv, list) else ImproperList((hv,), tv))
        self.pc += 1

    # -- binaries ----------------------------------------------------------

    def _init_bin(self, i, scale):
        _fail, size, _extra, _live, _flags, dst = i.operands
        n = self.read(size) if isinstance(size, (X, Y)) else size.value
        if type(n) is not int or n < 0:
            raise EmuFault("badarg", Atom("bs_init"))
        p = PendingBin(n * scale, dst)
        if p.declared == 0:
            self.write(dst, Bin(b""))
            self.pending_bin = None
        else:
            self.write(dst, p)
            self.pending_bin = p
        self.pc += 1

    def op_bs_init2(self, i):
        self._init_bin(i, 8)

    def op_bs_init_bits(self, i):
        self._init_bin(i, 1)

    def _append_bits(self, value: int, nbits: int):
        p = self.pending_bin
        if p is None or p.nbits + nbits > p.declared:
            raise EmuFault("badarg", Atom("binary_overflow"))
        p.acc = (p.acc << nbits) | (value & ((1 << nbits) - 1)) if nbits else p.acc
        p.nbits += nbits
        if p.nbits == p.declared:
            pad = (-p.nbits) % 8
            data = (p.acc << pad).to_bytes((p.nbits + pad) // 8, "big")
            done = Bin(data, p.nbits)
            try:
                current = self.read(p.dst)
            except EmuFault:
                current = None
            if current is p:
                self.write(p.dst, done)
            self.pending_bin = None
        self.pc += 1

    @staticmethod
    def _flags(op) -> set:
        t = op.term if isinstance(op, Raw) else None
        if isinstance(t, tuple) and len(t) == 2 and isinstance(t[1], list):
            return {a.name for a in t[1] if isinstance(a, Atom)}
        return set()

    def _size_bits(self, size, unit):
        n = self.read(size) if isinstance(size, (X, Y)) else size.value
        if type(n) is not int or n < 0:
            raise EmuFault("badarg", Atom("bad_size"))
        return n * unit.value

    def op_bs_put_integer(self, i):
        _fail, size, unit, flags, src = i.operands
        nbits = self._size_bits(size, unit)
        v = self.read(src)
        if type(v) is not int:
            raise EmuFault("badarg", Atom("bs_put_integer"))
        v &= (1 << nbits) - 1 if nbits else 0
        if "little" in self._flags(flags) and nbits % 8 == 0 and nbits:
            v = int.from_bytes(v.to_bytes(nbits // 8, "big"), "little")
        self._append_bits(v, nbits)

    def op_bs_put_float(self, i):
        _fail, size, unit, flags, src = i.operands
        nbits = self._size_bits(size, unit)
        v = self.read(src)
        if type(v) not in (int, float) or nbits not in (32, 64):
            raise EmuFault("badarg", Atom("bs_put_float"))
        fmt = ("<" if "little" in self._flags(flags) else ">") + ("f" if nbits == 32 else "d")
        self._append_bits(int.from_bytes(struct.pack(fmt, float(v)), "big"), nbits)

    def op_bs_put_binary(self, i):
        _fail, size, unit, _flags, src = i.operands
        b = self.read(src)
        if not isinstance(b, Bin):
            raise EmuFault("badarg", Atom("bs_put_binary"))
        if isinstance(size, AtomOp) and size.name == "all":
            nbits = b.bits
        else:
            nbits = self._size_bits(size, unit)
        if nbits > b.bits:
            raise EmuFault("badarg", Atom("bs_put_binary"))
        value = int.from_bytes(b.data, "big") >> (8 * len(b.data) - nbits) if b.data else 0
        self._append_bits(value, nbits)

    def op_bs_put_string(self, i):
        n, s = i.operands
        chars = s.term[1] if isinstance(s, Raw) and isinstance(s.term, tuple) else None
        if isinstance(chars, Bin):
            data = chars.data
        elif isinstance(chars, list):
            data = bytes(chars)
        else:
            raise EmuFault("badarg", Atom("bs_put_string"))
        data = data[:n.value]
        self._append_bits(int.from_bytes(data, "big") if data else 0, 8 * len(data))

    def _put_unicode(self, i, codec):
        _fail, flags, src = i.operands
        v = self.read(src)
        if type(v) is not int or not 0 <= v <= 0x10FFFF or 0xD800 <= v <= 0xDFFF:
            raise EmuFault("badarg", Atom("bs_put_utf"))
        if codec != "utf-8":
            codec += "-le" if "little" in self._flags(flags) else "-be"
        data = chr(v).encode(codec)
        self._append_bits(int.from_bytes(data, "big"), 8 * len(data))

    def op_bs_put_utf8(self, i):
        self._put_unicode(i, "utf-8")

    def op_bs_put_utf16(self, i):
        self._put_unicode(i, "utf-16")

    def op_bs_put_utf32(self, i):
        self._put_unicode(i, "utf-32")

    def op_bs_start_match4(self, i):
        fail, _live, src, dst = i.operands
        b = self.read(src)
        if isinstance(b, MatchCtx):
            self.write(dst, b)
        elif isinstance(b, Bin):
            self.write(dst, MatchCtx(b))
        elif isinstance(fail, FLabel) and fail.label:
            self.jump(fail)
            return
        else:
            raise EmuFault("badmatch", b)
        self.pc += 1

    # -- receive -----------------------------------------------------------

    def op_loop_rec(self, i):
        if self.recv_open:
            raise EmuFault("receive-context", Atom("nested_loop_rec"))
        if self.save < len(self.mailbox):
            self.x[0] = self.mailbox[self.save]
            self.recv_open = True
            self.pc += 1
        else:
            self.jump(i.operands[0])

    def op_loop_rec_end(self, i):
        if not self.recv_open:
            raise EmuFault("receive-context", Atom("loop_rec_end"))
        self.recv_open = False
        self.save += 1
        self.jump(i.operands[0])

    def op_remove_message(self, i):
        if not self.recv_open:
            raise EmuFault("receive-context", Atom("remove_message"))
        del self.mailbox[self.save]
        self.counters.messages_removed += 1
        self.recv_open = False
        self.save = 0
        self.pc += 1

    def op_timeout(self, i):
        if self.recv_open:
            raise EmuFault("receive-context", Atom("timeout"))
        self.save = 0
        self.pc += 1

    def op_wait(self, i):
        if self.recv_open:
            raise EmuFault("receive-context", Atom("wait"))
        if self.save < len(self.mailbox):
            self.jump(i.operands[0])
            return
        raise EmuFault("deadlock-wait", Atom("wait"))

    def op_wait_timeout(self, i):
        if self.recv_open:
            raise EmuFault("receive-context", Atom("wait_timeout"))
        if self.save < len(self.mailbox):
            self.jump(i.operands[0])
            return
        t = self.read(i.operands[1])
        if t == Atom("infinity"):
            raise EmuFault("deadlock-wait", Atom("wait_timeout"))
        if type(t) is not int or t < 0:
            raise EmuFault("badarg", Atom("wait_timeout"))
        self.counters.clock += t
        self.pc += 1

    # -- exceptions --------------------------------------------------------

    def _install(self, i, kind):
        y, handler = i.operands
        self._seq += 1
        tag = CatchTag(kind, self.label_pc[handler.label], len(self.cstack),
                       len(self.ystack) - 1, self._seq)
        self.write(y, tag)
        self.pc += 1

    def op_catch(self, i):
        self._install(i, "catch")

    def op_try(self, i):
        self._install(i, "try")

    def op_catch_end(self, i):
        self.write(i.operands[0], [])
        self.pc += 1

    op_try_end = op_catch_end
    op_try_case = op_catch_end


def to_term_reg(op):
    if isinstance(op, X):
        return (Atom("x"), op.index)
    if isinstance(op, Y):
        return (Atom("y"), op.index)
    return Atom("operand")


# ---------------------------------------------------------------------------
# Test instructions


def _t_eq_exact(e, a):
    return exact_eq(e.read(a[0]), e.read(a[1]))


def _t_is_tagged_tuple(e, a):
    v = e.read(a[0])
    return (isinstance(v, HTuple) and len(v.elems) == a[1].value and v.elems
            and exact_eq(v.elems[0], e.read(a[2])))


def _t_bs_test_tail2(e, a):
    ctx = e.read(a[0])
    if not isinstance(ctx, MatchCtx):
        raise EmuFault("badarg", Atom("bs_test_tail2"))
    return ctx.remaining == a[1].value


_TESTS: dict[str, Callable] = {
    "is_eq_exact": _t_eq_exact,
    "is_ne_exact": lambda e, a: not _t_eq_exact(e, a),
    "is_eq": lambda e, a: loose_eq(e.read(a[0]), e.read(a[1])),
    "is_ne": lambda e, a: not loose_eq(e.read(a[0]), e.read(a[1])),
    "is_lt": lambda e, a: compare(e.read(a[0]), e.read(a[1])) < 0,
    "is_ge": lambda e, a: compare(e.read(a[0]), e.read(a[1])) >= 0,
    "is_integer": lambda e, a: type(e.read(a[0])) is int,
    "is_float": lambda e, a: type(e.read(a[0])) is float,
    "is_number": lambda e, a: type(e.read(a[0])) in (int, float),
    "is_atom": lambda e, a: isinstance(e.read(a[0]), Atom),
    "is_tuple": lambda e, a: isinstance(e.read(a[0]), HTuple),
    "is_nil": lambda e, a: e.read(a[0]) == [],
    "is_list": lambda e, a: isinstance(e.read(a[0]), (list, ImproperList)),
    "is_nonempty_list": lambda e, a: (isinstance(e.read(a[0]), ImproperList)
                                      or (isinstance(e.read(a[0]), list) and bool(e.read(a[0])))),
    "is_binary": lambda e, a: isinstance(e.read(a[0]), Bin) and e.read(a[0]).is_binary,
    "is_bitstr": lambda e, a: isinstance(e.read(a[0]), Bin),
    "is_pid": lambda e, a: isinstance(e.read(a[0]), Pid),
    "test_arity": lambda e, a: (isinstance(e.read(a[0]), HTuple)
                                and len(e.read(a[0]).elems) == a[1].value),
    "is_tagged_tuple": _t_is_tagged_tuple,
    "bs_test_tail2": _t_bs_test_tail2,
}


def _t5_bs_start_match(e, args):
    b = args[0]
    if isinstance(b, MatchCtx):
        return True, b
    if isinstance(b, Bin):
        return True, MatchCtx(b)
    return False, None


_TESTS5: dict[str, Callable] = {
    "bs_start_match2": _t5_bs_start_match,
    "bs_start_match3": _t5_bs_start_match,
}


# ---------------------------------------------------------------------------
# Front doors


def run(m: ModuleAsm, entry: tuple[str, int], args: Sequence, fuel: int = DEFAULT_FUEL,
        mode: str = "strict", trace: bool = False) -> EmuResult:
    if mode not in ("strict", "permissive"):
        raise ValueError(f"unknown mode {mode!r}")
    name, arity = entry
    if (name, arity) not in set(m.exports):
        raise KeyError(f"{name}/{arity} is not exported")
    emu = Emulator(m, fuel=fuel, strict=(mode == "strict"), trace=trace)
    res = emu.invoke(name, arity, list(args))
    if trace:
        res.trace = emu.trace
    return res


@dataclass
class Mismatch:
    args: list
    left: EmuResult
    right: EmuResult


@dataclass
class DiffReport:
    entry: tuple
    trials: int
    mismatches: list

    @property
    def equivalent(self) -> bool:
        return not self.mismatches

    def as_term(self):
        return (Atom("differential"), (Atom(self.entry[0]), self.entry[1]), self.trials,
                [(list(mm.args), mm.left.as_term()[1], mm.right.as_term()[1])
                 for mm in self.mismatches])


InputGen = Callable[[random.Random], list]


def int_inputs(arity: int, lo: int = 0, hi: int = 200) -> InputGen:
    return lambda rng: [rng.randint(lo, hi) for _ in range(arity)]


def run_differential(m1: ModuleAsm, m2: ModuleAsm, entry: tuple[str, int],
                     gen: Optional[InputGen] = None, trials: int = 100, seed: int = 0,
                     fuel: int = DEFAULT_FUEL, compare_mailbox: bool = False,
                     inputs: Optional[Iterable[list]] = None) -> DiffReport:
    """Run both modules on the same inputs and collect disagreements."""
    if inputs is None:
        rng = random.Random(seed)
        gen = gen or int_inputs(entry[1])
        inputs = [gen(rng) for _ in range(trials)]
    else:
        inputs = [list(a) for a in inputs]
    mismatches = []
    for args in inputs:
        a = run(m1, entry, args, fuel=fuel)
        b = run(m2, entry, args, fuel=fuel)
        if a.key() != b.key() or (compare_mailbox and a.mailbox_residue != b.mailbox_residue):
            mismatches.append(Mismatch(args, a, b))
    return DiffReport(entry, len(inputs), mismatches)


def cost_profile(m: ModuleAsm, entry: tuple[str, int], sizes: Iterable[int],
                 writes: int) -> list[tuple[int, int]]:
    """Heap words copied when ``entry(Size, Writes)`` runs at each size."""
    out = []
    for size in sizes:
        res = run(m, entry, [size, writes])
        if res.outcome != "value":
            raise RuntimeError(f"cost run failed at size {size}: {res.reason}")
        out.append((size, res.counters.heap_words_copied))
    return out
