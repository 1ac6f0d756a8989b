"""A lightweight validator: register initialization, match contexts, fragile
message references and stack frame pairing, plus backward liveness."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

from .asmir import (AtomOp, FunctionDef, Instruction, IntOp, ModuleAsm, NilOp,
                    OperandList, X, Y, encode_instruction, registers_in)
from .cfg import exception_sites, instr_successors
from .sterm import Atom, format_term

UNINIT, VALUE, MATCH_CONTEXT, FRAGILE, CATCH_TAG, CONFLICT = (
    "uninit", "value", "match_context", "fragile", "catch_tag", "conflict")

_CALLS = frozenset({"call", "call_ext", "call_only", "call_ext_only", "call_last",
                    "call_ext_last"})


# ---------------------------------------------------------------------------
# Uses and definitions


@dataclass(frozen=True)
class Effect:
    uses: tuple
    defs: tuple
    clobber_x: bool = False     # every x register dies (calls)
    clobber_y: bool = False     # the stack frame changes


def _regs(*ops) -> tuple:
    out = []
    for op in ops:
        out.extend(registers_in(op))
    return tuple(out)


def _arity_regs(n: int) -> tuple:
    return tuple(X(k) for k in range(n))


def effect(i: Instruction) -> Effect:
    """The registers ``i`` reads and writes."""
    op, o = i.opcode, i.operands
    if i.opaque:
        return Effect(_regs(*o), ())
    if op in ("label", "line", "func_info", "test_heap", "remove_message", "timeout",
              "loop_rec_end", "wait", "jump", "if_end") or op.startswith("recv_marker"):
        return Effect((), ())
    if op == "move":
        return Effect(_regs(o[0]), (o[1],))
    if op == "swap":
        return Effect((o[0], o[1]), (o[0], o[1]))
    if op in ("init", "kill"):
        return Effect((), (o[0],))
    if op == "init_yregs":
        return Effect((), tuple(o[0].items))
    if op in ("allocate", "allocate_zero", "allocate_heap", "allocate_heap_zero",
              "deallocate", "trim"):
        return Effect((), (), clobber_y=True)
    if op == "bif":
        return Effect(_regs(o[2]), (o[3],))
    if op == "gc_bif":
        return Effect(_regs(o[3]), (o[4],))
    if op == "get_tuple_element":
        return Effect(_regs(o[0]), (o[2],))
    if op == "set_tuple_element":
        return Effect(_regs(o[0], o[1]), ())
    if op == "get_list":
        return Effect(_regs(o[0]), (o[1], o[2]))
    if op in ("get_hd", "get_tl"):
        return Effect(_regs(o[0]), (o[1],))
    if op == "put_list":
        return Effect(_regs(o[0], o[1]), (o[2],))
    if op == "put_tuple":
        return Effect(_regs(o[0]), (o[1],))
    if op == "put":
        return Effect(_regs(o[0]), ())
    if op == "put_tuple2":
        return Effect(_regs(o[1]), (o[0],))
    if op == "send":
        return Effect((X(0), X(1)), (X(0),))
    if op == "bs_start_match4":
        return Effect(_regs(o[2]), (o[3],))
    if op == "test":
        if len(o) == 5:
            return Effect(_regs(o[3]), (o[4],))
        return Effect(_regs(o[2]), ())
    if op in ("call", "call_ext"):
        return Effect(_arity_regs(o[0].value), (X(0),), clobber_x=True)
    if op in ("call_only", "call_ext_only"):
        return Effect(_arity_regs(o[0].value), (), clobber_x=True)
    if op in ("call_last", "call_ext_last"):
        return Effect(_arity_regs(o[0].value), (), clobber_x=True, clobber_y=True)
    if op == "return":
        return Effect((X(0),), ())
    if op in ("select_val", "select_tuple_arity", "badmatch", "case_end", "try_case_end"):
        return Effect(_regs(o[0]), ())
    if op == "raise":
        return Effect(_regs(o[0], o[1]), ())
    if op == "loop_rec":
        return Effect((), (o[1],))
    if op == "wait_timeout":
        return Effect(_regs(o[1]), ())
    if op in ("catch", "try"):
        return Effect((), (o[0],))
    if op in ("catch_end", "try_end"):
        return Effect((), (o[0],))
    if op == "try_case":
        return Effect((), (o[0], X(0), X(1), X(2)))
    if op in ("bs_init2", "bs_init_bits"):
        return Effect(_regs(o[1]), (o[5],))
    if op in ("bs_put_integer", "bs_put_binary", "bs_put_float"):
        return Effect(_regs(o[1], o[4]), ())
    if op in ("bs_put_utf8", "bs_put_utf16", "bs_put_utf32"):
        return Effect(_regs(o[2]), ())
    if op == "bs_put_string":
        return Effect((), ())
    return Effect(_regs(*o), ())


# ---------------------------------------------------------------------------
# Liveness


def liveness_report(f: FunctionDef) -> list[frozenset]:
    """Registers live on entry to each body index (backward dataflow)."""
    succ = instr_successors(f)
    exc = exception_sites(f, succ)
    n = len(f.body)
    effects = [effect(i) for i in f.body]
    live_in: list[frozenset] = [frozenset()] * n
    preds: list[list[int]] = [[] for _ in range(n)]
    outs: list[list[tuple[int, Optional[str]]]] = [[] for _ in range(n)]
    for k in range(n):
        for t, _ in succ[k]:
            outs[k].append((t, None))
            preds[t].append(k)
        for h in exc.get(k, ()):
            outs[k].append((h, "exception"))
            preds[h].append(k)
    exc_defs = frozenset({X(0), X(1), X(2)})
    work = deque(range(n - 1, -1, -1))
    queued = set(work)
    while work:
        k = work.popleft()
        queued.discard(k)
        out = set()
        for t, kind in outs[k]:
            s = live_in[t]
            if kind == "exception":
                s = s - exc_defs
            out |= s
        e = effects[k]
        if e.clobber_x:
            out = {r for r in out if not isinstance(r, X)}
        if e.clobber_y:
            out = {r for r in out if not isinstance(r, Y)}
        out -= set(e.defs)
        new = frozenset(out | set(e.uses))
        if new != live_in[k]:
            live_in[k] = new
            for p in preds[k]:
                if p not in queued:
                    queued.add(p)
                    work.append(p)
    return live_in


def dead_x_registers(f: FunctionDef, k: int, span: Iterable[int] = (), limit: int = 1024) -> list[int]:
    """x registers not live at body index ``k`` nor at any index in ``span``."""
    live = liveness_report(f)
    busy = set(live[k])
    for j in span:
        busy |= live[j]
        busy |= set(effect(f.body[j]).uses) | set(effect(f.body[j]).defs)
    return [r for r in range(limit) if X(r) not in busy]


# ---------------------------------------------------------------------------
# Abstract interpretation


def _join_tag(a: str, b: str) -> str:
    if a == b:
        return a
    if UNINIT in (a, b):
        return UNINIT
    if {a, b} == {FRAGILE, VALUE}:
        return FRAGILE
    return CONFLICT


@dataclass(frozen=True)
class AbsState:
    x: tuple                 # sorted (index, tag) pairs; missing = uninit
    y: object                # None (no frame), tuple of tags, or CONFLICT

    def xtag(self, i: int) -> str:
        for k, t in self.x:
            if k == i:
                return t
        return UNINIT

    def join(self, other: "AbsState") -> "AbsState":
        a, b = dict(self.x), dict(other.x)
        x = tuple(sorted((k, _join_tag(a[k], b[k])) for k in a.keys() & b.keys()
                         if _join_tag(a[k], b[k]) != UNINIT))
        if self.y is None and other.y is None:
            y = None
        elif isinstance(self.y, tuple) and isinstance(other.y, tuple) and len(self.y) == len(other.y):
            y = tuple(_join_tag(p, q) for p, q in zip(self.y, other.y))
        else:
            y = CONFLICT
        return AbsState(x, y)


@dataclass(frozen=True)
class Diagnostic:
    module: str
    function: str
    arity: int
    instruction: Instruction
    index: int               # 1-based position in the function body
    reason: object           # a Term

    def as_term(self):
        return (Atom(self.module), (Atom("function"), Atom(self.function), self.arity),
                (encode_instruction(self.instruction), self.index, self.reason))

    def __str__(self):
        return format_term(self.as_term())


def _reg_term(r) -> tuple:
    return (Atom("x" if isinstance(r, X) else "y"), r.index)


class _Interp:
    def __init__(self, m: ModuleAsm, f: FunctionDef):
        self.m, self.f = m, f
        self.diags: dict[tuple, Diagnostic] = {}
        self.emit = False

    def diag(self, k: int, reason):
        if not self.emit:
            return
        key = (k, format_term(reason))
        if key not in self.diags:
            self.diags[key] = Diagnostic(self.m.name, self.f.name, self.f.arity,
                                         self.f.body[k], k + 1, reason)

    # register access

    def tag(self, st: dict, r) -> str:
        if isinstance(r, X):
            return st["x"].get(r.index, UNINIT)
        y = st["y"]
        if not isinstance(y, list) or r.index >= len(y):
            return UNINIT
        return y[r.index]

    def read(self, k, st, r) -> str:
        t = self.tag(st, r)
        if t == UNINIT:
            self.diag(k, (Atom("uninitialized"), _reg_term(r)))
        elif t == CONFLICT:
            self.diag(k, (Atom("conflicting_types"), _reg_term(r)))
        return t

    def write(self, k, st, r, t):
        if isinstance(r, X):
            if t == UNINIT:
                st["x"].pop(r.index, None)
            else:
                st["x"][r.index] = t
            return
        y = st["y"]
        if not isinstance(y, list) or r.index >= len(y):
            self.diag(k, (Atom("no_stack_slot"), _reg_term(r)))
            return
        if t == FRAGILE:
            self.diag(k, (Atom("fragile_message_reference"), _reg_term(r)))
            t = VALUE
        y[r.index] = t

    # transfer

    def step(self, k: int, s: AbsState) -> list[tuple[int, AbsState]]:
        f = self.f
        i = f.body[k]
        op, o = i.opcode, i.operands
        st = {"x": dict(s.x), "y": list(s.y) if isinstance(s.y, tuple) else s.y}
        e = effect(i)
        frame = st["y"]
        if frame == CONFLICT and any(isinstance(r, Y) for r in e.uses + e.defs):
            self.diag(k, (Atom("stack_frame_conflict"),))
        tags = [self.read(k, st, r) for r in e.uses]
        if op in _CALLS or op == "return":
            for r, t in zip(e.uses, tags):
                if t == MATCH_CONTEXT:
                    self.diag(k, (Atom("match_context"), _reg_term(r)))
        if op in ("return", "call_only", "call_ext_only") and isinstance(frame, list):
            self.diag(k, (Atom("unbalanced_stack_frame"), len(frame)))
        if op in ("call_last", "call_ext_last", "deallocate"):
            want = o[2].value if op != "deallocate" else o[0].value
            if not isinstance(frame, list):
                self.diag(k, (Atom("no_stack_frame"), want))
            elif len(frame) != want:
                self.diag(k, (Atom("deallocate_mismatch"), len(frame), want))
        # results
        if op == "move" or op in ("get_tuple_element", "get_hd", "get_tl"):
            src = tags[0] if tags else VALUE
            t = src if src in (MATCH_CONTEXT, FRAGILE) else VALUE
            if op != "move" and src == MATCH_CONTEXT:
                t = VALUE
            self.write(k, st, e.defs[0], t)
        elif op == "swap":
            ta, tb = tags
            self.write(k, st, o[0], tb)
            self.write(k, st, o[1], ta)
        elif op == "get_list":
            t = FRAGILE if tags[0] == FRAGILE else VALUE
            self.write(k, st, o[1], t)
            self.write(k, st, o[2], t)
        elif op == "bs_start_match4" or (op == "test" and len(o) == 5):
            self.write(k, st, e.defs[0], MATCH_CONTEXT)
        elif op in ("allocate", "allocate_heap", "allocate_zero", "allocate_heap_zero"):
            if isinstance(frame, list):
                self.diag(k, (Atom("stack_frame_already_allocated"), len(frame)))
            live = o[-1].value
            st["x"] = {r: t for r, t in st["x"].items() if r < live}
            fill = VALUE if op.endswith("zero") else UNINIT
            st["y"] = [fill] * o[0].value
        elif op == "test_heap":
            live = o[1].value if len(o) > 1 and isinstance(o[1], IntOp) else 1024
            st["x"] = {r: t for r, t in st["x"].items() if r < live}
        elif op == "trim":
            if isinstance(frame, list):
                st["y"] = frame[o[0].value:]
        elif op in ("deallocate",):
            st["y"] = None
        elif op in ("call", "call_ext"):
            st["x"] = {0: VALUE}
        elif op in ("catch", "try"):
            self.write(k, st, o[0], CATCH_TAG)
        elif op == "loop_rec":
            pass  # handled per edge below
        elif op == "remove_message":
            st["x"] = {r: (VALUE if t == FRAGILE else t) for r, t in st["x"].items()}
        elif op == "loop_rec_end":
            st["x"] = {r: t for r, t in st["x"].items() if t != FRAGILE}
        else:
            for r in e.defs:
                self.write(k, st, r, VALUE)
        out = AbsState(tuple(sorted(st["x"].items())),
                       tuple(st["y"]) if isinstance(st["y"], list) else st["y"])
        succs = []
        for t, kind in self.succ[k]:
            nxt = out
            if op == "loop_rec" and t == k + 1 and kind != "fail":
                x = dict(out.x)
                x[o[1].index if isinstance(o[1], X) else 0] = FRAGILE
                nxt = AbsState(tuple(sorted(x.items())), out.y)
            succs.append((t, nxt))
        for h in self.exc.get(k, ()):
            opener = self.handler_kind.get(h, "catch")
            x = ((0, VALUE),) if opener == "catch" else ((0, VALUE), (1, VALUE), (2, VALUE))
            succs.append((h, AbsState(x, s.y)))
        return succs

    def run(self) -> list[Diagnostic]:
        f = self.f
        self.succ = instr_successors(f)
        self.exc = exception_sites(f, self.succ)
        labels = f.labels()
        self.handler_kind = {labels[i.operands[1].label]: i.opcode
                             for i in f.body if i.opcode in ("catch", "try")}
        start = labels[f.entry]
        init = AbsState(tuple((k, VALUE) for k in range(f.arity)), None)
        states: dict[int, AbsState] = {start: init}
        work = deque([start])
        queued = {start}
        while work:
            k = work.popleft()
            queued.discard(k)
            for t, s in self.step(k, states[k]):
                old = states.get(t)
                new = s if old is None else old.join(s)
                if new != old:
                    states[t] = new
                    if t not in queued:
                        queued.add(t)
                        work.append(t)
        self.emit = True
        for k in sorted(states):
            self.step(k, states[k])
        self.states = states
        return sorted(self.diags.values(), key=lambda d: (d.index, str(d.reason)))


def validate_function(m: ModuleAsm, f: FunctionDef) -> list[Diagnostic]:
    return _Interp(m, f).run()


def validate(m: ModuleAsm) -> list[Diagnostic]:
    out = []
    for f in m.functions:
        out.extend(validate_function(m, f))
    return out


def abstract_states(m: ModuleAsm, f: FunctionDef) -> dict[int, AbsState]:
    it = _Interp(m, f)
    it.run()
    return it.states


_IMMEDIATE = (AtomOp, IntOp, NilOp)


def lint_set_tuple_element(m: ModuleAsm, severity: str = "warning") -> list[Diagnostic]:
    """Flag set_tuple_element whose new value may be a heap object.

    Storing a boxed term into an older tuple can leave a pointer the garbage
    collector does not expect; immediates (atoms, small integers, []) are safe.
    """
    if severity not in ("off", "warning", "error"):
        raise ValueError(f"unknown severity {severity!r}")
    out = []
    if severity == "off":
        return out
    for f in m.functions:
        for k, i in enumerate(f.body):
            if i.opcode == "set_tuple_element" and not isinstance(i.operands[0], _IMMEDIATE):
                out.append(Diagnostic(m.name, f.name, f.arity, i, k + 1,
                                      (Atom("gc_hazard"), Atom(severity))))
    return out
