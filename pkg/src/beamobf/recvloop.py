"""Recursion schemas and their receive-loop encoding.

A schema describes a self-recursive integer function of one of two shapes:

    body:  f(K) -> B;       f(N) -> N op f(N - S).
    tail:  f(K, Acc) -> Acc; f(N, Acc) -> f(N - S, Acc op N).

The encoding replaces the recursion with a loop driven by messages the
process sends to itself: each message is ``{U, Done}`` where ``U`` is a
unique integer.  The message that continues the loop is never removed (its
contents are fragile), so a counter records how many were left behind and a
cleanup loop consumes exactly that many ``{U, _}`` messages afterwards.

Register layout of the encoded function::

    y0 current N     y1 unique id U    y2 self()
    y3 counter       y4 accumulator
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .asmir import (AtomOp, ExtFunc, FLabel, FunctionDef, Instruction, IntOp, OperandList,
                    X, Y, ins, label_of, mklabel)

COMMUTATIVE_OPS = frozenset({"+", "*", "band", "bor", "bxor"})
TAIL_OPS = frozenset(COMMUTATIVE_OPS | {"-"})
FRAME = 5
M_SLOT, U_SLOT, SELF_SLOT, COUNTER_SLOT, ACC_SLOT = (Y(k) for k in range(FRAME))
SAVED_MESSAGE = X(5)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class LoopSchema:
    name: str
    arity: int
    shape: str                     # "body" | "tail"
    op: str                        # the accumulating gc_bif
    order: str                     # "acc_first" (Acc op N) | "elem_first" (N op Acc)
    step: int
    bound: int
    base: Optional[int] = None     # body shape only
    counter_slot: Y = COUNTER_SLOT
    accumulator_slots: tuple = (ACC_SLOT,)
    bound_site: Optional[int] = field(default=None, compare=False)
    condition_site: Optional[int] = field(default=None, compare=False)
    step_sites: tuple = field(default=(), compare=False)

    def evaluate(self, n: int, acc: Optional[int] = None, limit: int = 10_000) -> int:
        """Reference semantics, used as a test oracle."""
        if self.shape == "body":
            vals = []
            while n != self.bound:
                vals.append(n)
                n -= self.step
                if len(vals) > limit:
                    raise RuntimeError("schema does not terminate")
            r = self.base
            for v in reversed(vals):
                r = _apply(self.op, v, r) if self.order == "elem_first" else _apply(self.op, r, v)
            return r
        steps = 0
        while n != self.bound:
            acc = _apply(self.op, acc, n) if self.order == "acc_first" else _apply(self.op, n, acc)
            n -= self.step
            steps += 1
            if steps > limit:
                raise RuntimeError("schema does not terminate")
        return acc


def _apply(op, a, b):
    return {"+": lambda: a + b, "-": lambda: a - b, "*": lambda: a * b, "band": lambda: a & b,
            "bor": lambda: a | b, "bxor": lambda: a ^ b}[op]()


@dataclass(frozen=True)
class ReceivePlan:
    """A schema plus the shape options of its receive encoding."""
    schema: LoopSchema
    post_test: bool = False
    exits: int = 1                 # 1 or 2 (counter parity picks the exit)
    second_entry: Optional[tuple] = None   # None | ("lt", G) | ("false",)
    waits: tuple = ()              # literals of redundant wait_timeout sites


# ---------------------------------------------------------------------------
# Operand shorthands

def xa(name: str) -> AtomOp:
    return AtomOp(name, tagged=False)


def n(v: int) -> IntOp:
    return IntOp(v, tagged=False)


def atom(name: str) -> AtomOp:
    return AtomOp(name)


def integer(v: int) -> IntOp:
    return IntOp(v)


def lst(*items) -> OperandList:
    return OperandList(tuple(items))


NOFAIL = FLabel(0)


def _strip(body) -> list[tuple[int, Instruction]]:
    return [(k, i) for k, i in enumerate(body) if i.opcode != "line"]


# ---------------------------------------------------------------------------
# Schema detection on plain recursion


def detect_schema(f: FunctionDef) -> LoopSchema:
    """Recognise the two recursion shapes syntactically, or raise SchemaError."""
    body = _strip(f.body)
    labels = {label_of(i): p for p, (_, i) in enumerate(body) if label_of(i) is not None}
    if f.entry not in labels:
        raise SchemaError("entry label missing")
    seq = body[labels[f.entry] + 1:]
    ops = [i for _, i in seq]
    sites = [k for k, _ in seq]

    def want(cond, why):
        if not cond:
            raise SchemaError(f"{f.name}/{f.arity}: {why}")

    want(len(ops) >= 4 and ops[0].opcode == "test" and ops[0].operands[0] == xa("is_eq_exact"),
         "no base-case test")
    test = ops[0]
    a, b = test.operands[2].items
    want(a == X(0) and isinstance(b, IntOp) and b.tagged, "base-case test is not N =:= K")
    bound = b.value
    rec_label = test.operands[1].label
    if f.arity == 1:
        want(ops[1].opcode == "move" and isinstance(ops[1].operands[0], IntOp)
             and ops[1].operands[1] == X(0) and ops[2].opcode == "return", "base case is not a constant")
        base = ops[1].operands[0].value
        rest = ops[3:]
        want(len(rest) == 8 and label_of(rest[0]) == rec_label, "recursive clause shape")
        want(rest[1].opcode in ("allocate", "allocate_zero") and rest[1].operands[0].value == 1,
             "frame")
        want(rest[2] == ins("move", X(0), Y(0)), "N saved to y0")
        step = _decrement(rest[3], X(0), X(0))
        want(step is not None, "decrement")
        want(rest[4].opcode == "call" and rest[4].operands[0].value == 1
             and rest[4].operands[1] == FLabel(f.entry), "self call")
        comb = rest[5]
        want(comb.opcode == "gc_bif" and comb.operands[0].name in COMMUTATIVE_OPS
             and comb.operands[4] == X(0), "combining operation")
        args = comb.operands[3].items
        want(set(args) == {X(0), Y(0)} and len(args) == 2, "combining operands")
        want(rest[6].opcode == "deallocate" and rest[6].operands[0].value == 1
             and rest[7].opcode == "return", "epilogue")
        order = "elem_first" if args[0] == Y(0) else "acc_first"
        return LoopSchema(f.name, 1, "body", comb.operands[0].name, order, step, bound, base,
                          bound_site=sites[0], condition_site=sites[0],
                          step_sites=(sites[3 + 3],))
    if f.arity == 2:
        want(ops[1] == ins("move", X(1), X(0)) and ops[2].opcode == "return",
             "base case does not return the accumulator")
        rest = ops[3:]
        want(len(rest) == 4 and label_of(rest[0]) == rec_label, "recursive clause shape")
        comb = rest[1]
        want(comb.opcode == "gc_bif" and comb.operands[0].name in TAIL_OPS
             and comb.operands[4] == X(1), "accumulating operation")
        args = comb.operands[3].items
        want(len(args) == 2 and set(args) == {X(0), X(1)}, "accumulating operands")
        step = _decrement(rest[2], X(0), X(0))
        want(step is not None, "decrement")
        want(rest[3].opcode == "call_only" and rest[3].operands[0].value == 2
             and rest[3].operands[1] == FLabel(f.entry), "self tail call")
        order = "acc_first" if args[0] == X(1) else "elem_first"
        return LoopSchema(f.name, 2, "tail", comb.operands[0].name, order, step, bound,
                          bound_site=sites[0], condition_site=sites[0],
                          step_sites=(sites[3 + 2],))
    raise SchemaError(f"{f.name}/{f.arity}: arity must be 1 or 2")


def _decrement(i: Instruction, src, dst) -> Optional[int]:
    if i.opcode != "gc_bif" or i.operands[0].name != "-" or i.operands[4] != dst:
        return None
    a, b = i.operands[3].items
    if a != src or not isinstance(b, IntOp) or not b.tagged:
        return None
    return b.value


# ---------------------------------------------------------------------------
# Plain recursion from a schema


def rebuild_from_schema(f: FunctionDef, schema: LoopSchema, fresh_label: int) -> FunctionDef:
    """Regenerate the recursion ``schema`` describes under ``f``'s header."""
    head = list(f.body[:f.labels()[f.entry] + 1])
    L = FLabel(fresh_label)
    test = ins("test", xa("is_eq_exact"), L, lst(X(0), integer(schema.bound)))
    dec_src = X(0)
    if schema.shape == "body":
        comb_args = lst(Y(0), X(0)) if schema.order == "elem_first" else lst(X(0), Y(0))
        body = [test, ins("move", integer(schema.base), X(0)), ins("return"),
                mklabel(fresh_label), ins("allocate", n(1), n(1)), ins("move", X(0), Y(0)),
                ins("gc_bif", xa("-"), NOFAIL, n(1), lst(dec_src, integer(schema.step)), X(0)),
                ins("call", n(1), FLabel(f.entry)),
                ins("gc_bif", xa(schema.op), NOFAIL, n(1), comb_args, X(0)),
                ins("deallocate", n(1)), ins("return")]
    else:
        comb_args = lst(X(1), X(0)) if schema.order == "acc_first" else lst(X(0), X(1))
        body = [test, ins("move", X(1), X(0)), ins("return"), mklabel(fresh_label),
                ins("gc_bif", xa(schema.op), NOFAIL, n(2), comb_args, X(1)),
                ins("gc_bif", xa("-"), NOFAIL, n(2), lst(dec_src, integer(schema.step)), X(0)),
                ins("call_only", n(2), FLabel(f.entry))]
    return f.with_body(head + body)


# ---------------------------------------------------------------------------
# Receive-loop encoding


class _Labels:
    def __init__(self, start: int):
        self.next = start

    def __call__(self) -> int:
        self.next += 1
        return self.next


def _message_test(fail: FLabel) -> list[Instruction]:
    """Match ``{U, _}`` in x0, leaving the second element for the caller."""
    return [ins("test", xa("is_tuple"), fail, lst(X(0))),
            ins("test", xa("test_arity"), fail, lst(X(0), n(2))),
            ins("get_tuple_element", X(0), n(0), X(1)),
            ins("test", xa("is_eq_exact"), fail, lst(X(1), U_SLOT))]


def _send_condition(cond: list[Instruction]) -> list[Instruction]:
    """Evaluate ``cond`` into x1 and send ``{U, x1}`` to self."""
    return cond + [ins("put_tuple", n(2), X(2)), ins("put", U_SLOT), ins("put", X(1)),
                   ins("move", X(2), X(1)), ins("move", SELF_SLOT, X(0)), ins("send")]


def _bound_test(schema: LoopSchema) -> list[Instruction]:
    return [ins("bif", xa("=:="), NOFAIL, lst(M_SLOT, integer(schema.bound)), X(1))]


def _cleanup(lab: _Labels) -> list[Instruction]:
    top, rec, nxt, wait, done = lab(), lab(), lab(), lab(), lab()
    return ([mklabel(top),
             ins("test", xa("is_ne_exact"), FLabel(done), lst(COUNTER_SLOT, integer(0))),
             mklabel(rec), ins("loop_rec", FLabel(wait), X(0))]
            + _message_test(FLabel(nxt))
            + [ins("remove_message"),
               ins("gc_bif", xa("-"), NOFAIL, n(1), lst(COUNTER_SLOT, integer(1)), X(1)),
               ins("move", X(1), COUNTER_SLOT), ins("jump", FLabel(top)),
               mklabel(nxt), ins("loop_rec_end", FLabel(rec)),
               mklabel(wait), ins("wait", FLabel(rec)),
               mklabel(done), ins("move", ACC_SLOT, X(0)), ins("deallocate", n(FRAME)),
               ins("return")])


def encode_receive_loop(f: FunctionDef, plan: ReceivePlan, max_label: int) -> FunctionDef:
    """Emit the receive-loop body for ``plan`` under ``f``'s header."""
    s = plan.schema
    lab = _Labels(max_label)
    head = list(f.body[:f.labels()[f.entry] + 1])
    loop, nxt, wait, false_ = lab(), lab(), lab(), lab()
    body_label = lab() if plan.second_entry else None
    exits = [lab() for _ in range(plan.exits)]
    acc_init = (ins("move", X(1), ACC_SLOT) if s.shape == "tail"
                else ins("move", integer(s.base), ACC_SLOT))
    first_cond = ([ins("move", atom("false"), X(1))] if plan.post_test else _bound_test(s))
    out = [ins("allocate", n(FRAME), n(f.arity)),
           ins("move", X(0), M_SLOT),
           acc_init,
           ins("move", integer(0), COUNTER_SLOT),
           ins("call_ext", n(0), ExtFunc("erlang", "unique_integer", 0)),
           ins("move", X(0), U_SLOT),
           ins("bif", xa("self"), NOFAIL, lst(), X(0)),
           ins("move", X(0), SELF_SLOT)]
    out += _send_condition(first_cond)
    if plan.second_entry:
        if plan.second_entry[0] == "lt":
            guard = ins("test", xa("is_lt"), FLabel(loop), lst(M_SLOT, integer(plan.second_entry[1])))
        else:
            guard = ins("test", xa("is_eq_exact"), FLabel(loop), lst(atom("true"), atom("false")))
        out += [guard, mklabel(lab()), ins("loop_rec", FLabel(wait), X(0)),
                ins("jump", FLabel(body_label))]
    out += [mklabel(loop), ins("loop_rec", FLabel(wait), X(0))]
    if body_label:
        out.append(mklabel(body_label))
    out += _message_test(FLabel(nxt))
    out.append(ins("get_tuple_element", X(0), n(1), X(2)))
    done_test = ins("test", xa("is_eq_exact"), FLabel(false_), lst(X(2), atom("true")))
    if plan.exits == 1:
        out += [done_test, ins("remove_message"), ins("jump", FLabel(exits[0]))]
    else:
        odd = lab()
        out += [ins("bif", xa("band"), NOFAIL, lst(COUNTER_SLOT, integer(1)), X(3)),
                ins("test", xa("is_eq_exact"), FLabel(odd), lst(X(3), integer(0))),
                done_test, ins("remove_message"), ins("jump", FLabel(exits[0])),
                mklabel(odd), done_test, ins("remove_message"), ins("jump", FLabel(exits[1]))]
    comb = lst(ACC_SLOT, M_SLOT) if s.order == "acc_first" else lst(M_SLOT, ACC_SLOT)
    out += [mklabel(false_),
            ins("gc_bif", xa(s.op), NOFAIL, n(1), comb, X(1)),
            ins("move", X(1), ACC_SLOT),
            ins("gc_bif", xa("-"), NOFAIL, n(1), lst(M_SLOT, integer(s.step)), X(1)),
            ins("move", X(1), M_SLOT),
            ins("gc_bif", xa("+"), NOFAIL, n(1), lst(COUNTER_SLOT, integer(1)), X(1)),
            ins("move", X(1), COUNTER_SLOT)]
    # the unremoved message must be back in x0 for loop_rec_end
    out += _bound_test(s) + [ins("put_tuple", n(2), X(2)), ins("put", U_SLOT), ins("put", X(1)),
                             ins("move", X(0), SAVED_MESSAGE), ins("move", X(2), X(1)),
                             ins("move", SELF_SLOT, X(0)), ins("send"),
                             ins("move", SAVED_MESSAGE, X(0))]
    out += [mklabel(nxt), ins("loop_rec_end", FLabel(loop)), mklabel(wait)]
    if plan.waits:
        sites = [lab() for _ in plan.waits]
        main_wait = lab()
        table = []
        for j, l in enumerate(sites):
            table += [integer(j), FLabel(l)]
        out += [ins("select_val", COUNTER_SLOT, FLabel(main_wait), OperandList(tuple(table), tagged=True)),
                mklabel(main_wait), ins("wait", FLabel(loop))]
        for l, lit in zip(sites, plan.waits):
            out += [mklabel(l), ins("wait_timeout", FLabel(loop), integer(lit)), ins("timeout"),
                    ins("jump", FLabel(loop))]
    else:
        out.append(ins("wait", FLabel(loop)))
    for e in exits:
        out.append(mklabel(e))
        out += _cleanup(lab)
    return f.with_body(head + out)


# ---------------------------------------------------------------------------
# Recognition of the encoding


def _find(ops: list[Instruction], pattern, start: int = 0) -> int:
    for k in range(start, len(ops) - len(pattern) + 1):
        if all(p(ops[k + j]) for j, p in enumerate(pattern)):
            return k
    return -1


def _is(opcode, *operands):
    def check(i: Instruction):
        if i.opcode != opcode:
            return False
        return all(o is None or (len(i.operands) > j and i.operands[j] == o)
                   for j, o in enumerate(operands))
    return check


def recognize_receive_loop(f: FunctionDef) -> Optional[ReceivePlan]:
    """Invert :func:`encode_receive_loop`, conservatively.  None if no match."""
    stripped = _strip(f.body)
    ops = [i for _, i in stripped]
    labels = {label_of(i): p for p, i in enumerate(ops) if label_of(i) is not None}
    if f.entry not in labels:
        return None
    e = labels[f.entry] + 1
    prologue = ops[e:e + 8]
    if len(prologue) < 8:
        return None
    checks = [_is("allocate", n(FRAME)), _is("move", X(0), M_SLOT), None,
              _is("move", integer(0), COUNTER_SLOT), _is("call_ext", n(0),
                                                        ExtFunc("erlang", "unique_integer", 0)),
              _is("move", X(0), U_SLOT), _is("bif", xa("self")), _is("move", X(0), SELF_SLOT)]
    if not all(c is None or c(i) for c, i in zip(checks, prologue)):
        return None
    acc_init = prologue[2]
    if acc_init.opcode != "move" or acc_init.operands[1] != ACC_SLOT:
        return None
    if acc_init.operands[0] == X(1) and f.arity == 2:
        shape, base = "tail", None
    elif isinstance(acc_init.operands[0], IntOp) and acc_init.operands[0].tagged and f.arity == 1:
        shape, base = "body", acc_init.operands[0].value
    else:
        return None
    first = ops[e + 8]
    post_test = first == ins("move", atom("false"), X(1))
    # the continue path: accumulate, step, count, resend, loop_rec_end
    pattern = [_is("gc_bif"), _is("move", X(1), ACC_SLOT),
               _is("gc_bif", xa("-")), _is("move", X(1), M_SLOT),
               _is("gc_bif", xa("+"), NOFAIL, None, lst(COUNTER_SLOT, integer(1)), X(1)),
               _is("move", X(1), COUNTER_SLOT),
               _is("bif", xa("=:=")), _is("put_tuple", n(2), X(2)), _is("put", U_SLOT),
               _is("put", X(1)), _is("move", X(0), SAVED_MESSAGE), _is("move", X(2), X(1)),
               _is("move", SELF_SLOT, X(0)), _is("send"), _is("move", SAVED_MESSAGE, X(0)),
               lambda i: i.opcode == "label", _is("loop_rec_end")]
    k = _find(ops, pattern, e)
    if k < 0:
        return None
    comb, dec, cond = ops[k], ops[k + 2], ops[k + 6]
    op = comb.operands[0].name
    cargs = comb.operands[3].items
    if cargs == (ACC_SLOT, M_SLOT):
        order = "acc_first"
    elif cargs == (M_SLOT, ACC_SLOT):
        order = "elem_first"
    else:
        return None
    d_args = dec.operands[3].items
    c_args = cond.operands[2].items
    if (d_args[0] != M_SLOT or not isinstance(d_args[1], IntOp) or c_args[0] != M_SLOT
            or not isinstance(c_args[1], IntOp)):
        return None
    if (shape == "body" and op not in COMMUTATIVE_OPS) or op not in TAIL_OPS:
        return None
    # the loop is the loop_rec whose back edge closes the continue path
    loop_label = ops[k + 16].operands[0].label
    lr = labels.get(loop_label)
    if lr is None or ops[lr + 1].opcode != "loop_rec":
        return None
    main_wait = ops[lr + 1].operands[0].label
    loop_recs = [p for p, i in enumerate(ops)
                 if i.opcode == "loop_rec" and i.operands[0].label == main_wait]
    second = None
    if len(loop_recs) == 2:
        g = ops[loop_recs[0] - 2]
        if g.opcode == "test" and g.operands[0] == xa("is_lt"):
            second = ("lt", g.operands[2].items[1].value)
        elif g.opcode == "test" and g.operands[0] == xa("is_eq_exact"):
            second = ("false",)
        else:
            return None
    elif len(loop_recs) != 1:
        return None
    region = ops[lr:k]
    exits = sum(i.opcode == "remove_message" for i in region)
    if exits not in (1, 2):
        return None
    waits = tuple(i.operands[1].value for i in ops[k:] if i.opcode == "wait_timeout"
                  and i.operands[0].label == loop_label)
    cleanups = _find(ops, [_is("move", ACC_SLOT, X(0)), _is("deallocate", n(FRAME)), _is("return")], k)
    if cleanups < 0:
        return None
    sites = [stripped[j][0] for j in (k, k + 2, k + 6)]
    schema = LoopSchema(f.name, f.arity, shape, op, order, d_args[1].value, c_args[1].value, base,
                        bound_site=sites[2], condition_site=sites[2], step_sites=(sites[1],))
    return ReceivePlan(schema, post_test, exits, second, waits)
