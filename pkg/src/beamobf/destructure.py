from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Optional, Union

from .cfg import BasicBlock, Cfg, _rpo, _sccs, build_cfg, dominators
from .asmir import (PLAIN, FunctionDef, Instruction, IntOp, ModuleAsm, X, decode_instruction,
                    construction_spans, encode_instruction)
from .recvloop import LoopSchema, ReceivePlan, recognize_receive_loop, rebuild_from_schema
from .sterm import Atom, format_atom, format_term, parse_term
from .vlite import effect, liveness_report

# ---------------------------------------------------------------------------
# Construction normalisation

HOISTABLE = frozenset({"move", "init", "kill"})


def _conflicts(a: Instruction, b: Instruction) -> bool:
    ea, eb = effect(a), effect(b)
    da, db = set(ea.defs), set(eb.defs)
    return bool(da & (set(eb.uses) | db) or set(ea.uses) & db)


def _fold_size(f: FunctionDef) -> Optional[FunctionDef]:
    """Fold one constant routed into a dead size register back into its bs_init."""
    spans, _ = construction_spans(f)
    live = None
    for span in spans:
        r = span.size_register
        if span.kind != "binary" or not isinstance(r, X):
            continue
        head = f.body[span.head]
        if any(r in effect(f.body[j]).uses for j in span.members):
            continue
        k = span.head - 1
        while k >= 0:
            i = f.body[k]
            if i.klass != PLAIN:
                break
            e = effect(i)
            if r in e.defs:
                break
            if r in e.uses:
                k = -1
                break
            k -= 1
        if k < 0:
            continue
        mv = f.body[k]
        if not (mv.opcode == "move" and mv.operands[1] == r and isinstance(mv.operands[0], IntOp)):
            continue
        if live is None:
            live = liveness_report(f)
        after = span.head + 1
        if after < len(f.body) and r in live[after]:
            continue
        ops = list(head.operands)
        ops[1] = IntOp(mv.operands[0].value, tagged=False)
        body = list(f.body)
        body[span.head] = Instruction(head.opcode, tuple(ops))
        del body[k]
        return f.with_body(body)
    return None


def _hoist_one(f: FunctionDef, report: list) -> Optional[FunctionDef]:
    spans, _ = construction_spans(f)
    for span in spans:
        order = sorted((span.head,) + span.members + span.foreign)
        for q in span.foreign:
            i = f.body[q]
            before = [f.body[p] for p in order if p < q]
            why = None
            if i.opcode not in HOISTABLE:
                why = f"{i.opcode} is not a benign instruction"
            else:
                for p in before:
                    if _conflicts(i, p):
                        why = f"depends on {p.opcode}"
                        break
            if why is not None:
                note = f"{f.name}/{f.arity}: span at {span.head} keeps {i} ({why})"
                if note not in report:
                    report.append(note)
                continue
            body = list(f.body)
            del body[q]
            body.insert(span.head, i)
            return f.with_body(body)
    return None


def normalize_function(f: FunctionDef, report: Optional[list] = None) -> FunctionDef:
    report = [] if report is None else report
    while True:
        g = _fold_size(f)
        if g is None:
            g = _hoist_one(f, report)
        if g is None:
            return f
        f = g


def normalize_report(m: ModuleAsm) -> tuple[ModuleAsm, list[str]]:
    """Normalised module plus notes on foreign instructions left in spans."""
    report: list[str] = []
    funcs = tuple(normalize_function(f, report) for f in m.functions)
    return replace(m, functions=funcs), report


def normalize_constructions(m: ModuleAsm) -> ModuleAsm:
    """Hoist provably independent instructions out of construction spans."""
    return normalize_report(m)[0]


# ---------------------------------------------------------------------------
# Receive-loop recovery

EXACT_SCHEMA = "exact_schema"
STRUCTURED_ONLY = "structured_only"


@dataclass(frozen=True)
class Recovery:
    schema: LoopSchema
    plan: ReceivePlan
    notes: tuple = ()


def recover_receive_loop(f: FunctionDef) -> Optional[Recovery]:
    """The recursion schema behind a receive-encoded loop, or None."""
    plan = recognize_receive_loop(f)
    if plan is None:
        return None
    notes = []
    if plan.exits == 2:
        notes.append("exit-merge: two parity-selected exits merged into one")
    if plan.second_entry is not None:
        notes.append("entry-merge: second loop entry removed")
    if plan.waits:
        notes.append(f"dropped {len(plan.waits)} redundant wait_timeout site(s)")
    if plan.post_test:
        notes.append("post-test loop restored as pre-test recursion")
    return Recovery(plan.schema, plan, tuple(notes))


def recover_module(m: ModuleAsm) -> tuple[ModuleAsm, list]:
    """Rebuild every recognised receive loop as plain recursion.

    Returns the module and a fidelity report, one ``{{Name,Arity},Level}``
    term per function.
    """
    report = []
    for f in m.functions:
        rec = recover_receive_loop(f)
        if rec is None:
            report.append(((Atom(f.name), f.arity), Atom(STRUCTURED_ONLY)))
            continue
        g = rebuild_from_schema(f, rec.schema, m.max_label() + 1)
        m = m.replace_function(g)
        report.append(((Atom(f.name), f.arity), Atom(EXACT_SCHEMA)))
    return m, report


# ---------------------------------------------------------------------------
# Pseudo language


@dataclass(frozen=True)
class PBlock:
    block: int
    instrs: tuple


@dataclass(frozen=True)
class PSeq:
    items: tuple


@dataclass(frozen=True)
class PLoop:
    name: str
    body: "PExpr"


@dataclass(frozen=True)
class PLabeled:
    name: str
    body: "PExpr"


@dataclass(frozen=True)
class PBreak:
    name: str


@dataclass(frozen=True)
class PContinue:
    name: str


@dataclass(frozen=True)
class PIf:
    subject: tuple          # ("exit", block) or ("var", name)
    value: int
    then: "PExpr"
    else_: "PExpr"


@dataclass(frozen=True)
class PCase:
    subject: tuple
    arms: tuple             # ((value, body), ...)


@dataclass(frozen=True)
class PSet:
    var: str
    value: int


@dataclass(frozen=True)
class PSchema:
    """A recovered recursion, rendered as a self-recursive helper."""
    name: str
    arity: int
    shape: str
    op: str
    order: str
    step: int
    bound: int
    base: Optional[int]


PExpr = Union[PBlock, PSeq, PLoop, PLabeled, PBreak, PContinue, PIf, PCase, PSet, PSchema]


@dataclass(frozen=True)
class PFunction:
    name: str
    arity: int
    body: PExpr
    dead: tuple = ()        # PBlocks unreachable from the entry


def seq(*items) -> PExpr:
    """Flattened sequence; a single item stands for itself."""
    flat = []
    for it in items:
        if isinstance(it, PSeq):
            flat.extend(it.items)
        elif it is not None:
            flat.append(it)
    return flat[0] if len(flat) == 1 else PSeq(tuple(flat))


def schema_expr(s: LoopSchema) -> PSchema:
    return PSchema(s.name, s.arity, s.shape, s.op, s.order, s.step, s.bound, s.base)


HEADER = "%% pseudo-source: Erlang-flavoured for review, not compilable Erlang"


def _fmt_instr(i: Instruction) -> str:
    t = encode_instruction(i)
    if isinstance(t, Atom):
        return f"{format_atom(t.name)}()"
    return f"{format_atom(t[0].name)}({', '.join(format_term(a) for a in t[1:])})"


def _fmt_subject(s: tuple) -> str:
    return f"exit(b{s[1]})" if s[0] == "exit" else s[1]


def _fmt_value(s: tuple, v: int) -> str:
    return f"b{v}" if s[0] == "exit" else str(v)


def _schema_lines(p: PSchema) -> list[str]:
    head = format_term((Atom(p.shape), Atom(p.op), Atom(p.order), p.step, p.bound,
                        Atom("none") if p.base is None else p.base))
    name = format_atom(p.name)
    helper = format_atom(p.name + "_rec")

    def comb(a, b):
        return f"{a} {p.op} {b}"

    lines = [f"recursion {name}/{p.arity} {head} ->"]
    if p.shape == "body":
        rec = f"{helper}(N - {p.step})"
        expr = comb("N", rec) if p.order == "elem_first" else comb(rec, "N")
        lines += [f"  {name}(N) -> {helper}(N).",
                  f"  {helper}({p.bound}) -> {p.base};",
                  f"  {helper}(N) -> {expr}."]
    else:
        acc = comb("Acc", "N") if p.order == "acc_first" else comb("N", "Acc")
        lines += [f"  {name}(N, Acc) -> {helper}(N, Acc).",
                  f"  {helper}({p.bound}, Acc) -> Acc;",
                  f"  {helper}(N, Acc) -> {helper}(N - {p.step}, {acc})."]
    return lines + ["end"]


def _emit(p: PExpr, ind: int, out: list):
    pad = "  " * ind
    if isinstance(p, PSeq):
        for it in p.items:
            _emit(it, ind, out)
    elif isinstance(p, PBlock):
        out.extend(f"{pad}b{p.block}: {_fmt_instr(i)}" for i in p.instrs)
        if not p.instrs:
            out.append(f"{pad}b{p.block}: skip")
    elif isinstance(p, (PLoop, PLabeled)):
        out.append(f"{pad}{'loop' if isinstance(p, PLoop) else 'block'} {p.name} ->")
        _emit(p.body, ind + 1, out)
        out.append(f"{pad}end")
    elif isinstance(p, PBreak):
        out.append(f"{pad}break {p.name}")
    elif isinstance(p, PContinue):
        out.append(f"{pad}continue {p.name}")
    elif isinstance(p, PIf):
        out.append(f"{pad}if {_fmt_subject(p.subject)} =:= {_fmt_value(p.subject, p.value)} ->")
        _emit(p.then, ind + 1, out)
        out.append(f"{pad}true ->")
        _emit(p.else_, ind + 1, out)
        out.append(f"{pad}end")
    elif isinstance(p, PCase):
        out.append(f"{pad}case {_fmt_subject(p.subject)} of")
        for v, body in p.arms:
            out.append(f"{pad}  {_fmt_value(p.subject, v)} ->")
            _emit(body, ind + 2, out)
        out.append(f"{pad}end")
    elif isinstance(p, PSet):
        out.append(f"{pad}{p.var} = {p.value}")
    elif isinstance(p, PSchema):
        out.extend(pad + line for line in _schema_lines(p))
    else:
        raise TypeError(f"not a pseudo expression: {p!r}")


def emit_pseudo_source(p: Union[PFunction, PExpr, list]) -> str:
    """Render functions (or a bare expression) as pseudo-source text."""
    funcs = p if isinstance(p, list) else [p]
    out = [HEADER]
    for fn in funcs:
        if not isinstance(fn, PFunction):
            _emit(fn, 0, out)
            continue
        out.append(f"function {format_atom(fn.name)}/{fn.arity} ->")
        _emit(fn.body, 1, out)
        if fn.dead:
            out.append("dead ->")
            for b in fn.dead:
                _emit(b, 1, out)
        out.append("end.")
    return "\n".join(out) + "\n"


class PseudoSyntaxError(ValueError):
    pass


_ATOM = r"(?:'(?:[^'\\]|\\.)*'|[a-z][A-Za-z0-9_@]*)"
_SKIP = re.compile(r"b(\d+): skip\Z")
_LEAF = re.compile(rf"b(\d+): ({_ATOM})\((.*)\)\Z")
_VALUE = r"(b\d+|-?\d+)"
_SUBJ = r"(exit\(b\d+\)|[A-Z][A-Za-z0-9_]*)"
_IF = re.compile(rf"if {_SUBJ} =:= {_VALUE} ->\Z")
_CASE = re.compile(rf"case {_SUBJ} of\Z")
_ARM = re.compile(rf"{_VALUE} ->\Z")
_SET = re.compile(r"([A-Z][A-Za-z0-9_]*) = (-?\d+)\Z")
_FUNC = re.compile(rf"function ({_ATOM})/(\d+) ->\Z")
_REC = re.compile(rf"recursion ({_ATOM})/(\d+) (\{{.*\}}) ->\Z")
_NAME = r"([A-Za-z_][A-Za-z0-9_]*)"


def _atom_text(s: str) -> str:
    return parse_term(s).name


def _subject(s: str) -> tuple:
    return ("exit", int(s[6:-1])) if s.startswith("exit(") else ("var", s)


def _value(s: str) -> int:
    return int(s[1:]) if s.startswith("b") else int(s)


class _PseudoParser:
    def __init__(self, text: str):
        self.lines = [ln.strip() for ln in text.splitlines()]
        self.lines = [ln for ln in self.lines if ln and not ln.startswith("%")]
        self.k = 0

    def peek(self) -> Optional[str]:
        return self.lines[self.k] if self.k < len(self.lines) else None

    def take(self) -> str:
        ln = self.peek()
        if ln is None:
            raise PseudoSyntaxError("unexpected end of pseudo-source")
        self.k += 1
        return ln

    def expect(self, s: str):
        ln = self.take()
        if ln != s:
            raise PseudoSyntaxError(f"expected {s!r}, got {ln!r}")

    def stmts(self) -> PExpr:
        items = []
        while True:
            ln = self.peek()
            if ln is None or ln in ("end", "end.", "true ->", "dead ->") or _ARM.match(ln):
                return seq(*items) if items else PSeq(())
            items.append(self.stmt())

    def stmt(self) -> PExpr:
        ln = self.take()
        m = _SKIP.match(ln)
        if m:
            return PBlock(int(m.group(1)), ())
        m = _LEAF.match(ln)
        if m:
            block = int(m.group(1))
            instrs = [self._instr(m)]
            while self.peek() is not None:
                m2 = _LEAF.match(self.peek())
                if not m2 or int(m2.group(1)) != block:
                    break
                self.k += 1
                instrs.append(self._instr(m2))
            return PBlock(block, tuple(instrs))
        for kw, cls in (("loop", PLoop), ("block", PLabeled)):
            m = re.match(rf"{kw} {_NAME} ->\Z", ln)
            if m:
                body = self.stmts()
                self.expect("end")
                return cls(m.group(1), body)
        for kw, cls in (("break", PBreak), ("continue", PContinue)):
            m = re.match(rf"{kw} {_NAME}\Z", ln)
            if m:
                return cls(m.group(1))
        m = _IF.match(ln)
        if m:
            then = self.stmts()
            self.expect("true ->")
            else_ = self.stmts()
            self.expect("end")
            return PIf(_subject(m.group(1)), _value(m.group(2)), then, else_)
        m = _CASE.match(ln)
        if m:
            arms = []
            while self.peek() != "end":
                a = _ARM.match(self.take() or "")
                if not a:
                    raise PseudoSyntaxError(f"bad case arm in {ln!r}")
                arms.append((_value(a.group(1)), self.stmts()))
            self.expect("end")
            return PCase(_subject(m.group(1)), tuple(arms))
        m = _SET.match(ln)
        if m:
            return PSet(m.group(1), int(m.group(2)))
        m = _REC.match(ln)
        if m:
            shape, op, order, step, bound, base = parse_term(m.group(3))
            while self.take() != "end":
                pass
            return PSchema(_atom_text(m.group(1)), int(m.group(2)), shape.name, op.name,
                           order.name, step, bound, None if isinstance(base, Atom) else base)
        raise PseudoSyntaxError(f"unrecognised pseudo-source line {ln!r}")

    def _instr(self, m) -> Instruction:
        args = m.group(3)
        text = "{" + m.group(2) + ("," + args if args else "") + "}"
        t = parse_term(text)
        return decode_instruction(t if args else t[0])

    def document(self):
        out = []
        while self.peek() is not None:
            m = _FUNC.match(self.peek())
            if not m:
                out.append(self.stmts())
                if self.peek() is not None and not _FUNC.match(self.peek()):
                    raise PseudoSyntaxError(f"unexpected line {self.peek()!r}")
                continue
            self.k += 1
            body = self.stmts()
            dead = []
            if self.peek() == "dead ->":
                self.k += 1
                while self.peek() != "end.":
                    b = self.stmt()
                    if not isinstance(b, PBlock):
                        raise PseudoSyntaxError("only blocks may follow 'dead ->'")
                    dead.append(b)
            self.expect("end.")
            out.append(PFunction(_atom_text(m.group(1)), int(m.group(2)), body, tuple(dead)))
        return out


def parse_pseudo_source(text: str):
    """Inverse of :func:`emit_pseudo_source`; returns one item or a list."""
    out = _PseudoParser(text).document()
    return out[0] if len(out) == 1 else out


# ---------------------------------------------------------------------------
# Structuring


DUPLICATE = "duplicate"
CONDITION_VARIABLES = "condition-variables"
STRATEGIES = (DUPLICATE, CONDITION_VARIABLES)
DEFAULT_CAP = 8


class StructuringError(ValueError):
    pass


@dataclass
class _Node:
    kind: str               # "block" | "set" | "dispatch"
    block: int = -1
    var: str = ""
    value: int = 0
    succ: dict = None       # key -> node id; key is an exit block id or a dispatch value


class _Graph:
    def __init__(self, c: Cfg):
        self.cfg = c
        self.nodes: dict[int, _Node] = {}
        for b in c.reachable():
            self.nodes[b] = _Node("block", block=b, succ={s: s for s in c.successors(b)})
        self.entry = c.entry
        self.next = max(self.nodes) + 1

    def add(self, node: _Node) -> int:
        nid = self.next
        self.next += 1
        self.nodes[nid] = node
        return nid

    def succ(self, n: int) -> list[int]:
        return list(dict.fromkeys(self.nodes[n].succ.values()))

    def preds(self) -> dict[int, list[int]]:
        out = {n: [] for n in self.nodes}
        for n in self.nodes:
            for s in self.succ(n):
                out[s].append(n)
        return out

    def reachable(self) -> list[int]:
        return _rpo(list(self.nodes), self.succ, self.entry)

    def prune(self):
        keep = set(self.reachable())
        self.nodes = {n: v for n, v in self.nodes.items() if n in keep}

    def multi_entry_region(self) -> Optional[tuple[list[int], list[int]]]:
        """The outermost strongly connected region with two or more entries."""
        preds = self.preds()

        def search(region: list[int], cut: set):
            def succ(n):
                return [s for s in self.succ(n) if (n, s) not in cut]

            for comp in _sccs(sorted(region), succ):
                members = set(comp)
                if len(comp) == 1 and comp[0] not in succ(comp[0]):
                    continue
                headers = sorted(n for n in comp if n == self.entry
                                 or any(p not in members for p in preds[n]))
                if len(headers) > 1:
                    return comp, headers
                inner = {(a, h) for a in comp for h in succ(a) if h in headers}
                found = search(comp, cut | inner)
                if found:
                    return found
            return None

        return search(self.reachable(), set())


def _split_nodes(g: _Graph, limit: int):
    """Node splitting: copy the part of the region each secondary entry reaches."""
    while True:
        found = g.multi_entry_region()
        if found is None:
            return
        comp, headers = found
        members = set(comp)
        order = {n: k for k, n in enumerate(g.reachable())}
        primary = g.entry if g.entry in headers else min(headers, key=order.get)
        for h in headers:
            if h == primary:
                continue
            region, stack = {h}, [h]
            while stack:
                n = stack.pop()
                for s in g.succ(n):
                    if s in members and s != primary and s not in region:
                        region.add(s)
                        stack.append(s)
            copies = {}
            for n in sorted(region):
                copies[n] = g.add(replace(g.nodes[n], succ=dict(g.nodes[n].succ)))
            for n, c in copies.items():
                g.nodes[c].succ = {k: copies.get(t, t) for k, t in g.nodes[n].succ.items()}
            for p in list(g.nodes):
                if p in members or p in copies.values():
                    continue
                node = g.nodes[p]
                node.succ = {k: copies[h] if t == h else t for k, t in node.succ.items()}
            if len(g.nodes) > limit:
                raise StructuringError(f"node splitting exceeded the cap of {limit} nodes")
        g.prune()


def _add_dispatch(g: _Graph):
    """Route every entry of a multi-entry region through one dispatch variable."""
    k = 0
    while True:
        found = g.multi_entry_region()
        if found is None:
            return
        comp, headers = found
        members = set(comp)
        k += 1
        var = f"Dispatch{k}"
        index = {h: v for v, h in enumerate(headers)}
        d = g.add(_Node("dispatch", var=var, succ={v: h for h, v in index.items()}))
        setters: dict[tuple[int, bool], int] = {}

        def setter(h, inside):
            if (h, inside) not in setters:
                setters[(h, inside)] = g.add(_Node("set", var=var, value=index[h], succ={0: d}))
            return setters[(h, inside)]

        for p in [q for q in g.nodes if q != d]:
            node = g.nodes[p]
            node.succ = {key: setter(t, p in members) if t in index else t
                         for key, t in node.succ.items()}
        if g.entry in index:
            g.entry = setter(g.entry, False)
        g.prune()


def _block_expr(f: FunctionDef, b: BasicBlock) -> PBlock:
    # an unconditional jump is carried by the structure around the leaf
    return PBlock(b.id, tuple(i for i in f.body[b.start:b.end] if i.opcode != "jump"))


class _Ramsey:
    """Dominator-tree structuring with named blocks, loops, breaks and continues."""

    def __init__(self, g: _Graph, f: FunctionDef):
        self.g, self.f = g, f
        order = g.reachable()
        self.rpo = {n: k for k, n in enumerate(order)}
        preds = g.preds()
        idom = dominators(order, g.succ, lambda n: preds[n], g.entry)
        self.children = {n: [] for n in order}
        for n in order:
            if n != g.entry:
                self.children[idom[n]].append(n)
        self.headers = {s for n in order for s in g.succ(n) if self.rpo[s] <= self.rpo[n]}
        self.merges = {n for n in order
                       if sum(1 for p in preds[n] if self.rpo[p] < self.rpo[n]) >= 2}

    def tree(self, x: int) -> PExpr:
        ys = sorted((c for c in self.children[x] if c in self.merges),
                    key=self.rpo.get, reverse=True)
        code = self.within(x, ys)
        return PLoop(f"head{x}", code) if x in self.headers else code

    def within(self, x: int, ys: list[int]) -> PExpr:
        if ys:
            y = ys[0]
            return seq(PLabeled(f"after{y}", self.within(x, ys[1:])), self.tree(y))
        node = self.g.nodes[x]
        if node.kind == "block":
            leaf = _block_expr(self.f, self.g.cfg.blocks[node.block])
            subject = ("exit", node.block)
        elif node.kind == "set":
            leaf = PSet(node.var, node.value)
            subject = None
        else:
            leaf = None
            subject = ("var", node.var)
        arms = [(key, self.branch(x, t)) for key, t in sorted(node.succ.items())]
        if not arms:
            return leaf
        if len(set(t for t in node.succ.values())) == 1 and node.kind != "dispatch":
            return seq(leaf, arms[0][1])
        if len(arms) == 2:
            return seq(leaf, PIf(subject, arms[0][0], arms[0][1], arms[1][1]))
        return seq(leaf, PCase(subject, tuple(arms)))

    def branch(self, x: int, y: int) -> PExpr:
        if self.rpo[y] <= self.rpo[x]:
            return PContinue(f"head{y}")
        if y in self.merges:
            return PBreak(f"after{y}")
        return self.tree(y)


def structure_function(f: FunctionDef, strategy: str = DUPLICATE, cap: float = DEFAULT_CAP,
                       unmerge_tails: bool = False) -> PFunction:
    """Goto-free pseudo expression for ``f``.

    Irreducible regions are made reducible by node splitting (``duplicate``,
    bounded by ``cap`` times the block count) or by a dispatch variable per
    region (``condition-variables``).  ``unmerge_tails`` gives each
    predecessor of a shared returning block its own copy.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown structuring strategy {strategy!r}")
    c = build_cfg(f, split_tests=True)
    g = _Graph(c)
    if unmerge_tails:
        _unmerge_tails(g)
    if strategy == DUPLICATE:
        _split_nodes(g, int(cap * len(c.reachable())))
    else:
        _add_dispatch(g)
    body = _Ramsey(g, f).tree(g.entry)
    live = set(c.reachable())
    dead = tuple(_block_expr(f, b) for b in c.blocks if b.id not in live)
    return PFunction(f.name, f.arity, body, dead)


def _unmerge_tails(g: _Graph):
    preds = g.preds()
    for n in list(g.nodes):
        if g.nodes[n].succ or len(preds[n]) < 2:
            continue
        for p in preds[n][1:]:
            c = g.add(replace(g.nodes[n], succ={}))
            node = g.nodes[p]
            node.succ = {k: c if t == n else t for k, t in node.succ.items()}


def structure_module(m: ModuleAsm, strategy: str = DUPLICATE, cap: float = DEFAULT_CAP):
    """Pseudo functions plus fidelity report; recognised receive loops become helpers."""
    out, report = [], []
    for f in m.functions:
        rec = recover_receive_loop(f)
        if rec is not None:
            out.append(PFunction(f.name, f.arity, schema_expr(rec.schema)))
            report.append(((Atom(f.name), f.arity), Atom(EXACT_SCHEMA)))
        else:
            out.append(structure_function(f, strategy, cap))
            report.append(((Atom(f.name), f.arity), Atom(STRUCTURED_ONLY)))
    return out, report


def walk(p):
    """Every sub-expression of ``p``, preorder."""
    if isinstance(p, PFunction):
        yield from walk(p.body)
        for b in p.dead:
            yield b
        return
    yield p
    if isinstance(p, PSeq):
        for it in p.items:
            yield from walk(it)
    elif isinstance(p, (PLoop, PLabeled)):
        yield from walk(p.body)
    elif isinstance(p, PIf):
        yield from walk(p.then)
        yield from walk(p.else_)
    elif isinstance(p, PCase):
        for _, body in p.arms:
            yield from walk(body)


def unstructured_jumps(p) -> list:
    """Breaks/continues that do not target an enclosing block/loop."""
    bad = []

    def go(e, blocks, loops):
        if isinstance(e, PFunction):
            go(e.body, blocks, loops)
        elif isinstance(e, PSeq):
            for it in e.items:
                go(it, blocks, loops)
        elif isinstance(e, PLoop):
            go(e.body, blocks, loops | {e.name})
        elif isinstance(e, PLabeled):
            go(e.body, blocks | {e.name}, loops)
        elif isinstance(e, PIf):
            go(e.then, blocks, loops)
            go(e.else_, blocks, loops)
        elif isinstance(e, PCase):
            for _, body in e.arms:
                go(body, blocks, loops)
        elif isinstance(e, PBreak) and e.name not in blocks:
            bad.append(e)
        elif isinstance(e, PContinue) and e.name not in loops:
            bad.append(e)

    go(p, frozenset(), frozenset())
    return bad


# ---------------------------------------------------------------------------
# Pseudo interpreter (a test oracle)


class PseudoRuntimeError(RuntimeError):
    pass


class _Stop(Exception):
    def __init__(self, result):
        self.result = result


def interpret(m: ModuleAsm, p: PFunction, args, fuel: int = 1_000_000):
    """Run a structured function, executing its blocks on the emulator.

    The emulator must arrive at each block exactly where the structured
    control flow says it should; a mismatch raises PseudoRuntimeError.
    """
    from .miniemu import Emulator, EmuFault, Halt

    f = m.function(p.name, p.arity)
    c = build_cfg(f, split_tests=True)
    emu = Emulator(m, fuel=fuel)
    key = f.key
    base = emu.entry_pc[key] - f.labels()[f.entry]
    emu.start(p.name, p.arity, list(args))
    depth = len(emu.cstack)
    exits: dict[int, int] = {}
    env: dict[str, int] = {}

    def finish():
        try:
            while True:
                emu.step()
        except (Halt, EmuFault) as e:
            raise _Stop(emu.result(e))

    def run_block(b: PBlock):
        blk = c.blocks[b.block]
        if emu.pc != base + blk.start:
            raise PseudoRuntimeError(f"expected to enter block {b.block} of {p.name}/{p.arity}")
        try:
            while True:
                emu.step()
                pc = emu.pc
                if len(emu.cstack) == depth and not (base + blk.start < pc < base + blk.end):
                    break
                if len(emu.cstack) < depth:
                    break
        except (Halt, EmuFault) as e:
            raise _Stop(emu.result(e))
        k = emu.pc - base
        if len(emu.cstack) != depth or not 0 <= k < len(f.body) or emu.where[emu.pc][0] != key:
            finish()
        target = c.block_of[k]
        if target not in c.successors(b.block) or c.blocks[target].start != k:
            finish()
        exits[b.block] = target

    def subject(s):
        if s[0] == "exit":
            return exits.get(s[1])
        return env.get(s[1])

    def ex(e):
        if isinstance(e, PSeq):
            for it in e.items:
                sig = ex(it)
                if sig is not None:
                    return sig
            return None
        if isinstance(e, PBlock):
            run_block(e)
            return None
        if isinstance(e, PSet):
            env[e.var] = e.value
            return None
        if isinstance(e, PLoop):
            while True:
                sig = ex(e.body)
                if sig != ("continue", e.name):
                    return sig
        if isinstance(e, PLabeled):
            sig = ex(e.body)
            return None if sig == ("break", e.name) else sig
        if isinstance(e, PBreak):
            return ("break", e.name)
        if isinstance(e, PContinue):
            return ("continue", e.name)
        if isinstance(e, PIf):
            return ex(e.then if subject(e.subject) == e.value else e.else_)
        if isinstance(e, PCase):
            v = subject(e.subject)
            for val, body in e.arms:
                if val == v:
                    return ex(body)
            raise PseudoRuntimeError(f"no case arm for {v!r}")
        raise PseudoRuntimeError(f"cannot interpret {type(e).__name__}")

    try:
        ex(p.body)
        finish()
    except _Stop as s:
        return s.result
