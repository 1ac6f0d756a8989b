"""Per-function control-flow graphs, receive/try/catch regions and loop structure."""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .asmir import (FLabel, FunctionDef, Instruction, NO_SUCCESSOR, Y,
                    label_of)

NORMAL, FAIL, BACK, TIMEOUT, EXCEPTION = "normal", "fail", "back", "timeout", "exception"
EDGE_KINDS = (NORMAL, FAIL, BACK, TIMEOUT, EXCEPTION)

# instructions after which a new block always starts
_ENDERS = frozenset(NO_SUCCESSOR | {"jump", "select_val", "select_tuple_arity", "func_info",
                                    "loop_rec_end", "wait", "wait_timeout"})
_FAILABLE = frozenset({"bif", "gc_bif", "bs_start_match4"})
_CATCH_CLOSERS = {"catch": frozenset({"catch_end"}), "try": frozenset({"try_end", "try_case"})}


class CfgError(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kind: str


@dataclass
class BasicBlock:
    id: int
    labels: tuple
    start: int
    end: int            # exclusive
    terminator: str

    @property
    def indices(self) -> range:
        return range(self.start, self.end)


@dataclass
class Cfg:
    function: FunctionDef
    blocks: list
    edges: list
    entry: int
    block_of: list
    split_tests: bool = False
    _succ: dict = field(default=None, repr=False)
    _pred: dict = field(default=None, repr=False)
    _refined: Optional["Cfg"] = field(default=None, repr=False)

    def _adjacency(self):
        if self._succ is None:
            self._succ = {b.id: [] for b in self.blocks}
            self._pred = {b.id: [] for b in self.blocks}
            for e in self.edges:
                if e.dst not in self._succ[e.src]:
                    self._succ[e.src].append(e.dst)
                if e.src not in self._pred[e.dst]:
                    self._pred[e.dst].append(e.src)

    def successors(self, b: int) -> list[int]:
        self._adjacency()
        return self._succ[b]

    def predecessors(self, b: int) -> list[int]:
        self._adjacency()
        return self._pred[b]

    def block_at_label(self, label: int) -> int:
        return self.block_of[self.function.labels()[label]]

    def reachable(self) -> list[int]:
        seen, order, stack = {self.entry}, [], [self.entry]
        while stack:
            b = stack.pop()
            order.append(b)
            for s in self.successors(b):
                if s not in seen:
                    seen.add(s)
                    stack.append(s)
        return sorted(order)

    def refined(self) -> "Cfg":
        """The same function with every branching instruction ending a block."""
        if self.split_tests:
            return self
        if self._refined is None:
            self._refined = build_cfg(self.function, split_tests=True)
        return self._refined


# ---------------------------------------------------------------------------
# Instruction-level successors


def _target(labels: dict, fl: FLabel, where: int) -> int:
    if fl.label not in labels:
        raise CfgError(f"instruction {where} jumps to undefined label {fl.label}")
    return labels[fl.label]


def instr_successors(f: FunctionDef) -> list[list[tuple[int, str]]]:
    """For each body index, the (target index, edge kind) pairs leaving it."""
    labels = f.labels()
    n = len(f.body)
    out: list[list[tuple[int, str]]] = []
    for k, i in enumerate(f.body):
        op = i.opcode
        nxt = [(k + 1, NORMAL)] if k + 1 < n else []
        if i.opaque or op == "func_info" or op in NO_SUCCESSOR:
            out.append([])
        elif op == "test":
            out.append([(_target(labels, i.operands[1], k), FAIL)] + nxt)
        elif op in _FAILABLE:
            fail = i.operands[0] if op == "bs_start_match4" else i.operands[1]
            if isinstance(fail, FLabel) and fail.label:
                out.append([(_target(labels, fail, k), FAIL)] + nxt)
            else:
                out.append(nxt)
        elif op == "loop_rec":
            out.append([(_target(labels, i.operands[0], k), FAIL)] + nxt)
        elif op in ("loop_rec_end", "wait"):
            out.append([(_target(labels, i.operands[0], k), BACK)])
        elif op == "wait_timeout":
            out.append([(_target(labels, i.operands[0], k), BACK)]
                       + [(t, TIMEOUT) for t, _ in nxt])
        elif op == "jump":
            out.append([(_target(labels, i.operands[0], k), NORMAL)])
        elif op in ("select_val", "select_tuple_arity"):
            succ = [(_target(labels, i.operands[1], k), FAIL)]
            for op_ in i.operands[2].items:
                if isinstance(op_, FLabel):
                    t = (_target(labels, op_, k), NORMAL)
                    if t not in succ:
                        succ.append(t)
            out.append(succ)
        else:
            out.append(nxt)
        for t, _ in out[-1]:
            if not 0 <= t < n:
                raise CfgError(f"instruction {k} falls off the end of {f.name}/{f.arity}")
    return out


def _slot(i: Instruction) -> Optional[int]:
    op = i.operands[0] if i.operands else None
    return op.index if isinstance(op, Y) else None


def exception_sites(f: FunctionDef, succ=None) -> dict[int, list[int]]:
    """Map each instruction index inside a catch/try region to its handler indices."""
    succ = succ if succ is not None else instr_successors(f)
    labels = f.labels()
    out: dict[int, list[int]] = defaultdict(list)
    for k, i in enumerate(f.body):
        if i.opcode not in _CATCH_CLOSERS:
            continue
        handler = labels.get(i.operands[1].label)
        if handler is None:
            raise CfgError(f"{i.opcode} at {k} names undefined label {i.operands[1].label}")
        closers, y = _CATCH_CLOSERS[i.opcode], _slot(i)
        seen, stack = set(), [t for t, _ in succ[k]]
        while stack:
            s = stack.pop()
            if s in seen:
                continue
            seen.add(s)
            j = f.body[s]
            if s == handler or (j.opcode in closers and _slot(j) == y):
                continue
            if handler not in out[s]:
                out[s].append(handler)
            stack.extend(t for t, _ in succ[s])
    return dict(out)


# ---------------------------------------------------------------------------
# Blocks


def _terminator(i: Instruction, nsucc: int) -> str:
    op = i.opcode
    if op == "jump":
        return "jump"
    if op in ("select_val", "select_tuple_arity"):
        return "select"
    if op in ("call_only", "call_last", "call_ext_only", "call_ext_last"):
        return "call-exit"
    if op == "return":
        return "return"
    if op in ("wait", "loop_rec_end"):
        return "wait-back-edge"
    if op == "wait_timeout":
        return "wait_timeout-conditional"
    if op in NO_SUCCESSOR or op == "func_info" or i.opaque:
        return "exception-exit"
    if nsucc > 1:
        return "two-way test"
    return "fallthrough"


def build_cfg(f: FunctionDef, split_tests: bool = False) -> Cfg:
    """Partition ``f`` into blocks at labels and after control transfers.

    With ``split_tests`` false, a conditional instruction in the middle of a
    labelled run is a side exit: its fail edge leaves the block and its
    fallthrough stays inside.  With it true every branching instruction ends
    a block (classic basic blocks, used for loop analysis and structuring).
    """
    body = f.body
    succ = instr_successors(f)
    n = len(body)
    leaders = [False] * n
    if n:
        leaders[0] = True
    for k in range(1, n):
        prev = body[k - 1]
        if label_of(body[k]) is not None and label_of(prev) is None:
            leaders[k] = True
        elif prev.opcode in _ENDERS or prev.opaque:
            leaders[k] = True
        elif split_tests and len(succ[k - 1]) > 1:
            leaders[k] = True
    block_of = [0] * n
    starts = [k for k in range(n) if leaders[k]]
    blocks = []
    for b, s in enumerate(starts):
        e = starts[b + 1] if b + 1 < len(starts) else n
        labs = []
        for k in range(s, e):
            block_of[k] = b
            lab = label_of(body[k])
            if lab is not None and k - s == len(labs):
                labs.append(lab)
        last = e - 1
        blocks.append(BasicBlock(b, tuple(labs), s, e, _terminator(body[last], len(succ[last]))))
    edges: list[Edge] = []
    seen = set()

    def add(src, dst, kind):
        key = (src, dst, kind)
        if key not in seen:
            seen.add(key)
            edges.append(Edge(src, dst, kind))

    for blk in blocks:
        for k in blk.indices:
            for t, kind in succ[k]:
                if t == k + 1 and t < blk.end:
                    continue
                add(blk.id, block_of[t], kind)
    for site, handlers in sorted(exception_sites(f, succ).items()):
        for h in handlers:
            add(block_of[site], block_of[h], EXCEPTION)
    entry = block_of[f.labels()[f.entry]]
    return Cfg(f, blocks, edges, entry, block_of, split_tests)


# ---------------------------------------------------------------------------
# Regions


@dataclass
class Region:
    kind: str                 # receive | try | catch
    openers: tuple            # instruction indices
    closers: tuple            # instruction indices
    closer_opcodes: tuple     # parallel to closers

    @property
    def cardinality(self) -> tuple[int, int]:
        primary = {"receive": "loop_rec_end", "catch": "catch_end", "try": "try_end"}[self.kind]
        return (len(self.openers), sum(op == primary for op in self.closer_opcodes))

    def closer_count(self, opcode: str) -> int:
        return sum(op == opcode for op in self.closer_opcodes)

    @property
    def sites(self) -> tuple:
        return tuple(sorted(self.openers + self.closers))


_RECV_STOP = frozenset({"remove_message", "loop_rec_end", "wait", "wait_timeout", "timeout"})
_RECV_ALL = frozenset(_RECV_STOP | {"loop_rec"})


def _receive_closers(f: FunctionDef, succ, start: int) -> set[int]:
    found, seen, stack = set(), set(), [t for t, _ in succ[start]]
    while stack:
        s = stack.pop()
        if s in seen:
            continue
        seen.add(s)
        op = f.body[s].opcode
        if op == "loop_rec":
            continue
        if op in _RECV_STOP:
            found.add(s)
            if op == "wait_timeout":
                # the timeout instruction on the fallthrough belongs here too
                stack.extend(t for t, kind in succ[s] if kind == TIMEOUT)
            continue
        stack.extend(t for t, _ in succ[s])
    return found


def annotate_regions(c: Cfg) -> list[Region]:
    f = c.function
    succ = instr_successors(f)
    body = f.body
    regions: list[Region] = []
    # receive: openers that share any closer belong to one region
    parent: dict[int, int] = {}

    def find(a):
        while parent.setdefault(a, a) != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    openers = [k for k, i in enumerate(body) if i.opcode == "loop_rec"]
    for k in openers:
        find(k)
        for s in _receive_closers(f, succ, k):
            parent[find(s)] = find(k)
    for k, i in enumerate(body):
        if i.opcode in _RECV_ALL:
            find(k)
    groups: dict[int, list[int]] = defaultdict(list)
    for k in parent:
        groups[find(k)].append(k)
    for members in sorted(groups.values(), key=min):
        members.sort()
        ops = tuple(k for k in members if body[k].opcode == "loop_rec")
        cls = tuple(k for k in members if body[k].opcode != "loop_rec")
        regions.append(Region("receive", ops, cls, tuple(body[k].opcode for k in cls)))
    # try / catch: paired through their y slot
    for kind, closers in (("try", _CATCH_CLOSERS["try"]), ("catch", _CATCH_CLOSERS["catch"])):
        by_slot: dict[int, tuple[list, list]] = {}
        for k, i in enumerate(body):
            if i.opcode == kind:
                by_slot.setdefault(_slot(i), ([], []))[0].append(k)
            elif i.opcode in closers:
                by_slot.setdefault(_slot(i), ([], []))[1].append(k)
        for y in sorted(by_slot, key=lambda s: -1 if s is None else s):
            ops, cls = by_slot[y]
            regions.append(Region(kind, tuple(ops), tuple(cls),
                                  tuple(body[k].opcode for k in cls)))
    return regions


# ---------------------------------------------------------------------------
# Receive sequencing


@dataclass(frozen=True)
class SeqViolation:
    site: int
    opcode: str
    reason: str
    witness: tuple            # instruction indices from the entry to the site

    def __str__(self):
        return f"{self.opcode}@{self.site}: {self.reason} via {list(self.witness)}"


_CLOSED, _OPEN, _WAITING = "closed", "open", "waiting"
_EXITS = frozenset(NO_SUCCESSOR | {"call", "call_ext"})


def check_receive_sequencing(c: Cfg, rs: Optional[list] = None) -> list[SeqViolation]:
    """Check that every path opens a receive context before using it.

    Each instruction is in one of three receive states: closed, open (a
    message is being examined) or waiting (the scan fell off the end of the
    mailbox).  A state conflict at a join is itself a violation.
    """
    f = c.function
    body = f.body
    succ = instr_successors(f)
    exc = exception_sites(f, succ)
    start = f.labels()[f.entry]
    state: dict[int, str] = {start: _CLOSED}
    parent: dict[int, Optional[int]] = {start: None}
    violations: dict[int, SeqViolation] = {}

    def witness(k):
        path = []
        while k is not None:
            path.append(k)
            k = parent.get(k)
            if len(path) > len(body):
                break
        return tuple(reversed(path))

    def flag(k, reason):
        if k not in violations:
            violations[k] = SeqViolation(k, body[k].opcode, reason, witness(k))

    work = deque([start])
    while work:
        k = work.popleft()
        st = state[k]
        op = body[k].opcode
        outs: list[tuple[int, str]] = []
        if op == "loop_rec":
            if st == _OPEN:
                flag(k, "nested receive context")
            for t, kind in succ[k]:
                outs.append((t, _WAITING if kind == FAIL else _OPEN))
        elif op in ("remove_message", "loop_rec_end"):
            if st != _OPEN:
                flag(k, f"{op} without an open receive context")
            outs = [(t, _CLOSED) for t, _ in succ[k]]
        elif op == "wait":
            if st != _WAITING:
                flag(k, "wait not preceded by an exhausted loop_rec")
            outs = [(t, _CLOSED) for t, _ in succ[k]]
        elif op == "wait_timeout":
            if st != _WAITING:
                flag(k, "wait_timeout not preceded by an exhausted loop_rec")
            outs = [(t, _CLOSED if kind == BACK else _WAITING) for t, kind in succ[k]]
        elif op == "timeout":
            if st != _WAITING:
                flag(k, "timeout outside a waiting receive")
            outs = [(t, _CLOSED) for t, _ in succ[k]]
        else:
            if st == _OPEN and op in _EXITS:
                flag(k, "exit with an open receive context")
            outs = [(t, st) for t, _ in succ[k]]
        outs += [(h, _CLOSED) for h in exc.get(k, ())]
        for t, s in outs:
            if t not in state:
                state[t] = s
                parent[t] = k
                work.append(t)
            elif state[t] != s:
                flag(t, f"inconsistent receive state ({state[t]} vs {s})")
    return [violations[k] for k in sorted(violations)]


# ---------------------------------------------------------------------------
# Dominators and loops


def _rpo(nodes: Iterable[int], succ, entry: int) -> list[int]:
    allowed = set(nodes)
    seen, order = {entry}, []
    stack = [(entry, iter(succ(entry)))]
    while stack:
        n, it = stack[-1]
        for s in it:
            if s in allowed and s not in seen:
                seen.add(s)
                stack.append((s, iter(succ(s))))
                break
        else:
            stack.pop()
            order.append(n)
    order.reverse()
    return order


def dominators(nodes: Iterable[int], succ, pred, entry: int) -> dict[int, int]:
    """Immediate dominators by the iterative dataflow algorithm."""
    order = _rpo(nodes, succ, entry)
    index = {n: i for i, n in enumerate(order)}
    idom = {entry: entry}

    def intersect(a, b):
        while a != b:
            while index[a] > index[b]:
                a = idom[a]
            while index[b] > index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for n in order[1:]:
            ps = [p for p in pred(n) if p in idom and p in index]
            if not ps:
                continue
            new = ps[0]
            for p in ps[1:]:
                new = intersect(p, new)
            if idom.get(n) != new:
                idom[n] = new
                changed = True
    return idom


def dominates(idom: dict, a: int, b: int) -> bool:
    if b not in idom:
        return False
    while True:
        if a == b:
            return True
        if idom[b] == b:
            return False
        b = idom[b]


_SINK = -1


def post_dominators(c: Cfg) -> dict[int, int]:
    nodes = c.reachable()
    exits = [b for b in nodes if not c.successors(b)]

    def rsucc(n):
        return exits if n == _SINK else c.predecessors(n)

    def rpred(n):
        succ = c.successors(n)
        return succ if succ else [_SINK]

    return dominators(nodes + [_SINK], rsucc, rpred, _SINK)


def t1t2_reducible(nodes: Iterable[int], edges: Iterable[tuple[int, int]], entry: int) -> bool:
    """Iterated T1 (drop self loop) / T2 (absorb single-predecessor node)."""
    nodes = set(nodes)
    succ = {n: set() for n in nodes}
    pred = {n: set() for n in nodes}
    for a, b in edges:
        if a in nodes and b in nodes:
            succ[a].add(b)
            pred[b].add(a)
    work = deque(nodes)
    while work and len(succ) > 1:
        n = work.popleft()
        if n not in succ:
            continue
        if n in succ[n]:
            succ[n].discard(n)
            pred[n].discard(n)
        if n != entry and len(pred[n]) == 1:
            (p,) = pred[n]
            for s in succ[n]:
                pred[s].discard(n)
                if s != p:
                    pred[s].add(p)
                    succ[p].add(s)
                else:
                    succ[p].add(p)
                    pred[p].add(p)
            succ[p].discard(n)
            del succ[n], pred[n]
            work.append(p)
            work.extend(s for s in succ[p])
    return len(succ) == 1


def _sccs(nodes: list[int], succ) -> list[list[int]]:
    """Tarjan, iterative; components in reverse topological order."""
    allowed = set(nodes)
    index, low, on, stack, out = {}, {}, set(), [], []
    counter = 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(succ(root)))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on.add(root)
        while work:
            n, it = work[-1]
            advanced = False
            for s in it:
                if s not in allowed:
                    continue
                if s not in index:
                    index[s] = low[s] = counter
                    counter += 1
                    stack.append(s)
                    on.add(s)
                    work.append((s, iter(succ(s))))
                    advanced = True
                    break
                if s in on:
                    low[n] = min(low[n], index[s])
            if advanced:
                continue
            work.pop()
            if work:
                low[work[-1][0]] = min(low[work[-1][0]], low[n])
            if low[n] == index[n]:
                comp = []
                while True:
                    v = stack.pop()
                    on.discard(v)
                    comp.append(v)
                    if v == n:
                        break
                out.append(sorted(comp))
    return out


@dataclass
class LoopInfo:
    headers: tuple            # block ids (in the refined cfg)
    header_labels: tuple
    body: frozenset
    entry_count: int
    exits: tuple              # (src, dst) block pairs
    back_edges: tuple
    reducible: bool
    post_dominating_exit: bool
    depth: int = 0


def find_loops(c: Cfg) -> list[LoopInfo]:
    """Loops of the function as a nesting forest, outermost first.

    Loops are strongly connected regions: single-header ones are natural
    loops, multi-header ones are irreducible.  Inner loops are found by
    cutting the edges into an outer loop's headers and recursing.
    """
    c = c.refined()
    nodes = c.reachable()
    idom = dominators(nodes, c.successors, c.predecessors, c.entry)
    pdom = post_dominators(c)
    loops: list[LoopInfo] = []

    def analyse(region: list[int], cut: set, depth: int):
        def succ(n):
            return [s for s in c.successors(n) if (n, s) not in cut]

        for comp in _sccs(sorted(region), succ):
            members = set(comp)
            if len(comp) == 1 and comp[0] not in succ(comp[0]):
                continue
            headers = sorted(n for n in comp if n == c.entry
                             or any(p not in members for p in c.predecessors(n) if p in idom))
            inner = [(a, b) for a in comp for b in succ(a) if b in members]
            backs = tuple(sorted((a, h) for a, h in inner if h in headers))
            exits = tuple(sorted((a, b) for a in comp for b in c.successors(a) if b not in members))
            syn = -2
            red = t1t2_reducible(members | {syn}, inner + [(syn, h) for h in headers], syn)
            targets = {b for _, b in exits}
            pde = bool(targets) and any(all(dominates(pdom, t, h) for h in headers) for t in targets)
            loops.append(LoopInfo(tuple(headers),
                                  tuple(l for h in headers for l in c.blocks[h].labels),
                                  frozenset(comp), len(headers), exits, backs, red, pde, depth))
            analyse(comp, cut | {(a, h) for a, h in inner if h in headers}, depth + 1)

    analyse(nodes, set(), 0)
    loops.sort(key=lambda l: (l.depth, l.headers))
    return loops


def back_edges_dominated(c: Cfg, loops: list[LoopInfo]) -> bool:
    """Every back edge targets a dominator of its source, or its loop is irreducible."""
    r = c.refined()
    nodes = r.reachable()
    idom = dominators(nodes, r.successors, r.predecessors, r.entry)
    return all(not l.reducible or all(dominates(idom, h, a) for a, h in l.back_edges)
               for l in loops)


# ---------------------------------------------------------------------------
# DOT


_REGION_COLOURS = {"receive": "lightblue", "catch": "lightyellow", "try": "palegreen"}
_EDGE_STYLE = {NORMAL: "solid", FAIL: "dashed", BACK: "bold", TIMEOUT: "dotted",
               EXCEPTION: "dotted"}


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def export_dot(c: Cfg, rs: Optional[list] = None) -> str:
    rs = rs if rs is not None else annotate_regions(c)
    f = c.function
    colour: dict[int, str] = {}
    for r in rs:
        for k in r.sites:
            colour.setdefault(c.block_of[k], _REGION_COLOURS[r.kind])
    lines = [f'digraph "{_dot_escape(f.name)}/{f.arity}" {{', "  node [shape=box];"]
    for b in c.blocks:
        head = ",".join(f"L{l}" for l in b.labels) or f"b{b.id}"
        text = f"{head}\\n[{b.start}..{b.end - 1}] {b.terminator}"
        attrs = [f'label="{_dot_escape(text)}"']
        if b.id in colour:
            attrs.append(f'style=filled fillcolor="{colour[b.id]}"')
        if b.id == c.entry:
            attrs.append("peripheries=2")
        lines.append(f"  b{b.id} [{' '.join(attrs)}];")
    for e in sorted(c.edges, key=lambda e: (e.src, e.dst, EDGE_KINDS.index(e.kind))):
        lines.append(f'  b{e.src} -> b{e.dst} [label="{e.kind}" style={_EDGE_STYLE[e.kind]}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
