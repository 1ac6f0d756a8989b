"""Obfuscating transformations over ModuleAsm.

Every pass is a deterministic function of (module, config): it keeps the
module clean under vlite and legal under receive sequencing, and preserves
what the emulator computes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .asmir import (AsmError, ExtFunc, FLabel, FunctionDef, Instruction, IntOp, ModuleAsm,
                    X, Y, construction_spans, ins, label_of, mklabel, registers_in)
from .recvloop import (NOFAIL, ReceivePlan, SchemaError, atom, detect_schema,
                       encode_receive_loop, integer, lst, n, recognize_receive_loop, xa)
from .sterm import Atom, format_term
from .vlite import effect, liveness_report

MAX_SETTERS = 524288
SCRATCH_LIMIT = 16


class ObfError(ValueError):
    pass


class ExportLimitError(ObfError):
    pass


@dataclass(frozen=True)
class PassConfig:
    seed: int = 0
    intensity: int = 1
    targets: Optional[tuple] = None      # (name, arity) pairs; None means all
    post_test: bool = False              # receive loop: first condition forced false
    guard: str = "input"                 # multi-entry: "input" or "false"
    reroute_sizes: bool = False          # interleave: route constant binary sizes via registers

    def __post_init__(self):
        if not -(1 << 63) <= self.seed < (1 << 64):
            raise ValueError("seed must fit in 64 bits")
        if self.intensity < 0:
            raise ValueError("intensity must be non-negative")
        if self.guard not in ("input", "false"):
            raise ValueError(f"unknown guard {self.guard!r}")
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(tuple(t) for t in self.targets))

    def selects(self, key: tuple) -> bool:
        return self.targets is None or tuple(key) in self.targets

    def rng(self, *salt) -> random.Random:
        return random.Random(f"{self.seed}:" + ":".join(map(str, salt)))


# ---------------------------------------------------------------------------
# Receive-loop family


def _plan_for(f: FunctionDef, cfg: PassConfig) -> ReceivePlan:
    plan = recognize_receive_loop(f)
    if plan is not None:
        return plan
    try:
        return ReceivePlan(detect_schema(f), post_test=cfg.post_test)
    except SchemaError as e:
        raise ObfError(f"{f.name}/{f.arity} is not a schema-conforming recursion: {e}") from None


def _target_function(m: ModuleAsm, target) -> FunctionDef:
    try:
        return m.function(*target)
    except KeyError:
        raise ObfError(f"target {target[0]}/{target[1]} not found in {m.name}") from None


def _reencode(m: ModuleAsm, target, cfg: PassConfig,
              change: Callable[[ReceivePlan, random.Random], ReceivePlan],
              require_encoded: bool = False) -> ModuleAsm:
    f = _target_function(m, target)
    if require_encoded and recognize_receive_loop(f) is None:
        # not yet receive-encoded: encode it first, as the pipeline would
        m = pass_receive_loop(m, target, cfg)
        f = m.function(*target)
    plan = change(_plan_for(f, cfg), cfg.rng(f.name, f.arity))
    g = encode_receive_loop(f, plan, m.max_label())
    return m.replace_function(g).restamp()


def pass_receive_loop(m: ModuleAsm, target: tuple, cfg: PassConfig = PassConfig()) -> ModuleAsm:
    """Rewrite a self-recursion into a loop driven by self-sent messages.

    With ``cfg.post_test`` the first condition is the constant false, so the
    body runs at least once (a do-while loop); that differs from the original
    only on inputs where the bound already holds.
    """
    return _reencode(m, target, cfg, lambda p, r: replace(p, post_test=p.post_test or cfg.post_test))


def pass_multi_exit_receive(m: ModuleAsm, target: tuple, cfg: PassConfig = PassConfig()) -> ModuleAsm:
    """Split the loop exit in two, chosen by the parity of the iteration counter."""
    return _reencode(m, target, cfg, lambda p, r: replace(p, exits=2), require_encoded=True)


def pass_multi_entry_receive(m: ModuleAsm, target: tuple, cfg: PassConfig = PassConfig()) -> ModuleAsm:
    """Add a second loop entry with its own loop_rec, jumping into the loop body."""
    def change(p, rng):
        guard = ("false",) if cfg.guard == "false" else ("lt", rng.randint(1, 64))
        return replace(p, second_entry=guard)
    return _reencode(m, target, cfg, change, require_encoded=True)


def pass_redundant_wait_timeout(m: ModuleAsm, target: tuple, cfg: PassConfig = PassConfig()) -> ModuleAsm:
    """Add never-taken wait_timeout closers (distinct literals, the first is 0)."""
    def change(p, rng):
        count = max(2, cfg.intensity)
        lits = (0,) + tuple(rng.sample(range(1, 10_000), count - 1))
        return replace(p, waits=lits)
    return _reencode(m, target, cfg, change, require_encoded=True)


def receive_targets(m: ModuleAsm, cfg: PassConfig) -> list[tuple]:
    """Functions a receive pass can apply to under ``cfg``'s selectors."""
    out = []
    for f in m.functions:
        if not cfg.selects(f.key):
            continue
        if recognize_receive_loop(f) is not None:
            out.append(f.key)
            continue
        try:
            detect_schema(f)
        except SchemaError:
            continue
        out.append(f.key)
    return out


# ---------------------------------------------------------------------------
# Many-to-many catch


def _parity(reg: X, fail: FLabel) -> list[Instruction]:
    """Branch to ``fail`` when the reduction count is odd; clobbers ``reg``."""
    return [ins("bif", xa("self"), NOFAIL, lst(), reg),
            ins("bif", xa("process_info"), NOFAIL, lst(reg, atom("reductions")), reg),
            ins("get_tuple_element", reg, n(1), reg),
            ins("bif", xa("band"), NOFAIL, lst(reg, integer(1)), reg),
            ins("test", xa("is_eq_exact"), fail, lst(reg, integer(0)))]


def _dead_x(live: frozenset, avoid=()) -> Optional[X]:
    for r in range(SCRATCH_LIMIT):
        if X(r) not in live and X(r) not in avoid:
            return X(r)
    return None


def _catch_sites(f: FunctionDef) -> list[tuple[int, int]]:
    """(catch index, handler label index) pairs the pass can rewrite."""
    labels = f.labels()
    out = []
    for k, i in enumerate(f.body):
        if i.opcode != "catch":
            continue
        y, h = i.operands[0], labels.get(i.operands[1].label)
        if h is None or h + 1 >= len(f.body) or h == 0:
            continue
        closer = f.body[h + 1]
        prev = f.body[h - 1]
        if closer.opcode == "catch_end" and closer.operands[0] == y and \
                prev.klass not in ("terminator",) and prev.opcode not in ("jump", "func_info"):
            out.append((k, h))
    return out


def _many_to_many(f: FunctionDef, next_label: int) -> tuple[FunctionDef, int]:
    sites = _catch_sites(f)
    if not sites:
        return f, next_label
    live = liveness_report(f)
    before: dict[int, list] = {}
    after: dict[int, list] = {}
    replace_at: dict[int, list] = {}
    for c, h in sites:
        d_open, d_close = _dead_x(live[c]), _dead_x(live[h])
        if d_open is None or d_close is None:
            continue
        lab = iter(range(next_label + 1, next_label + 6))
        next_label += 5
        lc2, lb, l2, h2, la = (next(lab) for _ in range(5))
        y = f.body[c].operands[0]
        handler = f.body[c].operands[1]
        replace_at[c] = (_parity(d_open, FLabel(lc2))
                         + [ins("catch", y, handler), ins("jump", FLabel(lb)),
                            mklabel(lc2), ins("catch", y, FLabel(h2)), mklabel(lb)])
        before.setdefault(h, []).extend(_parity(d_close, FLabel(l2)))
        after.setdefault(h + 1, []).extend([ins("jump", FLabel(la)), mklabel(l2), mklabel(h2),
                                            ins("catch_end", y), mklabel(la)])
    body = []
    for k, i in enumerate(f.body):
        body.extend(before.get(k, ()))
        body.extend(replace_at.get(k, [i]))
        body.extend(after.get(k, ()))
    return f.with_body(body), next_label


def pass_many_to_many_catch(m: ModuleAsm, cfg: PassConfig = PassConfig()) -> ModuleAsm:
    """Give every catch region two openers and two catch_end closers.

    Which opener and which closer run is decided at run time by the parity of
    the process reduction count, read through process_info/2.
    """
    next_label = m.max_label()
    funcs = []
    changed = False
    for f in m.functions:
        if cfg.selects(f.key):
            g, next_label = _many_to_many(f, next_label)
            changed |= g is not f
            f = g
        funcs.append(f)
    if not changed:
        raise ObfError(f"{m.name}: no catch region to rewrite")
    return replace(m, functions=tuple(funcs)).restamp()


# ---------------------------------------------------------------------------
# Construction interleaving


def _span_registers(f: FunctionDef, span) -> set:
    regs = set()
    for k in (span.head,) + span.members + span.foreign:
        for op in f.body[k].operands:
            regs.update(registers_in(op))
    return regs


def _interleave(f: FunctionDef, cfg: PassConfig) -> FunctionDef:
    spans, _ = construction_spans(f)
    spans = [s for s in spans if s.members]
    if not spans or cfg.intensity == 0:
        return f
    live = liveness_report(f)
    rng = cfg.rng("interleave", f.name, f.arity)
    before: dict[int, list] = {}
    swap: dict[int, Instruction] = {}
    for span in spans:
        busy = _span_registers(f, span)
        gaps = list(span.members)
        for _ in range(cfg.intensity):
            at = rng.choice(gaps)
            dead = [X(r) for r in range(SCRATCH_LIMIT) if X(r) not in live[at] and X(r) not in busy]
            if not dead:
                continue
            reg = rng.choice(dead)
            before.setdefault(at, []).append(ins("move", integer(rng.randint(0, 99)), reg))
        head = f.body[span.head]
        if cfg.reroute_sizes and span.kind == "binary" and isinstance(head.operands[1], IntOp):
            dead = [X(r) for r in range(SCRATCH_LIMIT)
                    if X(r) not in live[span.head] and X(r) not in busy]
            if dead:
                reg = rng.choice(dead)
                before.setdefault(span.head, []).append(
                    ins("move", integer(head.operands[1].value), reg))
                ops = list(head.operands)
                ops[1] = reg
                swap[span.head] = Instruction(head.opcode, tuple(ops))
    body = []
    for k, i in enumerate(f.body):
        body.extend(before.get(k, ()))
        body.append(swap.get(k, i))
    return f.with_body(body)


def pass_interleave_constructions(m: ModuleAsm, cfg: PassConfig = PassConfig()) -> ModuleAsm:
    """Insert inert moves into dead registers inside construction spans."""
    funcs = tuple(_interleave(f, cfg) if cfg.selects(f.key) else f for f in m.functions)
    return replace(m, functions=funcs)


# ---------------------------------------------------------------------------
# Mutable tuple setters


def gen_mutable_tuple_setters(count: int) -> ModuleAsm:
    """Module put_tuple_elem with doI/2 = set_tuple_element(X1, X0, I-1); return."""
    if type(count) is not int or count <= 0:
        raise ValueError(f"setter count must be a positive integer, got {count!r}")
    if count > MAX_SETTERS:
        raise ExportLimitError(f"{count} setters exceed the export table limit of {MAX_SETTERS}")
    mod = "put_tuple_elem"
    funcs = []
    for k in range(1, count + 1):
        name = f"do{k}"
        funcs.append(FunctionDef(name, 2, 2 * k, (
            mklabel(2 * k - 1),
            ins("func_info", atom(mod), atom(name), n(2)),
            mklabel(2 * k),
            ins("set_tuple_element", X(1), X(0), n(k - 1)),
            ins("return"))))
    top = 2 * count
    funcs.append(FunctionDef("module_info", 0, top + 2, (
        mklabel(top + 1), ins("func_info", atom(mod), atom("module_info"), n(0)),
        mklabel(top + 2), ins("move", atom(mod), X(0)),
        ins("call_ext_only", n(1), ExtFunc("erlang", "get_module_info", 1)))))
    funcs.append(FunctionDef("module_info", 1, top + 4, (
        mklabel(top + 3), ins("func_info", atom(mod), atom("module_info"), n(1)),
        mklabel(top + 4), ins("move", X(0), X(1)), ins("move", atom(mod), X(0)),
        ins("call_ext_only", n(2), ExtFunc("erlang", "get_module_info", 2)))))
    exports = tuple((f"do{k}", 2) for k in range(1, count + 1)) + (("module_info", 0),
                                                                   ("module_info", 1))
    return ModuleAsm(mod, exports, (), tuple(funcs), top + 4)


# ---------------------------------------------------------------------------
# Pipelines


RECEIVE_PASSES = {
    "receive_loop": pass_receive_loop,
    "multi_exit_receive": pass_multi_exit_receive,
    "multi_entry_receive": pass_multi_entry_receive,
    "redundant_wait_timeout": pass_redundant_wait_timeout,
}
MODULE_PASSES = {
    "many_to_many_catch": pass_many_to_many_catch,
    "interleave_constructions": pass_interleave_constructions,
}
PASS_NAMES = tuple(RECEIVE_PASSES) + tuple(MODULE_PASSES)


def _config_from_params(params, base: PassConfig) -> PassConfig:
    values = {}
    for p in params:
        if not (isinstance(p, tuple) and len(p) == 2 and isinstance(p[0], Atom)):
            raise ObfError(f"pass parameter must be {{Name,Value}}: {format_term(p)}")
        key, val = p[0].name, p[1]
        if key in ("seed", "intensity"):
            if type(val) is not int:
                raise ObfError(f"{key} must be an integer")
            values[key] = val
        elif key in ("post_test", "reroute_sizes"):
            if val not in (Atom("true"), Atom("false")):
                raise ObfError(f"{key} must be true or false")
            values[key] = val == Atom("true")
        elif key == "guard":
            values[key] = val.name if isinstance(val, Atom) else val
        elif key == "targets":
            try:
                values[key] = tuple((t[0].name, t[1]) for t in val)
            except (TypeError, AttributeError, IndexError):
                raise ObfError("targets must be a list of {Name,Arity}") from None
        else:
            raise ObfError(f"unknown pass parameter {key}")
    try:
        return replace(base, **values)
    except ValueError as e:
        raise ObfError(str(e)) from None


def parse_pipeline(terms) -> list[tuple[str, list]]:
    """Validate a pipeline Term: ``[{PassName, [{Param, Value}]}]``."""
    if isinstance(terms, list) and len(terms) == 1 and isinstance(terms[0], list):
        terms = terms[0]
    if not isinstance(terms, list):
        raise ObfError("pipeline must be a list of {PassName, Params}")
    steps = []
    for t in terms:
        if not (isinstance(t, tuple) and len(t) == 2 and isinstance(t[0], Atom)
                and isinstance(t[1], list)):
            raise ObfError(f"pipeline step must be {{PassName, Params}}: {format_term(t)}")
        name = t[0].name
        if name not in PASS_NAMES:
            raise ObfError(f"unknown pass {name}; known: {', '.join(PASS_NAMES)}")
        steps.append((name, t[1]))
    return steps


def run_pipeline(m: ModuleAsm, terms, base: PassConfig = PassConfig()) -> ModuleAsm:
    for name, params in parse_pipeline(terms):
        cfg = _config_from_params(params, base)
        if name in RECEIVE_PASSES:
            targets = receive_targets(m, cfg)
            if not targets:
                raise ObfError(f"{name}: no schema-conforming target in {m.name}")
            for t in targets:
                m = RECEIVE_PASSES[name](m, t, cfg)
        else:
            m = MODULE_PASSES[name](m, cfg)
    try:
        m.validate()
    except AsmError as e:
        raise ObfError(f"pipeline produced an invalid module: {e}") from None
    return m
