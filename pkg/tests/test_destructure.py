import re

import pytest
from hypothesis import given, settings, strategies as st

from beamobf.asmir import X, construction_spans, format_module, ins, parse_module
from beamobf.corpus import CLEAN_FIXTURES, FIXTURES, SCHEMA_ENTRIES, input_gen, load_fixture, sample_inputs
from beamobf.destructure import (CONDITION_VARIABLES, DUPLICATE, EXACT_SCHEMA, HEADER,
                                 STRATEGIES, STRUCTURED_ONLY, PBlock, PBreak, PCase, PContinue,
                                 PFunction, PIf, PLabeled, PLoop, PSeq, PSet, PseudoSyntaxError, StructuringError,
                                 emit_pseudo_source, interpret, normalize_constructions,
                                 normalize_report, parse_pseudo_source, recover_module,
                                 recover_receive_loop, structure_function, structure_module,
                                 unstructured_jumps, walk)
from beamobf.miniemu import run, run_differential
from beamobf.obf import (PassConfig, pass_interleave_constructions, pass_many_to_many_catch,
                         pass_multi_entry_receive, pass_multi_exit_receive, pass_receive_loop,
                         pass_redundant_wait_timeout)
from beamobf.recvloop import detect_schema
from beamobf.sterm import Atom
from beamobf.vlite import validate

RECEIVE = [pass_receive_loop, pass_multi_exit_receive, pass_multi_entry_receive,
           pass_redundant_wait_timeout]


def _corpus():
    out = []
    for name in FIXTURES:
        out.append((name, load_fixture(name)))
    for p in RECEIVE:
        out.append((f"sums+{p.__name__}", p(load_fixture("sums"), ("sum_acc", 2), PassConfig(seed=2))))
    out.append(("catches+m2m", pass_many_to_many_catch(load_fixture("catches"))))
    out.append(("bins+interleave", pass_interleave_constructions(
        load_fixture("bins"), PassConfig(intensity=3, reroute_sizes=True))))
    return out


CORPUS = _corpus()
FUNCS = [(name, m, f) for name, m in CORPUS for f in m.functions]


def _goto_free(p) -> bool:
    if unstructured_jumps(p):
        return False
    return not any(isinstance(e, PBlock) and any(i.opcode == "jump" for i in e.instrs)
                   for e in walk(p))


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("name,m,f", FUNCS, ids=[f"{n}:{f.name}/{f.arity}" for n, _, f in FUNCS])
def test_structure_is_goto_free_and_round_trips(name, m, f, strategy):
    p = structure_function(f, strategy)
    assert _goto_free(p)
    text = emit_pseudo_source(p)
    assert "jump(" not in text
    assert parse_pseudo_source(text) == p
    assert emit_pseudo_source(parse_pseudo_source(text)) == text


def _runnable():
    for name, m, f in FUNCS:
        if f.key in set(m.exports) and name.split("+")[0] in CLEAN_FIXTURES:
            yield name, m, f


RUNNABLE = list(_runnable())


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("name,m,f", RUNNABLE, ids=[f"{n}:{f.name}/{f.arity}" for n, _, f in RUNNABLE])
def test_structured_control_flow_tracks_emulator(name, m, f, strategy):
    p = parse_pseudo_source(emit_pseudo_source(structure_function(f, strategy)))
    for args in sample_inputs(name.split("+")[0], f.key, 12, seed=9):
        assert interpret(m, p, args).key() == run(m, f.key, args).key()


def test_irreducible_duplicate_copies_a_block():
    f = load_fixture("shapes").function("irr", 2)
    p = structure_function(f, DUPLICATE)
    leaves = [e.block for e in walk(p) if isinstance(e, PBlock)]
    assert len(leaves) > len(set(leaves))
    assert not any(isinstance(e, PSet) for e in walk(p))


def test_irreducible_dispatch_uses_one_variable_and_one_loop():
    f = load_fixture("shapes").function("irr", 2)
    p = structure_function(f, CONDITION_VARIABLES)
    sets = {e.var for e in walk(p) if isinstance(e, PSet)}
    assert sets == {"Dispatch1"}
    assert sum(isinstance(e, PLoop) for e in walk(p)) == 1
    leaves = [e.block for e in walk(p) if isinstance(e, PBlock)]
    assert len(leaves) == len(set(leaves))


def test_duplicate_cap_exceeded_is_an_error():
    f = load_fixture("shapes").function("irr", 2)
    with pytest.raises(StructuringError):
        structure_function(f, DUPLICATE, cap=1)
    # the dispatch strategy never duplicates, so the cap does not apply
    assert _goto_free(structure_function(f, CONDITION_VARIABLES, cap=1))


def test_unknown_strategy():
    with pytest.raises(ValueError):
        structure_function(load_fixture("sums").functions[0], "magic")


def test_dead_blocks_listed():
    p = structure_function(load_fixture("sums").function("sum_to_n", 1))
    (dead,) = p.dead
    assert [i.opcode for i in dead.instrs] == ["label", "func_info"]
    assert "dead ->" in emit_pseudo_source(p)


def test_unmerge_tails_gives_each_predecessor_its_return():
    f = load_fixture("shapes").function("pick", 2)
    merged = structure_function(f)
    split = structure_function(f, unmerge_tails=True)
    count = lambda p: sum(isinstance(e, PBlock) for e in walk(p))
    assert count(split) > count(merged) and _goto_free(split)


GOLDEN_SUM = """%% pseudo-source: Erlang-flavoured for review, not compilable Erlang
function sum_to_n/1 ->
  recursion sum_to_n/1 {body,'+',elem_first,1,0,0} ->
    sum_to_n(N) -> sum_to_n_rec(N).
    sum_to_n_rec(0) -> 0;
    sum_to_n_rec(N) -> N + sum_to_n_rec(N - 1).
  end
end.
"""


def test_recovered_sum_loop_golden():
    m = pass_receive_loop(load_fixture("sums"), ("sum_to_n", 1))
    out, report = structure_module(m)
    assert emit_pseudo_source(out[0]) == GOLDEN_SUM
    assert parse_pseudo_source(GOLDEN_SUM) == out[0]
    assert report[0] == ((Atom("sum_to_n"), 1), Atom(EXACT_SCHEMA))
    assert report[1][1] == Atom(STRUCTURED_ONLY)


@pytest.mark.parametrize("p", RECEIVE, ids=lambda p: p.__name__)
@pytest.mark.parametrize("module,key", SCHEMA_ENTRIES)
def test_recover_receive_loop_restores_schema(p, module, key):
    m = load_fixture(module)
    out = p(m, key, PassConfig(seed=7))
    rec = recover_receive_loop(out.function(*key))
    assert rec.schema == detect_schema(m.function(*key))
    back, report = recover_module(out)
    assert dict(((n.name, a), lvl.name) for (n, a), lvl in report)[key] == EXACT_SCHEMA
    assert validate(back) == []
    rep = run_differential(m, back, key, input_gen(module, key), trials=40, seed=1,
                           compare_mailbox=True)
    assert rep.equivalent


def test_recovery_notes():
    m = load_fixture("sums")
    key = ("sum_to_n", 1)
    out = pass_redundant_wait_timeout(pass_multi_entry_receive(pass_multi_exit_receive(
        pass_receive_loop(m, key, PassConfig(post_test=True)), key), key), key)
    notes = recover_receive_loop(out.function(*key)).notes
    assert any(n.startswith("exit-merge") for n in notes)
    assert any(n.startswith("entry-merge") for n in notes)
    assert any(re.match(r"dropped \d+ redundant wait_timeout", n) for n in notes)
    assert any(n.startswith("post-test") for n in notes)


def test_recover_ignores_plain_functions():
    assert recover_receive_loop(load_fixture("sums").function("sum_to_n", 1)) is None


def _contiguous(m):
    return all(not s.foreign for f in m.functions for s in construction_spans(f)[0])


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("intensity", [1, 2, 3])
def test_normalize_restores_contiguous_spans(seed, intensity):
    m = load_fixture("bins")
    for reroute in (False, True):
        mixed = pass_interleave_constructions(
            m, PassConfig(seed=seed, intensity=intensity, reroute_sizes=reroute))
        norm = normalize_constructions(mixed)
        assert _contiguous(norm)
        assert normalize_constructions(norm) == norm
        assert validate(norm) == []
        for key in m.exports:
            assert run_differential(m, norm, tuple(key), input_gen("bins", tuple(key)),
                                    trials=15, seed=seed).equivalent


def test_normalize_reports_dependent_instruction():
    text = format_module(load_fixture("bins"))
    m = load_fixture("bins")
    f = m.function("mkbin_dyn", 2)
    spans, _ = construction_spans(f)
    span = next(s for s in spans if s.kind == "binary" and s.members)
    body = list(f.body)
    # an instruction that reads a register the span writes cannot be hoisted
    reader = ins("move", body[span.head].operands[5], X(9))
    body.insert(span.members[0], reader)
    bad = m.replace_function(f.with_body(body))
    norm, notes = normalize_report(bad)
    assert any("mkbin_dyn/2" in n and "keeps" in n for n in notes)
    assert parse_module(text) == m


def test_pseudo_syntax_errors():
    for bad in ("function f/1 ->\n  b1: return()\n", "function f/1 ->\n  loop x ->\nend.\n",
                "function f/1 ->\n  b1: nope(\nend.\n", "whatever\n"):
        with pytest.raises(PseudoSyntaxError):
            parse_pseudo_source(bad)


# parse(emit(p)) == p over generated pseudo expressions

_names = st.sampled_from(["head1", "head2", "after3", "after4"])
_leaf = st.builds(lambda b: PBlock(b, ()), st.integers(0, 40))
_set = st.builds(PSet, st.sampled_from(["Dispatch1", "Dispatch2"]), st.integers(0, 5))


def _exprs():
    base = st.one_of(_leaf, _set, st.builds(PBreak, _names), st.builds(PContinue, _names))

    def extend(inner):
        subj = st.one_of(st.integers(0, 40).map(lambda b: ("exit", b)),
                         st.sampled_from(["Dispatch1", "Dispatch2"]).map(lambda v: ("var", v)))
        return st.one_of(
            st.builds(PLoop, _names, inner), st.builds(PLabeled, _names, inner),
            st.lists(inner, min_size=2, max_size=4).map(lambda xs: PSeq(tuple(xs))),
            st.builds(lambda s, v, a, b: PIf(s, v, a, b), subj, st.integers(0, 40), inner, inner),
            st.builds(lambda s, arms: PCase(s, tuple(arms)), subj,
                      st.lists(st.tuples(st.integers(0, 40), inner), min_size=1, max_size=3)))
    return st.recursive(base, extend, max_leaves=12)


def _canon(e):
    # emitted text cannot distinguish nested sequences or adjacent leaves of one block
    text = emit_pseudo_source(PFunction("f", 0, e))
    return parse_pseudo_source(text)


@settings(max_examples=300)
@given(_exprs())
def test_parse_emit_property(e):
    p = _canon(e)
    assert parse_pseudo_source(emit_pseudo_source(p)) == p
    assert emit_pseudo_source(p) == emit_pseudo_source(PFunction("f", 0, e))
