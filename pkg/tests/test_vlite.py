from hypothesis import given, strategies as st

import pytest

from beamobf.asmir import X, Y, FunctionDef, ins, mklabel, parse_module
from beamobf.corpus import CLEAN_FIXTURES, load_fixture
from beamobf.sterm import Atom, format_term
from beamobf.vlite import (dead_x_registers, effect, lint_set_tuple_element, liveness_report,
                           validate)


def _module(body: str, name="f", arity=1, exports=None) -> str:
    return f"""
{{module, t}}.
{{exports, [{{{name},{arity}}}]}}.
{{attributes, []}}.
{{labels, 20}}.
{{function, {name}, {arity}, 2}}.
  {{label,1}}.
    {{func_info,{{atom,t}},{{atom,{name}}},{arity}}}.
  {{label,2}}.
{body}
"""


def _reasons(text):
    return [format_term(d.reason) for d in validate(parse_module(text))]


def test_broken_dumpbinmatch_diagnostic_shape():
    (d,) = validate(load_fixture("dumpbeam_broken"))
    assert format_term(d.as_term()) == (
        "{dumpbeam,{function,dumpbinmatch,0},"
        "{{call_ext_only,1,{extfunc,erlang,display,1}},7,{match_context,{x,0}}}}")


@pytest.mark.parametrize("name", CLEAN_FIXTURES)
def test_clean_fixtures_have_no_diagnostics(name):
    assert validate(load_fixture(name)) == []


def test_uninitialized_read():
    assert _reasons(_module("    {move,{x,3},{x,0}}.\n    return.")) == ["{uninitialized,{x,3}}"]


def test_uninitialized_on_one_path_only():
    body = """    {test,is_nil,{f,3},[{x,0}]}.
    {move,{atom,a},{x,1}}.
  {label,3}.
    {move,{x,1},{x,0}}.
    return."""
    assert _reasons(_module(body)) == ["{uninitialized,{x,1}}"]


def test_call_kills_x_registers():
    body = """    {move,{x,0},{x,1}}.
    {call_ext,1,{extfunc,erlang,abs,1}}.
    {move,{x,1},{x,0}}.
    return."""
    assert _reasons(_module(body)) == ["{uninitialized,{x,1}}"]


def test_fragile_message_into_stack_slot():
    body = """    {allocate,1,1}.
  {label,3}.
    {loop_rec,{f,4},{x,0}}.
    {move,{x,0},{y,0}}.
    remove_message.
    {move,{y,0},{x,0}}.
    {deallocate,1}.
    return.
  {label,4}.
    {wait,{f,3}}."""
    assert _reasons(_module(body)) == ["{fragile_message_reference,{y,0}}"]


def test_stack_frame_mismatches():
    assert _reasons(_module("    {allocate,1,1}.\n    return.")) == ["{unbalanced_stack_frame,1}"]
    assert _reasons(_module("    {allocate,2,1}.\n    {deallocate,1}.\n    return.")) == [
        "{deallocate_mismatch,2,1}"]
    assert _reasons(_module("    {deallocate,1}.\n    return.")) == ["{no_stack_frame,1}"]


def test_y_slot_uninitialized_until_written():
    body = """    {allocate,1,1}.
    {move,{y,0},{x,0}}.
    {deallocate,1}.
    return."""
    assert _reasons(_module(body)) == ["{uninitialized,{y,0}}"]
    zero = body.replace("allocate,", "allocate_zero,")
    assert _reasons(_module(zero)) == []


def test_catch_handler_defines_x0():
    assert validate(load_fixture("catches")) == []


def test_diagnostic_index_is_one_based():
    (d,) = validate(parse_module(_module("    {move,{x,3},{x,0}}.\n    return.")))
    assert d.index == 4 and d.instruction.opcode == "move"


_HAZARD = _module("""    {put_tuple2,{x,1},{list,[{atom,a}]}}.
    {set_tuple_element,{x,0},{x,1},0}.
    {set_tuple_element,{atom,b},{x,1},0}.
    {move,{x,1},{x,0}}.
    return.""")


def test_gc_lint_severity():
    m = parse_module(_HAZARD)
    assert lint_set_tuple_element(m, "off") == []
    (w,) = lint_set_tuple_element(m, "warning")
    assert w.index == 5 and format_term(w.reason) == "{gc_hazard,warning}"
    (e,) = lint_set_tuple_element(m, "error")
    assert format_term(e.reason) == "{gc_hazard,error}"
    with pytest.raises(ValueError):
        lint_set_tuple_element(m, "loud")


def test_writers_immediate_store_is_not_a_hazard():
    assert lint_set_tuple_element(load_fixture("writers")) == []


def test_effect_of_common_instructions():
    m = parse_module(_HAZARD)
    f = m.functions[0]
    assert effect(f.body[3]).defs == (X(1),)
    assert set(effect(f.body[4]).uses) == {X(0), X(1)}
    assert effect(f.body[-1]).uses == (X(0),)


# Liveness on straight-line code against a naive backward scan.

_REGS = [X(0), X(1), X(2), X(3), Y(0), Y(1)]


@st.composite
def straight_line(draw):
    n = draw(st.integers(1, 12))
    out = []
    for _ in range(n):
        src = draw(st.sampled_from(_REGS + [None]))
        dst = draw(st.sampled_from(_REGS))
        out.append((src, dst))
    return out


def _naive_live(moves):
    live = {X(0)}
    res = [None] * len(moves)
    for k in range(len(moves) - 1, -1, -1):
        src, dst = moves[k]
        live = (live - {dst}) | ({src} if src is not None else set())
        res[k] = frozenset(live)
    return res


def _operand(r):
    return f"{{{'x' if isinstance(r, X) else 'y'},{r.index}}}"


@given(straight_line())
def test_liveness_matches_naive_scan(moves):
    lines = [f"    {{move,{_operand(s) if s else '{atom,a}'},{_operand(d)}}}." for s, d in moves]
    f = parse_module(_module("\n".join(lines) + "\n    return.")).functions[0]
    live = liveness_report(f)
    want = _naive_live(moves)
    first = 3
    for k in range(len(moves)):
        assert live[first + k] == want[k]


def test_dead_registers_exclude_live_and_span():
    f = load_fixture("bins").function("mkbin_dyn", 2)
    live = liveness_report(f)
    for k in range(len(f.body)):
        dead = dead_x_registers(f, k, limit=16)
        assert not any(X(r) in live[k] for r in dead)
