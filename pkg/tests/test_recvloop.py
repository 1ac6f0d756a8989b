import math
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from beamobf.corpus import load_fixture
from beamobf.miniemu import run
from beamobf.recvloop import (LoopSchema, ReceivePlan, SchemaError, detect_schema,
                              encode_receive_loop, rebuild_from_schema, recognize_receive_loop)

SUMS = load_fixture("sums")


def _schema(name, arity):
    return detect_schema(SUMS.function(name, arity))


def test_detected_schemas():
    s = _schema("sum_to_n", 1)
    assert (s.shape, s.op, s.order, s.step, s.bound, s.base) == ("body", "+", "elem_first", 1, 0, 0)
    p = _schema("prod_to_n", 1)
    assert (p.shape, p.op, p.base) == ("body", "*", 1)
    a = _schema("sum_acc", 2)
    assert (a.shape, a.op, a.order, a.base) == ("tail", "+", "acc_first", None)


@pytest.mark.parametrize("key", [("pick", 2), ("irr", 2)])
def test_non_schema_functions_rejected(key):
    with pytest.raises(SchemaError):
        detect_schema(load_fixture("shapes").function(*key))


@given(st.integers(0, 300), st.integers(-1000, 1000))
def test_reference_semantics(n, acc):
    assert _schema("sum_to_n", 1).evaluate(n) == n * (n + 1) // 2
    assert _schema("sum_acc", 2).evaluate(n, acc) == acc + n * (n + 1) // 2
    if n <= 60:
        assert _schema("prod_to_n", 1).evaluate(n) == math.factorial(n)


def test_evaluate_detects_nontermination():
    with pytest.raises(RuntimeError):
        _schema("sum_to_n", 1).evaluate(-1)


def test_recognizer_ignores_plain_code():
    for f in SUMS.functions + load_fixture("recv").functions:
        assert recognize_receive_loop(f) is None


plans = st.builds(
    lambda key, post, exits, second, waits: (key, post, exits, second, waits),
    st.sampled_from([("sum_to_n", 1), ("sum_acc", 2), ("prod_to_n", 1)]),
    st.booleans(), st.sampled_from([1, 2]),
    st.one_of(st.none(), st.just(("false",)), st.integers(1, 64).map(lambda g: ("lt", g))),
    st.lists(st.integers(1, 9999), max_size=3, unique=True).map(
        lambda w: (0,) + tuple(w) if w else ()))


@settings(max_examples=60)
@given(plans)
def test_recognize_inverts_encode(p):
    key, post, exits, second, waits = p
    f = SUMS.function(*key)
    plan = ReceivePlan(detect_schema(f), post, exits, second, waits)
    g = encode_receive_loop(f, plan, SUMS.max_label())
    got = recognize_receive_loop(g)
    assert got is not None
    assert got == plan


@pytest.mark.parametrize("key", [("sum_to_n", 1), ("sum_acc", 2), ("prod_to_n", 1)])
def test_rebuild_from_schema_is_equivalent(key):
    f = SUMS.function(*key)
    g = rebuild_from_schema(f, detect_schema(f), SUMS.max_label() + 1)
    m = SUMS.replace_function(g).restamp()
    assert detect_schema(m.function(*key)) == detect_schema(f)
    for n in range(0, 25):
        args = [n] if key[1] == 1 else [n, 7]
        assert run(m, key, args).value == run(SUMS, key, args).value


def test_schema_equality_ignores_sites():
    s = _schema("sum_to_n", 1)
    assert replace(s, bound_site=99, step_sites=(1, 2)) == s
    assert replace(s, step=2) != s
    assert isinstance(s, LoopSchema)
