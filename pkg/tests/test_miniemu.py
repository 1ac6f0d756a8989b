import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamobf.asmir import AtomOp, IntOp, OperandList, ins, parse_module
from beamobf.corpus import CLEAN_FIXTURES, input_gen, load_fixture, sample_inputs
from beamobf.miniemu import (HTuple, Emulator, cost_profile, int_inputs, run, run_differential)
from beamobf.obf import PassConfig, gen_mutable_tuple_setters, pass_receive_loop
from beamobf.sterm import Atom, Bin

ALIAS = """
{module, alias}.
{exports, [{se_pair,1},{ste_pair,1}]}.
{attributes, []}.
{labels, 4}.

{function, se_pair, 1, 2}.
  {label,1}.
    {func_info,{atom,alias},{atom,se_pair},1}.
  {label,2}.
    {allocate,1,1}.
    {move,{x,0},{y,0}}.
    {move,{x,0},{x,1}}.
    {move,{integer,1},{x,0}}.
    {move,{atom,v},{x,2}}.
    {call_ext,3,{extfunc,erlang,setelement,3}}.
    {put_tuple,2,{x,1}}.
    {put,{y,0}}.
    {put,{x,0}}.
    {move,{x,1},{x,0}}.
    {deallocate,1}.
    return.

{function, ste_pair, 1, 4}.
  {label,3}.
    {func_info,{atom,alias},{atom,ste_pair},1}.
  {label,4}.
    {move,{x,0},{x,1}}.
    {set_tuple_element,{atom,v},{x,0},0}.
    {put_tuple,2,{x,0}}.
    {put,{x,1}}.
    {put,{x,1}}.
    return.
"""

FAULTS = """
{module, faults}.
{exports, [{bare_remove,0},{uninit,0},{deadlock,0},{unknown,0},{spin,0},{timed,0}]}.
{attributes, []}.
{labels, 15}.

{function, bare_remove, 0, 2}.
  {label,1}.
    {func_info,{atom,faults},{atom,bare_remove},0}.
  {label,2}.
    remove_message.
    return.

{function, uninit, 0, 4}.
  {label,3}.
    {func_info,{atom,faults},{atom,uninit},0}.
  {label,4}.
    {move,{x,5},{x,0}}.
    return.

{function, deadlock, 0, 6}.
  {label,5}.
    {func_info,{atom,faults},{atom,deadlock},0}.
  {label,6}.
    {wait,{f,7}}.
  {label,7}.
    {loop_rec,{f,6},{x,0}}.
    remove_message.
    return.

{function, unknown, 0, 9}.
  {label,8}.
    {func_info,{atom,faults},{atom,unknown},0}.
  {label,9}.
    {frobnicate,{x,0}}.
    return.

{function, spin, 0, 11}.
  {label,10}.
    {func_info,{atom,faults},{atom,spin},0}.
  {label,11}.
    {jump,{f,11}}.

{function, timed, 0, 13}.
  {label,12}.
    {func_info,{atom,faults},{atom,timed},0}.
  {label,13}.
    {loop_rec,{f,14},{x,0}}.
    remove_message.
    {move,{atom,got},{x,0}}.
    return.
  {label,14}.
    {wait_timeout,{f,13},{integer,50}}.
    timeout.
    {move,{atom,timeout},{x,0}}.
    return.
"""


@pytest.fixture(scope="module")
def faults():
    return parse_module(FAULTS)


def test_dumpbinmatch_reaches_display():
    res = run(load_fixture("dumpbeam"), ("dumpbinmatch", 0), [])
    assert res.outcome == "value" and res.value == Atom("true")
    assert res.log == ["{<<3,4,5>>}"]


def test_sum_to_n_closed_form():
    assert run(load_fixture("sums"), ("sum_to_n", 1), [10]).value == 55


def test_big_integers():
    assert run(load_fixture("sums"), ("prod_to_n", 1), [30]).value == math.factorial(30)


def test_setter_mutates_shared_tuple():
    emu = Emulator(gen_mutable_tuple_setters(3))
    t = HTuple([Atom("a"), Atom("b"), Atom("c")])
    alias = t
    emu.invoke("do2", 2, [t, Atom("v")], runtime=True)
    assert alias.elems == [Atom("a"), Atom("v"), Atom("c")]


def test_aliasing_setelement_vs_set_tuple_element():
    m = parse_module(ALIAS)
    abc = (Atom("a"), Atom("b"), Atom("c"))
    vbc = (Atom("v"), Atom("b"), Atom("c"))
    assert run(m, ("se_pair", 1), [abc]).value == (abc, vbc)
    assert run(m, ("ste_pair", 1), [abc]).value == (vbc, vbc)


def test_differential_reflexive():
    m = load_fixture("sums")
    assert run_differential(m, m, ("sum_to_n", 1), int_inputs(1, 0, 60), trials=50).equivalent


def test_differential_against_receive_loop():
    m = load_fixture("sums")
    obf = pass_receive_loop(m, ("sum_to_n", 1), PassConfig(seed=5))
    rep = run_differential(m, obf, ("sum_to_n", 1), inputs=[[n] for n in range(201)])
    assert rep.equivalent and rep.trials == 201


def _corrupt_step(m):
    f = m.function("sum_to_n", 1)
    body = list(f.body)
    for k, i in enumerate(body):
        if i.opcode == "gc_bif" and i.operands[0] == AtomOp("-", tagged=False):
            src, _ = i.operands[3].items
            body[k] = ins("gc_bif", *i.operands[:3], OperandList((src, IntOp(2))), i.operands[4])
    assert tuple(body) != f.body
    return m.replace_function(f.with_body(body))


def test_differential_detects_corruption():
    m = load_fixture("sums")
    bad = _corrupt_step(m)
    rep = run_differential(m, bad, ("sum_to_n", 1), inputs=[[n] for n in range(1, 41)],
                           fuel=20_000)
    assert len(rep.mismatches) == 40
    assert run_differential(m, bad, ("sum_to_n", 1), inputs=[[0]]).equivalent


def test_cost_profile_linear_vs_constant():
    m = load_fixture("writers")
    se = dict(cost_profile(m, ("se_write", 2), [64, 1024], 10))
    ste = dict(cost_profile(m, ("ste_write", 2), [64, 1024], 10))
    assert 12.8 <= se[1024] / se[64] <= 19.2
    assert ste[1024] / ste[64] <= 1.5


def test_cost_profile_zero_writes():
    m = load_fixture("writers")
    for entry in (("se_write", 2), ("ste_write", 2)):
        assert all(c == 0 for _, c in cost_profile(m, entry, [1, 64, 1024], 0))


def test_bs_init2_bytes_equals_bs_init_bits_bits():
    m = load_fixture("bins")
    for x in (0, 1, 255, 4096, 65535):
        a = run(m, ("mkbin", 1), [x]).value
        b = run(m, ("mkbin_bits", 1), [x]).value
        assert a == b == Bin(bytes([1, x >> 8, x & 255]) + b"ab")


def test_register_sized_binary_runs():
    assert run(load_fixture("bins"), ("mkbin_dyn", 2), [65, 1]).value == Bin(b"A")


def test_receive_fixture():
    res = run(load_fixture("recv"), ("recv_tag", 1), [7])
    assert res.value == 7 and res.mailbox_residue == 1
    assert res.counters.messages_sent - res.counters.messages_removed == res.mailbox_residue


def test_catch_fixture():
    m = load_fixture("catches")
    assert run(m, ("checked", 1), [3]).value == 6
    caught = run(m, ("checked", 1), [12]).value
    assert caught[0] == Atom("EXIT") and caught[1][0] == Atom("badmatch")
    assert run(m, ("check", 1), [12]).reason == "badmatch"


def test_fault_remove_message_without_context(faults):
    res = run(faults, ("bare_remove", 0), [])
    assert (res.outcome, res.reason) == ("fault", "receive-context")


def test_fault_uninitialized_read_strict_only(faults):
    assert run(faults, ("uninit", 0), []).reason == "uninitialized-read"
    res = run(faults, ("uninit", 0), [], mode="permissive")
    assert res.outcome == "value" and res.value == []


def test_fault_wait_deadlock(faults):
    assert run(faults, ("deadlock", 0), []).reason == "deadlock-wait"


def test_fault_unknown_opcode(faults):
    res = run(faults, ("unknown", 0), [])
    assert res.reason == "badarg" and res.detail == (Atom("unknown_opcode"), Atom("frobnicate"))


def test_fuel_is_distinct_outcome(faults):
    res = run(faults, ("spin", 0), [], fuel=1000)
    assert res.outcome == "fuel" and res.counters.steps == 1000


def test_wait_timeout_fires_on_simulated_clock(faults):
    res = run(faults, ("timed", 0), [])
    assert res.value == Atom("timeout") and res.counters.clock == 50


def test_faults_are_deterministic(faults):
    for entry in (("bare_remove", 0), ("uninit", 0), ("deadlock", 0)):
        assert run(faults, entry, []).as_term() == run(faults, entry, []).as_term()


def test_entry_must_be_exported():
    with pytest.raises(KeyError):
        run(load_fixture("catches"), ("nope", 1), [1])


def _corpus_runs():
    out = []
    for name in CLEAN_FIXTURES:
        m = load_fixture(name)
        for entry in m.exports:
            for args in sample_inputs(name, tuple(entry), 5, seed=1):
                out.append((name, tuple(entry), args))
    return out


@pytest.mark.parametrize("name,entry,args", _corpus_runs())
def test_determinism_and_mailbox_conservation(name, entry, args):
    m = load_fixture(name)
    a, b = run(m, entry, args), run(m, entry, args)
    assert a.as_term() == b.as_term()
    c = a.counters
    assert c.messages_sent - c.messages_removed == a.mailbox_residue


@settings(max_examples=60)
@given(st.integers(0, 200))
def test_receive_loop_mailbox_and_counter(n):
    m = pass_receive_loop(load_fixture("sums"), ("sum_to_n", 1), PassConfig(seed=2))
    res = run(m, ("sum_to_n", 1), [n])
    assert res.value == n * (n + 1) // 2
    assert res.mailbox_residue == 0
    assert res.counters.messages_sent == res.counters.messages_removed


def test_input_generator_defaults():
    import random
    assert len(input_gen("nope", ("f", 3))(random.Random(0))) == 3
