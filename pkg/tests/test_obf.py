import pytest

from beamobf.asmir import construction_spans, format_module, parse_module
from beamobf.cfg import build_cfg, check_receive_sequencing
from beamobf.corpus import CLEAN_FIXTURES, SCHEMA_ENTRIES, input_gen, load_fixture
from beamobf.miniemu import run, run_differential
from beamobf.obf import (MAX_SETTERS, ExportLimitError, ObfError, PassConfig,
                         gen_mutable_tuple_setters, parse_pipeline, pass_interleave_constructions,
                         pass_many_to_many_catch, pass_multi_entry_receive,
                         pass_multi_exit_receive, pass_receive_loop, pass_redundant_wait_timeout,
                         receive_targets, run_pipeline)
from beamobf.recvloop import recognize_receive_loop
from beamobf.sterm import Atom, parse_forms
from beamobf.vlite import validate

RECEIVE = [pass_receive_loop, pass_multi_exit_receive, pass_multi_entry_receive,
           pass_redundant_wait_timeout]


def _clean(m):
    assert validate(m) == []
    for f in m.functions:
        assert check_receive_sequencing(build_cfg(f)) == []
    assert parse_module(format_module(m)) == m


@pytest.mark.parametrize("p", RECEIVE, ids=lambda p: p.__name__)
@pytest.mark.parametrize("module,key", SCHEMA_ENTRIES)
def test_receive_pass_clean_and_equivalent(p, module, key):
    m = load_fixture(module)
    out = p(m, key, PassConfig(seed=11))
    _clean(out)
    rep = run_differential(m, out, key, input_gen(module, key), trials=30, seed=5,
                           compare_mailbox=True)
    assert rep.equivalent, rep.mismatches[:1]


@pytest.mark.parametrize("p", RECEIVE, ids=lambda p: p.__name__)
def test_passes_are_deterministic(p):
    m = load_fixture("sums")
    a = p(m, ("sum_to_n", 1), PassConfig(seed=3))
    b = p(m, ("sum_to_n", 1), PassConfig(seed=3))
    assert format_module(a) == format_module(b)


def test_stacked_receive_passes():
    m = load_fixture("sums")
    out = m
    for p in RECEIVE:
        out = p(out, ("sum_acc", 2), PassConfig(seed=1))
    plan = recognize_receive_loop(out.function("sum_acc", 2))
    assert plan.exits == 2 and plan.second_entry is not None and len(plan.waits) >= 2
    _clean(out)
    assert run_differential(m, out, ("sum_acc", 2), input_gen("sums", ("sum_acc", 2)),
                            trials=30).equivalent


def test_post_test_is_do_while():
    m = load_fixture("sums")
    out = pass_receive_loop(m, ("sum_to_n", 1), PassConfig(post_test=True))
    assert recognize_receive_loop(out.function("sum_to_n", 1)).post_test
    for n in range(1, 30):
        assert run(out, ("sum_to_n", 1), [n]).value == n * (n + 1) // 2
    # the body runs once before the bound is checked
    assert run(out, ("sum_to_n", 1), [0]).key() != run(m, ("sum_to_n", 1), [0]).key()


def test_multi_entry_false_guard():
    m = load_fixture("sums")
    out = pass_multi_entry_receive(m, ("sum_to_n", 1), PassConfig(guard="false"))
    assert recognize_receive_loop(out.function("sum_to_n", 1)).second_entry == ("false",)
    assert run_differential(m, out, ("sum_to_n", 1), trials=20).equivalent


def test_receive_pass_rejects_non_schema():
    with pytest.raises(ObfError):
        pass_receive_loop(load_fixture("shapes"), ("pick", 2))
    with pytest.raises(ObfError):
        pass_receive_loop(load_fixture("sums"), ("nope", 1))


def test_receive_targets():
    assert receive_targets(load_fixture("sums"), PassConfig()) == [
        ("sum_to_n", 1), ("sum_acc", 2), ("prod_to_n", 1)]
    assert receive_targets(load_fixture("sums"), PassConfig(targets=[("sum_acc", 2)])) == [
        ("sum_acc", 2)]
    assert receive_targets(load_fixture("shapes"), PassConfig()) == []


def test_many_to_many_catch():
    m = load_fixture("catches")
    out = pass_many_to_many_catch(m, PassConfig())
    _clean(out)
    for key in m.exports:
        assert run_differential(m, out, tuple(key), input_gen("catches", tuple(key)),
                                trials=40).equivalent
    with pytest.raises(ObfError):
        pass_many_to_many_catch(load_fixture("sums"))


@pytest.mark.parametrize("intensity", [0, 1, 2, 3])
@pytest.mark.parametrize("reroute", [False, True])
def test_interleave_constructions(intensity, reroute):
    m = load_fixture("bins")
    cfg = PassConfig(seed=intensity, intensity=intensity, reroute_sizes=reroute)
    out = pass_interleave_constructions(m, cfg)
    _clean(out)
    if intensity == 0 and not reroute:
        assert out == m
    for f in out.functions:
        spans, _ = construction_spans(f)
        if intensity > 0:
            assert any(s.foreign for s in spans if s.members) or not any(
                s.members for s in construction_spans(m.function(*f.key))[0])
    for key in m.exports:
        assert run_differential(m, out, tuple(key), input_gen("bins", tuple(key)),
                                trials=25).equivalent


@pytest.mark.parametrize("name", CLEAN_FIXTURES)
def test_interleave_keeps_every_fixture_clean(name):
    m = load_fixture(name)
    out = pass_interleave_constructions(m, PassConfig(intensity=3, reroute_sizes=True))
    assert validate(out) == []


def test_config_validation():
    with pytest.raises(ValueError):
        PassConfig(intensity=-1)
    with pytest.raises(ValueError):
        PassConfig(guard="maybe")
    with pytest.raises(ValueError):
        PassConfig(seed=1 << 64)
    assert PassConfig(seed=(1 << 64) - 1).seed == (1 << 64) - 1


def test_pipeline_parsing():
    terms = parse_forms("[{receive_loop,[{seed,3}]},{many_to_many_catch,[]}].")
    assert parse_pipeline(terms) == [("receive_loop", [(Atom("seed"), 3)]),
                                     ("many_to_many_catch", [])]
    for bad in ("[receive_loop].", "[{nope,[]}].", "[{receive_loop,seed}]."):
        with pytest.raises(ObfError):
            parse_pipeline(parse_forms(bad))
    # a file of bare step forms reads as one step per form
    assert parse_pipeline(parse_forms("{receive_loop,[]}.")) == [("receive_loop", [])]


def test_pipeline_parameter_errors():
    m = load_fixture("sums")
    for bad in ("[{receive_loop,[{seed,a}]}].", "[{receive_loop,[{colour,red}]}].",
                "[{receive_loop,[{post_test,yes}]}].", "[{receive_loop,[{intensity,-2}]}]."):
        with pytest.raises(ObfError):
            run_pipeline(m, parse_forms(bad))
    with pytest.raises(ObfError):
        run_pipeline(load_fixture("shapes"), parse_forms("[{receive_loop,[]}]."))


def test_pipeline_runs_all_targets():
    m = load_fixture("sums")
    out = run_pipeline(m, parse_forms(
        "[{receive_loop,[]},{multi_exit_receive,[{targets,[{sum_acc,2}]}]}]."))
    assert all(recognize_receive_loop(f) is not None for f in out.functions)
    assert recognize_receive_loop(out.function("sum_acc", 2)).exits == 2
    assert recognize_receive_loop(out.function("sum_to_n", 1)).exits == 1


def test_setter_limits():
    assert MAX_SETTERS == 1 << 19
    with pytest.raises(ExportLimitError):
        gen_mutable_tuple_setters(MAX_SETTERS + 1)
    for bad in (0, -3, 2.0, True):
        with pytest.raises(ValueError):
            gen_mutable_tuple_setters(bad)


def test_setters_validate_and_mutate():
    m = gen_mutable_tuple_setters(4)
    assert validate(m) == []
    assert len(m.exports) == 6 and m.label_count == 2 * 4 + 4
