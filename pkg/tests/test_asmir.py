import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamobf.asmir import (OPAQUE_MANIFEST, AsmError, AtomOp, FunctionDef, IntOp, ModuleAsm, X, Y,
                           construction_spans, decode_instruction, decode_module, encode_module,
                           format_module, ins, label_of, mklabel, parse_module)
from beamobf.corpus import FIXTURES, fixture_text, load_fixture
from beamobf.obf import gen_mutable_tuple_setters
from beamobf.sterm import Atom, parse_forms, parse_term


@pytest.mark.parametrize("name", FIXTURES)
def test_fixture_reprint_fixpoint(name):
    once = format_module(parse_module(fixture_text(name)))
    assert format_module(parse_module(once)) == once


@pytest.mark.parametrize("name", FIXTURES)
def test_opcode_table_soundness(name):
    for f in load_fixture(name).functions:
        for i in f.body:
            assert i.known or i.opcode in OPAQUE_MANIFEST, i


@pytest.mark.parametrize("name", FIXTURES)
def test_decode_encode_identity_on_fixtures(name):
    m = load_fixture(name)
    assert decode_module(encode_module(m)) == m


def test_dumpbinmatch_shape():
    m = load_fixture("dumpbeam")
    (f,) = m.functions
    assert (f.name, f.arity, f.entry) == ("dumpbinmatch", 0, 2)
    assert len(f.body) - f.labels()[f.entry] == 8


def test_empty_module():
    m = ModuleAsm("t")
    assert encode_module(m) == (Atom("t"), [], [], [], 0)
    assert decode_module(encode_module(m)) == m


def _reference_setter_term(n):
    # Independent transcription of the setter generator, evaluated for N = n.
    names = [Atom(f"do{x}") for x in range(1, n + 1)]
    mod = Atom("put_tuple_elem")
    funcs = [(Atom("function"), names[x - 1], 2, x * 2,
              [(Atom("label"), x * 2 - 1), (Atom("func_info"), (Atom("atom"), mod),
                                             (Atom("atom"), names[x - 1]), 2),
               (Atom("label"), x * 2),
               (Atom("set_tuple_element"), (Atom("x"), 1), (Atom("x"), 0), x - 1),
               Atom("return")]) for x in range(1, n + 1)]
    funcs += [(Atom("function"), Atom("module_info"), 0, n * 2 + 2,
               [(Atom("label"), n * 2 + 1),
                (Atom("func_info"), (Atom("atom"), mod), (Atom("atom"), Atom("module_info")), 0),
                (Atom("label"), n * 2 + 2), (Atom("move"), (Atom("atom"), mod), (Atom("x"), 0)),
                (Atom("call_ext_only"), 1,
                 (Atom("extfunc"), Atom("erlang"), Atom("get_module_info"), 1))]),
              (Atom("function"), Atom("module_info"), 1, n * 2 + 4,
               [(Atom("label"), n * 2 + 3),
                (Atom("func_info"), (Atom("atom"), mod), (Atom("atom"), Atom("module_info")), 1),
                (Atom("label"), n * 2 + 4), (Atom("move"), (Atom("x"), 0), (Atom("x"), 1)),
                (Atom("move"), (Atom("atom"), mod), (Atom("x"), 0)),
                (Atom("call_ext_only"), 2,
                 (Atom("extfunc"), Atom("erlang"), Atom("get_module_info"), 2))])]
    exports = [(nm, 2) for nm in names] + [(Atom("module_info"), 0), (Atom("module_info"), 1)]
    return mod, exports, [], funcs


@pytest.mark.parametrize("n", [1, 3])
def test_setter_module_matches_generator(n):
    mod, exports, attrs, funcs = _reference_setter_term(n)
    got = encode_module(gen_mutable_tuple_setters(n))
    assert got[:4] == (mod, exports, attrs, funcs)
    m = decode_module((mod, exports, attrs, funcs, 2 * n + 4))
    do1 = m.function("do1", 2)
    assert do1.body[-2:] == (ins("set_tuple_element", X(1), X(0), IntOp(0, tagged=False)),
                             ins("return"))


@pytest.mark.parametrize("n", [1, 3])
def test_setter_golden_files(n):
    from pathlib import Path
    golden = Path(__file__).parent / "golden" / f"setters_n{n}.S"
    text = golden.read_text()
    assert format_module(gen_mutable_tuple_setters(n)) == text
    assert format_module(parse_module(text)) == text


def test_duplicate_label_rejected():
    text = fixture_text("opseq").replace("{label,3}", "{label,1}")
    with pytest.raises(AsmError):
        parse_module(text)


def test_arity_mismatch_rejected():
    with pytest.raises(AsmError):
        decode_instruction(parse_term("{move,{x,0}}"))


def test_malformed_module_rejected():
    with pytest.raises(AsmError):
        decode_module([(Atom("m"), [], [], Atom("oops"), 0)])


def test_unknown_opcode_kept_opaque():
    i = decode_instruction(parse_term("{frobnicate,{x,0},[1,2]}"))
    assert i.opaque and i.opcode == "frobnicate"
    m = parse_module(fixture_text("opseq").replace("return.", "{frobnicate,{x,0},[1,2]}.\n    return.", 1))
    assert format_module(parse_module(format_module(m))) == format_module(m)


def test_function_invariants():
    with pytest.raises(AsmError):
        FunctionDef("f", 0, 2, (ins("return"),))
    with pytest.raises(AsmError):
        FunctionDef("f", 0, 2, (mklabel(1), mklabel(2), ins("return")))


def test_label_count_restamped_on_encode():
    m = load_fixture("opseq")
    f = m.function("mk", 1)
    grown = m.replace_function(f.with_body(f.body + (mklabel(9), ins("return"))))
    assert encode_module(grown)[4] == 9


def test_tuple_span_complete():
    (span,) = construction_spans(load_fixture("opseq").function("mk", 1))[0]
    assert span.kind == "tuple" and len(span.members) == 2 and span.complete and span.contiguous


def test_empty_tuple_span():
    (span,) = construction_spans(load_fixture("opseq").function("mk0", 0))[0]
    assert span.members == () and span.complete


def test_register_sized_binary_span():
    (span,) = construction_spans(load_fixture("bins").function("mkbin_dyn", 2))[0]
    assert span.declared is None and span.size_register == X(3)


def test_under_filled_span_diagnosed():
    f = load_fixture("opseq").function("mk", 1)
    body = [i for i in f.body if i != ins("put", X(1))]
    spans, diags = construction_spans(f.with_body(body))
    assert not spans[0].complete and len(diags) == 1


@pytest.mark.parametrize("name", FIXTURES)
def test_constant_spans_contiguous_in_fixtures(name):
    for f in load_fixture(name).functions:
        for s in construction_spans(f)[0]:
            if s.declared is not None:
                assert s.contiguous


# Random modules: straight-line functions over a small instruction palette.

regs = st.one_of(st.integers(0, 1023).map(X), st.integers(0, 1023).map(Y))
plain = st.one_of(
    st.builds(lambda a, b: ins("move", a, b), regs, regs),
    st.builds(lambda v, b: ins("move", IntOp(v), b), st.integers(-10**20, 10**20), regs),
    st.builds(lambda r: ins("init", r), st.integers(0, 20).map(Y)),
)


@st.composite
def modules(draw):
    nfun = draw(st.integers(0, 4))
    funcs, label = [], 1
    for k in range(nfun):
        body = [mklabel(label), ins("func_info", AtomOp("m"), AtomOp(f"f{k}"), IntOp(0, False)),
                mklabel(label + 1)]
        body += draw(st.lists(plain, max_size=6)) + [ins("return")]
        funcs.append(FunctionDef(f"f{k}", 0, label + 1, tuple(body)))
        label += 2
    exports = tuple((f.name, 0) for f in funcs if draw(st.booleans()))
    return ModuleAsm("m", exports, (), tuple(funcs), label - 1)


@settings(max_examples=300)
@given(modules())
def test_decode_encode_identity_random(m):
    assert decode_module(encode_module(m)) == m
    assert parse_module(format_module(m)) == m


def test_label_of():
    assert label_of(mklabel(4)) == 4 and label_of(ins("return")) is None
    assert parse_forms("{label,4}.")[0] == (Atom("label"), 4)
