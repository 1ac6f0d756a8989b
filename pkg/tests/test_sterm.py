import random

import pytest
from hypothesis import given, settings

from beamobf.sterm import (MAX_DEPTH, Atom, Bin, ImproperList, TermSyntaxError, format_term,
                           parse_forms, parse_term, print_form, same)
from strategies import random_term, terms


def test_label_form():
    assert parse_forms("{label,2}.") == [(Atom("label"), 2)]


def test_empty_list():
    assert parse_forms("[].") == [[]]


def test_literal_binary_operand():
    t = parse_term("{move,{literal,<<3,4,5>>},{x,0}}.")
    assert t == (Atom("move"), (Atom("literal"), Bin(bytes([3, 4, 5]))), (Atom("x"), 0))


def test_print_label():
    assert print_form((Atom("label"), 2)) == "{label,2}.\n"


def test_print_quoted_atom():
    assert print_form(Atom("Mod Name")) == "'Mod Name'.\n"


def test_print_binary():
    assert print_form(Bin(bytes([3, 4, 5]))) == "<<3,4,5>>.\n"


def test_reserved_word_atoms_are_quoted():
    assert format_term(Atom("catch")) == "'catch'"
    assert parse_term("'catch'") == Atom("catch")


def test_strings_are_byte_lists():
    assert parse_term('"ab"') == [97, 98]
    assert format_term([97, 98]) == '"ab"'


def test_comments_and_positions():
    forms = parse_forms("% header\n{a,1}.\n  b.\n", positions=True)
    assert [t for t, _ in forms] == [(Atom("a"), 1), Atom("b")]
    assert forms[1][1] == (3, 3)


def test_improper_list():
    t = parse_term("[1,2|x]")
    assert t == ImproperList((1, 2), Atom("x"))
    assert format_term(t) == "[1,2|x]"


def test_bit_string_size_segment():
    t = parse_term("<<5:3>>")
    assert t == Bin(bytes([0b10100000]), 3)
    assert same(parse_term(format_term(t)), t)


def test_big_integers_and_floats():
    assert parse_term("123456789012345678901234567890") == 123456789012345678901234567890
    assert format_term(0.1) == "0.1"
    assert same(parse_term("-1.5e3"), -1500.0)


@pytest.mark.parametrize("text", ["{a,1", "{a,1}", "[1,2}.", "'abc", "<<1,2.", "{a,#}."])
def test_syntax_errors_report_position(text):
    with pytest.raises(TermSyntaxError) as e:
        parse_forms(text)
    assert e.value.line >= 1 and e.value.col >= 1


def test_depth_limit():
    with pytest.raises(TermSyntaxError):
        parse_term("[" * (MAX_DEPTH + 5) + "]" * (MAX_DEPTH + 5))


def test_bin_invariant():
    with pytest.raises(ValueError):
        Bin(b"\x01\x02", 5)


@settings(max_examples=1500)
@given(terms)
def test_print_parse_round_trip(t):
    text = print_form(t)
    back = parse_forms(text)
    assert len(back) == 1 and same(back[0], t)


def test_round_trip_ten_thousand_seeded_terms():
    rng = random.Random(20240601)
    for _ in range(10_000):
        t = random_term(rng)
        assert same(parse_forms(print_form(t))[0], t)
