"""Hypothesis generators shared by the test modules."""
from hypothesis import strategies as st

from beamobf.sterm import Atom, Bin, ImproperList

atom_names = st.one_of(
    st.from_regex(r"[a-z][a-zA-Z0-9_@]{0,8}", fullmatch=True),
    st.text(st.characters(min_codepoint=32, max_codepoint=126), max_size=8),
)
atoms = atom_names.map(Atom)
ints = st.integers(min_value=-(1 << 70), max_value=1 << 70)
floats = st.floats(allow_nan=False, allow_infinity=False)


@st.composite
def bins(draw):
    data = draw(st.binary(max_size=6))
    if not data or draw(st.booleans()):
        return Bin(data)
    rest = draw(st.integers(1, 7))
    last = data[-1] & ~((1 << (8 - rest)) - 1) & 0xFF
    return Bin(data[:-1] + bytes([last]), 8 * (len(data) - 1) + rest)


leaves = st.one_of(atoms, ints, floats, bins())


def _extend(children):
    return st.one_of(
        st.lists(children, max_size=4).map(tuple),
        st.lists(children, max_size=4),
        st.builds(lambda items, tail: ImproperList(tuple(items), tail),
                  st.lists(children, min_size=1, max_size=3),
                  st.one_of(atoms, ints)),
    )


terms = st.recursive(leaves, _extend, max_leaves=24)


def random_term(rng, depth: int = 8):
    """A seeded term generator for high-volume round trips (depth <= ``depth``)."""
    kind = rng.randrange(8 if depth > 0 else 4)
    if kind == 0:
        alphabet = "abcXYZ _@'\\\"09é"[:-1] if rng.random() < 0.5 else "abcdefxyz_@09"
        return Atom("".join(rng.choice(alphabet) for _ in range(rng.randrange(6))))
    if kind == 1:
        return rng.randint(-(1 << 70), 1 << 70) if rng.random() < 0.3 else rng.randint(-300, 300)
    if kind == 2:
        return rng.choice([0.0, -0.0, 1.5, 1e300, 5e-324, rng.uniform(-1e6, 1e6)])
    if kind == 3:
        data = bytes(rng.randrange(256) for _ in range(rng.randrange(5)))
        return Bin(data)
    items = [random_term(rng, depth - 1) for _ in range(rng.randrange(4))]
    if kind in (4, 5):
        return tuple(items)
    if kind == 6 or not items:
        return items
    return ImproperList(tuple(items), random_term(rng, 0))
