"""Reader and printer for the Erlang literal-term syntax of ``.S`` files.

Term representation:

* ``Atom`` for atoms,
* ``int`` / ``float`` for numbers,
* ``tuple`` for Erlang tuples,
* ``list`` for proper lists (strings are lists of byte values),
* ``ImproperList`` for lists with a non-nil tail,
* ``Bin`` for binaries and bit strings.

Python ``bool`` is never a term; use ``Atom("true")``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Union

MAX_DEPTH = 10_000


@dataclass(frozen=True, slots=True)
class Atom:
    name: str

    def __repr__(self) -> str:
        return f"Atom({self.name!r})"


@dataclass(frozen=True, slots=True)
class Bin:
    data: bytes
    bits: int = -1

    def __post_init__(self) -> None:
        if self.bits < 0:
            object.__setattr__(self, "bits", 8 * len(self.data))
        n = len(self.data)
        if n == 0:
            if self.bits != 0:
                raise ValueError("empty binary must have zero bits")
        elif not (8 * (n - 1) < self.bits <= 8 * n):
            raise ValueError(f"bit length {self.bits} inconsistent with {n} bytes")
        rest = self.bits % 8
        if rest and self.data[-1] & ((1 << (8 - rest)) - 1):
            raise ValueError("padding bits of a bit string must be zero")

    @property
    def is_binary(self) -> bool:
        return self.bits % 8 == 0


@dataclass(frozen=True, slots=True)
class ImproperList:
    items: tuple
    tail: object

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError("improper list needs at least one element")
        if isinstance(self.tail, list):
            raise ValueError("tail is a proper list; use a flat list instead")


Term = Union[Atom, int, float, tuple, list, ImproperList, Bin]

NIL: list = []
TRUE = Atom("true")
FALSE = Atom("false")


class TermSyntaxError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


def same(a: object, b: object) -> bool:
    """Structural equality that keeps ints and floats apart."""
    stack = [(a, b)]
    while stack:
        x, y = stack.pop()
        if type(x) is not type(y):
            return False
        if isinstance(x, (tuple, list)):
            if len(x) != len(y):
                return False
            stack.extend(zip(x, y))
        elif isinstance(x, ImproperList):
            stack.append((x.items, y.items))
            stack.append((x.tail, y.tail))
        elif isinstance(x, float):
            if not (x == y or (math.isnan(x) and math.isnan(y))):
                return False
            if math.copysign(1.0, x) != math.copysign(1.0, y):
                return False
        elif x != y:
            return False
    return True


# ---------------------------------------------------------------------------
# Lexer

RESERVED = frozenset(
    "after and andalso band begin bnot bor bsl bsr bxor case catch cond div "
    "else end fun if let maybe not of or orelse receive rem try when xor".split()
)

_UNQUOTED = re.compile(r"[a-z][A-Za-z0-9_@]*\Z")

_PUNCT = ["=:=", "=/=", "<<", ">>", "->", ":=", "=<", ">=", "==", "/=",
          "{", "}", "[", "]", "(", ")", ",", "|", ":", "/", ";", "=", "<",
          ">", "+", "*", "#"]

_ESCAPES = {"n": 10, "t": 9, "r": 13, "b": 8, "f": 12, "v": 11, "e": 27,
            "s": 32, "d": 127, "\\": 92, "'": 39, '"': 34}


@dataclass(frozen=True, slots=True)
class Token:
    kind: str  # atom var int float string char punct dot eof
    value: object
    line: int
    col: int


class Lexer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def _error(self, msg: str) -> TermSyntaxError:
        return TermSyntaxError(msg, self.line, self.col)

    def _advance(self, n: int = 1) -> None:
        for ch in self.text[self.pos:self.pos + n]:
            if ch == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
        self.pos += n

    def tokens(self) -> Iterator[Token]:
        text = self.text
        while True:
            # whitespace and comments
            while self.pos < len(text):
                ch = text[self.pos]
                if ch in " \t\r\n\f":
                    self._advance()
                elif ch == "%":
                    end = text.find("\n", self.pos)
                    self._advance((len(text) if end < 0 else end) - self.pos)
                else:
                    break
            if self.pos >= len(text):
                yield Token("eof", None, self.line, self.col)
                return
            line, col = self.line, self.col
            ch = text[self.pos]
            if ch == ".":
                nxt = text[self.pos + 1:self.pos + 2]
                if nxt == "" or nxt in " \t\r\n%":
                    self._advance()
                    yield Token("dot", None, line, col)
                    continue
                raise self._error("unexpected '.'")
            if ch.isdigit():
                yield self._number(line, col)
            elif ch.isalpha() and ch.islower():
                m = re.compile(r"[a-z][A-Za-z0-9_@]*").match(text, self.pos)
                self._advance(m.end() - self.pos)
                yield Token("atom", m.group(), line, col)
            elif ch == "_" or (ch.isalpha() and ch.isupper()):
                m = re.compile(r"[A-Z_][A-Za-z0-9_@]*").match(text, self.pos)
                self._advance(m.end() - self.pos)
                yield Token("var", m.group(), line, col)
            elif ch == "'":
                yield Token("atom", self._quoted("'"), line, col)
            elif ch == '"':
                yield Token("string", self._quoted('"'), line, col)
            elif ch == "$":
                self._advance()
                if self.pos >= len(text):
                    raise self._error("unterminated character literal")
                if text[self.pos] == "\\":
                    yield Token("char", self._escape(), line, col)
                else:
                    c = ord(text[self.pos])
                    self._advance()
                    yield Token("char", c, line, col)
            elif ch == "-" and not text.startswith("->", self.pos):
                self._advance()
                yield Token("punct", "-", line, col)
            else:
                for p in _PUNCT:
                    if text.startswith(p, self.pos):
                        self._advance(len(p))
                        yield Token("punct", p, line, col)
                        break
                else:
                    raise self._error(f"bad character {ch!r}")

    def _number(self, line: int, col: int) -> Token:
        text = self.text
        m = re.compile(r"(\d+)#([0-9A-Za-z]+)").match(text, self.pos)
        if m:
            base = int(m.group(1))
            if not 2 <= base <= 36:
                raise self._error(f"bad base {base}")
            try:
                value = int(m.group(2), base)
            except ValueError:
                raise self._error(f"bad digits for base {base}") from None
            self._advance(m.end() - self.pos)
            return Token("int", value, line, col)
        m = re.compile(r"\d+(\.\d+([eE][+-]?\d+)?)?").match(text, self.pos)
        self._advance(m.end() - self.pos)
        if m.group(1):
            return Token("float", float(m.group()), line, col)
        return Token("int", int(m.group()), line, col)

    def _escape(self) -> int:
        text = self.text
        self._advance()  # backslash
        if self.pos >= len(text):
            raise self._error("unterminated escape")
        ch = text[self.pos]
        if ch in "01234567":
            m = re.compile(r"[0-7]{1,3}").match(text, self.pos)
            self._advance(m.end() - self.pos)
            return int(m.group(), 8)
        if ch == "x":
            m = re.compile(r"x\{([0-9A-Fa-f]+)\}|x([0-9A-Fa-f]{2})").match(text, self.pos)
            if not m:
                raise self._error("bad \\x escape")
            self._advance(m.end() - self.pos)
            return int(m.group(1) or m.group(2), 16)
        if ch == "^":
            self._advance()
            c = ord(text[self.pos]) & 31
            self._advance()
            return c
        self._advance()
        return _ESCAPES.get(ch, ord(ch))

    def _quoted(self, q: str):
        text = self.text
        self._advance()
        out = []
        while True:
            if self.pos >= len(text):
                raise self._error("unterminated " + ("atom" if q == "'" else "string"))
            ch = text[self.pos]
            if ch == q:
                self._advance()
                break
            if ch == "\\":
                out.append(self._escape())
            else:
                out.append(ord(ch))
                self._advance()
        if q == "'":
            return "".join(map(chr, out))
        return out


# ---------------------------------------------------------------------------
# Parser (iterative so deep nesting never hits the interpreter stack)


class _Parser:
    def __init__(self, text: str):
        self.toks = list(Lexer(text).tokens())
        self.i = 0

    def peek(self) -> Token:
        return self.toks[self.i]

    def next(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def error(self, tok: Token, msg: str) -> TermSyntaxError:
        return TermSyntaxError(msg, tok.line, tok.col)

    def expect(self, value: str) -> Token:
        t = self.next()
        if t.kind != "punct" or t.value != value:
            raise self.error(t, f"expected {value!r}, got {_describe(t)}")
        return t

    def forms(self) -> list[tuple[object, tuple[int, int]]]:
        out = []
        while self.peek().kind != "eof":
            start = self.peek()
            after = self.toks[self.i + 1] if self.i + 1 < len(self.toks) else start
            if start.kind == "punct" and start.value == "-" and after.kind == "atom":
                term = self.attribute()
            else:
                term = self.term()
            t = self.next()
            if t.kind != "dot":
                raise self.error(t, f"expected '.' after form, got {_describe(t)}")
            out.append((term, (start.line, start.col)))
        return out

    def attribute(self):
        # -name(Term). is read as {name, Term}
        self.expect("-")
        t = self.next()
        if t.kind != "atom":
            raise self.error(t, "expected attribute name")
        self.expect("(")
        value = self.term()
        self.expect(")")
        return (Atom(t.value), value)

    def term(self):
        """Parse one term with an explicit container stack."""
        # frames: [kind, items, tail, start_token]
        stack: list[list] = []
        while True:
            t = self.next()
            value = None
            if t.kind == "punct" and t.value == "{":
                if self.peek().kind == "punct" and self.peek().value == "}":
                    self.next()
                    value = ()
                else:
                    stack.append(["tuple", [], None, t])
                    if len(stack) > MAX_DEPTH:
                        raise self.error(t, "nesting too deep")
                    continue
            elif t.kind == "punct" and t.value == "[":
                if self.peek().kind == "punct" and self.peek().value == "]":
                    self.next()
                    value = []
                else:
                    stack.append(["list", [], None, t])
                    if len(stack) > MAX_DEPTH:
                        raise self.error(t, "nesting too deep")
                    continue
            elif t.kind == "punct" and t.value == "<<":
                value = self.binary(t)
            else:
                value = self.scalar(t)
            # reduce completed values into enclosing containers
            while True:
                if not stack:
                    return value
                frame = stack[-1]
                if frame[2] == "|":
                    frame[2] = ("tail", value)
                else:
                    frame[1].append(value)
                sep = self.next()
                if sep.kind == "punct" and sep.value == ",":
                    if frame[2] is not None:
                        raise self.error(sep, "unexpected ',' after list tail")
                    break
                if frame[0] == "list" and sep.kind == "punct" and sep.value == "|" and frame[2] is None:
                    frame[2] = "|"
                    break
                closer = "}" if frame[0] == "tuple" else "]"
                if sep.kind == "punct" and sep.value == closer:
                    stack.pop()
                    if frame[0] == "tuple":
                        value = tuple(frame[1])
                    elif frame[2] is None:
                        value = frame[1]
                    else:
                        tail = frame[2][1]
                        if isinstance(tail, list):
                            value = frame[1] + tail
                        elif isinstance(tail, ImproperList):
                            value = ImproperList(tuple(frame[1]) + tail.items, tail.tail)
                        else:
                            value = ImproperList(tuple(frame[1]), tail)
                    continue
                raise self.error(sep, f"expected ',' or {closer!r}, got {_describe(sep)}")

    def scalar(self, t: Token):
        if t.kind == "atom":
            return Atom(t.value)
        if t.kind in ("int", "float"):
            return t.value
        if t.kind == "char":
            return t.value
        if t.kind == "string":
            chars = list(t.value)
            # adjacent string literals concatenate
            while self.peek().kind == "string":
                chars.extend(self.next().value)
            return chars
        if t.kind == "punct" and t.value in ("-", "+"):
            n = self.next()
            if n.kind in ("int", "float", "char"):
                return -n.value if t.value == "-" else n.value
            raise self.error(n, "expected number after sign")
        raise self.error(t, f"unexpected {_describe(t)}")

    def binary(self, start: Token) -> Bin:
        acc = 0
        nbits = 0
        if self.peek().kind == "punct" and self.peek().value == ">>":
            self.next()
            return Bin(b"")
        while True:
            t = self.next()
            if t.kind == "string":
                values = [(c, 8) for c in t.value]
            else:
                v = self.scalar(t)
                if not isinstance(v, int):
                    raise self.error(t, "binary segment must be an integer or string")
                size = 8
                if self.peek().kind == "punct" and self.peek().value == ":":
                    self.next()
                    s = self.next()
                    if s.kind != "int":
                        raise self.error(s, "segment size must be an integer")
                    size = s.value
                values = [(v, size)]
            for v, size in values:
                acc = (acc << size) | (v & ((1 << size) - 1))
                nbits += size
            sep = self.next()
            if sep.kind == "punct" and sep.value == ",":
                continue
            if sep.kind == "punct" and sep.value == ">>":
                break
            if sep.kind == "eof":
                raise self.error(start, "unterminated binary")
            raise self.error(sep, f"expected ',' or '>>', got {_describe(sep)}")
        pad = (-nbits) % 8
        nbytes = (nbits + pad) // 8
        return Bin((acc << pad).to_bytes(nbytes, "big"), nbits)


def _describe(t: Token) -> str:
    if t.kind == "eof":
        return "end of input"
    if t.kind == "dot":
        return "'.'"
    return repr(t.value)


def parse_forms(text: str, positions: bool = False) -> list:
    """Parse a sequence of dot-terminated terms.

    With ``positions=True`` each entry is ``(term, (line, col))``.
    """
    forms = _Parser(text).forms()
    return forms if positions else [t for t, _ in forms]


def parse_term(text: str):
    forms = parse_forms(text if text.rstrip().endswith(".") else text + ".")
    if len(forms) != 1:
        raise TermSyntaxError(f"expected one term, got {len(forms)}", 1, 1)
    return forms[0]


# ---------------------------------------------------------------------------
# Printer


def format_atom(name: str) -> str:
    if _UNQUOTED.match(name) and name not in RESERVED:
        return name
    out = []
    for ch in name:
        if ch == "'":
            out.append("\\'")
        elif ch == "\\":
            out.append("\\\\")
        elif 32 <= ord(ch) < 127:
            out.append(ch)
        else:
            out.append("\\x{%X}" % ord(ch))
    return "'" + "".join(out) + "'"


def _is_printable_string(items: list) -> bool:
    return bool(items) and all(type(c) is int and 32 <= c < 127 for c in items)


def format_string(chars: list) -> str:
    return '"' + "".join("\\" + chr(c) if c in (34, 92) else chr(c) for c in chars) + '"'


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot print non-finite float {x!r}")
    r = repr(x)
    mant, _, exp = r.partition("e")
    if "." not in mant:
        mant += ".0"
    return mant + ("e" + exp if exp else "")


def format_bin(b: Bin) -> str:
    if b.bits == 0:
        return "<<>>"
    whole = b.bits // 8
    parts = [str(v) for v in b.data[:whole]]
    rest = b.bits % 8
    if rest:
        parts.append(f"{b.data[-1] >> (8 - rest)}:{rest}")
    return "<<" + ",".join(parts) + ">>"


def format_term(term) -> str:
    """Render a term without the trailing dot."""
    out: list[str] = []
    # work items: a term to render, or a literal string to emit
    work: list = [(term, 0)]
    while work:
        entry = work.pop()
        if isinstance(entry, str):
            out.append(entry)
            continue
        item, depth = entry
        if depth > MAX_DEPTH:
            raise ValueError("term nesting too deep")
        t = type(item)
        if t is Atom:
            out.append(format_atom(item.name))
        elif t is int:
            out.append(str(item))
        elif t is float:
            out.append(format_float(item))
        elif t is Bin:
            out.append(format_bin(item))
        elif t is tuple:
            seq = ["{"]
            for i, e in enumerate(item):
                if i:
                    seq.append(",")
                seq.append((e, depth + 1))
            seq.append("}")
            work.extend(reversed(seq))
        elif t is list:
            if _is_printable_string(item):
                out.append(format_string(item))
                continue
            seq = ["["]
            for i, e in enumerate(item):
                if i:
                    seq.append(",")
                seq.append((e, depth + 1))
            seq.append("]")
            work.extend(reversed(seq))
        elif t is ImproperList:
            seq = ["["]
            for i, e in enumerate(item.items):
                if i:
                    seq.append(",")
                seq.append((e, depth + 1))
            seq.extend(["|", (item.tail, depth + 1), "]"])
            work.extend(reversed(seq))
        else:
            raise TypeError(f"not a term: {item!r}")
    return "".join(out)


def print_form(term) -> str:
    return format_term(term) + ".\n"


def print_forms(terms) -> str:
    return "".join(print_form(t) for t in terms)
