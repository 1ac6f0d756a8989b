from __future__ import annotations

import struct
from dataclasses import dataclass

from .sterm import Atom, format_term, parse_term


class PatchError(ValueError):
    pass


class ChunkError(ValueError):
    pass


@dataclass(frozen=True)
class PatchEntry:
    offset: int
    old: int
    new: int


@dataclass(frozen=True)
class PatchSet:
    entries: tuple = ()

    def __post_init__(self):
        prev = -1
        for e in self.entries:
            if e.offset <= prev:
                raise PatchError("patch offsets must be strictly increasing")
            if not (0 <= e.old <= 255 and 0 <= e.new <= 255):
                raise PatchError(f"byte value out of range at offset {e.offset}")
            prev = e.offset

    def __len__(self) -> int:
        return len(self.entries)

    def reversed(self) -> "PatchSet":
        return PatchSet(tuple(PatchEntry(e.offset, e.new, e.old) for e in self.entries))

    def as_term(self) -> list:
        return [(e.offset, e.old, e.new) for e in self.entries]

    def to_text(self) -> str:
        return format_term(self.as_term()) + ".\n"

    @classmethod
    def from_term(cls, t) -> "PatchSet":
        if not isinstance(t, list):
            raise PatchError("a patch set is a list of {Offset,Old,New} tuples")
        out = []
        for e in t:
            if not (isinstance(e, tuple) and len(e) == 3 and all(type(v) is int for v in e)):
                raise PatchError(f"bad patch entry {format_term(e)}")
            out.append(PatchEntry(*e))
        return cls(tuple(out))

    @classmethod
    def from_text(cls, text: str) -> "PatchSet":
        text = text.strip()
        return cls.from_term(parse_term(text[:-1] if text.endswith(".") else text))


def diff(a: bytes, b: bytes) -> PatchSet:
    """Byte-for-byte difference of two equal-length buffers."""
    if len(a) != len(b):
        raise PatchError(f"buffers differ in length ({len(a)} vs {len(b)})")
    return PatchSet(tuple(PatchEntry(k, x, y) for k, (x, y) in enumerate(zip(a, b)) if x != y))


def apply_patch(a: bytes, p: PatchSet, verify: bool = True) -> bytes:
    """A patched copy of ``a``; nothing is written unless every entry checks out."""
    for e in p.entries:
        if e.offset >= len(a):
            raise PatchError(f"offset {e.offset} is beyond the end of a {len(a)}-byte buffer")
        if verify and a[e.offset] != e.old:
            raise PatchError(f"offset {e.offset} holds {a[e.offset]}, patch expects {e.old}")
    out = bytearray(a)
    for e in p.entries:
        out[e.offset] = e.new
    return bytes(out)


def diff_runs(p: PatchSet) -> list[tuple[int, int]]:
    """Maximal runs of adjacent differing offsets as (offset, length)."""
    runs: list[list[int]] = []
    for e in p.entries:
        if runs and runs[-1][0] + runs[-1][1] == e.offset:
            runs[-1][1] += 1
        else:
            runs.append([e.offset, 1])
    return [(o, n) for o, n in runs]


def diff_report(p: PatchSet) -> list:
    """Runs of changed bytes as terms; long runs are reported raw, not interpreted."""
    out = []
    for off, length in diff_runs(p):
        kind = "byte" if length == 1 else "opaque_block" if length >= 16 else "run"
        out.append((Atom(kind), off, length))
    return out


# ---------------------------------------------------------------------------
# Compact-term register operands

X_TAG = 0b0011


@dataclass(frozen=True)
class XReg:
    index: int

    def __str__(self) -> str:
        return f"x{self.index}"


def rewrite_register_byte(b: int):
    """Decode a one-byte x register operand; other bytes pass through as ints."""
    if not 0 <= b <= 255:
        raise ValueError(f"not a byte: {b}")
    if b & 0x0F == X_TAG:
        return XReg(b >> 4)
    return b


def encode_x(index: int) -> int:
    if not 0 <= index <= 15:
        raise ValueError(f"x{index} needs a multi-byte encoding")
    return (index << 4) | X_TAG


def register_patch(a: bytes, offset: int, index: int) -> PatchSet:
    """A one-entry patch re-pointing the x register operand at ``offset``."""
    if not isinstance(rewrite_register_byte(a[offset]), XReg):
        raise PatchError(f"byte {a[offset]} at offset {offset} is not an x register operand")
    return PatchSet((PatchEntry(offset, a[offset], encode_x(index)),))


# ---------------------------------------------------------------------------
# Container chunks


@dataclass(frozen=True)
class Chunk:
    id: str
    offset: int     # of the chunk header
    length: int     # of the payload, excluding padding

    @property
    def data_offset(self) -> int:
        return self.offset + 8


@dataclass(frozen=True)
class ChunkIndex:
    chunks: tuple
    declared_size: int

    def ids(self) -> list[str]:
        return [c.id for c in self.chunks]

    def chunk_at(self, offset: int):
        for c in self.chunks:
            if c.data_offset <= offset < c.data_offset + c.length:
                return c
        return None


def list_chunks(data: bytes) -> ChunkIndex:
    if len(data) < 12 or data[:4] != b"FOR1" or data[8:12] != b"BEAM":
        raise ChunkError("bad magic: expected FOR1 container with BEAM form")
    declared = struct.unpack(">I", data[4:8])[0]
    end = min(declared + 8, len(data))
    k, chunks = 12, []
    while k < end:
        if k + 8 > end:
            cid = data[k:k + 4].decode("latin-1")
            raise ChunkError(f"truncated chunk {cid or '?'} header at offset {k}")
        cid = data[k:k + 4].decode("latin-1")
        length = struct.unpack(">I", data[k + 4:k + 8])[0]
        if k + 8 + length > end:
            raise ChunkError(f"truncated chunk {cid} at offset {k}")
        chunks.append(Chunk(cid, k, length))
        k += 8 + (length + 3) // 4 * 4
    if declared + 8 > len(data):
        raise ChunkError(f"container declares {declared} bytes but only {len(data) - 8} follow")
    return ChunkIndex(tuple(chunks), declared)


def build_container(chunks: list[tuple[str, bytes]]) -> bytes:
    """Serialise chunks into a FOR1/BEAM container (used for fixtures)."""
    body = bytearray(b"BEAM")
    for cid, payload in chunks:
        tag = cid.encode("latin-1")
        if len(tag) != 4:
            raise ChunkError(f"chunk id must be four characters: {cid!r}")
        body += tag + struct.pack(">I", len(payload)) + payload
        body += b"\0" * (-len(payload) % 4)
    return b"FOR1" + struct.pack(">I", len(body)) + bytes(body)
