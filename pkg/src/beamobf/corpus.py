"""The bundled .S fixtures and input generators for exercising them."""
from __future__ import annotations

import random
from importlib import resources
from typing import Callable

from .asmir import ModuleAsm, parse_module

InputGen = Callable[[random.Random], list]

FIXTURES = ("bins", "catches", "dumpbeam", "dumpbeam_broken", "dumpbeam_patch_src", "opseq",
            "recv", "shapes", "sums", "writers")

# Fixtures the structure-preserving passes should leave valid.
CLEAN_FIXTURES = tuple(f for f in FIXTURES if f != "dumpbeam_broken")

# Functions that fit the recursion schema the receive passes encode.
SCHEMA_ENTRIES = (("sums", ("sum_to_n", 1)), ("sums", ("sum_acc", 2)),
                  ("sums", ("prod_to_n", 1)))


def fixture_text(name: str) -> str:
    if name not in FIXTURES:
        raise KeyError(f"no fixture named {name!r}")
    return resources.files("beamobf").joinpath("fixtures", f"{name}.S").read_text()


def load_fixture(name: str) -> ModuleAsm:
    return parse_module(fixture_text(name))


def _ints(*ranges) -> InputGen:
    return lambda rng: [rng.randint(lo, hi) for lo, hi in ranges]


INPUTS: dict[tuple[str, str, int], InputGen] = {
    ("bins", "mkbin", 1): _ints((0, 65535)),
    ("bins", "mkbin_bits", 1): _ints((0, 65535)),
    ("bins", "mkbin_dyn", 2): _ints((0, 255), (1, 1)),
    ("bins", "mktup", 2): _ints((-100, 100), (-100, 100)),
    ("catches", "check", 1): _ints((0, 20)),
    ("catches", "checked", 1): _ints((0, 20)),
    ("opseq", "mk", 1): _ints((-1000, 1000)),
    ("recv", "recv_tag", 1): _ints((-1000, 1000)),
    ("shapes", "pick", 2): _ints((-50, 50), (-50, 50)),
    ("shapes", "irr", 2): _ints((0, 40), (0, 1)),
    ("sums", "sum_to_n", 1): _ints((0, 60)),
    ("sums", "sum_acc", 2): _ints((0, 60), (-100, 100)),
    ("sums", "prod_to_n", 1): _ints((0, 30)),
    ("writers", "se_write", 2): _ints((1, 40), (0, 20)),
    ("writers", "ste_write", 2): _ints((1, 40), (0, 20)),
}


def input_gen(module: str, key: tuple[str, int]) -> InputGen:
    """Generator for ``module``'s ``key`` function; small integers by default."""
    name, arity = key
    return INPUTS.get((module, name, arity), _ints(*[(0, 50)] * arity))


def sample_inputs(module: str, key: tuple[str, int], trials: int, seed: int = 0) -> list[list]:
    rng = random.Random(seed)
    gen = input_gen(module, key)
    return [gen(rng) for _ in range(trials)]
