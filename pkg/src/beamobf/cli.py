from __future__ import annotations

import argparse
import re
import sys
from typing import Optional

from . import beampatch
from .asmir import format_module, parse_module
from .cfg import annotate_regions, build_cfg, check_receive_sequencing, export_dot, find_loops
from .destructure import STRATEGIES, emit_pseudo_source, recover_module, structure_module
from .destructure import DEFAULT_CAP, structure_function
from .miniemu import DEFAULT_FUEL, int_inputs, run, run_differential
from .obf import PassConfig, gen_mutable_tuple_setters, parse_pipeline, run_pipeline
from .sterm import Atom, format_term, parse_forms, parse_term
from .vlite import lint_set_tuple_element, validate

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _read(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _write(path: Optional[str], text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _report(path: Optional[str], terms: list):
    text = "".join(format_term(t) + ".\n" for t in terms)
    if path is None:
        sys.stderr.write(text)
    else:
        _write(path, text)


def _string(text: str) -> list:
    return [ord(ch) for ch in text]


def _entry(text: str) -> tuple[str, int]:
    m = re.fullmatch(r"(.+)/(\d+)", text)
    if not m:
        raise UsageError(f"entry must look like name/arity, got {text!r}")
    return m.group(1), int(m.group(2))


def _load(path: str):
    return parse_module(_read(path))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_parse(a) -> int:
    _write(a.output, format_module(_load(a.input)))
    return EXIT_OK


def _loop_term(l):
    return (Atom("loop"), [Atom(f"L{x}") for x in l.header_labels], l.entry_count,
            Atom("reducible" if l.reducible else "irreducible"),
            (Atom("post_dominating_exit"), Atom(str(l.post_dominating_exit).lower())),
            (Atom("depth"), l.depth))


def cmd_cfg(a) -> int:
    m = _load(a.input)
    funcs = m.functions
    if a.function:
        funcs = [m.function(*_entry(a.function))]
    dots, report = [], []
    for f in funcs:
        c = build_cfg(f)
        rs = annotate_regions(c)
        dots.append(export_dot(c, rs))
        regions = [(Atom(r.kind), r.cardinality, [Atom(op) for op in r.closer_opcodes]) for r in rs]
        seq = [(Atom(v.opcode), v.site, _string(v.reason)) for v in check_receive_sequencing(c, rs)]
        report.append(((Atom(f.name), f.arity),
                       [(Atom("blocks"), len(c.blocks)), (Atom("regions"), regions),
                        (Atom("loops"), [_loop_term(l) for l in find_loops(c)]),
                        (Atom("sequencing"), seq)]))
    _write(a.output, "".join(dots))
    _report(a.report, report)
    return EXIT_OK


def cmd_validate(a) -> int:
    m = _load(a.input)
    diags = validate(m) + lint_set_tuple_element(m, a.gc_lint)
    for d in diags:
        sys.stdout.write(format_term(d.as_term()) + ".\n")
    errors = [d for d in diags if not (isinstance(d.reason, tuple) and d.reason[0] == Atom("gc_hazard")
                                      and d.reason[1] == Atom("warning"))]
    return EXIT_DOMAIN if errors else EXIT_OK


def cmd_obfuscate(a) -> int:
    m = _load(a.input)
    if a.pipeline:
        terms = parse_forms(_read(a.pipeline))
    elif a.passes:
        terms = [[(Atom(p.strip()), []) for p in a.passes.split(",") if p.strip()]]
    else:
        raise UsageError("obfuscate needs --pipeline FILE or --passes a,b")
    parse_pipeline(terms)
    base = PassConfig(seed=a.seed, intensity=a.intensity, reroute_sizes=a.reroute_sizes,
                      post_test=a.post_test)
    _write(a.output, format_module(run_pipeline(m, terms, base)))
    return EXIT_OK


def cmd_structure(a) -> int:
    m = _load(a.input)
    out = [structure_function(f, a.strategy, a.cap) for f in m.functions]
    report = [((Atom(f.name), f.arity), Atom("structured_only")) for f in m.functions]
    _write(a.output, emit_pseudo_source(out))
    _report(a.report, report)
    return EXIT_OK


def cmd_recover(a) -> int:
    m = _load(a.input)
    out, report = structure_module(m, a.strategy, a.cap)
    _write(a.output, emit_pseudo_source(out))
    if a.asm:
        _write(a.asm, format_module(recover_module(m)[0]))
    _report(a.report, report)
    return EXIT_OK


def cmd_emu(a) -> int:
    m = _load(a.input)
    entry = _entry(a.entry)
    if a.diff:
        other = _load(a.diff)
        if a.args is not None:
            inputs = [parse_term(a.args)]
            rep = run_differential(m, other, entry, inputs=inputs, fuel=a.fuel)
        else:
            gen = int_inputs(entry[1], a.lo, a.hi)
            rep = run_differential(m, other, entry, gen, trials=a.trials, seed=a.seed,
                                   fuel=a.fuel, compare_mailbox=a.compare_mailbox)
        sys.stdout.write(f"{len(rep.mismatches)} mismatches in {rep.trials} trials\n")
        sys.stdout.write(format_term(rep.as_term()) + ".\n")
        return EXIT_OK if rep.equivalent else EXIT_DOMAIN
    args = parse_term(a.args) if a.args is not None else []
    if not isinstance(args, list):
        raise UsageError("--args must be a list term such as [3,4]")
    res = run(m, entry, args, fuel=a.fuel, mode=a.mode)
    sys.stdout.write(format_term(res.as_term()) + ".\n")
    for line in res.log:
        sys.stderr.write(line + "\n")
    return EXIT_OK if res.outcome == "value" else EXIT_DOMAIN


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def cmd_diffpatch(a) -> int:
    left = _read_bytes(a.original)
    if a.apply:
        if a.other:
            raise UsageError("give either a second binary or --apply PATCH, not both")
        p = beampatch.PatchSet.from_text(_read(a.apply))
        out = beampatch.apply_patch(left, p, verify=not a.no_verify)
        if a.output is None:
            raise UsageError("--apply needs -o OUTPUT for the patched binary")
        with open(a.output, "wb") as fh:
            fh.write(out)
        return EXIT_OK
    if not a.other:
        raise UsageError("diffpatch needs a second binary or --apply PATCH")
    p = beampatch.diff(left, _read_bytes(a.other))
    _write(a.output, p.to_text())
    _report(a.report, beampatch.diff_report(p))
    return EXIT_OK


def cmd_gensetters(a) -> int:
    _write(a.output, format_module(gen_mutable_tuple_setters(a.count)))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beamobf",
                                description="Obfuscation and analysis workbench for BEAM assembly")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_, inp=True):
        s = sub.add_parser(name, help=help_)
        if inp:
            s.add_argument("input", help=".S file, or - for stdin")
        s.add_argument("-o", "--output", help="output file (default stdout)")
        s.set_defaults(func=fn)
        return s

    cmd("parse", cmd_parse, "print canonical .S")
    s = cmd("cfg", cmd_cfg, "DOT graph plus region and loop report")
    s.add_argument("--function", help="name/arity to restrict to")
    s.add_argument("--report", help="report file (default stderr)")

    s = cmd("validate", cmd_validate, "run the validator; exit 1 on diagnostics")
    s.add_argument("--gc-lint", choices=("off", "warning", "error"), default="off",
                   help="severity of the set_tuple_element hazard lint")

    s = cmd("obfuscate", cmd_obfuscate, "apply a pass pipeline")
    s.add_argument("--pipeline", help="Term file [{PassName,[{Param,Value}]}]")
    s.add_argument("--passes", help="comma-separated pass names")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--intensity", type=int, default=1)
    s.add_argument("--reroute-sizes", action="store_true")
    s.add_argument("--post-test", action="store_true")

    for name, fn, help_ in (("structure", cmd_structure, "structure every function"),
                            ("recover", cmd_recover, "recover receive loops, structure the rest")):
        s = cmd(name, fn, help_)
        s.add_argument("--strategy", choices=STRATEGIES, default=STRATEGIES[0])
        s.add_argument("--cap", type=float, default=DEFAULT_CAP,
                       help="node-splitting cap as a multiple of the block count")
        s.add_argument("--report", help="fidelity report file (default stderr)")
        if name == "recover":
            s.add_argument("--asm", help="also write the recovered module as .S")

    s = cmd("emu", cmd_emu, "run a function on the emulator")
    s.add_argument("--entry", required=True, help="name/arity")
    s.add_argument("--args", help="argument list term, e.g. [10]")
    s.add_argument("--mode", choices=("strict", "permissive"), default="strict")
    s.add_argument("--fuel", type=int, default=DEFAULT_FUEL)
    s.add_argument("--diff", help="second .S file for differential testing")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lo", type=int, default=0, help="smallest generated integer argument")
    s.add_argument("--hi", type=int, default=60, help="largest generated integer argument")
    s.add_argument("--compare-mailbox", action="store_true")

    s = cmd("diffpatch", cmd_diffpatch, "diff two binaries or apply a patch", inp=False)
    s.add_argument("original")
    s.add_argument("other", nargs="?")
    s.add_argument("--apply", metavar="PATCH")
    s.add_argument("--no-verify", action="store_true")
    s.add_argument("--report", help="run report file (default stderr)")

    s = cmd("gensetters", cmd_gensetters, "generate the mutable tuple setter module", inp=False)
    s.add_argument("count", type=int)
    return p


def _error_term(e: BaseException):
    kind = re.sub(r"(?<!^)(?=[A-Z])", "_", type(e).__name__).lower()
    msg = e.args[0] if e.args else str(e)
    return (Atom("error"), Atom(kind), _string(str(msg)))


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    try:
        return a.func(a)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"beamobf: error: {e}\n")
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, RecursionError) as e:
        sys.stderr.write(format_term(_error_term(e)) + ".\n")
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
