"""Command-line front end: ``sgrs <subcommand> ...``.

Exit statuses: 0 success, 2 usage, 3 parse error, 4 validation error,
5 runtime refusal, 6 a property or invariant check failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from . import __version__, analytic
from .adversary import PROPERTIES
from .group import BRUTEFORCE_LIMIT, DomainError, bootstrap, count_keys_bruteforce, count_keys_closed_form
from .primitives import SeededRng
from .protocols import MUTATIONS
from .simnet import SizeModel
from .scenario import (
    RunRefused,
    ScenarioParseError,
    ScenarioValidationError,
    generate_churn,
    load_scenario,
    render_report,
    run_scenario,
    write_outputs,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_REFUSED = 5
EXIT_PROPERTY_FAIL = 6


class UsageError(Exception):
    pass


# ------------------------------------------------------------- key counts


@dataclasses.dataclass
class KeyCountReport:
    N: int
    W: int
    Z: int
    W_sem: int | None
    Z_sem: int | None

    def render(self) -> str:
        lines = [f"N\t{self.N}", "source\tW\tZ", f"closed\t{self.W}\t{self.Z}"]
        if self.W_sem is None:
            lines.append(f"brute\tn/a\tn/a\t(brute force limited to 3..{BRUTEFORCE_LIMIT})")
        else:
            lines.append(f"brute\t{self.W_sem}\t{self.Z_sem}")
            lines.append(f"delta\t{self.W - self.W_sem}\t{self.Z - self.Z_sem}")
        return "\n".join(lines) + "\n"


def enumerate_keys(N: int, brute: bool = True) -> KeyCountReport:
    """Closed-form and brute-force multicast key counts for an N-member ring.

    Brute force runs on a freshly bootstrapped group; every member's Z is the
    same by symmetry, so one value is reported.
    """
    W, Z = count_keys_closed_form(N)
    if not brute:
        return KeyCountReport(N, W, Z, None, None)
    if N > BRUTEFORCE_LIMIT:
        raise DomainError(f"brute force is limited to {BRUTEFORCE_LIMIT} members")
    g = bootstrap(range(1, N + 1), SeededRng(0))
    W_sem, per = count_keys_bruteforce(g)
    zs = set(per.values())
    if len(zs) != 1:
        raise AssertionError(f"asymmetric per-member counts {sorted(zs)}")
    return KeyCountReport(N, W, Z, W_sem, zs.pop())


# ------------------------------------------------------------- argument types


def parse_sizes(text: str) -> SizeModel:
    vals = {}
    for part in text.split(","):
        name, sep, v = part.partition("=")
        name = name.strip()
        if not sep or name not in ("int", "key"):
            raise argparse.ArgumentTypeError(f"bad size field {part!r}; expected int=<n>,key=<n>")
        try:
            vals[name] = int(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"size {name} is not an integer: {v!r}") from None
        if vals[name] <= 0:
            raise argparse.ArgumentTypeError(f"size {name} must be positive")
    return SizeModel(int_bytes=vals.get("int", 4), key_bytes=vals.get("key", 32))


def parse_properties(text: str) -> tuple[str, ...]:
    if text.strip().lower() == "all":
        return PROPERTIES
    props = tuple(p.strip() for p in text.split(",") if p.strip())
    bad = [p for p in props if p not in PROPERTIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown properties {bad}; choose from {', '.join(PROPERTIES)}")
    return props


def parse_seeds(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(lo))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed range {part!r}") from None
    return out


def _mutation(text: str) -> str:
    if text not in MUTATIONS:
        raise argparse.ArgumentTypeError(f"unknown mutation {text!r}; choose from {', '.join(MUTATIONS)}")
    return text


# ------------------------------------------------------------- subcommands


def _override(sc, args):
    if args.seed is not None:
        sc = dataclasses.replace(sc, seed=args.seed)
    if args.sizes is not None:
        sc = dataclasses.replace(sc, sizes=args.sizes)
    return sc


def cmd_simulate(args) -> int:
    sc = _override(load_scenario(args.scenario), args)
    res = run_scenario(sc, mutations=args.mutation or ())
    report = render_report(res)
    if args.out:
        write_outputs(res, args.out)
    sys.stdout.write(report)
    return EXIT_OK if res.ok else EXIT_PROPERTY_FAIL


def _churn_one(job: tuple[int, tuple[str, ...], tuple[str, ...]]) -> tuple[int, list[str], list[str], str]:
    seed, props, muts = job
    res = run_scenario(generate_churn(seed), mutations=muts, checks=props)
    lines = [f"seed {seed:>3}  {v.line()}" for v in res.verdicts]
    lines += [f"seed {seed:>3}  invariant: {v}" for v in res.violations]
    bad = [v.prop for v in res.verdicts if not v.ok] + (["invariants"] if res.violations else [])
    wit = "\n\n".join(v.witness() for v in res.verdicts if not v.ok)
    return seed, lines, bad, wit


def cmd_verify(args) -> int:
    props = args.properties or PROPERTIES
    muts = tuple(args.mutation or ())
    if args.churn or not args.scenario:
        seeds = args.seeds or list(range(1, 51))
        jobs = [(s, props, muts) for s in seeds]
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                results = list(pool.map(_churn_one, jobs))
        else:
            results = [_churn_one(j) for j in jobs]
        failed: dict[str, int] = {}
        witnesses = []
        for seed, lines, bad, wit in results:
            sys.stdout.write("\n".join(lines) + "\n")
            for b in bad:
                failed[b] = failed.get(b, 0) + 1
            if wit:
                witnesses.append(f"## seed {seed}\n{wit}")
        print(f"summary: {len(seeds)} scenarios, mutations={','.join(muts) or 'none'}")
        for name in sorted(failed):
            print(f"  {name}: FAIL in {failed[name]} scenario(s)")
        if not failed:
            print("  all PASS")
        if args.out and witnesses:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "witnesses.txt").write_text("\n\n".join(witnesses) + "\n")
        return EXIT_PROPERTY_FAIL if failed else EXIT_OK
    sc = _override(load_scenario(args.scenario), args)
    res = run_scenario(sc, mutations=muts, checks=props)
    for v in res.verdicts:
        print(v.line())
    for v in res.violations:
        print(f"invariant: {v}")
    if args.out:
        write_outputs(res, args.out)
    if not res.ok:
        for v in res.verdicts:
            if not v.ok:
                print(v.witness())
        return EXIT_PROPERTY_FAIL
    return EXIT_OK


def cmd_figures(args) -> int:
    ids = sorted(analytic.FIGURES) if args.figure == "all" else [args.figure]
    status = EXIT_OK
    for raw in ids:
        try:
            fid = int(raw)
            spec = analytic.FIGURES[fid]
        except (ValueError, KeyError):
            raise ScenarioValidationError(f"unknown figure id {raw!r}; expected one of {sorted(analytic.FIGURES)}") from None
        fd = analytic.emit_figure_data(spec, args.sizes)
        if args.out:
            fd.write(args.out)
        sys.stdout.write(f"# figure {fid}\n{fd.to_csv()}")
        for msg in analytic.dominance_failures(fd):
            print(f"dominance: {msg}")
            status = EXIT_PROPERTY_FAIL
    return status


def cmd_enumerate_keys(args) -> int:
    if args.N < 3:
        raise ScenarioValidationError("N must be at least 3")
    if args.N > BRUTEFORCE_LIMIT and not args.closed_only:
        raise ScenarioValidationError(
            f"N={args.N} is out of range for brute force (3..{BRUTEFORCE_LIMIT}); pass --closed-only"
        )
    sys.stdout.write(enumerate_keys(args.N, brute=not args.closed_only).render())
    return EXIT_OK


def cmd_table1(args) -> int:
    if args.eval is None:
        sys.stdout.write(analytic.render_table1())
    else:
        sys.stdout.write(analytic.render_table1_eval(args.eval, args.groups, args.sizes))
    return EXIT_OK


# ------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgrs", description="Ring-of-nonces group rekeying simulator.")
    p.add_argument("--version", action="version", version=f"sgrs {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--sizes", type=parse_sizes, help="byte sizes, e.g. int=4,key=32")
        sp.add_argument("--mutation", type=_mutation, action="append", help="disable one countermeasure (test builds)")

    s = sub.add_parser("simulate", help="run a scenario file and write report + transcript")
    s.add_argument("scenario")
    common(s)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="run property checks on a scenario or the churn suite")
    v.add_argument("scenario", nargs="?")
    v.add_argument("--properties", type=parse_properties, help=f"comma list from {', '.join(PROPERTIES)} or 'all'")
    v.add_argument("--churn", action="store_true", help="run the seeded random-churn suite")
    v.add_argument("--seeds", type=parse_seeds, help="churn seeds, e.g. 1-50")
    v.add_argument("--jobs", type=int, default=1, help="parallel workers for the churn suite")
    common(v)
    v.set_defaults(func=cmd_verify)

    f = sub.add_parser("figures", help="emit figure data (10, 11, 12, 13 or all)")
    f.add_argument("figure")
    f.add_argument("--out")
    f.add_argument("--sizes", type=parse_sizes)
    f.set_defaults(func=cmd_figures)

    e = sub.add_parser("enumerate-keys", help="closed-form vs brute-force key counts")
    e.add_argument("N", type=int)
    e.add_argument("--closed-only", action="store_true")
    e.set_defaults(func=cmd_enumerate_keys)

    t = sub.add_parser("table1", help="print the encoded cost table as TSV")
    t.add_argument("--eval", type=int, metavar="N", help="evaluate at group size N instead of printing formulas")
    t.add_argument("--groups", type=int, default=1, metavar="K", help="group count for merge/partition rows")
    t.add_argument("--sizes", type=parse_sizes)
    t.set_defaults(func=cmd_table1)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ScenarioValidationError, DomainError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RunRefused as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED


if __name__ == "__main__":
    sys.exit(main())
