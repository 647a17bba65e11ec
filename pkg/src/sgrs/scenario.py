"""Scenario files, the event runner, random churn and run reports.

A scenario is a YAML document::

    schema: sgrs-scenario/1
    seed: 7
    sizes: int=4,key=32          # optional
    bootstrap:
      groups:                    # or ``cascade:`` with the same list
        - {id: g0, members: [1, 2, 3]}
    events:
      - {kind: join, group: g0, joiner: 4, sponsor: 3}
      - {kind: leave, group: g0, member: 2}
      - {kind: partition, group: g0, members: [1, 5], sponsor: 3}
      - {kind: merge, groups: [g0, g1], sponsor: 2, guest_sponsor: 6}
    checks: [GroupKeySecrecy, ForwardSecrecy]
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import yaml

from . import __version__
from .adversary import PROPERTIES, Verdict, check_forward_secrecy, check_property
from .analytic import Reconciliation, compare_ledger
from .cascade import Supergroup, build_supergroup, cascade_event
from .group import DomainError, GroupSnapshot, bootstrap, check_ring_invariant
from .primitives import SeededRng, primitive_ids
from .protocols import (
    AuthServerStub,
    MembershipEvent,
    ProtocolError,
    apply_local,
    run_merge_multi,
    run_merge_pair,
)
from .simnet import Network, SizeModel

SCHEMA = "sgrs-scenario/1"
REPORT_FORMAT = "sgrs-report/1"


class ScenarioError(Exception):
    exit_code = 1


class ScenarioParseError(ScenarioError):
    exit_code = 3


class ScenarioValidationError(ScenarioError):
    exit_code = 4


class RunRefused(ScenarioError):
    exit_code = 5


@dataclass(frozen=True)
class GroupSpec:
    gid: str
    members: tuple[int, ...]


@dataclass
class Scenario:
    seed: int
    groups: list[GroupSpec]
    events: list[MembershipEvent]
    sizes: SizeModel = field(default_factory=SizeModel)
    checks: tuple[str, ...] = ()
    cascade: bool = False
    name: str = ""


# ------------------------------------------------------------- parsing


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise ScenarioParseError(f"{where}: missing field {key!r}")
    return d[key]


def _int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioParseError(f"{where}: expected an integer, got {v!r}")
    return v


def _ints(v, where: str) -> tuple[int, ...]:
    if not isinstance(v, list):
        raise ScenarioParseError(f"{where}: expected a list of integers")
    return tuple(_int(x, where) for x in v)


def parse_scenario(text: str, name: str = "") -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "document"
        raise ScenarioParseError(f"{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, dict):
        raise ScenarioParseError("document: expected a mapping at top level")
    if doc.get("schema") != SCHEMA:
        raise ScenarioParseError(f"field 'schema': expected {SCHEMA!r}, got {doc.get('schema')!r}")
    seed = _int(_req(doc, "seed", "document"), "field 'seed'")
    if not 0 <= seed < 2**64:
        raise ScenarioParseError("field 'seed': must fit in 64 bits")
    sizes = SizeModel()
    if "sizes" in doc:
        raw = doc["sizes"]
        try:
            if isinstance(raw, str):
                sizes = SizeModel.parse(raw)
            elif isinstance(raw, dict):
                sizes = SizeModel(int(raw.get("int", 4)), int(raw.get("key", 32)))
            else:
                raise ValueError("expected 'int=4,key=32' or a mapping")
        except ValueError as exc:
            raise ScenarioParseError(f"field 'sizes': {exc}") from None
    boot = _req(doc, "bootstrap", "document")
    if not isinstance(boot, dict) or len(boot) != 1 or next(iter(boot)) not in ("groups", "cascade"):
        raise ScenarioParseError("field 'bootstrap': expected exactly one of 'groups' or 'cascade'")
    cascade = "cascade" in boot
    raw_groups = next(iter(boot.values()))
    if not isinstance(raw_groups, list) or not raw_groups:
        raise ScenarioParseError("field 'bootstrap': expected a non-empty list of groups")
    groups = []
    for k, g in enumerate(raw_groups):
        where = f"bootstrap group {k}"
        if not isinstance(g, dict):
            raise ScenarioParseError(f"{where}: expected a mapping")
        groups.append(GroupSpec(str(_req(g, "id", where)), _ints(_req(g, "members", where), where)))
    events = []
    for k, e in enumerate(doc.get("events") or []):
        where = f"event {k}"
        if not isinstance(e, dict):
            raise ScenarioParseError(f"{where}: expected a mapping")
        kind = _req(e, "kind", where)
        try:
            if kind == "merge":
                gs = _req(e, "groups", where)
                if not isinstance(gs, list):
                    raise ScenarioParseError(f"{where}: 'groups' must be a list")
                ev = MembershipEvent(
                    "merge", str(gs[0]) if gs else "", groups=tuple(map(str, gs)),
                    sponsor=e.get("sponsor"), guest_sponsor=e.get("guest_sponsor"),
                )
            else:
                ev = MembershipEvent(
                    kind,
                    str(_req(e, "group", where)),
                    joiner=_int(e["joiner"], where) if "joiner" in e else None,
                    member=_int(e["member"], where) if "member" in e else None,
                    members=_ints(e["members"], where) if "members" in e else (),
                    sponsor=_int(e["sponsor"], where) if e.get("sponsor") is not None else None,
                )
        except ValueError as exc:
            raise ScenarioParseError(f"{where}: {exc}") from None
        events.append(ev)
    checks = tuple(doc.get("checks") or ())
    sc = Scenario(seed, groups, events, sizes, checks, cascade, name or str(doc.get("name", "")))
    validate(sc)
    return sc


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioParseError(f"{p}: {exc.strerror}") from None
    return parse_scenario(text, p.stem)


def dump_scenario(sc: Scenario) -> str:
    events = []
    for ev in sc.events:
        d: dict = {"kind": ev.kind}
        if ev.kind == "merge":
            d["groups"] = list(ev.groups)
            if ev.guest_sponsor is not None:
                d["guest_sponsor"] = ev.guest_sponsor
        else:
            d["group"] = ev.group
        for name in ("joiner", "member"):
            if getattr(ev, name) is not None:
                d[name] = getattr(ev, name)
        if ev.members:
            d["members"] = list(ev.members)
        if ev.sponsor is not None:
            d["sponsor"] = ev.sponsor
        events.append(d)
    doc = {
        "schema": SCHEMA,
        "seed": sc.seed,
        "sizes": f"int={sc.sizes.int_bytes},key={sc.sizes.key_bytes}",
        "bootstrap": {("cascade" if sc.cascade else "groups"): [{"id": g.gid, "members": list(g.members)} for g in sc.groups]},
        "events": events,
        "checks": list(sc.checks),
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


# ------------------------------------------------------------- validation


def validate(sc: Scenario) -> None:
    """Static membership bookkeeping; raises on the first inconsistent event."""
    bad = [c for c in sc.checks if c not in PROPERTIES]
    if bad:
        raise ScenarioValidationError(f"checks: unknown propert{'y' if len(bad) == 1 else 'ies'} {bad}")
    live: dict[str, set[int]] = {}
    everyone: set[int] = set()
    for g in sc.groups:
        if g.gid in live:
            raise ScenarioValidationError(f"bootstrap: duplicate group id {g.gid!r}")
        if len(set(g.members)) != len(g.members) or len(g.members) < 2:
            raise ScenarioValidationError(f"bootstrap group {g.gid}: needs at least 2 distinct members")
        if everyone & set(g.members):
            raise ScenarioValidationError(f"bootstrap group {g.gid}: member ids reused across groups")
        live[g.gid] = set(g.members)
        everyone |= set(g.members)
    for k, ev in enumerate(sc.events):
        where = f"event {k} ({ev.kind})"
        if sc.cascade and ev.kind == "merge":
            raise ScenarioValidationError(f"{where}: merges are not supported inside a cascade")
        if ev.kind == "merge":
            if len(ev.groups) < 2 or len(set(ev.groups)) != len(ev.groups):
                raise ScenarioValidationError(f"{where}: needs at least two distinct groups")
            for gid in ev.groups:
                if gid not in live:
                    raise ScenarioValidationError(f"{where}: unknown group {gid!r}")
            if len(ev.groups) == 2:
                host, guest = ev.groups
                if ev.sponsor is not None and ev.sponsor not in live[host]:
                    raise ScenarioValidationError(f"{where}: sponsor {ev.sponsor} not in {host}")
                if ev.guest_sponsor is not None and ev.guest_sponsor not in live[guest]:
                    raise ScenarioValidationError(f"{where}: guest sponsor {ev.guest_sponsor} not in {guest}")
                live[host] |= live.pop(guest)
            else:
                keep = sorted(ev.groups)[0]
                merged = set().union(*(live.pop(g) for g in ev.groups))
                live[keep] = merged
            continue
        if ev.group not in live:
            raise ScenarioValidationError(f"{where}: unknown group {ev.group!r}")
        mem = live[ev.group]
        if ev.sponsor is not None and ev.sponsor not in mem:
            raise ScenarioValidationError(f"{where}: sponsor {ev.sponsor} is not a member of {ev.group}")
        if ev.kind == "join":
            if ev.joiner in everyone:
                raise ScenarioValidationError(f"{where}: joiner {ev.joiner} already used")
            mem.add(ev.joiner)
            everyone.add(ev.joiner)
        elif ev.kind == "leave":
            if ev.member not in mem:
                raise ScenarioValidationError(f"{where}: member {ev.member} not in {ev.group}")
            if ev.sponsor == ev.member:
                raise ScenarioValidationError(f"{where}: sponsor cannot be the departing member")
            mem.discard(ev.member)
        elif ev.kind == "partition":
            gone = set(ev.members)
            if not gone <= mem:
                raise ScenarioValidationError(f"{where}: {sorted(gone - mem)} not in {ev.group}")
            if ev.sponsor in gone:
                raise ScenarioValidationError(f"{where}: sponsor cannot depart")
            mem -= gone


# ------------------------------------------------------------- running


@dataclass
class EventRecord:
    index: int
    ledger_indices: list[int]
    summary: str
    notes: list[str] = field(default_factory=list)


@dataclass
class RunResult:
    scenario: Scenario
    mutations: frozenset[str]
    net: Network
    groups: dict[str, GroupSnapshot]
    supergroup: Supergroup | None
    records: list[EventRecord]
    violations: list[str]
    verdicts: list[Verdict] = field(default_factory=list)
    recon: list[Reconciliation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and all(v.ok for v in self.verdicts)

    def memories(self) -> dict[int, dict[bytes, str]]:
        """Perfect-recall memory of every party ever admitted."""
        mem: dict[int, dict[bytes, str]] = {}
        for _ev, _parties, knowledge in self.net.removals:
            for p, k in knowledge.items():
                mem[p] = k
        groups = self.supergroup.children if self.supergroup else self.groups
        for g in groups.values():
            for i, m in g.members.items():
                mem[i] = m.seen
        return mem


def _post_checks(k: int, groups: Iterable[GroupSnapshot]) -> list[str]:
    out = []
    for g in groups:
        for v in check_ring_invariant(g):
            out.append(f"after event {k}, group {g.gid}: {v}")
        if len({m.group_key for m in g.members.values()}) > 1:
            out.append(f"after event {k}, group {g.gid}: group keys disagree")
    return out


def run_scenario(sc: Scenario, mutations: Iterable[str] = (), checks: Iterable[str] | None = None) -> RunResult:
    """Execute events strictly in order, checking invariants after each one."""
    mutations = frozenset(mutations)
    rng = SeededRng(sc.seed)
    net = Network(sc.sizes)
    auth = AuthServerStub.default()
    groups = {g.gid: bootstrap(g.members, rng, g.gid, net) for g in sc.groups}
    for g in sc.groups:
        auth.register(*g.members)
    sg = build_supergroup([groups[g.gid] for g in sc.groups], rng) if sc.cascade else None
    records: list[EventRecord] = []
    violations = _post_checks(-1, groups.values())
    for k, ev in enumerate(sc.events):
        before = len(net.events)
        notes: list[str] = []
        try:
            if sg is not None:
                siblings = {gid: dict(c.shared_nonces) for gid, c in sg.children.items() if gid != ev.group}
                sg = cascade_event(sg, ev, rng, net, auth, mutations=mutations)
                affected = list(sg.children.values())
                tops = {m.super_key for c in affected for m in c.members.values()}
                if len(tops) != 1:
                    violations.append(f"after event {k}: top-level keys disagree across leaves")
                for gid, nonces in siblings.items():
                    if sg.children[gid].shared_nonces != nonces:
                        violations.append(f"after event {k}: sibling group {gid} changed")
            elif ev.kind == "merge":
                parts = [groups[g] for g in ev.groups]
                if len(parts) == 2:
                    merged = run_merge_pair(
                        parts[0], parts[1], net, auth,
                        sponsor_a=ev.sponsor, sponsor_b=ev.guest_sponsor, mutations=mutations,
                    )
                else:
                    merged = run_merge_multi(parts, net, auth, mutations=mutations)
                for g in ev.groups:
                    groups.pop(g)
                groups[merged.gid] = merged
                affected = [merged]
            else:
                groups[ev.group] = apply_local(groups[ev.group], ev, rng, net, auth, mutations=mutations)
                affected = [groups[ev.group]]
        except (ProtocolError, DomainError) as exc:
            raise RunRefused(f"event {k} ({ev.kind}): {exc}") from None
        for led in net.events[before:]:
            if led.kind == "partition":
                ys = ", ".join(f"n_{y}" for y in led.params["index_set"])
                notes.append(f"partition multicast index set Y_s = {{{ys}}}")
        violations += _post_checks(k, affected)
        summary = f"{ev.kind} " + " ".join(
            f"{name}={val}" for name, val in (
                ("group", ev.group), ("joiner", ev.joiner), ("member", ev.member),
                ("members", list(ev.members) or None), ("groups", list(ev.groups) or None),
                ("sponsor", ev.sponsor), ("guest_sponsor", ev.guest_sponsor),
            ) if val is not None
        )
        records.append(EventRecord(k, list(range(before, len(net.events))), summary, notes))
    res = RunResult(sc, mutations, net, groups if sg is None else sg.children, sg, records, violations)
    for led in net.events:
        if led.kind in ("join", "leave", "partition"):
            res.recon.append(compare_ledger(led, sc.sizes))
    props = sc.checks if checks is None else tuple(checks)
    if props:
        res.verdicts = verify(res, props)
    return res


def verify(res: RunResult, props: Iterable[str]) -> list[Verdict]:
    mem = res.memories()
    out = []
    for p in props:
        out.append(check_property(p, res.net, mem))
        if p == "ForwardSecrecy":
            out.append(check_forward_secrecy(res.net, collusion=True))
    return out


# ------------------------------------------------------------- churn


def generate_churn(seed: int, n0: int = 8, events: int = 200, max_size: int = 24) -> Scenario:
    """Random mixed churn on one main group; merges absorb 1 or 2 spare groups.

    Groups never drop below 3 members (a 2-member ring has no third party to
    carry the join link), removed ids never come back, and spare groups for
    merges are bootstrapped up front with fresh ids.
    """
    gen = SeededRng(seed ^ 0x5EED5EED)
    next_id = n0 + 1
    main = set(range(1, n0 + 1))
    spares: list[GroupSpec] = []
    evs: list[MembershipEvent] = []
    for _ in range(events):
        size = len(main)
        kinds = []
        if size < max_size:
            kinds += ["join"] * 4 + ["merge"] * 2
        if size >= 4:
            kinds += ["leave"] * 4
        if size >= 5:
            kinds += ["partition"] * 2
        kind = gen.choice(kinds)
        members = sorted(main)
        if kind == "join":
            evs.append(MembershipEvent("join", "g0", joiner=next_id, sponsor=gen.choice(members)))
            main.add(next_id)
            next_id += 1
        elif kind == "leave":
            d = gen.choice(members)
            sp = gen.choice([m for m in members if m != d])
            evs.append(MembershipEvent("leave", "g0", member=d, sponsor=sp))
            main.discard(d)
        elif kind == "partition":
            cap = min(size // 2, size - 3)
            cnt = 2 + gen.randrange(cap - 1) if cap >= 2 else 1
            gone = sorted(gen.sample(members, cnt))
            sp = gen.choice([m for m in members if m not in gone])
            evs.append(MembershipEvent("partition", "g0", members=tuple(gone), sponsor=sp))
            main -= set(gone)
        else:
            extra = 1 + gen.randrange(2)
            gids = []
            for _ in range(extra):
                sz = 3 + gen.randrange(3)
                spec = GroupSpec(f"h{len(spares):03d}", tuple(range(next_id, next_id + sz)))
                next_id += sz
                spares.append(spec)
                gids.append(spec.gid)
                main |= set(spec.members)
            evs.append(MembershipEvent("merge", "g0", groups=("g0", *gids)))
    groups = [GroupSpec("g0", tuple(range(1, n0 + 1))), *spares]
    return Scenario(seed, groups, evs, SizeModel(), PROPERTIES, False, f"churn-{seed}")


# ------------------------------------------------------------- reporting


def _nonce_label(n) -> str:
    return f"n{n.origin}" + ("'" * n.version)


def render_report(res: RunResult) -> str:
    sc = res.scenario
    prim_ids = primitive_ids()
    out = [
        f"# {REPORT_FORMAT}",
        f"tool: sgrs {__version__}",
        f"primitives: hash={prim_ids['hash']} cipher={prim_ids['cipher']} kdf={prim_ids['kdf']}",
        f"scenario: {sc.name or '-'}",
        f"seed: {sc.seed}",
        f"sizes: int={sc.sizes.int_bytes} key={sc.sizes.key_bytes}",
        f"mutations: {','.join(sorted(res.mutations)) or 'none'}",
        "",
        "## events",
    ]
    for rec in res.records:
        out.append(f"[{rec.index}] {rec.summary}")
        for li in rec.ledger_indices:
            led = res.net.events[li]
            t = led.totals
            out.append(
                f"    {led.kind:<10} UC={t.uc} BC={t.bc} OOB={t.oob} bytes={t.bytes} oob_bytes={t.oob_bytes} "
                f"H={t.hash_ops} E={t.crypt_ops} auth={t.auth_ops}"
            )
            for tag, c in sorted(led.per_step.items()):
                if c.messages or c.oob:
                    out.append(f"      {tag:<18} UC={c.uc} BC={c.bc} OOB={c.oob} bytes={c.bytes + c.oob_bytes}")
        for note in rec.notes:
            out.append(f"    {note}")
    tot = res.net.totals().totals
    out += ["", f"## totals", f"UC={tot.uc} BC={tot.bc} OOB={tot.oob} bytes={tot.bytes} oob_bytes={tot.oob_bytes} H={tot.hash_ops} E={tot.crypt_ops}"]
    if res.recon:
        out += ["", "## reconciliation against the analytic SGRS rows"]
        for r in res.recon:
            out.append(r.render())
    out += ["", "## final state"]
    groups = res.groups
    if res.supergroup is not None:
        out.append(f"supergroup ring {' '.join(res.supergroup.ring)} key {res.supergroup.super_key[:4].hex()}")
    for gid in sorted(groups):
        g = groups[gid]
        out.append(f"group {gid} epoch {g.epoch} ring {' '.join(map(str, g.ring))} key {g.group_key[:4].hex()}")
        for i in g.ring:
            st = g.members[i].state
            out.append(f"  N{i}: S = {{{', '.join(_nonce_label(st[o]) for o in sorted(st))}}}")
    out += ["", "## invariants"]
    out += [f"VIOLATION {v}" for v in res.violations] or ["all post-event checks hold"]
    if res.verdicts:
        out += ["", "## properties"]
        out += [v.line() for v in res.verdicts]
    return "\n".join(out) + "\n"


def write_outputs(res: RunResult, outdir: str | Path) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [outdir / "report.txt", outdir / "transcript.tsv"]
    paths[0].write_text(render_report(res))
    paths[1].write_text(res.net.export_transcript())
    failing = [v for v in res.verdicts if not v.ok]
    if failing:
        w = outdir / "witnesses.txt"
        w.write_text("\n\n".join(v.witness() for v in failing) + "\n")
        paths.append(w)
    return paths
