"""Knowledge closure over concrete values and the four secrecy checks.

A party's knowledge is a set of 32-byte atoms. Closure applies Horn rules
harvested from one :class:`~sgrs.simnet.Network` run until nothing new
appears:

* hash rule: ``kdf2(label, a, b)`` for every evaluation logged during the run
* xor rule: the XOR of every nonce set combined during the run
* open rule: a message (or nested box) whose sealing key is known yields
  every atom in its plaintext; the box is really opened with that key

Restricting hash/xor rules to logged evaluations keeps closure finite. An
attacker could hash other combinations, but those values never seal
anything and never equal a group key.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from . import primitives as prim
from .group import MemberState
from .simnet import Network, Payload

PROPERTIES = ("GroupKeySecrecy", "BackwardSecrecy", "ForwardSecrecy", "KeyIndependence")
DEFAULT_BUDGET = 1_000_000


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class Rule:
    kind: str  # hash:<label> | xor | open
    premises: tuple[bytes, ...]
    conclusions: tuple[tuple[bytes, str], ...]
    note: str = ""


@dataclass
class KnowledgeSet:
    atoms: dict[bytes, str]
    net: Network | None = None
    # atom -> rule index that first produced it (absent for seeds)
    why: dict[bytes, int] = field(default_factory=dict, repr=False)

    def __contains__(self, value: bytes) -> bool:
        return value in self.atoms

    def __len__(self) -> int:
        return len(self.atoms)

    def union(self, other: "KnowledgeSet") -> "KnowledgeSet":
        atoms = dict(other.atoms)
        atoms.update(self.atoms)
        return KnowledgeSet(atoms, self.net or other.net)


def snapshot_knowledge(member: MemberState, net: Network | None = None) -> KnowledgeSet:
    """Everything the member holds now or ever held."""
    atoms = dict(member.seen)
    for n in member.state.values():
        atoms.setdefault(n.value, f"n{n.origin}v{n.version}")
    if member.group_key:
        atoms.setdefault(member.group_key, "K_G")
    return KnowledgeSet(atoms, net)


def _short(v: bytes) -> str:
    return v[:4].hex()


class RuleBase:
    """Rules of one run, indexed by premise. Built once, reused by every closure."""

    def __init__(self, net: Network):
        self.net = net
        self.rules: list[Rule] = []
        self.by_premise: dict[bytes, list[int]] = {}
        self.names: dict[bytes, str] = {}
        for ep in net.epochs:
            self.names.setdefault(ep.key, f"K_G[{ep.group}#{ep.epoch}]")
        with prim.unmetered():
            for msg in net.transcript:
                self._add_open(msg.seal_key, msg.box, f"msg#{msg.seq} {msg.step_tag}")
                for box, key in msg.inner:
                    self._add_open(key, box, f"inner box of msg#{msg.seq} {msg.step_tag}")
        for values, (out, _ev) in net.xors.items():
            self._add(Rule("xor", values, ((out, f"xor{{{','.join(map(self.name, values))}}}"),)))
        for (label, a, b), (out, _ev) in net.derivations.items():
            lab = label.decode()
            self._add(Rule(f"hash:{lab}", (a, b), ((out, self.names.get(out) or f"{lab}({self.name(a)},{self.name(b)})"),)))

    def name(self, v: bytes) -> str:
        return self.names.get(v) or _short(v)

    def _add(self, rule: Rule) -> None:
        idx = len(self.rules)
        self.rules.append(rule)
        for p in set(rule.premises):
            self.by_premise.setdefault(p, []).append(idx)
        for v, label in rule.conclusions:
            self.names.setdefault(v, label)

    def _add_open(self, key: bytes, box: prim.SealedBox, note: str) -> None:
        try:
            body = Payload.decode(prim.open_box(key, box))
        except prim.AuthFailure:
            return
        out = []
        for item in body.items:
            if item[0] == "nonce":
                n = item[1]
                out.append((n.value, f"n{n.origin}v{n.version}"))
            elif item[0] == "key":
                out.append((item[2], item[1]))
            elif item[0] == "sig":
                out.append((item[1], "sig"))
            elif item[0] == "rand":
                out.append((item[1], "n_random"))
        if out:
            self._add(Rule("open", (key,), tuple(out), note))

    # ------------------------------------------------------------ closure
    def close(self, k: KnowledgeSet, budget: int = DEFAULT_BUDGET) -> KnowledgeSet:
        atoms = dict(k.atoms)
        why = dict(k.why)
        missing: dict[int, int] = {}
        queue = list(atoms)
        while queue:
            v = queue.pop()
            for idx in self.by_premise.get(v, ()):
                rule = self.rules[idx]
                # every atom is queued exactly once, so count down distinct premises
                left = missing.get(idx, len(set(rule.premises))) - 1
                missing[idx] = left
                if left != 0:
                    continue
                for c, label in rule.conclusions:
                    if c not in atoms:
                        atoms[c] = self.names.get(c, label)
                        why[c] = idx
                        queue.append(c)
                        if len(atoms) > budget:
                            raise BudgetExceeded(f"closure exceeded {budget} atoms")
        return KnowledgeSet(atoms, k.net, why)

    def chain(self, k: KnowledgeSet, target: bytes) -> list[str]:
        """Derivation trace for ``target``, one rule application per line."""
        lines: list[str] = []
        done: set[bytes] = set()

        def walk(v: bytes) -> None:
            if v in done:
                return
            done.add(v)
            idx = k.why.get(v)
            if idx is None:
                lines.append(f"known    {self.name(v)}")
                return
            rule = self.rules[idx]
            for p in rule.premises:
                walk(p)
            args = ", ".join(self.name(p) for p in rule.premises)
            extra = f"  [{rule.note}]" if rule.note else ""
            lines.append(f"{rule.kind:<12} {self.name(v)} <- {args}{extra}")

        walk(target)
        return lines

    def replay_ok(self, k: KnowledgeSet, target: bytes) -> bool:
        """Recompute ``target`` from seeds along its witness with the real primitives."""
        memo: dict[bytes, bool] = {}

        def ok(v: bytes) -> bool:
            if v in memo:
                return memo[v]
            memo[v] = False
            idx = k.why.get(v)
            if idx is None:
                res = v in k.atoms
            else:
                rule = self.rules[idx]
                res = all(ok(p) for p in rule.premises)
                with prim.unmetered():
                    if res and rule.kind.startswith("hash:"):
                        a, b = rule.premises
                        res = prim.kdf2(rule.kind[5:], a, b) == v
                    elif res and rule.kind == "xor":
                        res = prim.xor_bytes(rule.premises) == v
            memo[v] = res
            return res

        return ok(target)


_RULES: dict[int, tuple[int, RuleBase]] = {}


def rules_for(net: Network) -> RuleBase:
    size = (len(net.transcript), len(net.derivations), len(net.xors))
    hit = _RULES.get(id(net))
    if hit is not None and hit[0] == size and hit[1].net is net:
        return hit[1]
    rb = RuleBase(net)
    _RULES[id(net)] = (size, rb)
    return rb


def close(k: KnowledgeSet, net: Network | None = None, budget: int = DEFAULT_BUDGET) -> KnowledgeSet:
    net = net or k.net
    if net is None:
        return KnowledgeSet(dict(k.atoms), None, dict(k.why))
    return rules_for(net).close(k, budget)


# ------------------------------------------------------------- properties


@dataclass
class Failure:
    party: str
    target: str
    chain: list[str]


@dataclass
class Verdict:
    prop: str
    ok: bool
    checked: int
    failures: list[Failure] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{self.prop:<28} {status}  checked={self.checked} failures={len(self.failures)}"

    def witness(self) -> str:
        out = []
        for f in self.failures:
            out.append(f"# {self.prop}: {f.party} derives {f.target}")
            out.extend(f.chain)
        return "\n".join(out)


def _mk_outputs(net: Network) -> list[tuple[bytes, int]]:
    return [(out, ev) for (label, _a, _b), (out, ev) in net.derivations.items() if label == b"MK"]


def _check_targets(rb: RuleBase, party: str, seed: KnowledgeSet, targets: dict[bytes, str], v: Verdict) -> None:
    v.checked += 1
    if not targets:
        return
    closed = rb.close(seed)
    for t, label in targets.items():
        if t in closed:
            v.ok = False
            v.failures.append(Failure(party, label, rb.chain(closed, t)))
            return


def check_group_key_secrecy(net: Network) -> Verdict:
    rb = rules_for(net)
    v = Verdict("GroupKeySecrecy", True, 0)
    targets = {e.key: rb.name(e.key) for e in net.epochs}
    _check_targets(rb, "outsider", KnowledgeSet({}, net), targets, v)
    return v


def check_backward_secrecy(net: Network, memories: dict[int, dict[bytes, str]]) -> Verdict:
    """Admitted parties, seeded with their lifetime memory, against pre-admission keys."""
    rb = rules_for(net)
    v = Verdict("BackwardSecrecy", True, 0)
    for ev, parties, group in net.admissions:
        seed: dict[bytes, str] = {}
        for p in parties:
            seed.update(memories.get(p, {}))
        targets = {
            e.key: rb.name(e.key) for e in net.epochs if e.event < ev and not (e.members & parties)
        }
        who = f"admitted {sorted(parties)} at event {ev} ({group})"
        _check_targets(rb, who, KnowledgeSet(seed, net), targets, v)
    return v


def check_forward_secrecy(net: Network, collusion: bool = False) -> Verdict:
    """Removed parties with their memory at removal time against later keys.

    ``collusion`` unions the memories of every party removed by the same event.
    """
    rb = rules_for(net)
    v = Verdict("ForwardSecrecy[collusion]" if collusion else "ForwardSecrecy", True, 0)
    mk = _mk_outputs(net)
    for ev, parties, knowledge in net.removals:
        groups = [sorted(parties)] if collusion else [[p] for p in sorted(parties)]
        if collusion and len(parties) < 2:
            continue
        for grp in groups:
            gset = frozenset(grp)
            seed: dict[bytes, str] = {}
            for p in grp:
                seed.update(knowledge[p])
            targets = {e.key: rb.name(e.key) for e in net.epochs if e.event >= ev and not (e.members & gset)}
            for out, e_mk in mk:
                if e_mk >= ev and out not in seed:
                    targets.setdefault(out, rb.name(out))
            who = f"removed {grp} at event {ev}"
            _check_targets(rb, who, KnowledgeSet(seed, net), targets, v)
    return v


def check_key_independence(net: Network) -> Verdict:
    """Each group key against every other group key, no nonces."""
    rb = rules_for(net)
    v = Verdict("KeyIndependence", True, 0)
    keys: dict[bytes, str] = {}
    for e in net.epochs:
        keys.setdefault(e.key, rb.name(e.key))
    everything = rb.close(KnowledgeSet(dict(keys), net))
    for target, label in keys.items():
        v.checked += 1
        # cheap filter: some rule must produce target from atoms reachable at all
        producers = [
            r for r in rb.rules if any(c == target for c, _ in r.conclusions) and all(p in everything for p in r.premises)
        ] if target in everything else []
        if not any(target not in r.premises for r in producers):
            continue
        seed = {k: l for k, l in keys.items() if k != target}
        closed = rb.close(KnowledgeSet(seed, net))
        if target in closed:
            v.ok = False
            v.failures.append(Failure("other epoch keys", label, rb.chain(closed, target)))
    return v


def check_property(
    prop: str,
    net: Network,
    memories: dict[int, dict[bytes, str]] | None = None,
    collusion: bool = False,
) -> Verdict:
    if prop == "GroupKeySecrecy":
        return check_group_key_secrecy(net)
    if prop == "BackwardSecrecy":
        return check_backward_secrecy(net, memories or {})
    if prop == "ForwardSecrecy":
        return check_forward_secrecy(net, collusion=collusion)
    if prop == "KeyIndependence":
        return check_key_independence(net)
    raise ValueError(f"unknown property {prop!r}; expected one of {PROPERTIES}")


def check_all(
    net: Network, memories: dict[int, dict[bytes, str]], props: Iterable[str] = PROPERTIES
) -> list[Verdict]:
    out = []
    for p in props:
        out.append(check_property(p, net, memories))
        if p == "ForwardSecrecy":
            out.append(check_forward_secrecy(net, collusion=True))
    return out
