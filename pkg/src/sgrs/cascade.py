"""Cascaded supergroups: child groups act as the members of a higher ring.

At the super level a child's "nonce" is its current group key. A child event
changes that key, so the super key moves to ``kdf2("SG", K_SG, K_child)``.
Every group that holds the child's old key works this out alone; the one
group that never held it (the child's ring successor) is sent the result.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import primitives as prim
from .group import GroupSnapshot
from .primitives import SeededRng, kdf2
from .protocols import AuthServerStub, MembershipEvent, ProtocolRefused, apply_local
from .simnet import Mode, Network, Payload, register_step

CASCADE_ANNOUNCE = register_step("cascade.announce", Mode.BROADCAST)
CASCADE_DELIVER = register_step("cascade.deliver", Mode.UNICAST)
CASCADE_LOCAL = register_step("cascade.local", Mode.BROADCAST)


@dataclass
class Supergroup:
    level: int
    children: dict[str, GroupSnapshot]
    ring: tuple[str, ...]
    super_key: bytes
    # child gid -> {other child gid: that child's group key as last seen}
    views: dict[str, dict[str, bytes]] = field(default_factory=dict)

    def pred(self, gid: str) -> str:
        k = self.ring.index(gid)
        return self.ring[k - 1]

    def succ(self, gid: str) -> str:
        k = self.ring.index(gid)
        return self.ring[(k + 1) % len(self.ring)]

    def copy(self) -> "Supergroup":
        return Supergroup(
            self.level,
            {k: g.copy() for k, g in self.children.items()},
            self.ring,
            self.super_key,
            {k: dict(v) for k, v in self.views.items()},
        )

    def leaf_keys(self) -> dict[int, bytes | None]:
        return {i: m.super_key for g in self.children.values() for i, m in g.members.items()}


def build_supergroup(children: list[GroupSnapshot], rng: SeededRng) -> Supergroup:
    """Trusted setup over already bootstrapped child groups (ring = given order)."""
    if not children:
        raise ProtocolRefused("a supergroup needs at least one child")
    ids = tuple(g.gid for g in children)
    if len(set(ids)) != len(ids):
        raise ProtocolRefused("duplicate child group ids")
    kids = {g.gid: g.copy() for g in children}
    if len(ids) == 1:
        key = children[0].group_key
        views = {ids[0]: {ids[0]: key}}
    else:
        key = rng.next_bytes()
        views = {}
        for k, gid in enumerate(ids):
            p = ids[k - 1]
            views[gid] = {o: kids[o].group_key for o in ids if o != p}
    for g in kids.values():
        for m in g.members.values():
            m.super_key = key
            m.remember(key, "K_SG#0")
    return Supergroup(1, kids, ids, key, views)


def cascade_event(
    sg: Supergroup,
    leaf_event: MembershipEvent,
    rng: SeededRng,
    net: Network,
    auth: AuthServerStub | None = None,
    mutations=(),
) -> Supergroup:
    """Run ``leaf_event`` inside its child, then refresh the super key."""
    gid = leaf_event.group
    if gid not in sg.children:
        raise ProtocolRefused(f"no child group {gid!r}")
    auth = auth or AuthServerStub.default()
    out = sg.copy()
    child = apply_local(out.children[gid], leaf_event, rng, net, auth, mutations=mutations)
    out.children[gid] = child
    k_new = child.group_key

    if len(out.ring) == 1:
        out.super_key = k_new
        out.views[gid] = {gid: k_new}
        for m in child.members.values():
            m.super_key = k_new
        return out

    k_old_child = sg.children[gid].group_key
    k_sg = sg.super_key
    lacking = out.succ(gid)
    sponsor = child.sponsor
    with net.event("cascade", group=gid, level=sg.level, child_event=leaf_event.kind):
        new_key: dict[str, bytes] = {}
        holders = [o for o in out.ring if o not in (gid, lacking)]
        with net.step(CASCADE_ANNOUNCE):
            # readable only with the child's old key, i.e. not by its successor
            k_ann = kdf2(b"MK", k_old_child, k_sg)
            if holders:
                rcpt = [out.children[o].sponsor for o in holders]
                msg = net.send(sponsor, rcpt, Payload((("key", "K_child", k_new),)), key=k_ann, key_hint=[])
                for o in holders:
                    view = out.views[o]
                    got = net.receive(msg, out.children[o].sponsor, kdf2(b"MK", view[gid], k_sg))
                    view[gid] = got.keys()["K_child"]
                    new_key[o] = kdf2(b"SG", k_sg, view[gid])
            out.views[gid][gid] = k_new
            new_key[gid] = kdf2(b"SG", k_sg, k_new)
        with net.step(CASCADE_DELIVER):
            msg = net.send(sponsor, [out.children[lacking].sponsor], Payload((("key", "K_SG", new_key[gid]),)), key=k_sg)
            new_key[lacking] = net.receive(msg, out.children[lacking].sponsor, k_sg).keys()["K_SG"]
        if len(set(new_key.values())) != 1:
            raise ProtocolRefused("supergroup key disagreement")
        k_sg_new = new_key[gid]
        with net.step(CASCADE_LOCAL):
            for o in out.ring:
                g = out.children[o]
                rcpt = [i for i in g.ring if i != g.sponsor]
                msg = net.send(g.sponsor, rcpt, Payload((("key", "K_SG", k_sg_new),)), key=g.group_key)
                g.members[g.sponsor].super_key = k_sg_new
                g.members[g.sponsor].remember(k_sg_new, "K_SG")
                for i in rcpt:
                    val = net.receive(msg, i, g.members[i].group_key).keys()["K_SG"]
                    g.members[i].super_key = val
                    g.members[i].remember(val, "K_SG")
    out.super_key = k_sg_new
    return out
