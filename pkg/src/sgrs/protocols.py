"""Join, leave, merge and partition runs over a :class:`~sgrs.simnet.Network`.

Each run copies the input snapshot, lets every member update its own view
from what it actually received (or could derive locally), and returns the
new snapshot. Nothing is copied between member views behind the scenes.

``mutations`` switches off one countermeasure at a time. It exists for the
mutation tests; production callers leave it empty.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from math import ceil, log2
from typing import Iterable, Sequence

from . import primitives as prim
from .group import (
    DomainError,
    GroupRing,
    GroupSnapshot,
    MemberState,
    NotDerivable,
    can_derive,
    derive_multicast_key,
)
from .primitives import Nonce, SeededRng, kdf2
from .simnet import AUTH_SENDER, Mode, Network, Payload, box_item, register_step

MUTATIONS = {
    "join-key-mix": "join: new group key equals the current key (no sponsor-nonce mix)",
    "leave-rehash": "leave: neither the sponsor nonce nor the predecessor nonce is rehashed",
    "merge-sponsor-rehash": "merge: host sponsor nonce is not rehashed with the host key",
    "partition-G": "partition: function G does not rehash the nonces in front of departing blocks",
}

JOIN_TAG = register_step("join.tag", Mode.OUT_OF_BAND)
JOIN_REQUEST = register_step("join.request", Mode.BROADCAST)
JOIN_DELIVER = register_step("join.deliver", Mode.UNICAST)
JOIN_LINK = register_step("join.link", Mode.UNICAST)
LEAVE_REKEY = register_step("leave.rekey", Mode.BROADCAST)
LEAVE_DELIVER = register_step("leave.deliver", Mode.UNICAST)
MERGE_TICKET = register_step("merge.ticket", Mode.OUT_OF_BAND)
MERGE_REQUEST = register_step("merge.request", Mode.UNICAST)
MERGE_RELAY = register_step("merge.relay", Mode.UNICAST)
MERGE_STATE_B = register_step("merge.state_b", Mode.BROADCAST)
MERGE_LINK_B = register_step("merge.link_b", Mode.UNICAST)
MERGE_STATE_A = register_step("merge.state_a", Mode.BROADCAST)
MERGE_LINK_A = register_step("merge.link_a", Mode.UNICAST)
PARTITION_REKEY = register_step("partition.rekey", Mode.BROADCAST)
PARTITION_DELIVER = register_step("partition.deliver", Mode.UNICAST)


class ProtocolError(RuntimeError):
    pass


class ProtocolRefused(ProtocolError):
    """Preconditions do not hold; the group is left unchanged."""


class AuthRefused(ProtocolError):
    pass


def _check_mutations(mutations: Iterable[str]) -> frozenset[str]:
    mutations = frozenset(mutations)
    unknown = mutations - MUTATIONS.keys()
    if unknown:
        raise ValueError(f"unknown mutation(s) {sorted(unknown)}")
    return mutations


# ----------------------------------------------------------------- auth stub


@dataclass
class AuthServerStub:
    """Stand-in for the external authentication entity.

    ``sig(x)`` is an HMAC under ``mac_key``, which every legitimate member
    shares. Signatures are bound to the group key of the epoch they were
    issued in so that they stop being useful once that key is gone.
    """

    mac_key: bytes
    registry: set[int] = field(default_factory=set)
    # known only to the stub; seeds per-member channels and merge randomness
    secret: bytes = field(default=b"", repr=False)

    def __post_init__(self) -> None:
        if not self.secret:
            self.secret = hashlib.sha256(b"sgrs-auth-secret" + self.mac_key).digest()

    @classmethod
    def default(cls) -> "AuthServerStub":
        return cls(hashlib.sha256(b"sgrs-auth-stub").digest())

    def channel_key(self, member: int) -> bytes:
        """Pre-shared key between the stub and one registered member."""
        return hashlib.sha256(b"chan" + self.secret + member.to_bytes(8, "big", signed=True)).digest()

    def fresh(self, label: bytes) -> bytes:
        return hashlib.sha256(b"fresh" + self.secret + label).digest()

    def register(self, *ids: int) -> None:
        self.registry.update(ids)

    def sign(self, data: bytes, epoch_key: bytes) -> bytes:
        return prim.mac(self.mac_key, data + epoch_key)

    def verify(self, data: bytes, epoch_key: bytes, sig: bytes) -> bool:
        return prim.mac_verify(self.mac_key, data + epoch_key, sig)


@dataclass(frozen=True)
class JoinTag:
    part1: prim.SealedBox
    part2: prim.SealedBox
    joiner: int
    sponsor: int
    # handed to the joiner alone by the authentication stub
    joiner_nonce: Nonce = field(repr=False)
    signature: bytes = field(repr=False)
    channel_key: bytes = field(repr=False)
    part1_size: tuple[int, int] = (0, 0)
    part2_size: tuple[int, int] = (0, 0)
    # simulator bookkeeping for the adversary module; no party reads it
    seal_keys: tuple[bytes, bytes] = field(default=(b"", b""), repr=False)


def default_sponsor(g: GroupSnapshot, leaving: Iterable[int] = ()) -> int:
    """Smallest surviving id not adjacent to a leaving member, else smallest survivor."""
    leaving = set(leaving)
    survivors = [i for i in g.ring if i not in leaving]
    if not survivors:
        raise ProtocolRefused("no surviving member to sponsor the event")
    if not leaving:
        return min(survivors)
    adjacent = {g.pred(d) for d in leaving} | {g.succ(d) for d in leaving}
    clear = [i for i in survivors if i not in adjacent]
    return min(clear) if clear else min(survivors)


def _nonce_rehash(n: Nonce, mix: bytes) -> Nonce:
    return n.rehashed(mix)


def _finish(net: Network, h: GroupSnapshot, ring: GroupRing, key: bytes) -> GroupSnapshot:
    h.refresh(ring, key)
    h.epoch += 1
    for m in h.members.values():
        m.set_key(key, f"K_G[{h.gid}#{h.epoch}]")
    net.record_epoch(h.gid, h.epoch, key, ring)
    return h


# ----------------------------------------------------------------- join


def part1_key(channel_key: bytes, k_new: bytes) -> bytes:
    return kdf2(b"MK", channel_key, k_new)


def issue_join_tag(
    auth: AuthServerStub,
    g: GroupSnapshot,
    joiner: int,
    rng: SeededRng,
    sponsor: int | None = None,
    mutations: Iterable[str] = (),
) -> JoinTag:
    mutations = _check_mutations(mutations)
    if joiner in g.ring:
        raise ProtocolRefused(f"member {joiner} is already in the group")
    if joiner not in auth.registry:
        raise AuthRefused(f"member {joiner} is not registered with the authentication stub")
    i = g.sponsor if sponsor is None else sponsor
    if i not in g.ring:
        raise ProtocolRefused(f"sponsor {i} is not in the group")
    n_j = rng.next_nonce(joiner)
    n_i = g.shared_nonces[i]
    n_i_new = n_i.rehashed(n_j.value)
    k_new = g.group_key if "join-key-mix" in mutations else kdf2(b"GK-join", g.group_key, n_i_new.value)
    s_j = [n for x, n in g.shared_nonces.items() if x != i] + [n_j]
    p1 = Payload(tuple(("nonce", n) for n in sorted(s_j, key=lambda n: n.origin)))
    sig = auth.sign(n_j.value, g.group_key)
    p2 = Payload((("nonce", n_j), ("sig", sig)))
    k_y = kdf2(b"MK", n_i.value, g.group_key)
    channel = rng.next_bytes()
    # bound to the joiner's private channel key as well as the new group key:
    # under the group key alone every member could read S_j, which contains
    # each member's predecessor nonce
    k_p1 = part1_key(channel, k_new)
    return JoinTag(
        part1=prim.seal(k_p1, b"join.tag.state", p1.encode()),
        part2=prim.seal(k_y, JOIN_REQUEST.encode(), p2.encode()),
        joiner=joiner,
        sponsor=i,
        joiner_nonce=n_j,
        signature=sig,
        channel_key=channel,
        part1_size=p1.composition(),
        part2_size=p2.composition(),
        seal_keys=(k_p1, k_y),
    )


def run_join(
    g: GroupSnapshot,
    tag: JoinTag,
    net: Network,
    auth: AuthServerStub,
    mutations: Iterable[str] = (),
) -> GroupSnapshot:
    """Admit ``tag.joiner`` right after the sponsor in the ring."""
    mutations = _check_mutations(mutations)
    if g.size < 2:
        raise ProtocolRefused("join needs a group of at least 2")
    i, j = tag.sponsor, tag.joiner
    if i not in g.ring or j in g.ring:
        raise ProtocolRefused("tag does not fit this group")
    old = g.ring
    nxt, prv = old.succ(i), old.pred(i)
    h = g.copy()
    k_cur = g.group_key
    with net.event("join", group=g.gid, joiner=j, sponsor=i, size=g.size):
        net.record_admission([j], g.gid)
        joiner = MemberState(j, {}, old, b"")
        joiner.remember(tag.channel_key, f"auth-channel[{j}]")

        with net.step(JOIN_TAG):
            inner = Payload(
                (
                    ("box", tag.part1, *tag.part1_size),
                    ("box", tag.part2, *tag.part2_size),
                    ("nonce", tag.joiner_nonce),
                    ("sig", tag.signature),
                )
            )
            m0 = net.send(
                AUTH_SENDER,
                [j],
                inner,
                tag.channel_key,
                inner=((tag.part1, tag.seal_keys[0]), (tag.part2, tag.seal_keys[1])),
            )
            got = net.receive(m0, j, tag.channel_key)
            joiner.learn(got.nonces()[0])
            joiner.remember(got.sigs()[0], f"sig[{j}]")
            part1, part2 = got.boxes()

        # 1) join request, readable by every holder of the sponsor nonce
        with net.step(JOIN_REQUEST):
            k_y_true = kdf2(b"MK", g.shared_nonces[i].value, k_cur)
            m1 = net.send(
                j,
                [x for x in old if x != nxt],
                Payload((box_item(part2, Payload((("nonce", tag.joiner_nonce), ("sig", tag.signature)))),)),
                key=k_y_true,
                key_hint=[i],
                ad=JOIN_REQUEST.encode(),
                prebuilt=part2,
            )
            n_j = sig_i = None
            for x in m1.recipients:
                m = h.members[x]
                k_y = derive_multicast_key(m, [i])
                body = Payload.decode(prim.open_box(k_y, m1.box))
                cand, sig = body.nonces()[0], body.sigs()[0]
                net.count_auth()
                if not auth.verify(cand.value, k_cur, sig):
                    raise AuthRefused(f"join request of {j} failed signature verification")
                m.learn(cand)
                if x == i:
                    n_j, sig_i = cand, sig

        # 2) every member that read the request rehashes n_i with n_j and moves
        # to the new key; the successor, who gets n_i later, must not be able
        # to reopen the request with it
        k_new = {}
        for x in m1.recipients:
            m = h.members[x]
            m.learn(_nonce_rehash(m.state[i], m.state[j].value))
            k_new[x] = k_cur if "join-key-mix" in mutations else kdf2(b"GK-join", k_cur, m.state[i].value)

        # 3) sponsor hands the new key to the joiner
        with net.step(JOIN_DELIVER):
            k_d = kdf2(b"MK", n_j.value, sig_i)
            m3 = net.send(i, [j], Payload((("key", "K_G", k_new[i]),)), key=k_d, key_hint=[j])
            k_d_j = kdf2(b"MK", joiner.own_nonce.value, got.sigs()[0])
            key_j = net.receive(m3, j, k_d_j).keys()["K_G"]
            for n in net.open_inner(part1, part1_key(tag.channel_key, key_j)).nonces():
                joiner.learn(n)

        # 4) the sponsor's predecessor passes n_i to the sponsor's successor
        with net.step(JOIN_LINK):
            if prv != nxt:
                sender = h.members[prv]
                k_l = derive_multicast_key(sender, [prv])
                hint = [prv]
            else:
                # two-member group: the sponsor is the only holder of n_i
                sender = h.members[i]
                k_l = k_cur
                hint = []
            m4 = net.send(sender.id, [nxt], Payload((("nonce", sender.state[i]),)), key=k_l, key_hint=hint)
            rcv = h.members[nxt]
            k_l_r = derive_multicast_key(rcv, hint) if hint else rcv.group_key
            rcv.learn(net.receive(m4, nxt, k_l_r).nonces()[0])

        # 5) the successor derives the new key itself
        k_new[nxt] = k_cur if "join-key-mix" in mutations else kdf2(b"GK-join", k_cur, rcv.state[i].value)
        k_new[j] = key_j
        if len(set(k_new.values())) != 1:
            raise ProtocolError("join ended without key agreement")

        ring = old.insert_after(i, [j])
        joiner.ring = ring
        h.members[j] = joiner
        return _finish(net, h, ring, k_new[i])


# ----------------------------------------------------------------- leave


def _removal_knowledge(g: GroupSnapshot, parties: Iterable[int]) -> dict[int, dict[bytes, str]]:
    return {d: dict(g.members[d].seen) for d in parties}


def run_leave(
    g: GroupSnapshot,
    departing: int,
    sponsor: int | None,
    rng: SeededRng,
    net: Network,
    mutations: Iterable[str] = (),
) -> GroupSnapshot:
    mutations = _check_mutations(mutations)
    d = departing
    if d not in g.ring:
        raise ProtocolRefused(f"member {d} is not in the group")
    if g.size < 3:
        raise ProtocolRefused("leave would shrink the group below 2")
    j = default_sponsor(g, [d]) if sponsor is None else sponsor
    if j == d or j not in g.ring:
        raise ProtocolRefused("sponsor must be a surviving member")
    rehash = "leave-rehash" not in mutations
    old = g.ring
    pd = old.pred(d)
    ring = old.without([d])
    h = g.copy()
    k_old = g.group_key
    with net.event("leave", group=g.gid, departing=d, sponsor=j, size=g.size):
        net.record_removal([d], _removal_knowledge(g, [d]))
        sp = h.members[j]
        n_random = rng.next_bytes()
        sp.remember(n_random, f"n_random[{net.current_event}]")

        # 1) random nonce to everyone holding n_{pd}; the departing member is not one
        with net.step(LEAVE_REKEY):
            k_y = derive_multicast_key(sp, [pd])
            body = Payload((("rand", n_random), *(("id", x) for x in ring)))
            m1 = net.send(j, [x for x in old if x != j], body, key=k_y, key_hint=[pd])
            got = {j: n_random}
            held = {j: k_y}  # old multicast keys kept until the event ends
            for x in ring:
                if x == j:
                    continue
                m = h.members[x]
                if can_derive(m, [pd]):
                    held[x] = derive_multicast_key(m, [pd])
                    r = net.receive(m1, x, held[x]).rands()[0]
                    m.remember(r, f"n_random[{net.current_event}]")
                    got[x] = r

        # 2) local updates on each survivor's own view
        keys: dict[int, bytes] = {}
        for x in ring:
            m = h.members[x]
            r = got.get(x)
            if rehash and pd in m.state:
                if d in m.state:
                    m.learn(_nonce_rehash(m.state[pd], m.state[d].value))
                else:
                    m.forget(pd)
            if r is not None and j in m.state:
                if rehash:
                    m.learn(_nonce_rehash(m.state[j], r))
                keys[x] = kdf2(b"GK-leave", m.state[j].value, r)
            m.forget(d)

        # 3) the survivor that cannot rebuild the key gets it from the sponsor
        with net.step(LEAVE_DELIVER):
            need = [x for x in ring if x not in keys]
            if len(need) > 1:
                raise ProtocolError(f"leave left {need} without the key")
            for x in need:
                m3 = net.send(j, [x], Payload((("key", "K_G", keys[j]),)), key=k_y, key_hint=[pd])
                keys[x] = net.receive(m3, x, held[x]).keys()["K_G"]
        if len(set(keys.values())) != 1:
            raise ProtocolError("leave ended without key agreement")
        del h.members[d]
        return _finish(net, h, ring, keys[j])


# ----------------------------------------------------------------- partition


def partition_index_set(g: GroupSnapshot, departing: Iterable[int]) -> set[int]:
    """Ids whose nonces every survivor holds (the intersection of survivor state vectors)."""
    departing = set(departing)
    survivors = [x for x in g.ring if x not in departing]
    return set(g.ring) - {g.pred(v) for v in survivors}


def run_partition(
    g: GroupSnapshot,
    departing: Iterable[int],
    sponsor: int | None,
    rng: SeededRng,
    net: Network,
    mutations: Iterable[str] = (),
) -> GroupSnapshot:
    mutations = _check_mutations(mutations)
    D = set(departing)
    if not D or not D < set(g.ring):
        raise ProtocolRefused("departing set must be a non-empty proper subset of the ring")
    old = g.ring
    survivors = [x for x in old if x not in D]
    if len(survivors) < 2:
        raise ProtocolRefused("partition would leave fewer than 2 members")
    s = default_sponsor(g, D) if sponsor is None else sponsor
    if s not in survivors:
        raise ProtocolRefused("sponsor must survive the partition")
    apply_g = "partition-G" not in mutations
    blocks = [(old.pred(b[0]), b[-1]) for b in old.blocks(D)]  # (surviving front, tail)
    Y = partition_index_set(g, D)
    ring = old.without(D)
    h = g.copy()
    k_old = g.group_key
    with net.event("partition", group=g.gid, departing=sorted(D), sponsor=s, size=g.size, index_set=sorted(Y)):
        net.record_removal(D, _removal_knowledge(g, D))
        sp = h.members[s]
        n_random = rng.next_bytes()
        sp.remember(n_random, f"n_random[{net.current_event}]")

        with net.step(PARTITION_REKEY):
            k_y = derive_multicast_key(sp, Y)
            body = Payload((("rand", n_random), *(("id", x) for x in ring)))
            m1 = net.send(s, [x for x in old if x != s], body, key=k_y, key_hint=Y)
            got = {s: n_random}
            held = {s: k_y}
            for x in survivors:
                if x == s:
                    continue
                m = h.members[x]
                held[x] = derive_multicast_key(m, Y)
                r = net.receive(m1, x, held[x]).rands()[0]
                m.remember(r, f"n_random[{net.current_event}]")
                got[x] = r

        keys: dict[int, bytes] = {}
        for x in survivors:
            m = h.members[x]
            r = got[x]
            if s in m.state:
                m.learn(_nonce_rehash(m.state[s], r))
                keys[x] = kdf2(b"GK-leave", m.state[s].value, r)
            # function G: one rehash per departing block
            if apply_g:
                for front, tail in blocks:
                    if front in m.state:
                        if tail in m.state:
                            m.learn(_nonce_rehash(m.state[front], m.state[tail].value))
                        else:
                            m.forget(front)
            for d in D:
                m.forget(d)

        with net.step(PARTITION_DELIVER):
            need = [x for x in survivors if x not in keys]
            if len(need) > 1:
                raise ProtocolError(f"partition left {need} without the key")
            for x in need:
                m3 = net.send(s, [x], Payload((("key", "K_G", keys[s]),)), key=k_y, key_hint=Y)
                keys[x] = net.receive(m3, x, held[x]).keys()["K_G"]
        if len(set(keys.values())) != 1:
            raise ProtocolError("partition ended without key agreement")
        for d in D:
            del h.members[d]
        return _finish(net, h, ring, keys[s])


# ----------------------------------------------------------------- merge


def run_merge_pair(
    ga: GroupSnapshot,
    gb: GroupSnapshot,
    net: Network,
    auth: AuthServerStub | None = None,
    sponsor_a: int | None = None,
    sponsor_b: int | None = None,
    mutations: Iterable[str] = (),
) -> GroupSnapshot:
    """Group ``gb`` joins host ``ga``; b's ring is spliced in after a's sponsor.

    The merged group keeps ``ga``'s id. Its key ``GK-join(K_b, r)`` is fresh:
    host members never learn ``K_b``, so b-side traffic sealed under it stays
    closed to them even after they hold every b nonce.
    """
    mutations = _check_mutations(mutations)
    auth = auth or AuthServerStub.default()
    if set(ga.ring) & set(gb.ring):
        raise ProtocolRefused("member id collision between merging groups")
    if ga.size < 3:
        raise ProtocolRefused("the host group of a merge needs at least 3 members")
    i = ga.sponsor if sponsor_a is None else sponsor_a
    sb = gb.sponsor if sponsor_b is None else sponsor_b
    if i not in ga.ring or sb not in gb.ring:
        raise ProtocolRefused("merge sponsors must belong to their groups")
    A = ga.ring
    a_prev, a_next = A.pred(i), A.succ(i)
    b_order = gb.ring.rotated_to_end(sb)
    b1, bm = b_order[0], b_order[-1]
    ka, kb = ga.group_key, gb.group_key
    a_ids = list(A)
    b_ids = list(gb.ring)

    # stub-side material, computed from ground truth and not part of any member's work
    label = f"{ga.gid}#{ga.epoch}|{gb.gid}#{gb.epoch}|{a_ids}|{b_ids}".encode()
    r_m = auth.fresh(b"merge-r" + label)
    link = auth.fresh(b"merge-link" + label)
    with prim.unmetered():
        k_merged = kdf2(b"GK-join", kb, r_m)
        xb = dict(gb.shared_nonces)
        xb[sb] = _nonce_rehash(xb[sb], r_m)
        y_req = [x for x in a_ids if x != a_prev]
        k_req = kdf2(b"MK", prim.xor_combine(ga.shared_nonces[x] for x in y_req), ka)
        sig = auth.sign(b"".join(xb[x].value for x in b_ids), k_merged)
        req_body = Payload(
            (("key", "K_M", k_merged), ("key", "L", link), ("sig", sig), *(("nonce", xb[x]) for x in b_ids))
        )
        req_box = prim.seal(k_req, MERGE_REQUEST.encode(), req_body.encode())

    h = ga.copy()
    hb = gb.copy()
    h.members.update(hb.members)
    keys: dict[int, bytes] = {}
    with net.event("merge", group=ga.gid, joining=gb.gid, sponsor_a=i, sponsor_b=sb, size_a=ga.size, size_b=gb.size):
        net.record_admission(b_ids, ga.gid)

        # auth -> each b member on its own channel: n_{a_prev}, r; b's sponsor also gets L
        with net.step(MERGE_TICKET):
            r_at: dict[int, bytes] = {}
            for x in b_ids:
                ch = auth.channel_key(x)
                m = h.members[x]
                m.remember(ch, f"chan{x}")
                items = [("nonce", ga.shared_nonces[a_prev]), ("rand", r_m)]
                if x == sb:
                    items.append(("key", "L", link))
                mt = net.send(AUTH_SENDER, [x], Payload(tuple(items)), key=ch)
                got = net.receive(mt, x, ch)
                m.learn(got.nonces()[0])
                r_at[x] = got.rands()[0]
                m.remember(r_at[x], "r_merge")
                if x == sb:
                    m.remember(got.keys()["L"], "L_merge")
        for x in b_ids:
            keys[x] = kdf2(b"GK-join", h.members[x].group_key, r_at[x])

        # 1) b's sponsor forwards the stub's box; only a's sponsor can open it
        with net.step(MERGE_REQUEST):
            m1 = net.send(sb, [i], req_body, key=k_req, key_hint=y_req, prebuilt=req_box)
            sa = h.members[i]
            got = net.receive(m1, i, derive_multicast_key(sa, y_req))
            net.count_auth()
            k_m = got.keys()["K_M"]
            if not auth.verify(b"".join(n.value for n in got.nonces()), k_m, got.sigs()[0]):
                raise AuthRefused("merge ticket failed signature verification")
            sa.remember(got.keys()["L"], "L_merge")
            keys[i] = k_m
            for n in got.nonces():
                sa.learn(n)

        # 2) b's vector and the new key to a, except a_next; the inner key uses
        #    the old n_i, which everyone rehashes with K_a right after
        with net.step(MERGE_STATE_A):
            n_i_old = sa.state[i]
            k5 = derive_multicast_key(sa, [i], group_key=ka)
            inner = Payload((("key", "K_M", k_m), *(("nonce", xb[x]) for x in b_ids)))
            inner_box = prim.seal(k5, b"merge.state_a.inner", inner.encode())
            rcpt = [x for x in a_ids if x not in (i, a_next)]
            m5 = net.send(i, rcpt, Payload((box_item(inner_box, inner),)), key=ka, key_hint=[i], inner=((inner_box, k5),))
            for x in rcpt:
                m = h.members[x]
                box = net.receive(m5, x, m.group_key).boxes()[0]
                body = net.open_inner(box, derive_multicast_key(m, [i], group_key=ka))
                keys[x] = body.keys()["K_M"]
                for n in body.nonces():
                    m.learn(n)
            for x in a_ids:
                if x != a_next and "merge-sponsor-rehash" not in mutations:
                    m = h.members[x]
                    m.learn(_nonce_rehash(m.state[i] if x != i else n_i_old, ka))

        # 3) a_prev gives a_next the new n_i and b's vector minus n_m^b
        with net.step(MERGE_LINK_A):
            snd = h.members[a_prev]
            k6 = derive_multicast_key(snd, [a_prev], group_key=ka)
            body = Payload(
                (("nonce", snd.state[i]), ("key", "K_M", keys[a_prev]), *(("nonce", xb[x]) for x in b_ids if x != bm))
            )
            m6 = net.send(a_prev, [a_next], body, key=k6, key_hint=[a_prev])
            m = h.members[a_next]
            got6 = net.receive(m6, a_next, derive_multicast_key(m, [a_prev], group_key=ka))
            for n in got6.nonces():
                m.learn(n)
            keys[a_next] = got6.keys()["K_M"]

        s_i = [sa.state[x] for x in a_ids if x != a_prev]

        # 4) sponsor to sponsor under the stub-issued link key
        with net.step(MERGE_RELAY):
            m7 = net.send(i, [sb], Payload(tuple(("nonce", n) for n in s_i)), key=link)
            ms = h.members[sb]
            for n in net.receive(m7, sb, link).nonces():
                ms.learn(n)

        # 5) a's vector inside b, except b1, under the old n_sb and K_b
        rest = [x for x in b_ids if x not in (sb, b1)]
        if rest:
            with net.step(MERGE_STATE_B):
                k3 = derive_multicast_key(ms, [sb])
                m3 = net.send(sb, rest, Payload(tuple(("nonce", n) for n in s_i)), key=k3, key_hint=[sb])
                for x in rest:
                    m = h.members[x]
                    for n in net.receive(m3, x, derive_multicast_key(m, [sb])).nonces():
                        m.learn(n)

        # 6) b1 gets the rotated n_sb and everything of a but n_i
        with net.step(MERGE_LINK_B):
            # a two-member b leaves the sponsor without n_b1; fall back to K_b
            hint4 = [b1] if gb.size > 2 else []
            k4 = derive_multicast_key(ms, hint4) if hint4 else kb
            ms.learn(_nonce_rehash(ms.state[sb], r_at[sb]))
            body = Payload((("nonce", ms.state[sb]), *(("nonce", n) for n in s_i if n.origin != i)))
            m4 = net.send(sb, [b1], body, key=k4, key_hint=hint4)
            m = h.members[b1]
            k4_r = derive_multicast_key(m, hint4) if hint4 else m.group_key
            for n in net.receive(m4, b1, k4_r).nonces():
                m.learn(n)

        for x in rest:
            m = h.members[x]
            m.learn(_nonce_rehash(m.state[sb], r_at[x]))

        ring = A.insert_after(i, b_order)
        h.epoch = max(ga.epoch, gb.epoch)
        keys_seen = set(keys.values())
        if len(keys_seen) != 1 or set(keys) != set(ring):
            raise ProtocolError("merged key disagreement")
        return _finish(net, h, ring, k_merged)


def merge_bracket(ids: Sequence[str]) -> list[list[tuple[str, ...]]]:
    """Tournament rounds over sorted group ids; an odd one out passes through."""
    cur = sorted(ids)
    rounds = []
    while len(cur) > 1:
        pairs = [tuple(cur[k : k + 2]) for k in range(0, len(cur), 2)]
        rounds.append(pairs)
        cur = [p[0] for p in pairs]
    return rounds


def merge_rounds(k: int) -> int:
    return ceil(log2(k)) if k > 1 else 0


def run_merge_multi(
    groups: Sequence[GroupSnapshot],
    net: Network,
    auth: AuthServerStub | None = None,
    mutations: Iterable[str] = (),
) -> GroupSnapshot:
    """Merge ``k`` groups pairwise in ``ceil(log2 k)`` rounds.

    Within a pair the larger group hosts (ties go to the smaller id); the
    merged group takes the smaller id of the pair.
    """
    if len(groups) < 2:
        raise ProtocolRefused("multi-merge needs at least 2 groups")
    by_id = {g.gid: g for g in groups}
    if len(by_id) != len(groups):
        raise ProtocolRefused("duplicate group ids")
    cur = sorted(by_id)
    while len(cur) > 1:
        nxt = []
        for k in range(0, len(cur), 2):
            pair = cur[k : k + 2]
            if len(pair) == 1:
                nxt.append(pair[0])
                continue
            g1, g2 = by_id[pair[0]], by_id[pair[1]]
            host, guest = (g2, g1) if g2.size > g1.size else (g1, g2)
            merged = run_merge_pair(host, guest, net, auth=auth, mutations=mutations)
            # the merged group keeps the pair's first id so brackets stay stable
            merged.gid = pair[0]
            by_id[pair[0]] = merged
            nxt.append(pair[0])
        cur = nxt
    return by_id[cur[0]]


# ----------------------------------------------------------------- dispatch


EVENT_KINDS = ("join", "leave", "merge", "partition")


@dataclass(frozen=True)
class MembershipEvent:
    kind: str
    group: str
    joiner: int | None = None
    member: int | None = None
    members: tuple[int, ...] = ()
    groups: tuple[str, ...] = ()
    sponsor: int | None = None
    # merge only: sponsor of the joining group
    guest_sponsor: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        need = {"join": self.joiner, "leave": self.member, "partition": self.members or None, "merge": self.groups or None}
        if need[self.kind] is None:
            raise ValueError(f"{self.kind} event is missing its parameter")


def apply_local(
    g: GroupSnapshot,
    ev: MembershipEvent,
    rng: SeededRng,
    net: Network,
    auth: AuthServerStub,
    mutations: Iterable[str] = (),
) -> GroupSnapshot:
    """Run a join, leave or partition on one group."""
    if ev.kind == "join":
        auth.register(ev.joiner)
        tag = issue_join_tag(auth, g, ev.joiner, rng, sponsor=ev.sponsor, mutations=mutations)
        return run_join(g, tag, net, auth, mutations=mutations)
    if ev.kind == "leave":
        return run_leave(g, ev.member, ev.sponsor, rng, net, mutations=mutations)
    if ev.kind == "partition":
        return run_partition(g, ev.members, ev.sponsor, rng, net, mutations=mutations)
    raise ProtocolRefused("merge events span several groups; use run_merge_pair")
