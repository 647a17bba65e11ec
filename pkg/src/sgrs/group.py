"""Member state vectors, the logical ring, and multicast keys.

Ring convention: in ``order = (1, 2, 3)`` member 2's predecessor is 1, so
member 2 holds every group nonce except ``n_1``. Wraparound makes 3 the
predecessor of 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import Iterable

from .primitives import Nonce, SeededRng, kdf2, xor_combine


class DomainError(ValueError):
    pass


class NotDerivable(Exception):
    """The member lacks at least one nonce indexed by Y."""


@dataclass(frozen=True)
class GroupRing:
    order: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.order)) != len(self.order):
            raise DomainError(f"duplicate ids in ring {self.order}")
        if len(self.order) < 2:
            raise DomainError("a ring needs at least 2 members")

    def __len__(self) -> int:
        return len(self.order)

    def __contains__(self, i: object) -> bool:
        return i in self.order

    def __iter__(self):
        return iter(self.order)

    def _index(self, i: int) -> int:
        try:
            return self.order.index(i)
        except ValueError:
            raise DomainError(f"member {i} not in ring") from None

    def pred(self, i: int) -> int:
        return self.order[self._index(i) - 1]

    def succ(self, i: int) -> int:
        return self.order[(self._index(i) + 1) % len(self.order)]

    def insert_after(self, anchor: int, ids: Iterable[int]) -> "GroupRing":
        k = self._index(anchor) + 1
        return GroupRing(self.order[:k] + tuple(ids) + self.order[k:])

    def without(self, ids: Iterable[int]) -> "GroupRing":
        gone = set(ids)
        return GroupRing(tuple(i for i in self.order if i not in gone))

    def rotated_to_end(self, last: int) -> tuple[int, ...]:
        """Order starting right after ``last`` and ending with it."""
        k = self._index(last) + 1
        return self.order[k:] + self.order[:k]

    def blocks(self, members: set[int]) -> list[tuple[int, ...]]:
        """Maximal contiguous runs (in ring order) of ``members``."""
        if not members or len(members) == len(self.order):
            raise DomainError("blocks need a proper non-empty subset")
        # start scanning just after a non-member so runs never wrap
        start = next(k for k, i in enumerate(self.order) if i not in members)
        seq = self.order[start + 1 :] + self.order[: start + 1]
        runs: list[tuple[int, ...]] = []
        cur: list[int] = []
        for i in seq:
            if i in members:
                cur.append(i)
            elif cur:
                runs.append(tuple(cur))
                cur = []
        if cur:
            runs.append(tuple(cur))
        return runs


@dataclass
class MemberState:
    id: int
    state: dict[int, Nonce]
    ring: GroupRing
    group_key: bytes
    # every secret value this party ever held (perfect recall), value -> label
    seen: dict[bytes, str] = field(default_factory=dict, repr=False)
    super_key: bytes | None = None

    @property
    def own_nonce(self) -> Nonce:
        return self.state[self.id]

    def learn(self, n: Nonce) -> None:
        self.state[n.origin] = n
        self.seen[n.value] = f"n{n.origin}v{n.version}"

    def forget(self, origin: int) -> None:
        self.state.pop(origin, None)

    def set_key(self, key: bytes, label: str = "K_G") -> None:
        self.group_key = key
        self.seen[key] = label

    def remember(self, value: bytes, label: str) -> None:
        self.seen[value] = label

    def copy(self) -> "MemberState":
        return MemberState(self.id, dict(self.state), self.ring, self.group_key, dict(self.seen), self.super_key)


@dataclass
class GroupSnapshot:
    gid: str
    ring: GroupRing
    members: dict[int, MemberState]
    group_key: bytes
    sponsor: int
    shared_nonces: dict[int, Nonce]
    epoch: int = 0

    def copy(self) -> "GroupSnapshot":
        return GroupSnapshot(
            self.gid,
            self.ring,
            {i: m.copy() for i, m in self.members.items()},
            self.group_key,
            self.sponsor,
            dict(self.shared_nonces),
            self.epoch,
        )

    @property
    def size(self) -> int:
        return len(self.ring)

    def pred(self, i: int) -> int:
        return self.ring.pred(i)

    def succ(self, i: int) -> int:
        return self.ring.succ(i)

    def refresh(self, ring: GroupRing, group_key: bytes) -> None:
        """Adopt a new ring and key; ground-truth nonces come from their owners."""
        self.ring = ring
        self.group_key = group_key
        for m in self.members.values():
            m.ring = ring
        self.shared_nonces = {i: self.members[i].own_nonce for i in ring}
        if self.sponsor not in ring:
            self.sponsor = min(ring)


def pred(ring: GroupRing, i: int) -> int:
    return ring.pred(i)


def succ(ring: GroupRing, i: int) -> int:
    return ring.succ(i)


def bootstrap(
    member_ids: Iterable[int],
    rng: SeededRng,
    gid: str = "g0",
    net=None,
) -> GroupSnapshot:
    """Trusted setup: fresh nonces, ring in ascending id order, random group key."""
    ids = sorted(member_ids)
    ring = GroupRing(tuple(ids))
    nonces = {i: rng.next_nonce(i) for i in ids}
    key = rng.next_bytes()
    members = {}
    for i in ids:
        p = ring.pred(i)
        m = MemberState(i, {}, ring, b"")
        for j, n in nonces.items():
            if j != p:
                m.learn(n)
        m.set_key(key, f"K_G[{gid}#0]")
        members[i] = m
    g = GroupSnapshot(gid, ring, members, key, ids[0], dict(nonces), 0)
    if net is not None:
        net.record_epoch(gid, 0, key, ids)
    return g


def can_derive(m: MemberState, Y: Iterable[int]) -> bool:
    return all(y in m.state for y in Y)


def derive_multicast_key(m: MemberState, Y: Iterable[int], group_key: bytes | None = None) -> bytes:
    """``Hash(XOR(Y_s), K_G)`` from the member's own view."""
    Y = set(Y)
    if not Y:
        raise DomainError("Y must be non-empty")
    missing = [y for y in Y if y not in m.state]
    if missing:
        raise NotDerivable(f"member {m.id} lacks nonces of {sorted(missing)}")
    key = m.group_key if group_key is None else group_key
    return kdf2(b"MK", xor_combine(m.state[y] for y in Y), key)


# ------------------------------------------------------------- key counting


def count_keys_closed_form(N: int) -> tuple[int, int]:
    """Evaluate the odd/even series for the number of multicast keys W and
    per-member subgroups Z.

    Each series runs ``k = 1 .. last`` where ``last`` is read off the
    ``(N - k)!`` (resp. ``(N - 1 - k)!``) factor of its final printed term:
    W stops at N-2 (odd) / N-1 (even), Z stops at N-2 and adds 1 for odd N.
    """
    if N < 3:
        raise DomainError("closed form needs N >= 3")
    odd = N % 2 == 1
    w_last = N - 2 if odd else N - 1
    W = sum(comb(N, k) for k in range(1, w_last + 1))
    Z = sum(comb(N - 1, k) for k in range(1, N - 1)) + (1 if odd else 0)
    return W, Z


BRUTEFORCE_LIMIT = 12


def count_keys_bruteforce(g: GroupSnapshot) -> tuple[int, dict[int, int]]:
    """Enumerate every nonce subset and count who can derive it."""
    ids = list(g.ring)
    if len(ids) > BRUTEFORCE_LIMIT:
        raise DomainError(f"brute force is limited to {BRUTEFORCE_LIMIT} members")
    views = {i: set(g.members[i].state) for i in ids}
    W = 0
    Z = {i: 0 for i in ids}
    for r in range(1, len(ids) + 1):
        for Y in combinations(ids, r):
            holders = [i for i in ids if views[i].issuperset(Y)]
            if len(holders) >= 2:
                W += 1
            for i in holders:
                Z[i] += 1
    return W, Z


# ------------------------------------------------------------- invariants


def check_ring_invariant(g: GroupSnapshot) -> list[str]:
    out = []
    ids = set(g.ring)
    if set(g.members) != ids:
        out.append(f"member table {sorted(g.members)} != ring {sorted(ids)}")
    for i in g.ring:
        m = g.members.get(i)
        if m is None:
            continue
        expect = ids - {g.ring.pred(i)}
        have = set(m.state)
        if have != expect:
            extra = sorted(have - expect)
            lacking = sorted(expect - have)
            out.append(f"member {i}: state keys off (extra {extra}, missing {lacking})")
        for j in have & expect:
            truth = g.shared_nonces.get(j)
            if truth is None or m.state[j].value != truth.value:
                out.append(f"member {i}: stale or wrong nonce for {j}")
        if m.group_key != g.group_key:
            out.append(f"member {i}: group key disagrees")
        if m.ring != g.ring:
            out.append(f"member {i}: ring view disagrees")
    return out
