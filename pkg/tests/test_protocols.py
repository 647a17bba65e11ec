from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgrs import primitives as prim
from sgrs.group import bootstrap, check_ring_invariant, derive_multicast_key
from sgrs.primitives import AuthFailure, SeededRng, kdf2
from sgrs.protocols import (
    MUTATIONS,
    AuthRefused,
    AuthServerStub,
    MembershipEvent,
    ProtocolRefused,
    issue_join_tag,
    merge_bracket,
    merge_rounds,
    partition_index_set,
    run_join,
    run_leave,
    run_merge_multi,
    run_merge_pair,
    run_partition,
)
from sgrs.simnet import Network


def origins(m):
    return {n.origin for n in m.state.values()}


def versions(m):
    return {n.origin: n.version for n in m.state.values()}


def setup(ids, seed=1):
    rng = SeededRng(seed)
    net = Network()
    g = bootstrap(ids, rng, net=net)
    auth = AuthServerStub.default()
    auth.register(*ids)
    return g, rng, net, auth


def rehash_arg(net, before, after):
    """The mixing value ``x`` with ``NR(before, x) == after``, from the run's log."""
    for (label, a, b), (out, _) in net.derivations.items():
        if label == b"NR" and a == before and out == after:
            return b
    return None


# ---------------------------------------------------------------- join


def test_fig4_tag_part2_opens_for_n2_n3_only():
    g, rng, net, auth = setup([1, 2, 3])
    auth.register(4)
    tag = issue_join_tag(auth, g, 4, rng, sponsor=3)
    opened = set()
    for i, m in g.members.items():
        try:
            prim.open_box(derive_multicast_key(m, [3]), tag.part2)
            opened.add(i)
        except Exception:
            pass
    assert opened == {2, 3}
    # the joiner's own view: n_4 and the channel key, nothing that opens part1
    for k in (tag.channel_key, tag.joiner_nonce.value, g.group_key):
        with pytest.raises(AuthFailure):
            prim.open_box(k, tag.part1)


def test_tag_for_unregistered_id_refused():
    g, rng, _, auth = setup([1, 2, 3])
    with pytest.raises(AuthRefused):
        issue_join_tag(auth, g, 99, rng)


def test_fig4_join_final_state():
    g, rng, net, auth = setup([1, 2, 3])
    auth.register(4)
    old = dict(g.shared_nonces)
    g2 = run_join(g, issue_join_tag(auth, g, 4, rng, sponsor=3), net, auth)
    assert g2.ring.order == (1, 2, 3, 4)
    assert check_ring_invariant(g2) == []
    S = {i: origins(m) for i, m in g2.members.items()}
    assert S == {1: {1, 2, 3}, 2: {2, 3, 4}, 3: {1, 3, 4}, 4: {1, 2, 4}}
    # sponsor nonce is rehashed with the joiner's nonce; the key mixes it in
    n3 = g2.shared_nonces[3]
    assert rehash_arg(net, old[3].value, n3.value) == g2.shared_nonces[4].value
    assert g2.group_key == kdf2("GK-join", g.group_key, n3.value)
    led = net.ledger_for_event(0)
    assert (led.totals.uc, led.totals.bc) == (2, 1)


def test_join_requires_fitting_tag():
    g, rng, net, auth = setup([1, 2, 3])
    auth.register(4)
    tag = issue_join_tag(auth, g, 4, rng)
    g2 = run_join(g, tag, net, auth)
    with pytest.raises(ProtocolRefused):
        run_join(g2, tag, net, auth)


# ---------------------------------------------------------------- leave


def test_fig5_leave():
    g, rng, net, _ = setup([1, 2, 3, 4])
    old = dict(g.shared_nonces)
    g2 = run_leave(g, 4, 2, rng, net)
    assert g2.ring.order == (1, 2, 3)
    assert check_ring_invariant(g2) == []
    n2, n3 = g2.shared_nonces[2], g2.shared_nonces[3]
    r = rehash_arg(net, old[2].value, n2.value)
    assert r is not None
    assert g2.group_key == kdf2("GK-leave", n2.value, r)
    assert rehash_arg(net, old[3].value, n3.value) == old[4].value
    assert {i: origins(m) for i, m in g2.members.items()} == {1: {1, 2}, 2: {2, 3}, 3: {1, 3}}
    led = net.ledger_for_event(0)
    assert (led.totals.uc, led.totals.bc) == (1, 1)


def test_leave_refusals():
    g, rng, net, _ = setup([1, 2, 3])
    with pytest.raises(ProtocolRefused):
        run_leave(g, 2, 2, rng, net)
    with pytest.raises(ProtocolRefused):
        run_leave(g, 9, 1, rng, net)
    g2 = run_leave(g, 3, 1, rng, net)
    with pytest.raises(ProtocolRefused):
        run_leave(g2, 1, 2, rng, net)


# ---------------------------------------------------------------- partition


def test_fig8_partition():
    g, rng, net, _ = setup([1, 2, 3, 4, 5, 6])
    assert partition_index_set(g, {1, 2, 5}) == {1, 4, 6}
    old = dict(g.shared_nonces)
    g2 = run_partition(g, {1, 2, 5}, 3, rng, net)
    assert g2.ring.order == (3, 4, 6)
    assert check_ring_invariant(g2) == []
    assert net.ledger_for_event(0).params["index_set"] == [1, 4, 6]
    n = g2.shared_nonces
    assert rehash_arg(net, old[4].value, n[4].value) == old[5].value
    assert rehash_arg(net, old[6].value, n[6].value) == old[2].value
    # the sponsor nonce mixes the random value, not n_5 (the printed n_3 erratum)
    r = rehash_arg(net, old[3].value, n[3].value)
    assert r is not None and r != old[5].value
    assert g2.group_key == kdf2("GK-leave", n[3].value, r)


def test_contiguous_partition_one_rehash_per_entry():
    g, rng, net, _ = setup(range(1, 9))
    g2 = run_partition(g, {3, 4, 5}, 7, rng, net)
    assert check_ring_invariant(g2) == []
    # survivors holding n_2 rehash it once; the sponsor nonce once more
    holders_n2 = [i for i in g2.ring if 2 in g.members[i].state and i != 3]
    nr = net.ledger_for_event(0).hash_by_label["NR"]
    holders_s = [i for i in g2.ring if 7 in g.members[i].state]
    assert nr == len([i for i in holders_n2 if 5 in g.members[i].state]) + len(holders_s)
    assert versions(g2.members[7])[2] == 1


@given(st.integers(3, 8), st.data())
@settings(max_examples=60, deadline=None)
def test_departing_members_cannot_derive_partition_key(n, data):
    ids = list(range(1, n + 1))
    D = set(data.draw(st.lists(st.sampled_from(ids), min_size=1, max_size=n - 2, unique=True)))
    g = bootstrap(ids, SeededRng(n))
    Y = partition_index_set(g, D)
    for d in D:
        assert not Y <= set(g.members[d].state)
    for v in set(ids) - D:
        assert Y <= set(g.members[v].state)


def test_partition_exhaustive_small():
    for n in range(3, 8):
        ids = list(range(1, n + 1))
        for k in range(1, n - 1):
            for D in combinations(ids, k):
                rng = SeededRng(n * 100 + k)
                net = Network()
                g = bootstrap(ids, rng, net=net)
                s = next(i for i in ids if i not in D)
                g2 = run_partition(g, D, s, rng, net)
                assert check_ring_invariant(g2) == [], (n, D)


# ---------------------------------------------------------------- merge


def test_fig7_merge():
    rng = SeededRng(7)
    net = Network()
    ga = bootstrap([1, 2, 3], rng, "a", net)
    gb = bootstrap([4, 5, 6], rng, "b", net)
    old_a, old_b = dict(ga.shared_nonces), dict(gb.shared_nonces)
    g = run_merge_pair(ga, gb, net, sponsor_a=2, sponsor_b=6)
    assert g.ring.order == (1, 2, 4, 5, 6, 3)
    assert check_ring_invariant(g) == []
    S = {i: origins(m) for i, m in g.members.items()}
    assert S == {
        1: {1, 2, 4, 5, 6},
        2: {2, 3, 4, 5, 6},
        4: {1, 3, 4, 5, 6},
        5: {1, 2, 3, 5, 6},
        6: {1, 2, 3, 4, 6},
        3: {1, 2, 3, 4, 5},
    }
    # n_2^a rehashed with K_G^a; guest sponsor nonce rotated (see notes)
    assert rehash_arg(net, old_a[2].value, g.shared_nonces[2].value) == ga.group_key
    assert rehash_arg(net, old_b[6].value, g.shared_nonces[6].value) is not None
    for i in (1, 3, 4, 5):
        assert g.shared_nonces[i] == {**old_a, **old_b}[i]
    assert len({m.group_key for m in g.members.values()}) == 1
    led = net.ledger_for_event(0)
    assert led.totals.uc + led.totals.bc == 6


def test_merge_host_too_small():
    rng = SeededRng(1)
    net = Network()
    ga = bootstrap([1, 2], rng, "a", net)
    gb = bootstrap([4, 5, 6], rng, "b", net)
    with pytest.raises(ProtocolRefused):
        run_merge_pair(ga, gb, net)


def test_merge_rounds_and_bracket():
    assert merge_rounds(6) == 3
    assert merge_rounds(2) == 1
    assert len(merge_bracket([f"g{k}" for k in range(6)])) == 3


def test_merge_multi_two_equals_pair():
    def run(multi):
        rng = SeededRng(3)
        net = Network()
        gs = [bootstrap([1, 2, 3, 4], rng, "g1", net), bootstrap([5, 6, 7], rng, "g2", net)]
        g = run_merge_multi(gs, net) if multi else run_merge_pair(gs[0], gs[1], net)
        return g.ring.order, g.group_key, net.export_transcript()

    assert run(True) == run(False)


@pytest.mark.slow
def test_merge_15_groups_of_7():
    rng = SeededRng(15)
    net = Network()
    gs = [bootstrap(range(10 * k, 10 * k + 7), rng, f"g{k:02d}", net) for k in range(15)]
    g = run_merge_multi(gs, net)
    assert g.size == 105
    assert check_ring_invariant(g) == []


# ---------------------------------------------------------------- misc


def test_event_validation():
    with pytest.raises(ValueError):
        MembershipEvent("join", "g0")
    with pytest.raises(ValueError):
        MembershipEvent("fly", "g0")


def test_mutation_names():
    assert set(MUTATIONS) == {"join-key-mix", "leave-rehash", "merge-sponsor-rehash", "partition-G"}
    g, rng, net, _ = setup([1, 2, 3, 4])
    with pytest.raises(ValueError):
        run_leave(g, 2, 1, rng, net, mutations=("nope",))
