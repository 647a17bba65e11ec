# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Membership walkthrough
#
# Four small groups, one event each. After every run we print each member's
# state vector: the origins of the nonces it holds, with a prime on any nonce
# that has been rehashed.

# +
from pathlib import Path

from sgrs.scenario import load_scenario, run_scenario

SCEN = Path("scenarios") if Path("scenarios").exists() else Path("../scenarios")


def show(res):
    for gid, g in res.groups.items():
        print(f"group {gid}: ring {' '.join(map(str, g.ring))}")
        for i in g.ring:
            held = sorted(g.members[i].state.values(), key=lambda n: n.origin)
            print(f"  N{i}: " + ", ".join(f"n{n.origin}" + "'" * n.version for n in held))
    for rec in res.records:
        for note in rec.notes:
            print(" ", note)
# -

# A join: the sponsor's nonce is rehashed with the joiner's nonce, and the new
# key mixes in the rehashed value.

show(run_scenario(load_scenario(SCEN / "fig4_join.yaml"), checks=()))

# A leave: the sponsor draws a fresh random value, and the departing member's
# successor rehashes the nonce the departing member held.

show(run_scenario(load_scenario(SCEN / "fig5_leave.yaml"), checks=()))

# A merge of two rings of three: the guest ring is spliced in after the host sponsor.

show(run_scenario(load_scenario(SCEN / "fig7_merge.yaml"), checks=()))

# A partition: three members leave at once, and the rekey goes out under the
# key of the index set printed below.

show(run_scenario(load_scenario(SCEN / "fig8_partition.yaml"), checks=()))
