# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Security checks and mutants
#
# The closure engine replays every message and hash a party could see. Here we
# run one churn scenario, then switch off each rehash countermeasure in turn.

# +
from pathlib import Path

from sgrs.protocols import MUTATIONS
from sgrs.scenario import generate_churn, load_scenario, run_scenario

SCEN = Path("scenarios") if Path("scenarios").exists() else Path("../scenarios")

res = run_scenario(generate_churn(3))
for v in res.verdicts:
    print(v.line())
# -

# Colluding members who leave in the same partition fail: between them they
# hold every nonce plus the old key. The individual check holds.
#
# Each mutant scenario has at most seven members. The witness is the
# derivation chain, one rule per line.

for m in MUTATIONS:
    path = SCEN / "mutants" / f"{m.replace('-', '_')}.yaml"
    mres = run_scenario(load_scenario(path), mutations=[m])
    hit = [v for v in mres.verdicts if not v.ok and v.prop != "ForwardSecrecy[collusion]"]
    print(f"== {m}: {hit[0].prop if hit else 'survived'}")
    if hit:
        print(hit[0].witness())
