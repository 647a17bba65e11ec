# ---
# jupyter:
#   jupytext:
#     formats: py:light
#     text_representation:
#       extension: .py
#       format_name: light
# ---

# # Cost table and figure data
#
# Byte costs from the encoded table, next to what the simulator measures.

# +
from sgrs import analytic as an
from sgrs.group import bootstrap
from sgrs.primitives import SeededRng
from sgrs.protocols import run_leave
from sgrs.simnet import Network

print(an.render_table1_eval(100, 15))
# -

# Measured leave at N = 100 against its analytic row.

rng = SeededRng(1)
net = Network()
g = bootstrap(range(1, 101), rng, net=net)
run_leave(g, 50, 1, rng, net)
print(an.compare_ledger(net.ledger_for_event(0)).render())

# Series behind the four cost figures; any ordering violation is printed.

for fid in sorted(an.FIGURES):
    fd = an.emit_figure_data(fid)
    print(f"figure {fid}: {len(fd.xs)} points, series {', '.join(fd.series)}")
    print(fd.to_csv().splitlines()[1])
    for msg in an.dominance_failures(fd):
        print("  ", msg)
