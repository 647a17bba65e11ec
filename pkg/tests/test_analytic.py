import copy
import re
from fractions import Fraction
from pathlib import Path

import pytest
import sympy as sp

from sgrs import analytic as an
from sgrs.group import bootstrap
from sgrs.primitives import SeededRng
from sgrs.protocols import AuthServerStub, issue_join_tag, run_join, run_leave, run_partition
from sgrs.simnet import Network, SizeModel

DATA = Path(__file__).resolve().parent / "data"


def _latex_to_plain(cell: str) -> str:
    s = cell.strip().strip("$")
    s = s.replace(r"\left", "").replace(r"\right", "")
    while r"\frac" in s:
        s = re.sub(r"\\frac\{([^{}]*)\}\{([^{}]*)\}", r"\1/\2", s)
    s = re.sub(r"\^\{([^{}]*)\}", r"^(\1)", s)
    s = s.replace(r"\log_2", "log2")
    return re.sub(r"\s+", "", s)


def test_encoded_table_matches_transcription():
    want = [l.split("\t") for l in (DATA / "table1.tsv").read_text().splitlines()[1:]]
    got = [l.split("\t") for l in an.render_table1().splitlines()[1:]]
    assert len(got) == len(want) == 18
    for w, g in zip(want, got):
        assert w[:2] == g[:2]
        for wc, gc in zip(w[2:], g[2:]):
            assert _latex_to_plain(wc) == re.sub(r"\s+", "", gc), (w[:2], wc, gc)


def test_every_row_has_a_citation():
    assert all(f.citation for f in an.TABLE_I)


@pytest.mark.parametrize(
    "scheme,protocol,N,expected",
    [("SGRS", "Join", 100, 432), ("Lv", "Leave", 100, 400), ("Zhong", "Join", 100, 16004), ("SGRS", "Leave", 100, 428)],
)
def test_eval_bytes_examples(scheme, protocol, N, expected):
    assert an.eval_bytes(an.formula(scheme, protocol), N) == expected


def test_eval_bytes_is_exact_and_resizes():
    f = an.formula("SGRS", "Partition")
    assert an.eval_bytes(f, 100, 15) == 100 * 4 + 15 * 32
    assert an.eval_bytes(f, 100, 15, SizeModel(8, 16)) == 100 * 8 + 15 * 16
    v = an.eval_bytes(an.formula("Lv", "Merge"), 100, 3)
    assert v == sp.Rational(10000 - Fraction(10000, 3)) * 28


def test_out_of_range_and_unknown():
    with pytest.raises(ValueError):
        an.eval_bytes(an.formula("SGRS", "Join"), 1)
    with pytest.raises(KeyError):
        an.formula("Chen", "Merge")


@pytest.mark.parametrize("N", [2, 10, 100, 1000])
def test_formulas_non_negative(N):
    for f in an.TABLE_I:
        assert an.eval_bytes(f, N, 2) >= 0


# ---------------------------------------------------------------- figures


def test_fig10_sgrs_strict_minimum():
    fd = an.emit_figure_data(10)
    assert fd.xs == list(range(5, 26))
    assert set(fd.series) == set(an.SCHEMES)
    for k in range(len(fd.xs)):
        others = [fd.series[s][k] for s in fd.series if s != "SGRS"]
        assert all(fd.series["SGRS"][k] < o for o in others)
    # first point is five joins starting at N=100: sum of (N Int + CK)
    assert fd.series["SGRS"][0] == sum(4 * n + 32 for n in range(100, 105))


def test_fig11_lv_slightly_cheaper():
    fd = an.emit_figure_data(11)
    for lv, sg in zip(fd.series["Lv"], fd.series["SGRS"]):
        assert lv < sg
        assert (sg - lv) / sg < sp.Rational(1, 10)


@pytest.mark.parametrize("fig", [12, 13])
def test_merge_partition_figures(fig):
    fd = an.emit_figure_data(fig)
    assert set(fd.series) == {"Kim", "Lv", "SGRS"}
    for k in range(len(fd.xs)):
        assert fd.series["SGRS"][k] < fd.series["Kim"][k]
        assert fd.series["SGRS"][k] < fd.series["Lv"][k]
    assert an.dominance_failures(fd) == []


def test_figure_files(tmp_path):
    fd = an.emit_figure_data(10)
    csv_path, meta_path = fd.write(tmp_path)
    rows = csv_path.read_text().splitlines()
    assert rows[0].split(",")[0] == "events" and len(rows) == 22
    assert '"K_subgroups": 10' in meta_path.read_text()
    with pytest.raises(ValueError):
        an.emit_figure_data(9)


# ---------------------------------------------------------------- reconciliation


def _measure(kind, N):
    rng = SeededRng(N)
    net = Network()
    g = bootstrap(range(1, N + 1), rng, net=net)
    if kind == "join":
        auth = AuthServerStub.default()
        auth.register(*g.ring, N + 1)
        run_join(g, issue_join_tag(auth, g, N + 1, rng), net, auth)
    elif kind == "leave":
        run_leave(g, 3, 1, rng, net)
    else:
        run_partition(g, {2, 3, N - 1}, 1, rng, net)
    return net.ledger_for_event(0)


@pytest.mark.parametrize("kind", ["join", "leave", "partition"])
@pytest.mark.parametrize("N", [10, 50, 100])
def test_compare_ledger_passes(kind, N):
    rec = an.compare_ledger(_measure(kind, N))
    assert rec.ok, rec.render()
    if kind == "join":
        assert rec.measured_msgs == {"UC": 2, "BC": 1}


def test_mis_sized_payload_is_named():
    led = copy.deepcopy(_measure("leave", 20))
    led.per_step["leave.deliver"].bytes += 32
    led.totals.bytes += 32
    rec = an.compare_ledger(led)
    assert not rec.ok
    assert any(r.startswith("leave.deliver:") for r in rec.reasons)
    assert "ANOMALY" in rec.render()


def test_compare_ledger_rejects_unmodelled_kind():
    led = copy.deepcopy(_measure("leave", 10))
    led.kind = "rename"
    with pytest.raises(ValueError):
        an.compare_ledger(led)
