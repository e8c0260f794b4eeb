import math

import numpy as np
import pytest
from scipy.optimize import brentq

from gcmsim.circuit import (
    Circuit, ModelLibrary, NetlistError, SimOptions, SingularCircuitError,
    Stimulus, dexp_peak, eval_stimulus, netlist_to_text, parse_netlist, solve_dc,
    solve_transient,
)
from gcmsim.device import ModelCard, drain_current, write_card

RC = """* rc low-pass
V1 in 0 dc 0.75
R1 in out 100k
C1 out 0 1p
.tran 600n
"""
TAU = 100e-9


def at(res, node, t):
    k = int(np.argmin(np.abs(res.times - t)))
    assert abs(res.times[k] - t) <= 1e-12 * t
    return float(res.v(node)[k])


# -- netlist grammar -----------------------------------------------------


def test_parse_resistor():
    # a lone resistor would leave both nodes dangling, so the line is
    # checked inside a grounded netlist
    net = parse_netlist("R1 vdd out 100k\nR2 out 0 1k\n")
    r = net.by_name("R1")
    assert (r.n1, r.n2, r.value) == ("vdd", "out", 1e5)


def test_parse_general_model_transistor():
    net = parse_netlist("M1 vdd gate 0 0 gcm lg=17.8n wfin=6.3n nfin=20000\nR1 gate 0 1k\n")
    m = net.by_name("M1")
    assert m.model == "gcm"
    assert m.lg == pytest.approx(17.8) and m.wfin == pytest.approx(6.3)
    assert m.nfin == 20000


def test_trailing_token_reports_column():
    with pytest.raises(NetlistError) as exc:
        parse_netlist("R0 a 0 1k\nC1 a 0 1p extra\n")
    assert exc.value.line == 2
    assert exc.value.column == 11


@pytest.mark.parametrize("text, match", [
    ("Q1 a 0 1\n", "element"),
    ("R1 a 0 1k\nR1 a 0 2k\n", "duplicate"),
    ("R1 a 0 1x2\n", "number"),
    ("R1 a b 1k\n", "dangling"),
])
def test_parse_errors(text, match):
    with pytest.raises(NetlistError, match=match):
        parse_netlist(text)


def test_sources_and_analyses():
    net = parse_netlist(
        "V1 a 0 pwl (0 0) (1u 0.75)\nV2 b 0 ramp 0 1u 0.75\nI1 0 a dexp 1.7291 10n 150n\n"
        "I2 0 b dc 1m\nR1 a b 1k\n.op\n.tran 1u\n")
    assert net.by_name("V1").stim.points == ((0.0, 0.0), (1e-6, 0.75))
    assert net.by_name("V2").stim.kind == "ramp"
    assert net.by_name("I1").stim.tau_decay == pytest.approx(150e-9)
    assert net.analyses == [("op",), ("tran", 1e-6)]


def test_netlist_text_roundtrip():
    net = parse_netlist(RC)
    again = parse_netlist(netlist_to_text(net))
    assert again.elements == net.elements


# -- stimuli -------------------------------------------------------------


def test_dexp_peak():
    tp, ip = dexp_peak(1.7291, 10e-9, 150e-9)
    assert tp == pytest.approx(29.02e-9, rel=1e-3)
    assert ip == pytest.approx(1.33, rel=1e-3)
    s = Stimulus.dexp(1.7291, 10e-9, 150e-9)
    assert eval_stimulus(s, tp) == pytest.approx(ip, rel=1e-12)


def test_pwl_and_clamping():
    s = Stimulus.pwl([(0.0, 0.0), (1e-6, 0.75)])
    assert eval_stimulus(s, 0.5e-6) == pytest.approx(0.375)
    assert eval_stimulus(s, 5e-6) == 0.75
    r = Stimulus.ramp(1e-6, 2e-6, 0.75)
    assert [eval_stimulus(r, t) for t in (0.0, 2e-6, 9e-6)] == pytest.approx([0.0, 0.375, 0.75])


@pytest.mark.parametrize("kw", [dict(kind="dexp", tau_rise=2.0, tau_decay=1.0),
                                dict(kind="pwl", points=((1.0, 0.0), (0.5, 1.0))),
                                dict(kind="sine")])
def test_stimulus_guards(kw):
    with pytest.raises(ValueError):
        Stimulus(**kw)


# -- DC -------------------------------------------------------------------


def test_divider():
    op = solve_dc(parse_netlist("V1 a 0 dc 0.75\nR1 a m 10k\nR2 m 0 10k\n"))
    assert abs(op.voltages["m"] - 0.375) <= 1e-6
    assert op.currents["V1"] == pytest.approx(-0.75 / 20e3, rel=1e-9)
    assert op.residual <= 1e-9


def test_diode_connected_transistor_matches_bisection(tmp_path):
    card = ModelCard()
    write_card(card, tmp_path / "ref.card")
    net = parse_netlist("V1 vdd 0 dc 0.75\nR1 vdd d 10k\nM1 d d 0 0 ref.card nfin=100\n")
    op = solve_dc(net, ModelLibrary(base_dir=tmp_path))

    def kcl(v):
        return (0.75 - v) / 10e3 - float(drain_current(card, v, v, nfin=100))

    v_ref = brentq(kcl, 0.0, 0.75, xtol=1e-12)
    assert abs(op.voltages["d"] - v_ref) <= 1e-6


def test_floating_node_is_named():
    net = parse_netlist("V1 a 0 dc 1\nR1 a 0 1k\nC1 a b 1p\n")
    with pytest.raises(SingularCircuitError) as exc:
        solve_dc(net)
    assert exc.value.nodes == ["b"]
    assert "b" in str(exc.value)


# -- transient ------------------------------------------------------------


def rc_run(options=SimOptions()):
    # sample instants are forced breakpoints so no interpolation enters the check
    return Circuit(parse_netlist(RC), options=options).solve_transient(
        6 * TAU, uic=True, extra_breakpoints=(TAU, 5 * TAU))


@pytest.fixture(scope="module")
def rc_result():
    return rc_run()


def test_rc_at_tau(rc_result):
    assert at(rc_result, "out", TAU) == pytest.approx(0.75 * (1 - math.exp(-1)), rel=1e-3)


def test_rc_at_five_tau(rc_result):
    assert at(rc_result, "out", 5 * TAU) == pytest.approx(0.75 * (1 - math.exp(-5)), rel=1e-3)


def test_rc_reltol_halving_is_stable(rc_result):
    fine = rc_run(SimOptions(lte_reltol=5e-4))
    a, b = at(rc_result, "out", TAU), at(fine, "out", TAU)
    assert abs(a - b) / b <= 5e-4


def test_transient_points_are_converged(rc_result):
    assert np.all(np.diff(rc_result.times) > 0)
    assert rc_result.times[0] == 0.0
    assert rc_result.times[-1] == pytest.approx(6 * TAU, rel=1e-12)
    assert float(np.max(rc_result.residuals)) <= 1e-9


def test_equilibrium_holds():
    net = parse_netlist("V1 a 0 dc 0.75\nR1 a b 50k\nC1 b 0 2p\nR2 b 0 50k\n")
    res = solve_transient(net, 1e-6)
    v = res.v("b")
    assert np.max(np.abs(v - v[0])) <= 1e-9
    assert v[0] == pytest.approx(0.375, abs=1e-6)


def test_closed_capacitor_loop_conserves_charge():
    # no sources and no DC path to ground: charge only moves between a and b
    net = parse_netlist("C1 a 0 1p\nC2 b 0 2p\nR1 a b 10k\nC3 a b 0.5p\n")
    res = Circuit(net).solve_transient(1e-6, x0=np.array([0.75, 0.0]), uic=True)
    va, vb = res.v("a"), res.v("b")
    q = 1e-12 * va + 2e-12 * vb
    assert float(np.max(np.abs(q - q[0]))) <= 1e-18
    # and it does redistribute; trapezoidal steps far beyond tau leave a
    # residual ring inside the 1e-6 V + 1e-3 LTE band
    assert va[-1] == pytest.approx(0.25, abs=1e-5)
    assert vb[-1] == pytest.approx(0.25, abs=1e-5)


def test_transient_is_deterministic(tmp_path):
    a = solve_transient(parse_netlist(RC), 2 * TAU, uic=True)
    b = solve_transient(parse_netlist(RC), 2 * TAU, uic=True)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "t,v(in),v(out),i(V1)"


def test_dexp_source_into_resistor_tracks_stimulus():
    net = parse_netlist("I1 0 a dexp 1.7291 10n 150n\nR1 a 0 1\n")
    res = solve_transient(net, 200e-9)
    tp, ip = dexp_peak(1.7291, 10e-9, 150e-9)
    assert float(np.max(res.v("a"))) == pytest.approx(ip, rel=1e-3)
