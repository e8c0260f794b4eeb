import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcmsim.device import (
    BiasPoint, ModelCard, card_from_dict, characterize, drain_current,
    eval_terminal_charges, eval_terminal_currents, read_card, thermal_voltage,
    write_card,
)

REF = ModelCard()
# frozen output of _straight_line_id(REF, 0.75, 0.75, 0)
REF_ID = 4.788539015938002e-05


def _straight_line_id(card, vd, vg, vs):
    """Independent scalar transcription of the surrogate I-V equations."""
    phit = 1.380649e-23 * card.temp / 1.602176634e-19
    vds = vd - vs
    vt = card.vt0 - card.dibl * abs(vds)
    vp = (vg - vt) / card.n_ss

    def F(x):
        return math.log(1.0 + math.exp(x / (2.0 * phit))) ** 2

    ispec = 2.0 * card.n_ss * phit ** 2 * card.k_gain * (2 * card.hfin + card.wfin) / card.lg
    core = ispec * (F(vp - vs) - F(vp - vd))
    return core * (1.0 + card.lambda_clm * abs(vds)) / (1.0 + card.theta_sat * abs(vds))


cards = st.builds(
    ModelCard,
    polarity=st.sampled_from(["N", "P"]),
    lg=st.floats(10, 30),
    wfin=st.floats(3, 12),
    vt0=st.floats(0.1, 0.5),
    n_ss=st.floats(1.0, 1.8),
    dibl=st.floats(0.0, 0.15),
    k_gain=st.floats(1e-5, 5e-4),
    theta_sat=st.floats(0.0, 3.0),
    lambda_clm=st.floats(0.0, 0.2),
    rs=st.sampled_from([0.0, 500.0, 5000.0]),
    cov=st.floats(0.0, 1e-16),
    cch_max=st.floats(0.0, 1e-16),
)
volts = st.floats(-1.0, 1.0)


def test_reference_current_matches_oracle():
    idv = eval_terminal_currents(REF, BiasPoint(0.75, 0.75, 0.0, 0.0)).id
    assert _straight_line_id(REF, 0.75, 0.75, 0.0) == pytest.approx(REF_ID, rel=1e-14)
    assert idv == pytest.approx(REF_ID, rel=1e-12)


def test_swapped_bias_is_antisymmetric():
    fwd = eval_terminal_currents(REF, BiasPoint(0.75, 0.75, 0.0))
    rev = eval_terminal_currents(REF, BiasPoint(0.0, 0.75, 0.75))
    assert rev.id == pytest.approx(-fwd.id, rel=1e-12)


def test_terminal_current_signs():
    c = eval_terminal_currents(REF, BiasPoint(0.5, 0.6))
    assert c.ig == 0.0 and c.ib == 0.0
    assert c.is_ == -c.id


@pytest.mark.parametrize("bad", [dict(vd=math.nan, vg=0.0), dict(vd=0.0, vg=11.0)])
def test_bias_guard(bad):
    with pytest.raises(ValueError):
        BiasPoint(**bad)


@pytest.mark.parametrize("field, value", [("lg", 0.0), ("n_ss", 0.9), ("k_gain", -1.0),
                                          ("cov", -1e-18), ("polarity", "X")])
def test_invalid_card(field, value):
    with pytest.raises(ValueError):
        ModelCard(**{field: value})


def test_nfin_below_one_rejected():
    with pytest.raises(ValueError):
        eval_terminal_currents(REF, BiasPoint(0.5, 0.5), nfin=0.5)


def test_capacitance_free_card_has_zero_charge():
    q = eval_terminal_charges(REF, BiasPoint(0.3, 0.7, 0.1))
    assert q == (0.0, 0.0, 0.0, 0.0)


def _cgg(card, vg, h=1e-4):
    qp = eval_terminal_charges(card, BiasPoint(0.0, vg + h)).qg
    qm = eval_terminal_charges(card, BiasPoint(0.0, vg - h)).qg
    return (qp - qm) / (2 * h)


def test_cgg_floor_and_ceiling():
    card = REF.replace(cov=2e-17, cch_max=4e-17)
    nphit = card.n_ss * thermal_voltage(card.temp)
    deep = card.vt0 - 12 * nphit
    strong = card.vt0 + 12 * nphit
    assert _cgg(card, deep) == pytest.approx(2 * card.cov, rel=0.01)
    assert _cgg(card, strong) == pytest.approx(2 * card.cov + card.cch_max, rel=0.01)


def test_characterize_reference():
    rep = characterize(REF, 0.75)
    assert rep.ok
    analytic_ss = REF.n_ss * thermal_voltage(REF.temp) * math.log(10) * 1e3
    assert rep.ss == pytest.approx(analytic_ss, rel=0.02)
    assert rep.ion > rep.ioff > 0
    assert rep.ieff == pytest.approx(0.5 * (
        abs(float(drain_current(REF, 0.375, 0.75))) + abs(float(drain_current(REF, 0.75, 0.375)))))


def test_dibl_measurement_tracks_card_increment():
    # the Vds-dependent theta/clm factor adds a card-independent offset to the
    # constant-current Vt shift; the DIBL term itself must come through 1:1
    lo = characterize(REF.replace(dibl=0.0), 0.75).dibl_meas
    hi = characterize(REF, 0.75).dibl_meas
    assert hi - lo == pytest.approx(40.0, rel=0.05)


def test_series_resistance_adds_to_ron():
    base = characterize(REF, 0.75, nfin=1).ron
    with_r = characterize(REF.replace(rs=5e3, rd=5e3), 0.75, nfin=1).ron
    assert with_r - base == pytest.approx(10e3, rel=0.05)
    base4 = characterize(REF, 0.75, nfin=4).ron
    with_r4 = characterize(REF.replace(rs=5e3, rd=5e3), 0.75, nfin=4).ron
    assert with_r4 - base4 == pytest.approx(10e3 / 4, rel=0.05)


def test_unbracketed_vt_is_reported_not_raised():
    rep = characterize(REF.replace(vt0=3.0), 0.75)
    assert not rep.ok
    assert any("vt_" in f for f in rep.failures)
    assert math.isnan(rep.vt_lin)


def test_card_file_roundtrip(tmp_path):
    card = REF.replace(polarity="P", cov=1.5e-17, rs=120.0, rd=120.0)
    path = tmp_path / "p.card"
    write_card(card, path, header="test card")
    text = path.read_text()
    assert "lg = 1.8e-08" in text
    back = read_card(path)
    assert back == card


def test_card_unknown_key():
    with pytest.raises(ValueError, match="unknown"):
        card_from_dict({"vt0": "0.3", "mobility": "1"})


# -- properties ------------------------------------------------------------


@given(cards, volts, volts, volts)
def test_zero_vds_gives_zero_current(card, v, vg, vb):
    assert eval_terminal_currents(card, BiasPoint(v, vg, v, vb)).id == 0.0


@given(cards, volts, volts, volts, st.integers(1, 50), st.integers(2, 7))
def test_linear_in_nfin(card, vd, vg, vs, nfin, k):
    b = BiasPoint(vd, vg, vs)
    i1 = eval_terminal_currents(card, b, nfin).id
    ik = eval_terminal_currents(card, b, nfin * k).id
    assert ik == pytest.approx(k * i1, rel=1e-12, abs=1e-300)
    q1 = eval_terminal_charges(card, b, nfin)
    qk = eval_terminal_charges(card, b, nfin * k)
    for a, c in zip(q1, qk):
        assert c == pytest.approx(k * a, rel=1e-12, abs=1e-300)


@given(cards, volts, volts, volts, volts)
def test_charge_neutrality(card, vd, vg, vs, vb):
    q = eval_terminal_charges(card, BiasPoint(vd, vg, vs, vb), nfin=7)
    assert q.qb == 0.0
    assert abs(sum(q)) <= 1e-18


@given(cards, volts, volts, volts, volts)
def test_pn_mirror_exact(card, vd, vg, vs, vb):
    n = card.replace(polarity="N")
    p = card.replace(polarity="P")
    bn = BiasPoint(vd, vg, vs, vb)
    bp = BiasPoint(-vd, -vg, -vs, -vb)
    assert eval_terminal_currents(p, bp).id == -eval_terminal_currents(n, bn).id
    qn = eval_terminal_charges(n, bn)
    qp = eval_terminal_charges(p, bp)
    assert all(a == -b for a, b in zip(qp, qn))


@settings(max_examples=50)
@given(cards, st.floats(0.0, 1.0), st.floats(-0.2, 0.0))
def test_monotone_in_gate(card, vd, vs):
    n = card.replace(polarity="N")
    vg = np.linspace(0.0, 1.0, 201)
    i = drain_current(n, vd, vg, vs)
    assert np.all(np.diff(i) >= -1e-18)


@settings(max_examples=50)
@given(cards.filter(lambda c: c.cov > 0 or c.cch_max > 0), st.floats(-0.5, 1.0))
def test_cgg_between_floor_and_ceiling(card, vg):
    n = card.replace(polarity="N")
    c = _cgg(n, vg)
    lo, hi = 2 * n.cov, 2 * n.cov + n.cch_max
    assert lo * 0.99 - 1e-24 <= c <= hi * 1.01 + 1e-24


@settings(max_examples=50)
@given(cards, volts, volts)
def test_current_is_continuous_through_zero_vds(card, vg, v):
    # C1 smoothness around the symmetric point where |Vds| switches branch
    h = 1e-7
    ip = eval_terminal_currents(card, BiasPoint(v + h, vg, v)).id
    im = eval_terminal_currents(card, BiasPoint(v - h, vg, v)).id
    i2p = eval_terminal_currents(card, BiasPoint(v + 2 * h, vg, v)).id
    assert ip == pytest.approx(-im, rel=1e-3, abs=1e-20)
    assert i2p == pytest.approx(2 * ip, rel=1e-2, abs=1e-20)
