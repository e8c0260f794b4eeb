import math

import numpy as np
import pytest

from gcmsim.calibration import (
    DEFAULT_N_ORACLE, DEFAULT_P_ORACLE, ExtractConfig, IvDataset, calibrate_grid,
    calibrate_point, extract_card, fit_errors, ieff_at_ioff, oracle_card,
    oracle_to_text, read_cgg_csv, read_iv_csv, read_oracle, relative_rms,
    virtual_tcad, write_cgg_csv, write_iv_csv,
)
from gcmsim.device import ModelCard
from gcmsim.grid import DesignPoint

PT = DesignPoint(17.8, 6.3)
TOY = IvDataset(PT, vg=[0.5, 0.75, 0.75], vd=[0.05, 0.05, 0.75], id=[1e-6, 2e-6, 4e-6], vdd=0.75)


def test_rms_identity_is_zero():
    assert relative_rms(TOY.id.copy(), TOY) == (0.0, 0.0)


def test_rms_hand_example():
    # per-curve maxima are 2e-6 (vd=0.05) and 4e-6 (vd=0.75); relative
    # errors 0.005, 0.01, 0.01 -> sqrt(7.5e-5) = 0.8660254 %
    lin, log = relative_rms(1.01 * TOY.id, TOY)
    assert lin == pytest.approx(math.sqrt(7.5e-5) * 100, rel=1e-12)
    assert log == pytest.approx(math.log10(1.01), rel=1e-12)
    assert log == pytest.approx(0.00432, abs=1e-5)


def test_rms_full_scale_error_is_100_percent():
    ds = IvDataset(PT, vg=[0.75, 0.75], vd=[0.05, 0.75], id=[2e-6, 5e-6], vdd=0.75)
    lin, _ = relative_rms(ds.id + np.array([2e-6, 5e-6]), ds)
    assert lin == pytest.approx(100.0)


def test_rms_ignores_sub_picoamp_points_in_log_metric():
    ds = IvDataset(PT, vg=[0.0, 0.75, 0.75], vd=[0.05, 0.05, 0.75], id=[1e-13, 2e-6, 4e-6], vdd=0.75)
    _, log = relative_rms(np.array([1e-10, 2e-6, 4e-6]), ds)
    assert log == 0.0


def test_rms_shape_mismatch():
    with pytest.raises(ValueError):
        relative_rms(np.zeros(2), TOY)


def test_dataset_needs_two_drain_biases():
    with pytest.raises(ValueError, match="vd"):
        IvDataset(PT, vg=[0.1, 0.2], vd=[0.75, 0.75], id=[1e-9, 1e-8], vdd=0.75)
    with pytest.raises(ValueError):
        IvDataset(PT, vg=[], vd=[], id=[], vdd=0.75)


# -- oracle ---------------------------------------------------------------


def test_wide_fin_mobility_limit():
    params = DEFAULT_N_ORACLE.replace(wfin_max=100.0)
    card = oracle_card(params, DesignPoint(18.0, 20 * params.wc))
    assert card.k_gain == pytest.approx(params.k0, rel=0.01)


@pytest.mark.parametrize("lg", [14.5, 16.5])
def test_ieff_has_interior_maximum_in_wfin(lg):
    ws = np.arange(4.1, 7.15, 0.5)
    ieff = [ieff_at_ioff(oracle_card(DEFAULT_N_ORACLE, DesignPoint(lg, w)), 0.75, 1e-9) for w in ws]
    k = int(np.argmax(ieff))
    assert 0 < k < len(ws) - 1


@pytest.mark.parametrize("w", [4.1, 6.1, 7.1])
def test_dibl_falls_with_gate_length(w):
    short = oracle_card(DEFAULT_N_ORACLE, DesignPoint(14.5, w)).dibl
    long = oracle_card(DEFAULT_N_ORACLE, DesignPoint(18.5, w)).dibl
    assert short > long


def test_oracle_is_deterministic():
    a, ca = virtual_tcad(DEFAULT_N_ORACLE, PT)
    b, cb = virtual_tcad(DEFAULT_N_ORACLE, PT)
    assert np.array_equal(a.id, b.id) and np.array_equal(ca.cgg, cb.cgg)


def test_oracle_validity_box():
    with pytest.raises(ValueError, match="validity"):
        oracle_card(DEFAULT_N_ORACLE, DesignPoint(40.0, 6.0))


def test_p_oracle_currents_are_negative():
    iv, _ = virtual_tcad(DEFAULT_P_ORACLE, PT)
    assert np.all(iv.vd < 0) and np.all(iv.id <= 0)


def test_oracle_file_roundtrip(tmp_path):
    p = tmp_path / "oracle.cfg"
    params = DEFAULT_P_ORACLE.replace(theta_exp=2.5)
    p.write_text(oracle_to_text(params))
    assert read_oracle(p) == params
    p.write_text("k0 = 1e-4\nspeed = 3\n")
    with pytest.raises(ValueError, match="unknown"):
        read_oracle(p)


# -- extraction -----------------------------------------------------------

KNOWN = oracle_card(DEFAULT_N_ORACLE, PT)
KNOWN_IV, KNOWN_CGG = virtual_tcad(DEFAULT_N_ORACLE, PT)


def test_self_fit_is_fixed_point():
    fit = extract_card(KNOWN_IV, KNOWN)
    assert fit.converged
    assert fit.rms_lin < 1e-6
    assert fit.iterations <= 1


def test_perturbed_init_recovers():
    # n_ss must stay >= 1, so it takes the +20% side
    signs = (-1, 1, 1, -1, 1, -1)
    init = KNOWN.replace(**{n: getattr(KNOWN, n) * (1 + 0.2 * s)
                            for n, s in zip(ExtractConfig().free, signs)})
    assert fit_errors(init, KNOWN_IV)[0] > 5.0
    fit = extract_card(KNOWN_IV, init)
    assert fit.rms_lin <= 0.5


def test_best_so_far_trace_is_monotone():
    fit = extract_card(KNOWN_IV, KNOWN.replace(vt0=0.35, k_gain=0.8e-4))
    assert len(fit.trace) == fit.evaluations <= ExtractConfig().max_evals
    assert all(b <= a for a, b in zip(fit.trace, fit.trace[1:]))
    assert fit.trace[-1] == pytest.approx(fit.objective, rel=1e-9, abs=1e-12)


def test_extraction_is_scale_consistent():
    init = KNOWN.replace(vt0=0.32, k_gain=0.9 * KNOWN.k_gain)
    base = extract_card(KNOWN_IV, init, ExtractConfig(max_evals=300))
    scaled = extract_card(KNOWN_IV.scaled(3.0), init.replace(k_gain=3.0 * init.k_gain),
                          ExtractConfig(max_evals=300))
    assert scaled.rms_lin == pytest.approx(base.rms_lin, abs=1e-9)
    assert scaled.rms_log == pytest.approx(base.rms_log, abs=1e-9)


def test_extraction_is_deterministic():
    init = KNOWN.replace(vt0=0.32)
    a = extract_card(KNOWN_IV, init, ExtractConfig(max_evals=200))
    b = extract_card(KNOWN_IV, init, ExtractConfig(max_evals=200))
    assert a.card == b.card and a.trace == b.trace


def test_capacitances_fitted_from_cgg():
    fit = calibrate_point(DEFAULT_N_ORACLE, PT)
    assert fit.card.cov == pytest.approx(KNOWN.cov, rel=1e-3)
    assert fit.card.cch_max == pytest.approx(KNOWN.cch_max, rel=1e-3)


def test_oracle_point_within_band():
    fit = calibrate_point(DEFAULT_N_ORACLE, PT)
    assert fit.rms_lin <= 2.5


def test_rejects_unknown_free_parameter():
    with pytest.raises(ValueError, match="extractable"):
        extract_card(KNOWN_IV, KNOWN, ExtractConfig(free=("vt0", "temp")))


def test_rejects_polarity_mismatch():
    with pytest.raises(ValueError, match="polarity"):
        extract_card(KNOWN_IV, KNOWN.replace(polarity="P"))


def test_grid_cards_sit_on_their_nodes():
    grid, fits = calibrate_grid(DEFAULT_N_ORACLE, (17.5, 18.5), (6.1, 7.1))
    for _, pt, card in grid.nodes():
        assert (card.lg, card.wfin) == (pt.axis1, pt.axis2)
    assert [(p.axis1, p.axis2) for p, _ in fits] == [(17.5, 6.1), (17.5, 7.1), (18.5, 6.1), (18.5, 7.1)]


def test_grid_accepts_user_datasets():
    iv, cgg = virtual_tcad(DEFAULT_N_ORACLE, DesignPoint(17.5, 6.1))
    user = (iv.scaled(1.1), cgg)
    grid, fits = calibrate_grid(DEFAULT_N_ORACLE, (17.5, 18.5), (6.1, 7.1), datasets={(17.5, 6.1): user})
    ref, _ = calibrate_grid(DEFAULT_N_ORACLE, (17.5, 18.5), (6.1, 7.1))
    assert grid.cards[0][0].k_gain == pytest.approx(1.1 * ref.cards[0][0].k_gain, rel=1e-3)
    assert grid.cards[1][1] == ref.cards[1][1]


def test_csv_roundtrip(tmp_path):
    write_iv_csv(KNOWN_IV, tmp_path / "iv.csv")
    write_cgg_csv(KNOWN_CGG, tmp_path / "cgg.csv")
    iv = read_iv_csv(tmp_path / "iv.csv", PT, 0.75)
    cgg = read_cgg_csv(tmp_path / "cgg.csv")
    assert np.array_equal(iv.id, KNOWN_IV.id) and np.array_equal(iv.vd, KNOWN_IV.vd)
    assert np.array_equal(cgg.cgg, KNOWN_CGG.cgg)
    assert (tmp_path / "iv.csv").read_text().startswith("vg,vd,id\n")


def test_csv_bad_header(tmp_path):
    (tmp_path / "x.csv").write_text("gate,drain,current\n0,0,0\n")
    with pytest.raises(ValueError, match="header"):
        read_iv_csv(tmp_path / "x.csv", PT, 0.75)


def test_single_card_scales_worse_than_ensemble():
    from gcmsim.device import drain_current
    from gcmsim.grid import locate_and_weigh
    from gcmsim.library import default_library

    q = DesignPoint(14.8, 5.4)
    iv, _ = virtual_tcad(DEFAULT_N_ORACLE, q)
    gm = locate_and_weigh(default_library().grids["N"], q)
    ens = relative_rms(drain_current(gm, iv.vd, iv.vg), iv)[0]
    single = calibrate_point(DEFAULT_N_ORACLE, PT).card.replace(lg=q.axis1, wfin=q.axis2)
    one = fit_errors(single, iv)[0]
    assert one >= 1.5 * ens
