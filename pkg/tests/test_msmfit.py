import numpy as np
import pytest

import ctmsm.msmfit as msmfit_mod
from ctmsm import (
    ConfigError,
    NumericalError,
    SimConfig,
    StructuralModelSpec,
    WeightConfig,
    bootstrap_ci,
    fit_weighted_cox,
    robust_sandwich,
    simulate_rectangular,
)
from oracles import brute_cox_fit, brute_log_partial_likelihood, brute_weighted_cox_robust, numeric_gradient


def toy_panel(seed=0, n=10, end=6.0):
    """Small two-treatment panel with one row per day and random courses."""
    from ctmsm.panel import CountingProcessPanel

    rng = np.random.default_rng(seed)
    rows, offsets, ids = [], [0], []
    for i in range(n):
        t_event = rng.uniform(2.0, end + 2.0)
        k = int(min(np.ceil(t_event), end))
        a1_on = rng.integers(0, int(end))
        a2_on = rng.integers(0, int(end))
        group = []
        for m in range(k):
            stop = m + 1.0
            drop = False
            if t_event <= m + 1:
                stop, drop = t_event, True
            a1 = int(a1_on <= m < a1_on + 3)
            a2 = int(a2_on <= m < a2_on + 2)
            group.append((float(m), float(stop), a1, a2, rng.normal()))
            if drop:
                break
        rows.append((group, t_event <= end))
        offsets.append(offsets[-1] + len(group))
        ids.append(str(i))
    flat = [r for g, _ in rows for r in g]
    ev = np.zeros(len(flat), dtype=np.int8)
    pos = 0
    for g, has_event in rows:
        pos += len(g)
        if has_event:
            ev[pos - 1] = 1
    return CountingProcessPanel(
        subject_ids=ids,
        row_offsets=np.array(offsets),
        start=np.array([r[0] for r in flat]),
        stop=np.array([r[1] for r in flat]),
        treatments=np.array([[r[2], r[3]] for r in flat], dtype=np.int8),
        covariates=np.array([[r[4]] for r in flat]),
        covariate_names=["L1"],
        event=ev,
        censor=np.zeros(len(flat), dtype=np.int8),
        max_followup=end + 2.0,
    ).validate()


SPEC2 = StructuralModelSpec(n_treatments=2)


def test_unit_weights_match_plain_cox_oracle():
    panel = toy_panel(1, n=12)
    fit = fit_weighted_cox(panel, None, SPEC2)
    z = SPEC2.design(panel.treatments)
    ref = brute_cox_fit(panel.start, panel.stop, panel.event, z)
    assert np.allclose(fit.psi_hat, ref, atol=1e-5)
    ones = fit_weighted_cox(panel, np.ones(panel.n_subjects), SPEC2)
    assert np.allclose(fit.psi_hat, ones.psi_hat, atol=1e-12)


def test_treatment_permutation_symmetry():
    panel = toy_panel(2, n=14)
    fit = fit_weighted_cox(panel, None, SPEC2)
    swapped = panel.take_subjects(range(panel.n_subjects))
    swapped.treatments = swapped.treatments[:, ::-1].copy()
    fit_sw = fit_weighted_cox(swapped, None, SPEC2)
    assert np.allclose(fit.psi_hat, fit_sw.psi_hat[::-1], atol=1e-9)


def test_weight_scale_invariance():
    panel = toy_panel(3, n=15)
    rng = np.random.default_rng(0)
    w = rng.uniform(0.5, 2.0, panel.n_subjects)
    f1 = fit_weighted_cox(panel, w, SPEC2)
    f2 = fit_weighted_cox(panel, 7.3 * w, SPEC2)
    assert np.allclose(f1.psi_hat, f2.psi_hat, atol=1e-10)
    assert np.allclose(f1.sandwich_cov, f2.sandwich_cov, atol=1e-10)
    assert np.allclose(f1.baseline_increments, f2.baseline_increments, atol=1e-12)


def test_sandwich_matches_brute_force():
    panel = toy_panel(4, n=10)
    rng = np.random.default_rng(1)
    w = rng.uniform(0.5, 2.0, panel.n_subjects)
    fit = fit_weighted_cox(panel, w, SPEC2)
    z = SPEC2.design(panel.treatments)
    info, sigma1, cov = brute_weighted_cox_robust(
        panel.start, panel.stop, panel.event, z, panel.row_subject(), w, fit.psi_hat
    )
    assert np.allclose(fit.sandwich_cov, cov, atol=1e-6)


def test_sandwich_unit_weights_matches_brute():
    panel = toy_panel(5, n=10)
    fit = fit_weighted_cox(panel, None, SPEC2)
    z = SPEC2.design(panel.treatments)
    _, _, cov = brute_weighted_cox_robust(
        panel.start, panel.stop, panel.event, z, panel.row_subject(),
        np.ones(panel.n_subjects), fit.psi_hat,
    )
    assert np.allclose(fit.sandwich_cov, cov, atol=1e-6)


def test_sandwich_psd_and_score_norm():
    for seed in range(4):
        panel = toy_panel(10 + seed, n=20)
        fit = fit_weighted_cox(panel, None, SPEC2)
        assert fit.score_norm < 1e-8
        eig = np.linalg.eigvalsh(fit.sandwich_cov)
        assert eig.min() >= -1e-10
        assert np.allclose(fit.sandwich_cov, fit.sandwich_cov.T, atol=1e-12)


def test_weighted_score_gradient_check():
    panel = toy_panel(7, n=15)
    rng = np.random.default_rng(2)
    w_subj = rng.uniform(0.5, 2.0, panel.n_subjects)
    w_row = w_subj[panel.row_subject()]
    z = SPEC2.design(panel.treatments)
    from ctmsm._risk import RiskSetEngine

    eng = RiskSetEngine(panel.start, panel.stop, panel.event)
    psi0 = np.array([0.2, -0.4])
    ws = w_row * np.exp(z @ psi0)
    s0 = eng.s0(ws)
    s1 = eng.s_vec(ws[:, None] * z)
    d_w = eng.event_sums(w_row)
    ev = eng.event_rows
    g_ana = (w_row[ev, None] * z[ev]).sum(axis=0) - (d_w[:, None] * (s1 / s0[:, None])).sum(axis=0)

    def wll(psi):
        return brute_log_partial_likelihood(panel.start, panel.stop, panel.event, z, psi, weights=w_row)

    g_num = numeric_gradient(wll, psi0)
    assert np.max(np.abs(g_ana - g_num)) / np.max(np.abs(g_num)) < 1e-4


def test_no_event_subject_compensator_term():
    # subject with no event: its score residual is minus the cumulative
    # compensator, hand-computable from the weighted Breslow increments
    from ctmsm.panel import CountingProcessPanel

    panel = CountingProcessPanel(
        subject_ids=["e", "c"],
        row_offsets=np.array([0, 1, 2]),
        start=np.array([0.0, 0.0]),
        stop=np.array([3.0, 5.0]),
        treatments=np.array([[1], [0]], dtype=np.int8),
        covariates=np.zeros((2, 1)),
        covariate_names=["L1"],
        event=np.array([1, 0], dtype=np.int8),
        censor=np.zeros(2, dtype=np.int8),
        max_followup=5.0,
    ).validate()
    spec1 = StructuralModelSpec(n_treatments=1)
    fit = fit_weighted_cox(panel, None, spec1)
    psi = float(fit.psi_hat[0])
    e = np.exp(psi)
    # single event at t=3: zbar = e/(e+1), dLambda0 = 1/(e+1)
    zbar = e / (e + 1)
    lam = 1 / (e + 1)
    u_event = (1 - zbar) - lam * e * (1 - zbar)
    u_cens = -lam * 1 * (0 - zbar)
    sigma1 = u_event**2 + u_cens**2
    info = (e / (e + 1)) - (e / (e + 1)) ** 2
    expected = sigma1 / info**2
    assert np.isclose(fit.sandwich_cov[0, 0], expected, rtol=1e-10)


def test_bootstrap_degenerate_stub_zero_width(monkeypatch):
    panel = toy_panel(9, n=25)
    monkeypatch.setattr(msmfit_mod, "_derived", lambda seed, b: 12345)
    out = bootstrap_ci(panel, WeightConfig(seed=1, estimator="i"), SPEC2, B=50, seed=0, min_B=2)
    assert np.allclose(out["psi_ci_lo"], out["psi_ci_hi"], atol=1e-12)
    assert out["n_ok"] == 50


def test_bootstrap_b_too_small():
    panel = toy_panel(9, n=12)
    with pytest.raises(ConfigError):
        bootstrap_ci(panel, WeightConfig(seed=1), SPEC2, B=10, seed=0)


def test_bootstrap_failure_fraction(monkeypatch):
    panel = toy_panel(11, n=20)
    calls = {"k": 0}

    def flaky(*args, **kwargs):
        calls["k"] += 1
        raise NumericalError("boom")

    monkeypatch.setattr(msmfit_mod, "estimate_weights", flaky)
    with pytest.raises(NumericalError, match="bootstrap failed"):
        bootstrap_ci(panel, WeightConfig(seed=1, estimator="i"), SPEC2, B=50, seed=0, min_B=2)


def test_fit_report_roundtrip():
    panel = toy_panel(12, n=15)
    fit = fit_weighted_cox(panel, None, SPEC2)
    from ctmsm.msmfit import PsiEstimate

    back = PsiEstimate.from_json(fit.to_json())
    assert np.array_equal(back.psi_hat, fit.psi_hat)
    assert np.array_equal(back.baseline_increments, fit.baseline_increments)
    assert back.term_names == fit.term_names
    lo1, hi1 = fit.ci()
    lo2, hi2 = back.ci()
    assert np.array_equal(lo1, lo2) and np.array_equal(hi1, hi2)


def test_interaction_terms():
    panel = toy_panel(13, n=30, end=8.0)
    spec = StructuralModelSpec(2, ((1, 2),))
    fit = fit_weighted_cox(panel, None, spec)
    assert fit.term_names == ["A1", "A2", "A1:A2"]
    z = spec.design(panel.treatments)
    assert np.array_equal(z[:, 2], panel.treatments[:, 0] * panel.treatments[:, 1])
    ref = brute_cox_fit(panel.start, panel.stop, panel.event, z)
    assert np.allclose(fit.psi_hat, ref, atol=2e-4)


def test_invalid_interaction_spec():
    with pytest.raises(ConfigError):
        StructuralModelSpec(2, ((1,),)).validate()
    with pytest.raises(ConfigError):
        StructuralModelSpec(2, ((1, 3),)).validate()
