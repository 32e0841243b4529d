import json
import math

import numpy as np
import pytest

import oracles as o
from ensemblab import estimators as est
from ensemblab.errors import InsufficientDataError, NumericalError, RejectedInputError
from ensemblab.process_sim import Path, PathEnsemble, ProcessSpec, TimeGrid, simulate, simulate_ensemble


def line_path(v, n=20, dt=1.0):
    g = TimeGrid(0.0, dt, n)
    return Path(g, v * g.times)


# -- sliding estimators ---------------------------------------------------------


def test_sliding_on_constant_and_linear_paths():
    const = Path(TimeGrid(0.0, 1.0, 10), np.full(11, 3.7))
    assert est.sliding_increment_mean(const, 1.0).estimate == 0.0
    assert est.sliding_msf(const, 2.0).estimate == 0.0
    assert est.sliding_increment_mean(line_path(1.5), 2.0, stride=2.0).estimate == pytest.approx(3.0, abs=1e-12)
    assert est.sliding_msf(line_path(-0.5), 4.0).estimate == pytest.approx(4.0, abs=1e-12)


def test_sliding_counts_windows_that_fit():
    rep = est.sliding_msf(line_path(1.0, n=10), 3.0)
    assert rep.n_samples == 3
    rep = est.sliding_msf(line_path(1.0, n=10), 3.0, stride=1.0)
    assert rep.n_samples == 8
    assert est.OVERLAP_NOTE in rep.notes


def test_sliding_needs_two_windows_and_grid_lags():
    p = line_path(1.0, n=5)
    with pytest.raises(InsufficientDataError):
        est.sliding_msf(p, 3.0)
    with pytest.raises(RejectedInputError):
        est.sliding_msf(p, 1.5)
    with pytest.raises(RejectedInputError):
        est.sliding_msf(p, 1.0, stride=0.5)


def test_wiener_sliding_values():
    p = simulate(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 40_000), 1)
    m = est.sliding_increment_mean(p, 1.0, stride=1.0)
    assert abs(m.estimate) <= 4 * m.std_error
    msf = est.sliding_msf(p, 4.0)
    assert msf.n_samples == 10_000
    assert abs(msf.estimate - 4.0) <= 4 * msf.std_error


def test_overlap_exposes_positive_autocorrelation():
    p = simulate(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 20_000), 2)
    plain = est.sliding_increment_mean(p, 4.0, stride=4.0)
    over = est.sliding_increment_mean(p, 4.0, stride=1.0)
    assert abs(plain.autocorr_lag1) <= 4 / math.sqrt(plain.n_samples)
    assert over.autocorr_lag1 > 0.6  # three of four steps shared
    assert est.OVERLAP_NOTE in over.notes and est.OVERLAP_NOTE not in plain.notes


def test_pooled_sliding_keeps_autocorrelation_within_runs():
    g = TimeGrid(0.0, 1.0, 2)
    ens = PathEnsemble(g, np.array([[0.0, 1.0, 2.0], [0.0, -1.0, -2.0], [0.0, 1.0, 2.0]]))
    rep = est.sliding_increment_mean(ens, 1.0)
    assert rep.n_samples == 6
    assert rep.estimate == pytest.approx(1 / 3)
    # within-run pairs are (1,1), (-1,-1), (1,1): perfectly correlated
    assert rep.autocorr_lag1 == pytest.approx(1.0)


def test_std_error_is_naive_iid_formula():
    p = simulate(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 500), 3)
    rep = est.sliding_msf(p, 1.0)
    z2 = np.diff(p.values) ** 2
    assert rep.std_error == pytest.approx(np.std(z2, ddof=1) / math.sqrt(z2.size), rel=1e-12)


@pytest.mark.parametrize(
    "spec",
    [ProcessSpec.wiener(), ProcessSpec.ito("exp_t", gamma=0.2), ProcessSpec.ito("one_plus_abs_x"), ProcessSpec.ito("scaling_h")],
    ids=["wiener", "exp_t", "one_plus_abs_x", "scaling_h"],
)
def test_error_bars_are_honest_for_martingale_paths(spec):
    # 400 paths rather than 100 so the hit fraction is estimated to about +-1%;
    # state-dependent diffusions sit near 3% because the naive bar is conservative there
    ens = simulate_ensemble(spec, TimeGrid(0.0, 0.01, 200), 400, 4, substeps=5)
    hits = sum(abs(r.estimate) > 2 * r.std_error for r in (est.sliding_increment_mean(p, 0.01) for p in ens))
    assert 0.01 <= hits / 400 <= 0.15


# -- ensemble estimators --------------------------------------------------------


def test_ensemble_moment_wiener_and_martingale_mean():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 4), 20_000, 5)
    m2 = est.ensemble_moment(ens, 1.0, 2.0, power=2)
    assert abs(m2.estimate - 2.0) <= 4 * m2.std_error
    m1 = est.ensemble_moment(ens, 0.0, 3.0, power=1)
    assert abs(m1.estimate) <= 4 * m1.std_error
    assert abs(m2.autocorr_lag1) < 4 / math.sqrt(20_000)


def test_ensemble_moment_validation():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 4), 10, 5)
    with pytest.raises(RejectedInputError):
        est.ensemble_moment(ens, 3.0, 2.0)
    with pytest.raises(RejectedInputError):
        est.ensemble_moment(ens, 0.0, 1.0, power=3)
    with pytest.raises(InsufficientDataError):
        est.ensemble_moment(PathEnsemble(ens.grid, ens.values[:1]), 0.0, 1.0)


def test_scaling_diffusion_msf_agrees_across_base_times():
    ens = simulate_ensemble(ProcessSpec.ito("scaling_h", hurst=0.5), TimeGrid(0.0, 1.0, 6), 40_000, 6, substeps=20)
    a, b = est.ensemble_moment(ens, 1.0, 1.0), est.ensemble_moment(ens, 5.0, 1.0)
    assert abs(a.estimate - b.estimate) <= 4 * math.hypot(a.std_error, b.std_error)


def test_exp_t_msf_disagrees_across_base_times():
    ens = simulate_ensemble(ProcessSpec.ito("exp_t", gamma=1.0), TimeGrid(0.0, 0.5, 5), 100_000, 7, substeps=10)
    a, b = est.ensemble_moment(ens, 0.0, 0.5), est.ensemble_moment(ens, 2.0, 0.5)
    assert abs(a.estimate - b.estimate) > 5 * math.hypot(a.std_error, b.std_error)
    assert a.estimate == pytest.approx(o.exp_t_msf(0.0, 0.5), rel=0.03)
    assert b.estimate == pytest.approx(o.exp_t_msf(2.0, 0.5), rel=0.03)


@pytest.mark.parametrize("hurst", [0.3, 0.7])
def test_increment_autocorrelation_fbm(hurst):
    ens = simulate_ensemble(ProcessSpec.fbm(hurst), TimeGrid(0.0, 1.0, 2), 10_000, 8)
    rep = est.increment_autocorrelation(ens, 1.0, 1.0)
    assert rep.normalized == pytest.approx(o.adjacent_increment_corr(hurst), abs=0.02)
    assert est.BACKWARD_CONVENTION in rep.notes


def test_increment_autocorrelation_wiener_is_zero():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 2), 10_000, 9)
    rep = est.increment_autocorrelation(ens, 1.0, 1.0)
    assert abs(rep.normalized) <= 4 * rep.normalized_std_error
    vc = est.volatility_correlation(ens, 1.0, 1.0)
    assert abs(vc.normalized) <= 4 * vc.normalized_std_error


def test_volatility_correlation_matches_wick_for_fbm():
    ens = simulate_ensemble(ProcessSpec.fbm(0.7), TimeGrid(0.0, 1.0, 2), 100_000, 10)
    rep = est.volatility_correlation(ens, 1.0, 1.0)
    assert abs(rep.estimate - o.wick_squared_increment_cov(0.7)) <= 5 * rep.std_error
    assert rep.normalized == pytest.approx(o.wick_squared_increment_corr(0.7), abs=0.03)


def test_volatility_correlation_constant_paths_is_zero():
    ens = PathEnsemble(TimeGrid(0.0, 1.0, 2), np.ones((5, 3)))
    assert est.volatility_correlation(ens, 1.0, 1.0).estimate == 0.0


def test_correlation_boundaries_rejected():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 2), 10, 1)
    with pytest.raises(RejectedInputError):
        est.increment_autocorrelation(ens, 0.0, 1.0)
    with pytest.raises(RejectedInputError):
        est.volatility_correlation(ens, 2.0, 1.0)


# -- pair correlation and ergodicity ----------------------------------------------


def test_pair_correlation_lag_zero_is_sample_variance():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 3), 500, 11)
    curve = est.pair_correlation(ens, [0.0, 1.0], base_t=1.0)
    assert curve.values[0] == pytest.approx(np.var(ens.at(1.0)), rel=1e-12)


def test_pair_correlation_wiener_min_covariance():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 4), 20_000, 12)
    curve = est.pair_correlation(ens, [1.0, 2.0, 3.0], base_t=1.0)
    assert np.all(np.abs(curve.values - 1.0) <= 5 * curve.std_errors)


def test_pair_correlation_off_grid():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 4), 10, 12)
    with pytest.raises(RejectedInputError):
        est.pair_correlation(ens, [0.5])
    with pytest.raises(RejectedInputError):
        est.pair_correlation(ens, [5.0])


def test_ergodicity_diagnostic_closed_forms():
    lags = np.linspace(0.0, 10.0, 2001)
    curve = est.CorrelationCurve(lags, np.exp(-lags), "pair_correlation")
    assert est.ergodicity_diagnostic(curve) == pytest.approx(o.OU_ERGODICITY_T10, rel=1e-5)  # trapezoid error ~ h^2/12
    assert est.ergodicity_diagnostic(est.CorrelationCurve(lags, np.zeros_like(lags), "pair_correlation")) == 0.0
    assert est.ergodicity_diagnostic(est.CorrelationCurve(lags, np.full_like(lags, 0.37), "pair_correlation")) == pytest.approx(0.37, abs=1e-15)
    with pytest.raises(RejectedInputError):
        est.ergodicity_diagnostic(est.CorrelationCurve([], [], "pair_correlation"))
    with pytest.raises(RejectedInputError):
        est.ergodicity_diagnostic(est.CorrelationCurve([0.0, 1.0], [1.0, 0.5], "volatility_corr"))


def test_curve_validation_and_serialization(tmp_path):
    with pytest.raises(RejectedInputError):
        est.CorrelationCurve([1.0, 1.0], [0.0, 0.0], "pair_correlation")
    with pytest.raises(NumericalError):
        est.CorrelationCurve([1.0], [np.inf], "pair_correlation")
    c = est.CorrelationCurve([0.0, 0.5], [1.0, 0.1 + 0.2], "pair_correlation", [0.01, 0.02])
    assert est.CorrelationCurve.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    c.to_csv(tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "lag,value" and float(rows[2].split(",")[1]) == 0.1 + 0.2


def test_report_serialization_round_trip():
    r = est.EstimatorReport(1.0 / 3, 0.1, 10, -0.2, "n", 0.5, 0.01)
    assert est.EstimatorReport.from_dict(json.loads(json.dumps(r.to_dict()))) == r
    assert set(est.EstimatorReport(1.0, 0.1, 2, 0.0).to_dict()) == {"estimate", "std_error", "n_samples", "autocorr_lag1", "notes"}


# -- convergence rate -------------------------------------------------------------


def test_convergence_rate_wiener_msf():
    slope = est.convergence_rate(ProcessSpec.wiener(), "sliding_msf", 1.0, [100, 1000, 10_000, 100_000], 13, n_reps=256)
    assert slope == pytest.approx(-1.0, abs=0.1)


@pytest.mark.parametrize(
    "spec",
    [ProcessSpec.wiener(), ProcessSpec.fbm(0.3), ProcessSpec.ou(1.0, 1.0, stationary_start=True), ProcessSpec.ito("one_plus_abs_x")],
    ids=["wiener", "fbm", "ou", "ito"],
)
def test_ensemble_moment_variance_halves_when_n_doubles(spec):
    # replications are disjoint groups of one large ensemble: 4000 groups of 25, 2000 of 50
    ens = simulate_ensemble(spec, TimeGrid(0.0, 0.5, 2), 100_000, 14, substeps=10)
    z2 = (ens.values[:, 2] - ens.values[:, 0]) ** 2
    var = [np.var(z2.reshape(-1, n).mean(axis=1), ddof=1) for n in (25, 50)]
    assert var[0] / var[1] == pytest.approx(2.0, rel=0.2)


def test_convergence_variances_ensemble_route():
    ns, var = est.convergence_variances(ProcessSpec.wiener(), "ensemble_moment", 1.0, [10, 20, 200, 1000], 15, n_reps=64, power=1)
    assert ns.tolist() == [10, 20, 200, 1000]
    # Var of the mean of N unit normals is 1/N; 64 replications give about 18% relative error
    assert np.all(np.abs(np.log(var * ns)) < np.log(2.0))


def test_convergence_rate_input_checks():
    spec = ProcessSpec.wiener()
    with pytest.raises(RejectedInputError):
        est.convergence_rate(spec, "sliding_msf", 1.0, [10, 100, 1000], 1)
    with pytest.raises(RejectedInputError):
        est.convergence_rate(spec, "sliding_msf", 1.0, [10, 20, 40, 80], 1)
    with pytest.raises(RejectedInputError):
        est.convergence_rate(spec, "sliding_msf", 1.0, [10, 100, 1000, 10_000], 1, n_reps=8)
    with pytest.raises(RejectedInputError):
        est.convergence_rate(spec, "median", 1.0, [10, 100, 1000, 10_000], 1)


def test_convergence_rate_degenerate_fit(monkeypatch):
    monkeypatch.setattr(est, "convergence_variances", lambda *a, **k: (np.array([10.0, 100, 1000, 10000]), np.zeros(4)))
    with pytest.raises(NumericalError, match="degenerate"):
        est.convergence_rate(ProcessSpec.wiener(), "sliding_msf", 1.0, [10, 100, 1000, 10000], 1)
