import json
import math

import numpy as np
import pytest
from scipy import stats

import oracles as o
from ensemblab.errors import NumericalError, RejectedInputError
from ensemblab.process_sim import (
    Path,
    PathEnsemble,
    ProcessSpec,
    TimeGrid,
    fbm_covariance,
    path_seed,
    simulate,
    simulate_ensemble,
    simulate_fbm,
    simulate_ito,
    simulate_ou,
    simulate_wiener,
)


def se_mean(x):
    return np.std(x, ddof=1) / math.sqrt(x.size)


# -- TimeGrid ---------------------------------------------------------------


def test_grid_times_and_validation():
    g = TimeGrid(1.0, 0.25, 4)
    np.testing.assert_allclose(g.times, [1.0, 1.25, 1.5, 1.75, 2.0])
    assert g.n_points == 5 and g.t_end == 2.0
    assert g.index(1.5) == 2
    for bad in [dict(dt=0.0), dict(dt=-1.0), dict(n_steps=0), dict(dt=float("nan"))]:
        with pytest.raises(RejectedInputError):
            TimeGrid(**{"t0": 0.0, "dt": 1.0, "n_steps": 2, **bad})
    with pytest.raises(RejectedInputError, match="not a multiple"):
        g.steps(0.3)
    with pytest.raises(RejectedInputError, match="outside"):
        g.index(5.0)


# -- ProcessSpec ------------------------------------------------------------


@pytest.mark.parametrize(
    "kind,params,match",
    [
        ("fbm", {"hurst": 1.5}, "hurst"),
        ("fbm", {"hurst": 0.0}, "hurst"),
        ("wiener", {"sigma": 0.0}, "sigma"),
        ("wiener", {"sigma": float("inf")}, "sigma"),
        ("ou", {"theta": 0.0, "sigma": 1.0}, "theta"),
        ("ito", {"diffusion": "linear_x", "x0": 0.0}, "x0"),
        ("ito", {"diffusion": "nope"}, "diffusion"),
        ("levy", {}, "kind"),
    ],
)
def test_spec_rejects_invalid_parameters(kind, params, match):
    with pytest.raises(RejectedInputError, match=match):
        ProcessSpec(kind, params)


def test_spec_json_round_trip():
    for spec in [ProcessSpec.wiener(2.0), ProcessSpec.fbm(0.3), ProcessSpec.ou(1.0, 2.0, stationary_start=True),
                 ProcessSpec.ito("exp_t", gamma=0.5), ProcessSpec.ito("scaling_h", hurst=0.4)]:
        back = ProcessSpec.from_json(spec.to_json())
        assert back == spec
        assert json.loads(spec.to_json())["kind"] == spec.kind


# -- Wiener -----------------------------------------------------------------


def test_wiener_starts_at_zero_and_is_deterministic():
    g = TimeGrid(0.0, 0.1, 50)
    p = simulate_wiener(ProcessSpec.wiener(), g, 5)
    assert p.values[0] == 0.0
    assert p == simulate_wiener(ProcessSpec.wiener(), g, 5)
    assert p != simulate_wiener(ProcessSpec.wiener(), g, 6)


def test_wiener_unit_step_variance():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 1), 100_000, 1)
    z2 = ens.values[:, 1] ** 2
    assert abs(z2.mean() - 1.0) <= 4 * se_mean(z2)


def test_wiener_step_variance_scales_with_sigma_and_dt():
    ens = simulate_ensemble(ProcessSpec.wiener(2.0), TimeGrid(0.0, 0.25, 4), 20_000, 2)
    z2 = np.diff(ens.values, axis=1).ravel() ** 2
    assert abs(z2.mean() - 4 * 0.25) <= 4 * se_mean(z2)


def test_wiener_covariance_is_min():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 1.0, 4), 20_000, 3)
    x = ens.values
    for i in range(1, 5):
        for j in range(i, 5):
            prod = x[:, i] * x[:, j]
            assert abs(prod.mean() - min(i, j)) <= 5 * se_mean(prod)


def test_wiener_ensemble_mean_is_zero():
    ens = simulate_ensemble(ProcessSpec.wiener(), TimeGrid(0.0, 0.5, 6), 10_000, 4)
    for k in range(1, 7):
        x = ens.values[:, k]
        assert abs(x.mean()) <= 4 * se_mean(x)


# -- fBm --------------------------------------------------------------------


def test_fbm_covariance_examples():
    assert fbm_covariance(2, 3, 0.5) == pytest.approx(2.0)
    assert fbm_covariance(1, 1, 0.7) == pytest.approx(1.0)
    assert fbm_covariance(1, 2, 0.7) == pytest.approx(2**0.4, rel=1e-12)
    assert fbm_covariance(1, 2, 0.7) == fbm_covariance(2, 1, 0.7)
    assert fbm_covariance(3, 3, 0.7, sigma=2.0) == pytest.approx(4 * 3**1.4)
    with pytest.raises(RejectedInputError):
        fbm_covariance(-1, 1, 0.5)


def test_fbm_half_matches_wiener_increments():
    g = TimeGrid(0.0, 1.0, 10_000)
    a = np.diff(simulate_fbm(ProcessSpec.fbm(0.5), g, 1).values)
    b = np.diff(simulate_wiener(ProcessSpec.wiener(), g, 2).values)
    assert stats.ks_2samp(a, b).pvalue >= 0.01


def test_fbm_variance_at_one():
    ens = simulate_ensemble(ProcessSpec.fbm(0.7), TimeGrid(0.0, 0.5, 2), 10_000, 5)
    x2 = ens.at(1.0) ** 2
    assert ens.at(0.0).tolist() == [0.0] * 10_000
    assert abs(x2.mean() - 1.0) <= 4 * se_mean(x2)


@pytest.mark.parametrize("hurst", [0.3, 0.7])
def test_fbm_covariance_matches_oracle(hurst):
    ens = simulate_ensemble(ProcessSpec.fbm(hurst), TimeGrid(0.0, 1.0, 4), 20_000, 6)
    x = ens.values
    for i in range(1, 5):
        for j in range(i, 5):
            prod = x[:, i] * x[:, j]
            assert abs(prod.mean() - fbm_covariance(i, j, hurst)) <= 5 * se_mean(prod)
    z = np.diff(x, axis=1)
    r = np.corrcoef(z[:, 1], z[:, 2])[0, 1]
    assert r == pytest.approx(o.adjacent_increment_corr(hurst), abs=0.03)


def test_fbm_long_grid_uses_circulant_embedding_exactly():
    g = TimeGrid(0.0, 1.0, 5000)
    ens = simulate_ensemble(ProcessSpec.fbm(0.7), g, 200, 7)
    z = np.diff(ens.values, axis=1)
    assert np.mean(z**2) == pytest.approx(1.0, abs=0.02)
    r = np.mean(z[:, :-1] * z[:, 1:]) / np.mean(z**2)
    assert r == pytest.approx(o.RHO_H07, abs=0.02)


def test_fbm_nonzero_start_time_uses_elapsed_time():
    p = simulate_fbm(ProcessSpec.fbm(0.3), TimeGrid(5.0, 1.0, 3), 1)
    assert p.values[0] == 0.0


# -- Ito diffusions -----------------------------------------------------------


def test_one_plus_abs_small_time_msf():
    # <x^2(t)> = t + (2/3) sqrt(2/pi) t^{3/2} + O(t^2), so the ratio to t tends to 1 only slowly
    for t, seed in ((0.01, 8), (1e-4, 9)):
        ens = simulate_ensemble(ProcessSpec.ito("one_plus_abs_x"), TimeGrid(0.0, t, 1), 100_000, seed, substeps=100)
        x2 = ens.values[:, 1] ** 2
        assert abs(x2.mean() - o.one_plus_abs_small_t_msf(t)) <= 4 * se_mean(x2)
    assert x2.mean() == pytest.approx(1e-4, rel=0.02)


def test_exp_t_msf_matches_integral():
    ens = simulate_ensemble(ProcessSpec.ito("exp_t", gamma=1.0), TimeGrid(0.0, 0.5, 2), 100_000, 9)
    assert np.mean(ens.at(1.0) ** 2) == pytest.approx(math.e - 1, rel=0.03)


@pytest.mark.parametrize(
    "spec",
    [
        ProcessSpec.ito("scaling_h", hurst=0.5),
        ProcessSpec.ito("one_plus_abs_x", x0=0.5),
        ProcessSpec.ito("linear_x", x0=1.0),
        ProcessSpec.ito("exp_t", gamma=0.5, x0=-1.0),
    ],
    ids=lambda s: s.params["diffusion"],
)
def test_ito_martingale_mean(spec):
    ens = simulate_ensemble(spec, TimeGrid(0.0, 0.25, 8), 20_000, 10, substeps=20)
    for k in range(ens.grid.n_points):
        x = ens.values[:, k]
        se = se_mean(x)
        assert abs(x.mean() - spec.x0) <= max(5 * se, 1e-12)


def test_linear_x_stays_non_negative():
    ens = simulate_ensemble(ProcessSpec.ito("linear_x", x0=0.1), TimeGrid(0.0, 0.5, 8), 2_000, 11, substeps=10)
    assert np.all(ens.values >= 0)


def test_ito_overflow_is_a_numerical_error():
    spec = ProcessSpec.ito("exp_t", gamma=1500.0)
    with pytest.raises(NumericalError, match="path 0"):
        simulate_ito(spec, TimeGrid(0.0, 1.0, 2), 1, substeps=2)


def test_ito_rejects_bad_substeps():
    with pytest.raises(RejectedInputError):
        simulate_ito(ProcessSpec.ito("exp_t"), TimeGrid(0.0, 1.0, 2), 1, substeps=0)


# -- OU -----------------------------------------------------------------------


def test_ou_stationary_variance_every_time():
    spec = ProcessSpec.ou(1.0, math.sqrt(2.0), stationary_start=True)
    ens = simulate_ensemble(spec, TimeGrid(0.0, 0.5, 6), 10_000, 12)
    for k in range(ens.grid.n_points):
        x2 = ens.values[:, k] ** 2
        assert abs(x2.mean() - 1.0) <= 4 * se_mean(x2)
    assert stats.ks_2samp(ens.values[:, 0], ens.values[:, -1]).pvalue >= 0.01


def test_ou_autocovariance_closed_form():
    spec = ProcessSpec.ou(2.0, 2.0, stationary_start=True)
    ens = simulate_ensemble(spec, TimeGrid(0.0, 0.5, 1), 100_000, 13)
    prod = ens.values[:, 0] * ens.values[:, 1]
    target = o.ou_stationary_cov(0.5, theta=2.0, sigma=2.0)
    assert target == pytest.approx(math.exp(-1))
    assert abs(prod.mean() - target) <= 4 * se_mean(prod)


def test_ou_deterministic_start():
    p = simulate_ou(ProcessSpec.ou(1.0, 1.0, x0=3.0), TimeGrid(0.0, 0.1, 5), 1)
    assert p.values[0] == 3.0


# -- ensembles and seeding ----------------------------------------------------


def test_single_path_ensemble_equals_derived_stream():
    spec, g = ProcessSpec.fbm(0.3), TimeGrid(0.0, 1.0, 16)
    ens = simulate_ensemble(spec, g, 3, 99)
    for k in range(3):
        assert np.array_equal(ens[k].values, simulate(spec, g, path_seed(99, k)).values)
    assert np.array_equal(simulate_ensemble(spec, g, 1, 99)[0].values, ens[0].values)


def test_ensemble_is_thread_count_independent():
    spec, g = ProcessSpec.ito("one_plus_abs_x"), TimeGrid(0.0, 0.1, 4)
    a = simulate_ensemble(spec, g, 9000, 1, substeps=4, threads=1)
    b = simulate_ensemble(spec, g, 9000, 1, substeps=4, threads=3)
    assert a.values.tobytes() == b.values.tobytes()


def test_ensemble_containers_are_immutable_and_validated():
    g = TimeGrid(0.0, 1.0, 2)
    ens = PathEnsemble(g, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ens.values[0, 0] = 1.0
    with pytest.raises(RejectedInputError):
        PathEnsemble(g, np.zeros((2, 4)))
    with pytest.raises(NumericalError):
        Path(g, np.array([0.0, np.nan, 1.0]))
    with pytest.raises(RejectedInputError):
        PathEnsemble.from_paths([Path(g, np.zeros(3)), Path(TimeGrid(0.0, 2.0, 2), np.zeros(3))])
    with pytest.raises(RejectedInputError):
        simulate_ensemble(ProcessSpec.wiener(), g, 0, 1)
