"""Property-based checks of invariants shared across modules."""

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ensemblab import data_io as io
from ensemblab import densities as dens
from ensemblab import estimators as est
from ensemblab.ensemble_builder import LongSeries, segment_series, unsegment
from ensemblab.errors import InsufficientDataError
from ensemblab.process_sim import PathEnsemble, TimeGrid

# fixed example stream for reproducible runs; PROP_EXAMPLES raises the budget for deeper searches
SETTINGS = settings(
    max_examples=int(os.environ.get("PROP_EXAMPLES", 60)),
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, allow_subnormal=False)
steps = st.floats(1e-3, 1e3, allow_nan=False)


def ensembles(min_paths=2, max_paths=30, min_steps=2, max_steps=20):
    @st.composite
    def build(draw):
        n = draw(st.integers(min_paths, max_paths))
        m = draw(st.integers(min_steps, max_steps))
        vals = draw(arrays(float, (n, m + 1), elements=finite))
        return PathEnsemble(TimeGrid(0.0, 1.0, m), vals)

    return build()


@SETTINGS
@given(t0=finite, dt=steps, n=st.integers(1, 500))
def test_grid_times_round_trip_through_index(t0, dt, n):
    g = TimeGrid(t0, dt, n)
    times = g.times
    assert times.size == n + 1
    for k in {0, n // 2, n}:
        assert g.index(times[k]) == k
    assert g.steps(n * dt) == n


@SETTINGS
@given(ens=ensembles(), data=st.data())
def test_one_point_density_normalized_and_permutation_invariant(ens, data):
    t = float(data.draw(st.integers(0, ens.grid.n_steps)))
    d = dens.one_point_histogram(ens, t)
    assert d.total_mass == pytest.approx(1.0, abs=1e-9)
    assert np.all(d.mass >= 0)
    perm = data.draw(st.permutations(range(ens.n_paths)))
    shuffled = PathEnsemble(ens.grid, ens.values[list(perm)])
    assert dens.one_point_histogram(shuffled, t) == d


@SETTINGS
@given(ens=ensembles(), data=st.data())
def test_ensemble_moment_permutation_invariant(ens, data):
    T = float(data.draw(st.integers(1, ens.grid.n_steps)))
    perm = list(data.draw(st.permutations(range(ens.n_paths))))
    a = est.ensemble_moment(ens, 0.0, T, power=2)
    b = est.ensemble_moment(PathEnsemble(ens.grid, ens.values[perm]), 0.0, T, power=2)
    assert b.estimate == pytest.approx(a.estimate, rel=1e-12, abs=1e-9)
    assert b.n_samples == a.n_samples


@SETTINGS
@given(a=arrays(float, st.integers(5, 80), elements=finite), b=arrays(float, st.integers(5, 80), elements=finite))
def test_ks_distance_symmetric_and_bounded(a, b):
    da, db = dens._density(a, None, "a"), dens._density(b, None, "b")
    ab, ba = dens.ks_distance(da, db), dens.ks_distance(db, da)
    assert ab.statistic == pytest.approx(ba.statistic, abs=1e-12)
    assert 0.0 <= ab.statistic <= 1.0
    assert dens.ks_distance(da, da).statistic == 0.0


@st.composite
def irregular_series(draw):
    gaps = draw(arrays(float, st.integers(1, 40), elements=st.floats(0.1, 5.0)))
    ts = np.concatenate([[0.0], np.cumsum(gaps)])
    vals = draw(arrays(float, ts.size, elements=finite))
    return LongSeries(ts, vals)


@SETTINGS
@given(s=irregular_series(), dt=st.sampled_from([0.25, 0.5, 1.0, 2.0]))
def test_regularize_idempotent(s, dt):
    assume(dt >= np.min(np.diff(s.timestamps)) / 10)
    once = io.regularize(s, dt)
    twice = io.regularize(once.series, dt)
    assert twice.series == once.series
    assert twice.gaps.n_filled == 0
    # previous-tick values are always observed values
    assert set(once.series.values.tolist()) <= set(s.values.tolist())


@SETTINGS
@given(vals=arrays(float, st.integers(8, 120), elements=finite), data=st.data())
def test_segmentation_covers_and_rebases(vals, data):
    period = data.draw(st.integers(2, vals.size // 2))
    phase0 = data.draw(st.integers(0, period - 1))
    s = LongSeries(np.arange(vals.size, dtype=float), vals)
    if (vals.size - phase0) // period < 2:
        with pytest.raises(InsufficientDataError):
            segment_series(s, period, phase0)
        return
    ens = segment_series(s, period, phase0)
    assert ens.n_paths == (vals.size - phase0) // period
    assert np.all(ens.values[:, 0] == 0.0)
    starts = np.asarray(ens.meta["starts"])
    np.testing.assert_allclose(unsegment(ens, s), vals[starts[:, None] + np.arange(period)], rtol=1e-12, atol=1e-9)


labels = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"), max_size=12)
cells = st.one_of(finite, st.integers(-10**12, 10**12), st.booleans(), labels)


@SETTINGS
@given(
    rows=st.lists(st.tuples(finite, st.integers(-10**12, 10**12), labels), max_size=20),
    params=st.dictionaries(st.sampled_from(["T", "t", "stride"]), finite, max_size=3),
    result=st.dictionaries(st.text("abcdef", min_size=1, max_size=6), cells, max_size=5),
)
def test_bundle_round_trip_is_identity(tmp_path_factory, rows, params, result):
    b = io.ResultBundle(config={"seed": 1}, metadata={"version": "x"})
    b.add_report("sliding_msf", result, **params)
    b.add_table("t", ["x", "n", "label"], rows)
    d = tmp_path_factory.mktemp("bundle")
    io.save_bundle(b, d, overwrite=True)
    assert io.load_bundle(d) == b
