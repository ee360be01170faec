import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeppam import evaluation as ev
from deeppam.ped import SurvivalRecord


def recs(pairs):
    return [SurvivalRecord(i, float(t), int(d), np.zeros(0)) for i, (t, d) in enumerate(pairs)]


def constant(value):
    return lambda records, times: np.full((len(records), len(np.atleast_1d(times))), value)


class TestKaplanMeier:
    def test_example(self):
        km = ev.kaplan_meier([1, 2, 3], [1, 0, 1])
        np.testing.assert_allclose(km([1, 2, 3]), [2 / 3, 2 / 3, 0])
        assert km(0.5) == 1.0

    def test_censoring_tie_stays_at_risk(self):
        km = ev.kaplan_meier([1, 1, 2], [1, 0, 1])
        np.testing.assert_allclose(km([1, 2]), [2 / 3, 0])

    def test_left_limit(self):
        km = ev.kaplan_meier([1, 2, 3], [1, 1, 1])
        assert km.left(2.0) == pytest.approx(2 / 3)
        assert km(2.0) == pytest.approx(1 / 3)

    def test_no_events(self):
        km = ev.kaplan_meier([1, 2], [0, 0])
        np.testing.assert_array_equal(km([0.5, 5]), [1, 1])

    @given(st.lists(st.tuples(st.integers(1, 10_000), st.integers(0, 1)), min_size=1, max_size=40,
                    unique_by=lambda p: p[0]))
    @settings(max_examples=200, deadline=None)
    def test_product_identity(self, pairs):
        """Without ties, KM(events) * KM(censorings) is the observed-time KM."""
        times = np.array([p[0] for p in pairs], dtype=float)
        status = np.array([p[1] for p in pairs])
        grid = np.concatenate([times, times + 0.5, [0.0]])
        s = ev.kaplan_meier(times, status)(grid)
        g = ev.kaplan_meier(times, 1 - status)(grid)
        both = ev.kaplan_meier(times, np.ones_like(status))(grid)
        np.testing.assert_allclose(s * g, both, atol=1e-12)


TRAIN = recs([(1, 1), (2, 0), (3, 1), (4, 0)])
TEST = recs([(0.5, 1), (1.5, 0), (2.5, 1), (3.5, 0)])
TEST_SURV = np.array([0.9, 0.8, 0.6, 0.7])


class TestBrier:
    def test_censoring_km(self):
        g = ev.censoring_km(TRAIN)
        np.testing.assert_allclose(g([0.5, 1.9, 2, 3.9, 4, 10]), [1, 1, 2 / 3, 2 / 3, 0, 0])

    def test_hand_fixture(self):
        g = ev.censoring_km(TRAIN)
        bs = ev.brier_score(TEST, TEST_SURV, 3.0, g)
        assert abs(bs - 0.37125) <= 1e-12
        callable_bs = ev.brier_score(TEST, lambda r, t: TEST_SURV[:, None], 3.0, g)
        assert callable_bs == bs

    def test_constant_half(self):
        test = recs([(t, 1) for t in np.linspace(0.5, 5, 10)])
        g = ev.censoring_km(test)
        for t in (0.1, 1.0, 2.7, 6.0):
            assert ev.brier_score(test, constant(0.5), t, g) == pytest.approx(0.25)

    def test_perfect_predictor(self):
        test = recs([(1, 1), (2, 0), (3, 1), (5, 1)])
        g = ev.censoring_km(TRAIN + test)
        t = 2.5
        perfect = np.array([0.0 if r.time <= t else 1.0 for r in test])
        assert ev.brier_score(test, perfect, t, g) == 0.0

    def test_no_mass(self):
        g = ev.censoring_km(TRAIN)
        with pytest.raises(ev.EvaluationError, match="no mass"):
            ev.brier_score(recs([(6, 0)]), np.array([0.5]), 5.0, g)

    def test_dropped_subjects_reported(self):
        g = ev.censoring_km(TRAIN)
        test = recs([(6, 0), (1.5, 1)])
        score, dropped = ev.brier_score(test, np.array([0.5, 0.5]), 5.0, g, return_dropped=True)
        assert dropped == 1
        assert score == pytest.approx(0.25)

    def test_duplication_invariance(self):
        g = ev.censoring_km(TRAIN)
        doubled = TEST + TEST
        assert ev.brier_score(doubled, np.tile(TEST_SURV, 2), 3.0, g) == pytest.approx(
            ev.brier_score(TEST, TEST_SURV, 3.0, g), rel=1e-14)

    @given(st.lists(st.floats(0.01, 10), min_size=2, max_size=30), st.floats(0.0, 12.0))
    @settings(max_examples=200, deadline=None)
    def test_empirical_predictor_is_binomial_variance(self, times, t):
        """Uncensored data scored by its own empirical survival gives p(1 - p)."""
        test = recs([(x, 1) for x in times])
        g = ev.censoring_km(test)
        p = np.mean(np.array(times) <= t)
        bs = ev.brier_score(test, ev.km_predictor(ev.km_of_records(test)), t, g)
        assert bs == pytest.approx(p * (1 - p), abs=1e-12)
        assert 0 <= bs <= 0.25 + 1e-12


def simulated(n, seed, cens=True):
    rng = np.random.default_rng(seed)
    t = rng.exponential(2.0, n)
    c = rng.exponential(4.0, n) if cens else np.full(n, np.inf)
    return recs(zip(np.minimum(t, c), (t <= c).astype(int)))


class TestIntegrated:
    def test_grid_starts_at_zero(self):
        grid = ev.ibs_grid(TEST, 3.0)
        np.testing.assert_array_equal(grid, [0.0, 0.5, 2.5])

    def test_constant_curve(self):
        test = recs([(t, 1) for t in (1.0, 2.0, 3.0, 4.0)])
        g = ev.censoring_km(test)
        assert ev.integrated_brier(test, constant(0.5), 4.0, g) == pytest.approx(0.25)

    def test_hand_trapezoid(self):
        g = ev.censoring_km(TRAIN)
        res = ev.brier_curve(TEST, constant(0.5), 3.0, g)
        manual = np.sum(np.diff(res.times) * (res.bs[1:] + res.bs[:-1]) / 2) / 3.0
        assert res.ibs == pytest.approx(manual)
        assert res.bs[0] == pytest.approx(0.25)

    def test_grid_refinement(self):
        train, test = simulated(2000, 1), simulated(2000, 2)
        g = ev.censoring_km(train)
        tau = 3.0

        def surv(records, times):
            return np.tile(np.exp(-np.asarray(times) / 2.0), (len(records), 1))

        coarse = ev.integrated_brier(test, surv, tau, g)
        base = ev.ibs_grid(test, tau)
        fine = np.union1d(base, np.linspace(0, base[-1], 5000))
        refined = ev.brier_curve(test, surv, tau, g, grid=fine).ibs
        assert abs(coarse - refined) < 1e-3

    def test_duplicated_test_set(self):
        train, test = simulated(200, 3), simulated(100, 4)
        g = ev.censoring_km(train)
        pred = ev.km_predictor(ev.km_of_records(train))
        assert ev.integrated_brier(test + test, pred, 2.0, g) == pytest.approx(
            ev.integrated_brier(test, pred, 2.0, g), rel=1e-12)

    def test_true_survival_beats_constant(self):
        train, test = simulated(1000, 5), simulated(1000, 6)
        g = ev.censoring_km(train)

        def true(records, times):
            return np.tile(np.exp(-np.asarray(times) / 2.0), (len(records), 1))

        assert ev.integrated_brier(test, true, 3.0, g) < ev.integrated_brier(test, constant(0.5), 3.0, g)

    def test_no_events_before_tau(self):
        with pytest.raises(ev.EvaluationError):
            ev.ibs_grid(recs([(5, 1)]), 1.0)


class TestSummaries:
    def test_relative_ibs(self):
        assert ev.relative_ibs(0.11, 0.1) == pytest.approx(10.0)
        assert ev.relative_ibs(0.1, 0.1) == 0.0
        assert ev.relative_ibs(0.09, 0.1) == pytest.approx(-10.0)
        with pytest.raises(ev.EvaluationError):
            ev.relative_ibs(0.1, 0.0)

    def test_quartiles_use_uncensored_times(self):
        records = recs([(1, 1), (2, 1), (3, 1), (4, 1), (5, 1), (100, 0)])
        np.testing.assert_allclose(ev.quartile_horizons(records), [2, 3, 4])

    def test_quartiles_need_events(self):
        with pytest.raises(ev.EvaluationError):
            ev.quartile_horizons(recs([(1, 0)]))


@pytest.mark.slow
def test_km_not_better_than_correct_pam():
    from deeppam.experiment import ExperimentConfig, fit_structured, survival_predictor
    from deeppam.synth import SimConfig, generate_dataset, with_class_dummies

    diffs = []
    for seed in range(10):
        cfg = ExperimentConfig(sim=SimConfig(n_train=500, n_val=100, n_test=300, n_points=8, seed=seed),
                               cut_strategy="grid:40:10")
        train, val, test = generate_dataset(cfg.sim)
        pam = fit_structured("pam_correct", train, val, cfg)
        g = ev.censoring_km(train)
        tau = float(np.median([r.time for r in train if r.status == 1]))
        km_ibs = ev.integrated_brier(test, ev.km_predictor(ev.km_of_records(train)), tau, g)
        pam_ibs = ev.integrated_brier(with_class_dummies(test), survival_predictor(pam), tau, g)
        diffs.append(km_ibs - pam_ibs)
    assert np.median(diffs) >= 0
