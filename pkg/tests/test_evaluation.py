"""Evaluation tests: splits, scoring rules against direct computations,
screening order, and the combination search bookkeeping."""

import numpy as np
import pytest
from scipy import stats

from gpimpact.dataset import HeterotopicDataset, SeriesRecord
from gpimpact.evaluation import (
    ScoreCard,
    combination_search,
    crps,
    dtw_distance,
    energy_score,
    log_score,
    make_sogp_dataset,
    mse,
    screen_donors,
    train_test_split,
)
from gpimpact.optimize import Ml2Config, OptimizerConfig

from _oracles import dtw_table


def record(sid, times, y, cov=None, treated=False, t0=None):
    times = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    cov = np.zeros((len(times), 0)) if cov is None else np.asarray(cov, dtype=float)
    if treated and t0 is None:
        t0 = len(times)
    return SeriesRecord(sid, times, y, cov, is_treated=treated,
                        t0=t0 if treated else None)


class TestTrainTestSplit:
    def _panel(self):
        t = np.arange(1.0, 31.0)
        treated = record("tr", t, np.sin(t / 3), treated=True, t0=30)
        c1 = record("c1", np.arange(1.0, 36.0), np.cos(np.arange(1.0, 36.0) / 3))
        c2 = record("c2", np.arange(1.0, 21.0), np.sin(np.arange(1.0, 21.0) / 4))
        return HeterotopicDataset([treated, c1, c2], [])

    def test_two_thirds_cut_of_thirty(self):
        data = self._panel()
        train, test, test_y, test_times = train_test_split(data, 2.0 / 3.0)
        assert len(train.treated.y) == 19
        assert test.X.shape[0] == 11
        assert np.array_equal(test_times, np.arange(20.0, 31.0))
        assert np.array_equal(test_y, data.treated.y[19:30])
        assert np.all(test.series_index == train.treated_pos)

    def test_controls_keep_data_to_the_boundary(self):
        train, _, _, _ = train_test_split(self._panel(), 2.0 / 3.0)
        assert len(train.by_id("c1").y) == 30  # rows after time 30 dropped
        assert len(train.by_id("c2").y) == 20  # shorter control untouched

    def test_ratio_validation(self):
        data = self._panel()
        for ratio in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ValueError):
                train_test_split(data, ratio)

    def test_short_training_segment_rejected(self):
        t = np.arange(1.0, 11.0)
        data = HeterotopicDataset(
            [record("tr", t, np.sin(t), treated=True, t0=10),
             record("c", t, np.cos(t))], [])
        with pytest.raises(ValueError, match="at least 6"):
            train_test_split(data, 0.69)

    def test_control_without_pre_data_dropped(self):
        t = np.arange(1.0, 31.0)
        late = record("late", np.arange(40.0, 50.0), np.ones(10))
        data = HeterotopicDataset(
            [record("tr", t, np.sin(t / 3), treated=True, t0=30),
             record("c1", t, np.cos(t / 3)), late], [])
        with pytest.warns(UserWarning, match="late"):
            train, _, _, _ = train_test_split(data, 2.0 / 3.0)
        assert "late" not in train.ids()


class TestPointScores:
    def test_mse_value(self):
        assert mse(np.array([1.0, 2.0]), np.zeros(2)) == 2.5

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(np.zeros(3), np.zeros(2))

    def test_log_score_at_the_mean_with_unit_spread(self):
        got = log_score(np.array([4.0]), np.array([4.0]), np.array([1.0]))
        assert abs(got - 0.5 * np.log(2.0 * np.pi)) < 1e-12
        assert abs(got - 0.9189385332046727) < 1e-12

    def test_log_score_matches_normal_density(self, rng):
        y = rng.normal(size=6)
        mu = rng.normal(size=6)
        sd = rng.uniform(0.5, 2.0, size=6)
        want = -np.mean(stats.norm.logpdf(y, mu, sd))
        assert abs(log_score(y, mu, sd) - want) < 1e-12

    def test_log_score_rejects_bad_spread(self):
        with pytest.raises(ValueError):
            log_score(np.zeros(2), np.zeros(2), np.array([1.0, 0.0]))


def energy_direct(samples, y):
    n = len(samples)
    t1 = np.mean([np.linalg.norm(row - y) for row in samples])
    t2 = sum(np.linalg.norm(a - b) for a in samples for b in samples)
    return t1 - t2 / (2.0 * n * n)


class TestEnergyScore:
    def test_matches_direct_sum_in_three_dims(self, rng):
        samples = rng.normal(size=(40, 3))
        y = rng.normal(size=3)
        assert abs(energy_score(samples, y) - energy_direct(samples, y)) < 1e-12

    def test_sorted_shortcut_matches_direct_sum(self, rng):
        samples = rng.normal(size=(60, 1))
        y = rng.normal(size=1)
        assert abs(energy_score(samples, y) - energy_direct(samples, y)) < 1e-12

    def test_chunking_is_exact(self, rng):
        samples = rng.normal(size=(25, 2))
        y = rng.normal(size=2)
        a = energy_score(samples, y, chunk=3)
        b = energy_score(samples, y, chunk=1000)
        assert abs(a - b) < 1e-12

    def test_point_mass_at_truth_scores_zero(self):
        samples = np.tile([1.0, 2.0], (10, 1))
        assert energy_score(samples, np.array([1.0, 2.0])) == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            energy_score(np.zeros((1, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            energy_score(np.zeros((5, 2)), np.zeros(3))

    def test_crps_of_standard_normal_forecast(self):
        rng = np.random.default_rng(42)
        draws = rng.normal(size=100000)
        want = (np.sqrt(2.0) - 1.0) / np.sqrt(np.pi)
        got = crps(draws, 0.0)
        assert abs(got - want) / want < 0.02

    def test_crps_equals_one_dim_energy_score(self, rng):
        draws = rng.normal(size=30)
        assert crps(draws, 0.5) == energy_score(draws[:, None], np.array([0.5]))


class TestDtw:
    def test_matches_table_oracle(self, rng):
        for n, m in [(5, 5), (8, 3), (1, 6), (12, 12), (2, 9)]:
            a = rng.normal(size=n)
            b = rng.normal(size=m)
            assert dtw_distance(a, b) == pytest.approx(dtw_table(a, b), abs=1e-12)

    def test_identical_series_have_zero_distance(self, rng):
        a = rng.normal(size=10)
        assert dtw_distance(a, a) == 0.0

    def test_tiny_hand_cases(self):
        assert dtw_distance([1.0], [3.0]) == 2.0
        assert dtw_distance([0.0, 0.0], [1.0]) == 2.0
        assert dtw_distance([0.0, 1.0], [0.0, 1.0, 1.0]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dtw_distance([], [1.0])


class TestScreening:
    def _panel(self):
        t = np.arange(1.0, 21.0)
        base = np.sin(t / 2)
        series = [
            record("tr", t, base, treated=True, t0=20),
            record("b", t, 2.0 * base + 5.0),          # affine copy
            record("c", t, base + 0.3 * np.cos(7 * t)),  # perturbed copy
            record("d", t, np.cos(t / 2)),             # phase shifted
            record("e", t, 2.0 * base + 5.0),          # exact duplicate of b
        ]
        return HeterotopicDataset(series, [])

    def test_affine_copies_rank_first_with_lexicographic_ties(self):
        res = screen_donors(self._panel(), k=8)
        # standardization cancels the affine map up to rounding
        assert res.distances["b"] < 1e-10
        assert res.distances["e"] == res.distances["b"]
        assert res.distances["c"] < res.distances["d"]
        assert res.ranked == ["b", "e", "c", "d"]

    def test_top_k_truncation(self):
        res = screen_donors(self._panel(), k=2)
        assert res.ranked == ["b", "e"]

    def test_sparse_control_excluded(self):
        t = np.arange(1.0, 21.0)
        panel = HeterotopicDataset(
            [record("tr", t, np.sin(t / 2), treated=True, t0=20),
             record("ok", t, np.cos(t / 2)),
             record("thin", np.array([5.0]), np.array([1.0]))], [])
        with pytest.warns(UserWarning, match="thin"):
            res = screen_donors(panel)
        assert "thin" not in res.distances
        assert res.ranked == ["ok"]

    def test_k_validation(self):
        with pytest.raises(ValueError):
            screen_donors(self._panel(), k=0)

    def test_window_end_reported(self):
        assert screen_donors(self._panel()).window_end == 20.0


class TestSogpDataset:
    def _panel(self):
        t = np.arange(1.0, 7.0)
        cov = np.arange(6.0)[:, None]
        return HeterotopicDataset(
            [SeriesRecord("tr", t, 10 + t, cov, is_treated=True, t0=4),
             SeriesRecord("c1", t, 20 + t, np.zeros((6, 1))),
             SeriesRecord("c2", np.arange(2.0, 8.0), 30 + np.arange(2.0, 8.0),
                          np.zeros((6, 1)))],
            ["x0"])

    def test_join_on_common_times(self):
        out = make_sogp_dataset(self._panel())
        assert out.m == 1
        rec = out.treated
        assert np.array_equal(rec.times, np.arange(2.0, 7.0))
        assert np.array_equal(rec.y, 10 + np.arange(2.0, 7.0))
        assert rec.t0 == 3  # shared times up to the boundary at t=4
        assert list(out.covariate_names) == ["c1", "c2", "x0"]
        x = rec.input_matrix()
        assert np.array_equal(x[:, 1], 20 + np.arange(2.0, 7.0))
        assert np.array_equal(x[:, 2], 30 + np.arange(2.0, 7.0))
        assert np.array_equal(x[:, 3], np.arange(1.0, 6.0))

    def test_no_controls_rejected(self):
        t = np.arange(1.0, 7.0)
        solo = HeterotopicDataset(
            [SeriesRecord("tr", t, t, np.zeros((6, 0)), is_treated=True, t0=4)], [])
        with pytest.raises(ValueError):
            make_sogp_dataset(solo)

    def test_disjoint_times_rejected(self):
        t = np.arange(1.0, 7.0)
        ds = HeterotopicDataset(
            [SeriesRecord("tr", t, t, np.zeros((6, 0)), is_treated=True, t0=4),
             SeriesRecord("c", t + 100, t, np.zeros((6, 0)))], [])
        with pytest.raises(ValueError):
            make_sogp_dataset(ds)


class TestCombinationSearch:
    def _panel(self, rng):
        t = np.arange(0.0, 12.0)
        base = np.sin(t / 2)
        series = [record("tr", t, base + 0.05 * rng.normal(size=12),
                         cov=np.cos(t / 3)[:, None], treated=True, t0=12)]
        for i in range(4):
            series.append(record(f"c{i}", t,
                                 base * (1 + 0.1 * i) + 0.05 * rng.normal(size=12),
                                 cov=np.cos(t / 3 + i)[:, None]))
        return HeterotopicDataset(series, ["x0"])

    def _config(self):
        return Ml2Config(OptimizerConfig(max_iter=25), restarts=1)

    def test_card_grid_and_unknown_tag_errors(self, rng):
        data = self._panel(rng)
        res = combination_search(data, tags=("2FGP", "SOGP", "BCI"),
                                 donors=["c0", "c1", "c2", "c3"], combo_size=2,
                                 seed=1, n_score_samples=50, ml2=self._config())
        assert res.n_attempts == 18  # six pairs, three tags
        bci = [c for c in res.cards if c.tag == "BCI"]
        assert len(bci) == 6
        assert all(c.status == "error" for c in bci)
        assert all("ValueError" in c.message for c in bci)
        ok = [c for c in res.cards if c.status == "ok"]
        assert len(ok) == 12
        for card in ok:
            assert np.isfinite(card.es)
            assert np.isfinite(card.log_s)
            assert np.isfinite(card.mse)

    def test_cards_sorted_and_ranking_by_energy_score(self, rng):
        data = self._panel(rng)
        res = combination_search(data, tags=("SOGP", "2FGP"),
                                 donors=["c0", "c1", "c2"], combo_size=2,
                                 seed=3, n_score_samples=40, ml2=self._config())
        keys = [c.key for c in res.cards]
        assert keys == sorted(keys)
        es = [c.es for c in res.ranking]
        assert es == sorted(es)
        assert res.best() is res.ranking[0]
        assert all(c.status == "ok" for c in res.ranking)

    def test_deterministic_and_job_count_invariant(self, rng):
        data = self._panel(rng)
        kwargs = dict(tags=("SOGP",), donors=["c0", "c1", "c2"], combo_size=2,
                      seed=11, n_score_samples=30, ml2=self._config())
        a = combination_search(data, jobs=1, **kwargs)
        b = combination_search(data, jobs=3, **kwargs)
        assert [c.key for c in a.cards] == [c.key for c in b.cards]
        assert [c.es for c in a.cards] == [c.es for c in b.cards]
        assert [c.log_s for c in a.cards] == [c.log_s for c in b.cards]

    def test_combo_size_validation(self, rng):
        data = self._panel(rng)
        with pytest.raises(ValueError):
            combination_search(data, donors=["c0", "c1"], combo_size=3)

    def test_score_card_round_trip(self):
        card = ScoreCard(("a", "b"), "2FGP", es=1.5, log_s=0.2, mse=0.1)
        d = card.to_dict()
        assert d["combo"] == ["a", "b"]
        assert d["status"] == "ok"
