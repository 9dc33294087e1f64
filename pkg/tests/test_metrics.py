import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgattr.errors import ConfigError, InputError
from ecgattr.metrics import (DegenerateExample, DegradationCurve, EvalConfig, MetricRecord, aggregate,
                             aggregate_by_mode, degradation_curve, degradation_curves, degradation_score,
                             evaluate_example, ground_truth, localization_score, perturbation_path,
                             pointing_game_accuracy, pointing_game_hit, top_n, window_partition, window_ranking,
                             window_relevance)
from ecgattr.synth import BeatAnnotation, BeatClass, Example

N, PAC, PVC = BeatClass.NORMAL, BeatClass.PAC, BeatClass.PVC


def oracle_top_n(values, n):
    """Rank-count definition: i is in the top n iff fewer than n samples outrank it."""
    out = set()
    for i, v in enumerate(values):
        rank = sum(1 for j, u in enumerate(values) if u > v or (u == v and j < i))
        if rank < n:
            out.add(i)
    return out


def oracle_iou(values, gt):
    a, b = oracle_top_n(values, len(gt)), set(gt)
    return len(a & b) / len(a | b)


def curve(y, order="MoRF"):
    y = np.asarray(y, dtype=np.float64)
    return DegradationCurve(order, y, y.copy(), np.arange(len(y) - 1))


class TestLocalization:
    def test_indicator_is_perfect(self):
        gt = [3, 4, 5]
        attr = np.zeros(10)
        attr[gt] = 1
        assert localization_score(attr, gt) == 1.0

    def test_disjoint_is_zero(self):
        attr = np.zeros(10)
        attr[[0, 1]] = 5
        assert localization_score(attr, [7, 8]) == 0.0

    def test_worked_example(self):
        attr = [0, 9, 8, 1, 7, 0, 0, 0]
        assert set(top_n(attr, 2).tolist()) == {1, 2}
        assert localization_score(attr, [2, 3]) == pytest.approx(1 / 3)
        # exhaustive: the best 2-subset by total value is unique here
        best = max(itertools.combinations(range(8), 2), key=lambda s: (sum(attr[i] for i in s), [-i for i in s]))
        assert set(best) == {1, 2}

    def test_ties_prefer_lower_index(self):
        assert top_n([1, 1, 1, 1], 2).tolist() == [0, 1]
        assert localization_score(np.ones(6), [0, 1]) == 1.0
        assert localization_score(np.ones(6), [4, 5]) == 0.0

    def test_empty_gt(self):
        with pytest.raises(InputError):
            localization_score(np.ones(4), [])

    def test_gt_out_of_range(self):
        with pytest.raises(InputError):
            localization_score(np.ones(4), [2, 9])

    def test_exhaustive_small_instances(self):
        rng = np.random.default_rng(0)
        for length in range(1, 13):
            maps = [rng.integers(0, 3, length).astype(float) for _ in range(2)] + [rng.standard_normal(length)]
            for code in range(1, 2 ** length):
                gt = [i for i in range(length) if code >> i & 1]
                for attr in maps:
                    assert localization_score(attr, gt) == oracle_iou(attr, gt)

    def test_all_rank_patterns_length_five(self):
        for perm in itertools.permutations(range(5)):
            for code in range(1, 32):
                gt = [i for i in range(5) if code >> i & 1]
                assert localization_score(np.array(perm, float), gt) == oracle_iou(perm, gt)

    def test_random_attribution_expectation(self):
        # |A & B| is hypergeometric when A is a uniform n-subset of L samples
        length, n, trials = 12, 4, 20000
        rng = np.random.default_rng(42)
        gt = [1, 5, 6, 10]
        scores = np.array([localization_score(rng.random(length), gt) for _ in range(trials)])
        expected = sum(math.comb(n, k) * math.comb(length - n, n - k) / math.comb(length, n) * k / (2 * n - k)
                       for k in range(n + 1))
        se = scores.std(ddof=1) / math.sqrt(trials)
        assert abs(scores.mean() - expected) < 3 * se

    @settings(max_examples=100)
    @given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.data())
    def test_range_and_perfect_iff_equal(self, values, data):
        gt = sorted(data.draw(st.sets(st.integers(0, len(values) - 1), min_size=1)))
        s = localization_score(np.array(values, float), gt)
        assert 0 <= s <= 1
        assert (s == 1) == (oracle_top_n(values, len(gt)) == set(gt))


class TestPointing:
    def test_hit_and_miss(self):
        assert pointing_game_hit([0, 0, 5, 0], [2, 3])
        assert not pointing_game_hit([5, 0, 0, 0], [2, 3])

    def test_tie_lower_index_inside(self):
        assert pointing_game_hit([0, 7, 0, 7], [1])
        assert not pointing_game_hit([0, 7, 0, 7], [3])

    def test_accuracy(self):
        assert pointing_game_accuracy([True, True, True, False]) == 0.75
        assert pointing_game_accuracy([True] * 4) == 1.0
        assert pointing_game_accuracy([False] * 3) == 0.0
        with pytest.raises(InputError):
            pointing_game_accuracy([])

    @settings(max_examples=50)
    @given(st.lists(st.booleans(), min_size=1, max_size=50))
    def test_accuracy_is_direct_count(self, hits):
        assert pointing_game_accuracy(hits) == hits.count(True) / len(hits)


class TestWindows:
    def test_partitions(self):
        assert window_partition(32, 16).tolist() == [0, 16, 32]
        bounds = window_partition(2049, 16)
        assert len(bounds) - 1 == 129 and bounds[-1] - bounds[-2] == 1
        assert np.all(np.diff(bounds)[:-1] == 16)
        assert window_partition(5, 1).tolist() == [0, 1, 2, 3, 4, 5]

    def test_bad_window(self):
        with pytest.raises(InputError):
            window_partition(10, 0)
        with pytest.raises(ConfigError):
            EvalConfig(window=0)

    def test_relevance_sum_and_mean(self):
        b = window_partition(5, 2)
        np.testing.assert_allclose(window_relevance([1, 2, 3, 4, 5], b), [3, 7, 5])
        np.testing.assert_allclose(window_relevance([1, 2, 3, 4, 5], b, "mean"), [1.5, 3.5, 5])

    def test_ranking_ties(self):
        assert window_ranking([2, 5, 5, 1], "MoRF").tolist() == [1, 2, 0, 3]
        assert window_ranking([2, 5, 5, 1], "LeRF").tolist() == [3, 0, 1, 2]
        with pytest.raises(InputError):
            window_ranking([1], "random")

    def test_perturbation_is_cumulative(self):
        x = np.array([0.0, 2.0, 4.0, 8.0, 1.0])
        path = perturbation_path(x, window_partition(5, 2), np.array([1, 0, 2]))
        np.testing.assert_allclose(path, [[0, 2, 4, 8, 1], [0, 2, 6, 6, 1], [1, 1, 6, 6, 1], [1, 1, 6, 6, 1]])


def window_one_model(x0):
    """Probability 0.9 while window 1 of the two-window signal is intact, else 0.1."""
    def model(xs):
        intact = np.abs(xs[:, 4:] - x0[4:]).max(axis=1) < 1e-12
        return np.where(intact, 0.9, 0.1)
    return model


class TestDegradation:
    def test_two_window_oracle(self):
        x = np.array([0.0, 1.0, 2.0, 3.0, 5.0, -1.0, 2.0, 0.0])
        attr = np.array([0, 0, 0, 0, 1, 1, 1, 1.0])
        morf = degradation_curve(window_one_model(x), x, attr, 4, "MoRF", 0)
        lerf = degradation_curve(window_one_model(x), x, attr, 4, "LeRF", 0)
        np.testing.assert_allclose(morf.p, [0.9, 0.1, 0.1])
        np.testing.assert_array_equal(morf.y, [1, 0, 0])
        np.testing.assert_array_equal(lerf.y, [1, 1, 0])
        assert degradation_score(morf, lerf) == 0.5

    def test_batched_pair_matches_single_curves(self):
        rng = np.random.default_rng(0)
        x, attr = rng.standard_normal(50), rng.standard_normal(50)
        w = 0.2 * rng.standard_normal(50)
        model = lambda xs: 1 / (1 + np.exp(-(xs @ w)))  # noqa: E731
        m, l = degradation_curves(model, x, attr, 7, 0)
        np.testing.assert_array_equal(m.y, degradation_curve(model, x, attr, 7, "MoRF", 0).y)
        np.testing.assert_array_equal(l.y, degradation_curve(model, x, attr, 7, "LeRF", 0).y)

    def test_endpoints_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x, attr, w = rng.standard_normal(40), rng.standard_normal(40), 0.2 * rng.standard_normal(40)
            m, l = degradation_curves(lambda xs: np.tanh(xs @ w), x, attr, 6, 0)
            for c in (m, l):
                assert c.y[0] == 1.0 and c.y[-1] == 0.0 and len(c.y) == 8

    def test_constant_signal_degenerate(self):
        with pytest.raises(DegenerateExample):
            degradation_curve(lambda xs: xs.sum(axis=1), np.full(32, 3.0), np.arange(32.0), 16, "MoRF", 0)

    def test_identical_curves_zero(self):
        c = curve([1, 0.3, 0.8, 0])
        assert degradation_score(c, c) == 0.0

    @pytest.mark.parametrize("n", [1, 2, 5, 128])
    def test_closed_form_step_curves(self, n):
        lerf = curve([1.0] * n + [0.0], "LeRF")
        morf = curve([1.0] + [0.0] * n)
        assert degradation_score(morf, lerf) == pytest.approx((n - 1) / n, abs=1e-15)

    def test_antisymmetry(self):
        a, b = curve([1, 0.2, 0.1, 0.4, 0]), curve([1, 0.9, 0.7, 0.8, 0])
        assert degradation_score(a, b) == -degradation_score(b, a)

    def test_clipping(self):
        a, b = curve([1, -3, -4, 0]), curve([1, 5, 6, 0])
        assert degradation_score(a, b) == 1.0 and degradation_score(b, a) == -1.0
        assert degradation_score(a, b, clip=False) == pytest.approx(6.0)

    def test_mismatched_curves(self):
        with pytest.raises(InputError):
            degradation_score(curve([1, 0]), curve([1, 0.5, 0]))

    @settings(max_examples=100)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.data())
    def test_antisymmetry_property(self, mid_a, data):
        mid_b = data.draw(st.lists(st.floats(-5, 5), min_size=len(mid_a), max_size=len(mid_a)))
        a, b = curve([1] + mid_a + [0]), curve([1] + mid_b + [0])
        s = degradation_score(a, b)
        assert degradation_score(b, a) == -s
        assert -1 <= s <= 1


def make_example(length=64, abnormal=(16, 32), label=PVC, ex_id=0):
    beats = (BeatAnnotation(8, 0, abnormal[0], N), BeatAnnotation(24, abnormal[0], abnormal[1], label),
             BeatAnnotation(48, abnormal[1], length, N))
    return Example(np.zeros(length, np.float32), beats, label, ex_id)


class TestEvaluate:
    def test_ground_truth(self):
        np.testing.assert_array_equal(ground_truth(make_example()), np.arange(16, 32))
        assert ground_truth(make_example(label=N)).size == 0

    def test_record_for_localized_attribution(self):
        ex = make_example()
        rng = np.random.default_rng(0)
        x = rng.standard_normal(64)
        w = np.zeros(64)
        w[16:32] = 1
        model = lambda xs: 1 / (1 + np.exp(-(xs @ (w * x))))  # noqa: E731
        attr = np.zeros(64)
        attr[16:32] = 1
        rec = evaluate_example(model, x, ex, attr, EvalConfig(window=8), "GradCAM", "raw")
        assert rec.loc == 1.0 and rec.hit and not rec.skipped
        assert rec.degradation > 0.5

    def test_constant_signal_skipped(self):
        rec = evaluate_example(lambda xs: xs.sum(axis=1), np.ones(64), make_example(), np.arange(64.0),
                               EvalConfig(window=16))
        assert rec.skipped and math.isnan(rec.degradation)

    def test_csv_row_round_trip(self):
        rec = MetricRecord(3, "LIME", "absolute", 0.1 + 0.2, True, -0.123456789012345, False, 2)
        back = MetricRecord.from_row({k: str(v) for k, v in rec.as_row().items()})
        assert back == rec
        skipped = MetricRecord(1, "LRP", "raw", 0.5, False, float("nan"), True)
        back = MetricRecord.from_row({k: str(v) for k, v in skipped.as_row().items()})
        assert back.skipped and math.isnan(back.degradation)


def records(rng, n=12):
    out = []
    for i in range(n):
        for method in ("Random", "GradCAM"):
            for mode in ("raw", "absolute"):
                out.append(MetricRecord(i, method, mode, float(rng.random()), bool(rng.random() < 0.5),
                                        float(rng.uniform(-1, 1)), bool(rng.random() < 0.1)))
    return out


class TestAggregate:
    def test_single_record(self):
        rec = MetricRecord(0, "LIME", "raw", 0.25, True, 0.5)
        row = aggregate([rec])["LIME"]
        assert (row.loc, row.pointing, row.degradation) == (0.25, 1.0, 0.5)
        assert row.average == pytest.approx((0.25 + 1 + 0.5) / 3)

    def test_means_and_better_mode(self):
        rng = np.random.default_rng(3)
        recs = records(rng)
        by_mode = aggregate_by_mode(recs)
        for (method, mode), row in by_mode.items():
            sel = [r for r in recs if r.method == method and r.sign_mode == mode]
            assert row.loc == pytest.approx(np.mean([r.loc for r in sel]))
            assert row.pointing == pytest.approx(np.mean([r.hit for r in sel]))
            assert row.degradation == pytest.approx(np.mean([r.degradation for r in sel if not r.skipped]))
            assert row.n_skipped == sum(r.skipped for r in sel)
        best = aggregate(recs)
        for method, row in best.items():
            other = by_mode[(method, "absolute" if row.sign_mode == "raw" else "raw")]
            assert row.average >= other.average

    def test_raw_wins_ties(self):
        recs = [MetricRecord(0, "Random", m, 0.5, True, 0.0) for m in ("raw", "absolute")]
        assert aggregate(recs)["Random"].sign_mode == "raw"

    @settings(max_examples=30)
    @given(st.integers(0, 2**31 - 1), st.randoms())
    def test_permutation_invariant(self, seed, rnd):
        recs = records(np.random.default_rng(seed), 8)
        shuffled = recs[:]
        rnd.shuffle(shuffled)
        a, b = aggregate_by_mode(recs), aggregate_by_mode(shuffled)
        for key in a:
            assert (a[key].loc, a[key].pointing, a[key].degradation) == pytest.approx(
                (b[key].loc, b[key].pointing, b[key].degradation), abs=1e-15)
