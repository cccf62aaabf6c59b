import logging

import numpy as np
import pytest

from stitchlearn.evalx import (
    NoiseLevelTracker,
    SubsetSplit,
    average_precision,
    map_from_scores,
    read_noise_csv,
    split_by_counts,
    write_noise_csv,
)


def brute_force_ap(scores, labels):
    """O(n^2) enumeration oracle: precision at every positive's rank under
    descending score with ties broken by ascending index."""
    n = len(scores)
    precisions = []
    for i in range(n):
        if not labels[i]:
            continue
        rank = 0
        hits = 0
        for j in range(n):
            ahead = scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)
            if ahead:
                rank += 1
                if labels[j]:
                    hits += 1
        precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.1], [1, 0]) == 1.0

    def test_inverted_ranking(self):
        assert average_precision([0.1, 0.9], [1, 0]) == 0.5

    def test_three_sample_case(self):
        ap = average_precision([0.9, 0.8, 0.1], [1, 0, 1])
        assert ap == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_tie_broken_by_ascending_index(self):
        # equal scores: sample 0 ranks first, so a positive there is perfect
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0
        assert average_precision([0.5, 0.5], [0, 1]) == 0.5

    def test_matches_brute_force_enumeration(self):
        rng = np.random.default_rng(0)
        for seed in range(100):
            n = int(rng.integers(1, 9))
            scores = np.round(rng.random(n), 2)  # rounded to force ties
            labels = (rng.random(n) < 0.5).astype(int)
            if labels.sum() == 0:
                labels[int(rng.integers(0, n))] = 1
            ap = average_precision(scores, labels)
            assert ap == pytest.approx(brute_force_ap(list(scores), list(labels)))

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.random(40)
        labels = (rng.random(40) < 0.3).astype(int)
        labels[0] = 1
        base = average_precision(scores, labels)
        assert average_precision(3 * scores + 2, labels) == pytest.approx(base)
        assert average_precision(np.exp(scores), labels) == pytest.approx(base)

    def test_no_positive_errors(self):
        with pytest.raises(ValueError, match="positive"):
            average_precision([0.1, 0.2], [0, 0])


class TestMapFromScores:
    def split3(self):
        return SubsetSplit(head=(0,), medium=(1,), tail=(2,))

    def test_single_class_total_equals_class_ap(self):
        scores = np.array([[0.9], [0.2], [0.4]])
        labels = np.array([[1], [0], [1]])
        split = SubsetSplit(head=(0,), medium=(), tail=())
        res = map_from_scores(scores, labels, split)
        assert res.map_total == pytest.approx(average_precision(scores[:, 0], labels[:, 0]))
        assert res.map_medium is None
        assert res.map_tail is None

    def test_perfect_predictions_give_one(self):
        rng = np.random.default_rng(2)
        labels = (rng.random((20, 3)) < 0.4).astype(int)
        labels[0] = [1, 1, 1]
        scores = labels + 0.01 * rng.random((20, 3))
        res = map_from_scores(scores, labels, self.split3())
        assert res.map_total == pytest.approx(1.0)
        assert res.map_head == pytest.approx(1.0)
        assert res.map_tail == pytest.approx(1.0)

    def test_total_is_mean_of_per_class(self):
        rng = np.random.default_rng(3)
        labels = (rng.random((30, 3)) < 0.5).astype(int)
        labels[0] = [1, 1, 1]
        scores = rng.random((30, 3))
        res = map_from_scores(scores, labels, self.split3())
        assert res.map_total == pytest.approx(np.nanmean(res.per_class_ap))

    def test_random_scores_indistinguishable_from_label_shuffle(self):
        # permutation-test oracle: the mAP of random scores should sit inside
        # the null distribution generated by shuffling the labels
        rng = np.random.default_rng(4)
        labels = (rng.random((60, 3)) < 0.3).astype(int)
        labels[:3] = 1
        scores = rng.random((60, 3))
        observed = map_from_scores(scores, labels, self.split3()).map_total
        null = []
        for _ in range(300):
            perm = rng.permutation(60)
            null.append(map_from_scores(scores, labels[perm], self.split3()).map_total)
        lo, hi = np.quantile(null, [0.005, 0.995])
        assert lo <= observed <= hi

    def test_zero_positive_class_excluded_with_warning(self, caplog):
        labels = np.array([[1, 0], [0, 0], [1, 0]])
        scores = np.array([[0.8, 0.1], [0.3, 0.9], [0.7, 0.2]])
        split = SubsetSplit(head=(0,), medium=(), tail=(1,))
        with caplog.at_level(logging.WARNING):
            res = map_from_scores(scores, labels, split)
        assert "class 1" in caplog.text
        assert np.isnan(res.per_class_ap[1])
        assert res.map_tail is None
        assert res.map_total == pytest.approx(res.per_class_ap[0])


class TestSplitByCounts:
    def test_paper_thresholds(self):
        split = split_by_counts([500, 101, 100, 99, 21, 20, 19, 1])
        assert split.head == (0, 1)
        assert split.medium == (2, 3, 4, 5)
        assert split.tail == (6, 7)


def tracker3(window=2):
    split = SubsetSplit(head=(0,), medium=(1,), tail=(2,))
    return NoiseLevelTracker(split=split, n_classes=3, window=window)


class TestNoiseTracker:
    def test_clean_stream_is_zero(self):
        t = tracker3()
        for it in range(4):
            t.add_sample(np.array([1, 0, 1]), np.array([1, 0, 1]))
            t.end_iteration(it)
        assert len(t.records) == 2
        assert all(r.noise_total == 0.0 for r in t.records)
        assert t.cumulative_noise == 0.0

    def test_noise_fraction_counts_positive_positions(self):
        t = tracker3(window=1)
        # train label says {0}, clean says {1}: both positions count, both wrong
        t.add_sample(np.array([1, 0, 0]), np.array([0, 1, 0]))
        rec = t.end_iteration(0)
        assert rec.noise_total == pytest.approx(1.0)
        assert rec.noise_head == pytest.approx(1.0)
        assert rec.noise_medium == pytest.approx(1.0)
        # class 2 position inactive: tail fraction reported as 0 over 0 -> 0
        assert rec.noise_tail == 0.0

    def test_spurious_label_spread_counts_introduced(self):
        # two members, exactly one carries a spurious-only label on class 2:
        # the stitched label turns the other member's clean negative wrong
        t = tracker3(window=1)
        member_noisy = [np.array([1, 0, 1]), np.array([0, 1, 0])]
        member_clean = [np.array([1, 0, 0]), np.array([0, 1, 0])]
        train = np.array([1, 1, 1])  # union of noisy labels
        clean = np.array([1, 1, 0])  # union of clean labels
        t.add_sample(train, clean, member_noisy, member_clean)
        rec = t.end_iteration(0)
        assert rec.introduced_count == 1
        assert rec.reduced_count == 0

    def test_missing_label_repair_counts_reduced(self):
        # member 0 lost class 0 to noise; member 1 supplies it
        t = tracker3(window=1)
        member_noisy = [np.array([0, 1, 0]), np.array([1, 0, 0])]
        member_clean = [np.array([1, 1, 0]), np.array([1, 0, 0])]
        train = np.array([1, 1, 0])
        clean = np.array([1, 1, 0])
        t.add_sample(train, clean, member_noisy, member_clean)
        rec = t.end_iteration(0)
        assert rec.reduced_count == 1
        assert rec.introduced_count == 0

    def test_window_boundaries(self):
        t = tracker3(window=3)
        for it in range(7):
            t.add_sample(np.array([1, 0, 0]), np.array([1, 0, 0]))
            t.end_iteration(it)
        assert [r.iteration for r in t.records] == [2, 5]

    def test_state_round_trip(self):
        t = tracker3(window=5)
        t.add_sample(np.array([1, 0, 1]), np.array([0, 1, 1]))
        state = t.state_dict()
        t2 = tracker3(window=5)
        t2.load_state_dict(state)
        t.add_sample(np.array([1, 1, 0]), np.array([1, 1, 0]))
        t2.add_sample(np.array([1, 1, 0]), np.array([1, 1, 0]))
        a = t.end_iteration(4)
        b = t2.end_iteration(4)
        assert a == b

    def test_csv_round_trip(self, tmp_path):
        t = tracker3(window=1)
        t.add_sample(np.array([1, 0, 0]), np.array([0, 1, 0]))
        t.end_iteration(0)
        path = tmp_path / "noise.csv"
        write_noise_csv(path, t.records)
        assert read_noise_csv(path) == t.records
