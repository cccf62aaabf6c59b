import numpy as np
import pytest
from scipy import stats

from stitchlearn.sampling import Sampler, positives_by_class
from stitchlearn.synthgen import TokenBagSample


def make_samples(labels):
    return [
        TokenBagSample(
            tokens=np.zeros((1, 2)),
            clean_label=np.asarray(l, dtype=np.uint8),
            noisy_label=np.asarray(l, dtype=np.uint8),
            sample_id=i,
            primary_class=int(np.flatnonzero(l)[0]),
        )
        for i, l in enumerate(labels)
    ]


def skewed_dataset(class_sizes):
    labels = []
    for k, size in enumerate(class_sizes):
        for _ in range(size):
            row = [0] * len(class_sizes)
            row[k] = 1
            labels.append(row)
    return make_samples(labels)


class TestUniformSampler:
    def test_marginal_is_one_over_n(self):
        data = skewed_dataset([1, 1, 1, 1])
        sampler = Sampler("uniform", data, 4, seed_or_rng=0)
        draws = 100_000
        ids = sampler.sample_batch(draws).sample_ids
        freq = np.bincount(ids, minlength=4) / draws
        sigma = np.sqrt(0.25 * 0.75 / draws)
        assert (np.abs(freq - 0.25) < 3 * sigma).all()

    def test_chi_square_uniform_over_instances(self):
        data = skewed_dataset([3, 1, 2])
        sampler = Sampler("uniform", data, 3, seed_or_rng=1)
        draws = 200_000
        ids = sampler.sample_batch(draws).sample_ids
        observed = np.bincount(ids, minlength=len(data))
        _, p = stats.chisquare(observed)
        assert p > 0.001

    def test_replacement_allows_duplicates(self):
        data = skewed_dataset([1, 1])
        sampler = Sampler("uniform", data, 2, seed_or_rng=2)
        batch = sampler.sample_batch(10)
        assert len(batch.sample_ids) == 10
        assert len(set(batch.sample_ids.tolist())) <= 2


class TestClassRebalancedSampler:
    def test_lone_tail_sample_drawn_half_the_time(self):
        data = skewed_dataset([100, 1])
        sampler = Sampler("class_rebalanced", data, 2, seed_or_rng=3)
        draws = 100_000
        batch = sampler.sample_batch(draws)
        lone_id = 100
        freq = (batch.sample_ids == lone_id).mean()
        sigma = np.sqrt(0.5 * 0.5 / draws)
        assert abs(freq - 0.5) < 3 * sigma

    def test_chi_square_class_marginal(self):
        data = skewed_dataset([120, 40, 9, 3, 1])
        sampler = Sampler("class_rebalanced", data, 5, seed_or_rng=4)
        draws = 200_000
        batch = sampler.sample_batch(draws)
        observed = np.bincount(batch.provenance_class, minlength=5)
        _, p = stats.chisquare(observed)
        assert p > 0.001

    def test_provenance_consistent_with_membership(self):
        data = skewed_dataset([5, 2, 3])
        sampler = Sampler("class_rebalanced", data, 3, seed_or_rng=5)
        batch = sampler.sample_batch(500)
        for sid, cls in zip(batch.sample_ids, batch.provenance_class):
            assert data[sid].noisy_label[cls] == 1

    def test_within_class_is_uniform(self):
        data = skewed_dataset([2, 50])
        sampler = Sampler("class_rebalanced", data, 2, seed_or_rng=6)
        draws = 100_000
        batch = sampler.sample_batch(draws)
        mask = batch.provenance_class == 0
        first = (batch.sample_ids[mask] == 0).mean()
        sigma = np.sqrt(0.25 / mask.sum())
        assert abs(first - 0.5) < 3 * sigma

    def test_zero_positive_class_errors_with_class_name(self):
        labels = [[1, 0, 0], [1, 1, 0]]  # class 2 empty
        with pytest.raises(ValueError, match="class 2"):
            Sampler("class_rebalanced", make_samples(labels), 3, seed_or_rng=0)


class TestPlumbing:
    def test_positives_by_class_uses_noisy_labels(self):
        samples = make_samples([[1, 0], [1, 1]])
        samples[0].noisy_label = np.array([0, 1], dtype=np.uint8)
        lists = positives_by_class(samples, 2)
        np.testing.assert_array_equal(lists[0], [1])
        np.testing.assert_array_equal(lists[1], [0, 1])

    def test_same_seed_same_batches(self):
        data = skewed_dataset([4, 4, 4])
        a = Sampler("class_rebalanced", data, 3, seed_or_rng=9).sample_batch(100)
        b = Sampler("class_rebalanced", data, 3, seed_or_rng=9).sample_batch(100)
        np.testing.assert_array_equal(a.sample_ids, b.sample_ids)
        np.testing.assert_array_equal(a.provenance_class, b.provenance_class)

    def test_bad_kind_and_batch_size(self):
        data = skewed_dataset([2])
        with pytest.raises(ValueError):
            Sampler("reversed", data, 1, 0)
        with pytest.raises(ValueError):
            Sampler("uniform", data, 1, 0).sample_batch(0)
