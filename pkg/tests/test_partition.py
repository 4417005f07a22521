import numpy as np
import pytest
from scipy import stats

from fedmrn.data import Dataset, SyntheticSpec, make_synthetic
from fedmrn.partition import (
    Partition, make_partition, partition_by_labels, partition_dirichlet, partition_iid,
)


@pytest.fixture(scope="module")
def data():
    return make_synthetic(SyntheticSpec(n_samples=3000, n_features=2, n_classes=5, seed=1))


def _disjoint_cover(part, n):
    joined = np.concatenate(part.assignments)
    assert np.unique(joined).size == joined.size
    assert joined.min() >= 0 and joined.max() < n


def test_iid_equal_shards():
    d = make_synthetic(SyntheticSpec(n_samples=100, n_features=2))
    part = partition_iid(d, 4, 0)
    assert part.sizes.tolist() == [25, 25, 25, 25]
    assert sorted(np.concatenate(part.assignments).tolist()) == list(range(100))
    assert np.allclose(part.weights, 0.25)


def test_iid_sizes_differ_by_at_most_one():
    d = make_synthetic(SyntheticSpec(n_samples=103, n_features=2))
    sizes = partition_iid(d, 10, 0).sizes
    assert sizes.max() - sizes.min() <= 1 and sizes.sum() == 103


def test_iid_label_histograms_pass_chi_square(data):
    part = partition_iid(data, 10, 3)
    table = np.stack([np.bincount(data.labels[a], minlength=5) for a in part.assignments])
    _, pvalue, _, _ = stats.chi2_contingency(table)
    assert pvalue > 1e-3


def test_dirichlet_disjoint_nonempty_and_deterministic(data):
    a = partition_dirichlet(data, 100, 0.3, 7)
    b = partition_dirichlet(data, 100, 0.3, 7)
    _disjoint_cover(a, len(data))
    assert a.sizes.min() >= 1
    assert a.sizes.sum() == len(data)
    assert all(np.array_equal(x, y) for x, y in zip(a.assignments, b.assignments))


def test_dirichlet_is_skewed_at_small_beta(data):
    part = partition_dirichlet(data, 20, 0.3, 0)
    fractions = [np.bincount(data.labels[a], minlength=5).max() / a.size for a in part.assignments]
    assert np.mean(fractions) > 0.5


def test_dirichlet_large_beta_approaches_iid(data):
    part = partition_dirichlet(data, 5, 1e6, 0)
    glob = data.label_counts() / len(data)
    for a in part.assignments:
        frac = np.bincount(data.labels[a], minlength=5) / a.size
        assert np.all(np.abs(frac - glob) < 0.05)


def test_dirichlet_rejects_bad_inputs(data):
    with pytest.raises(ValueError):
        partition_dirichlet(data, 10, 0.0, 0)
    tiny = Dataset(np.zeros((3, 1)), np.array([0, 1, 0]), 2)
    with pytest.raises(ValueError):
        partition_dirichlet(tiny, 4, 0.3, 0)


@pytest.mark.parametrize("labels_per_client", [1, 3, 5])
def test_labels_partition_has_exact_label_sets(data, labels_per_client):
    part = partition_by_labels(data, 20, labels_per_client, 2)
    _disjoint_cover(part, len(data))
    for a in part.assignments:
        assert np.unique(data.labels[a]).size == labels_per_client


def test_labels_partition_with_all_labels_covers_everything(data):
    part = partition_by_labels(data, 10, 5, 0)
    assert part.sizes.sum() == len(data)
    for a in part.assignments:
        assert set(np.unique(data.labels[a])) == set(range(5))


def test_labels_partition_rejects_too_many_labels(data):
    with pytest.raises(ValueError):
        partition_by_labels(data, 10, 6, 0)


def test_partition_invariants_are_enforced():
    with pytest.raises(ValueError):
        Partition((np.array([0, 1]), np.array([1, 2])))
    with pytest.raises(ValueError):
        Partition((np.array([0]), np.array([], dtype=np.int64)))


def test_make_partition_dispatch(data):
    assert make_partition(data, 5, "iid", 0).n_clients == 5
    with pytest.raises(ValueError):
        make_partition(data, 5, "shards", 0)
