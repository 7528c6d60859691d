import numpy as np
import pytest

from fusebench.clustering import aggregate_cluster, ahc, cosine, partition_union, trial_score
from fusebench.core import DataError


def mixture(rng, n_ids=3, per=5, dim=16, noise=0.1):
    protos = rng.normal(size=(n_ids, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    labels = rng.permutation(np.repeat(np.arange(n_ids), per))
    x = protos[labels] + noise * rng.normal(size=(labels.size, dim)) / np.sqrt(dim)
    return x, labels


def truth(labels):
    return {tuple(int(i) for i in np.flatnonzero(labels == c)) for c in np.unique(labels)}


def test_hand_example():
    x = np.array([[1.0, 0.0], [0.99, 0.1], [0.0, 1.0], [0.1, 0.99]])
    assert ahc(x, k=2).clusters == ((0, 1), (2, 3))
    assert ahc(x, threshold=0.5).clusters == ((0, 1), (2, 3))
    assert ahc(x, threshold=-1.0).clusters == ((0, 1, 2, 3),)
    assert ahc(x, threshold=1.01).clusters == ((0,), (1,), (2,), (3,))


def test_average_linkage_not_single():
    # single linkage would chain 0-1-2; average linkage prefers the tight pair first
    x = np.array([[1.0, 0.0], [0.8, 0.6], [0.28, 0.96], [0.6, 0.8]])
    p = ahc(x, k=2)
    assert len(p) == 2
    assert sorted(i for c in p.clusters for i in c) == [0, 1, 2, 3]


def test_count_mode_recovers_mixtures():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, labels = mixture(rng)
        assert set(ahc(x, k=3).clusters) == truth(labels)


def test_partition_union_contains_truth_and_dedups():
    rng = np.random.default_rng(1)
    x, labels = mixture(rng)
    cs = partition_union(x, 3)
    assert truth(labels) <= set(cs.clusters)
    assert len(set(cs.clusters)) == len(cs.clusters)
    assert cs.clusters[0] == tuple(range(15))


def test_partition_union_k1():
    x = np.eye(3)
    assert partition_union(x, 1).clusters == ((0, 1, 2),)


def test_errors():
    with pytest.raises(DataError):
        ahc(np.eye(3))
    with pytest.raises(DataError):
        ahc(np.eye(3), threshold=0.5, k=2)
    with pytest.raises(DataError):
        ahc(np.eye(3), k=4)
    with pytest.raises(DataError):
        ahc(np.array([[0.0, 0.0], [1.0, 0.0]]), k=1)
    with pytest.raises(DataError):
        partition_union(np.eye(2), 3)


def test_trial_score_takes_max():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    score, idx = trial_score(np.array([0.0, 2.0]), x, [(0,), (1,)])
    assert idx == 1 and score == pytest.approx(1.0)


def test_aggregate_with_qualities():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    np.testing.assert_allclose(aggregate_cluster(x, (0, 1), [0.75, 0.25, 1.0]), [0.75, 0.25])
    np.testing.assert_allclose(aggregate_cluster(x, (0, 1)), [0.5, 0.5])


def test_cosine_zero_vector():
    with pytest.raises(DataError):
        cosine([0.0, 0.0], [1.0, 0.0])


def test_cosine_examples():
    assert cosine([1, 0], [1, 0]) == 1.0
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 1], [1, 0]) == pytest.approx(np.sqrt(2) / 2, abs=1e-15)


def test_threshold_examples():
    assert ahc(np.array([[1.0, 0.0]] * 3), threshold=0.5).clusters == ((0, 1, 2),)
    x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert ahc(x, threshold=0.5).clusters == ((0, 1), (2,))
    assert partition_union(x, 2).clusters == ((0, 1, 2), (0, 1), (2,))


def test_orthogonal_prototypes_recovered():
    rng = np.random.default_rng(12)
    protos = np.eye(8)[:3]
    labels = rng.integers(0, 3, 20)
    labels[:3] = [0, 1, 2]
    x = protos[labels] + 0.1 * rng.normal(size=(20, 8))
    assert set(ahc(x, k=3).clusters) == truth(labels)


def test_aggregate_examples():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(aggregate_cluster(x, (1,)), [0.0, 1.0])
    np.testing.assert_allclose(aggregate_cluster(x, (0, 1), [0.9, 1e-9]), [1.0, 0.0], rtol=1e-5, atol=2e-6)


def test_trial_score_examples():
    sims = iter([0.2, 0.9])
    score, idx = trial_score(np.zeros(2), np.eye(2), [(0,), (1,)], backend=lambda a, b: next(sims))
    assert (score, idx) == (0.9, 1)
    x = np.array([[1.0, 1.0], [1.0, 0.0]])
    score, idx = trial_score(np.array([1.0, 0.0]), x, [(0, 1)])
    assert score == pytest.approx(cosine([1.0, 0.0], x.mean(axis=0)))


def test_enrolled_identity_cluster_wins():
    from fusebench.synth import SynthConfig, gen_identities, gen_observations

    cfg = SynthConfig(n_identities=2, p_degraded=0.0)
    rng = np.random.default_rng(13)
    protos = gen_identities(cfg, "speaker", rng)
    obs = gen_observations(cfg, protos, "speaker", rng, per_identity=4)
    x = np.vstack([e.values for e in obs])
    cs = partition_union(x, 2)
    _, idx = trial_score(protos[0], x, cs)
    assert cs.clusters[idx] == (0, 1, 2, 3)
