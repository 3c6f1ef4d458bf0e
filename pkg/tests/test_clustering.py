import itertools

import numpy as np
import pytest

from freda_lab.clustering import (
    FeatureRepository,
    assign,
    kmeans_plusplus,
    kmeans_step,
    objective,
    purity,
)
from freda_lab.core import Rng


def blobs(seed, centers, n_each, scale=0.1):
    g = np.random.default_rng(seed)
    pts = [c + scale * g.normal(size=(n_each, len(c))) for c in np.asarray(centers, float)]
    return np.concatenate(pts), np.repeat(np.arange(len(centers)), n_each)


class TestRepository:
    def test_ring_overflow(self):
        r = FeatureRepository(3)
        r.push([[1.0], [2.0], [3.0], [4.0]])
        assert r.array().ravel().tolist() == [2.0, 3.0, 4.0]

    def test_under_capacity_in_order(self):
        r = FeatureRepository(5)
        r.push([[1.0, 0], [2.0, 0]])
        r.push([[3.0, 0]])
        assert r.array()[:, 0].tolist() == [1.0, 2.0, 3.0] and len(r) == 3

    def test_full_batch_replaces(self):
        r = FeatureRepository(3)
        r.push([[9.0], [9.0]])
        r.push([[1.0], [2.0], [3.0]])
        assert r.array().ravel().tolist() == [1.0, 2.0, 3.0]

    def test_matches_list_oracle_over_many_pushes(self):
        g = np.random.default_rng(0)
        r = FeatureRepository(7)
        ref = []
        for _ in range(30):
            batch = g.normal(size=(int(g.integers(1, 10)), 2))
            r.push(batch)
            ref = (ref + list(batch))[-7:]
            assert np.array_equal(r.array(), np.array(ref))
            assert len(r) <= 7

    def test_dimension_mismatch(self):
        r = FeatureRepository(3)
        r.push([[1.0, 2.0]])
        with pytest.raises(ValueError):
            r.push([[1.0, 2.0, 3.0]])


class TestAssign:
    def test_tie_goes_to_lowest_index(self):
        assert assign([[0.5, 0.0]], [[0.0, 0.0], [1.0, 0.0]]).tolist() == [0]
        assert assign([[0.0, 0.0]], [[5.0, 5.0], [1.0, 0.0], [-1.0, 0.0]]).tolist() == [1]

    def test_point_at_centroid(self):
        c = [[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0]]
        assert assign(c, c).tolist() == [0, 1, 2]

    def test_brute_force_oracle(self):
        g = np.random.default_rng(4)
        x, c = g.normal(size=(100, 5)), g.normal(size=(6, 5))
        ref = [min(range(6), key=lambda k: (sum((x[i] - c[k]) ** 2), k)) for i in range(100)]
        assert assign(x, c).tolist() == ref


class TestKmeans:
    def test_k1_mean_and_variance(self):
        x = np.random.default_rng(0).normal(size=(50, 3))
        s = kmeans_step(x, 1, None, Rng(0))
        assert np.allclose(s.centroids[0], x.mean(axis=0))
        assert s.objective_trace[-1] == pytest.approx(x.var(axis=0).sum() * 50, rel=1e-12)

    def test_four_point_example_matches_enumeration(self):
        x = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], float)
        best = None
        for lab in itertools.product([0, 1], repeat=4):
            lab = np.array(lab)
            if len(set(lab)) < 2:
                continue
            cents = np.array([x[lab == k].mean(axis=0) for k in (0, 1)])
            val = objective(x, cents, lab)
            if best is None or val < best[0]:
                best = (val, lab)
        s = kmeans_step(x, 2, None, Rng(1), n_current=4)
        assert s.objective_trace[-1] == pytest.approx(best[0])
        assert s.labels[0] == s.labels[1] != s.labels[2] == s.labels[3]
        cents = sorted(map(tuple, s.centroids))
        assert cents == [(0.0, 0.5), (10.0, 0.5)]

    def test_warm_start_fixed_point(self):
        x, _ = blobs(0, [[0, 0], [5, 5], [0, 5]], 30)
        s1 = kmeans_step(x, 3, None, Rng(0))
        s2 = kmeans_step(x, 3, s1, Rng(0))
        assert s2.iterations == 1 and s2.movement < 1e-6
        assert np.array_equal(s1.centroids, s2.centroids)

    def test_objective_non_increasing(self):
        x = np.random.default_rng(7).normal(size=(200, 4))
        for seed in range(5):
            s = kmeans_step(x, 5, None, Rng(seed), n_init=1)
            tr = s.objective_trace
            assert all(b <= a + 1e-9 * a for a, b in zip(tr, tr[1:]))

    def test_labels_for_current_vectors(self):
        repo = FeatureRepository(100)
        x, y = blobs(0, [[0, 0], [8, 0]], 20)
        repo.push(x)
        repo.push([[8.1, 0.0], [0.1, 0.2], [7.9, 0.1]])
        s = kmeans_step(repo, 2, None, Rng(0))
        assert len(s.labels) == 3
        assert s.labels[0] == s.labels[2] != s.labels[1]

    def test_determinism(self):
        x = np.random.default_rng(1).normal(size=(120, 3))
        a = kmeans_step(x, 4, None, Rng(3))
        b = kmeans_step(x, 4, None, Rng(3))
        assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.labels, b.labels)

    def test_empty_cluster_repaired(self):
        x = np.array([[0.0], [0.0], [0.0], [10.0], [11.0]])
        from freda_lab.clustering import ClusterState

        state = ClusterState(centroids=np.array([[0.0], [100.0], [10.5]]), initialized=True)
        s = kmeans_step(x, 3, state, Rng(0), n_current=5)
        assert len(np.unique(s.labels)) == 3

    def test_stationary_drift_vanishes(self):
        # a fixed 256-point mixture cycled through the ring in batches of 32
        g = np.random.default_rng(5)
        centers = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
        mixture = centers[g.integers(0, 3, 256)] + 0.3 * g.normal(size=(256, 2))
        repo = FeatureRepository(256)
        state = None
        moves = []
        for t in range(60):
            repo.push(mixture[(32 * t) % 256 : (32 * t) % 256 + 32])
            prev = None if state is None else state.centroids.copy()
            state = kmeans_step(repo, 3, state, Rng(0))
            if prev is not None:
                moves.append(np.linalg.norm(state.centroids - prev) / np.linalg.norm(prev))
        assert max(moves[49:]) < 1e-3
        owner = [int(np.argmin(((centers - c) ** 2).sum(1))) for c in state.centroids]
        assert sorted(owner) == [0, 1, 2]

    def test_errors(self):
        with pytest.raises(ValueError):
            kmeans_step(np.zeros((2, 3)), 3, None, Rng(0))
        x = np.zeros((10, 2))
        s = kmeans_step(np.random.default_rng(0).normal(size=(10, 3)), 2, None, Rng(0))
        with pytest.raises(ValueError):
            kmeans_step(x, 2, s, Rng(0))

    def test_plusplus_picks_k_distinct_seeds(self):
        x, _ = blobs(2, [[0, 0], [10, 0], [0, 10], [10, 10]], 25, scale=0.05)
        c = kmeans_plusplus(x, 4, Rng(0))
        owner = {(round(p[0] / 10), round(p[1] / 10)) for p in c}
        assert len(owner) == 4


class TestPurity:
    def test_relabeled_perfect(self):
        assert purity([2, 2, 0, 0, 1], [0, 0, 1, 1, 2]) == 1.0

    def test_mixed_cluster_half(self):
        assert purity([0, 0, 0, 0], [1, 1, 2, 2]) == 0.5

    def test_random_baseline(self):
        g = np.random.default_rng(0)
        p = purity(g.integers(0, 4, 10_000), np.repeat(np.arange(4), 2500))
        assert 0.25 <= p < 0.30

    def test_errors(self):
        with pytest.raises(ValueError):
            purity([], [])
        with pytest.raises(ValueError):
            purity([0, 1], [0])
