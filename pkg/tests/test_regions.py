import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import vonmises_fisher
from sklearn.base import clone
from sklearn.metrics import adjusted_rand_score

from divelab.errors import ArgumentError
from divelab.regions import (RankedImages, SphericalKMeans, cluster_gap, cosine_to_center,
                             normalize_rows, rank_images, silhouette_report, vmf_cluster)
from divelab.rng import stream


def two_directions(n, angle_deg, kappa, dim, seed):
    r = stream(seed, "dirs")
    p = np.zeros(dim)
    p[0] = 1.0
    q = np.zeros(dim)
    a = np.radians(angle_deg)
    q[0], q[1] = np.cos(a), np.sin(a)
    labels = np.arange(n) % 2
    X = np.stack([np.asarray(vonmises_fisher((p, q)[l], kappa).rvs(random_state=r)).ravel()
                  for l in labels])
    return X / np.linalg.norm(X, axis=1, keepdims=True), labels


class TestNormalizeRows:
    def test_hand_value_and_exclusion(self):
        rows = normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]]))
        np.testing.assert_allclose(rows.unit[0], [0.6, 0.8], atol=1e-15)
        assert rows.excluded.tolist() == [1] and rows.kept.tolist() == [0, 2]

    def test_all_degenerate(self):
        with pytest.raises(ArgumentError):
            normalize_rows(np.zeros((3, 2)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_unit_norms(self, seed):
        W = stream(seed, "rows").normal(size=(7, 5)) * 10.0 ** stream(seed, "s").uniform(-3, 3, (7, 1))
        assert np.all(np.abs(np.linalg.norm(normalize_rows(W).unit, axis=1) - 1) <= 1e-12)


class TestVMF:
    def test_identical_k1(self):
        v = np.array([0.6, 0.8])
        m = vmf_cluster(np.tile(v, (5, 1)), k=1)
        np.testing.assert_allclose(m.centers[0], v, atol=1e-15)
        assert m.objective == pytest.approx(5.0, abs=1e-12)

    def test_orthogonal_bundles(self):
        r = stream(0, "bundles")
        base = np.eye(8)[:2]
        X = np.concatenate([base[0] + 0.05 * r.normal(size=(50, 8)) * [0, 0, 1, 1, 1, 1, 1, 1],
                            base[1] + 0.05 * r.normal(size=(50, 8)) * [0, 0, 1, 1, 1, 1, 1, 1]])
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        labels = np.repeat([0, 1], 50)
        assert adjusted_rand_score(labels, vmf_cluster(X, 2, seed=1).assignments) == 1.0

    def test_sixty_degrees_kappa_50(self):
        X, labels = two_directions(500, 60.0, 50.0, 64, seed=2)
        assert adjusted_rand_score(labels, vmf_cluster(X, 2, seed=0).assignments) >= 0.95

    def test_objective_non_decreasing(self):
        X, _ = two_directions(200, 40.0, 20.0, 16, seed=3)
        m = vmf_cluster(X, 3, seed=4)
        assert np.all(np.diff(m.history) >= -1e-9)

    def test_fixed_point_stable(self):
        X, _ = two_directions(120, 60.0, 30.0, 16, seed=5)
        m = vmf_cluster(X, 2, seed=0)
        again = np.argmax(X @ m.centers.T, axis=1)
        np.testing.assert_array_equal(again, m.assignments)

    def test_deterministic(self):
        X, _ = two_directions(100, 60.0, 30.0, 16, seed=6)
        a, b = vmf_cluster(X, 3, seed=9), vmf_cluster(X, 3, seed=9)
        np.testing.assert_array_equal(a.assignments, b.assignments)
        np.testing.assert_array_equal(a.centers, b.centers)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_positive_rescaling_invariant(self, seed):
        X, _ = two_directions(40, 60.0, 30.0, 8, seed=7)
        scale = stream(seed, "scale").uniform(0.01, 100.0, size=(40, 1))
        a = vmf_cluster(normalize_rows(X).unit, 2, seed=0).assignments
        b = vmf_cluster(normalize_rows(X * scale).unit, 2, seed=0).assignments
        np.testing.assert_array_equal(a, b)

    def test_empty_cluster_reseeded(self):
        # one far outlier plus a tight bundle; k=3 forces a cluster to empty out
        X = np.array([[1.0, 0.0, 0.0]] * 6 + [[0.999, 0.0447, 0.0]] + [[0.0, 0.0, 1.0]])
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        m = vmf_cluster(X, 3, seed=0, n_restarts=3)
        assert len(set(m.assignments.tolist())) == 3

    def test_preconditions(self):
        with pytest.raises(ArgumentError):
            vmf_cluster(np.array([[2.0, 0.0], [0.0, 1.0]]), 2)
        with pytest.raises(ArgumentError):
            vmf_cluster(np.array([[1.0, 0.0], [1.0, 0.0]]), 2)
        with pytest.raises(ArgumentError):
            vmf_cluster(np.eye(2), 0)


class TestGap:
    @pytest.mark.parametrize("c2,gap", [([1.0, 0.0], 0.0), ([0.0, 1.0], 1.0), ([-1.0, 0.0], 2.0)])
    def test_values(self, c2, gap):
        assert cluster_gap(np.array([[1.0, 0.0], c2]))[0, 1] == pytest.approx(gap, abs=1e-15)

    def test_k1(self):
        with pytest.raises(ArgumentError):
            cluster_gap(np.array([[1.0, 0.0]]))

    def test_cosine_to_center(self):
        X, _ = two_directions(50, 60.0, 50.0, 8, seed=8)
        m = vmf_cluster(X, 2)
        c = cosine_to_center(X, m)
        assert c.sum() == pytest.approx(m.objective, rel=1e-12)


class TestEstimator:
    def test_labels_mark_excluded(self):
        X, labels = two_directions(60, 90.0, 100.0, 8, seed=9)
        X = np.concatenate([X, np.zeros((1, 8))])
        est = SphericalKMeans(n_clusters=2).fit(X)
        assert est.labels_[-1] == -1
        assert adjusted_rand_score(labels, est.labels_[:-1]) == 1.0
        np.testing.assert_array_equal(est.predict(X), est.labels_)
        assert clone(est).get_params()["n_clusters"] == 2

    def test_silhouette(self):
        X, _ = two_directions(80, 90.0, 100.0, 8, seed=10)
        rep = silhouette_report(X, ks=(2, 3))
        assert rep[2] > rep[3]


class TestRanking:
    def test_hand_example(self):
        V = np.array([[0.2], [0.9], [0.5]])
        r = rank_images(V, ["a", "b", "c"], [0], 2)
        assert r.ids == ["b", "c"]
        assert rank_images(V, ["a", "b", "c"], [0], 1).ids == ["b"]

    def test_ties_by_id(self):
        V = np.array([[1.0], [1.0], [2.0]])
        assert rank_images(V, ["z", "a", "m"], [0], 3).ids == ["m", "a", "z"]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), shift=st.floats(-100, 100))
    def test_shift_invariant(self, seed, shift):
        V = np.round(stream(seed, "rank").normal(size=(20, 4)), 3)
        ids = [f"i{j:02d}" for j in range(20)]
        assert rank_images(V, ids, [1, 2], 10).ids == rank_images(V + shift, ids, [1, 2], 10).ids

    def test_preconditions(self):
        V = np.zeros((3, 2))
        with pytest.raises(ArgumentError):
            rank_images(V, ["a", "b", "c"], [], 1)
        with pytest.raises(ArgumentError):
            rank_images(V, ["a", "b", "c"], [0], 4)
        with pytest.raises(ArgumentError):
            RankedImages(["a", "a"], np.zeros(2), "recorded")

    def test_rows(self):
        r = rank_images(np.array([[0.1], [0.3]]), ["a", "b"], [0], 2)
        assert r.rows() == [(1, "b", 0.3), (2, "a", 0.1)]
