import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from divelab.errors import ArgumentError, ConfigError, ConsistencyError
from divelab.metrics import saturation
from divelab.subject import (SubjectConfig, SubjectDataset, VoxelSet, average_repeats,
                             compute_tstats, make_subject, normalize_sessions, pooled_t,
                             preferred_mask, select_voxels, simulate_recordings)

# decimal oracle for the hand example below
T_EXAMPLE = -3.6742346141747671


@pytest.fixture(scope="module")
def subject(small_world, small_extractor):
    cfg = SubjectConfig(region_size=12, n_nonselective=10)
    return make_subject(small_world, small_extractor, cfg, seed=2)


@pytest.fixture(scope="module")
def raw(subject, small_world):
    return simulate_recordings(subject, small_world, sessions=3, repeats=2, seed=5)


class TestGroundTruth:
    def test_layout(self, subject):
        assert subject.N == 5 * 12 + 10
        assert (subject.region[:12] == 0).all() and (subject.region[-10:] == -1).all()
        food = subject.region_voxels(4)
        assert set(subject.subcluster[food]) == {0, 1}
        assert (subject.subcluster[subject.region != 4] == -1).all()

    def test_subcluster_separation(self, subject):
        d = subject.subcluster_directions[4]
        assert np.degrees(np.arccos(np.clip(d[0] @ d[1], -1, 1))) == pytest.approx(60.0, abs=1e-9)
        # both sit at half the separation from the prototype
        np.testing.assert_allclose(d @ subject.prototypes[4], np.cos(np.radians(30)), atol=1e-12)

    def test_saturation_axis(self, subject, small_world, small_extractor):
        food = small_world.labels == 4
        E = small_extractor.normalized(small_world.images[food])
        d = subject.subcluster_directions[4]
        sat = saturation(small_world.images[food])
        # sub-cluster 0 prefers saturated food images
        r = stats.spearmanr((E @ d[0]) - (E @ d[1]), sat).correlation
        assert r > 0.3

    def test_rows_concentrate_near_centers(self, subject):
        face = subject.region_voxels(0)
        U = subject.W[face] / np.linalg.norm(subject.W[face], axis=1, keepdims=True)
        K = U.shape[1]
        # vMF mean resultant length A_K(kappa) = I_{K/2}(kappa) / I_{K/2-1}(kappa)
        expected = special.ive(K / 2, 50.0) / special.ive(K / 2 - 1, 50.0)
        assert np.mean(U @ subject.prototypes[0]) == pytest.approx(expected, abs=0.03)

    def test_zero_angle_allowed(self, small_world, small_extractor):
        s = make_subject(small_world, small_extractor,
                         SubjectConfig(region_size=4, n_nonselective=0, subcluster_angle=0.0), 1)
        d = s.subcluster_directions[4]
        np.testing.assert_allclose(d[0], d[1], atol=1e-12)

    @pytest.mark.parametrize("bad", [dict(subcluster_angle=180.0), dict(kappa=0.0),
                                     dict(subclusters={"food": 1}), dict(noise_ratio=-1.0)])
    def test_config_rejected(self, bad):
        with pytest.raises(ConfigError):
            SubjectConfig(**bad).validate()

    def test_deterministic(self, small_world, small_extractor, subject):
        again = make_subject(small_world, small_extractor,
                             SubjectConfig(region_size=12, n_nonselective=10), seed=2)
        np.testing.assert_array_equal(again.W, subject.W)


class TestRecordings:
    def test_manifest(self, raw, small_world):
        n = len(small_world)
        assert raw.betas.shape == (70, 2 * n)
        assert np.bincount(raw.column_image).tolist() == [2] * n
        assert raw.n_sessions == 3
        assert raw.heldout.sum() == round(0.1 * n)

    def test_normalized_sessions_are_z_scores(self, raw):
        z = normalize_sessions(raw)
        for s in range(z.n_sessions):
            block = z.betas[:, z.column_session == s]
            np.testing.assert_allclose(block.mean(axis=1), 0.0, atol=1e-12)
            np.testing.assert_allclose(block.std(axis=1), 1.0, atol=1e-12)

    def test_zero_variance_flagged(self, raw):
        B = raw.betas.copy()
        B[3, raw.column_session == 1] = 7.0
        from dataclasses import replace
        z = normalize_sessions(replace(raw, betas=B))
        assert z.flags[3, 1] and z.flags.sum() == 1
        assert (z.betas[3, z.column_session == 1] == 0).all()
        t = compute_tstats(average_repeats(z), 0)
        assert np.isnan(t[3])

    def test_average_repeats(self, raw):
        avg = average_repeats(raw)
        i = 5
        cols = np.flatnonzero(raw.column_image == i)
        np.testing.assert_allclose(avg.betas[:, i], raw.betas[:, cols].mean(axis=1), rtol=1e-14)
        assert avg.averaged and avg.betas.shape[1] == len(raw.image_ids)

    def test_missing_image(self, raw):
        with pytest.raises(ConsistencyError):
            average_repeats(SubjectDataset(raw.images[:3], ["a", "b", "c"], raw.image_categories[:3],
                                           raw.category_names, np.zeros((2, 2)), [0, 1]))

    def test_bad_manifest(self, raw):
        with pytest.raises(ConsistencyError):
            SubjectDataset(raw.images[:1], ["a"], raw.image_categories[:1], raw.category_names,
                           np.zeros((2, 2)), [0, 1])

    def test_split_requires_average(self, raw):
        with pytest.raises(ArgumentError):
            raw.training_arrays()
        avg = average_repeats(raw)
        tr_x, tr_y = avg.training_arrays()
        he_x, he_y = avg.heldout_arrays()
        assert len(tr_x) + len(he_x) == len(avg.image_ids)
        assert tr_y.shape[1] == avg.n_voxels


class TestTStats:
    def test_hand_value(self):
        assert pooled_t([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]) == pytest.approx(T_EXAMPLE, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(n1=st.integers(2, 12), n2=st.integers(2, 12), seed=st.integers(0, 99999))
    def test_matches_scipy(self, n1, n2, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=n1), r.normal(1, 2, size=n2)
        assert pooled_t(a, b) == pytest.approx(stats.ttest_ind(a, b).statistic, rel=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 99999))
    def test_antisymmetric(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=5), r.normal(size=7)
        assert pooled_t(a, b) == pytest.approx(-pooled_t(b, a), abs=1e-12)

    def test_too_small(self):
        with pytest.raises(ArgumentError):
            pooled_t([1.0], [1.0, 2.0])

    def test_needs_average(self, raw):
        with pytest.raises(ArgumentError):
            compute_tstats(raw, 0)

    def test_planted_regions_selected(self, raw):
        avg = average_repeats(normalize_sessions(raw))
        T = np.stack([compute_tstats(avg, c) for c in range(5)])
        for c in range(5):
            sel = select_voxels(T[c], 5.0, preferred_mask(T, c))
            assert set(sel.indices) <= set(range(12 * c, 12 * c + 12))
            assert len(sel) >= 6


class TestSelection:
    def test_threshold_and_mask(self):
        t = np.array([6.0, 1.0, np.nan, 5.0, 7.0])
        assert select_voxels(t, 5.0).indices.tolist() == [0, 4]
        sel = select_voxels(t, 2.0, VoxelSet([3, 4], {"name": "m"}))
        assert sel.indices.tolist() == [3, 4] and sel.provenance["mask"] == "m"

    def test_empty_warns(self):
        with pytest.warns(RuntimeWarning):
            assert len(select_voxels(np.zeros(3), 1.0)) == 0

    def test_preferred_mask(self):
        T = np.array([[3.0, 1.0, np.nan], [2.0, 4.0, np.nan]])
        assert preferred_mask(T, 0).indices.tolist() == [0]
        assert preferred_mask(T, 1).indices.tolist() == [1]

    def test_voxel_set(self):
        assert VoxelSet([3, 1]).indices.tolist() == [1, 3]
        with pytest.raises(ArgumentError):
            VoxelSet([1, 1])
        with pytest.raises(ArgumentError):
            VoxelSet([0, 5]).check_range(5)
