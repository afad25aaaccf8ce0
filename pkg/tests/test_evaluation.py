import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from divelab.errors import ArgumentError
from divelab.evaluation import (CategoryPrototypes, ImageGroup, PrototypeClassifier,
                                build_prototypes, classify, classify_embeddings, contrast_report,
                                specificity_report, tier_label, tier_size)
from divelab.metrics import luminance, saturation
from divelab.rng import stream
from divelab.world import WorldConfig, render_exemplars


def protos2():
    return CategoryPrototypes(["a", "b"], [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])


@pytest.fixture(scope="module")
def exemplars():
    return render_exemplars(WorldConfig(size=12), 6, seed=1)


class TestClassify:
    def test_nearest(self):
        lab = classify_embeddings(np.array([[2.0, 1.0], [0.1, 3.0], [0.0, 0.0]]), protos2())
        assert lab.tolist() == [0, 1, -1]

    def test_tie_goes_to_lowest(self):
        assert classify_embeddings(np.array([[1.0, 1.0]]), protos2()).tolist() == [0]

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, scale):
        r = stream(seed, "cls")
        P = r.normal(size=(4, 6))
        prot = CategoryPrototypes(list("wxyz"), [p[None] / np.linalg.norm(p) for p in P])
        X = r.normal(size=(10, 6))
        np.testing.assert_array_equal(classify_embeddings(X, prot), classify_embeddings(scale * X, prot))

    def test_prototype_validation(self):
        with pytest.raises(ArgumentError):
            CategoryPrototypes(["a"], [np.array([[2.0, 0.0]])])
        with pytest.raises(ArgumentError):
            CategoryPrototypes(["a", "b"], [np.array([[1.0, 0.0]])])

    def test_exemplars_classify_as_themselves(self, small_extractor, exemplars):
        names = ["face", "place", "body", "word", "food"]
        prot = build_prototypes(small_extractor, {names[c]: v for c, v in exemplars.items()})
        for c, imgs in exemplars.items():
            assert (classify(imgs, prot, small_extractor) == c).all()

    def test_mean_mode(self, small_extractor, exemplars):
        prot = build_prototypes(small_extractor, [exemplars[c] for c in range(5)], mode="mean")
        assert all(len(v) == 1 for v in prot.vectors)
        with pytest.raises(ArgumentError):
            build_prototypes(small_extractor, [exemplars[0]], mode="median")

    def test_dedup(self, small_extractor, exemplars):
        twice = np.concatenate([exemplars[0], exemplars[0]])
        prot = build_prototypes(small_extractor, [twice])
        assert len(prot.vectors[0]) == len(exemplars[0])

    def test_estimator(self, small_extractor, exemplars):
        X = np.concatenate([exemplars[c] for c in range(5)])
        y = np.repeat(np.arange(5), len(exemplars[0]))
        est = PrototypeClassifier(extractor=small_extractor).fit(X, y)
        assert est.score(X, y) == 1.0
        assert clone(est).get_params()["mode"] == "all"


class TestSpecificity:
    def test_tiers(self):
        assert tier_size(0.1, 100) == 10 and tier_size(5, 100) == 5
        assert tier_label(0.1) == "top-10%" and tier_label(100) == "top-100"
        with pytest.raises(ArgumentError):
            tier_size(200, 100)
        with pytest.raises(ArgumentError):
            tier_size(1.5, 100)

    def test_report_counts(self, small_extractor, exemplars):
        prot = build_prototypes(small_extractor, [exemplars[c] for c in range(5)],
                                ["face", "place", "body", "word", "food"])
        # 6 place images then 4 food images, ranked in that order
        imgs = np.concatenate([exemplars[1], exemplars[4][:4]])
        rep = specificity_report([ImageGroup("place", imgs, 1)], prot, small_extractor,
                                 tiers=(0.5, 1.0, 3))
        assert rep.lookup("place", "top-50%") == 100.0
        assert rep.lookup("place", "top-100%") == 60.0
        assert rep.lookup("place", "top-3") == 100.0
        with pytest.raises(KeyError):
            rep.lookup("face", "top-3")
        assert rep.note

    def test_percent_semantics(self):
        # 68 of the top-100 images classified as the target -> 68.0
        from divelab.evaluation import SpecificityRow
        assert SpecificityRow("places", "top-100", "place", 100, 68, 0).percent == 68.0


class TestContrast:
    def _groups(self, seed):
        r = stream(seed, "groups")
        a = r.uniform(size=(30, 3, 6, 6))
        b = r.uniform(size=(25, 3, 6, 6)) * [[[0.3]], [[1.0]], [[1.0]]]
        return a, b

    def test_swap_negates(self):
        a, b = self._groups(0)
        ab = contrast_report(a, b, ["saturation", "luminance"], n_boot=300, seed=4)
        ba = contrast_report(b, a, ["saturation", "luminance"], n_boot=300, seed=4)
        for x, y in zip(ab, ba):
            assert x.difference == -y.difference
            assert x.ci_low == -y.ci_high and x.ci_high == -y.ci_low

    def test_identical_groups(self):
        a, _ = self._groups(1)
        row = contrast_report(a, a.copy(), ["saturation"], n_boot=200)[0]
        assert row.difference == 0.0 and row.ci_low == 0.0 and row.ci_high == 0.0
        assert not row.excludes_zero

    def test_detects_saturation_shift(self):
        a, b = self._groups(2)
        row = contrast_report(b, a, ["saturation"], n_boot=500)[0]
        assert row.mean_a == pytest.approx(saturation(b).mean())
        assert row.excludes_zero and row.ci_low > 0
        assert row.ci_low <= row.difference <= row.ci_high

    def test_deterministic(self):
        a, b = self._groups(3)
        assert contrast_report(a, b, n_boot=100, seed=8) == contrast_report(a, b, n_boot=100, seed=8)

    def test_embedding_metrics(self, small_extractor, exemplars):
        prot = build_prototypes(small_extractor, [exemplars[c] for c in range(5)],
                                ["face", "place", "body", "word", "food"])
        rows = contrast_report(exemplars[1], exemplars[4], ["prototype:place", "dispersion"],
                               small_extractor, prot, n_boot=100)
        assert rows[0].difference > 0
        assert 0 <= rows[1].mean_a <= 1

    def test_unknown_metric(self):
        a, b = self._groups(4)
        with pytest.raises(ArgumentError):
            contrast_report(a, b, ["sharpness"])
        with pytest.raises(ArgumentError):
            contrast_report(a[:0], b)


def test_metrics_hand_values():
    img = np.zeros((1, 3, 2, 2))
    img[0, 0] = 1.0  # pure red
    assert saturation(img)[0] == 1.0
    assert luminance(img)[0] == pytest.approx(0.299)
    gray = np.full((1, 3, 2, 2), 0.5)
    assert saturation(gray)[0] == 0.0
