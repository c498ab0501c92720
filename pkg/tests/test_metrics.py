import numpy as np
import pytest

from adaptagen.backends import MockClassifierBackend, MockFeatureBackend
from adaptagen.metrics import (
    CategoryMetrics,
    ClassProbabilities,
    FeatureStats,
    MetricReport,
    build_report,
    clip_score,
    feature_stats,
    fid,
    inception_score,
)
from adaptagen.selection import EmbeddingVector


def random_stats(rng, dim=16, n=200):
    samples = rng.normal(size=(n, dim)) @ rng.normal(size=(dim, dim)) + rng.normal(size=dim)
    return feature_stats(samples), samples


class TestFeatureStats:
    def test_identical_rows_zero_covariance(self):
        v = np.array([1.5, -2.0, 3.0])
        stats = feature_stats(np.tile(v, (10, 1)))
        assert np.allclose(stats.mean, v)
        assert np.allclose(stats.cov, 0.0)

    def test_hand_computed_unbiased(self):
        stats = feature_stats(np.array([[0.0], [2.0]]))
        assert stats.mean[0] == pytest.approx(1.0)
        assert stats.cov[0, 0] == pytest.approx(2.0)  # unbiased: /(N-1)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 4))
        a = feature_stats(x)
        b = feature_stats(x[rng.permutation(50)])
        assert np.allclose(a.mean, b.mean)
        assert np.allclose(a.cov, b.cov)

    def test_single_sample_fatal(self):
        with pytest.raises(ValueError, match="at least 2"):
            feature_stats(np.ones((1, 3)))

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ValueError, match="asymmetric"):
            FeatureStats(mean=[0.0, 0.0], cov=[[1.0, 0.5], [0.1, 1.0]], count=10)


class TestFid:
    def test_identical_stats_zero(self):
        rng = np.random.default_rng(1)
        stats, _ = random_stats(rng)
        assert fid(stats, stats) == pytest.approx(0.0, abs=1e-9)

    def test_univariate_mean_shift(self):
        a = FeatureStats(mean=[0.0], cov=[[1.0]], count=100)
        b = FeatureStats(mean=[1.0], cov=[[1.0]], count=100)
        assert fid(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_univariate_variance_change(self):
        a = FeatureStats(mean=[0.0], cov=[[1.0]], count=100)
        b = FeatureStats(mean=[0.0], cov=[[4.0]], count=100)
        # closed form: (sigma_a - sigma_b)^2 = (1 - 2)^2
        assert fid(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_univariate_closed_form_random(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            m1, m2 = rng.normal(size=2)
            s1, s2 = rng.uniform(0.2, 3.0, size=2)
            a = FeatureStats(mean=[m1], cov=[[s1**2]], count=10)
            b = FeatureStats(mean=[m2], cov=[[s2**2]], count=10)
            assert fid(a, b) == pytest.approx((m1 - m2) ** 2 + (s1 - s2) ** 2, abs=1e-8)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, _ = random_stats(rng)
        b, _ = random_stats(rng)
        assert abs(fid(a, b) - fid(b, a)) <= 1e-8

    def test_rotation_invariance(self):
        rng = np.random.default_rng(4)
        a, sa = random_stats(rng)
        b, sb = random_stats(rng)
        q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
        ra = feature_stats(sa @ q.T)
        rb = feature_stats(sb @ q.T)
        assert fid(ra, rb) == pytest.approx(fid(a, b), abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, _ = random_stats(rng, dim=6, n=40)
            b, _ = random_stats(rng, dim=6, n=40)
            assert fid(a, b) >= 0.0

    def test_dimension_mismatch(self):
        a = FeatureStats(mean=[0.0], cov=[[1.0]], count=10)
        b = FeatureStats(mean=[0.0, 0.0], cov=np.eye(2), count=10)
        with pytest.raises(ValueError, match="mismatch"):
            fid(a, b)


class TestInceptionScore:
    def test_uniform_rows_is_one(self):
        rows = np.full((50, 7), 1 / 7)
        mean, std = inception_score(rows, splits=10)
        assert mean == pytest.approx(1.0, abs=1e-9)
        assert std == pytest.approx(0.0, abs=1e-9)

    def test_balanced_one_hot_equals_class_count(self):
        rows = np.tile(np.eye(5), (10, 1))  # each split of 5 is balanced
        mean, _ = inception_score(rows, splits=10)
        assert mean == pytest.approx(5.0, abs=1e-6)

    def test_collapsed_one_hot_is_one(self):
        rows = np.zeros((40, 5))
        rows[:, 3] = 1.0
        mean, _ = inception_score(rows, splits=10)
        assert mean == pytest.approx(1.0, abs=1e-9)

    def test_bounds(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            k = int(rng.integers(2, 9))
            raw = rng.uniform(size=(60, k))
            rows = raw / raw.sum(axis=1, keepdims=True)
            mean, _ = inception_score(rows, splits=5)
            assert 1.0 - 1e-9 <= mean <= k + 1e-9

    def test_invalid_rows_fatal(self):
        rows = np.full((20, 4), 0.3)
        with pytest.raises(ValueError, match="sum to 1"):
            inception_score(rows)

    def test_too_few_rows_for_splits(self):
        rows = np.full((5, 2), 0.5)
        with pytest.raises(ValueError, match="at least 10"):
            inception_score(rows, splits=10)

    def test_class_probabilities_type(self):
        with pytest.raises(ValueError, match="nonnegative"):
            ClassProbabilities(rows=np.array([[1.2, -0.2]]))


class TestClipScore:
    def test_identical_pairs(self):
        rng = np.random.default_rng(7)
        vecs = [EmbeddingVector(rng.normal(size=8)) for _ in range(5)]
        assert clip_score(vecs, vecs) == pytest.approx(1.0)

    def test_orthogonal_pairs(self):
        imgs = [EmbeddingVector([1.0, 0.0]), EmbeddingVector([0.0, 1.0])]
        txts = [EmbeddingVector([0.0, 1.0]), EmbeddingVector([1.0, 0.0])]
        assert clip_score(imgs, txts) == pytest.approx(0.0, abs=1e-12)

    def test_two_pair_average(self):
        e1, e2 = EmbeddingVector([1.0, 0.0]), EmbeddingVector([0.0, 1.0])
        assert clip_score([e1, e1], [e1, e2]) == pytest.approx(0.5, abs=1e-12)

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(8)
        raw_imgs = [rng.normal(size=6) for _ in range(10)]
        raw_txts = [rng.normal(size=6) for _ in range(10)]
        base = clip_score(
            [EmbeddingVector(v) for v in raw_imgs],
            [EmbeddingVector(v) for v in raw_txts],
        )
        scaled = clip_score(
            [EmbeddingVector(13.0 * v) for v in raw_imgs],
            [EmbeddingVector(0.01 * v) for v in raw_txts],
        )
        assert scaled == pytest.approx(base, abs=1e-12)

    def test_length_mismatch(self):
        v = EmbeddingVector([1.0, 0.0])
        with pytest.raises(ValueError):
            clip_score([v, v], [v])

    def test_rescale_convention(self):
        e1, e2 = EmbeddingVector([1.0, 0.0]), EmbeddingVector([-1.0, 0.0])
        assert clip_score([e1, e1], [e1, e2], rescale=True) == pytest.approx(1.25)


class TestReport:
    def _metrics(self, fid_value):
        return CategoryMetrics(
            fid=fid_value, is_mean=2.0, is_std=0.1, clip_score=0.3,
            n_real=16, n_generated=64,
        )

    def test_overall_is_unweighted_mean(self):
        report = build_report({"a": self._metrics(10.0), "b": self._metrics(20.0)})
        assert report.overall["fid"] == pytest.approx(15.0)
        assert report.overall["clip_score"] == pytest.approx(0.3)

    def test_round_trip(self, tmp_path):
        report = build_report(
            {"a": self._metrics(1.0)}, metadata={"n_real": 16, "n_generated": 64}
        )
        path = tmp_path / "metrics.json"
        report.save(path)
        loaded = MetricReport.load(path)
        assert loaded.overall == report.overall
        assert loaded.per_category == report.per_category
        assert loaded.metadata == report.metadata


class TestMockBackends:
    def test_feature_backend_deterministic(self, dataset_root):
        path = dataset_root / "pizza" / "img000.png"
        a = MockFeatureBackend().features(path)
        b = MockFeatureBackend().features(path)
        assert np.array_equal(a, b)
        assert a.shape == (16,)

    def test_feature_backend_distinguishes_images(self, dataset_root):
        backend = MockFeatureBackend()
        a = backend.features(dataset_root / "pizza" / "img000.png")
        b = backend.features(dataset_root / "pizza" / "img001.png")
        assert not np.allclose(a, b)

    def test_classifier_rows_are_distributions(self, dataset_root):
        backend = MockClassifierBackend()
        probs = backend.class_probabilities(dataset_root / "pizza" / "img000.png")
        assert probs.shape == (8,)
        assert probs.sum() == pytest.approx(1.0)
        assert np.all(probs >= 0)
