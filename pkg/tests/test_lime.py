import numpy as np
import pytest

from facexplain.gateway import OracleSpec, make_oracle
from facexplain.lime import (
    LimeParams,
    SurrogateError,
    explain_lime,
    fit_surrogate,
    kernel_weight,
    perturb,
    sample_masks,
)
from facexplain.segmentation import SegmentationMap


def grid_segmentation(h, w, rows, cols):
    """Hand-built rectangular segmentation, labels row-major."""
    labels = np.zeros((h, w), dtype=np.int32)
    ys = np.linspace(0, h, rows + 1).astype(int)
    xs = np.linspace(0, w, cols + 1).astype(int)
    r = 0
    for i in range(rows):
        for j in range(cols):
            labels[ys[i]:ys[i + 1], xs[j]:xs[j + 1]] = r
            r += 1
    return SegmentationMap(labels=labels, region_count=rows * cols)


def brute_force_weighted_lsq(masks, weights, targets, ridge):
    """Independent oracle: assemble the full normal equations from scratch."""
    n, r = masks.shape
    design = np.hstack([np.ones((n, 1)), masks])
    sw = np.sqrt(weights)
    a = design * sw[:, None]
    b = targets * sw
    if ridge > 0:
        a = np.vstack([a, np.sqrt(ridge) * np.hstack([np.zeros((r, 1)), np.eye(r)])])
        b = np.concatenate([b, np.zeros(r)])
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    return sol[1:], sol[0]


class TestSampleMasks:
    def test_single_sample_is_all_ones(self):
        masks = sample_masks(5, 1, seed=0)
        np.testing.assert_array_equal(masks, np.ones((1, 5)))

    def test_keep_frequency_half(self):
        masks = sample_masks(8, 10000, seed=3)
        freq = masks.mean(axis=0)
        assert np.all(np.abs(freq - 0.5) <= 0.02)

    def test_seed_determinism(self):
        np.testing.assert_array_equal(sample_masks(10, 50, seed=9), sample_masks(10, 50, seed=9))


class TestPerturb:
    def setup_method(self):
        self.seg = grid_segmentation(6, 6, 2, 3)
        self.img = np.random.default_rng(0).random((6, 6, 3))

    def test_all_ones_identity(self):
        np.testing.assert_array_equal(perturb(self.img, self.seg, np.ones(6)), self.img)

    def test_all_zeros_constant(self):
        out = perturb(self.img, self.seg, np.zeros(6), color=0.0)
        np.testing.assert_array_equal(out, np.zeros_like(self.img))

    def test_single_region_off(self):
        z = np.ones(6)
        z[2] = 0
        out = perturb(self.img, self.seg, z)
        region = self.seg.labels == 2
        assert (out[region] == 0).all()
        np.testing.assert_array_equal(out[~region], self.img[~region])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            perturb(self.img, self.seg, np.ones(5))


class TestKernelWeight:
    def test_unperturbed_weight_one(self):
        assert kernel_weight(np.ones(12), 0.25) == pytest.approx(1.0, abs=1e-12)

    def test_half_on_frozen_value(self):
        # exp(-(1 - sqrt(0.5))^2 / 0.25^2), evaluated independently
        z = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=float)
        assert kernel_weight(z, 0.25) == pytest.approx(0.25345144771897454, rel=1e-9)

    def test_zero_vector_frozen_value(self):
        assert kernel_weight(np.zeros(8), 0.25) == pytest.approx(1.1253517471925912e-07, rel=1e-9)


class TestFitSurrogate:
    def test_exhaustive_recovery_exact(self):
        rng = np.random.default_rng(4)
        w_true = rng.normal(size=8)
        masks = np.array([[(i >> b) & 1 for b in range(8)] for i in range(256)], dtype=float)
        targets = masks @ w_true + 0.37
        fit = fit_surrogate(masks, np.ones(256), targets, ridge=0.0)
        np.testing.assert_allclose(fit.coefficients, w_true, atol=1e-6)
        assert fit.intercept == pytest.approx(0.37, abs=1e-6)

    def test_matches_independent_solver_with_weights(self):
        rng = np.random.default_rng(5)
        masks = (rng.random((60, 6)) < 0.5).astype(float)
        masks[0] = 1
        weights = rng.random(60) + 0.05
        targets = rng.random(60)
        for ridge in (0.0, 1.0, 17.5):
            fit = fit_surrogate(masks, weights, targets, ridge)
            w_ref, b_ref = brute_force_weighted_lsq(masks, weights, targets, ridge)
            np.testing.assert_allclose(fit.coefficients, w_ref, atol=1e-8)
            assert fit.intercept == pytest.approx(b_ref, abs=1e-8)

    def test_constant_targets_no_signal(self):
        masks = sample_masks(5, 64, seed=1)
        fit = fit_surrogate(masks, np.ones(64), np.full(64, 0.42), ridge=1.0)
        np.testing.assert_allclose(fit.coefficients, 0.0, atol=1e-10)
        assert fit.intercept == pytest.approx(0.42, abs=1e-10)

    def test_huge_ridge_shrinks(self):
        rng = np.random.default_rng(6)
        masks = (rng.random((200, 4)) < 0.5).astype(float)
        weights = rng.random(200) + 0.1
        targets = rng.random(200)
        fit = fit_surrogate(masks, weights, targets, ridge=1e9)
        assert np.linalg.norm(fit.coefficients) <= 1e-3
        assert fit.intercept == pytest.approx(np.average(targets, weights=weights), abs=1e-3)

    def test_rank_deficient_at_zero_ridge(self):
        masks = (np.random.default_rng(7).random((40, 3)) < 0.5).astype(float)
        masks = np.hstack([masks, masks[:, :1]])  # duplicated region column
        with pytest.raises(SurrogateError, match="ridge"):
            fit_surrogate(masks, np.ones(40), np.zeros(40), ridge=0.0)


class TestExplainLime:
    def test_region_indicator_localization(self):
        seg = grid_segmentation(48, 48, 3, 4)
        target_region = 5
        mask = seg.labels == target_region
        clf = make_oracle(OracleSpec(kind="region-indicator", masks=[mask]),
                          ["region", "background"], (48, 48))
        img = np.full((48, 48), 0.85)
        result = explain_lime(img, seg, clf, class_index=0,
                              params=LimeParams(n_samples=600, seed=11))
        per_region = np.array([result.relevance[seg.labels == r].max()
                               for r in range(seg.region_count)])
        assert np.argmax(per_region) == target_region
        others = np.delete(per_region, target_region)
        assert others.max() <= 0.1 * per_region[target_region]

    def test_constant_classifier_zero_map(self):
        seg = grid_segmentation(24, 24, 2, 2)
        w = np.zeros((24, 24))
        clf = make_oracle(OracleSpec(kind="linear-weights", weights=w), ["a", "b"], (24, 24))
        result = explain_lime(np.full((24, 24), 0.5), seg, clf, 0,
                              LimeParams(n_samples=100, seed=0))
        np.testing.assert_allclose(result.relevance, 0.0, atol=1e-9)

    def test_two_region_additive_ratio(self):
        # Additive classifier: f = 0.7 * on(region 0) + 0.3 * on(region 1),
        # realized through region mean brightness on a bright image.
        seg = grid_segmentation(20, 20, 1, 2)
        weights = np.zeros((20, 20))
        weights[seg.labels == 0] = 0.7 / 200
        weights[seg.labels == 1] = 0.3 / 200
        clf = make_oracle(OracleSpec(kind="linear-weights", weights=weights), ["a", "b"], (20, 20))
        img = np.ones((20, 20))
        result = explain_lime(img, seg, clf, 0,
                              LimeParams(n_samples=512, ridge=1e-9, seed=2))
        w0 = result.relevance[seg.labels == 0].max()
        w1 = result.relevance[seg.labels == 1].max()
        assert w0 / w1 == pytest.approx(7.0 / 3.0, rel=0.05)

    def test_positive_only_and_region_constant(self):
        seg = grid_segmentation(30, 30, 3, 3)
        rng = np.random.default_rng(8)
        weights = rng.normal(scale=1.0 / 900, size=(30, 30))
        clf = make_oracle(OracleSpec(kind="linear-weights", weights=np.abs(weights)),
                          ["a", "b"], (30, 30))
        result = explain_lime(rng.random((30, 30)), seg, clf, 1,
                              LimeParams(n_samples=200, seed=3))
        assert result.relevance.min() >= 0.0
        for r in range(seg.region_count):
            vals = result.relevance[seg.labels == r]
            assert np.ptp(vals) == 0.0

    def test_jobs_bit_identical(self):
        seg = grid_segmentation(32, 32, 2, 4)
        clf = make_oracle(OracleSpec(kind="mean-brightness"), ["b", "d"], (32, 32))
        img = np.random.default_rng(9).random((32, 32))
        params = LimeParams(n_samples=300, seed=5)
        a = explain_lime(img, seg, clf, 0, params, jobs=1)
        b = explain_lime(img, seg, clf, 0, params, jobs=4)
        assert np.array_equal(a.relevance, b.relevance)

    def test_too_few_samples_rejected(self):
        seg = grid_segmentation(10, 10, 2, 2)
        clf = make_oracle(OracleSpec(kind="mean-brightness"), ["b", "d"], (10, 10))
        with pytest.raises(ValueError):
            explain_lime(np.ones((10, 10)), seg, clf, 0, LimeParams(n_samples=4, seed=0))
