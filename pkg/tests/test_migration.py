"""Label migration against the scalar oracle plus its invariants."""
from __future__ import annotations

import math

import numpy as np
import pytest

from ear.errors import ConfigError, IngestionError
from ear.migration import (
    cosine_similarity,
    migrate,
    migrate_batch,
    migrate_grouped,
    postprocess,
    threshold_mask,
)

from oracles import migration_oracle


def random_batch(rng, t_max=16, c_max=6, d_max=8):
    t = int(rng.integers(1, t_max + 1))
    c = int(rng.integers(1, c_max + 1))
    d = int(rng.integers(2, d_max + 1))
    feats = rng.normal(size=(t, d))
    labels = (rng.random((t, c)) < 0.3).astype(np.float64)
    return feats, labels


class TestCosineSimilarity:
    def test_identical_rows(self):
        s = cosine_similarity(np.array([[1.0, 2.0], [1.0, 2.0]]))
        assert s[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_rows(self):
        s = cosine_similarity(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert s[0, 1] == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        s = cosine_similarity(np.array([[1.0, 1.0], [1.0, 0.0]]))
        assert s[0, 1] == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_symmetric_unit_diagonal(self):
        rng = np.random.default_rng(0)
        s = cosine_similarity(rng.normal(size=(6, 4)))
        assert np.abs(s - s.T).max() < 1e-12
        assert np.abs(np.diag(s) - 1.0).max() < 1e-12

    def test_zero_row_names_index(self):
        feats = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1e-12]])
        with pytest.raises(IngestionError, match=r"\[1, 2\]"):
            cosine_similarity(feats)


class TestThresholdMask:
    def test_mu_one_generic_batch_keeps_only_diagonal(self):
        rng = np.random.default_rng(1)
        s = cosine_similarity(rng.normal(size=(5, 3)))
        mask, _ = threshold_mask(s, 1.0)
        assert np.array_equal(mask, np.eye(5))

    def test_tiny_mu_keeps_everything(self):
        s = cosine_similarity(np.random.default_rng(2).normal(size=(4, 3)))
        mask, masked = threshold_mask(s, 1e-12)
        # cosine can be negative; only nonnegative entries are guaranteed kept
        assert (mask[s >= 1e-12] == 1).all()
        assert np.array_equal(masked, mask * s)

    def test_paper_visual_threshold_keeps_096(self):
        s = np.array([[1.0, 0.96], [0.96, 1.0]])
        mask, masked = threshold_mask(s, 0.95)
        assert mask[0, 1] == 1.0
        assert masked[0, 1] == pytest.approx(0.96)

    def test_mu_validation(self):
        s = np.eye(2)
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(ConfigError):
                threshold_mask(s, bad)


class TestMigrateAndPostprocess:
    def test_identity_mask_returns_ground_truth(self):
        labels = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        assert np.array_equal(migrate(np.eye(3), labels), labels)

    def test_duplicate_annotation_reaches_1_8(self):
        # one receiving segment similar (0.9) to two donors labeled with the category
        masked = np.array(
            [
                [1.0, 0.9, 0.9],
                [0.9, 1.0, 0.0],
                [0.9, 0.0, 1.0],
            ]
        )
        labels = np.array([[0.0], [1.0], [1.0]])
        raw = migrate(masked, labels)
        assert raw[0, 0] == pytest.approx(1.8, abs=1e-12)
        mask = (masked > 0).astype(float)
        counts, final = postprocess(raw, mask, labels)
        assert counts[0, 0] == 2.0
        assert final[0, 0] == pytest.approx(0.9, abs=1e-12)

    def test_ground_truth_support_forced_to_one(self):
        rng = np.random.default_rng(3)
        feats, labels = random_batch(rng)
        final = migrate_batch(feats, labels, 0.9).labels
        assert np.array_equal(final[labels == 1], np.ones(int(labels.sum())))

    def test_no_donor_entries_stay_zero(self):
        feats = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([[0.0], [0.0]])
        res = migrate_batch(feats, labels, 0.95)
        assert np.array_equal(res.labels, np.zeros((2, 1)))
        assert np.array_equal(res.duplicate_counts, np.zeros((2, 1)))

    def test_random_small_instance_matches_elementwise_sum(self):
        rng = np.random.default_rng(4)
        feats, labels = random_batch(rng)
        res = migrate_batch(feats, labels, 0.5)
        t, c = labels.shape
        for i in range(t):
            for j in range(c):
                expected = sum(res.masked_similarity[i, k] * labels[k, j] for k in range(t))
                assert res.raw_labels[i, j] == pytest.approx(expected, abs=1e-12)


class TestMigrateBatch:
    def test_single_segment_returns_its_labels(self):
        feats = np.array([[0.3, 0.4]])
        labels = np.array([[1.0, 0.0, 1.0]])
        res = migrate_batch(feats, labels, 0.98)
        assert np.array_equal(res.labels, labels)

    def test_two_identical_segments_share_labels_exactly(self):
        feats = np.array([[1.0, 2.0], [1.0, 2.0]])
        labels = np.array([[1.0], [0.0]])
        res = migrate_batch(feats, labels, 0.9)
        assert np.allclose(res.labels, 1.0, atol=1e-12)

    def test_oracle_equivalence_on_random_batches(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            feats, labels = random_batch(rng)
            mu = float(rng.uniform(0.05, 1.0))
            res = migrate_batch(feats, labels, mu)
            raw, counts, final = migration_oracle(feats, labels, mu)
            assert np.abs(res.raw_labels - raw).max() < 1e-12
            assert np.abs(res.duplicate_counts - counts).max() < 1e-12
            assert np.abs(res.labels - final).max() < 1e-12

    def test_labels_bounded_and_support_preserved(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            feats, labels = random_batch(rng)
            final = migrate_batch(feats, labels, float(rng.uniform(0.3, 1.0))).labels
            assert (final >= 0).all() and (final <= 1).all()
            assert (final >= labels).all()

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        feats, labels = random_batch(rng, t_max=10)
        perm = rng.permutation(feats.shape[0])
        base = migrate_batch(feats, labels, 0.8).labels
        shuffled = migrate_batch(feats[perm], labels[perm], 0.8).labels
        assert np.abs(base[perm] - shuffled).max() < 1e-12

    def test_monotone_in_mu_for_equal_similarity_donors(self):
        # cone construction: every off-diagonal similarity is the same value
        # (9/10), so all passing donations carry equal confidence
        t = 5
        feats = np.zeros((t, t + 1))
        feats[:, 0] = 3.0
        for i in range(t):
            feats[i, i + 1] = 1.0
        rng = np.random.default_rng(8)
        labels = (rng.random((t, 3)) < 0.4).astype(float)
        previous = None
        for mu in (0.3, 0.6, 0.85, 0.95, 0.999):
            final = migrate_batch(feats, labels, mu).labels
            if previous is not None:
                off_support = labels == 0
                assert (final[off_support] <= previous[off_support] + 1e-12).all()
            previous = final

    def test_migrated_confidence_bounded_by_best_donor(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            feats, labels = random_batch(rng)
            res = migrate_batch(feats, labels, 0.4)
            t, c = labels.shape
            for i in range(t):
                donors = res.masked_similarity[i] * (res.mask[i] > 0)
                for j in range(c):
                    if labels[i, j] == 0 and res.labels[i, j] > 0:
                        best = max(donors[k] for k in range(t) if labels[k, j] == 1)
                        assert res.labels[i, j] <= best + 1e-12

    def test_per_video_pools_are_independent(self):
        rng = np.random.default_rng(10)
        feats = np.concatenate([np.tile(rng.normal(size=(1, 4)), (4, 1))])
        labels = np.array([[1.0], [0.0], [0.0], [0.0]])
        ids = ["a", "a", "b", "b"]
        grouped = migrate_grouped(feats, labels, 0.9, ids)
        # identical features, but the second video has no labeled donor
        assert grouped[1, 0] == pytest.approx(1.0)
        assert grouped[2, 0] == 0.0 and grouped[3, 0] == 0.0

    def test_row_count_mismatch(self):
        with pytest.raises(IngestionError):
            migrate_batch(np.ones((3, 2)), np.ones((2, 1)), 0.9)
