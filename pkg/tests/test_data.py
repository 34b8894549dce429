"""Synthetic exemplar generation and observation packaging."""

from __future__ import annotations

import numpy as np
import pytest

from biaslearn.data import (
    DatasetSpec,
    Exemplar,
    category_centers,
    generate_exemplars,
    read_exemplars_csv,
    to_observations,
    write_exemplars_csv,
)


class TestDatasetSpec:
    def test_defaults(self):
        spec = DatasetSpec()
        assert (spec.n_per_category, spec.n_features, spec.n_categories) == (8, 2, 2)
        assert spec.diagnostic_feature == 0
        assert spec.mean_separation == 2.0
        assert spec.within_sd == 0.25

    def test_validation(self):
        with pytest.raises(ValueError):
            DatasetSpec(n_categories=1)
        with pytest.raises(ValueError):
            DatasetSpec(diagnostic_feature=5)
        with pytest.raises(ValueError):
            DatasetSpec(within_sd=0.0)

    def test_category_centers_symmetric(self):
        assert np.allclose(category_centers(DatasetSpec()), [-1.0, 1.0])
        assert np.allclose(
            category_centers(DatasetSpec(n_categories=3)), [-1.0, 0.0, 1.0]
        )


class TestGenerateExemplars:
    def test_counts(self):
        exemplars = generate_exemplars(DatasetSpec())
        assert len(exemplars) == 16
        counts = np.bincount([ex.category for ex in exemplars])
        assert list(counts) == [8, 8]

    def test_determinism(self):
        a = generate_exemplars(DatasetSpec(seed=123))
        b = generate_exemplars(DatasetSpec(seed=123))
        for ea, eb in zip(a, b):
            assert ea.category == eb.category
            assert np.array_equal(ea.features, eb.features)
        c = generate_exemplars(DatasetSpec(seed=124))
        assert any(
            not np.array_equal(ea.features, ec.features) for ea, ec in zip(a, c)
        )

    def test_category0_diagnostic_mean(self):
        # sample mean of 8 draws at sd 0.25: 3 standard errors of the target
        exemplars = generate_exemplars(DatasetSpec(seed=5))
        vals = [ex.features[0] for ex in exemplars if ex.category == 0]
        assert abs(np.mean(vals) - (-1.0)) < 3 * 0.25 / np.sqrt(8)

    def test_diagnosticity_across_seeds(self):
        se = 0.25 * np.sqrt(2.0 / 8.0)
        for seed in range(6):
            exemplars = generate_exemplars(DatasetSpec(seed=seed))
            by_cat = lambda c, f: np.mean(
                [ex.features[f] for ex in exemplars if ex.category == c]
            )
            diag_gap = by_cat(1, 0) - by_cat(0, 0)
            off_gap = by_cat(1, 1) - by_cat(0, 1)
            assert abs(diag_gap - 2.0) < 4 * se
            assert abs(off_gap) < 4 * se


class TestToObservations:
    def test_shape_and_counts(self):
        obs = to_observations(generate_exemplars(DatasetSpec()))
        assert obs.vectors.shape == (2, 8, 2)
        assert obs.n_features == 2
        assert obs.n_categories == 2

    def test_single_pair_identity(self):
        exemplars = [
            Exemplar(features=np.array([1.0, 2.0]), category=0),
            Exemplar(features=np.array([3.0, 4.0]), category=1),
        ]
        obs = to_observations(exemplars)
        assert np.array_equal(obs.vectors[0, 0], [1.0, 3.0])
        assert np.array_equal(obs.vectors[1, 0], [2.0, 4.0])

    def test_value_multiset_preserved(self):
        exemplars = generate_exemplars(DatasetSpec(seed=9))
        obs = to_observations(exemplars)
        original = np.sort(
            np.concatenate([ex.features for ex in exemplars])
        )
        packed = np.sort(obs.vectors.ravel())
        assert np.array_equal(original, packed)

    def test_within_category_permutation_changes_pairing_only(self):
        exemplars = generate_exemplars(DatasetSpec(seed=3))
        cat0 = [ex for ex in exemplars if ex.category == 0]
        cat1 = [ex for ex in exemplars if ex.category == 1]
        shuffled = cat0[::-1] + cat1
        a = to_observations(cat0 + cat1)
        b = to_observations(shuffled)
        for f in range(2):
            assert not np.array_equal(a.vectors[f], b.vectors[f])
            assert np.array_equal(
                np.sort(a.vectors[f].ravel()), np.sort(b.vectors[f].ravel())
            )

    def test_unbalanced_rejected(self):
        exemplars = [
            Exemplar(features=np.array([0.0, 0.0]), category=0),
            Exemplar(features=np.array([0.0, 0.0]), category=0),
            Exemplar(features=np.array([0.0, 0.0]), category=1),
        ]
        with pytest.raises(ValueError):
            to_observations(exemplars)


class TestCsvRoundTrip:
    def test_exact_round_trip(self, tmp_path):
        exemplars = generate_exemplars(DatasetSpec(seed=11))
        path = tmp_path / "exemplars.csv"
        write_exemplars_csv(exemplars, path)
        header = path.read_text().splitlines()[0]
        assert header == "exemplar_id,category,f0,f1"
        back = read_exemplars_csv(path)
        assert len(back) == len(exemplars)
        for ea, eb in zip(exemplars, back):
            assert ea.category == eb.category
            assert np.array_equal(ea.features, eb.features)

    def test_same_seed_identical_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_exemplars_csv(generate_exemplars(DatasetSpec(seed=2)), p1)
        write_exemplars_csv(generate_exemplars(DatasetSpec(seed=2)), p2)
        assert p1.read_bytes() == p2.read_bytes()
