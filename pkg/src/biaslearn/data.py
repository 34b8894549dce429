"""Synthetic exemplar datasets and their packaging for the likelihood.

Exemplars mimic a two-category perceptual experiment: one diagnostic
feature whose mean differs by category, remaining features pure noise.
The likelihood consumes per-feature observation vectors with one component
per category, so balanced exemplar sets are paired across categories by
within-category index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Exemplar:
    """One stimulus: feature values plus its true category index."""

    features: np.ndarray
    category: int

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))
        if self.features.ndim != 1:
            raise ValueError("features must be a 1-D vector")
        if self.category < 0:
            raise ValueError("category index must be nonnegative")


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of the synthetic exemplar generator.

    Category centers on the diagnostic feature span mean_separation
    symmetrically around zero (two categories sit at -sep/2 and +sep/2);
    every other feature is centered at zero for all categories.
    """

    n_per_category: int = 8
    n_features: int = 2
    n_categories: int = 2
    diagnostic_feature: int = 0
    mean_separation: float = 2.0
    within_sd: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_per_category < 1:
            raise ValueError("n_per_category must be >= 1")
        if self.n_features < 1 or self.n_categories < 2:
            raise ValueError("need n_features >= 1 and n_categories >= 2")
        if not 0 <= self.diagnostic_feature < self.n_features:
            raise ValueError("diagnostic_feature must index a feature")
        if self.within_sd <= 0:
            raise ValueError("within_sd must be positive")


@dataclass(frozen=True)
class ObservationSet:
    """Per-feature category-vector observations.

    vectors has shape (n_features, n_obs, n_categories): element
    [i, j, c] is the value of feature i for the j-th exemplar of
    category c.
    """

    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "vectors", np.asarray(self.vectors, dtype=float))
        if self.vectors.ndim != 3:
            raise ValueError("vectors must have shape (n_features, n_obs, n_categories)")

    @property
    def n_features(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_obs(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_categories(self) -> int:
        return self.vectors.shape[2]


def category_centers(spec: DatasetSpec) -> np.ndarray:
    """Diagnostic-feature centers per category, evenly spread around zero."""
    half = spec.mean_separation / 2.0
    return np.linspace(-half, half, spec.n_categories)


def generate_exemplars(spec: DatasetSpec) -> list[Exemplar]:
    """Draw the balanced exemplar set described by spec.

    Deterministic given spec.seed; exemplars are listed category by
    category in generation order.
    """
    rng = np.random.default_rng(spec.seed)
    centers = category_centers(spec)
    exemplars = []
    for c in range(spec.n_categories):
        loc = np.zeros(spec.n_features)
        loc[spec.diagnostic_feature] = centers[c]
        values = rng.normal(loc, spec.within_sd, size=(spec.n_per_category, spec.n_features))
        exemplars.extend(Exemplar(row, c) for row in values)
    return exemplars


def to_observations(exemplars: list[Exemplar]) -> ObservationSet:
    """Pair exemplars across categories by within-category index.

    The j-th observation vector for feature i collects feature i of the
    j-th exemplar of every category, in category order.  Requires equal
    exemplar counts per category.
    """
    if not exemplars:
        raise ValueError("need at least one exemplar")
    by_category: dict[int, list[Exemplar]] = {}
    for ex in exemplars:
        by_category.setdefault(ex.category, []).append(ex)
    categories = sorted(by_category)
    counts = {len(by_category[c]) for c in categories}
    if len(counts) != 1:
        raise ValueError("categories must contribute equally many exemplars")
    if categories != list(range(len(categories))):
        raise ValueError("category indices must be contiguous from 0")
    n_obs = counts.pop()
    n_features = exemplars[0].features.size
    if any(ex.features.size != n_features for ex in exemplars):
        raise ValueError("all exemplars must share the feature count")
    vectors = np.empty((n_features, n_obs, len(categories)))
    for c in categories:
        for j, ex in enumerate(by_category[c]):
            vectors[:, j, c] = ex.features
    return ObservationSet(vectors)


def write_exemplars_csv(exemplars: list[Exemplar], path) -> None:
    """Write exemplars as CSV with full round-trip precision."""
    if not exemplars:
        raise ValueError("need at least one exemplar")
    n_features = exemplars[0].features.size
    header = ["exemplar_id", "category"] + [f"f{i}" for i in range(n_features)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx, ex in enumerate(exemplars):
            writer.writerow([idx, ex.category] + [repr(float(v)) for v in ex.features])


def read_exemplars_csv(path) -> list[Exemplar]:
    """Read exemplars written by ``write_exemplars_csv``, in id order."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["exemplar_id", "category"]:
            raise ValueError("unrecognized exemplar CSV header")
        for row in reader:
            idx = int(row[0])
            category = int(row[1])
            features = np.array([float(v) for v in row[2:]])
            rows.append((idx, Exemplar(features, category)))
    rows.sort(key=lambda item: item[0])
    return [ex for _, ex in rows]
