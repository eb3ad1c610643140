"""Imbalanced mixture-of-Gaussians datasets on a square grid."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def checkerboard(grid_side: int) -> tuple[int, ...]:
    """Cells with odd ``row + col``: 4 of 9, 12 of 25."""
    return tuple(i * grid_side + j for i in range(grid_side) for j in range(grid_side) if (i + j) % 2 == 1)


@dataclass(frozen=True)
class MoGSpec:
    grid_side: int = 3
    component_std: float = 0.3
    spacing: float = 2.0
    majority_count: int = 10_000
    minority_count: int = 500
    minority_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.grid_side < 1:
            raise ValueError("grid_side must be positive")
        if self.component_std < 0 or self.spacing <= 0:
            raise ValueError("component_std must be >= 0 and spacing > 0")
        if self.majority_count < 1 or self.minority_count < 1:
            raise ValueError("class counts must be positive")
        idx = checkerboard(self.grid_side) if self.minority_indices is None else tuple(sorted(set(self.minority_indices)))
        if any(not 0 <= i < self.n_components for i in idx):
            raise ValueError(f"minority indices must lie in [0, {self.n_components})")
        object.__setattr__(self, "minority_indices", idx)

    @property
    def n_components(self) -> int:
        return self.grid_side**2

    @property
    def centers(self) -> np.ndarray:
        offs = (np.arange(self.grid_side) - (self.grid_side - 1) / 2.0) * self.spacing
        return np.array([[offs[i], offs[j]] for i in range(self.grid_side) for j in range(self.grid_side)])

    @property
    def counts(self) -> np.ndarray:
        c = np.full(self.n_components, self.majority_count, dtype=np.int64)
        c[list(self.minority_indices)] = self.minority_count
        return c

    @property
    def weights(self) -> np.ndarray:
        c = self.counts
        return c / c.sum()

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.centers

    def entropy(self) -> float:
        """Differential entropy of the mixture, assuming non-overlapping components.

        Exact up to the overlap mass, which is negligible (< 1e-10) when
        ``spacing / component_std`` exceeds 6.
        """
        w = self.weights
        return float(-(w * np.log(w)).sum() + np.log(2.0 * np.pi * np.e * self.component_std**2))

    def to_dict(self) -> dict:
        return {
            "grid_side": self.grid_side,
            "component_std": self.component_std,
            "spacing": self.spacing,
            "majority_count": self.majority_count,
            "minority_count": self.minority_count,
            "minority_indices": list(self.minority_indices),
        }


def sample_mog(
    spec: MoGSpec,
    rng: np.random.Generator,
    n: int | None = None,
    per_class: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw samples and their component labels, shuffled.

    With neither ``n`` nor ``per_class`` the configured class counts are used
    exactly.  ``n`` draws component labels from the mixture weights.
    """
    if per_class is None:
        per_class = spec.counts if n is None else rng.multinomial(n, spec.weights)
    per_class = np.asarray(per_class, dtype=np.int64)
    if per_class.shape != (spec.n_components,):
        raise ValueError(f"need {spec.n_components} per-class counts")
    labels = np.repeat(np.arange(spec.n_components), per_class)
    rng.shuffle(labels)
    x = spec.centers[labels] + spec.component_std * rng.standard_normal((labels.size, 2))
    return x, labels


@dataclass
class Dataset:
    spec: MoGSpec
    train_x: np.ndarray
    train_labels: np.ndarray
    test_x: np.ndarray
    test_labels: np.ndarray = field(repr=False, default=None)


def make_dataset(spec: MoGSpec, rng: np.random.Generator, n_test: int = 10_000) -> Dataset:
    x, y = sample_mog(spec, rng)
    tx, ty = sample_mog(spec, rng, n=n_test)
    return Dataset(spec, x, y, tx, ty)


def write_dataset_csv(path: str | Path, x: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "x1", "label"])
        for (a, b), lab in zip(x, labels):
            w.writerow([repr(float(a)), repr(float(b)), int(lab)])
