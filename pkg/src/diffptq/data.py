"""Seeded 2-D Gaussian-mixture datasets with class labels.

Labels ``0..K-1`` sit on a circle; labels ``K..2K-1`` are the same modes
rotated by ``heldout_rotation`` and form the held-out condition split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MixtureSpec:
    modes: int = 4
    radius: float = 4.0
    std: float = 0.3
    heldout_rotation: float = np.pi / 4

    @property
    def n_classes(self) -> int:
        return 2 * self.modes

    def centers(self) -> np.ndarray:
        """``(2K, 2)`` mode centers, calibration labels first."""
        ang = 2 * np.pi * np.arange(self.modes) / self.modes
        ang = np.concatenate([ang, ang + self.heldout_rotation])
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def calib_labels(self) -> np.ndarray:
        return np.arange(self.modes)

    def heldout_labels(self) -> np.ndarray:
        return np.arange(self.modes, 2 * self.modes)


def make_dataset(spec: MixtureSpec, n: int, seed: int):
    """``n`` labeled samples, labels uniform over all ``2K`` classes."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, spec.n_classes, size=n)
    x = spec.centers()[labels] + spec.std * rng.standard_normal((n, 2))
    return x, labels
