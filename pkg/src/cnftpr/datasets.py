"""Seeded 2D toy densities: rings, pinwheel, moons.

Points are standardized with each distribution's analytic mean and standard
deviation, so every batch, whatever its size, goes through the same affine map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

NAMES = ("rings", "pinwheel", "moons")

# rings: four circles of radius r in RING_RADII, radial noise before scaling by RING_SCALE
RING_RADII = (0.25, 0.5, 0.75, 1.0)
RING_NOISE = 0.02
RING_SCALE = 3.0

# pinwheel: arms at 2 pi k / 5, radial N(1, 0.3^2), tangential N(0, 0.05^2), twist 0.25 exp(r)
PINWHEEL_ARMS = 5
PINWHEEL_RADIAL_STD = 0.3
PINWHEEL_TANGENTIAL_STD = 0.05
PINWHEEL_RATE = 0.25

MOONS_NOISE = 0.1


def _ring_moments():
    second = RING_SCALE**2 * (np.mean(np.square(RING_RADII)) + RING_NOISE**2) / 2.0
    return np.zeros(2), np.full(2, math.sqrt(second))


def _pinwheel_moments():
    # isotropic by the 5-fold symmetry; E|x|^2 = E f0^2 + E f1^2
    second = 1.0 + PINWHEEL_RADIAL_STD**2 + PINWHEEL_TANGENTIAL_STD**2
    return np.zeros(2), np.full(2, math.sqrt(second / 2.0))


def _moons_moments():
    s2 = MOONS_NOISE**2
    mean = np.array([0.5, 0.25])
    var = np.array([0.75 + s2, 0.625 - 1.0 / math.pi - 0.0625 + s2])
    return mean, np.sqrt(var)


MOMENTS = {"rings": _ring_moments(), "pinwheel": _pinwheel_moments(), "moons": _moons_moments()}


@dataclass
class Dataset2D:
    name: str
    points: np.ndarray
    seed: int

    def __len__(self):
        return len(self.points)

    def to_csv(self, path) -> None:
        np.savetxt(Path(path), self.points, delimiter=",", header="x0,x1", comments="", fmt="%.17g")


def _raw_rings(rng, count):
    radius = rng.choice(RING_RADII, size=count) + RING_NOISE * rng.standard_normal(count)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=count)
    return RING_SCALE * radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _raw_pinwheel(rng, count):
    arm = rng.integers(0, PINWHEEL_ARMS, size=count)
    radial = 1.0 + PINWHEEL_RADIAL_STD * rng.standard_normal(count)
    tangential = PINWHEEL_TANGENTIAL_STD * rng.standard_normal(count)
    angle = 2.0 * math.pi * arm / PINWHEEL_ARMS + PINWHEEL_RATE * np.exp(radial)
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([radial * c - tangential * s, radial * s + tangential * c], axis=1)


def _raw_moons(rng, count):
    upper = rng.random(count) < 0.5
    theta = rng.uniform(0.0, math.pi, size=count)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    return np.stack([x, y], axis=1) + MOONS_NOISE * rng.standard_normal((count, 2))


_RAW = {"rings": _raw_rings, "pinwheel": _raw_pinwheel, "moons": _raw_moons}


def standardize(name: str, raw: np.ndarray) -> np.ndarray:
    mean, std = MOMENTS[name]
    return (raw - mean) / std


def unstandardize(name: str, points: np.ndarray) -> np.ndarray:
    mean, std = MOMENTS[name]
    return points * std + mean


def sample(name: str, count: int, rng: np.random.Generator) -> np.ndarray:
    if name not in _RAW:
        raise ValueError(f"unknown dataset {name!r}; choose from {', '.join(NAMES)}")
    if count <= 0:
        raise ValueError("count must be positive")
    return standardize(name, _RAW[name](rng, count))


def generate(name: str, count: int, seed: int) -> Dataset2D:
    return Dataset2D(name=name, points=sample(name, count, np.random.default_rng(seed)), seed=seed)


def stream(name: str, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Fresh i.i.d. batches forever."""
    while True:
        yield sample(name, batch_size, rng)


def split_indices(count: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple:
    """Disjoint train/val/test index arrays that together cover range(count)."""
    if not math.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(count)
    cuts = np.cumsum([int(round(f * count)) for f in fractions[:-1]])
    return tuple(np.split(perm, cuts))


def unspiral_angles(points: np.ndarray) -> np.ndarray:
    """Pinwheel points mapped back to their arm angle in [0, 2 pi)."""
    raw = unstandardize("pinwheel", points)
    r = np.hypot(raw[:, 0], raw[:, 1])
    return np.mod(np.arctan2(raw[:, 1], raw[:, 0]) - PINWHEEL_RATE * np.exp(r), 2.0 * math.pi)
