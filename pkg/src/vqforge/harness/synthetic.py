"""Outlier-heavy synthetic weight matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from ..kmeans import make_rng
from ..weightio import WeightMatrix


@dataclass
class SyntheticSpec:
    o: int
    i: int
    sigma: float = 0.02
    outlier_fraction: float = 0.01
    outlier_scale: float = 20.0
    seed: int = 0
    name: str = "w"

    def __post_init__(self):
        if not 0 <= self.outlier_fraction <= 0.1:
            raise ContractError(f"outlier fraction must lie in [0, 0.1], got {self.outlier_fraction}")


def gen_weights(spec: SyntheticSpec) -> WeightMatrix:
    """Gaussian weights with a fraction of entries, at random positions, scaled up."""
    rng = make_rng(spec.seed)
    values = rng.normal(0.0, spec.sigma, size=(spec.o, spec.i))
    count = int(round(spec.outlier_fraction * spec.o * spec.i))
    if count:
        pos = rng.choice(spec.o * spec.i, size=count, replace=False)
        values.reshape(-1)[pos] *= spec.outlier_scale
    return WeightMatrix(spec.name, values.astype(np.float32))


def kurtosis(values) -> float:
    """Non-excess sample kurtosis (3 for a Gaussian)."""
    v = np.asarray(values, np.float64).reshape(-1)
    v = v - v.mean()
    m2 = np.mean(v ** 2)
    return float(np.mean(v ** 4) / m2 ** 2) if m2 > 0 else 0.0
