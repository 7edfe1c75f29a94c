"""Core state containers shared across the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Epochs are plain floats: seconds of dynamical time past the scenario
# reference epoch. Durations are float seconds as well.
Epoch = float


def _vec3(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class StateVector:
    """Moon-centered inertial position/velocity pair.

    Units are contextual: canonical LU/VU inside the dynamics stack,
    km and km/s at file and reporting boundaries.
    """

    r: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", _vec3(self.r))
        object.__setattr__(self, "v", _vec3(self.v))

    @classmethod
    def from_array(cls, y) -> "StateVector":
        y = np.asarray(y, dtype=float)
        if y.shape != (6,):
            raise ValueError(f"expected 6-vector, got shape {y.shape}")
        return cls(r=y[:3].copy(), v=y[3:].copy())

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.r, self.v])


@dataclass(frozen=True)
class Stm:
    """6x6 state-transition matrix with named position/velocity blocks."""

    matrix: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.matrix, dtype=float)
        if arr.shape != (6, 6):
            raise ValueError(f"expected 6x6 matrix, got shape {arr.shape}")
        object.__setattr__(self, "matrix", arr)

    @classmethod
    def identity(cls) -> "Stm":
        return cls(np.eye(6))

    @property
    def rr(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def rv(self) -> np.ndarray:
        return self.matrix[:3, 3:]

    @property
    def vr(self) -> np.ndarray:
        return self.matrix[3:, :3]

    @property
    def vv(self) -> np.ndarray:
        return self.matrix[3:, 3:]

    def compose(self, earlier: "Stm") -> "Stm":
        """Phi(t2, t0) from self = Phi(t2, t1) and earlier = Phi(t1, t0)."""
        return Stm(self.matrix @ earlier.matrix)
