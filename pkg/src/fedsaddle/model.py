"""The optimization variable: a vector block and a matrix block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ModelPoint:
    """Parameters of the single-linear-hidden-layer classifier.

    ``w1`` has shape ``(d1,)``, ``W2`` has shape ``(d1, d2)``.  Flattening
    concatenates ``w1`` with ``W2`` in row-major order, so the flat dimension
    is ``d1 + d1 * d2``.
    """

    w1: np.ndarray
    W2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        if self.w1.ndim != 1 or self.W2.ndim != 2:
            raise ValueError("w1 must be a vector and W2 a matrix")
        if self.W2.shape[0] != self.w1.shape[0]:
            raise ValueError(
                f"block shapes disagree: w1 {self.w1.shape}, W2 {self.W2.shape}"
            )

    @property
    def d1(self) -> int:
        return self.w1.shape[0]

    @property
    def d2(self) -> int:
        return self.W2.shape[1]

    @property
    def dim(self) -> int:
        return self.d1 + self.d1 * self.d2

    @classmethod
    def zeros(cls, d1: int, d2: int) -> "ModelPoint":
        return cls(np.zeros(d1), np.zeros((d1, d2)))

    @classmethod
    def unflatten(cls, vec, d1: int, d2: int) -> "ModelPoint":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (d1 + d1 * d2,):
            raise ValueError(f"expected length {d1 + d1 * d2}, got {vec.shape}")
        return cls(vec[:d1].copy(), vec[d1:].reshape(d1, d2).copy())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w1, self.W2.ravel()])

    def copy(self) -> "ModelPoint":
        return ModelPoint(self.w1.copy(), self.W2.copy())

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.w1, self.w1) + np.sum(self.W2 * self.W2)))

    def __add__(self, other: "ModelPoint") -> "ModelPoint":
        return ModelPoint(self.w1 + other.w1, self.W2 + other.W2)

    def __sub__(self, other: "ModelPoint") -> "ModelPoint":
        return ModelPoint(self.w1 - other.w1, self.W2 - other.W2)

    def __mul__(self, scalar: float) -> "ModelPoint":
        return ModelPoint(self.w1 * scalar, self.W2 * scalar)

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.w1)) and np.all(np.isfinite(self.W2)))
