"""Linear encoders applied on top of model embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class LinearEncoder:
    """``f(z) = W z`` with ``||W||_F <= frob_bound``."""

    matrix: np.ndarray
    frob_bound: float
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        W = np.array(self.matrix, dtype=float)
        if W.ndim != 2:
            raise ValueError("encoder matrix must be 2-D")
        if not self.frob_bound > 0:
            raise ValueError("frob_bound must be positive")
        if np.linalg.norm(W) > self.frob_bound * (1 + 1e-12):
            raise ValueError("encoder matrix exceeds its Frobenius bound")
        W.setflags(write=False)
        object.__setattr__(self, "matrix", W)
        object.__setattr__(self, "frob_bound", float(self.frob_bound))

    @classmethod
    def identity(cls, d: int) -> "LinearEncoder":
        return cls(np.eye(d), float(np.sqrt(d)))

    @property
    def spectral_norm(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.matrix.T


def encode(encoder: LinearEncoder | None, z: np.ndarray) -> np.ndarray:
    """Apply ``encoder``; ``None`` is the identity map."""
    if encoder is None:
        return np.asarray(z, dtype=float)
    return encoder(z)


def operator_norm(encoder: LinearEncoder | None) -> float:
    return 1.0 if encoder is None else encoder.spectral_norm


def transform_covariance(encoder: LinearEncoder | None, cov: np.ndarray) -> np.ndarray:
    if encoder is None:
        return np.asarray(cov, dtype=float)
    W = encoder.matrix
    return W @ cov @ W.T
