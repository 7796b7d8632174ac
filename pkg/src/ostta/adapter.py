"""LayerNorm-style affine adapter over raw embeddings, followed by L2 normalisation.

    h = gamma * (x - mean(x)) / sqrt(var(x) + eps) + beta,    f = h / ||h||

gamma and beta are the only adapted parameters.  Everything is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradient, ZeroVector

DEFAULT_LR = 1e-3


@dataclass(frozen=True)
class ForwardCache:
    raw: np.ndarray
    mean: float
    var: float
    x_hat: np.ndarray
    h: np.ndarray
    norm: float
    f: np.ndarray


class LayerNormAdapter:
    def __init__(self, dim: int, lr: float = DEFAULT_LR, epsilon: float = 1e-5):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.dim = dim
        self.lr = lr
        self.epsilon = epsilon
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.refused_steps = 0

    def forward(self, raw: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(raw, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"expected shape ({self.dim},), got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("raw embedding has non-finite entries")
        mean = float(x.sum()) / x.size
        c = x - mean
        var = float(c @ c) / x.size
        x_hat = c / math.sqrt(var + self.epsilon)
        h = self.gamma * x_hat + self.beta
        norm = math.sqrt(float(h @ h))
        if norm < 1e-12:
            raise ZeroVector("adapter output has zero norm")
        f = h / norm
        return f, ForwardCache(x, mean, var, x_hat, h, norm, f)

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        return self.forward(raw)[0]

    def backward(self, cache: ForwardCache, dL_df: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of the loss with respect to (gamma, beta)."""
        g = np.asarray(dL_df, dtype=np.float64)
        f = cache.f
        # d f / d h = (I - f f^T) / ||h||
        dL_dh = (g - f * float(f @ g)) / cache.norm
        return dL_dh * cache.x_hat, dL_dh

    def sgd_step(self, grad_gamma: np.ndarray, grad_beta: np.ndarray) -> None:
        if not (np.all(np.isfinite(grad_gamma)) and np.all(np.isfinite(grad_beta))):
            self.refused_steps += 1
            raise NonFiniteGradient("refusing SGD step with non-finite gradient")
        self.gamma = self.gamma - self.lr * grad_gamma
        self.beta = self.beta - self.lr * grad_beta

    # checkpointing: flat little-endian f64, gamma then beta

    def export_params(self) -> bytes:
        return np.concatenate([self.gamma, self.beta]).astype("<f8").tobytes()

    def import_params(self, blob: bytes) -> None:
        flat = np.frombuffer(blob, dtype="<f8")
        if flat.size != 2 * self.dim:
            raise ValueError(f"expected {2 * self.dim} float64 values, got {flat.size}")
        self.gamma = flat[: self.dim].astype(np.float64)
        self.beta = flat[self.dim :].astype(np.float64)

    def copy(self) -> "LayerNormAdapter":
        other = LayerNormAdapter(self.dim, self.lr, self.epsilon)
        other.gamma = self.gamma.copy()
        other.beta = self.beta.copy()
        return other
