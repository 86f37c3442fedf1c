"""Codebook quantization with straight-through gradients."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NonFiniteLatent(FloatingPointError):
    pass


class Codebook:
    """K x d_z embedding table plus a per-code usage counter.

    Initial rows are uniform in [-init_scale, init_scale]; the default scale
    is 1/K.
    """

    def __init__(self, size: int, dim: int, rng: np.random.Generator | None = None,
                 init_scale: float | None = None):
        if size < 1 or dim < 1:
            raise ValueError(f"codebook needs K >= 1 and d_z >= 1, got {size} x {dim}")
        rng = rng or np.random.default_rng(0)
        scale = 1.0 / size if init_scale is None else init_scale
        self.embeddings = T.parameter(rng.uniform(-scale, scale, size=(size, dim)), name="codebook")
        self.usage_counts = np.zeros(size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def nearest(self, z: np.ndarray) -> np.ndarray:
        """Index of the nearest row for every vector in z [..., d]; ties go to the lowest index."""
        z = np.asarray(z)
        if z.shape[-1] != self.dim:
            raise T.DimensionError(f"latent dim {z.shape[-1]} does not match codebook dim {self.dim}")
        flat = z.reshape(-1, self.dim)
        bad = ~np.all(np.isfinite(flat), axis=1)
        if bad.any():
            raise NonFiniteLatent(f"non-finite latent vector at frame {int(np.argmax(bad))}")
        emb = self.embeddings.data
        dist = (flat * flat).sum(axis=1, keepdims=True) - 2.0 * flat @ emb.T + (emb * emb).sum(axis=1)
        return np.argmin(dist, axis=1).reshape(z.shape[:-1])

    def quantize(self, z) -> tuple[Tensor, np.ndarray]:
        """Selected rows q* (differentiable w.r.t. the codebook) and their indices."""
        z = T.as_tensor(z)
        idx = self.nearest(z.data)
        np.add.at(self.usage_counts, idx.reshape(-1), 1)
        return self.lookup(idx), idx

    def lookup(self, indices) -> Tensor:
        return T.take_rows(self.embeddings, np.asarray(indices))

    def reset_usage(self) -> np.ndarray:
        counts = self.usage_counts.copy()
        self.usage_counts[:] = 0
        return counts

    def unused_codes(self) -> np.ndarray:
        return np.nonzero(self.usage_counts == 0)[0]


def quantize(z, codebook: Codebook) -> tuple[Tensor, np.ndarray]:
    return codebook.quantize(z)


def straight_through(z, q) -> Tensor:
    """Forward value q*; the incoming gradient goes to z unchanged and nothing to q."""
    z, q = T.as_tensor(z), T.as_tensor(q)
    if z.shape != q.shape:
        raise T.DimensionError(f"straight_through: z {z.shape} vs q {q.shape}")
    return T.make_op(q.data.copy(), (z, q), lambda g: (g, None), "straight_through")


def codebook_loss(z, q) -> Tensor:
    """||sg(z) - q||^2, summed over the last axis and averaged over vectors."""
    z, q = T.as_tensor(z), T.as_tensor(q)
    return _per_vector_sq(T.stop_gradient(z) - q)


def commitment_loss(z, q) -> Tensor:
    """||z - sg(q)||^2, summed over the last axis and averaged over vectors."""
    z, q = T.as_tensor(z), T.as_tensor(q)
    return _per_vector_sq(z - T.stop_gradient(q))


def _per_vector_sq(diff: Tensor) -> Tensor:
    count = max(1, diff.size // diff.shape[-1]) if diff.ndim > 1 else 1
    return T.tsum(T.square(diff)) * (1.0 / count)


def latent_loss(z, q, beta: float = 0.25) -> tuple[Tensor, Tensor, Tensor]:
    """codebook + beta * commitment, plus the two parts."""
    cb = codebook_loss(z, q)
    cm = commitment_loss(z, q)
    return cb + cm * beta, cb, cm
