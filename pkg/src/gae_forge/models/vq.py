"""Vector quantization with EMA codebook updates.

The codebook never moves by gradient: the straight-through construction
keeps it off the tape's differentiable paths, and the embedding vectors are
pulled toward the running means of their assigned encoder outputs.
"""
from __future__ import annotations

import numpy as np

from ..tensor import Tensor, Rng, stop_gradient, take

__all__ = ["Codebook", "vq_quantize"]


class Codebook:
    """K embedding vectors plus the EMA accumulators that drive them."""

    def __init__(self, n_codes: int, code_dim: int, rng: Rng,
                 decay: float = 0.99, epsilon: float = 1e-5):
        if n_codes < 1:
            raise ValueError("codebook needs at least one entry")
        self.n_codes = n_codes
        self.code_dim = code_dim
        self.decay = decay
        self.epsilon = epsilon
        init = rng.normal((n_codes, code_dim))
        # requires_grad deliberately True: the zero-gradient contract is
        # checked, not assumed away.
        self.embeddings = Tensor(init, requires_grad=True)
        self.ema_cluster_size = np.zeros(n_codes)
        self.ema_embed_sum = init.copy()

    def named_parameters(self, prefix: str = "codebook") -> dict[str, Tensor]:
        return {f"{prefix}.embeddings": self.embeddings}

    def state_arrays(self, prefix: str = "codebook") -> dict[str, np.ndarray]:
        return {f"{prefix}.ema_cluster_size": self.ema_cluster_size,
                f"{prefix}.ema_embed_sum": self.ema_embed_sum}

    def ema_update(self, z_e: np.ndarray, indices: np.ndarray) -> None:
        onehot = np.zeros((len(indices), self.n_codes))
        onehot[np.arange(len(indices)), indices] = 1.0
        counts = onehot.sum(axis=0)
        sums = onehot.T @ z_e
        d = self.decay
        self.ema_cluster_size = d * self.ema_cluster_size + (1 - d) * counts
        self.ema_embed_sum = d * self.ema_embed_sum + (1 - d) * sums
        # Laplace smoothing keeps empty codes finite.
        total = self.ema_cluster_size.sum()
        smoothed = ((self.ema_cluster_size + self.epsilon)
                    / (total + self.n_codes * self.epsilon) * total)
        self.embeddings.data = self.ema_embed_sum / smoothed[:, None]


def vq_quantize(z_e: Tensor, codebook: Codebook, update: bool = False
                ) -> tuple[Tensor, np.ndarray, Tensor, Tensor]:
    """Nearest-code assignment under Euclidean distance (ties: lowest index).

    Returns (z_q, indices, commitment, codebook_term); commitment and the
    reported codebook term are batch means of per-sample squared distances.
    When ``update`` is set the EMA accumulators absorb this batch.
    """
    flat = z_e.data
    emb = codebook.embeddings.data
    d2 = (flat ** 2).sum(1, keepdims=True) + (emb ** 2).sum(1) - 2.0 * flat @ emb.T
    indices = d2.argmin(axis=1)
    z_q = take(codebook.embeddings, indices)
    commitment = (z_e - stop_gradient(z_q)).square().sum(axis=-1).mean()
    codebook_term = (stop_gradient(z_e) - z_q).square().sum(axis=-1).mean()
    if update:
        codebook.ema_update(flat, indices)
    return z_q, indices, commitment, codebook_term
