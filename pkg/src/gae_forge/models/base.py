"""Shared loss bookkeeping and reconstruction terms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..stats import LOG_2PI
from ..tensor import Tensor, clamp, log

__all__ = ["LossBreakdown", "StepResult", "reconstruction_nll", "squared_error"]

_BCE_EPS = 1e-7


@dataclass
class LossBreakdown:
    """Scalar decomposition of one batch loss.

    ``weights`` records how the parts recombine: total must equal
    weights["reconstruction"] * reconstruction +
    weights["regularization"] * regularization +
    sum over auxiliary entries of weights[name] * auxiliary[name].
    """
    total: Tensor
    reconstruction: Tensor
    regularization: Tensor
    auxiliary: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def recompose(self) -> float:
        val = (self.weights.get("reconstruction", 0.0) * self.reconstruction.item()
               + self.weights.get("regularization", 0.0) * self.regularization.item())
        for name, part in self.auxiliary.items():
            val += self.weights.get(name, 0.0) * part.item()
        return val

    def scalars(self) -> dict:
        out = {"total": self.total.item(),
               "reconstruction": self.reconstruction.item(),
               "regularization": self.regularization.item()}
        for name, part in self.auxiliary.items():
            out[name] = part.item()
        return out


@dataclass
class StepResult:
    """One training step's losses: the breakdown plus the per-optimizer map.

    ``group_losses`` names the scalar each parameter group differentiates;
    plain models expose a single "model" entry, adversarial ones add
    "adversary" (and the three-way split adds "encoder"/"decoder").
    """
    breakdown: LossBreakdown
    group_losses: dict
    metrics: dict = field(default_factory=dict)


def squared_error(x: Tensor, x_hat: Tensor) -> Tensor:
    """Per-sample squared reconstruction error, summed over pixels."""
    return (x - x_hat).square().sum(axis=-1)


def reconstruction_nll(x: Tensor, x_hat: Tensor, kind: str,
                       sigma: float = 1.0) -> Tensor:
    """Per-sample negative reconstruction log-likelihood [batch].

    bce treats pixels as Bernoulli means, mse is the raw squared error, and
    gaussian is the exact N(x; x_hat, sigma^2 I) term needed when the loss
    must be a true likelihood (bound-ordering checks).
    """
    if kind == "bce":
        p = clamp(x_hat, min=_BCE_EPS, max=1.0 - _BCE_EPS)
        ll = x * log(p) + (1.0 - x) * log(1.0 - p)
        return -ll.sum(axis=-1)
    if kind == "mse":
        return squared_error(x, x_hat)
    if kind == "gaussian":
        quad = (x - x_hat).square() * (1.0 / (2.0 * sigma ** 2))
        const = 0.5 * LOG_2PI + float(np.log(sigma))
        return (quad + const).sum(axis=-1)
    raise ValueError(f"unknown reconstruction loss {kind!r}")
