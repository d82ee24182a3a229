"""Neural building blocks: dense layers, MLP factories, MADE masked layers.

Weights are ``Tensor`` leaves registered by name so optimizers and
checkpointing can address them. Initialization is uniform fan-in scaled
(bound 1/sqrt(fan_in)) with zero biases, fully determined by the rng.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, Rng, leaky_relu, matmul, relu, sigmoid, softplus,
                     tanh, transpose)

__all__ = [
    "Linear", "Mlp", "MaskedLinear", "Made", "EncoderOutput",
    "GaussianEncoder", "DeterministicEncoder", "Decoder",
    "build_mlp", "build_made_masks", "apply_activation", "ACTIVATIONS",
]

ACTIVATIONS = ("identity", "relu", "leaky_relu", "tanh", "sigmoid", "softplus")


def apply_activation(x: Tensor, name: str) -> Tensor:
    if name == "identity":
        return x
    if name == "relu":
        return relu(x)
    if name == "leaky_relu":
        return leaky_relu(x)
    if name == "tanh":
        return tanh(x)
    if name == "sigmoid":
        return sigmoid(x)
    if name == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {name!r}")


def _init_weight(out_dim: int, in_dim: int, rng: Rng) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform((out_dim, in_dim), -bound, bound)


class Linear:
    """Dense layer y = act(x W^T + b) with weight stored [out x in]."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, activation: str = "identity"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = Tensor(_init_weight(out_dim, in_dim, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return apply_activation(matmul(x, transpose(self.weight)) + self.bias,
                                self.activation)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Mlp:
    """A chain of Linear layers; hidden activations fixed, output configurable."""

    def __init__(self, layers: list[Linear], input_dim: int, output_dim: int):
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} != {b.in_dim}")
        self.layers = layers
        self.input_dim = input_dim
        self.output_dim = output_dim

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def forward_with_hidden(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Final output plus every post-activation hidden layer output."""
        hidden = []
        for layer in self.layers:
            x = layer(x)
            hidden.append(x)
        return x, hidden[:-1]

    def named_parameters(self, prefix: str = "mlp") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        return out

    def weight_square_sum(self) -> Tensor:
        total = None
        for layer in self.layers:
            term = layer.weight.square().sum()
            total = term if total is None else total + term
        return total


def build_mlp(input_dim: int, hidden_dims, output_dim: int, activation: str,
              rng: Rng, output_activation: str = "identity") -> Mlp:
    """MLP with fan-in uniform init; empty ``hidden_dims`` gives one linear layer."""
    dims = [input_dim, *hidden_dims, output_dim]
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {dims}")
    layers = []
    for i in range(len(dims) - 1):
        act = activation if i < len(dims) - 2 else output_activation
        layers.append(Linear(dims[i], dims[i + 1], rng, activation=act))
    return Mlp(layers, input_dim, output_dim)


# -- MADE -----------------------------------------------------------------------

def build_made_masks(input_dim: int, hidden_sizes, ordering: str = "natural"
                     ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Binary masks enforcing the autoregressive property.

    Degrees are assigned sequentially (not randomly). The output layer holds
    2*d units, a shift and a log-scale per coordinate, and its mask is strict
    so that output i never sees input i. Returns (masks, degrees) where
    masks[k] has the shape of layer k's weight [out x in].
    """
    d = input_dim
    if d < 1:
        raise ValueError("input_dim must be >= 1")
    if ordering not in ("natural", "reversed"):
        raise ValueError(f"unknown ordering {ordering!r}")
    in_deg = np.arange(1, d + 1)
    if ordering == "reversed":
        in_deg = in_deg[::-1].copy()

    degrees = [in_deg]
    for h in hidden_sizes:
        if h < d - 1:
            warnings.warn(
                f"hidden size {h} < input_dim-1 ({d - 1}): degenerate "
                "autoregressive connectivity", RuntimeWarning)
        if d == 1:
            deg = np.ones(h, dtype=int)
        else:
            deg = (np.arange(h) % (d - 1)) + 1
        degrees.append(deg)
    out_deg = np.concatenate([in_deg, in_deg])
    degrees.append(out_deg)

    masks = []
    for k in range(1, len(degrees)):
        prev, cur = degrees[k - 1], degrees[k]
        if k == len(degrees) - 1:
            mask = cur[:, None] > prev[None, :]
        else:
            mask = cur[:, None] >= prev[None, :]
        masks.append(mask.astype(float))
    return masks, degrees


class MaskedLinear:
    """Linear layer whose effective weight is weight * mask at every forward."""

    def __init__(self, in_dim: int, out_dim: int, mask: np.ndarray, rng: Rng,
                 activation: str = "identity"):
        if mask.shape != (out_dim, in_dim):
            raise ValueError(f"mask shape {mask.shape} != ({out_dim}, {in_dim})")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.mask = Tensor(mask)
        self.weight = Tensor(_init_weight(out_dim, in_dim, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        w = self.weight * self.mask
        return apply_activation(matmul(x, transpose(w)) + self.bias, self.activation)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Made:
    """Masked autoregressive network emitting a (shift, raw-scale) pair.

    The 2*d outputs split into shift mu and an unconstrained scale s; the
    caller decides the gating (sigmoid for inverse flows, exp for density
    estimation).
    """

    def __init__(self, input_dim: int, hidden_sizes, rng: Rng,
                 ordering: str = "natural", activation: str = "relu"):
        self.input_dim = input_dim
        self.ordering = ordering
        masks, self.degrees = build_made_masks(input_dim, hidden_sizes, ordering)
        dims = [input_dim, *hidden_sizes, 2 * input_dim]
        self.layers = []
        for k in range(len(dims) - 1):
            act = activation if k < len(dims) - 2 else "identity"
            self.layers.append(
                MaskedLinear(dims[k], dims[k + 1], masks[k], rng, activation=act))

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        for layer in self.layers:
            x = layer(x)
        d = self.input_dim
        return x[:, :d], x[:, d:]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        return out


# -- encoders / decoders ------------------------------------------------------------

@dataclass
class EncoderOutput:
    """Posterior parameters; log_var is None for deterministic encoders."""
    mu: Tensor
    log_var: Tensor | None = None


class GaussianEncoder:
    """Variational encoder emitting (mu, log_var) from a shared trunk."""

    def __init__(self, input_dim: int, hidden_dims, latent_dim: int, rng: Rng,
                 activation: str = "relu"):
        self.latent_dim = latent_dim
        self.mlp = build_mlp(input_dim, hidden_dims, 2 * latent_dim, activation, rng)

    def __call__(self, x: Tensor) -> EncoderOutput:
        if x.shape[-1] != self.mlp.input_dim:
            raise ValueError(
                f"encoder expects inputs of dim {self.mlp.input_dim}, got {x.shape}")
        out = self.mlp(x)
        d = self.latent_dim
        return EncoderOutput(mu=out[:, :d], log_var=out[:, d:])

    def named_parameters(self, prefix: str = "encoder") -> dict[str, Tensor]:
        return self.mlp.named_parameters(prefix)


class DeterministicEncoder:
    """Encoder for AE/RAE/VQ-VAE/WAE: q(z|x) is a point mass at mu(x)."""

    def __init__(self, input_dim: int, hidden_dims, latent_dim: int, rng: Rng,
                 activation: str = "relu"):
        self.latent_dim = latent_dim
        self.mlp = build_mlp(input_dim, hidden_dims, latent_dim, activation, rng)

    def __call__(self, x: Tensor) -> EncoderOutput:
        if x.shape[-1] != self.mlp.input_dim:
            raise ValueError(
                f"encoder expects inputs of dim {self.mlp.input_dim}, got {x.shape}")
        return EncoderOutput(mu=self.mlp(x), log_var=None)

    def named_parameters(self, prefix: str = "encoder") -> dict[str, Tensor]:
        return self.mlp.named_parameters(prefix)


class Decoder:
    """Latent-to-data map; sigmoid output keeps pixels in (0,1), identity for
    unconstrained targets such as second-stage latent models."""

    def __init__(self, latent_dim: int, hidden_dims, output_dim: int, rng: Rng,
                 activation: str = "relu", output_activation: str = "sigmoid"):
        self.latent_dim = latent_dim
        self.mlp = build_mlp(latent_dim, hidden_dims, output_dim, activation, rng,
                             output_activation=output_activation)

    def __call__(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ValueError(
                f"decoder expects latents of dim {self.latent_dim}, got {z.shape}")
        return self.mlp(z)

    def named_parameters(self, prefix: str = "decoder") -> dict[str, Tensor]:
        return self.mlp.named_parameters(prefix)
