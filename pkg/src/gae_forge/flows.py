"""Normalizing-flow transforms.

Planar and radial flows carry their own invertibility reparameterizations
(the raw parameters are unconstrained; the effective ones are built on every
forward). IAF chains gate scales through a sigmoid; the standalone masked
autoregressive density model uses exp scales so it can contract and expand
freely.
"""
from __future__ import annotations

import re

import numpy as np

from .nn import Made
from .tensor import (Tensor, Rng, clamp, exp, log, matmul, no_grad, rowscale,
                     sigmoid, softplus, sqrt, tanh)
from .stats import std_normal_log_density

__all__ = [
    "PlanarFlow", "RadialFlow", "IafChain", "MafModel",
    "planar_forward", "radial_forward", "flow_chain_forward",
    "flow_chain_log_density", "iaf_forward", "parse_flow_sequence",
    "build_flow_chain", "inv_softplus",
]


def inv_softplus(y: float) -> float:
    """Raw value r with softplus(r) == y, for y > 0."""
    if y <= 0:
        raise ValueError("softplus output must be positive")
    return float(np.log(np.expm1(y)))


class PlanarFlow:
    """z' = z + u_hat * tanh(w.z + b) with u_hat chosen so w.u_hat > -1."""

    def __init__(self, dim: int, rng: Rng):
        self.dim = dim
        w = rng.normal((dim,), std=1.0 / np.sqrt(dim))
        # Start at the exact identity: u such that the effective u_hat is 0.
        u = inv_softplus(1.0) * w / float(w @ w)
        u = u + rng.normal((dim,), std=0.01)
        self.u = Tensor(u, requires_grad=True)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(0.0, requires_grad=True)

    def u_hat(self) -> Tensor:
        w, u = self.w, self.u
        wu = (w * u).sum()
        m = softplus(wu) - 1.0
        return u + (m - wu) * w / w.square().sum()

    def w_dot_u_hat(self) -> Tensor:
        """w . u_hat by its defining identity softplus(w.u) - 1.

        Algebraically equal to dotting w with u_hat() but immune to the
        cancellation that re-derivation suffers at large |w.u|; keeps the
        log-det argument exactly positive.
        """
        return softplus((self.w * self.u).sum()) - 1.0

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return planar_forward(z, self)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.u": self.u, f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def planar_forward(z: Tensor, flow: PlanarFlow) -> tuple[Tensor, Tensor]:
    u_hat = flow.u_hat()
    a = matmul(z, flow.w.reshape((flow.dim, 1)))[:, 0] + flow.b   # [batch]
    h = tanh(a)
    z_new = z + matmul(h.reshape((-1, 1)), u_hat.reshape((1, flow.dim)))
    h_prime = 1.0 - h.square()
    wu = (flow.w * u_hat).sum()
    # 1 + h'(a) w.u_hat > 0 by the u_hat construction, so no abs needed.
    log_det = log(1.0 + h_prime * wu)
    return z_new, log_det


class RadialFlow:
    """z' = z + beta * (z - z0) / (alpha + r), r = ||z - z0||."""

    def __init__(self, dim: int, rng: Rng):
        self.dim = dim
        self.z0 = Tensor(rng.normal((dim,), std=0.1), requires_grad=True)
        # softplus(raw) = 1 gives alpha = 1 and beta = 0: an exact identity start.
        self.alpha_raw = Tensor(inv_softplus(1.0), requires_grad=True)
        self.beta_raw = Tensor(inv_softplus(1.0), requires_grad=True)

    def alpha(self) -> Tensor:
        return softplus(self.alpha_raw)

    def beta(self) -> Tensor:
        return softplus(self.beta_raw) - self.alpha()

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return radial_forward(z, self)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.z0": self.z0, f"{prefix}.alpha_raw": self.alpha_raw,
                f"{prefix}.beta_raw": self.beta_raw}


def radial_forward(z: Tensor, flow: RadialFlow) -> tuple[Tensor, Tensor]:
    alpha, beta = flow.alpha(), flow.beta()
    diff = z - flow.z0
    r = sqrt(diff.square().sum(axis=-1))                     # [batch]
    h = 1.0 / (alpha + r)
    z_new = z + rowscale(diff, beta * h)
    d = z.shape[-1]
    bh = beta * h
    log_det = (d - 1.0) * log(1.0 + bh) + log(1.0 + bh - beta * r * h.square())
    return z_new, log_det


# -- chains ---------------------------------------------------------------------

def parse_flow_sequence(seq: str) -> str:
    """Expand a flow layout string: 'PRPRP' stays, '10P' means ten planar flows."""
    s = seq.strip().upper()
    out = []
    for count, letter in re.findall(r"(\d*)([A-Z])", s):
        if letter not in ("P", "R"):
            raise ValueError(f"unknown flow letter {letter!r} in {seq!r}")
        out.append(letter * (int(count) if count else 1))
    expanded = "".join(out)
    if not expanded or "".join(re.findall(r"(\d*)([A-Z])", s)[0]) is None:
        raise ValueError(f"empty flow sequence {seq!r}")
    if not re.fullmatch(r"(\d*[A-Za-z])+", s):
        raise ValueError(f"malformed flow sequence {seq!r}")
    return expanded


def build_flow_chain(seq: str, dim: int, rng: Rng) -> list:
    chain = []
    for i, letter in enumerate(parse_flow_sequence(seq)):
        sub = rng.child(i)
        chain.append(PlanarFlow(dim, sub) if letter == "P" else RadialFlow(dim, sub))
    return chain


def flow_chain_forward(z: Tensor, chain) -> tuple[Tensor, Tensor]:
    total = None
    for flow in chain:
        z, ld = flow.forward(z)
        total = ld if total is None else total + ld
    if total is None:
        total = Tensor(np.zeros(z.shape[0]))
    return z, total


def flow_chain_log_density(z0: Tensor, chain, base_log_q: Tensor
                           ) -> tuple[Tensor, Tensor]:
    """Push z0 through the chain; log q(z_K) = base - sum of log-dets."""
    if not chain:
        raise ValueError("flow chain must be nonempty")
    z_k, total = flow_chain_forward(z0, chain)
    return z_k, base_log_q - total


def chain_named_parameters(chain, prefix: str) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for i, flow in enumerate(chain):
        out.update(flow.named_parameters(f"{prefix}.{i}"))
    return out


# -- inverse autoregressive chain ---------------------------------------------------

class IafChain:
    """Stack of masked autoregressive blocks applied in the sampling direction.

    Per block: (mu, s) = MADE(z); z <- mu + sigmoid(s) * z. Orderings
    alternate natural/reversed so later blocks condition the other way.
    """

    def __init__(self, dim: int, n_blocks: int, hidden_size: int = 32,
                 n_hidden: int = 2, rng: Rng | None = None):
        if n_blocks < 1:
            raise ValueError("need at least one block")
        rng = rng or Rng(0)
        self.dim = dim
        self.blocks = []
        for k in range(n_blocks):
            ordering = "natural" if k % 2 == 0 else "reversed"
            self.blocks.append(Made(dim, [hidden_size] * n_hidden, rng.child(k),
                                    ordering=ordering))

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return iaf_forward(z, self)

    def named_parameters(self, prefix: str = "iaf") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}.{i}"))
        return out


def iaf_forward(z: Tensor, chain: IafChain) -> tuple[Tensor, Tensor]:
    total = None
    for block in chain.blocks:
        mu, s = block(z)
        sig = sigmoid(s)
        z = mu + sig * z
        ld = log(sig).sum(axis=-1)
        total = ld if total is None else total + ld
    return z, total


# -- masked autoregressive density model ----------------------------------------------

class MafModel:
    """Exact-likelihood density model: stacked MADE blocks with exp scales.

    The density pass maps data to base noise, u = (x - mu) * exp(-s); sampling
    inverts each block coordinate by coordinate (one MADE call per dimension).
    """

    def __init__(self, dim: int, n_blocks: int = 2, hidden_sizes=(128, 128, 128),
                 rng: Rng | None = None, scale_clip: float = 10.0):
        rng = rng or Rng(0)
        self.dim = dim
        self.scale_clip = scale_clip
        self.blocks = []
        for k in range(n_blocks):
            ordering = "natural" if k % 2 == 0 else "reversed"
            self.blocks.append(Made(dim, list(hidden_sizes), rng.child(k),
                                    ordering=ordering))

    def forward_to_noise(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(base noise u, total log|det du/dx|) for a data batch."""
        u = x if isinstance(x, Tensor) else Tensor(x)
        total = None
        for block in self.blocks:
            mu, s = block(u)
            s = clamp(s, min=-self.scale_clip, max=self.scale_clip)
            u = (u - mu) * exp(-s)
            ld = (-s).sum(axis=-1)
            total = ld if total is None else total + ld
        return u, total

    def log_prob(self, x) -> Tensor:
        u, log_det = self.forward_to_noise(x)
        return std_normal_log_density(u) + log_det

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        u = rng.normal((n, self.dim))
        with no_grad():
            x = u
            for block in reversed(self.blocks):
                x = self._invert_block(block, x)
        return np.asarray(x if isinstance(x, np.ndarray) else x.data)

    def _invert_block(self, block: Made, u: np.ndarray) -> np.ndarray:
        """Solve x = mu(x) + u * exp(s(x)) one coordinate (degree) at a time."""
        x = np.zeros_like(u)
        in_deg = block.degrees[0]
        order = np.argsort(in_deg)  # fill lowest degree first
        for idx in order:
            mu, s = block(Tensor(x))
            s_np = np.clip(s.data, -self.scale_clip, self.scale_clip)
            x[:, idx] = mu.data[:, idx] + u[:, idx] * np.exp(s_np[:, idx])
        return x

    def named_parameters(self, prefix: str = "maf") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}.{i}"))
        return out

    # Density-model protocol used by the shared trainer.
    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        return {"model": self.named_parameters()}

    def loss_terms(self, x: Tensor):
        return -self.log_prob(x).mean()
