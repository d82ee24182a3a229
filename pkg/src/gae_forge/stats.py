"""Probability and kernel machinery.

Tape-differentiable pieces (densities, KL, reparameterization, MMD) operate
on Tensors; the fitting algorithms (EM, k-means) and the Frechet distance are
plain numpy since nothing differentiates through them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, Rng, clamp, exp, expand, logsumexp, matmul, transpose

__all__ = [
    "LOG_2PI", "LOG_VAR_BOUND", "IMQ_SCALES", "MmdKernelSpec", "GmmParams",
    "gaussian_log_density", "std_normal_log_density", "kl_diag_std_normal",
    "reparameterize", "mmd", "pairwise_sq_dists",
    "fit_gmm_em", "gmm_sample", "gmm_log_density", "kmeans",
    "frechet_gaussian",
]

LOG_2PI = float(np.log(2.0 * np.pi))
# Keep exp(log_var) finite everywhere instead of letting NaNs hide bugs.
LOG_VAR_BOUND = 20.0
IMQ_SCALES = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)


def gaussian_log_density(z: Tensor, mu: Tensor, log_var: Tensor) -> Tensor:
    """Diagonal Gaussian log density summed over the last axis -> [batch]."""
    lv = clamp(log_var, min=-LOG_VAR_BOUND, max=LOG_VAR_BOUND)
    diff = z - mu
    terms = lv + diff.square() * exp(-lv) + LOG_2PI
    return terms.sum(axis=-1) * -0.5


def std_normal_log_density(z: Tensor) -> Tensor:
    return (z.square() + LOG_2PI).sum(axis=-1) * -0.5


def kl_diag_std_normal(mu: Tensor, log_var: Tensor) -> Tensor:
    """Closed-form KL(N(mu, diag exp(log_var)) || N(0, I)) per batch row."""
    lv = clamp(log_var, min=-LOG_VAR_BOUND, max=LOG_VAR_BOUND)
    terms = mu.square() + exp(lv) - 1.0 - lv
    return terms.sum(axis=-1) * 0.5


def reparameterize(mu: Tensor, log_var: Tensor, rng: Rng) -> Tensor:
    """z = mu + exp(log_var / 2) * eps; gradient flows to mu and log_var only."""
    if mu.shape != log_var.shape:
        raise ValueError(f"mu/log_var shape mismatch: {mu.shape} vs {log_var.shape}")
    lv = clamp(log_var, min=-LOG_VAR_BOUND, max=LOG_VAR_BOUND)
    eps = Tensor(rng.normal(mu.shape))
    return mu + exp(lv * 0.5) * eps


# -- MMD -------------------------------------------------------------------------

@dataclass
class MmdKernelSpec:
    """Kernel choice for the two-sample MMD regularizer."""
    kind: str  # "rbf" | "imq"
    sigma: float
    latent_dim: int
    imq_scales: tuple = IMQ_SCALES

    def __post_init__(self):
        if self.kind not in ("rbf", "imq"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("kernel bandwidth must be positive")

    @property
    def imq_constant(self) -> float:
        return 2.0 * self.latent_dim * self.sigma ** 2


def pairwise_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    """[n x m] matrix of squared Euclidean distances, tape-differentiable."""
    n, m = x.shape[0], y.shape[0]
    x2 = expand(x.square().sum(axis=1, keepdims=True), (n, m))   # [n,m]
    y2 = y.square().sum(axis=1)                                  # [m], suffix add
    cross = matmul(x, transpose(y))                              # [n,m]
    d2 = x2 + (y2 - 2.0 * cross)
    return clamp(d2, min=0.0)


def _kernel_mean(x: Tensor, y: Tensor, spec: MmdKernelSpec) -> Tensor:
    d2 = pairwise_sq_dists(x, y)
    if spec.kind == "rbf":
        return exp(d2 * (-1.0 / (2.0 * spec.sigma ** 2))).mean()
    c = spec.imq_constant
    total = None
    for s in spec.imq_scales:
        term = (s * c) / (d2 + s * c)
        total = term if total is None else total + term
    return total.mean()


def mmd(x: Tensor, y: Tensor, spec: MmdKernelSpec) -> Tensor:
    """Biased V-statistic MMD^2 estimate (non-negative, includes diagonals)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError(f"mmd needs at least 2 samples per side, "
                         f"got {x.shape[0]} and {y.shape[0]}")
    return _kernel_mean(x, x, spec) + _kernel_mean(y, y, spec) \
        - 2.0 * _kernel_mean(x, y, spec)


# -- Gaussian mixtures -------------------------------------------------------------

@dataclass
class GmmParams:
    """Mixture of Gaussians; covariances are [K,d,d] (full) or [K,d] (diagonal)."""
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    diagonal: bool = False

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "diagonal": self.diagonal,
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "GmmParams":
        obj = json.loads(text)
        return cls(weights=np.asarray(obj["weights"], dtype=float),
                   means=np.asarray(obj["means"], dtype=float),
                   covariances=np.asarray(obj["covariances"], dtype=float),
                   diagonal=bool(obj["diagonal"]))


def _component_log_pdfs(x: np.ndarray, params: GmmParams) -> np.ndarray:
    """[N, K] log N(x_i ; mu_k, cov_k)."""
    n, d = x.shape
    out = np.empty((n, params.n_components))
    for k in range(params.n_components):
        diff = x - params.means[k]
        if params.diagonal:
            var = params.covariances[k]
            maha = np.sum(diff * diff / var, axis=1)
            logdet = np.sum(np.log(var))
        else:
            cov = params.covariances[k]
            chol = np.linalg.cholesky(cov)
            sol = np.linalg.solve(chol, diff.T)
            maha = np.sum(sol * sol, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, k] = -0.5 * (d * LOG_2PI + logdet + maha)
    return out


def gmm_log_density(params: GmmParams, z: np.ndarray) -> np.ndarray:
    """Mixture log density per row via logsumexp over components."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    logp = _component_log_pdfs(z, params) + np.log(params.weights)[None, :]
    m = logp.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(logp - m).sum(axis=1, keepdims=True))).ravel()


def gmm_sample(params: GmmParams, n: int, rng: Rng) -> np.ndarray:
    """Ancestral sampling: component index then its Gaussian."""
    comps = rng.choice(params.n_components, size=n, p=params.weights)
    d = params.dim
    eps = rng.normal((n, d))
    out = np.empty((n, d))
    for k in range(params.n_components):
        sel = comps == k
        if not np.any(sel):
            continue
        if params.diagonal:
            out[sel] = params.means[k] + eps[sel] * np.sqrt(params.covariances[k])
        else:
            chol = np.linalg.cholesky(params.covariances[k])
            out[sel] = params.means[k] + eps[sel] @ chol.T
    return out


def _kmeans_pp_centers(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws."""
    n = len(x)
    centers = [x[int(rng.integers(0, n))]]
    for _ in range(1, k):
        d2 = np.min(
            ((x[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[int(rng.integers(0, n))])
            continue
        probs = d2 / total
        centers.append(x[int(rng.choice(n, p=probs))])
    return np.asarray(centers)


def fit_gmm_em(latents: np.ndarray, n_components: int, rng: Rng,
               max_iter: int = 200, tol: float = 1e-6, diagonal: bool = False,
               reg_covar: float = 1e-6,
               diagnostics: list | None = None) -> tuple[GmmParams, list[float]]:
    """EM with k-means++ initialization.

    Returns the fitted params and the per-iteration mean log-likelihood trace
    (non-decreasing up to the covariance ridge). A component that loses all
    responsibility mass is re-seeded from a random data point and flagged via
    ``diagnostics``.
    """
    x = np.asarray(latents, dtype=float)
    n, d = x.shape
    if n < n_components:
        raise ValueError(f"need at least {n_components} points, got {n}")
    means = _kmeans_pp_centers(x, n_components, rng)
    overall = np.cov(x, rowvar=False).reshape(d, d) + reg_covar * np.eye(d)
    if diagonal:
        covs = np.tile(np.diag(overall), (n_components, 1))
    else:
        covs = np.tile(overall, (n_components, 1, 1))
    weights = np.full(n_components, 1.0 / n_components)
    params = GmmParams(weights, means, covs, diagonal=diagonal)

    trace: list[float] = []
    prev_ll = -np.inf
    for _ in range(max_iter):
        # E step.
        logp = _component_log_pdfs(x, params) + np.log(params.weights)[None, :]
        m = logp.max(axis=1, keepdims=True)
        log_norm = m + np.log(np.exp(logp - m).sum(axis=1, keepdims=True))
        ll = float(log_norm.mean())
        trace.append(ll)
        resp = np.exp(logp - log_norm)

        # M step.
        mass = resp.sum(axis=0)
        for k in range(n_components):
            if mass[k] < 1e-10:
                if diagnostics is not None:
                    diagnostics.append(f"component {k} degenerate; re-seeded")
                idx = int(rng.integers(0, n))
                params.means[k] = x[idx]
                if diagonal:
                    params.covariances[k] = np.diag(overall)
                else:
                    params.covariances[k] = overall
                mass[k] = 1.0
                resp[:, k] = 1.0 / n
        weights = mass / mass.sum()
        means = (resp.T @ x) / mass[:, None]
        if diagonal:
            covs = np.empty((n_components, d))
            for k in range(n_components):
                diff = x - means[k]
                covs[k] = (resp[:, k][:, None] * diff * diff).sum(0) / mass[k] + reg_covar
        else:
            covs = np.empty((n_components, d, d))
            for k in range(n_components):
                diff = x - means[k]
                covs[k] = (resp[:, k][:, None] * diff).T @ diff / mass[k] \
                    + reg_covar * np.eye(d)
        params = GmmParams(weights, means, covs, diagonal=diagonal)

        if ll - prev_ll < tol * max(1.0, abs(ll)) and np.isfinite(prev_ll):
            break
        prev_ll = ll
    return params, trace


# -- k-means -----------------------------------------------------------------------

def _lloyd(x: np.ndarray, k: int, rng: Rng, max_iter: int
           ) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    centers = _kmeans_pp_centers(x, k, rng)
    assign = np.zeros(len(x), dtype=int)
    trace: list[float] = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(x)), assign].sum())
        trace.append(inertia)
        new_centers = centers.copy()
        for c in range(k):
            sel = assign == c
            if np.any(sel):
                new_centers[c] = x[sel].mean(axis=0)
            else:
                # Empty cluster: re-seed from the farthest point.
                far = int(d2.min(axis=1).argmax())
                new_centers[c] = x[far]
        if np.allclose(new_centers, centers):
            centers = new_centers
            break
        centers = new_centers
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(x)), assign].sum())
    trace.append(inertia)
    return assign, centers, inertia, trace


@dataclass
class KmeansRun:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_trace: list[float] = field(default_factory=list)


def kmeans(points: np.ndarray, n_clusters: int, n_runs: int, rng: Rng,
           max_iter: int = 100) -> list[KmeansRun]:
    """``n_runs`` independent Lloyd fits with k-means++ seeding.

    The list is ordered as run; callers wanting a single answer take the
    min-inertia element.
    """
    x = np.asarray(points, dtype=float)
    if len(x) < n_clusters:
        raise ValueError(f"need at least {n_clusters} points, got {len(x)}")
    runs = []
    for r in range(n_runs):
        assign, centers, inertia, trace = _lloyd(x, n_clusters, rng.child(r), max_iter)
        runs.append(KmeansRun(assign, centers, inertia, trace))
    return runs


# -- Frechet distance -----------------------------------------------------------------

def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues clipped to 0."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu1, cov1, mu2, cov2,
                     diagnostics: list | None = None) -> float:
    """2-Wasserstein^2 distance between Gaussians.

    ||mu1-mu2||^2 + Tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2)); the cross square
    root is evaluated as sqrtm(sqrtm(cov1) cov2 sqrtm(cov1)), which is
    symmetric PSD. Non-symmetric inputs are symmetrized with a diagnostic.
    """
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    cov1, cov2 = np.asarray(cov1, float), np.asarray(cov2, float)
    fixed = []
    for name, cov in (("cov1", cov1), ("cov2", cov2)):
        if not np.allclose(cov, cov.T, atol=1e-10):
            fixed.append(name)
    if fixed and diagnostics is not None:
        diagnostics.append(f"symmetrized non-symmetric input(s): {', '.join(fixed)}")
    cov1 = 0.5 * (cov1 + cov1.T)
    cov2 = 0.5 * (cov2 + cov2.T)
    root1 = _sqrtm_psd(cov1)
    cross = _sqrtm_psd(root1 @ cov2 @ root1)
    diff = mu1 - mu2
    val = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    return max(val, 0.0)
