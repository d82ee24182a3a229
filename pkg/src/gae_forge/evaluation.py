"""The five downstream tasks: reconstruction, generation quality,
linear-probe classification, k-means clustering, and interpolation.

Generation quality is a Frechet distance between Gaussians fitted to a
fixed, seeded random-projection + tanh embedding of real and generated
images: a deterministic, backbone-free stand-in that preserves the
sampler-vs-sampler orderings the benchmark cares about.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .stats import frechet_gaussian, kmeans
from .samplers import SamplerState, sample
from .tensor import Tensor, Rng, no_grad

__all__ = [
    "BenchmarkRecord", "feature_map", "task_reconstruction", "task_generation",
    "task_classification", "task_clustering", "task_interpolation",
    "write_pgm_grid", "TASKS",
]

TASKS = ("reconstruction", "generation", "classification", "clustering",
         "interpolation")
_FEATURE_DIM = 64
_COV_EIG_FLOOR = 1e-10


@dataclass
class BenchmarkRecord:
    """One (model, config, seed, task) -> metric row."""
    model_kind: str
    config_id: str
    seed: int
    latent_dim: int
    task: str
    metric: str
    value: float
    split: str

    def key(self) -> tuple:
        return (self.model_kind, self.config_id, self.seed, self.task,
                self.metric, self.split)

    def to_dict(self) -> dict:
        return asdict(self)


# -- task 1: reconstruction -------------------------------------------------------


def task_reconstruction(model, test_images: np.ndarray) -> float:
    """Mean per-pixel squared error of the mean-path reconstruction."""
    flat = np.asarray(test_images, float).reshape(len(test_images), -1)
    with no_grad():
        recon = model.reconstruct(Tensor(flat)).data
    return float(np.mean((flat - recon) ** 2))


# -- task 2: generation --------------------------------------------------------------


def feature_map(images: np.ndarray, feature_dim: int = _FEATURE_DIM,
                seed: int = 1234) -> np.ndarray:
    """tanh of a fixed seeded random projection of the flat pixels."""
    flat = np.asarray(images, float).reshape(len(images), -1)
    proj_rng = Rng(seed)
    proj = proj_rng.normal((flat.shape[1], feature_dim),
                           std=1.0 / np.sqrt(flat.shape[1]))
    return np.tanh(flat @ proj)


def _gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    # Rank-deficient covariances (collapsed generators) get an eigenvalue floor.
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    vals = np.clip(vals, _COV_EIG_FLOOR, None)
    return mu, (vecs * vals) @ vecs.T


def frechet_feature_distance(real: np.ndarray, generated: np.ndarray,
                             feature_dim: int = _FEATURE_DIM,
                             seed: int = 1234) -> float:
    f_real = feature_map(real, feature_dim, seed)
    f_gen = feature_map(generated, feature_dim, seed)
    mu1, cov1 = _gaussian_stats(f_real)
    mu2, cov2 = _gaussian_stats(f_gen)
    return frechet_gaussian(mu1, cov1, mu2, cov2)


def task_generation(model, sampler_state: SamplerState,
                    reference_images: np.ndarray, n: int, rng: Rng,
                    feature_dim: int = _FEATURE_DIM) -> float:
    generated = sample(sampler_state, model, n, rng)
    return frechet_feature_distance(reference_images, generated, feature_dim)


# -- task 3: classification ------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def _fit_linear_probe(z: np.ndarray, y: np.ndarray, n_classes: int, rng: Rng,
                      iters: int = 300, lr: float = 0.1):
    """Single linear layer + softmax trained with full-batch Adam."""
    n, d = z.shape
    w = rng.normal((d, n_classes), std=0.01)
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    m_w = np.zeros_like(w); v_w = np.zeros_like(w)
    m_b = np.zeros_like(b); v_b = np.zeros_like(b)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, iters + 1):
        probs = _softmax(z @ w + b)
        gl = (probs - onehot) / n
        gw = z.T @ gl
        gb = gl.sum(axis=0)
        m_w = b1 * m_w + (1 - b1) * gw; v_w = b2 * v_w + (1 - b2) * gw * gw
        m_b = b1 * m_b + (1 - b1) * gb; v_b = b2 * v_b + (1 - b2) * gb * gb
        w -= lr * (m_w / (1 - b1 ** t)) / (np.sqrt(v_w / (1 - b2 ** t)) + eps)
        b -= lr * (m_b / (1 - b1 ** t)) / (np.sqrt(v_b / (1 - b2 ** t)) + eps)
    return w, b


def _probe_accuracy(w, b, z, y) -> float:
    return float(np.mean((z @ w + b).argmax(axis=1) == y))


def task_classification(model, train_images, train_labels, val_images,
                        val_labels, test_images, test_labels, rng: Rng,
                        n_runs: int = 20) -> dict:
    """Linear-probe accuracy on latent means, averaged over fresh-init runs.

    Returns val/test means and standard deviations; config selection on the
    validation numbers is the harness's job, not this function's.
    """
    labels = np.asarray(train_labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("classification needs at least two classes")
    n_classes = int(classes.max()) + 1
    with no_grad():
        z_train = model.latent_codes(_flat(train_images))
        z_val = model.latent_codes(_flat(val_images))
        z_test = model.latent_codes(_flat(test_images))
    val_accs, test_accs = [], []
    for r in range(n_runs):
        w, b = _fit_linear_probe(z_train, labels, n_classes, rng.child(r))
        val_accs.append(_probe_accuracy(w, b, z_val, np.asarray(val_labels)))
        test_accs.append(_probe_accuracy(w, b, z_test, np.asarray(test_labels)))
    return {"val_mean": float(np.mean(val_accs)),
            "val_sd": float(np.std(val_accs)),
            "test_mean": float(np.mean(test_accs)),
            "test_sd": float(np.std(test_accs))}


# -- task 4: clustering -----------------------------------------------------------------


def majority_label_accuracy(assignments: np.ndarray, labels: np.ndarray) -> float:
    """Each cluster adopts its most prevalent class; fraction correct."""
    correct = 0
    for c in np.unique(assignments):
        members = labels[assignments == c]
        counts = np.bincount(members)
        correct += counts.max()
    return float(correct) / len(labels)


def task_clustering(model, train_images, train_labels, rng: Rng,
                    n_runs: int = 100, n_clusters: int | None = None) -> dict:
    labels = np.asarray(train_labels)
    if n_clusters is None:
        n_clusters = len(np.unique(labels))
    with no_grad():
        z = model.latent_codes(_flat(train_images))
    runs = kmeans(z, n_clusters, n_runs, rng)
    accs = [majority_label_accuracy(r.assignments, labels) for r in runs]
    return {"mean": float(np.mean(accs)), "sd": float(np.std(accs))}


# -- task 5: interpolation ----------------------------------------------------------------


def task_interpolation(model, x_start, x_end, steps: int) -> np.ndarray:
    """Decoded frames along the latent line between two encoded images."""
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    with no_grad():
        z0 = model.latent_codes(_flat(x_start))
        z1 = model.latent_codes(_flat(x_end))
        frames = []
        for t in np.linspace(0.0, 1.0, steps):
            frames.append(model.decode(Tensor((1.0 - t) * z0 + t * z1)).data)
    return np.stack([f[0] for f in frames])


def _flat(images) -> np.ndarray:
    arr = np.asarray(images, float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr.reshape(arr.shape[0], -1) if arr.ndim > 2 else arr


# -- image grids -------------------------------------------------------------------------


def write_pgm_grid(images: np.ndarray, path, cols: int = 8,
                   image_shape: tuple | None = None) -> None:
    """Tile images into one binary PGM (P5) grayscale grid."""
    arr = np.asarray(images, float)
    if arr.ndim == 2 and image_shape is not None:
        arr = arr.reshape(len(arr), *image_shape)
    if arr.ndim != 3:
        raise ValueError("need [N, H, W] images or flat rows plus image_shape")
    n, h, w = arr.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    grid = np.zeros((rows * h, cols * w))
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = arr[i]
    pixels = np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())
