"""Shared oracles: finite differences, quadrature, and model grad probes.

These helpers never call the tape's backward pass; they only evaluate
forward functions, so the gradients they produce are independent of the
reverse rules they are used to check.
"""
from __future__ import annotations

import numpy as np
import pytest

from gae_forge.tensor import Tensor, Rng, backward, zero_grads
from gae_forge.models import ModelConfig, build_model, model_loss


def finite_diff_grad(f, arrays, eps: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of scalar f(list of arrays)."""
    arrays = [np.asarray(a, dtype=float).copy() for a in arrays]
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(arrays)
            flat[i] = orig - eps
            lo = f(arrays)
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def numerical_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """[out_dim, in_dim] Jacobian of a vector map by central differences."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        xp = x.copy(); xp.reshape(-1)[j] += eps
        xm = x.copy(); xm.reshape(-1)[j] -= eps
        cols.append((f(xp) - f(xm)) / (2.0 * eps))
    return np.stack(cols, axis=-1)


_trapz = getattr(np, "trapezoid", None) or np.trapz


def trapezoid(ys: np.ndarray, xs: np.ndarray) -> float:
    return float(_trapz(ys, xs))


def model_grad_max_rel_err(config: ModelConfig, batch: np.ndarray,
                           loss_seed: int = 7, model_seed: int = 1,
                           eps: float = 1e-6, max_coords: int = 30,
                           coord_seed: int = 0,
                           group_losses: bool = False) -> float:
    """Max relative error between tape gradients of a model loss and central
    finite differences, with stochastic nodes frozen by a shared noise seed.

    Probes up to ``max_coords`` randomly chosen coordinates per parameter
    group. When ``group_losses`` is set, each group is checked against its
    own loss (the adversarial objectives); otherwise everything is checked
    against breakdown.total.
    """
    model = build_model(config, seed=model_seed)
    groups = model.param_groups()

    def evaluate():
        return model_loss(model, Tensor(batch), Rng(loss_seed),
                          update_state=False)

    result = evaluate()
    targets = (result.group_losses if group_losses
               else {g: result.breakdown.total for g in groups})

    worst = 0.0
    pick_rng = Rng(coord_seed)
    for gname, params in groups.items():
        if gname not in targets:
            continue
        for g in groups.values():
            zero_grads(g)
        backward(targets[gname])
        analytic = {name: (p.grad.copy() if p.grad is not None
                           else np.zeros_like(p.data))
                    for name, p in params.items()}

        def scalar():
            res = evaluate()
            t = (res.group_losses[gname] if group_losses
                 else res.breakdown.total)
            return t.item()

        all_coords = [(name, i) for name, p in params.items()
                      for i in range(p.data.size)]
        if len(all_coords) > max_coords:
            idx = pick_rng.choice(len(all_coords), size=max_coords,
                                  replace=False)
            coords = [all_coords[int(i)] for i in idx]
        else:
            coords = all_coords
        for name, i in coords:
            flat = params[name].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            hi = scalar()
            flat[i] = orig - eps
            lo = scalar()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            ana = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(ana - numeric) / max(1.0, abs(ana)))
    return worst


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_batch(rng):
    return rng.uniform((8, 16), 0.05, 0.95)
