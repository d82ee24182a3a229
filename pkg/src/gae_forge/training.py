"""Optimizers, schedulers, the training loop, and checkpoint I/O.

A run is fully determined by (configs, seed): shuffling, noise draws and
initialization all derive from the run seed. Non-finite losses or gradients
abort the attempt and restart the whole run from scratch with the starting
learning rate divided by 10, up to ``nan_restart_max`` times; every restart
lands in the run log as an event, never a silent continue.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .configio import ConfigError, canonical_dumps
from .models import ModelConfig, build_model
from .tensor import (Tensor, Rng, backward, decode_tensor, encode_tensor,
                     zero_grads)

__all__ = [
    "TrainConfig", "RunLog", "AdamState", "adam_step", "PlateauScheduler",
    "train", "fit_density_model", "save_checkpoint", "load_checkpoint",
    "TrainingFailed",
]


@dataclass
class TrainConfig:
    num_epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 100
    output_dir: str | None = None
    scheduler_factor: float = 0.5
    scheduler_patience: int = 10
    scheduler_rel_threshold: float = 1e-4
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    nan_restart_max: int = 3
    grad_clip: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive", "/learning_rate")
        if self.scheduler_patience < 1:
            raise ConfigError("scheduler_patience must be >= 1",
                              "/scheduler_patience")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "/batch_size")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) is not None}

    def to_json(self) -> str:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in obj:
            if key not in known:
                raise ConfigError(f"unknown train config key {key!r}", f"/{key}")
        return cls(**obj)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "")
        return cls.from_dict(obj)


class RunLog:
    """Append-only per-epoch records plus run-level events."""

    def __init__(self, config_hash: str = ""):
        self.config_hash = config_hash
        self.records: list[dict] = []
        self.events: list[dict] = []

    def log_epoch(self, epoch: int, train_loss: float, val_loss: float,
                  lr: float, wall_time: float) -> None:
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise ValueError("epochs must be strictly increasing")
        self.records.append({"epoch": epoch, "train_loss": train_loss,
                             "val_loss": val_loss, "lr": lr,
                             "wall_time": wall_time})

    def log_event(self, kind: str, **info) -> None:
        self.events.append({"event": kind, **info})

    @property
    def train_losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    @property
    def val_losses(self) -> list[float]:
        return [r["val_loss"] for r in self.records]

    def to_jsonl(self) -> str:
        lines = [canonical_dumps({"config_hash": self.config_hash})]
        lines += [canonical_dumps(r) for r in self.records]
        lines += [canonical_dumps(e) for e in self.events]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss,lr,wall_time"]
        rows += [f"{r['epoch']},{r['train_loss']},{r['val_loss']},{r['lr']},"
                 f"{r['wall_time']}" for r in self.records]
        return "\n".join(rows) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


class TrainingFailed(RuntimeError):
    """All restart attempts exhausted; carries the run log."""

    def __init__(self, message: str, run_log: RunLog):
        super().__init__(message)
        self.run_log = run_log


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              grad_clip: float | None = None) -> bool:
    """One bias-corrected Adam update; returns False (no update) on a
    non-finite gradient so the loop can trigger the instability path."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            return False
        grads[name] = g
    if grad_clip is not None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > grad_clip:
            scale = grad_clip / norm
            grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = g * (1 - b1) if m is None else b1 * m + (1 - b1) * g
        v = g * g * (1 - b2) if v is None else b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


class PlateauScheduler:
    """Halve (by ``factor``) the lr after ``patience`` epochs without a
    validation improvement; the counter resets on any improvement."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 10,
                 rel_threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.rel_threshold = rel_threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if not np.isfinite(val_loss):
            raise ValueError("validation loss must be finite")
        improved = (self.best - val_loss) > self.rel_threshold * max(1.0, abs(self.best)) \
            if np.isfinite(self.best) else True
        if improved:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


# -- the loop ------------------------------------------------------------------


def _flatten(data) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.ndim > 2:
        arr = arr.reshape(arr.shape[0], -1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    return arr


def _snapshot(params: dict[str, Tensor], extra: dict) -> dict:
    snap = {name: p.data.copy() for name, p in params.items()}
    snap.update({name: a.copy() for name, a in extra.items()})
    return snap


def _restore(model, snap: dict) -> None:
    for name, p in model.named_parameters().items():
        p.data = snap[name].copy()
    _restore_state_arrays(model, snap)


def _restore_state_arrays(model, values: dict) -> None:
    if getattr(model, "codebook", None) is not None:
        cb = model.codebook
        if "codebook.ema_cluster_size" in values:
            cb.ema_cluster_size = values["codebook.ema_cluster_size"].copy()
        if "codebook.ema_embed_sum" in values:
            cb.ema_embed_sum = values["codebook.ema_embed_sum"].copy()


def _run_attempt(builder, train_config: TrainConfig, train_x: np.ndarray,
                 val_x: np.ndarray, lr0: float, run_log: RunLog,
                 dataset_size: int, epoch_hook=None):
    model = builder()
    groups = model.param_groups()
    adam = {name: AdamState(beta1=train_config.adam_beta1,
                            beta2=train_config.adam_beta2,
                            eps=train_config.adam_eps) for name in groups}
    scheduler = PlateauScheduler(lr0, factor=train_config.scheduler_factor,
                                 patience=train_config.scheduler_patience,
                                 rel_threshold=train_config.scheduler_rel_threshold)
    shuffle_rng = Rng(train_config.seed).child(101)
    noise_rng = Rng(train_config.seed).child(202)
    eval_rng_seed = Rng(train_config.seed).child(303).seed

    n = len(train_x)
    bs = min(train_config.batch_size, n)
    best_val = np.inf
    best_snap = None
    start = time.time()
    for epoch in range(1, train_config.num_epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n - bs + 1, bs):
            batch = Tensor(train_x[order[lo:lo + bs]])
            result = model.loss_step(batch, noise_rng, update_state=True,
                                     dataset_size=dataset_size)
            total = result.breakdown.total.item()
            if not np.isfinite(total):
                return None, None, epoch, "non-finite loss"
            # Adversary steps first, model groups after; both gradients are
            # taken at the same parameter point.
            for gname in sorted(result.group_losses, key=_group_order):
                for g in groups.values():
                    zero_grads(g)
                backward(result.group_losses[gname])
                ok = adam_step(groups[gname], adam[gname], scheduler.lr,
                               grad_clip=train_config.grad_clip)
                if not ok:
                    return None, None, epoch, f"non-finite gradient ({gname})"
            epoch_losses.append(total)
        val_loss = evaluate_loss(model, val_x, Rng(eval_rng_seed + epoch),
                                 bs, dataset_size)
        if not np.isfinite(val_loss):
            return None, None, epoch, "non-finite validation loss"
        lr_now = scheduler.lr
        scheduler.step(val_loss)
        run_log.log_epoch(epoch, float(np.mean(epoch_losses)), val_loss,
                          lr_now, time.time() - start)
        if val_loss < best_val:
            best_val = val_loss
            best_snap = _snapshot(model.named_parameters(), model.state_arrays())
        if epoch_hook is not None:
            epoch_hook(model, epoch, val_loss)
    return model, (best_val, best_snap), None, None


def _group_order(name: str) -> int:
    return {"adversary": 0, "decoder": 1, "encoder": 2, "model": 3}.get(name, 4)


def evaluate_loss(model, data: np.ndarray, rng: Rng, batch_size: int,
                  dataset_size: int | None = None) -> float:
    """Mean full-objective loss over a dataset, without state updates."""
    losses = []
    n = len(data)
    bs = min(batch_size, n)
    for lo in range(0, n - bs + 1, bs):
        batch = Tensor(data[lo:lo + bs])
        res = model.loss_step(batch, rng, update_state=False,
                              dataset_size=dataset_size)
        losses.append(res.breakdown.total.item())
    return float(np.mean(losses))


def train(model_config: ModelConfig, train_config: TrainConfig,
          train_data, val_data, epoch_hook=None):
    """Train a zoo model; returns (model, run_log).

    The best-validation parameter snapshot is restored into the returned
    model; when ``output_dir`` is set both best and final checkpoints are
    written there together with the run log.
    """
    builder = lambda: build_model(model_config, seed=train_config.seed)
    return _train_with_builder(builder, train_config, train_data, val_data,
                               model_config=model_config, epoch_hook=epoch_hook)


def fit_density_model(builder, train_config: TrainConfig, train_data, val_data):
    """Same loop for anything exposing param_groups()/loss_terms (the
    latent-space density estimators)."""

    def wrapped():
        return _DensityAdapter(builder())

    model, run_log = _train_with_builder(wrapped, train_config, train_data,
                                         val_data, model_config=None)
    return model.inner, run_log


class _DensityAdapter:
    """Bridges a bare density model to the loss_step protocol."""

    def __init__(self, inner):
        self.inner = inner

    def param_groups(self):
        return self.inner.param_groups()

    def named_parameters(self):
        return self.inner.param_groups()["model"]

    def state_arrays(self):
        return {}

    def loss_step(self, batch, rng, update_state=True, dataset_size=None):
        from .models import LossBreakdown, StepResult
        total = self.inner.loss_terms(batch)
        breakdown = LossBreakdown(total=total, reconstruction=total,
                                  regularization=Tensor(0.0),
                                  weights={"reconstruction": 1.0,
                                           "regularization": 0.0})
        return StepResult(breakdown, {"model": total})


def _train_with_builder(builder, train_config: TrainConfig, train_data,
                        val_data, model_config=None, epoch_hook=None):
    train_x = _flatten(train_data)
    val_x = _flatten(val_data)
    dataset_size = len(train_x)
    config_hash = hashlib.sha256(
        ((model_config.to_json() if model_config else "density")
         + train_config.to_json()).encode()).hexdigest()[:16]
    run_log = RunLog(config_hash=config_hash)

    for attempt in range(train_config.nan_restart_max + 1):
        lr0 = train_config.learning_rate / (10.0 ** attempt)
        model, best, fail_epoch, reason = _run_attempt(
            builder, train_config, train_x, val_x, lr0, run_log, dataset_size,
            epoch_hook)
        if model is not None:
            best_val, best_snap = best
            if best_snap is not None:
                final_snap = _snapshot(model.named_parameters(),
                                       model.state_arrays())
                _restore(model, best_snap)
                if train_config.output_dir and model_config is not None:
                    _write_checkpoints(model, model_config, train_config,
                                       run_log, final_snap)
            return model, run_log
        # The whole run restarts from scratch: stash the failed attempt's
        # epochs in the event so the record stream stays strictly increasing.
        run_log.log_event("restart", attempt=attempt + 1, epoch=fail_epoch,
                          reason=reason,
                          next_learning_rate=lr0 / 10.0,
                          discarded_epochs=len(run_log.records))
        run_log.records.clear()
    raise TrainingFailed(
        f"training unstable after {train_config.nan_restart_max} restarts",
        run_log)


# -- checkpoints ----------------------------------------------------------------


def _write_checkpoints(model, model_config, train_config, run_log, final_snap):
    import os
    out = train_config.output_dir
    os.makedirs(out, exist_ok=True)
    save_checkpoint(model, model_config, train_config, out)
    final_dir = os.path.join(out, "final")
    os.makedirs(final_dir, exist_ok=True)
    best_snap = _snapshot(model.named_parameters(), model.state_arrays())
    _restore(model, final_snap)
    save_checkpoint(model, model_config, train_config, final_dir)
    _restore(model, best_snap)
    run_log.save(os.path.join(out, "run_log.jsonl"))
    with open(os.path.join(out, "run_log.csv"), "w", encoding="utf-8") as fh:
        fh.write(run_log.to_csv())


def save_checkpoint(model, model_config: ModelConfig,
                    train_config: TrainConfig | None, path) -> None:
    """Write model_config.json, training_config.json, manifest.json, params.bin.

    Tensor payloads are the byte-stable little-endian float64 encoding, so a
    save -> load -> save cycle reproduces params.bin bit for bit.
    """
    import os
    os.makedirs(path, exist_ok=True)
    named = dict(model.named_parameters())
    named.update({k: Tensor(v) for k, v in model.state_arrays().items()})
    manifest = [{"name": name, "shape": list(t.data.shape),
                 "dtype": str(t.data.dtype)} for name, t in named.items()]
    payload = b"".join(encode_tensor(t.data) for t in named.values())
    with open(os.path.join(path, "model_config.json"), "w", encoding="utf-8") as fh:
        fh.write(model_config.to_json())
    if train_config is not None:
        with open(os.path.join(path, "training_config.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(train_config.to_json())
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_dumps(manifest))
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(payload)


def load_checkpoint(path):
    """Rebuild the exact saved model; returns (model, model_config, train_config)."""
    import os
    with open(os.path.join(path, "model_config.json"), encoding="utf-8") as fh:
        model_config = ModelConfig.from_json(fh.read())
    train_config = None
    tc_path = os.path.join(path, "training_config.json")
    if os.path.exists(tc_path):
        with open(tc_path, encoding="utf-8") as fh:
            train_config = TrainConfig.from_json(fh.read())
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(os.path.join(path, "params.bin"), "rb") as fh:
        buf = fh.read()

    model = build_model(model_config, seed=0)
    named = dict(model.named_parameters())
    named_state = model.state_arrays()
    values: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest:
        arr, offset = decode_tensor(buf, offset)
        if list(arr.shape) != entry["shape"]:
            raise ValueError(
                f"checkpoint tensor {entry['name']!r} has shape "
                f"{list(arr.shape)}, manifest says {entry['shape']}")
        values[entry["name"]] = arr.astype(entry["dtype"])
    for name, p in named.items():
        if name not in values:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        if values[name].shape != p.data.shape:
            raise ValueError(
                f"tensor {name!r} shape mismatch: model {p.data.shape}, "
                f"checkpoint {values[name].shape}")
        p.data = values[name]
    for name in named_state:
        if name not in values:
            raise ValueError(f"checkpoint missing state tensor {name!r}")
    _restore_state_arrays(model, values)
    return model, model_config, train_config
