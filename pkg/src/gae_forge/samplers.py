"""Ex-post generation: fit a density to a trained model's latent codes and
decode draws from it.

Latent codes are posterior means for variational encoders (deterministic,
low-variance targets) and plain encoder outputs otherwise. The second-stage
scheme trains another VAE on the codes with identity-output decoder; its
draws map directly to latent codes, which the base decoder then renders.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .configio import ConfigError, canonical_dumps
from .flows import MafModel
from .models import ModelConfig, build_model
from .stats import GmmParams, fit_gmm_em, gmm_log_density, gmm_sample
from .tensor import Tensor, Rng, no_grad
from .training import TrainConfig, fit_density_model, train

__all__ = ["SamplerConfig", "SamplerState", "fit_sampler", "sample",
           "SAMPLER_KINDS"]

SAMPLER_KINDS = ("normal", "gmm", "maf", "two_stage", "vamp")

# Appendix-style fitting defaults for the learned samplers.
_MAF_DEFAULTS = {"n_blocks": 2, "hidden_sizes": [128, 128, 128],
                 "num_epochs": 200, "learning_rate": 1e-4, "batch_size": 100}
_TWO_STAGE_DEFAULTS = {"hidden_dims": [1024, 1024], "num_epochs": 200,
                       "learning_rate": 1e-4, "batch_size": 100}


@dataclass
class SamplerConfig:
    kind: str
    n_components: int = 10
    seed: int = 0
    maf: dict = field(default_factory=dict)
    two_stage: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler kind {self.kind!r}", "/kind")
        if self.n_components < 1:
            raise ConfigError("n_components must be >= 1", "/n_components")
        self.maf = {**_MAF_DEFAULTS, **self.maf}
        self.two_stage = {**_TWO_STAGE_DEFAULTS, **self.two_stage}

    def to_json(self) -> str:
        return canonical_dumps({"kind": self.kind,
                                "n_components": self.n_components,
                                "seed": self.seed, "maf": self.maf,
                                "two_stage": self.two_stage})

    @classmethod
    def from_dict(cls, obj: dict) -> "SamplerConfig":
        allowed = {"kind", "n_components", "seed", "maf", "two_stage"}
        for key in obj:
            if key not in allowed:
                raise ConfigError(f"unknown sampler config key {key!r}", f"/{key}")
        if "kind" not in obj:
            raise ConfigError("missing required key 'kind'", "/kind")
        return cls(**obj)

    @classmethod
    def from_json(cls, text: str) -> "SamplerConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "")
        return cls.from_dict(obj)


@dataclass
class SamplerState:
    """A fitted ex-post sampler: the kind plus its density payload."""
    kind: str
    latent_dim: int
    gmm: GmmParams | None = None
    maf: MafModel | None = None
    two_stage_model: object | None = None
    needs_data: bool = True

    def latent_log_density(self, z: np.ndarray) -> np.ndarray:
        """Held-out latent log density, where the kind defines one."""
        if self.kind == "normal":
            z = np.atleast_2d(z)
            return -0.5 * (z ** 2 + np.log(2 * np.pi)).sum(axis=1)
        if self.kind == "gmm":
            return gmm_log_density(self.gmm, z)
        if self.kind == "maf":
            with no_grad():
                return self.maf.log_prob(Tensor(np.atleast_2d(z))).data
        raise ValueError(f"no tractable latent density for kind {self.kind!r}")


def sampler_needs_data(kind: str) -> bool:
    return kind not in ("normal", "vamp")


def fit_sampler(kind: str, model, train_latents, val_latents, rng: Rng,
                config: SamplerConfig | None = None) -> SamplerState:
    """Fit one of the ex-post sampling schemes on latent codes.

    ``normal`` needs no fitting; ``vamp`` just checks the model actually
    carries pseudo-inputs. The fitted schemes consume the provided latents
    (train for fitting, val for the plateau scheduler where one runs).
    """
    config = config or SamplerConfig(kind=kind)
    if config.kind != kind:
        raise ValueError(f"config kind {config.kind!r} != requested {kind!r}")
    d = model.config.latent_dim

    if kind == "normal":
        return SamplerState(kind="normal", latent_dim=d, needs_data=False)

    if kind == "vamp":
        if model.config.kind != "vamp":
            raise ValueError("the vamp sampler needs a model with pseudo-inputs")
        return SamplerState(kind="vamp", latent_dim=d, needs_data=False)

    train_z = np.asarray(train_latents, dtype=float)
    if train_z.ndim != 2 or train_z.shape[1] != d:
        raise ValueError(f"latents must be [N, {d}], got {train_z.shape}")
    val_z = np.asarray(val_latents, dtype=float) if val_latents is not None \
        else train_z[-max(2, len(train_z) // 6):]

    if kind == "gmm":
        params, _ = fit_gmm_em(train_z, config.n_components, rng)
        return SamplerState(kind="gmm", latent_dim=d, gmm=params)

    if kind == "maf":
        opts = config.maf
        tc = TrainConfig(num_epochs=int(opts["num_epochs"]),
                         learning_rate=float(opts["learning_rate"]),
                         batch_size=int(opts["batch_size"]), seed=config.seed)
        builder = lambda: MafModel(d, n_blocks=int(opts["n_blocks"]),
                                   hidden_sizes=tuple(opts["hidden_sizes"]),
                                   rng=Rng(config.seed))
        maf, _ = fit_density_model(builder, tc, train_z, val_z)
        return SamplerState(kind="maf", latent_dim=d, maf=maf)

    if kind == "two_stage":
        opts = config.two_stage
        second_cfg = ModelConfig(kind="vae", input_dim=(d,), latent_dim=d,
                                 hidden_dims=tuple(opts["hidden_dims"]),
                                 reconstruction_loss="mse",
                                 output_activation="identity")
        tc = TrainConfig(num_epochs=int(opts["num_epochs"]),
                         learning_rate=float(opts["learning_rate"]),
                         batch_size=int(opts["batch_size"]), seed=config.seed)
        second, _ = train(second_cfg, tc, train_z, val_z)
        return SamplerState(kind="two_stage", latent_dim=d,
                            two_stage_model=second)

    raise ValueError(f"unknown sampler kind {kind!r}")


def draw_latents(state: SamplerState, model, n: int, rng: Rng) -> np.ndarray:
    if n <= 0:
        raise ValueError("n must be positive")
    d = state.latent_dim
    if state.kind == "normal":
        return rng.normal((n, d))
    if state.kind == "gmm":
        return gmm_sample(state.gmm, n, rng)
    if state.kind == "maf":
        return state.maf.sample(n, rng)
    if state.kind == "two_stage":
        u = rng.normal((n, d))
        with no_grad():
            return state.two_stage_model.decode(Tensor(u)).data
    if state.kind == "vamp":
        with no_grad():
            pseudo = model.pseudo_inputs()
            enc = model.encode(pseudo)
        pick = rng.integers(0, model.config.n_pseudo_inputs, (n,))
        mu = enc.mu.data[pick]
        std = np.exp(0.5 * np.clip(enc.log_var.data[pick], -20, 20))
        return mu + std * rng.normal((n, d))
    raise ValueError(f"unknown sampler kind {state.kind!r}")


def sample(state: SamplerState, model, n: int, rng: Rng) -> np.ndarray:
    """Draw latents per the fitted scheme and decode them; [n, D] in (0, 1)."""
    z = draw_latents(state, model, n, rng)
    with no_grad():
        return model.decode(Tensor(z)).data


# -- persistence ------------------------------------------------------------------


def save_sampler(state: SamplerState, path) -> None:
    os.makedirs(path, exist_ok=True)
    meta = {"kind": state.kind, "latent_dim": state.latent_dim}
    with open(os.path.join(path, "sampler.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_dumps(meta))
    if state.kind == "gmm":
        with open(os.path.join(path, "gmm.json"), "w", encoding="utf-8") as fh:
            fh.write(state.gmm.to_json())
    elif state.kind == "maf":
        _save_named_tensors(state.maf.named_parameters(),
                            os.path.join(path, "maf.bin"),
                            os.path.join(path, "maf_manifest.json"))
    elif state.kind == "two_stage":
        from .training import save_checkpoint
        save_checkpoint(state.two_stage_model, state.two_stage_model.config,
                        None, os.path.join(path, "two_stage"))


def load_sampler(path, model, config: SamplerConfig | None = None) -> SamplerState:
    with open(os.path.join(path, "sampler.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    kind, d = meta["kind"], int(meta["latent_dim"])
    state = SamplerState(kind=kind, latent_dim=d,
                         needs_data=sampler_needs_data(kind))
    if kind == "gmm":
        with open(os.path.join(path, "gmm.json"), encoding="utf-8") as fh:
            state.gmm = GmmParams.from_json(fh.read())
    elif kind == "maf":
        opts = (config or SamplerConfig(kind="maf")).maf
        maf = MafModel(d, n_blocks=int(opts["n_blocks"]),
                       hidden_sizes=tuple(opts["hidden_sizes"]), rng=Rng(0))
        _load_named_tensors(maf.named_parameters(),
                            os.path.join(path, "maf.bin"),
                            os.path.join(path, "maf_manifest.json"))
        state.maf = maf
    elif kind == "two_stage":
        from .training import load_checkpoint
        second, second_cfg, _ = load_checkpoint(os.path.join(path, "two_stage"))
        state.two_stage_model = second
    return state


def _save_named_tensors(named: dict, bin_path, manifest_path) -> None:
    from .tensor import encode_tensor
    manifest = [{"name": k, "shape": list(v.data.shape)} for k, v in named.items()]
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(canonical_dumps(manifest))
    with open(bin_path, "wb") as fh:
        for v in named.values():
            fh.write(encode_tensor(v.data))


def _load_named_tensors(named: dict, bin_path, manifest_path) -> None:
    from .tensor import decode_tensor
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(bin_path, "rb") as fh:
        buf = fh.read()
    offset = 0
    values = {}
    for entry in manifest:
        arr, offset = decode_tensor(buf, offset)
        values[entry["name"]] = arr
    for name, p in named.items():
        if name not in values:
            raise ValueError(f"sampler payload missing tensor {name!r}")
        p.data = values[name]
