"""Model configuration: one dataclass covering all 19 objectives.

Only the fields relevant to a kind may be set; everything round-trips
through canonical JSON losslessly. JSON keys follow the hyper-parameter
names of the benchmark grids (beta, gamma, lambda, kernel_bandwidth,
n_samples, n_pseudo_inputs, flow_sequence, window_size,
reconstruction_layer, codebook_size, ema_decay).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from ..configio import ConfigError, canonical_dumps

__all__ = ["MODEL_KINDS", "DETERMINISTIC_KINDS", "ADVERSARIAL_KINDS",
           "ModelConfig", "ConfigError"]

MODEL_KINDS = (
    "ae", "vae", "beta_vae", "iwae", "vae_lin_nf", "vae_iaf", "vamp",
    "beta_tc_vae", "factor_vae", "info_vae_rbf", "info_vae_imq",
    "wae_rbf", "wae_imq", "aae", "vaegan", "msssim_vae", "vqvae",
    "rae_l2", "rae_gp",
)

# Point-mass posteriors: the encoder emits mu only.
DETERMINISTIC_KINDS = frozenset({"ae", "rae_l2", "rae_gp", "vqvae",
                                 "wae_rbf", "wae_imq"})
# Models carrying a separately-optimized adversary network.
ADVERSARIAL_KINDS = frozenset({"factor_vae", "aae", "vaegan"})
# Squared-error reconstruction is part of these objectives, not a choice.
_SQUARED_ERROR_KINDS = frozenset({"ae", "rae_l2", "rae_gp"})

# JSON key <-> attribute (lambda is a Python keyword).
_JSON_ALIASES = {"lambda": "lambda_"}
_ATTR_ALIASES = {v: k for k, v in _JSON_ALIASES.items()}

# Optional fields and the kinds allowed to set them.
_FIELD_KINDS = {
    "beta": {"beta_vae", "beta_tc_vae", "msssim_vae", "vqvae", "rae_l2", "rae_gp"},
    "alpha": {"beta_tc_vae", "aae", "vaegan", "info_vae_rbf", "info_vae_imq"},
    "gamma": {"beta_tc_vae", "factor_vae"},
    "lambda_": {"info_vae_rbf", "info_vae_imq", "wae_rbf", "wae_imq",
                "rae_l2", "rae_gp"},
    "kernel_bandwidth": {"info_vae_rbf", "info_vae_imq", "wae_rbf", "wae_imq"},
    "n_samples": {"iwae"},
    "n_pseudo_inputs": {"vamp"},
    "flow_sequence": {"vae_lin_nf"},
    "made_hidden_size": {"vae_iaf"},
    "made_n_hidden": {"vae_iaf"},
    "n_iaf_blocks": {"vae_iaf"},
    "window_size": {"msssim_vae"},
    "msssim_scales": {"msssim_vae"},
    "reconstruction_layer": {"vaegan"},
    "codebook_size": {"vqvae"},
    "ema_decay": {"vqvae"},
    "ema_epsilon": {"vqvae"},
    "adversary_hidden_dims": set(ADVERSARIAL_KINDS),
    "dataset_size": {"beta_tc_vae"},
}

# Kind-specific defaults, anchored to the benchmark grids.
_KIND_DEFAULTS = {
    "beta_vae": {"beta": 1.0},
    "iwae": {"n_samples": 5},
    "vae_lin_nf": {"flow_sequence": "PRPRP"},
    "vae_iaf": {"made_hidden_size": 32, "made_n_hidden": 2, "n_iaf_blocks": 2},
    "vamp": {"n_pseudo_inputs": 10},
    "beta_tc_vae": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0},
    "factor_vae": {"gamma": 1.0},
    "info_vae_rbf": {"alpha": 0.0, "lambda_": 10.0, "kernel_bandwidth": 1.0},
    "info_vae_imq": {"alpha": 0.0, "lambda_": 10.0, "kernel_bandwidth": 1.0},
    "wae_rbf": {"lambda_": 1.0, "kernel_bandwidth": 1.0},
    "wae_imq": {"lambda_": 1.0, "kernel_bandwidth": 1.0},
    "aae": {"alpha": 0.5},
    "vaegan": {"alpha": 0.8, "reconstruction_layer": 2},
    "msssim_vae": {"beta": 1e-2, "window_size": 3, "msssim_scales": 2},
    "vqvae": {"beta": 0.25, "codebook_size": 128, "ema_decay": 0.99,
              "ema_epsilon": 1e-5},
    "rae_l2": {"beta": 1e-3, "lambda_": 1e-3},
    "rae_gp": {"beta": 1e-3, "lambda_": 1e-3},
}

_INT_FIELDS = {"n_samples", "n_pseudo_inputs", "made_hidden_size",
               "made_n_hidden", "n_iaf_blocks", "window_size", "msssim_scales",
               "reconstruction_layer", "codebook_size", "dataset_size"}


@dataclass
class ModelConfig:
    kind: str
    input_dim: tuple  # (D,) for flat vectors or (H, W) for images
    latent_dim: int
    hidden_dims: tuple = (256, 128)
    reconstruction_loss: str = ""  # filled per kind: bce default, mse for AE/RAE
    gaussian_sigma: float = 1.0
    output_activation: str = "sigmoid"
    # Kind-specific knobs (None means irrelevant to this kind).
    beta: float | None = None
    alpha: float | None = None
    gamma: float | None = None
    lambda_: float | None = None
    kernel_bandwidth: float | None = None
    n_samples: int | None = None
    n_pseudo_inputs: int | None = None
    flow_sequence: str | None = None
    made_hidden_size: int | None = None
    made_n_hidden: int | None = None
    n_iaf_blocks: int | None = None
    window_size: int | None = None
    msssim_scales: int | None = None
    reconstruction_layer: int | None = None
    codebook_size: int | None = None
    ema_decay: float | None = None
    ema_epsilon: float | None = None
    adversary_hidden_dims: tuple | None = None
    dataset_size: int | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}", "/kind")
        self.input_dim = _canonical_input_dim(self.input_dim)
        if not isinstance(self.latent_dim, int) or self.latent_dim < 1:
            raise ConfigError("latent_dim must be a positive integer",
                              "/latent_dim")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.adversary_hidden_dims is not None:
            self.adversary_hidden_dims = tuple(int(h)
                                               for h in self.adversary_hidden_dims)
        if not self.reconstruction_loss:
            self.reconstruction_loss = ("mse" if self.kind in _SQUARED_ERROR_KINDS
                                        else "bce")
        if self.reconstruction_loss not in ("bce", "mse", "gaussian"):
            raise ConfigError(
                f"reconstruction_loss must be bce, mse or gaussian, "
                f"got {self.reconstruction_loss!r}", "/reconstruction_loss")
        if self.kind in _SQUARED_ERROR_KINDS and self.reconstruction_loss != "mse":
            raise ConfigError(
                f"{self.kind} uses a squared-error objective; "
                "reconstruction_loss must be mse", "/reconstruction_loss")
        if self.output_activation not in ("sigmoid", "identity"):
            raise ConfigError("output_activation must be sigmoid or identity",
                              "/output_activation")
        # Reject irrelevant fields, fill kind defaults.
        for name, kinds in _FIELD_KINDS.items():
            val = getattr(self, name)
            if val is not None and self.kind not in kinds:
                raise ConfigError(
                    f"field {_ATTR_ALIASES.get(name, name)!r} is not valid for "
                    f"kind {self.kind!r}", f"/{_ATTR_ALIASES.get(name, name)}")
        for name, default in _KIND_DEFAULTS.get(self.kind, {}).items():
            if getattr(self, name) is None:
                setattr(self, name, default)
        self._validate_values()

    def _validate_values(self):
        def positive(name, allow_zero=False):
            val = getattr(self, name)
            if val is None:
                return
            lo_ok = val >= 0 if allow_zero else val > 0
            if not lo_ok:
                raise ConfigError(
                    f"{_ATTR_ALIASES.get(name, name)} must be "
                    f"{'non-negative' if allow_zero else 'positive'}, got {val}",
                    f"/{_ATTR_ALIASES.get(name, name)}")

        positive("beta", allow_zero=True)
        positive("gamma", allow_zero=True)
        positive("lambda_", allow_zero=True)
        positive("kernel_bandwidth")
        for name in _INT_FIELDS:
            val = getattr(self, name)
            if val is not None and (not isinstance(val, int) or val < 1):
                raise ConfigError(f"{name} must be a positive integer, got {val}",
                                  f"/{name}")
        if self.kind == "aae" and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("aae alpha must lie in [0, 1]", "/alpha")
        if self.kind == "vaegan" and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("vaegan alpha must lie in [0, 1]", "/alpha")
        if self.kind in ("info_vae_rbf", "info_vae_imq") and self.alpha != 0.0:
            raise ConfigError(
                "info_vae alpha is fixed at 0 (the benchmarked setting)", "/alpha")
        if self.kind == "vqvae" and not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)", "/ema_decay")

    # -- derived ----------------------------------------------------------

    @property
    def flat_input_dim(self) -> int:
        n = 1
        for s in self.input_dim:
            n *= s
        return n

    @property
    def is_deterministic(self) -> bool:
        return self.kind in DETERMINISTIC_KINDS

    @property
    def is_adversarial(self) -> bool:
        return self.kind in ADVERSARIAL_KINDS

    # -- JSON ----------------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if val is None:
                continue
            if isinstance(val, tuple):
                val = list(val)
            out[_ATTR_ALIASES.get(f.name, f.name)] = val
        return out

    def to_json(self) -> str:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        if not isinstance(obj, dict):
            raise ConfigError("model config must be a JSON object", "")
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, val in obj.items():
            attr = _JSON_ALIASES.get(key, key)
            if attr not in known:
                raise ConfigError(f"unknown config key {key!r}", f"/{key}")
            kwargs[attr] = val
        for req in ("kind", "input_dim", "latent_dim"):
            if req not in kwargs:
                raise ConfigError(f"missing required key {req!r}", f"/{req}")
        if isinstance(kwargs.get("hidden_dims"), list):
            kwargs["hidden_dims"] = tuple(kwargs["hidden_dims"])
        if isinstance(kwargs.get("adversary_hidden_dims"), list):
            kwargs["adversary_hidden_dims"] = tuple(kwargs["adversary_hidden_dims"])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "")
        return cls.from_dict(obj)


def _canonical_input_dim(value) -> tuple:
    if isinstance(value, int):
        dims = (value,)
    else:
        dims = tuple(int(v) for v in value)
    if len(dims) == 3:
        if dims[0] != 1:
            raise ConfigError("only single-channel images are supported",
                              "/input_dim")
        dims = dims[1:]
    if len(dims) not in (1, 2) or any(d < 1 for d in dims):
        raise ConfigError(f"input_dim must be (D,), (H, W) or (1, H, W); "
                          f"got {value}", "/input_dim")
    return dims
