"""The unified model zoo: one object, nineteen objectives.

Every model exposes encode / decode / loss_step behind the same surface; the
loss dispatcher picks the objective from the config kind. Adversarial
objectives return extra per-group losses that the trainer differentiates
separately.
"""
from __future__ import annotations

import numpy as np

from .. import flows as flows_mod
from ..nn import (Decoder, DeterministicEncoder, EncoderOutput, GaussianEncoder,
                  Mlp, build_mlp)
from ..stats import (LOG_2PI, MmdKernelSpec, gaussian_log_density,
                     kl_diag_std_normal, mmd, reparameterize,
                     std_normal_log_density)
from ..tensor import (Tensor, Rng, clamp, concat, exp, logsumexp, matmul,
                      softplus, stop_gradient, transpose)
from .base import LossBreakdown, StepResult, reconstruction_nll, squared_error
from .config import ModelConfig
from .msssim import msssim
from .vq import Codebook, vq_quantize

__all__ = ["GaeModel", "build_model", "model_loss", "permute_dims"]

_GP_FD_STEP = 1e-4


def build_model(config: ModelConfig, seed: int = 0) -> "GaeModel":
    return GaeModel(config, Rng(seed))


class GaeModel:
    """Encoder/decoder pair plus whatever extra machinery the kind needs."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        d, flat = config.latent_dim, config.flat_input_dim
        enc_cls = DeterministicEncoder if config.is_deterministic else GaussianEncoder
        self.encoder = enc_cls(flat, config.hidden_dims, d, rng.child(1))
        self.decoder = Decoder(d, tuple(reversed(config.hidden_dims)), flat,
                               rng.child(2),
                               output_activation=config.output_activation)
        self.flow_chain = None
        self.iaf = None
        self.pseudo_net: Mlp | None = None
        self.codebook: Codebook | None = None
        self.adversary: Mlp | None = None

        kind = config.kind
        if kind == "vae_lin_nf":
            self.flow_chain = flows_mod.build_flow_chain(
                config.flow_sequence, d, rng.child(3))
        elif kind == "vae_iaf":
            self.iaf = flows_mod.IafChain(d, config.n_iaf_blocks,
                                          hidden_size=config.made_hidden_size,
                                          n_hidden=config.made_n_hidden,
                                          rng=rng.child(3))
        elif kind == "vamp":
            k = config.n_pseudo_inputs
            self.pseudo_net = build_mlp(k, [], flat, "relu", rng.child(3),
                                        output_activation="tanh")
            self._pseudo_seed = Tensor(np.eye(k))
        elif kind == "vqvae":
            self.codebook = Codebook(config.codebook_size, d, rng.child(3),
                                     decay=config.ema_decay,
                                     epsilon=config.ema_epsilon)
        if kind == "factor_vae":
            hidden = config.adversary_hidden_dims or (1000,) * 5
            self.adversary = build_mlp(d, hidden, 1, "leaky_relu", rng.child(4))
        elif kind == "aae":
            hidden = config.adversary_hidden_dims or (256,)
            self.adversary = build_mlp(d, hidden, 1, "relu", rng.child(4))
        elif kind == "vaegan":
            hidden = config.adversary_hidden_dims or config.hidden_dims
            if not 1 <= config.reconstruction_layer <= len(hidden):
                raise ValueError(
                    f"reconstruction_layer {config.reconstruction_layer} out of "
                    f"range for a discriminator with {len(hidden)} hidden layers")
            self.adversary = build_mlp(flat, hidden, 1, "relu", rng.child(4))

    # -- parameter plumbing ---------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        """Every tensor worth checkpointing, trainable or not, in stable order."""
        out = dict(self.encoder.named_parameters("encoder"))
        out.update(self.decoder.named_parameters("decoder"))
        if self.flow_chain is not None:
            out.update(flows_mod.chain_named_parameters(self.flow_chain, "flow"))
        if self.iaf is not None:
            out.update(self.iaf.named_parameters("iaf"))
        if self.pseudo_net is not None:
            out.update(self.pseudo_net.named_parameters("pseudo"))
        if self.codebook is not None:
            out.update(self.codebook.named_parameters("codebook"))
        if self.adversary is not None:
            out.update(self.adversary.named_parameters("adversary"))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Non-parameter state (EMA accumulators) for checkpointing."""
        if self.codebook is not None:
            return self.codebook.state_arrays("codebook")
        return {}

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        """Trainable parameters keyed by the loss that updates them."""
        enc = dict(self.encoder.named_parameters("encoder"))
        dec = dict(self.decoder.named_parameters("decoder"))
        model = {**enc, **dec}
        if self.flow_chain is not None:
            model.update(flows_mod.chain_named_parameters(self.flow_chain, "flow"))
        if self.iaf is not None:
            model.update(self.iaf.named_parameters("iaf"))
        if self.pseudo_net is not None:
            model.update(self.pseudo_net.named_parameters("pseudo"))
        # Codebook embeddings move by EMA only: never in a group.
        if self.config.kind == "vaegan":
            groups = {"encoder": enc, "decoder": dec,
                      "adversary": self.adversary.named_parameters("adversary")}
        elif self.adversary is not None:
            groups = {"model": model,
                      "adversary": self.adversary.named_parameters("adversary")}
        else:
            groups = {"model": model}
        return groups

    # -- API surface -----------------------------------------------------------

    def encode(self, x: Tensor) -> EncoderOutput:
        return self.encoder(x if isinstance(x, Tensor) else Tensor(x))

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z if isinstance(z, Tensor) else Tensor(z))

    def latent_codes(self, x) -> np.ndarray:
        """Posterior means (the representation used downstream)."""
        out = self.encode(x)
        return out.mu.data

    def reconstruct(self, x) -> Tensor:
        """Mean-path reconstruction decode(encode(x).mu)."""
        return self.decode(self.encode(x).mu)

    def loss_step(self, x: Tensor, rng: Rng, update_state: bool = True,
                  dataset_size: int | None = None) -> StepResult:
        return model_loss(self, x, rng, update_state=update_state,
                          dataset_size=dataset_size)

    # -- shared pieces -----------------------------------------------------------

    def _recon(self, x: Tensor, x_hat: Tensor) -> Tensor:
        cfg = self.config
        return reconstruction_nll(x, x_hat, cfg.reconstruction_loss,
                                  cfg.gaussian_sigma).mean()

    def pseudo_inputs(self) -> Tensor:
        return self.pseudo_net(self._pseudo_seed)


# -- objectives ------------------------------------------------------------------


def _plain(total, rec, reg, rec_w, reg_w, aux=None, aux_w=None, metrics=None,
           group="model"):
    weights = {"reconstruction": rec_w, "regularization": reg_w}
    if aux_w:
        weights.update(aux_w)
    breakdown = LossBreakdown(total=total, reconstruction=rec, regularization=reg,
                              auxiliary=aux or {}, weights=weights)
    return StepResult(breakdown, {group: total}, metrics or {})


def loss_ae(model: GaeModel, x: Tensor) -> StepResult:
    rec = squared_error(x, model.decode(model.encode(x).mu)).mean()
    return _plain(rec, rec, Tensor(0.0), 1.0, 0.0)


def loss_vae(model: GaeModel, x: Tensor, rng: Rng, beta: float = 1.0) -> StepResult:
    enc = model.encode(x)
    z = reparameterize(enc.mu, enc.log_var, rng)
    rec = model._recon(x, model.decode(z))
    kl = kl_diag_std_normal(enc.mu, enc.log_var).mean()
    return _plain(rec + beta * kl, rec, kl, 1.0, beta)


def loss_iwae(model: GaeModel, x: Tensor, rng: Rng) -> StepResult:
    cfg = model.config
    enc = model.encode(x)
    log_ws, recs, kls = [], [], []
    for _ in range(cfg.n_samples):
        z = reparameterize(enc.mu, enc.log_var, rng)
        rec_i = reconstruction_nll(x, model.decode(z), cfg.reconstruction_loss,
                                   cfg.gaussian_sigma)
        log_q = gaussian_log_density(z, enc.mu, enc.log_var)
        log_p = std_normal_log_density(z)
        log_ws.append((-rec_i + log_p - log_q).reshape((-1, 1)))
        recs.append(rec_i.mean())
        kls.append((log_q - log_p).mean())
    stacked = concat(log_ws, axis=1)                       # [batch, L]
    bound = logsumexp(stacked, axis=1) - float(np.log(cfg.n_samples))
    total = -bound.mean()
    rec = sum(recs[1:], recs[0]) * (1.0 / len(recs))
    reg = sum(kls[1:], kls[0]) * (1.0 / len(kls))
    breakdown = LossBreakdown(
        total=total, reconstruction=rec, regularization=reg,
        auxiliary={"neg_iwae_bound": total},
        weights={"reconstruction": 0.0, "regularization": 0.0,
                 "neg_iwae_bound": 1.0})
    return StepResult(breakdown, {"model": total})


def loss_vae_nf(model: GaeModel, x: Tensor, rng: Rng) -> StepResult:
    """Flowed-posterior ELBO, shared by the linear-flow and IAF variants."""
    enc = model.encode(x)
    z0 = reparameterize(enc.mu, enc.log_var, rng)
    base_log_q = gaussian_log_density(z0, enc.mu, enc.log_var)
    if model.flow_chain is not None:
        z_k, log_q = flows_mod.flow_chain_log_density(z0, model.flow_chain,
                                                      base_log_q)
    else:
        z_k, log_det = model.iaf.forward(z0)
        log_q = base_log_q - log_det
    rec = model._recon(x, model.decode(z_k))
    reg = (log_q - std_normal_log_density(z_k)).mean()
    return _plain(rec + reg, rec, reg, 1.0, 1.0)


def loss_vamp(model: GaeModel, x: Tensor, rng: Rng) -> StepResult:
    enc = model.encode(x)
    z = reparameterize(enc.mu, enc.log_var, rng)
    rec = model._recon(x, model.decode(z))
    log_q = gaussian_log_density(z, enc.mu, enc.log_var)
    pseudo = model.pseudo_inputs()                       # [K, D]
    enc_u = model.encode(pseudo)
    k = model.config.n_pseudo_inputs
    comp = [gaussian_log_density(z, enc_u.mu[i], enc_u.log_var[i]).reshape((-1, 1))
            for i in range(k)]
    log_prior = logsumexp(concat(comp, axis=1), axis=1) - float(np.log(k))
    reg = (log_q - log_prior).mean()
    return _plain(rec + reg, rec, reg, 1.0, 1.0)


def _pairwise_gaussian_log_density(z: Tensor, mu: Tensor, log_var: Tensor
                                   ) -> Tensor:
    """[i, j] = log N(z_i ; mu_j, diag exp(log_var_j)) via matmul algebra."""
    lv = clamp(log_var, min=-20.0, max=20.0)
    vinv = exp(-lv)
    quad = matmul(z.square(), transpose(vinv)) \
        - 2.0 * matmul(z, transpose(mu * vinv))
    const = (mu.square() * vinv + lv + LOG_2PI).sum(axis=1)   # [B], suffix add
    return -0.5 * (quad + const)


def loss_btc_vae(model: GaeModel, x: Tensor, rng: Rng,
                 dataset_size: int | None) -> StepResult:
    """Mutual-information / total-correlation / dimension-wise split of the KL,
    each term estimated with minibatch-weighted sampling."""
    cfg = model.config
    batch = x.shape[0]
    if batch < 2:
        raise ValueError("the minibatch-weighted estimator needs batch >= 2")
    n_data = dataset_size or cfg.dataset_size or batch
    enc = model.encode(x)
    z = reparameterize(enc.mu, enc.log_var, rng)
    rec = model._recon(x, model.decode(z))

    log_qz_cond = gaussian_log_density(z, enc.mu, enc.log_var)       # [B]
    log_nb = float(np.log(n_data * batch))
    log_qz = logsumexp(_pairwise_gaussian_log_density(z, enc.mu, enc.log_var),
                       axis=1) - log_nb
    marg_terms = []
    for t in range(cfg.latent_dim):
        sl = slice(t, t + 1)
        m_t = _pairwise_gaussian_log_density(z[:, sl], enc.mu[:, sl],
                                             enc.log_var[:, sl])
        marg_terms.append((logsumexp(m_t, axis=1) - log_nb).reshape((-1, 1)))
    log_qz_marginals = concat(marg_terms, axis=1).sum(axis=1)        # [B]
    log_pz = std_normal_log_density(z)

    mi = (log_qz_cond - log_qz).mean()
    tc = (log_qz - log_qz_marginals).mean()
    dwkl = (log_qz_marginals - log_pz).mean()
    reg = cfg.alpha * mi + cfg.beta * tc + cfg.gamma * dwkl
    total = rec + reg
    breakdown = LossBreakdown(
        total=total, reconstruction=rec, regularization=reg,
        auxiliary={"mutual_information": mi, "total_correlation": tc,
                   "dimension_wise_kl": dwkl},
        weights={"reconstruction": 1.0, "regularization": 1.0,
                 "mutual_information": 0.0, "total_correlation": 0.0,
                 "dimension_wise_kl": 0.0})
    return StepResult(breakdown, {"model": total})


def permute_dims(z: np.ndarray, rng: Rng) -> np.ndarray:
    """Shuffle each latent dimension independently across the batch."""
    out = np.empty_like(z)
    for t in range(z.shape[1]):
        out[:, t] = z[rng.permutation(z.shape[0]), t]
    return out


def loss_factor_vae(model: GaeModel, x: Tensor, rng: Rng) -> StepResult:
    """ELBO plus a discriminator-estimated total-correlation penalty.

    The incoming batch is split in half: the first half feeds the model
    loss, the second supplies the permuted sample the adversary learns to
    tell apart.
    """
    batch = x.shape[0]
    if batch < 4 or batch % 2:
        raise ValueError("factor_vae needs an even batch of at least 4 "
                         "(two half-batches per step)")
    half = batch // 2
    x1, x2 = x[:half], x[half:]
    enc1 = model.encode(x1)
    z1 = reparameterize(enc1.mu, enc1.log_var, rng)
    rec = model._recon(x1, model.decode(z1))
    kl = kl_diag_std_normal(enc1.mu, enc1.log_var).mean()
    # log(D/(1-D)) of a sigmoid discriminator is just its logit.
    tc_term = model.adversary(z1).mean()
    gamma = model.config.gamma
    total = rec + kl + gamma * tc_term

    enc2 = model.encode(x2)
    z2 = reparameterize(enc2.mu, enc2.log_var, rng)
    z_perm = Tensor(permute_dims(z2.data, rng))
    logit_true = model.adversary(stop_gradient(z1))
    logit_perm = model.adversary(z_perm)
    disc = 0.5 * (softplus(-logit_true).mean() + softplus(logit_perm).mean())

    breakdown = LossBreakdown(
        total=total, reconstruction=rec, regularization=kl,
        auxiliary={"tc_density_ratio": tc_term},
        weights={"reconstruction": 1.0, "regularization": 1.0,
                 "tc_density_ratio": gamma})
    return StepResult(breakdown, {"model": total, "adversary": disc})


def loss_mmd_vae(model: GaeModel, x: Tensor, rng: Rng) -> StepResult:
    """Shared MMD-regularized objective for the InfoVAE and WAE variants."""
    cfg = model.config
    if x.shape[0] < 2:
        raise ValueError("the MMD estimator needs batch >= 2")
    enc = model.encode(x)
    z = enc.mu if cfg.is_deterministic else reparameterize(enc.mu, enc.log_var, rng)
    rec = model._recon(x, model.decode(z))
    spec = MmdKernelSpec(kind="imq" if cfg.kind.endswith("imq") else "rbf",
                         sigma=cfg.kernel_bandwidth, latent_dim=cfg.latent_dim)
    prior = Tensor(rng.normal((x.shape[0], cfg.latent_dim)))
    penalty = mmd(z, prior, spec)
    lam = cfg.lambda_
    return _plain(rec + lam * penalty, rec, penalty, 1.0, lam)


def loss_aae(model: GaeModel, x: Tensor, rng: Rng) -> StepResult:
    cfg = model.config
    enc = model.encode(x)
    z = reparameterize(enc.mu, enc.log_var, rng)
    rec = model._recon(x, model.decode(z))
    logit_post = model.adversary(z)
    # Non-saturating generator term: push posterior samples to the prior label.
    gen = softplus(-logit_post).mean()
    total = rec + cfg.alpha * gen

    prior = Tensor(rng.normal((x.shape[0], cfg.latent_dim)))
    disc = 0.5 * (softplus(-model.adversary(prior)).mean()
                  + softplus(model.adversary(stop_gradient(z))).mean())
    breakdown = LossBreakdown(
        total=total, reconstruction=rec, regularization=gen,
        auxiliary={}, weights={"reconstruction": 1.0, "regularization": cfg.alpha})
    return StepResult(breakdown, {"model": total, "adversary": disc})


def loss_vaegan(model: GaeModel, x: Tensor, rng: Rng) -> StepResult:
    """Feature-space reconstruction with a three-way adversarial split."""
    cfg = model.config
    alpha, layer = cfg.alpha, cfg.reconstruction_layer
    enc = model.encode(x)
    z = reparameterize(enc.mu, enc.log_var, rng)
    x_rec = model.decode(z)
    x_gen = model.decode(Tensor(rng.normal((x.shape[0], cfg.latent_dim))))

    logit_x, hidden_x = model.adversary.forward_with_hidden(x)
    logit_rec, hidden_rec = model.adversary.forward_with_hidden(x_rec)
    feat_x, feat_rec = hidden_x[layer - 1], hidden_rec[layer - 1]
    feat_nll = (0.5 * (feat_x - feat_rec).square()
                + 0.5 * LOG_2PI).sum(axis=-1).mean()
    kl = kl_diag_std_normal(enc.mu, enc.log_var).mean()

    logit_gen = model.adversary(x_gen)
    gan_gen = 0.5 * (softplus(-logit_rec).mean() + softplus(-logit_gen).mean())
    encoder_loss = feat_nll + kl
    decoder_loss = alpha * feat_nll + (1.0 - alpha) * gan_gen
    disc = (softplus(-model.adversary(x)).mean()
            + softplus(model.adversary(stop_gradient(x_rec))).mean()
            + softplus(model.adversary(stop_gradient(x_gen))).mean()) * (1.0 / 3.0)

    total = encoder_loss + decoder_loss
    breakdown = LossBreakdown(
        total=total, reconstruction=feat_nll, regularization=kl,
        auxiliary={"gan_generator": gan_gen, "encoder_loss": encoder_loss,
                   "decoder_loss": decoder_loss},
        weights={"reconstruction": 1.0 + alpha, "regularization": 1.0,
                 "gan_generator": 1.0 - alpha, "encoder_loss": 0.0,
                 "decoder_loss": 0.0})
    return StepResult(breakdown,
                      {"encoder": encoder_loss, "decoder": decoder_loss,
                       "adversary": disc})


def loss_msssim_vae(model: GaeModel, x: Tensor, rng: Rng) -> StepResult:
    cfg = model.config
    if len(cfg.input_dim) != 2:
        raise ValueError("msssim_vae needs (H, W) image inputs")
    enc = model.encode(x)
    z = reparameterize(enc.mu, enc.log_var, rng)
    x_hat = model.decode(z)
    similarity = msssim(x, x_hat, cfg.input_dim, window=cfg.window_size,
                        scales=cfg.msssim_scales)
    rec = (1.0 - similarity).mean()
    kl = kl_diag_std_normal(enc.mu, enc.log_var).mean()
    beta = cfg.beta
    return _plain(rec + beta * kl, rec, kl, 1.0, beta)


def loss_vqvae(model: GaeModel, x: Tensor, update_state: bool) -> StepResult:
    cfg = model.config
    z_e = model.encode(x).mu
    z_q, indices, commitment, codebook_term = vq_quantize(
        z_e, model.codebook, update=update_state)
    decoder_in = z_e + stop_gradient(z_q - z_e)   # straight-through
    rec = model._recon(x, model.decode(decoder_in))
    beta = cfg.beta
    total = rec + beta * commitment
    used = len(np.unique(indices))
    breakdown = LossBreakdown(
        total=total, reconstruction=rec, regularization=commitment,
        auxiliary={"codebook_term": codebook_term},
        weights={"reconstruction": 1.0, "regularization": beta,
                 "codebook_term": 0.0})
    return StepResult(breakdown, {"model": total},
                      {"codes_in_use": float(used)})


def loss_rae(model: GaeModel, x: Tensor) -> StepResult:
    cfg = model.config
    z = model.encode(x).mu
    rec = squared_error(x, model.decode(z)).mean()
    embed = z.square().sum(axis=-1).mean()
    if cfg.kind == "rae_l2":
        reg_term = model.decoder.mlp.weight_square_sum()
        strategy = "l2"
    else:
        reg_term = _decoder_gradient_penalty(model, z)
        strategy = "fd_z"
    beta, lam = cfg.beta, cfg.lambda_
    total = rec + (beta / 2.0) * embed + lam * reg_term
    breakdown = LossBreakdown(
        total=total, reconstruction=rec, regularization=embed,
        auxiliary={"decoder_reg": reg_term},
        weights={"reconstruction": 1.0, "regularization": beta / 2.0,
                 "decoder_reg": lam})
    return StepResult(breakdown, {"model": total}, {"gp_strategy": strategy})


def _decoder_gradient_penalty(model: GaeModel, z: Tensor) -> Tensor:
    """Batch-mean squared Frobenius norm of the decoder Jacobian.

    The tape is first-order, so the Jacobian columns come from central
    finite differences over z; each probe decode stays on the tape, keeping
    the penalty differentiable in the decoder weights.
    """
    d = z.shape[1]
    h = _GP_FD_STEP
    z_const = stop_gradient(z)
    total = None
    for j in range(d):
        e_j = np.zeros(d)
        e_j[j] = h
        col = (model.decode(z_const + Tensor(e_j))
               - model.decode(z_const - Tensor(e_j))) * (1.0 / (2.0 * h))
        term = col.square().sum(axis=-1)
        total = term if total is None else total + term
    return total.mean()


_SIMPLE_DISPATCH = {
    "vae_lin_nf": loss_vae_nf,
    "vae_iaf": loss_vae_nf,
    "vamp": loss_vamp,
    "info_vae_rbf": loss_mmd_vae,
    "info_vae_imq": loss_mmd_vae,
    "wae_rbf": loss_mmd_vae,
    "wae_imq": loss_mmd_vae,
    "factor_vae": loss_factor_vae,
    "aae": loss_aae,
    "vaegan": loss_vaegan,
    "msssim_vae": loss_msssim_vae,
}


def model_loss(model: GaeModel, x, rng: Rng, update_state: bool = True,
               dataset_size: int | None = None) -> StepResult:
    """Route a batch to the objective selected by the config kind."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    kind = model.config.kind
    if kind == "ae":
        return loss_ae(model, x)
    if kind == "vae":
        return loss_vae(model, x, rng, beta=1.0)
    if kind == "beta_vae":
        return loss_vae(model, x, rng, beta=model.config.beta)
    if kind == "iwae":
        return loss_iwae(model, x, rng)
    if kind == "beta_tc_vae":
        return loss_btc_vae(model, x, rng, dataset_size)
    if kind == "vqvae":
        return loss_vqvae(model, x, update_state)
    if kind in ("rae_l2", "rae_gp"):
        return loss_rae(model, x)
    fn = _SIMPLE_DISPATCH.get(kind)
    if fn is None:
        raise ValueError(f"unknown model kind {kind!r}")
    return fn(model, x, rng)
