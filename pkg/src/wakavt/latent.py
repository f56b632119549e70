"""Diagonal Gaussian latents: projection, sampling, KL, fusion.

Recognition and prior networks are two-layer tanh MLPs whose output
splits into (mu, log variance). Sampling goes through the standard
reparameterization so gradients flow to both moments. The fusion block
injects a latent into a decoder state via a gated low-rank update
followed by residual layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wakavt import tensor as T
from wakavt.attention import LayerNormParams, glorot, init_layer_norm
from wakavt.tensor import ParameterStore, ShapeMismatchError, Tensor


@dataclass
class DiagGaussian:
    """mu / logvar pairs; trailing axis is the latent width, leading axes
    (batch, time) are free."""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ShapeMismatchError(
                f"mu/logvar shapes differ: {self.mu.shape} vs {self.logvar.shape}"
            )

    @property
    def shape(self):
        return self.mu.shape


@dataclass
class GaussianProjectionParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_gaussian_projection(store: ParameterStore, prefix: str, d_in: int, d_hidden: int,
                             d_z: int, partition: str, rng) -> GaussianProjectionParams:
    return GaussianProjectionParams(
        w1=store.add(f"{prefix}.w1", glorot(rng, d_in, d_hidden), partition),
        b1=store.add(f"{prefix}.b1", np.zeros(d_hidden), partition),
        w2=store.add(f"{prefix}.w2", glorot(rng, d_hidden, 2 * d_z), partition),
        b2=store.add(f"{prefix}.b2", np.zeros(2 * d_z), partition),
    )


def project_gaussian(x: Tensor, params: GaussianProjectionParams) -> DiagGaussian:
    """Two-layer tanh MLP -> [mu, logvar] split on the trailing axis."""
    h = T.tanh(T.add(T.matmul(_at_least_2d(x), params.w1), params.b1))
    out = T.add(T.matmul(h, params.w2), params.b2)
    d_z = out.shape[-1] // 2
    mu = out[..., :d_z]
    logvar = out[..., d_z:]
    if x.ndim == 1:
        mu = T.reshape(mu, (d_z,))
        logvar = T.reshape(logvar, (d_z,))
    return DiagGaussian(mu=mu, logvar=logvar)


def _at_least_2d(x: Tensor) -> Tensor:
    return T.reshape(x, (1, -1)) if x.ndim == 1 else x


def reparameterize(dist: DiagGaussian, noise) -> Tensor:
    """z = mu + exp(logvar / 2) * noise, noise ~ N(0, I) injected by the caller."""
    eps = noise if isinstance(noise, Tensor) else Tensor(noise)
    if eps.shape != dist.shape:
        raise ShapeMismatchError(f"noise shape {eps.shape} != distribution shape {dist.shape}")
    return T.add(dist.mu, T.mul(T.exp(dist.logvar * 0.5), eps))


def kl_elements(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Per-coordinate KL(q || p) for diagonal Gaussians:
    0.5 * (logvar_p - logvar_q + (var_q + (mu_q - mu_p)^2) / var_p - 1)."""
    if q.shape != p.shape:
        raise ShapeMismatchError(f"KL operand shapes differ: {q.shape} vs {p.shape}")
    diff = T.sub(q.mu, p.mu)
    var_q = T.exp(q.logvar)
    inv_var_p = T.exp(T.neg(p.logvar))
    inner = T.mul(T.add(var_q, T.mul(diff, diff)), inv_var_p)
    return (T.sub(p.logvar, q.logvar) + inner - 1.0) * 0.5


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Total KL(q || p), summed over every coordinate."""
    return kl_elements(q, p).sum()


@dataclass
class FusionParams:
    w: Tensor  # d_z -> d_model
    u: Tensor  # d_model -> d_model
    v: Tensor  # d_model -> d_model
    ln: LayerNormParams


def init_fusion(store: ParameterStore, prefix: str, d_z: int, d_model: int,
                partition: str, rng) -> FusionParams:
    return FusionParams(
        w=store.add(f"{prefix}.w", glorot(rng, d_z, d_model), partition),
        u=store.add(f"{prefix}.u", glorot(rng, d_model, d_model), partition),
        v=store.add(f"{prefix}.v", glorot(rng, d_model, d_model), partition),
        ln=init_layer_norm(store, f"{prefix}.ln", d_model, partition),
    )


def fuse_latent(z: Tensor, o: Tensor, params: FusionParams,
                mode: str = "train", rng=None, dropout: float = 0.0) -> Tensor:
    """LayerNorm(o + Dropout(V tanh(W z + U o))): latent-conditioned
    residual update of the decoder state."""
    m = T.matmul(T.tanh(T.add(T.matmul(z, params.w), T.matmul(o, params.u))), params.v)
    if dropout > 0.0 and mode == "train":
        m = T.dropout_apply(m, dropout, mode, rng)
    return T.layer_norm(T.add(o, m), params.ln.gamma, params.ln.beta)
