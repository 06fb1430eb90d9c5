"""The conditional argmax-flow policy and its log-probability estimators."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import NumericalError, SchemaError
from .coupling import CouplingFlow, LatentPoint, mlp
from .posterior import FlowPosterior, GaussianPosterior, PosteriorSample, diag_normal_logpdf
from .threshold import argmax_decode

ALPHA_MODES = ("static", "trainable", "adaptive", "elbo")
POSTERIOR_MODES = ("flow", "gaussian")


@dataclass
class BaseParams:
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class LogProbBounds:
    """Per-row ELBO, CUBO and their weighted combination."""

    elbo: torch.Tensor
    cubo: torch.Tensor
    sandwich: torch.Tensor
    alpha_used: torch.Tensor

    def detach(self):
        return LogProbBounds(self.elbo.detach(), self.cubo.detach(), self.sandwich.detach(), self.alpha_used.detach())


@dataclass
class BoundEstimates:
    """ELBO/CUBO point estimates with Monte-Carlo standard errors (diagnostics only)."""

    elbo: torch.Tensor
    elbo_se: torch.Tensor
    cubo: torch.Tensor
    cubo_se: torch.Tensor
    n_samples: int


class StateEncoder(nn.Module):
    """Maps an observation to the mean and scale of the Gaussian base."""

    def __init__(self, obs_dim, latent_dim, hidden=64, n_hidden=2, sigma_min=1e-3):
        super().__init__()
        self.obs_dim = obs_dim
        self.latent_dim = latent_dim
        self.sigma_min = sigma_min
        self.net = mlp(obs_dim, 2 * latent_dim, hidden, n_hidden)

    def forward(self, obs):
        if obs.dim() != 2 or obs.shape[-1] != self.obs_dim:
            raise SchemaError(f"expected observation batch of shape (B, {self.obs_dim}), got {tuple(obs.shape)}")
        mu, raw = self.net(obs).chunk(2, dim=-1)
        sigma = torch.clamp(F.softplus(raw), min=self.sigma_min)
        return BaseParams(mu, sigma)


class AlphaWeight(nn.Module):
    """Weight given to the ELBO inside the sandwich estimate.

    ``adaptive`` uses ``sigmoid(c0 + c1 * (cubo - elbo))`` with the gap treated as
    a constant input; ``elbo`` pins the weight to one.
    """

    def __init__(self, mode="adaptive", value=0.5):
        super().__init__()
        if mode not in ALPHA_MODES:
            raise ValueError(f"unknown alpha mode {mode!r}; expected one of {ALPHA_MODES}")
        self.mode = mode
        self.value = float(value)
        if mode == "trainable":
            self.logit = nn.Parameter(torch.zeros(()))
        elif mode == "adaptive":
            self.c0 = nn.Parameter(torch.zeros(()))
            self.c1 = nn.Parameter(-torch.ones(()))

    def forward(self, elbo, cubo):
        if self.mode == "static":
            return torch.full_like(elbo, self.value)
        if self.mode == "elbo":
            return torch.ones_like(elbo)
        if self.mode == "trainable":
            return torch.sigmoid(self.logit).to(elbo.dtype).expand_as(elbo)
        gap = (cubo - elbo).detach()
        return torch.sigmoid(self.c0.to(elbo.dtype) + self.c1.to(elbo.dtype) * gap)


class FlowPolicy(nn.Module):
    """Stochastic policy ``a = argmax(F_w(z_0))`` with ``z_0 ~ N(mu(s), sigma(s))``.

    Log-probabilities of actions are not available in closed form. They are
    estimated by importance sampling through a posterior ``q(z_K | a, s)``
    whose support is the argmax region of ``a``: the mean log weight gives the
    ELBO, half the log mean squared weight gives the CUBO.
    """

    def __init__(
        self,
        obs_dim,
        n_dims,
        n_cats,
        n_layers=4,
        hidden=64,
        n_hidden=2,
        posterior="flow",
        posterior_layers=2,
        alpha_mode="adaptive",
        alpha_value=0.5,
        sigma_min=1e-3,
        n_samples=2,
        identity_init=True,
    ):
        super().__init__()
        if posterior not in POSTERIOR_MODES:
            raise ValueError(f"unknown posterior mode {posterior!r}; expected one of {POSTERIOR_MODES}")
        self.obs_dim = obs_dim
        self.n_dims = n_dims
        self.n_cats = n_cats
        self.latent_dim = n_dims * n_cats
        self.n_samples = n_samples
        self.posterior_mode = posterior
        self.encoder = StateEncoder(obs_dim, self.latent_dim, hidden, n_hidden, sigma_min)
        self.flow = CouplingFlow(self.latent_dim, n_layers, hidden, n_hidden, identity_init=identity_init)
        if posterior == "flow":
            self.posterior = FlowPosterior(obs_dim, n_dims, n_cats, hidden, n_hidden, posterior_layers)
        else:
            self.posterior = GaussianPosterior(obs_dim, n_dims, n_cats, hidden, n_hidden)
        self.alpha = AlphaWeight(alpha_mode, alpha_value)
        self.double()

    @property
    def dims(self):
        return self.n_dims, self.n_cats

    # parameter groups: theta = (encoder, flow), psi = posterior
    def policy_parameters(self):
        return list(self.encoder.parameters()) + list(self.flow.parameters())

    def posterior_parameters(self):
        return list(self.posterior.parameters())

    def encode_state(self, obs):
        return self.encoder(obs)

    def flow_forward(self, z0):
        shape = z0.shape
        batch = shape[: len(shape) - self._event_ndim(shape)]
        out = self.flow(z0.reshape(-1, self.latent_dim))
        return LatentPoint(out.z.view(shape), out.log_det_accum.view(batch))

    def flow_inverse(self, zK):
        shape = zK.shape
        batch = shape[: len(shape) - self._event_ndim(shape)]
        out = self.flow.inverse(zK.reshape(-1, self.latent_dim))
        return LatentPoint(out.z.view(shape), out.log_det_accum.view(batch))

    def _event_ndim(self, shape):
        if len(shape) >= 2 and tuple(shape[-2:]) == (self.n_dims, self.n_cats):
            return 2
        if shape[-1] == self.latent_dim:
            return 1
        raise SchemaError(f"latent shape {tuple(shape)} is neither (..., {self.latent_dim}) nor (..., {self.n_dims}, {self.n_cats})")

    def sample_latent(self, obs, n=1, generator=None):
        """Draw base latents and push them through the flow; returns ``(z0, z_K)`` as ``[B, n, D, M]``."""
        base = self.encode_state(obs)
        eps = torch.randn((obs.shape[0], n, self.latent_dim), dtype=base.mu.dtype, generator=generator)
        z0 = base.mu.unsqueeze(1) + base.sigma.unsqueeze(1) * eps
        zK = self.flow_forward(z0).z
        shape = (obs.shape[0], n, self.n_dims, self.n_cats)
        return z0.view(shape), zK.view(shape)

    @torch.no_grad()
    def sample(self, obs, n=1, generator=None):
        """``[B, n, D]`` actions drawn from the policy."""
        _, zK = self.sample_latent(obs, n, generator)
        return argmax_decode(zK)

    def posterior_sample(self, obs, actions, n, generator=None) -> PosteriorSample:
        return self.posterior.sample(obs, actions, n, generator)

    def log_weights(self, obs, actions, n, generator=None):
        """Importance log-weights ``log p(z_K | s) - log q(z_K | a, s)``, shape ``[B, n]``."""
        base = self.encode_state(obs)
        post = self.posterior_sample(obs, actions, n, generator)
        back = self.flow_inverse(post.z_K.flatten(-2))
        log_p0 = diag_normal_logpdf(back.z, base.mu.unsqueeze(1), torch.log(base.sigma).unsqueeze(1))
        for name, term in (("base log-density", log_p0), ("flow log-det", back.log_det_accum), ("posterior log-density", post.log_q)):
            if not torch.isfinite(term).all():
                raise NumericalError(f"non-finite {name} in log-weight computation")
        return log_p0 + back.log_det_accum - post.log_q

    @staticmethod
    def _elbo(log_w):
        return log_w.mean(-1)

    @staticmethod
    def _cubo(log_w):
        if torch.isneginf(log_w).all(-1).any():
            raise NumericalError("degenerate posterior: every importance weight is zero")
        n = log_w.shape[-1]
        return 0.5 * (torch.logsumexp(2.0 * log_w, dim=-1) - math.log(n))

    def elbo(self, obs, actions, n_samples=None, generator=None):
        n = n_samples or self.n_samples
        if n < 1:
            raise ValueError("elbo needs at least one posterior sample")
        return self._elbo(self.log_weights(obs, actions, n, generator))

    def cubo(self, obs, actions, n_samples=None, generator=None):
        n = n_samples or self.n_samples
        if n < 2:
            raise ValueError("cubo needs at least two posterior samples")
        return self._cubo(self.log_weights(obs, actions, n, generator))

    def sandwich_logprob(self, obs, actions, n_samples=None, generator=None) -> LogProbBounds:
        """ELBO and CUBO from one shared set of posterior samples, combined with ``alpha``."""
        n = n_samples or self.n_samples
        log_w = self.log_weights(obs, actions, max(n, 2), generator)
        elbo, cubo = self._elbo(log_w), self._cubo(log_w)
        alpha = self.alpha(elbo, cubo)
        return LogProbBounds(elbo, cubo, alpha * elbo + (1.0 - alpha) * cubo, alpha)

    def log_prob(self, obs, actions):
        return self.sandwich_logprob(obs, actions).sandwich

    def sample_action(self, obs, generator=None):
        """Sample one action per row and estimate its log-probability."""
        actions = self.sample(obs, 1, generator)[:, 0]
        return actions, self.sandwich_logprob(obs, actions, generator=generator)

    @torch.no_grad()
    def bound_estimates(self, obs, actions, n, generator=None, chunk=20000):
        """ELBO/CUBO with standard errors from ``n`` shared samples (for checks, not training)."""
        chunks = []
        left = n
        while left > 0:
            k = min(chunk, left)
            chunks.append(self.log_weights(obs, actions, k, generator))
            left -= k
        log_w = torch.cat(chunks, dim=-1)
        elbo = log_w.mean(-1)
        elbo_se = log_w.std(-1) / math.sqrt(n)
        shift = (2.0 * log_w).max(-1, keepdim=True).values
        r = torch.exp(2.0 * log_w - shift)
        r_mean = r.mean(-1)
        cubo = 0.5 * (torch.log(r_mean) + shift.squeeze(-1))
        cubo_se = 0.5 * r.std(-1) / math.sqrt(n) / r_mean
        return BoundEstimates(elbo, elbo_se, cubo, cubo_se, n)
