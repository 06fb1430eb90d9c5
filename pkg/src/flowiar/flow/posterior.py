"""Variational posteriors ``q(z_K | a, s)`` supported on the argmax region of ``a``."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .coupling import CouplingFlow, mlp
from .threshold import inverse_soft_threshold, soft_threshold

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PosteriorSample:
    """Batched posterior draws: ``z_K`` is ``[B, n, D, M]``, ``log_q`` is ``[B, n]``."""

    z_K: torch.Tensor
    log_q: torch.Tensor


def diag_normal_logpdf(x, mean, log_std):
    return (-0.5 * ((x - mean) * torch.exp(-log_std)) ** 2 - log_std - 0.5 * _LOG_2PI).sum(-1)


class GaussianPosterior(nn.Module):
    """Conditional diagonal Gaussian over the pre-threshold ``u``, then the soft threshold."""

    def __init__(self, obs_dim, n_dims, n_cats, hidden=64, n_hidden=2):
        super().__init__()
        self.obs_dim = obs_dim
        self.n_dims = n_dims
        self.n_cats = n_cats
        self.latent_dim = n_dims * n_cats
        self.context_dim = obs_dim + self.latent_dim
        self.base_net = mlp(self.context_dim, 2 * self.latent_dim, hidden, n_hidden, zero_last=True)

    def context(self, obs, actions):
        onehot = F.one_hot(actions.long(), self.n_cats).to(obs.dtype).flatten(-2)
        return torch.cat([obs, onehot], dim=-1)

    def _base(self, ctx):
        mean, raw = self.base_net(ctx).chunk(2, dim=-1)
        return mean, 4.0 * torch.tanh(raw / 4.0)

    def _sample_u(self, ctx, n, generator=None):
        mean, log_std = self._base(ctx)
        eps = torch.randn((ctx.shape[0], n, self.latent_dim), dtype=ctx.dtype, generator=generator)
        u = mean.unsqueeze(1) + torch.exp(log_std).unsqueeze(1) * eps
        return u, diag_normal_logpdf(u, mean.unsqueeze(1), log_std.unsqueeze(1))

    def _log_q_u(self, u, ctx):
        mean, log_std = self._base(ctx)
        return diag_normal_logpdf(u, mean.unsqueeze(1), log_std.unsqueeze(1))

    def sample(self, obs, actions, n, generator=None):
        """Draw ``n`` latents per row whose per-dimension argmax equals ``actions``."""
        ctx = self.context(obs, actions)
        u, log_q_u = self._sample_u(ctx, n, generator)
        u = u.view(ctx.shape[0], n, self.n_dims, self.n_cats)
        target = actions.long().unsqueeze(1).expand(-1, n, -1)
        v, log_det = soft_threshold(u, target)
        return PosteriorSample(v, log_q_u - log_det.sum(-1))

    def log_prob(self, z, obs, actions):
        """Density of given latents ``z`` (``[B, n, D, M]``) under the posterior."""
        ctx = self.context(obs, actions)
        target = actions.long().unsqueeze(1).expand(-1, z.shape[1], -1)
        u, log_det = inverse_soft_threshold(z, target)
        return self._log_q_u(u.flatten(-2), ctx) - log_det.sum(-1)


class FlowPosterior(GaussianPosterior):
    """Gaussian posterior followed by a context-conditioned coupling flow on ``u``."""

    def __init__(self, obs_dim, n_dims, n_cats, hidden=64, n_hidden=2, n_layers=2):
        super().__init__(obs_dim, n_dims, n_cats, hidden, n_hidden)
        self.flow = CouplingFlow(self.latent_dim, n_layers, hidden, n_hidden, context_dim=self.context_dim)

    def _sample_u(self, ctx, n, generator=None):
        u0, log_q0 = super()._sample_u(ctx, n, generator)
        rep = ctx.unsqueeze(1).expand(-1, n, -1).reshape(-1, ctx.shape[-1])
        out = self.flow(u0.reshape(-1, self.latent_dim), rep)
        u = out.z.view_as(u0)
        return u, log_q0 - out.log_det_accum.view(u0.shape[:2])

    def _log_q_u(self, u, ctx):
        n = u.shape[1]
        rep = ctx.unsqueeze(1).expand(-1, n, -1).reshape(-1, ctx.shape[-1])
        back = self.flow.inverse(u.reshape(-1, self.latent_dim), rep)
        u0 = back.z.view_as(u)
        return super()._log_q_u(u0, ctx) + back.log_det_accum.view(u.shape[:2])
