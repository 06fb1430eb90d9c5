"""Small builders shared by the test modules."""

import math

import numpy as np
import torch

from flowiar.flow import FlowPolicy


def set_constant_base(policy, mu, sigma):
    """Make the state encoder ignore its input and emit ``N(mu, sigma)``."""
    mu = torch.as_tensor(mu, dtype=torch.float64).reshape(-1)
    sigma = torch.as_tensor(sigma, dtype=torch.float64).expand_as(mu)
    raw = sigma + torch.log(-torch.expm1(-sigma))  # inverse softplus
    last = policy.encoder.net[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.copy_(torch.cat([mu, raw]))
    return policy


def constant_flow_policy(n_dims, n_cats, mu=None, sigma=1.0, **kwargs):
    torch.manual_seed(kwargs.pop("seed", 0))
    policy = FlowPolicy(1, n_dims, n_cats, **kwargs)
    mu = torch.zeros(n_dims * n_cats) if mu is None else mu
    return set_constant_base(policy, mu, sigma)


def randomize_flow(policy, scale=0.3, seed=0):
    """Perturb every coupling layer so the flow is far from the identity."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in policy.flow.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return policy


def tv_distance(p, q):
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


def log_normal_cdf(x):
    return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))
