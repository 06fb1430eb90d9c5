"""Baseline stochastic policies sharing one sampling / log-probability interface.

Every policy maps an observation batch ``[B, obs_dim]`` to actions
``[B, n, D]`` with entries in ``[0, M)``.  ``log_prob`` is differentiable;
``full_distribution`` is only offered by heads whose action space can be
enumerated.
"""

import itertools

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, SchemaError

DEFAULT_ENUMERATION_LIMIT = 10**6


def action_to_index(actions, n_cats):
    """Row-major flat index of ``[..., D]`` actions."""
    actions = torch.as_tensor(actions).long()
    d = actions.shape[-1]
    weights = n_cats ** torch.arange(d - 1, -1, -1, device=actions.device)
    return (actions * weights).sum(-1)


def index_to_action(index, n_dims, n_cats):
    index = torch.as_tensor(index).long()
    weights = n_cats ** torch.arange(n_dims - 1, -1, -1, device=index.device)
    return (index.unsqueeze(-1) // weights) % n_cats


def all_actions(n_dims, n_cats, limit=DEFAULT_ENUMERATION_LIMIT):
    """Every action in flat-index order, as a ``[M**D, D]`` long tensor."""
    size = n_cats**n_dims
    if size > limit:
        raise CapacityError(f"action space has {size} actions, above the enumeration limit {limit}")
    return torch.tensor(list(itertools.product(range(n_cats), repeat=n_dims)), dtype=torch.long).view(size, n_dims)


def check_actions(actions, n_dims, n_cats):
    actions = torch.as_tensor(actions)
    if actions.shape[-1] != n_dims:
        raise SchemaError(f"action has {actions.shape[-1]} dimensions, expected {n_dims}")
    if actions.numel() and (actions.min() < 0 or actions.max() >= n_cats):
        raise SchemaError(f"action entries must lie in [0, {n_cats})")
    return actions.long()


def apply_mask(probs, mask):
    """Zero the invalid entries of ``probs`` and renormalise along the last axis."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not mask.any(-1).all():
        raise ValueError("mask has no valid entry; refusing to renormalise")
    masked = torch.where(mask, probs, torch.zeros_like(probs))
    return masked / masked.sum(-1, keepdim=True)


class Policy(nn.Module):
    """Interface shared by the flow policy and every baseline head."""

    enumerable = False

    def __init__(self, obs_dim, n_dims, n_cats):
        super().__init__()
        self.obs_dim = obs_dim
        self.n_dims = n_dims
        self.n_cats = n_cats

    @property
    def dims(self):
        return self.n_dims, self.n_cats

    def _check_obs(self, obs):
        if obs.dim() != 2 or obs.shape[-1] != self.obs_dim:
            raise SchemaError(f"expected observation batch of shape (B, {self.obs_dim}), got {tuple(obs.shape)}")

    def sample(self, obs, n=1, generator=None):
        raise NotImplementedError

    def log_prob(self, obs, actions):
        raise NotImplementedError

    def full_distribution(self, obs):
        raise NotImplementedError(f"{type(self).__name__} cannot enumerate its action space")


def _body(obs_dim, hidden, n_hidden):
    layers, width = [], obs_dim
    for _ in range(n_hidden):
        layers += [nn.Linear(width, hidden), nn.Tanh()]
        width = hidden
    return nn.Sequential(*layers)


class CategoricalPolicy(Policy):
    """Plain softmax over all ``M**D`` joint actions."""

    enumerable = True

    def __init__(self, obs_dim, n_dims, n_cats, hidden=64, n_hidden=2, enumeration_limit=DEFAULT_ENUMERATION_LIMIT):
        super().__init__(obs_dim, n_dims, n_cats)
        self.n_actions = n_cats**n_dims
        if self.n_actions > enumeration_limit:
            raise CapacityError(
                f"categorical head needs {self.n_actions} logits, above the enumeration limit {enumeration_limit}"
            )
        self.body = _body(obs_dim, hidden, n_hidden)
        self.head = nn.Linear(hidden if n_hidden else obs_dim, self.n_actions)
        self.double()

    def logits(self, obs):
        self._check_obs(obs)
        return self.head(self.body(obs))

    def full_distribution(self, obs):
        return torch.softmax(self.logits(obs), dim=-1)

    @torch.no_grad()
    def sample(self, obs, n=1, generator=None):
        probs = self.full_distribution(obs)
        idx = torch.multinomial(probs, n, replacement=True, generator=generator)
        return index_to_action(idx, self.n_dims, self.n_cats)

    def log_prob(self, obs, actions):
        logp = torch.log_softmax(self.logits(obs), dim=-1)
        return logp.gather(-1, action_to_index(actions, self.n_cats).unsqueeze(-1)).squeeze(-1)


class FactoredPolicy(Policy):
    """Independent per-dimension softmaxes; the joint is their product."""

    enumerable = True

    def __init__(self, obs_dim, n_dims, n_cats, hidden=64, n_hidden=2):
        super().__init__(obs_dim, n_dims, n_cats)
        self.body = _body(obs_dim, hidden, n_hidden)
        self.head = nn.Linear(hidden if n_hidden else obs_dim, n_dims * n_cats)
        self.double()

    def base_logits(self, obs):
        self._check_obs(obs)
        return self.head(self.body(obs)).view(-1, self.n_dims, self.n_cats)

    def marginals(self, obs):
        return torch.softmax(self.base_logits(obs), dim=-1)

    def dim_logits(self, obs, actions):
        """Logits for every dimension given the (teacher-forced) action, ``[B, D, M]``."""
        return self.base_logits(obs)

    def log_prob(self, obs, actions):
        logp = torch.log_softmax(self.dim_logits(obs, actions), dim=-1)
        return logp.gather(-1, actions.long().unsqueeze(-1)).squeeze(-1).sum(-1)

    @torch.no_grad()
    def sample(self, obs, n=1, generator=None):
        probs = self.marginals(obs)
        b = probs.shape[0]
        flat = probs.reshape(b * self.n_dims, self.n_cats)
        idx = torch.multinomial(flat, n, replacement=True, generator=generator)
        return idx.view(b, self.n_dims, n).transpose(1, 2)

    def full_distribution(self, obs):
        acts = all_actions(self.n_dims, self.n_cats)
        b = obs.shape[0]
        rep_obs = obs.repeat_interleave(acts.shape[0], dim=0)
        rep_act = acts.repeat(b, 1)
        return torch.exp(self.log_prob(rep_obs, rep_act)).view(b, -1)


class AutoregressivePolicy(FactoredPolicy):
    """Sequential head: dimension ``order[k]`` is conditioned on ``order[:k]``.

    All positions share one trunk.  Per-position logits are the factored
    logits plus a correction computed from the state features and a one-hot
    encoding of the already chosen dimensions; zeroing the correction network
    recovers :class:`FactoredPolicy` exactly.
    """

    def __init__(self, obs_dim, n_dims, n_cats, hidden=64, n_hidden=2, order=None):
        super().__init__(obs_dim, n_dims, n_cats, hidden, n_hidden)
        order = list(range(n_dims)) if order is None else [int(d) for d in order]
        if sorted(order) != list(range(n_dims)):
            raise ValueError(f"order {order} is not a permutation of range({n_dims})")
        self.order = order
        feat = hidden if n_hidden else obs_dim
        self.cond = nn.Sequential(
            nn.Linear(feat + n_dims * n_cats, hidden), nn.Tanh(), nn.Linear(hidden, n_dims * n_cats)
        )
        # prefix_mask[k, d] is true when dimension d precedes position k
        prefix = torch.zeros(n_dims, n_dims, dtype=torch.bool)
        for k, d in enumerate(order):
            prefix[d, order[:k]] = True
        self.register_buffer("prefix_mask", prefix)
        self.double()

    def zero_conditioning(self):
        with torch.no_grad():
            self.cond[-1].weight.zero_()
            self.cond[-1].bias.zero_()

    def _correction(self, feats, onehot_prefix):
        return self.cond(torch.cat([feats, onehot_prefix.flatten(-2)], dim=-1)).view(
            *onehot_prefix.shape[:-2], self.n_dims, self.n_cats
        )

    def dim_logits(self, obs, actions):
        self._check_obs(obs)
        feats = self.body(obs)
        base = self.head(feats).view(-1, self.n_dims, self.n_cats)
        onehot = F.one_hot(actions.long(), self.n_cats).to(obs.dtype)  # [B, D, M]
        # one prefix per dimension d: [B, D(target), D, M]
        prefixes = onehot.unsqueeze(1) * self.prefix_mask.to(obs.dtype).unsqueeze(0).unsqueeze(-1)
        corr = self._correction(feats.unsqueeze(1).expand(-1, self.n_dims, -1), prefixes)
        diag = corr[:, torch.arange(self.n_dims), torch.arange(self.n_dims)]
        return base + diag

    @torch.no_grad()
    def sample(self, obs, n=1, generator=None, forced=None):
        """Sequential sampling; ``forced`` maps dimension -> fixed category."""
        self._check_obs(obs)
        forced = forced or {}
        b = obs.shape[0]
        feats = self.body(obs).repeat_interleave(n, dim=0)
        base = self.head(feats).view(-1, self.n_dims, self.n_cats)
        onehot = torch.zeros(b * n, self.n_dims, self.n_cats, dtype=obs.dtype)
        out = torch.zeros(b * n, self.n_dims, dtype=torch.long)
        for d in self.order:
            if d in forced:
                choice = torch.full((b * n,), int(forced[d]), dtype=torch.long)
            else:
                logits = base[:, d] + self._correction(feats, onehot)[:, d]
                choice = torch.multinomial(torch.softmax(logits, -1), 1, generator=generator).squeeze(-1)
            out[:, d] = choice
            onehot[:, d] = F.one_hot(choice, self.n_cats).to(obs.dtype)
        return out.view(b, n, self.n_dims)

    def conditional(self, obs, dim, forced):
        """Distribution of ``dim`` given state and a forced prefix ``{dim: value}``."""
        feats = self.body(obs)
        base = self.head(feats).view(-1, self.n_dims, self.n_cats)
        onehot = torch.zeros(obs.shape[0], self.n_dims, self.n_cats, dtype=obs.dtype)
        for d, v in forced.items():
            onehot[:, d, int(v)] = 1.0
        return torch.softmax(base[:, dim] + self._correction(feats, onehot)[:, dim], -1)


class TabularPolicy(Policy):
    """Softmax table indexed by a one-hot state observation (``D = 1``)."""

    enumerable = True

    def __init__(self, n_states, n_actions, logits=None):
        super().__init__(n_states, 1, n_actions)
        init = torch.zeros(n_states, n_actions) if logits is None else torch.as_tensor(logits)
        self.table = nn.Parameter(init.clone().double())

    def full_distribution(self, obs):
        self._check_obs(obs)
        return torch.softmax(obs @ self.table, dim=-1)

    def log_prob(self, obs, actions):
        logp = torch.log_softmax(obs @ self.table, dim=-1)
        return logp.gather(-1, actions.long()[..., :1]).squeeze(-1)

    @torch.no_grad()
    def sample(self, obs, n=1, generator=None):
        idx = torch.multinomial(self.full_distribution(obs), n, replacement=True, generator=generator)
        return idx.unsqueeze(-1)


def empirical_distribution(actions, n_cats):
    """Normalised histogram over flat action indices of an ``[N, D]`` array."""
    actions = np.asarray(actions)
    idx = np.ravel_multi_index(tuple(actions.T), (n_cats,) * actions.shape[-1])
    counts = np.bincount(idx, minlength=n_cats ** actions.shape[-1])
    return counts / counts.sum()
