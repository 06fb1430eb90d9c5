"""Brute-force reference computations used to check the estimators.

Nothing here reuses the numerical kernels under test: frequencies are counted
with numpy, Jacobians come from central differences, policy gradients from
enumerating trajectories, and ERA validity from networkx shortest paths.
"""

import itertools
import math
from dataclasses import dataclass

import networkx as nx
import numpy as np
import torch

from .errors import CapacityError


@dataclass
class OracleEstimate:
    value: float
    std_error: float
    n_samples: int


def _base_latents(flow_policy, obs, n, rng):
    obs_t = torch.as_tensor(np.asarray(obs, dtype=np.float64)).view(1, -1)
    with torch.no_grad():
        base = flow_policy.encode_state(obs_t)
        mu = base.mu[0].numpy()
        sigma = base.sigma[0].numpy()
        eps = rng.standard_normal((n, mu.size))
        z0 = torch.as_tensor(mu + sigma * eps)
        zK = flow_policy.flow_forward(z0).z.numpy()
    return zK.reshape(n, flow_policy.n_dims, flow_policy.n_cats)


def mc_action_counts(flow_policy, obs, n, seed=0, chunk=50000):
    """Counts of every flat action index among ``n`` forward samples."""
    rng = np.random.default_rng(seed)
    d, m = flow_policy.n_dims, flow_policy.n_cats
    counts = np.zeros(m**d, dtype=np.int64)
    left = n
    while left > 0:
        k = min(chunk, left)
        zK = _base_latents(flow_policy, obs, k, rng)
        acts = np.argmax(zK, axis=-1)
        counts += np.bincount(np.ravel_multi_index(tuple(acts.T), (m,) * d), minlength=m**d)
        left -= k
    return counts


def mc_logprob_oracle(flow_policy, action, obs, n=100000, seed=0):
    """Log of the empirical frequency of ``action`` with a delta-method standard error.

    Zero hits give ``-inf`` with an infinite error instead of raising.
    """
    if n < 1000:
        raise ValueError("mc_logprob_oracle needs n >= 1000")
    m = flow_policy.n_cats
    idx = int(np.ravel_multi_index(tuple(np.asarray(action, dtype=np.int64)), (m,) * flow_policy.n_dims))
    hits = mc_action_counts(flow_policy, obs, n, seed)[idx]
    if hits == 0:
        return OracleEstimate(-math.inf, math.inf, n)
    p = hits / n
    return OracleEstimate(math.log(p), math.sqrt((1.0 - p) / (n * p)), n)


class TruncatedBasePosterior(torch.nn.Module):
    """Exact posterior for an identity flow with ``M = 2``: the base Gaussian truncated to the argmax region.

    Its log-density is ``log p(v|s) - log P(a|s)`` with ``P(a|s)`` a product of
    normal CDFs, so every importance weight equals ``P(a|s)``.  It can be
    assigned as ``flow_policy.posterior`` to make the bounds exact.
    """

    def __init__(self, flow_policy):
        super().__init__()
        if flow_policy.n_cats != 2:
            raise ValueError("closed-form truncation is only implemented for two categories")
        self._owner = (flow_policy,)  # not registered as a submodule

    @property
    def policy(self):
        return self._owner[0]

    def _base(self, obs):
        with torch.no_grad():
            b = self.policy.encode_state(obs)
        d = self.policy.n_dims
        return b.mu.view(-1, d, 2), b.sigma.view(-1, d, 2)

    def log_prob_action(self, obs, actions):
        mu, sigma = self._base(obs)
        a = actions.long()
        mu_a = mu.gather(-1, a.unsqueeze(-1)).squeeze(-1)
        mu_o = mu.gather(-1, (1 - a).unsqueeze(-1)).squeeze(-1)
        scale = torch.sqrt((sigma**2).sum(-1))
        z = (mu_a - mu_o) / scale
        log_cdf = torch.log(0.5 * torch.erfc(-z / math.sqrt(2.0)))
        return log_cdf.sum(-1)

    def sample(self, obs, actions, n, generator=None):
        from .flow.posterior import PosteriorSample

        mu, sigma = self._base(obs)
        b, d = actions.shape
        out = torch.empty(b, n, d, 2, dtype=mu.dtype)
        rng = np.random.default_rng(None if generator is None else int(generator.initial_seed()))
        for i in range(b):
            for k in range(d):
                got = []
                need = n
                while need > 0:
                    v = mu[i, k].numpy() + sigma[i, k].numpy() * rng.standard_normal((max(2 * need, 64), 2))
                    v = v[np.argmax(v, axis=1) == int(actions[i, k])][:need]
                    got.append(v)
                    need -= len(v)
                out[i, :, k] = torch.as_tensor(np.concatenate(got))
        return PosteriorSample(out, self.log_prob(out, obs, actions))

    def log_prob(self, z, obs, actions):
        mu, sigma = self._base(obs)
        lp = -0.5 * ((z - mu.unsqueeze(1)) / sigma.unsqueeze(1)) ** 2 - torch.log(sigma.unsqueeze(1)) - 0.5 * math.log(2 * math.pi)
        return lp.sum((-2, -1)) - self.log_prob_action(obs, actions).unsqueeze(1)


def finite_diff_jacobian(fn, point, eps=1e-6):
    """Central-difference Jacobian of ``fn: R^n -> R^m`` at ``point``, shape ``[m, n]``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x = np.asarray(point, dtype=np.float64).ravel()
    cols = []
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        hi = np.asarray(fn(x + step), dtype=np.float64).ravel()
        lo = np.asarray(fn(x - step), dtype=np.float64).ravel()
        if not (np.isfinite(hi).all() and np.isfinite(lo).all()):
            raise ArithmeticError(f"non-finite output when perturbing coordinate {i}")
        cols.append((hi - lo) / (2 * eps))
    return np.stack(cols, axis=1)


def log_abs_det(matrix):
    sign, logdet = np.linalg.slogdet(np.asarray(matrix, dtype=np.float64))
    if sign == 0:
        return -math.inf
    return float(logdet)


@dataclass
class TabularMDP:
    """Finite-horizon MDP: ``transitions[s, a, s']``, ``rewards[s, a]``, ``initial[s]``."""

    transitions: np.ndarray
    rewards: np.ndarray
    initial: np.ndarray
    horizon: int
    gamma: float = 1.0

    @property
    def n_states(self):
        return self.rewards.shape[0]

    @property
    def n_actions(self):
        return self.rewards.shape[1]

    def observation(self, s):
        return np.eye(self.n_states)[s]


def _effective_table(policy, mdp, valid):
    obs = torch.eye(mdp.n_states, dtype=torch.float64)
    probs = policy.full_distribution(obs)
    mask = torch.as_tensor(np.asarray(valid, dtype=bool))
    kept = torch.where(mask, probs, torch.zeros_like(probs))
    return kept / kept.sum(-1, keepdim=True)


def exact_objective(mdp, policy, valid, method="auto"):
    """``J(pi')`` as a differentiable scalar, by trajectory enumeration or backward recursion."""
    size = mdp.n_states * mdp.n_actions * mdp.horizon
    if size > 10**6:
        raise CapacityError(f"MDP too large for exact gradients ({size} state-action-steps)")
    pi = _effective_table(policy, mdp, valid)
    P = torch.as_tensor(mdp.transitions, dtype=torch.float64)
    R = torch.as_tensor(mdp.rewards, dtype=torch.float64)
    b0 = torch.as_tensor(mdp.initial, dtype=torch.float64)
    if method == "auto":
        method = "enumerate" if size <= 10**4 else "recursion"
    if method == "recursion":
        value = torch.zeros(mdp.n_states, dtype=torch.float64)
        for _ in range(mdp.horizon):
            q = R + mdp.gamma * P @ value
            value = (pi * q).sum(-1)
        return (b0 * value).sum()
    total = torch.zeros((), dtype=torch.float64)
    S, A = mdp.n_states, mdp.n_actions
    for traj in itertools.product(range(S), *([range(A), range(S)] * mdp.horizon)):
        # traj = s0, a0, s1, a1, s2, ...
        prob = b0[traj[0]]
        ret = 0.0
        for t in range(mdp.horizon):
            s, a, s_next = traj[2 * t], traj[2 * t + 1], traj[2 * t + 2]
            prob = prob * pi[s, a] * P[s, a, s_next]
            ret = ret + (mdp.gamma**t) * R[s, a]
        total = total + prob * ret
    return total


def exact_policy_gradient(mdp, policy, valid, method="auto"):
    """Flattened gradient of ``J(pi')`` with respect to every policy parameter."""
    params = [p for p in policy.parameters() if p.requires_grad]
    grads = torch.autograd.grad(exact_objective(mdp, policy, valid, method), params)
    return torch.cat([g.reshape(-1) for g in grads]).numpy()


def era_brute_force_valid(adjacency, max_hops, current, action):
    """ERA validity recomputed with networkx: each move is stay-or-neighbour, every pair within ``max_hops``."""
    graph = nx.from_numpy_array(np.asarray(adjacency, dtype=int))
    graph.remove_edges_from(nx.selfloop_edges(graph))
    for old, new in zip(current, action):
        if old != new and not graph.has_edge(int(old), int(new)):
            return False
    for x, y in itertools.combinations(action, 2):
        try:
            if nx.shortest_path_length(graph, int(x), int(y)) > max_hops:
                return False
        except nx.NetworkXNoPath:
            return False
    return True


def factored_pair_mass_grid(n_grid=201):
    """Max over a ``(p, q)`` grid of ``P(0,1) + P(1,0) = p(1-q) + (1-p)q`` with ``P(0,1)=P(1,0)``.

    Returns ``(best_total, best_balanced_each)``: the largest combined mass any
    product of binary marginals puts on the two off-diagonal actions, and the
    largest mass it can put on each of them simultaneously.
    """
    g = np.linspace(0.0, 1.0, n_grid)
    p, q = np.meshgrid(g, g, indexing="ij")
    a = p * (1 - q)
    b = (1 - p) * q
    return float((a + b).max()), float(np.minimum(a, b).max())


def toy_partial_average_reward(action_probs, reward=1.0):
    """Long-run average reward of a memoryless policy on Toy-Partial via its two-state chain.

    ``action_probs`` is over the flat actions ``(0,0), (0,1), (1,0), (1,1)``.
    """
    p = np.asarray(action_probs, dtype=float)
    a, b = p[1], p[2]  # switch probabilities from hidden state 0 (A correct) and 1 (B correct)
    chain = np.array([[1 - a, a], [b, 1 - b]])
    if a + b == 0:
        # absorbing either way; average depends on the start, both states pay -reward
        return -reward
    stationary = np.array([b, a]) / (a + b)
    per_state = np.array([a * reward - (1 - a) * reward, b * reward - (1 - b) * reward])
    assert np.allclose(stationary @ chain, stationary)
    return float(stationary @ per_state)
