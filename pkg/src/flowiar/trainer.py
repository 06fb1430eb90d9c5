"""Advantage actor-critic with invalid-action rejection, plus the ELBO subroutine.

One cycle: every environment advances ``t_max`` steps under the effective
policy, bootstrapped returns are formed from the critic, the actor takes one
corrected policy-gradient step, the critic one regression step, and (for flow
policies) the posterior and flow take ``n_elbo_steps`` ELBO ascent steps on
states from the same rollout.
"""

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CapacityError, ConfigError, NumericalError, StarvationError, TrainingAborted
from .flow import FlowPolicy
from .iar import (
    CORRECTION_WEIGHTINGS,
    MeteredOracle,
    iar_surrogate_loss_batch,
    rejection_sample_many,
    unique_valid,
)
from .policies import (
    DEFAULT_ENUMERATION_LIMIT,
    AutoregressivePolicy,
    CategoricalPolicy,
    FactoredPolicy,
    action_to_index,
    all_actions,
)
from .envs import VecEnv

log = logging.getLogger(__name__)

POLICY_KINDS = ("flow", "categorical", "factored", "ar", "ar_iar", "mask")
IAR_KINDS = ("flow", "categorical", "factored", "ar_iar")
METRIC_COLUMNS = (
    "wall_clock_s",
    "env_steps",
    "episode",
    "mean_return",
    "best_return",
    "valid_fraction_mean",
    "oracle_queries_cum",
    "elbo_mean",
    "cubo_mean",
    "actor_loss",
    "critic_loss",
    "seed",
)
UPDATE_COLUMNS = (
    "update",
    "env_steps",
    "valid_fraction",
    "oracle_queries_cum",
    "actor_loss",
    "critic_loss",
    "actor_grad_norm",
    "elbo",
    "cubo",
    "alpha",
    "skipped",
)
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    policy: str = "flow"
    gamma: float = 0.99
    t_max: int = 5
    max_env_steps: int = 20000
    e_max: int = 0  # episode budget; 0 means only max_env_steps applies
    n_envs: int = 8
    n_iar_samples: int = 64
    max_retries: int = 16
    n_elbo_steps: int = 4
    elbo_batch_size: int = 256
    elbo_posterior_samples: int = 2
    elbo_every: int = 1
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_elbo: float = 3e-4
    max_grad_norm: float = 0.5
    value_coef: float = 0.5
    actor_trains_posterior: bool = False
    elbo_trains_policy: bool = True
    correction: bool = True
    correction_coef: float = 1.0
    correction_weighting: str = "ratio"
    entropy_coef: float = 0.0
    alpha_mode: str = "adaptive"
    alpha_value: float = 0.5
    posterior_mode: str = "flow"
    n_bound_samples: int = 2
    flow_layers: int = 4
    posterior_layers: int = 2
    hidden: int = 64
    n_hidden: int = 2
    sigma_min: float = 1e-3
    enumeration_limit: int = DEFAULT_ENUMERATION_LIMIT
    eval_every: int = 2500
    n_eval_envs: int = 10
    eval_seed: int = 100000
    max_nonfinite: int = 20
    seed: int = 0

    def validate(self):
        positive = (
            "t_max", "max_env_steps", "n_envs", "n_iar_samples", "elbo_batch_size", "elbo_posterior_samples",
            "elbo_every", "lr_actor", "lr_critic", "lr_elbo", "max_grad_norm", "eval_every", "n_eval_envs",
            "n_bound_samples", "flow_layers", "hidden", "max_nonfinite", "sigma_min", "enumeration_limit",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"must be positive, got {getattr(self, name)!r}", name)
        for name in ("e_max", "n_elbo_steps", "max_retries", "value_coef", "correction_coef", "entropy_coef", "n_hidden"):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be non-negative, got {getattr(self, name)!r}", name)
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"discount must lie in (0, 1), got {self.gamma}", "gamma")
        if self.policy not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.policy!r}; expected one of {POLICY_KINDS}", "policy")
        if self.correction_weighting not in CORRECTION_WEIGHTINGS:
            raise ConfigError(f"unknown weighting {self.correction_weighting!r}", "correction_weighting")
        if self.alpha_mode not in ("static", "trainable", "adaptive", "elbo"):
            raise ConfigError(f"unknown alpha mode {self.alpha_mode!r}", "alpha_mode")
        if self.posterior_mode not in ("flow", "gaussian"):
            raise ConfigError(f"unknown posterior mode {self.posterior_mode!r}", "posterior_mode")
        if not 0.0 <= self.alpha_value <= 1.0:
            raise ConfigError("must lie in [0, 1]", "alpha_value")
        return self

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown training option(s) {unknown}", "train")
        data = dict(data)
        for f in fields(cls):
            if f.type in (float, "float") and isinstance(data.get(f.name), str):
                # YAML 1.1 leaves exponent floats such as 1e-4 as strings
                try:
                    data[f.name] = float(data[f.name])
                except ValueError as exc:
                    raise ConfigError(f"expected a number, got {data[f.name]!r}", f.name) from exc
        return cls(**data).validate()

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Transition:
    state: object
    action: np.ndarray
    next_state: object
    reward: float
    done: bool
    batch: object = None


@dataclass
class Rollout:
    """``t_max`` decisions for every environment, stored time-major."""

    obs: torch.Tensor  # [T, N, obs_dim]
    actions: np.ndarray  # [T, N, D]
    rewards: np.ndarray  # [T, N]
    dones: np.ndarray  # [T, N]
    last_obs: torch.Tensor  # [N, obs_dim]
    states: list  # [T][N] oracle states
    next_states: list
    batches: list = None  # [T][N] ValidActionBatch, IAR kinds only
    masks: np.ndarray = None  # [T, N, M**D], mask kind only

    @property
    def n_steps(self):
        return self.rewards.size

    def transitions(self):
        out = []
        for t in range(self.rewards.shape[0]):
            for i in range(self.rewards.shape[1]):
                out.append(
                    Transition(
                        self.states[t][i],
                        self.actions[t, i],
                        self.next_states[t][i],
                        float(self.rewards[t, i]),
                        bool(self.dones[t, i]),
                        None if self.batches is None else self.batches[t][i],
                    )
                )
        return out

    def valid_fractions(self):
        if self.batches is None:
            return np.ones(self.rewards.shape)
        return np.array([[b.n_valid / b.n_sampled for b in row] for row in self.batches])


@dataclass
class UpdateReport:
    actor_loss: float
    critic_loss: float
    actor_grad_norm: float
    critic_grad_norm: float
    elbo: float = math.nan
    cubo: float = math.nan
    alpha: float = math.nan
    skipped: bool = False


@dataclass
class TrainResult:
    history: list
    updates: list
    policy: nn.Module
    critic: nn.Module
    checkpoints: dict = field(default_factory=dict)
    nonfinite_skips: int = 0


class CriticNet(nn.Module):
    """State-value network ``V(s)``."""

    def __init__(self, obs_dim, hidden=64, n_hidden=2):
        super().__init__()
        layers, width = [], obs_dim
        for _ in range(n_hidden):
            layers += [nn.Linear(width, hidden), nn.Tanh()]
            width = hidden
        layers.append(nn.Linear(width, 1))
        self.net = nn.Sequential(*layers)
        self.double()

    def forward(self, obs):
        return self.net(obs).squeeze(-1)


def build_policy(kind, obs_dim, n_dims, n_cats, config):
    if kind == "flow":
        return FlowPolicy(
            obs_dim,
            n_dims,
            n_cats,
            n_layers=config.flow_layers,
            hidden=config.hidden,
            n_hidden=config.n_hidden,
            posterior=config.posterior_mode,
            posterior_layers=config.posterior_layers,
            alpha_mode=config.alpha_mode,
            alpha_value=config.alpha_value,
            sigma_min=config.sigma_min,
            n_samples=config.n_bound_samples,
        )
    if kind in ("categorical", "mask"):
        return CategoricalPolicy(obs_dim, n_dims, n_cats, config.hidden, config.n_hidden, config.enumeration_limit)
    if kind == "factored":
        return FactoredPolicy(obs_dim, n_dims, n_cats, config.hidden, config.n_hidden)
    if kind in ("ar", "ar_iar"):
        return AutoregressivePolicy(obs_dim, n_dims, n_cats, config.hidden, config.n_hidden)
    raise ConfigError(f"unknown policy kind {kind!r}", "policy")


def check_compatible(kind, oracle, n_dims, n_cats, enumeration_limit=DEFAULT_ENUMERATION_LIMIT):
    """Reject pairings the training loop cannot honour."""
    if kind == "ar" and not oracle.accepts_all:
        raise ConfigError("plain autoregressive policy cannot respect a validity oracle; use ar_iar or mask", "policy")
    if kind == "mask" and n_cats**n_dims > enumeration_limit:
        raise CapacityError(
            f"masking needs all {n_cats**n_dims} actions queried per step, above the enumeration limit {enumeration_limit}"
        )


def _obs_tensor(obs):
    return torch.as_tensor(np.asarray(obs, dtype=np.float64))


class _Sampler:
    """Picks executed actions for one policy kind; shared by rollouts and evaluation."""

    def __init__(self, kind, policy, oracle, config, rng, generator):
        self.kind = kind
        self.policy = policy
        self.oracle = oracle
        self.config = config
        self.rng = rng
        self.generator = generator
        self.actions_table = all_actions(*policy.dims, limit=config.enumeration_limit) if kind == "mask" else None

    @property
    def rejects(self):
        return self.kind in IAR_KINDS and not self.oracle.accepts_all

    def __call__(self, obs_t, states):
        """``(actions [N, D], batches or None, masks or None)``."""
        if self.rejects:
            batches = rejection_sample_many(
                self.policy,
                obs_t,
                states,
                self.oracle,
                self.config.n_iar_samples,
                self.config.max_retries,
                self.rng,
                self.generator,
            )
            return np.stack([b.chosen for b in batches]), batches, None
        if self.kind == "mask":
            acts = self.actions_table.numpy()
            masks = np.stack([self.oracle.is_valid_batch(s, acts) for s in states])
            if not masks.any(-1).all():
                raise StarvationError("a state has no valid action at all", state=states[int(np.argmin(masks.any(-1)))])
            with torch.no_grad():
                probs = self.policy.full_distribution(obs_t)
                probs = torch.where(torch.as_tensor(masks), probs, torch.zeros_like(probs))
                idx = torch.multinomial(probs / probs.sum(-1, keepdim=True), 1, generator=self.generator)[:, 0]
            return self.actions_table[idx].numpy(), None, masks
        return self.policy.sample(obs_t, 1, generator=self.generator)[:, 0].numpy(), None, None


def collect_rollout(vec_env, sampler, t_max, step_callback=None):
    """Advance every environment ``t_max`` steps under the effective policy.

    Raises:
        StarvationError: rejection sampling starved; the message names the
            environment and step.
    """
    obs_list, act_list, rew_list, done_list, state_list, next_state_list = [], [], [], [], [], []
    batch_list, mask_list = [], []
    for t in range(t_max):
        obs_t = _obs_tensor(vec_env.obs)
        states = vec_env.states
        try:
            actions, batches, masks = sampler(obs_t, states)
        except StarvationError as exc:
            env_index = next((i for i, s in enumerate(states) if s is exc.state), None)
            raise StarvationError(f"env {env_index}, rollout step {t}: {exc}", exc.state, exc.total_drawn) from exc
        if step_callback is not None:
            step_callback(states, actions)
        _, rewards, dones = vec_env.step(actions)
        obs_list.append(obs_t)
        act_list.append(actions)
        rew_list.append(rewards)
        done_list.append(dones)
        state_list.append(states)
        next_state_list.append(vec_env.states)
        batch_list.append(batches)
        mask_list.append(masks)
    return Rollout(
        obs=torch.stack(obs_list),
        actions=np.stack(act_list),
        rewards=np.stack(rew_list),
        dones=np.stack(done_list),
        last_obs=_obs_tensor(vec_env.obs),
        states=state_list,
        next_states=next_state_list,
        batches=batch_list if batch_list[0] is not None else None,
        masks=np.stack(mask_list) if mask_list[0] is not None else None,
    )


def discounted_returns(rewards, dones, bootstrap, gamma):
    """Backward recursion ``R <- r + gamma R`` restarted at terminal steps.

    ``rewards`` and ``dones`` are ``[T, N]``; ``bootstrap`` is ``[N]``, the
    critic value of the state after the last step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    out = np.zeros_like(rewards)
    running = np.asarray(bootstrap, dtype=np.float64).copy()
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * np.where(dones[t], 0.0, running)
        out[t] = running
    return out


def compute_returns(rollout, critic, gamma):
    """``(returns, advantages)`` as ``[T, N]`` tensors; advantages carry no gradient."""
    with torch.no_grad():
        bootstrap = critic(rollout.last_obs).numpy()
        values = critic(rollout.obs)
    returns = torch.as_tensor(discounted_returns(rollout.rewards, rollout.dones, bootstrap, gamma))
    return returns, returns - values


def _policy_logprob(policy, obs, actions):
    """Log-probabilities plus (elbo, cubo, alpha) tensors when the policy is a flow."""
    if isinstance(policy, FlowPolicy):
        bounds = policy.sandwich_logprob(obs, actions)
        return bounds.sandwich, bounds
    return policy.log_prob(obs, actions), None


def _entropy(policy, obs):
    if isinstance(policy, CategoricalPolicy):
        p = policy.full_distribution(obs)
        return -(p * torch.log(p.clamp_min(1e-300))).sum(-1)
    if type(policy) is FactoredPolicy:
        p = policy.marginals(obs)
        return -(p * torch.log(p.clamp_min(1e-300))).sum((-2, -1))
    raise ConfigError(f"entropy bonus is not available for {type(policy).__name__}", "entropy_coef")


def actor_loss(rollout, advantages, policy, kind, config):
    """Mean surrogate loss over the rollout; returns ``(loss, bounds or None)``."""
    obs = rollout.obs.reshape(-1, rollout.obs.shape[-1])
    adv = advantages.reshape(-1)
    n = obs.shape[0]
    if rollout.batches is not None:
        flat = [b for row in rollout.batches for b in row]
        acts, owners, counts, chosen_pos, n_valid, n_sampled = [], [], [], [], [], []
        offset = 0
        for i, b in enumerate(flat):
            uniq, cnt, pos = unique_valid(b)
            acts.append(uniq)
            owners.append(np.full(len(uniq), i))
            counts.append(cnt)
            chosen_pos.append(offset + pos)
            n_valid.append(b.n_valid)
            n_sampled.append(b.n_sampled)
            offset += len(uniq)
        owners = np.concatenate(owners)
        lp, bounds = _policy_logprob(policy, obs[torch.as_tensor(owners)], torch.as_tensor(np.concatenate(acts)))
        chosen = torch.as_tensor(chosen_pos)
        loss = iar_surrogate_loss_batch(
            adv,
            lp[chosen],
            lp,
            owners,
            torch.as_tensor(n_valid),
            torch.as_tensor(n_sampled),
            config.correction_weighting,
            config.correction,
            valid_counts=np.concatenate(counts),
            correction_coef=config.correction_coef,
        )
        if bounds is not None:
            bounds = (bounds.elbo[chosen], bounds.cubo[chosen], bounds.alpha_used)
    else:
        actions = torch.as_tensor(rollout.actions.reshape(n, -1))
        if kind == "mask":
            masks = torch.as_tensor(rollout.masks.reshape(n, -1))
            logits = policy.logits(obs).masked_fill(~masks, -math.inf)
            lp = torch.log_softmax(logits, -1).gather(-1, action_to_index(actions, policy.n_cats).unsqueeze(-1)).squeeze(-1)
            bounds = None
        else:
            lp, bounds = _policy_logprob(policy, obs, actions)
            if bounds is not None:
                bounds = (bounds.elbo, bounds.cubo, bounds.alpha_used)
        loss = -(adv.detach() * lp).sum()
    loss = loss / n
    if config.entropy_coef > 0:
        loss = loss - config.entropy_coef * _entropy(policy, obs).mean()
    return loss, bounds


def _grads_finite(params):
    return all(p.grad is None or torch.isfinite(p.grad).all() for p in params)


def a2c_update(rollout, returns, advantages, policy, critic, actor_opt, critic_opt, kind, config):
    """One actor step and one critic step.  Non-finite losses or gradients skip both."""
    actor_params = [p for g in actor_opt.param_groups for p in g["params"]]
    critic_params = [p for g in critic_opt.param_groups for p in g["params"]]
    actor_opt.zero_grad()
    critic_opt.zero_grad()
    try:
        a_loss, bounds = actor_loss(rollout, advantages, policy, kind, config)
    except NumericalError as exc:
        log.warning("actor loss skipped: %s", exc)
        return UpdateReport(math.nan, math.nan, math.nan, math.nan, skipped=True)
    values = critic(rollout.obs.reshape(-1, rollout.obs.shape[-1]))
    c_loss = config.value_coef * ((returns.reshape(-1) - values) ** 2).mean()
    if not (torch.isfinite(a_loss) and torch.isfinite(c_loss)):
        log.warning("non-finite loss (actor %s, critic %s); step skipped", float(a_loss.detach()), float(c_loss.detach()))
        return UpdateReport(float(a_loss.detach()), float(c_loss.detach()), math.nan, math.nan, skipped=True)
    a_loss.backward()
    c_loss.backward()
    if not (_grads_finite(actor_params) and _grads_finite(critic_params)):
        log.warning("non-finite gradient; step skipped")
        actor_opt.zero_grad()
        critic_opt.zero_grad()
        return UpdateReport(float(a_loss.detach()), float(c_loss.detach()), math.nan, math.nan, skipped=True)
    a_norm = float(nn.utils.clip_grad_norm_(actor_params, config.max_grad_norm))
    c_norm = float(nn.utils.clip_grad_norm_(critic_params, config.max_grad_norm))
    actor_opt.step()
    critic_opt.step()
    report = UpdateReport(float(a_loss.detach()), float(c_loss.detach()), a_norm, c_norm)
    if bounds is not None:
        report.elbo = float(bounds[0].detach().mean())
        report.cubo = float(bounds[1].detach().mean())
        report.alpha = float(torch.as_tensor(bounds[2]).detach().mean())
    return report


def elbo_optimize(obs, policy, optimizer, config, generator=None):
    """ELBO ascent on states drawn from ``obs``; returns the per-step ELBO trace.

    Each inner step samples ``elbo_batch_size`` states, draws one fresh action
    per state from the current policy and ascends the Monte-Carlo ELBO with
    ``elbo_posterior_samples`` posterior draws.  Steps with non-finite values
    are logged and skipped.
    """
    trace = []
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for step in range(config.n_elbo_steps):
        idx = torch.randint(obs.shape[0], (config.elbo_batch_size,), generator=generator)
        states = obs[idx]
        actions = policy.sample(states, 1, generator=generator)[:, 0]
        optimizer.zero_grad()
        try:
            elbo = policy.elbo(states, actions, config.elbo_posterior_samples, generator=generator).mean()
        except NumericalError as exc:
            log.warning("ELBO step %d skipped: %s", step, exc)
            continue
        if not torch.isfinite(elbo):
            log.warning("ELBO step %d skipped: non-finite value", step)
            continue
        (-elbo).backward()
        if not _grads_finite(params):
            log.warning("ELBO step %d skipped: non-finite gradient", step)
            optimizer.zero_grad()
            continue
        nn.utils.clip_grad_norm_(params, config.max_grad_norm)
        optimizer.step()
        trace.append(float(elbo.detach()))
    return trace


def evaluate(policy, sampler, env_factory, n_envs, base_seed, max_steps=100000):
    """Mean undiscounted return of one episode in each of ``n_envs`` fixed-seed environments."""
    envs = [env_factory(base_seed + i) for i in range(n_envs)]
    obs = [env.reset(seed=base_seed + i) for i, env in enumerate(envs)]
    returns = np.zeros(n_envs)
    alive = np.ones(n_envs, dtype=bool)
    steps = 0
    while alive.any() and steps < max_steps:
        idx = np.flatnonzero(alive)
        actions, _, _ = sampler(_obs_tensor(np.stack([obs[i] for i in idx])), [envs[i].state for i in idx])
        for j, i in enumerate(idx):
            obs[i], r, done = envs[i].step(actions[j])
            returns[i] += r
            alive[i] = not done
        steps += 1
    return returns


def make_optimizers(policy, critic, kind, config):
    if isinstance(policy, FlowPolicy):
        actor_params = policy.policy_parameters() + list(policy.alpha.parameters())
        if config.actor_trains_posterior:
            actor_params += policy.posterior_parameters()
    else:
        actor_params = list(policy.parameters())
    opts = {
        "actor": torch.optim.RMSprop(actor_params, lr=config.lr_actor, eps=1e-5),
        "critic": torch.optim.RMSprop(critic.parameters(), lr=config.lr_critic, eps=1e-5),
    }
    if isinstance(policy, FlowPolicy):
        elbo_params = policy.posterior_parameters()
        if config.elbo_trains_policy:
            elbo_params = policy.policy_parameters() + elbo_params
        opts["elbo"] = torch.optim.RMSprop(elbo_params, lr=config.lr_elbo, eps=1e-5)
    return opts


def _rng_state(rng, generator):
    return {"numpy": rng.bit_generator.state, "torch": generator.get_state(), "torch_global": torch.get_rng_state()}


def save_checkpoint(path, config, policy, critic, optimizers, rng, generator, env_steps, extra=None, metadata=None):
    payload = {
        "format": "flowiar-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "policy_kind": config.policy,
        "obs_dim": policy.obs_dim,
        "dims": list(policy.dims),
        "policy": policy.state_dict(),
        "critic": critic.state_dict(),
        "optimizers": {k: o.state_dict() for k, o in optimizers.items()},
        "rng": _rng_state(rng, generator),
        "env_steps": env_steps,
        "extra": extra or {},
        "metadata": metadata or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Returns ``(config, policy, critic, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "flowiar-checkpoint":
        raise ConfigError(f"{path} is not a flowiar checkpoint", "checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}", "checkpoint")
    config = TrainConfig.from_dict(payload["config"])
    n_dims, n_cats = payload["dims"]
    policy = build_policy(config.policy, payload["obs_dim"], n_dims, n_cats, config)
    policy.load_state_dict(payload["policy"])
    critic = CriticNet(payload["obs_dim"], config.hidden, config.n_hidden)
    critic.load_state_dict(payload["critic"])
    return config, policy, critic, payload


class _CsvLog:
    def __init__(self, path, columns):
        self.columns = columns
        self.fh = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.writer = csv.DictWriter(self.fh, fieldnames=columns)
            self.writer.writeheader()

    def write(self, row):
        if self.fh is not None:
            self.writer.writerow({k: row[k] for k in self.columns})
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _nanmean(values):
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


def train(config, env_factory, oracle, out_dir=None, step_callback=None, policy=None, metadata=None):
    """Run IAR-A2C until ``max_env_steps`` (or ``e_max`` finished episodes).

    Args:
        config: a :class:`TrainConfig`.
        env_factory: ``factory(seed) -> Env``.
        oracle: validity oracle; wrapped in a :class:`MeteredOracle` for
            query counting.
        out_dir: if given, receives ``metrics.csv``, ``updates.csv`` and the
            ``best.pt`` / ``final.pt`` checkpoints.
        step_callback: called as ``fn(states, actions)`` before every
            vectorised environment step.
        policy: optional pre-built policy (otherwise built from the config).
        metadata: JSON-compatible dict stored in every checkpoint.

    Raises:
        TrainingAborted: starvation or ``max_nonfinite`` consecutive skipped
            updates; an ``abort.pt`` checkpoint is written first.
    """
    config.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    probe = env_factory(config.seed)
    obs_dim = int(np.prod(probe.observation_shape))
    n_dims, n_cats = probe.action_dims
    check_compatible(config.policy, oracle, n_dims, n_cats, config.enumeration_limit)
    if policy is None:
        policy = build_policy(config.policy, obs_dim, n_dims, n_cats, config)
    critic = CriticNet(obs_dim, config.hidden, config.n_hidden)
    optimizers = make_optimizers(policy, critic, config.policy, config)
    metered = oracle if isinstance(oracle, MeteredOracle) else MeteredOracle(oracle)
    sampler = _Sampler(config.policy, policy, metered, config, rng, generator)
    eval_rng = np.random.default_rng(config.seed + 1)
    eval_gen = torch.Generator().manual_seed(config.seed + 1)
    eval_sampler = _Sampler(config.policy, policy, oracle, config, eval_rng, eval_gen)
    vec_env = VecEnv([env_factory(config.seed * 1000 + i) for i in range(config.n_envs)], seed=config.seed * 1000)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_log = _CsvLog(out / "metrics.csv" if out else None, METRIC_COLUMNS)
    updates_log = _CsvLog(out / "updates.csv" if out else None, UPDATE_COLUMNS)
    history, updates, checkpoints = [], [], {}
    env_steps, n_updates, best, skipped_run, skipped_total = 0, 0, -math.inf, 0, 0
    next_eval = 0
    window = []
    start = time.perf_counter()

    def do_eval():
        nonlocal best
        returns = evaluate(policy, eval_sampler, env_factory, config.n_eval_envs, config.eval_seed)
        mean_return = float(returns.mean())
        improved = mean_return > best
        best = max(best, mean_return)
        row = {
            "wall_clock_s": round(time.perf_counter() - start, 3),
            "env_steps": env_steps,
            "episode": len(vec_env.finished_returns),
            "mean_return": mean_return,
            "best_return": best,
            "valid_fraction_mean": _nanmean([u["valid_fraction"] for u in window]) if window else math.nan,
            "oracle_queries_cum": metered.queries,
            "elbo_mean": _nanmean([u["elbo"] for u in window]) if window else math.nan,
            "cubo_mean": _nanmean([u["cubo"] for u in window]) if window else math.nan,
            "actor_loss": _nanmean([u["actor_loss"] for u in window]) if window else math.nan,
            "critic_loss": _nanmean([u["critic_loss"] for u in window]) if window else math.nan,
            "seed": config.seed,
        }
        window.clear()
        history.append(row)
        metrics_log.write(row)
        if out is not None and improved:
            checkpoints["best"] = save_checkpoint(
                out / "best.pt", config, policy, critic, optimizers, rng, generator, env_steps,
                {"mean_return": mean_return}, metadata,
            )
        return row

    def abort(message, cause):
        metrics_log.close()
        updates_log.close()
        if out is not None:
            checkpoints["abort"] = save_checkpoint(
                out / "abort.pt", config, policy, critic, optimizers, rng, generator, env_steps,
                {"reason": message}, metadata,
            )
        raise TrainingAborted(message, history, cause, updates, checkpoints.get("abort")) from cause

    try:
        while env_steps < config.max_env_steps and not (config.e_max and len(vec_env.finished_returns) >= config.e_max):
            if env_steps >= next_eval:
                try:
                    do_eval()
                except StarvationError as exc:
                    abort(f"starvation during evaluation at env step {env_steps}: {exc}", exc)
                next_eval += config.eval_every
            try:
                rollout = collect_rollout(vec_env, sampler, config.t_max, step_callback)
            except StarvationError as exc:
                abort(f"starvation at env step {env_steps}: {exc}", exc)
            env_steps += rollout.n_steps
            returns, advantages = compute_returns(rollout, critic, config.gamma)
            report = a2c_update(rollout, returns, advantages, policy, critic, optimizers["actor"], optimizers["critic"], config.policy, config)
            n_updates += 1
            if isinstance(policy, FlowPolicy) and n_updates % config.elbo_every == 0 and config.n_elbo_steps:
                elbo_optimize(rollout.obs.reshape(-1, obs_dim), policy, optimizers["elbo"], config, generator)
            skipped_run = skipped_run + 1 if report.skipped else 0
            skipped_total += report.skipped
            row = {
                "update": n_updates,
                "env_steps": env_steps,
                "valid_fraction": float(rollout.valid_fractions().mean()),
                "oracle_queries_cum": metered.queries,
                "actor_loss": report.actor_loss,
                "critic_loss": report.critic_loss,
                "actor_grad_norm": report.actor_grad_norm,
                "elbo": report.elbo,
                "cubo": report.cubo,
                "alpha": report.alpha,
                "skipped": int(report.skipped),
            }
            updates.append(row)
            window.append(row)
            updates_log.write(row)
            if skipped_run >= config.max_nonfinite:
                abort(f"{skipped_run} consecutive updates skipped for non-finite values", None)
        try:
            do_eval()
        except StarvationError as exc:
            abort(f"starvation during evaluation at env step {env_steps}: {exc}", exc)
    finally:
        metrics_log.close()
        updates_log.close()
    if out is not None:
        checkpoints["final"] = save_checkpoint(
            out / "final.pt", config, policy, critic, optimizers, rng, generator, env_steps, None, metadata
        )
    return TrainResult(history, updates, policy, critic, checkpoints, skipped_total)


def make_sampler(kind, policy, oracle, config, seed=0):
    """Action selector used outside training (evaluation, probes)."""
    return _Sampler(kind, policy, oracle, config, np.random.default_rng(seed), torch.Generator().manual_seed(seed))


def clone_config(config, **changes):
    data = copy.deepcopy(config.to_dict())
    data.update(changes)
    return TrainConfig.from_dict(data)
