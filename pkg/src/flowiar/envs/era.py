"""Emergency Resource Allocation (ERA): resources moving on a district graph.

Each step the agent proposes a new node for every resource.  A proposal is
valid when every resource stays put or moves to an adjacent node and all
resources end up within ``max_hops`` of each other.  Events appear on nodes
(type first, then node from a per-type distribution); an event is resolved
when a resource occupies its node after the move.
"""

import itertools
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigError, ContractViolation, SchemaError
from ..iar import ConstraintOracle
from .base import Env

CONFIG_DIR = Path(__file__).with_name("configs")

# (n_resources, n_nodes, max_hops) per version
ERA_VERSIONS = {
    "v1": (3, 6, 1),
    "v2": (3, 7, 1),
    "v3": (3, 8, 2),
    "v4": (3, 9, 2),
    "v5": (3, 10, 3),
}


def bfs_hops(adjacency):
    """All-pairs unweighted hop counts; unreachable pairs get ``inf``."""
    adjacency = np.asarray(adjacency, dtype=bool)
    n = len(adjacency)
    dist = np.full((n, n), np.inf)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in np.flatnonzero(adjacency[u]):
                if dist[src, v] == np.inf:
                    dist[src, v] = dist[src, u] + 1
                    queue.append(v)
    return dist


@dataclass
class EraConfig:
    adjacency: np.ndarray
    cost: np.ndarray
    n_resources: int
    max_hops: int
    event_type_dist: np.ndarray
    event_node_dist_per_type: np.ndarray
    reward_resolve: float = 10.0
    penalty_miss: float = 10.0
    episode_length: int = 100
    events_per_step: int = 1
    persistent_events: bool = False
    name: str = "era"
    hops: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        self.cost = np.asarray(self.cost, dtype=float)
        self.event_type_dist = np.asarray(self.event_type_dist, dtype=float)
        self.event_node_dist_per_type = np.asarray(self.event_node_dist_per_type, dtype=float)
        self.validate()
        # staying put is always a legal move
        self.reachable = self.adjacency | np.eye(self.n_nodes, dtype=bool)
        self.hops = bfs_hops(self.adjacency)

    @property
    def n_nodes(self):
        return len(self.adjacency)

    @property
    def n_event_types(self):
        return len(self.event_type_dist)

    def validate(self):
        """Raise :class:`ConfigError` at the first violated invariant."""
        adj, cost = self.adjacency, self.cost
        n = adj.shape[0] if adj.ndim == 2 else -1
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ConfigError(f"must be square, got shape {adj.shape}", "adjacency")
        for i, j in zip(*np.nonzero(adj != adj.T)):
            raise ConfigError(f"not symmetric at row {i}, column {j}", "adjacency")
        if cost.shape != (n, n):
            raise ConfigError(f"shape {cost.shape} does not match adjacency ({n}, {n})", "cost")
        for i, j in zip(*np.nonzero(~(cost >= 0))):
            raise ConfigError(f"negative or NaN entry at row {i}, column {j}", "cost")
        for i in np.flatnonzero(np.diag(cost) != 0):
            raise ConfigError(f"diagonal entry at row {i}, column {i} must be 0", "cost")
        if int(self.n_resources) < 1:
            raise ConfigError("must be at least 1", "n_resources")
        if int(self.max_hops) < 0:
            raise ConfigError("must be non-negative", "max_hops")
        if abs(self.event_type_dist.sum() - 1.0) > 1e-9 or (self.event_type_dist < 0).any():
            raise ConfigError("must be a probability vector", "event_type_dist")
        per_type = self.event_node_dist_per_type
        if per_type.shape != (len(self.event_type_dist), n):
            raise ConfigError(
                f"shape {per_type.shape} should be ({len(self.event_type_dist)}, {n})", "event_node_dist_per_type"
            )
        for t, row in enumerate(per_type):
            if abs(row.sum() - 1.0) > 1e-9 or (row < 0).any():
                raise ConfigError(f"row {t} is not a probability vector", "event_node_dist_per_type")
        if int(self.episode_length) < 1:
            raise ConfigError("must be at least 1", "episode_length")

    def to_dict(self):
        return {
            "name": self.name,
            "adjacency": self.adjacency.astype(int).tolist(),
            "cost": self.cost.tolist(),
            "n_resources": int(self.n_resources),
            "max_hops": int(self.max_hops),
            "event_type_dist": self.event_type_dist.tolist(),
            "event_node_dist_per_type": self.event_node_dist_per_type.tolist(),
            "reward_resolve": float(self.reward_resolve),
            "penalty_miss": float(self.penalty_miss),
            "episode_length": int(self.episode_length),
            "events_per_step": int(self.events_per_step),
            "persistent_events": bool(self.persistent_events),
        }

    @classmethod
    def from_dict(cls, data):
        known = {
            "name", "adjacency", "cost", "n_resources", "max_hops", "event_type_dist",
            "event_node_dist_per_type", "reward_resolve", "penalty_miss", "episode_length",
            "events_per_step", "persistent_events",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        missing = {"adjacency", "cost", "n_resources", "max_hops", "event_type_dist", "event_node_dist_per_type"} - set(data)
        if missing:
            raise ConfigError(f"missing keys {sorted(missing)}")
        return cls(**data)


def load_era_config(path, **overrides):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    data.update(overrides)
    return EraConfig.from_dict(data)


def save_era_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False, default_flow_style=None)


def generate_era_config(version):
    """Deterministic stand-in graph for a version: k-nearest-neighbour graph of random points."""
    n_res, n_nodes, hops = ERA_VERSIONS[version]
    rng = np.random.default_rng(1000 + int(version[1:]))
    pts = rng.uniform(size=(n_nodes, 2))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    adj = np.zeros((n_nodes, n_nodes), dtype=bool)
    for i in range(n_nodes):
        for j in np.argsort(d[i])[1:3]:
            adj[i, j] = adj[j, i] = True
    # connect components through their closest pair of nodes
    while np.isinf(bfs_hops(adj)).any():
        comp = np.isfinite(bfs_hops(adj)[0])
        sub = np.where(comp[:, None] & ~comp[None, :], d, np.inf)
        i, j = np.unravel_index(np.argmin(sub), sub.shape)
        adj[i, j] = adj[j, i] = True
    hot = rng.choice(n_nodes, size=2, replace=False)
    node_dist = []
    for h in hot:
        w = np.exp(-1.5 * bfs_hops(adj)[h])
        node_dist.append(w / w.sum())
    return EraConfig(
        adjacency=adj,
        cost=bfs_hops(adj),
        n_resources=n_res,
        max_hops=hops,
        event_type_dist=np.array([0.3, 0.7]),
        event_node_dist_per_type=np.array(node_dist),
        name=f"era-{version}",
    )


@dataclass
class EraState:
    allocation: np.ndarray
    live_events: list
    step_index: int = 0

    def copy(self):
        return EraState(self.allocation.copy(), list(self.live_events), self.step_index)


def _check_range(config, action):
    action = np.asarray(action)
    if action.shape[-1] != config.n_resources:
        raise SchemaError(f"action has {action.shape[-1]} entries, expected {config.n_resources}")
    if action.size and (action.min() < 0 or action.max() >= config.n_nodes):
        raise SchemaError(f"action {action.tolist()} names a node outside [0, {config.n_nodes})")
    return action.astype(np.int64)


def era_is_valid_batch(config, state, actions):
    actions = _check_range(config, np.atleast_2d(actions))
    ok = config.reachable[state.allocation[None, :], actions].all(axis=1)
    for r1, r2 in itertools.combinations(range(config.n_resources), 2):
        ok &= config.hops[actions[:, r1], actions[:, r2]] <= config.max_hops
    return ok


def era_is_valid(config, state, action):
    """Neighbour-or-stay moves and pairwise hop distance within ``max_hops``."""
    return bool(era_is_valid_batch(config, state, np.asarray(action)[None])[0])


def proximity_ok(config, allocation):
    return all(config.hops[a, b] <= config.max_hops for a, b in itertools.combinations(allocation, 2))


def sample_events(config, rng):
    events = []
    for _ in range(config.events_per_step):
        t = int(rng.choice(config.n_event_types, p=config.event_type_dist))
        node = int(rng.choice(config.n_nodes, p=config.event_node_dist_per_type[t]))
        events.append((node, t))
    return events


def era_step(config, state, action, rng):
    """Apply a valid action; returns ``(next_state, reward)``."""
    action = _check_range(config, action)
    if not era_is_valid(config, state, action):
        raise ContractViolation(f"invalid ERA action {action.tolist()} from allocation {state.allocation.tolist()}")
    occupied = set(action.tolist())
    resolved = [e for e in state.live_events if e[0] in occupied]
    missed = [e for e in state.live_events if e[0] not in occupied]
    move_cost = float(config.cost[state.allocation, action].sum())
    reward = config.reward_resolve * len(resolved) - config.penalty_miss * len(missed) - move_cost
    carried = missed if config.persistent_events else []
    nxt = EraState(action.copy(), carried + sample_events(config, rng), state.step_index + 1)
    return nxt, reward


class EraEnv(Env):
    """Fully observable ERA; the observation is one-hot allocations plus event counts per node and type."""

    def __init__(self, config, seed=None):
        super().__init__(seed)
        self.config = config
        self.action_dims = (config.n_resources, config.n_nodes)
        self.observation_shape = (config.n_resources * config.n_nodes + config.n_nodes * config.n_event_types,)
        self._start_allocations = np.array(
            [a for a in itertools.product(range(config.n_nodes), repeat=config.n_resources) if proximity_ok(config, a)]
        )
        self._state = None

    @property
    def state(self):
        return self._state

    def observe(self, state=None):
        state = self._state if state is None else state
        cfg = self.config
        alloc = np.zeros((cfg.n_resources, cfg.n_nodes))
        alloc[np.arange(cfg.n_resources), state.allocation] = 1.0
        events = np.zeros((cfg.n_nodes, cfg.n_event_types))
        for node, t in state.live_events:
            events[node, t] += 1.0
        return np.concatenate([alloc.ravel(), events.ravel()])

    def set_state(self, allocation, live_events=(), step_index=0):
        """Place the environment in a given (valid) state, e.g. for probing a policy."""
        allocation = np.asarray(allocation, dtype=np.int64)
        _check_range(self.config, allocation)
        if not proximity_ok(self.config, allocation):
            raise ContractViolation(f"allocation {allocation.tolist()} violates the proximity limit")
        self._state = EraState(allocation, list(live_events), step_index)
        self.done = False
        return self.observe()

    def _reset(self):
        start = self._start_allocations[self.rng.integers(len(self._start_allocations))]
        self._state = EraState(start.copy(), sample_events(self.config, self.rng), 0)
        return self.observe()

    def _step(self, action):
        self._state, reward = era_step(self.config, self._state, action, self.rng)
        return self.observe(), reward, self._state.step_index >= self.config.episode_length


class EraOracle(ConstraintOracle):
    """Validity oracle for an :class:`EraEnv`; queried with the environment's ``state``."""

    def __init__(self, config):
        self.config = config

    def is_valid(self, state, action):
        return era_is_valid(self.config, state, action)

    def is_valid_batch(self, state, actions):
        return era_is_valid_batch(self.config, state, actions)


def era_config(version, **overrides):
    if version not in ERA_VERSIONS:
        raise ConfigError(f"unknown ERA version {version!r}; expected one of {sorted(ERA_VERSIONS)} or 'partial'")
    return load_era_config(CONFIG_DIR / f"era_{version}.yaml", **overrides)

