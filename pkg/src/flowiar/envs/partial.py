"""Partially observable environments whose best memoryless policy is stochastic.

Both emit a constant observation, so a policy can only condition on nothing
and must randomise.  Their optimal action distributions are joint (not a
product of per-dimension marginals), which is what separates flow policies
from factored ones.
"""

from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigError
from .base import Env

CONFIG_DIR = Path(__file__).with_name("configs")

ACTION_A = (0, 1)
ACTION_B = (1, 0)


class ToyPartialEnv(Env):
    """Two hidden states aliased to one observation, two binary action dimensions.

    ``A = (0, 1)`` is correct in hidden state 0 and ``B = (1, 0)`` in hidden
    state 1.  A correct action pays ``+reward`` and flips the hidden state; a
    wrong action or either stay action ``(0, 0)``/``(1, 1)`` pays ``-reward``
    and leaves it unchanged.
    """

    action_dims = (2, 2)
    observation_shape = (1,)

    def __init__(self, reward=1.0, step_cap=50, seed=None):
        super().__init__(seed)
        self.reward = float(reward)
        self.step_cap = int(step_cap)
        self.latent = 0
        self.t = 0

    @property
    def state(self):
        return self.latent

    def _obs(self):
        return np.ones(1)

    def _reset(self):
        self.latent = int(self.rng.integers(2))
        self.t = 0
        return self._obs()

    def _step(self, action):
        correct = ACTION_A if self.latent == 0 else ACTION_B
        self.t += 1
        if tuple(action.tolist()) == correct:
            self.latent = 1 - self.latent
            reward = self.reward
        else:
            reward = -self.reward
        return self._obs(), reward, self.t >= self.step_cap


class EraPartialEnv(Env):
    """ERA-Partial: 2 resources on 3 nodes, three hidden phases and one observation.

    Each hidden phase has one trigger allocation.  Playing it pays
    ``+reward`` and advances the phase (mod 3); anything else pays
    ``-reward`` and leaves the phase unchanged.  Unconstrained.
    """

    observation_shape = (1,)

    def __init__(self, triggers, n_nodes=3, reward=10.0, episode_length=50, seed=None):
        super().__init__(seed)
        self.triggers = [tuple(int(x) for x in t) for t in triggers]
        if len({len(t) for t in self.triggers}) != 1:
            raise ConfigError("all trigger allocations need the same length", "triggers")
        if any(not 0 <= x < n_nodes for t in self.triggers for x in t):
            raise ConfigError(f"trigger nodes must lie in [0, {n_nodes})", "triggers")
        self.action_dims = (len(self.triggers[0]), int(n_nodes))
        self.reward = float(reward)
        self.episode_length = int(episode_length)
        self.phase = 0
        self.t = 0

    @classmethod
    def from_config(cls, path=None, seed=None, **overrides):
        with open(path or CONFIG_DIR / "era_partial.yaml") as fh:
            data = yaml.safe_load(fh)
        data.update(overrides)
        return cls(seed=seed, **data)

    @property
    def state(self):
        return self.phase

    def _reset(self):
        self.phase = int(self.rng.integers(len(self.triggers)))
        self.t = 0
        return np.ones(1)

    def _step(self, action):
        self.t += 1
        if tuple(action.tolist()) == self.triggers[self.phase]:
            self.phase = (self.phase + 1) % len(self.triggers)
            reward = self.reward
        else:
            reward = -self.reward
        return np.ones(1), reward, self.t >= self.episode_length
