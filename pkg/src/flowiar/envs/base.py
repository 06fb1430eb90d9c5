"""Minimal environment interface and a vectorised wrapper with auto-reset."""

import numpy as np

from ..errors import ContractViolation


class Env:
    """Episodic environment with a categorical ``(D, M)`` action space.

    ``state`` exposes whatever the constraint oracle needs; for partially
    observable environments it is not part of the observation.
    """

    action_dims = (1, 2)
    observation_shape = (1,)

    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.done = True

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.done = False
        return self._reset()

    def step(self, action):
        if self.done:
            raise ContractViolation("step() called on a finished episode; call reset() first")
        action = np.asarray(action, dtype=np.int64).reshape(-1)
        d, m = self.action_dims
        if action.shape != (d,) or action.min() < 0 or action.max() >= m:
            raise ContractViolation(f"action {action.tolist()} is outside the {d}x{m} action space")
        obs, reward, done = self._step(action)
        self.done = bool(done)
        return obs, float(reward), self.done

    @property
    def state(self):
        raise NotImplementedError

    def _reset(self):
        raise NotImplementedError

    def _step(self, action):
        raise NotImplementedError


class VecEnv:
    """Steps several independently seeded environments; finished ones reset automatically."""

    def __init__(self, envs, seed=0):
        self.envs = list(envs)
        self.seed = seed
        self.obs = np.stack([env.reset(seed=seed + i) for i, env in enumerate(self.envs)])
        self.episode_returns = np.zeros(len(self.envs))
        self.finished_returns = []

    def __len__(self):
        return len(self.envs)

    @property
    def states(self):
        return [env.state for env in self.envs]

    def step(self, actions):
        next_obs, rewards, dones = [], np.zeros(len(self.envs)), np.zeros(len(self.envs), dtype=bool)
        for i, (env, act) in enumerate(zip(self.envs, actions)):
            o, r, d = env.step(act)
            rewards[i], dones[i] = r, d
            self.episode_returns[i] += r
            if d:
                self.finished_returns.append(self.episode_returns[i])
                self.episode_returns[i] = 0.0
                o = env.reset()
            next_obs.append(o)
        self.obs = np.stack(next_obs)
        return self.obs, rewards, dones
