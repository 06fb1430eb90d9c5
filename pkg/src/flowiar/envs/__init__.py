"""Environment family: ERA (constrained), ERA-Partial and Toy-Partial (unconstrained)."""

import functools

from ..errors import ConfigError
from ..iar import AcceptAllOracle
from .base import Env, VecEnv
from .era import (
    ERA_VERSIONS,
    EraConfig,
    EraEnv,
    EraOracle,
    EraState,
    era_config,
    era_is_valid,
    era_is_valid_batch,
    era_step,
    generate_era_config,
    load_era_config,
    save_era_config,
)
from .partial import EraPartialEnv, ToyPartialEnv

ENV_NAMES = ("toy_partial", "partial", *ERA_VERSIONS)


def make_era(version, seed=None, **overrides):
    """Build an ERA environment and its oracle.

    ``partial`` returns the unconstrained, partially observable variant with an
    accept-all oracle; ``v1``..``v5`` return the constrained variants.
    """
    if version == "partial":
        return EraPartialEnv.from_config(seed=seed, **overrides), AcceptAllOracle()
    config = era_config(version, **overrides)
    return EraEnv(config, seed=seed), EraOracle(config)


def make_toy_partial(seed=None, **overrides):
    return ToyPartialEnv(seed=seed, **overrides)


def env_factory(name, **overrides):
    """``(factory, oracle)`` where ``factory(seed)`` builds a fresh environment instance."""
    if name == "toy_partial":
        make_toy_partial(**overrides)
        return functools.partial(make_toy_partial, **overrides), AcceptAllOracle()
    if name not in ENV_NAMES:
        raise ConfigError(f"unknown environment {name!r}; expected one of {ENV_NAMES}", "env")
    _, oracle = make_era(name, **overrides)
    return functools.partial(lambda seed, **kw: make_era(name, seed=seed, **kw)[0], **overrides), oracle


__all__ = [
    "ENV_NAMES",
    "ERA_VERSIONS",
    "Env",
    "EraConfig",
    "EraEnv",
    "EraOracle",
    "EraPartialEnv",
    "EraState",
    "ToyPartialEnv",
    "VecEnv",
    "env_factory",
    "era_config",
    "era_is_valid",
    "era_is_valid_batch",
    "era_step",
    "generate_era_config",
    "load_era_config",
    "make_era",
    "make_toy_partial",
    "save_era_config",
]
