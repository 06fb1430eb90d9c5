"""Experiment specs: YAML files with dotted command-line overrides."""

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..envs import ENV_NAMES, env_factory
from ..errors import ConfigError
from ..trainer import POLICY_KINDS, TrainConfig, check_compatible

SPEC_KEYS = ("env", "env_options", "policy", "seeds", "output_dir", "train")


@dataclass
class ExperimentSpec:
    env: str
    policy: str
    train: TrainConfig
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    env_options: dict = field(default_factory=dict)

    def to_dict(self):
        train = self.train.to_dict()
        train.pop("seed")
        train.pop("policy")
        return {
            "env": self.env,
            "env_options": dict(self.env_options),
            "policy": self.policy,
            "seeds": list(self.seeds),
            "output_dir": str(self.output_dir),
            "train": train,
        }

    def config_for_seed(self, seed):
        data = self.train.to_dict()
        data.update(seed=int(seed), policy=self.policy)
        return TrainConfig.from_dict(data)

    def make_env(self):
        """``(factory, oracle)`` for this spec's environment."""
        return env_factory(self.env, **self.env_options)


def parse_override(text):
    """``"a.b.c=value"`` -> ``(["a", "b", "c"], value)`` with YAML value parsing."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value", "overrides")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key", "overrides")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {raw!r}: {exc}", key) from exc
    if isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot ("1e-4") as strings
        try:
            value = float(value)
        except ValueError:
            pass
    return path, value


def apply_overrides(data, overrides):
    data = dict(data)
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for i, part in enumerate(path[:-1]):
            child = node.get(part)
            if child is None:
                child = {}
            elif not isinstance(child, dict):
                raise ConfigError("cannot descend into non-mapping value", ".".join(path[: i + 1]))
            node[part] = child = dict(child)
            node = child
        node[path[-1]] = value
    return data


def spec_from_dict(data):
    """Validate a raw mapping; the first problem found is raised with its field path."""
    if not isinstance(data, dict):
        raise ConfigError("experiment spec must be a mapping", "")
    unknown = sorted(set(data) - set(SPEC_KEYS))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}; expected {list(SPEC_KEYS)}", unknown[0])
    for key in ("env", "policy"):
        if key not in data:
            raise ConfigError("missing required field", key)
    env = data["env"]
    if env not in ENV_NAMES:
        raise ConfigError(f"unknown environment {env!r}; expected one of {list(ENV_NAMES)}", "env")
    policy = data["policy"]
    if policy not in POLICY_KINDS:
        raise ConfigError(f"unknown policy kind {policy!r}; expected one of {list(POLICY_KINDS)}", "policy")
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("must be a non-empty list of non-negative integers", "seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be distinct, got {seeds}", "seeds")
    env_options = data.get("env_options") or {}
    if not isinstance(env_options, dict):
        raise ConfigError("must be a mapping", "env_options")
    train = dict(data.get("train") or {})
    if not isinstance(train, dict):
        raise ConfigError("must be a mapping", "train")
    for key in ("seed", "policy"):
        if key in train:
            raise ConfigError(f"set {key!r} at the top level, not under train", f"train.{key}")
    train["policy"] = policy
    try:
        config = TrainConfig.from_dict(train)
    except TypeError as exc:
        raise ConfigError(str(exc), "train") from exc
    except ConfigError as exc:
        path = exc.path if exc.path == "train" else f"train.{exc.path}"
        raise ConfigError(str(exc).split(": ", 1)[-1], path) from exc
    spec = ExperimentSpec(env, policy, config, seeds, str(data.get("output_dir", "runs")), env_options)
    try:
        probe_factory, oracle = spec.make_env()
        probe = probe_factory(0)
    except ConfigError as exc:
        raise ConfigError(str(exc), f"env_options.{exc.path}" if exc.path else "env_options") from exc
    except TypeError as exc:
        raise ConfigError(str(exc), "env_options") from exc
    check_compatible(policy, oracle, *probe.action_dims, config.enumeration_limit)
    return spec


def load_spec(path, overrides=None):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file {path}", "spec") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}", "spec") from exc
    return spec_from_dict(apply_overrides(data or {}, overrides))


def save_spec(spec, path):
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))


__all__ = [
    "ExperimentSpec",
    "apply_overrides",
    "load_spec",
    "parse_override",
    "save_spec",
    "spec_from_dict",
]
