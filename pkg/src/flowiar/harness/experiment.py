"""Running specs: one directory per seed, manifests, evaluation and paired ablations."""

import json
import platform
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from .. import __version__
from ..errors import ConfigError, TrainingAborted
from ..iar import MeteredOracle
from ..policies import action_to_index, all_actions
from ..trainer import evaluate, load_checkpoint, make_sampler, train
from .config import ExperimentSpec, save_spec, spec_from_dict
from .plotting import plot_runs, read_csv

ABLATIONS = {
    # name: (key, value for the full method, value for the ablated run)
    "gradient_correction": ("correction", True, False),
    "sandwich": ("alpha_mode", "adaptive", "elbo"),
    "posterior_type": ("posterior_mode", "flow", "gaussian"),
}
ABLATION_LABELS = {
    "gradient_correction": ("corrected", "standard_pg"),
    "sandwich": ("sandwich", "elbo_only"),
    "posterior_type": ("flow_posterior", "gaussian_posterior"),
}


def git_revision(path=None):
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=path or Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def write_manifest(run_dir, spec, seed, config, status, extra=None):
    manifest = {
        "seed": seed,
        "rng_seeds": {
            "torch_init": seed,
            "numpy_choice": seed,
            "torch_sampling": seed,
            "evaluation": seed + 1,
            "train_envs": [seed * 1000 + i for i in range(config.n_envs)],
            "eval_envs": [config.eval_seed + i for i in range(config.n_eval_envs)],
        },
        "git_revision": git_revision(),
        "flowiar_version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "config_hash": config.hash(),
        "spec": spec.to_dict(),
        "status": status,
    }
    manifest.update(extra or {})
    (Path(run_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


@dataclass
class RunOutcome:
    seed: int
    run_dir: Path
    status: str  # "completed" or "aborted"
    message: str = ""


def run_spec(spec, output_dir=None, keep_going=False):
    """Train every seed of ``spec``; each run gets ``<output_dir>/seed_<k>/``.

    Raises:
        TrainingAborted: a run aborted and ``keep_going`` is false (remaining
            seeds are skipped).
    """
    root = Path(output_dir or spec.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    save_spec(spec, root / "spec.yaml")
    outcomes = []
    for seed in spec.seeds:
        run_dir = root / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        config = spec.config_for_seed(seed)
        (run_dir / "config.yaml").write_text(yaml.safe_dump(spec.to_dict() | {"seed": seed}, sort_keys=False))
        write_manifest(run_dir, spec, seed, config, "running")
        factory, oracle = spec.make_env()
        metadata = {"env": spec.env, "env_options": spec.env_options}
        try:
            train(config, factory, oracle, out_dir=run_dir, metadata=metadata)
        except TrainingAborted as exc:
            write_manifest(run_dir, spec, seed, config, "aborted", {"abort_reason": str(exc)})
            outcomes.append(RunOutcome(seed, run_dir, "aborted", str(exc)))
            if not keep_going:
                raise
            continue
        write_manifest(run_dir, spec, seed, config, "completed")
        outcomes.append(RunOutcome(seed, run_dir, "completed"))
    return outcomes


def replay_manifest(run_dir, output_dir):
    """Re-run one seed from its manifest into ``output_dir``."""
    manifest = json.loads((Path(run_dir) / "manifest.json").read_text())
    spec = spec_from_dict(manifest["spec"] | {"seeds": [manifest["seed"]]})
    return run_spec(spec, output_dir)[0]


def parse_probe(text):
    """``"0,1,2"`` -> allocation tuple; an empty string means the reset observation."""
    text = (text or "").strip()
    if not text:
        return None
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"probe state {text!r} must be comma-separated node indices", "probe") from exc


def evaluate_checkpoint(checkpoint, env=None, n_episodes=10, probes=(), n_probe_samples=200, seed=0):
    """Mean/std return over fixed-seed episodes plus action histograms at probe states.

    Each probe is an allocation (ERA) or ``None`` for the initial observation.
    For every probe the raw policy is sampled ``n_probe_samples`` times; the
    report gives the histogram, the raw validity ratio and the validity of
    actions executed through rejection.
    """
    if n_episodes < 1:
        raise ConfigError(f"must be at least 1, got {n_episodes}", "n_episodes")
    config, policy, _critic, payload = load_checkpoint(checkpoint)
    meta = payload.get("metadata", {})
    ckpt_env = meta.get("env")
    env = env or ckpt_env
    if ckpt_env is not None and env != ckpt_env:
        raise ConfigError(f"checkpoint was trained on {ckpt_env!r}, not {env!r}", "env")
    spec = ExperimentSpec(env, config.policy, config, [config.seed], "", meta.get("env_options", {}))
    factory, oracle = spec.make_env()
    probe_env = factory(0)
    if tuple(probe_env.action_dims) != tuple(policy.dims):
        raise ConfigError(f"checkpoint action space {policy.dims} does not match {env!r} {probe_env.action_dims}", "env")
    sampler = make_sampler(config.policy, policy, oracle, config, seed)
    returns = evaluate(policy, sampler, factory, n_episodes, config.eval_seed)
    report = {
        "env": env,
        "policy": config.policy,
        "n_episodes": n_episodes,
        "mean_return": float(returns.mean()),
        "std_return": float(returns.std()),
        "returns": returns.tolist(),
        "probes": [],
    }
    gen = torch.Generator().manual_seed(seed)
    n_dims, n_cats = policy.dims
    for probe in probes:
        obs = probe_env.reset(seed=seed)
        if probe is not None:
            if not hasattr(probe_env, "set_state"):
                raise ConfigError(f"{env!r} has no settable state for probes", "probe")
            probe_env.set_state(list(probe))
            obs = probe_env.observe()
        state = probe_env.state
        obs_t = torch.as_tensor(np.asarray(obs, dtype=np.float64)).view(1, -1)
        raw = policy.sample(obs_t, n_probe_samples, generator=gen)[0].numpy()
        raw_valid = oracle.is_valid_batch(state, raw)
        executed, _, _ = make_sampler(config.policy, policy, oracle, config, seed)(obs_t.repeat(n_probe_samples, 1), [state] * n_probe_samples)
        executed_valid = oracle.is_valid_batch(state, executed)
        idx = action_to_index(torch.as_tensor(raw), n_cats).numpy()
        counts = np.bincount(idx, minlength=n_cats**n_dims)
        top = np.argsort(-counts, kind="stable")[:5]
        actions = all_actions(n_dims, n_cats)
        report["probes"].append(
            {
                "state": None if probe is None else list(probe),
                "top_actions": [[actions[i].tolist(), int(counts[i]) / n_probe_samples] for i in top if counts[i]],
                "raw_valid_ratio": float(raw_valid.mean()),
                "executed_valid_ratio": float(executed_valid.mean()),
            }
        )
    return report


def ablation_specs(name, base):
    """``{label: spec}`` for the full method and the single-key ablation."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {list(ABLATIONS)}", "ablation")
    if base.policy != "flow":
        raise ConfigError("ablations compare flow-policy variants; set policy: flow", "policy")
    key, full_value, ablated_value = ABLATIONS[name]
    labels = ABLATION_LABELS[name]
    out = {}
    for label, value in zip(labels, (full_value, ablated_value)):
        data = base.to_dict()
        data["train"][key] = value
        out[label] = spec_from_dict(data)
    return out


def config_diff(a, b):
    da, db = a.train.to_dict(), b.train.to_dict()
    return sorted(k for k in da if da[k] != db[k])


def valid_fraction_trend(updates, fraction=0.1):
    """``(first, last)`` mean valid fraction over the first and last ``fraction`` of updates."""
    vf = np.asarray([float(u["valid_fraction"]) for u in updates], dtype=float)
    if len(vf) == 0:
        return float("nan"), float("nan")
    k = max(int(len(vf) * fraction), 1)
    return float(vf[:k].mean()), float(vf[-k:].mean())


def run_ablation(name, base, output_dir=None):
    """Train both variants on every seed, overlay their curves and write ``report.json``."""
    root = Path(output_dir or base.output_dir) / name
    variants = ablation_specs(name, base)
    specs = list(variants.values())
    report = {"ablation": name, "config_diff": config_diff(*specs), "variants": {}}
    groups = {}
    for label, spec in variants.items():
        outcomes = run_spec(spec, root / label, keep_going=True)
        runs = []
        for o in outcomes:
            first, last = valid_fraction_trend(read_csv(o.run_dir / "updates.csv"))
            runs.append({"seed": o.seed, "status": o.status, "message": o.message, "valid_fraction_first": first, "valid_fraction_last": last})
        report["variants"][label] = {"train": {k: spec.train.to_dict()[k] for k in report["config_diff"]}, "runs": runs}
        groups[label] = [o.run_dir for o in outcomes]
    plot_runs(None, "valid_fraction", root / "valid_fraction", source="updates", groups=groups)
    plot_runs(None, "mean_return", root / "mean_return", groups=groups)
    (root / "report.json").write_text(json.dumps(report, indent=2))
    return report
