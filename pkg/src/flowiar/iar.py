"""Invalid-action rejection: sampling, the effective policy, and the corrected gradient.

Actions are drawn in batches of ``S`` from the base policy, screened by a
black-box validity oracle, and one valid draw is picked uniformly (duplicates
keep their multiplicity).  The executed action is then distributed as the
base policy restricted to the valid set and renormalised.  The policy-gradient
surrogate adds a term built from the ``l`` valid draws that accounts for the
renormalisation.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractViolation, StarvationError
from .policies import action_to_index, all_actions

CORRECTION_WEIGHTINGS = ("ratio", "inverse_square")


class ConstraintOracle:
    """Black-box validity predicate. Subclasses override ``is_valid``."""

    accepts_all = False

    def is_valid(self, state, action):
        raise NotImplementedError

    def is_valid_batch(self, state, actions):
        return np.array([bool(self.is_valid(state, a)) for a in np.asarray(actions)], dtype=bool)

    def __call__(self, state, action):
        return self.is_valid(state, action)


class AcceptAllOracle(ConstraintOracle):
    accepts_all = True

    def is_valid(self, state, action):
        return True

    def is_valid_batch(self, state, actions):
        return np.ones(len(actions), dtype=bool)


class FunctionOracle(ConstraintOracle):
    """Wraps a plain ``fn(state, action) -> bool``."""

    def __init__(self, fn):
        self.fn = fn

    def is_valid(self, state, action):
        return bool(self.fn(state, action))


class TableOracle(ConstraintOracle):
    """Validity looked up in a ``[n_states, n_actions]`` table; ``state`` is an int."""

    def __init__(self, valid, n_cats):
        self.valid = np.asarray(valid, dtype=bool)
        self.n_cats = n_cats

    def is_valid(self, state, action):
        return bool(self.is_valid_batch(state, np.asarray(action)[None])[0])

    def is_valid_batch(self, state, actions):
        idx = action_to_index(torch.as_tensor(np.asarray(actions)), self.n_cats).numpy()
        return self.valid[int(state), idx]


class MeteredOracle(ConstraintOracle):
    """Counts queries before memoisation; evaluates each distinct action once per call."""

    def __init__(self, oracle):
        self.oracle = oracle
        self.accepts_all = oracle.accepts_all
        self.queries = 0
        self.evaluations = 0

    def is_valid(self, state, action):
        return bool(self.is_valid_batch(state, np.asarray(action)[None])[0])

    def is_valid_batch(self, state, actions):
        actions = np.asarray(actions)
        self.queries += len(actions)
        uniq, inverse = np.unique(actions, axis=0, return_inverse=True)
        self.evaluations += len(uniq)
        return np.asarray(self.oracle.is_valid_batch(state, uniq), dtype=bool)[inverse.reshape(-1)]

    def reset(self):
        self.queries = 0
        self.evaluations = 0


@dataclass
class ValidActionBatch:
    """Outcome of one rejection-sampling decision.

    ``valid_actions`` keeps draw order and multiplicity; ``n_sampled`` is the
    size of the batch the valid draws came from (``S``), ``total_drawn`` also
    counts discarded retry batches.
    """

    n_sampled: int
    valid_actions: np.ndarray
    chosen: np.ndarray
    total_drawn: int
    chosen_index: int = 0
    logprob_bounds_of_valid: list = field(default=None, repr=False)

    @property
    def n_valid(self):
        return len(self.valid_actions)


def rejection_sample_many(policy, obs, states, oracle, n_samples, max_retries=16, rng=None, generator=None):
    """Vectorised :func:`rejection_sample` over a batch of decisions.

    Args:
        policy: anything with ``sample(obs, n, generator) -> [B, n, D]``.
        obs: observation tensor ``[B, obs_dim]``.
        states: length-``B`` sequence of oracle states.
        oracle: a :class:`ConstraintOracle`.
        n_samples: draws per batch (``S``).
        max_retries: extra batches allowed when a batch has no valid draw.

    Raises:
        StarvationError: some decision stayed without a valid draw.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    b = obs.shape[0]
    results = [None] * b
    drawn = np.zeros(b, dtype=int)
    pending = np.arange(b)
    for _attempt in range(max_retries + 1):
        draws = policy.sample(obs[torch.as_tensor(pending)], n_samples, generator=generator).cpu().numpy()
        still = []
        for row, i in enumerate(pending):
            acts = draws[row]
            drawn[i] += n_samples
            ok = oracle.is_valid_batch(states[i], acts)
            if not ok.any():
                still.append(i)
                continue
            valid = acts[ok]
            pick = int(rng.integers(len(valid)))
            results[i] = ValidActionBatch(n_samples, valid, valid[pick].copy(), int(drawn[i]), pick)
        pending = np.array(still, dtype=int)
        if len(pending) == 0:
            return results
    i = int(pending[0])
    raise StarvationError(
        f"no valid action after {max_retries + 1} batches of {n_samples} ({drawn[i]} samples drawn)",
        state=states[i],
        total_drawn=int(drawn[i]),
    )


def rejection_sample(policy, obs, state, oracle, n_samples, max_retries=16, rng=None, generator=None):
    """Draw ``S`` actions, drop the invalid ones and pick one survivor uniformly.

    ``obs`` is a single observation (``[obs_dim]`` or ``[1, obs_dim]``).
    """
    obs = obs.view(1, -1)
    return rejection_sample_many(policy, obs, [state], oracle, n_samples, max_retries, rng, generator)[0]


def correction_statistics(batch):
    """``(l / S, S / l**2)`` for a well-formed batch."""
    l, s = batch.n_valid, batch.n_sampled
    if l < 1:
        raise ContractViolation("batch has no valid action")
    return l / s, s / l**2


def correction_weights(n_valid, n_sampled, weighting="ratio"):
    """Per-step multiplier on the summed log-probabilities of the valid draws.

    ``ratio`` gives ``1 / l``: the mean score of the valid draws, which
    estimates ``sum_C grad pi / sum_C pi`` directly.  ``inverse_square`` gives
    ``S / l**2``, the product of the two separate estimates ``(1/l) sum`` and
    ``l / S``.
    """
    n_valid = torch.as_tensor(n_valid, dtype=torch.float64)
    n_sampled = torch.as_tensor(n_sampled, dtype=torch.float64)
    if (n_valid < 1).any():
        raise ContractViolation("every step needs at least one valid draw")
    if weighting == "ratio":
        return 1.0 / n_valid
    if weighting == "inverse_square":
        return n_sampled / n_valid**2
    raise ValueError(f"unknown correction weighting {weighting!r}; expected one of {CORRECTION_WEIGHTINGS}")


def iar_surrogate_loss_batch(
    advantages,
    chosen_logprob,
    valid_logprobs,
    valid_owner,
    n_valid,
    n_sampled,
    weighting="ratio",
    correction=True,
    valid_counts=None,
    correction_coef=1.0,
):
    """Summed surrogate over ``T`` steps whose valid draws are flattened.

    ``valid_logprobs[k]`` belongs to step ``valid_owner[k]`` and stands for
    ``valid_counts[k]`` identical draws (default 1).  Advantages and
    correction weights are constants; the returned scalar has gradient
    ``-sum_t A_t (grad lp(a_t) - w_t sum_j grad lp(a_tj))``.
    """
    advantages = advantages.detach()
    first = chosen_logprob
    if correction:
        if len(valid_logprobs) == 0:
            raise ContractViolation("correction requested without valid draws")
        owner = torch.as_tensor(valid_owner, dtype=torch.long)
        dtype = valid_logprobs.dtype
        counts = torch.ones(len(owner), dtype=dtype) if valid_counts is None else torch.as_tensor(valid_counts, dtype=dtype)
        n_valid = torch.as_tensor(n_valid, dtype=dtype)
        n_sampled = torch.as_tensor(n_sampled, dtype=dtype)
        correction_weights(n_valid, n_sampled, weighting)  # validates l >= 1 and the weighting name
        l = n_valid[owner]
        # count / l rather than count * (1 / l): a singleton valid set then cancels exactly
        if weighting == "ratio":
            coef = counts / l
        else:
            coef = counts * n_sampled[owner] / l**2
        coef = (correction_coef * coef).detach()
        sums = torch.zeros_like(chosen_logprob).index_add(0, owner, coef * valid_logprobs)
        first = first - sums
    return -(advantages * first).sum()


def iar_surrogate_loss(
    advantage, chosen_logprob, valid_logprobs, n_sampled, weighting="ratio", correction=True, valid_counts=None
):
    """Single-step surrogate; ``valid_logprobs`` holds the ``l >= 1`` valid draws' log-probs.

    With ``valid_counts`` each entry stands for that many identical draws.
    Passing distinct actions with their counts makes a singleton valid set
    cancel exactly; ``l`` repeated entries cancel only up to round-off.
    """
    if not torch.is_tensor(valid_logprobs):
        if len(valid_logprobs) == 0:
            raise ContractViolation("iar_surrogate_loss needs at least one valid log-probability")
        valid_logprobs = torch.stack(list(valid_logprobs))
    valid_logprobs = valid_logprobs.reshape(-1)
    if valid_logprobs.numel() == 0:
        raise ContractViolation("iar_surrogate_loss needs at least one valid log-probability")
    k = valid_logprobs.numel()
    l = k if valid_counts is None else int(np.sum(valid_counts))
    return iar_surrogate_loss_batch(
        torch.as_tensor(advantage, dtype=valid_logprobs.dtype).reshape(1),
        chosen_logprob.reshape(1),
        valid_logprobs,
        torch.zeros(k, dtype=torch.long),
        torch.tensor([l]),
        torch.tensor([n_sampled]),
        weighting,
        correction,
        valid_counts=valid_counts,
    )


def unique_valid(batch):
    """Distinct valid actions of a batch, their multiplicities and the position of the chosen one."""
    uniq, inverse, counts = np.unique(batch.valid_actions, axis=0, return_inverse=True, return_counts=True)
    return uniq, counts, int(inverse.reshape(-1)[batch.chosen_index])


def exact_effective_policy(policy, obs, state, oracle):
    """Enumerated ``pi'(a|s)``: the base distribution restricted to valid actions, renormalised."""
    probs = policy.full_distribution(obs.view(1, -1))[0].detach()
    acts = all_actions(*policy.dims).numpy()
    valid = torch.as_tensor(oracle.is_valid_batch(state, acts))
    total = probs[valid].sum()
    if not valid.any() or total <= 0:
        raise ContractViolation("state has no valid action with positive probability")
    return torch.where(valid, probs, torch.zeros_like(probs)) / total
