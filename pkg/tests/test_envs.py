import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowiar.envs import (
    ENV_NAMES,
    EraConfig,
    EraEnv,
    EraPartialEnv,
    EraState,
    ToyPartialEnv,
    VecEnv,
    env_factory,
    era_config,
    era_is_valid,
    era_is_valid_batch,
    era_step,
    generate_era_config,
    load_era_config,
    make_era,
    make_toy_partial,
    save_era_config,
)
from flowiar.envs.era import bfs_hops, sample_events
from flowiar.errors import ConfigError, ContractViolation, SchemaError
from flowiar.iar import AcceptAllOracle
from flowiar.verify import era_brute_force_valid, toy_partial_average_reward


def line_config(**kw):
    adj = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    data = dict(
        adjacency=adj,
        cost=bfs_hops(adj),
        n_resources=2,
        max_hops=1,
        event_type_dist=[1.0],
        event_node_dist_per_type=[[0.2, 0.3, 0.5]],
    )
    data.update(kw)
    return EraConfig(**data)


def all_era_actions(config):
    return np.array(list(itertools.product(range(config.n_nodes), repeat=config.n_resources)))


class TestEraValidity:
    def test_line_graph_example(self):
        cfg = line_config()
        state = EraState(np.array([0, 1]), [])
        assert not era_is_valid(cfg, state, [0, 2])
        assert era_is_valid(cfg, state, [1, 2])
        assert era_is_valid(cfg, state, [0, 1])

    def test_out_of_range_is_an_error(self):
        cfg = line_config()
        state = EraState(np.array([0, 1]), [])
        with pytest.raises(SchemaError):
            era_is_valid(cfg, state, [0, 3])
        with pytest.raises(SchemaError):
            era_is_valid(cfg, state, [0, 1, 1])

    @pytest.mark.parametrize("version", ["v1", "v2", "v3", "v4", "v5"])
    def test_staying_is_valid(self, version):
        env, oracle = make_era(version, seed=0)
        for seed in range(20):
            env.reset(seed=seed)
            assert oracle.is_valid(env.state, env.state.allocation)

    def test_v4_enumeration_matches_brute_force(self):
        cfg = era_config("v4")
        env = EraEnv(cfg, seed=0)
        env.reset()
        acts = all_era_actions(cfg)
        assert len(acts) == 729
        ours = era_is_valid_batch(cfg, env.state, acts)
        theirs = np.array([era_brute_force_valid(cfg.adjacency, cfg.max_hops, env.state.allocation, a) for a in acts])
        assert np.array_equal(ours, theirs)
        assert ours.mean() == theirs.mean()

    @pytest.mark.parametrize("version", ["v1", "v2", "v3", "v4"])
    def test_agrees_with_brute_force_on_random_states(self, version):
        cfg = era_config(version)
        env = EraEnv(cfg)
        rng = np.random.default_rng(int(version[1:]))
        acts = all_era_actions(cfg)
        starts = env._start_allocations
        for alloc in starts[rng.integers(len(starts), size=100)]:
            ours = era_is_valid_batch(cfg, EraState(alloc, []), acts)
            theirs = [era_brute_force_valid(cfg.adjacency, cfg.max_hops, alloc, a) for a in acts]
            assert np.array_equal(ours, theirs)

    def test_validity_closure_fuzz(self):
        cfg = era_config("v1")
        env = EraEnv(cfg, seed=3)
        env.reset()
        acts = all_era_actions(cfg)
        rng = np.random.default_rng(0)
        for _ in range(10**5):
            if env.done:
                env.reset()
            valid = acts[era_is_valid_batch(cfg, env.state, acts)]
            env.step(valid[rng.integers(len(valid))])
            alloc = env.state.allocation
            assert all(cfg.hops[a, b] <= cfg.max_hops for a, b in itertools.combinations(alloc, 2))


class TestEraStep:
    def test_no_events_stay(self):
        cfg = line_config()
        _, reward = era_step(cfg, EraState(np.array([0, 1]), []), [0, 1], np.random.default_rng(0))
        assert reward == 0.0

    def test_resolve_event(self):
        cfg = line_config(cost=np.array([[0, 2.5, 5.0], [2.5, 0, 2.5], [5.0, 2.5, 0]]))
        state = EraState(np.array([0, 1]), [(2, 0)])
        _, reward = era_step(cfg, state, [1, 2], np.random.default_rng(0))
        assert reward == pytest.approx(cfg.reward_resolve - 2.5 - 2.5)

    def test_missed_event(self):
        cfg = line_config()
        state = EraState(np.array([0, 1]), [(2, 0)])
        nxt, reward = era_step(cfg, state, [0, 1], np.random.default_rng(0))
        assert reward == -cfg.penalty_miss
        # the missed event expired; only freshly sampled events remain
        assert len(nxt.live_events) == cfg.events_per_step

    def test_persistent_events_linger(self):
        cfg = line_config(persistent_events=True)
        nxt, _ = era_step(cfg, EraState(np.array([0, 1]), [(2, 0)]), [0, 1], np.random.default_rng(0))
        assert nxt.live_events[0] == (2, 0) and len(nxt.live_events) == 2

    def test_invalid_action_is_contract_violation(self):
        env, _ = make_era("v1", seed=0)
        env.reset()
        acts = all_era_actions(env.config)
        bad = acts[~era_is_valid_batch(env.config, env.state, acts)][0]
        with pytest.raises(ContractViolation):
            env.step(bad)

    def test_event_type_frequencies(self):
        cfg = era_config("v2")
        rng = np.random.default_rng(0)
        n = 10**5
        types = np.array([sample_events(cfg, rng)[0][1] for _ in range(n)])
        freq = np.bincount(types, minlength=cfg.n_event_types) / n
        p = cfg.event_type_dist
        assert (np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / n)).all()

    def test_reward_ledger(self):
        env, oracle = make_era("v3", seed=5)
        env.reset()
        acts = all_era_actions(env.config)
        rng = np.random.default_rng(1)
        cfg = env.config
        total, ledger = 0.0, 0.0
        while not env.done:
            before = env.state.copy()
            valid = acts[oracle.is_valid_batch(before, acts)]
            action = valid[rng.integers(len(valid))]
            _, r, _ = env.step(action)
            total += r
            # independent accounting from the recorded state
            for node, _t in before.live_events:
                ledger += cfg.reward_resolve if node in set(action.tolist()) else -cfg.penalty_miss
            ledger -= sum(cfg.cost[o, n] for o, n in zip(before.allocation, action))
        assert abs(total - ledger) < 1e-9

    def test_step_after_done(self):
        env = ToyPartialEnv(step_cap=1, seed=0)
        env.reset()
        env.step([0, 1])
        with pytest.raises(ContractViolation):
            env.step([0, 1])


class TestEraConfig:
    def test_versions(self):
        sizes = {v: make_era(v)[0].action_dims for v in ("v1", "v2", "v3", "v4", "v5")}
        assert sizes == {"v1": (3, 6), "v2": (3, 7), "v3": (3, 8), "v4": (3, 9), "v5": (3, 10)}
        d, m = sizes["v5"]
        assert m**d == 1000
        assert make_era("v1")[0].config.max_hops == 1 and make_era("v5")[0].config.max_hops == 3

    def test_partial(self):
        env, oracle = make_era("partial")
        d, m = env.action_dims
        assert m**d == 9
        assert isinstance(oracle, AcceptAllOracle)

    def test_unknown_version(self):
        with pytest.raises(ConfigError):
            make_era("v9")
        with pytest.raises(ConfigError):
            env_factory("cartpole")

    def test_shipped_configs_match_generator(self):
        for v in ("v1", "v2", "v3", "v4", "v5"):
            shipped, generated = era_config(v), generate_era_config(v)
            assert np.array_equal(shipped.adjacency, generated.adjacency)
            np.testing.assert_allclose(shipped.event_node_dist_per_type, generated.event_node_dist_per_type)

    def test_roundtrip(self, tmp_path):
        cfg = era_config("v2")
        save_era_config(cfg, tmp_path / "c.yaml")
        back = load_era_config(tmp_path / "c.yaml")
        assert back.to_dict() == cfg.to_dict()

    def test_asymmetric_adjacency_names_cell(self):
        adj = np.array([[0, 1, 0], [0, 0, 1], [0, 1, 0]])
        with pytest.raises(ConfigError, match="row 0, column 1"):
            line_config(adjacency=adj)

    def test_cost_diagonal(self):
        with pytest.raises(ConfigError, match="cost"):
            line_config(cost=np.ones((3, 3)))

    def test_event_distribution(self):
        with pytest.raises(ConfigError, match="event_type_dist"):
            line_config(event_type_dist=[0.5])
        with pytest.raises(ConfigError, match="event_node_dist_per_type"):
            line_config(event_node_dist_per_type=[[0.5, 0.5, 0.5]])

    def test_unknown_key(self):
        data = era_config("v1").to_dict()
        data["speed"] = 3
        with pytest.raises(ConfigError, match="speed"):
            EraConfig.from_dict(data)

    def test_override(self):
        env, _ = make_era("v1", episode_length=7)
        assert env.config.episode_length == 7


class TestDeterminism:
    @pytest.mark.parametrize("name", ENV_NAMES)
    def test_seeded_trajectories(self, name):
        factory, oracle = env_factory(name)

        def run(seed):
            env = factory(seed)
            obs = [env.reset()]
            rng = np.random.default_rng(0)
            d, m = env.action_dims
            acts = np.array(list(itertools.product(range(m), repeat=d)))
            rewards = []
            for _ in range(30):
                valid = acts[oracle.is_valid_batch(env.state, acts)]
                o, r, done = env.step(valid[rng.integers(len(valid))])
                obs.append(o)
                rewards.append(r)
                if done:
                    obs.append(env.reset())
            return np.array(obs), rewards

        a, b = run(11), run(11)
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]


class TestToyPartial:
    A, B, STAYS = (0, 1), (1, 0), [(0, 0), (1, 1)]

    def _simulate(self, probs, n=10**5, seed=0):
        env = ToyPartialEnv(step_cap=n + 1, seed=seed)
        env.reset()
        rng = np.random.default_rng(seed)
        acts = [(0, 0), (0, 1), (1, 0), (1, 1)]
        choice = rng.choice(4, size=n, p=probs)
        total = sum(env.step(acts[c])[1] for c in choice)
        return total / n

    def test_always_a_matches_chain(self):
        probs = [0.0, 1.0, 0.0, 0.0]
        assert self._simulate(probs) == pytest.approx(toy_partial_average_reward(probs), abs=1e-3)
        assert toy_partial_average_reward(probs) == -1.0

    def test_uniform_ab_matches_chain(self):
        probs = [0.0, 0.5, 0.5, 0.0]
        n = 10**5
        assert abs(self._simulate(probs, n) - toy_partial_average_reward(probs)) < 4 / math.sqrt(n)

    def test_uniform_ab_beats_every_deterministic_policy(self):
        uniform = toy_partial_average_reward([0.0, 0.5, 0.5, 0.0])
        for k in range(4):
            det = np.eye(4)[k]
            assert uniform > toy_partial_average_reward(det)

    def test_best_factored_policy(self):
        # product marginals (p, 1-p) x (q, 1-q): the chain value peaks at p = q = 0.5
        g = np.linspace(0, 1, 101)
        best = max(
            toy_partial_average_reward([p * q, p * (1 - q), (1 - p) * q, (1 - p) * (1 - q)]) for p in g for q in g
        )
        assert best == pytest.approx(-0.5, abs=1e-9)
        assert toy_partial_average_reward([0.0, 0.5, 0.5, 0.0]) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([(0, 0), (1, 1)]), st.integers(0, 100))
    def test_stay_keeps_latent(self, stay, seed):
        env = make_toy_partial(seed=seed)
        env.reset()
        before = env.state
        _, r, _ = env.step(stay)
        assert env.state == before and r == -env.reward

    def test_correct_action_flips(self):
        env = ToyPartialEnv(seed=0)
        env.reset()
        correct = self.A if env.state == 0 else self.B
        before = env.state
        _, r, _ = env.step(correct)
        assert r == env.reward and env.state == 1 - before

    def test_single_observation(self):
        env = ToyPartialEnv(seed=0)
        obs = {tuple(env.reset(seed=s)) for s in range(10)}
        assert obs == {(1.0,)}


class TestEraPartial:
    def test_triggers_advance_phase(self):
        env = EraPartialEnv.from_config(seed=0)
        env.reset()
        for _ in range(6):
            phase = env.state
            _, r, _ = env.step(env.triggers[phase])
            assert r == env.reward and env.state == (phase + 1) % 3

    def test_other_actions_penalised(self):
        env = EraPartialEnv.from_config(seed=0)
        env.reset()
        phase = env.state
        wrong = env.triggers[(phase + 1) % 3]
        _, r, _ = env.step(wrong)
        assert r == -env.reward and env.state == phase

    def test_bad_triggers(self):
        with pytest.raises(ConfigError):
            EraPartialEnv([[0, 3]], n_nodes=3)


class TestVecEnv:
    def test_auto_reset_and_returns(self):
        envs = [ToyPartialEnv(step_cap=3) for _ in range(2)]
        vec = VecEnv(envs, seed=10)
        for _ in range(3):
            _, _, dones = vec.step(np.array([[0, 0], [0, 0]]))
        assert dones.all()
        assert vec.finished_returns == [-3.0, -3.0]
        assert not any(e.done for e in envs)

    def test_bad_action_shape(self):
        env = ToyPartialEnv(seed=0)
        env.reset()
        with pytest.raises(ContractViolation):
            env.step([0, 2])
