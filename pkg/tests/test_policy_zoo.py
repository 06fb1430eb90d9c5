import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowiar.errors import CapacityError, SchemaError
from flowiar.policies import (
    AutoregressivePolicy,
    CategoricalPolicy,
    FactoredPolicy,
    TabularPolicy,
    action_to_index,
    all_actions,
    apply_mask,
    check_actions,
    empirical_distribution,
    index_to_action,
)
from flowiar.verify import factored_pair_mass_grid

from helpers import tv_distance


def _perturb(module, scale=1.0, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


HEADS = {
    "categorical": lambda: CategoricalPolicy(2, 2, 3, hidden=16),
    "factored": lambda: FactoredPolicy(2, 2, 3, hidden=16),
    "autoregressive": lambda: AutoregressivePolicy(2, 2, 3, hidden=16),
}


class TestIndexing:
    def test_roundtrip(self):
        acts = all_actions(3, 4)
        idx = action_to_index(acts, 4)
        np.testing.assert_array_equal(idx.numpy(), np.arange(64))
        assert torch.equal(index_to_action(idx, 3, 4), acts)

    def test_matches_numpy_ravel(self):
        acts = all_actions(2, 3).numpy()
        np.testing.assert_array_equal(np.ravel_multi_index(tuple(acts.T), (3, 3)), np.arange(9))

    def test_enumeration_guard(self):
        with pytest.raises(CapacityError):
            all_actions(7, 10)

    def test_check_actions(self):
        with pytest.raises(SchemaError):
            check_actions(torch.tensor([[0, 3]]), 2, 3)
        with pytest.raises(SchemaError):
            check_actions(torch.tensor([[0, 1, 1]]), 2, 3)


class TestCategorical:
    def _with_logits(self, logits):
        policy = CategoricalPolicy(1, 1, len(logits), hidden=4)
        with torch.no_grad():
            policy.head.weight.zero_()
            policy.head.bias.copy_(torch.as_tensor(logits, dtype=torch.float64))
        return policy.full_distribution(torch.zeros(1, 1, dtype=torch.float64))[0].detach().numpy()

    def test_zero_logits_uniform(self):
        np.testing.assert_allclose(self._with_logits([0.0] * 6), np.full(6, 1 / 6), rtol=1e-12)

    def test_shift_invariance(self):
        np.testing.assert_allclose(self._with_logits([1.0] * 6), self._with_logits([0.0] * 6), rtol=1e-12)

    def test_dominant_logit(self):
        assert self._with_logits([0.0, 20.0, 0.0, 0.0])[1] > 0.999

    def test_capacity_guard(self):
        with pytest.raises(CapacityError, match="enumeration limit"):
            CategoricalPolicy(1, 7, 10)

    def test_observation_schema(self):
        with pytest.raises(SchemaError):
            CategoricalPolicy(2, 1, 3).log_prob(torch.zeros(1, 3, dtype=torch.float64), torch.tensor([[0]]))


class TestFactored:
    def test_uniform_marginals(self):
        policy = FactoredPolicy(1, 2, 2, hidden=4)
        with torch.no_grad():
            policy.head.weight.zero_()
            policy.head.bias.zero_()
        probs = policy.full_distribution(torch.zeros(1, 1, dtype=torch.float64))
        np.testing.assert_allclose(probs.detach().numpy(), np.full((1, 4), 0.25), rtol=1e-12)

    def test_joint_is_product_of_marginals(self):
        policy = _perturb(FactoredPolicy(2, 3, 3, hidden=8), seed=1)
        obs = torch.randn(4, 2, dtype=torch.float64)
        marg = policy.marginals(obs).detach().numpy()
        joint = policy.full_distribution(obs).detach().numpy()
        for b in range(4):
            expected = np.einsum("i,j,k->ijk", *marg[b]).ravel()
            np.testing.assert_allclose(joint[b], expected, rtol=1e-10)

    def test_deterministic_marginals(self):
        policy = FactoredPolicy(1, 2, 3, hidden=4)
        with torch.no_grad():
            policy.head.weight.zero_()
            policy.head.bias.copy_(torch.tensor([50.0, 0, 0, 0, 0, 50.0], dtype=torch.float64))
        joint = policy.full_distribution(torch.zeros(1, 1, dtype=torch.float64))[0]
        assert joint[action_to_index(torch.tensor([0, 2]), 3)].item() > 1 - 1e-12

    def test_off_diagonal_mass_bound(self):
        best_total, best_each = factored_pair_mass_grid(401)
        assert best_total == pytest.approx(1.0)  # reached only at deterministic, unbalanced marginals
        assert best_each == pytest.approx(0.25)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_balanced_off_diagonal_mass(self, p, q):
        # a product of binary marginals can never put more than 0.25 on each of (0,1) and (1,0)
        a, b = p * (1 - q), (1 - p) * q
        assert min(a, b) <= 0.25 + 1e-12


class TestAutoregressive:
    def test_zero_conditioning_equals_factored(self):
        torch.manual_seed(0)
        ar = AutoregressivePolicy(2, 3, 4, hidden=8)
        fac = FactoredPolicy(2, 3, 4, hidden=8)
        fac.body.load_state_dict(ar.body.state_dict())
        fac.head.load_state_dict(ar.head.state_dict())
        ar.zero_conditioning()
        obs = torch.randn(5, 2, dtype=torch.float64)
        acts = torch.randint(0, 4, (5, 3))
        assert torch.equal(ar.dim_logits(obs, acts), fac.base_logits(obs))
        assert torch.equal(ar.full_distribution(obs), fac.full_distribution(obs))

    def test_full_distribution_normalised(self):
        ar = _perturb(AutoregressivePolicy(2, 3, 4, hidden=8), seed=2)
        probs = ar.full_distribution(torch.randn(3, 2, dtype=torch.float64))
        np.testing.assert_allclose(probs.sum(-1).detach().numpy(), 1.0, atol=1e-6)

    def test_conditioning_changes_later_dims(self):
        ar = _perturb(AutoregressivePolicy(1, 2, 3, hidden=8), seed=3)
        obs = torch.zeros(1, 1, dtype=torch.float64)
        c0 = ar.conditional(obs, 1, {0: 0})
        c2 = ar.conditional(obs, 1, {0: 2})
        assert not torch.allclose(c0, c2)

    def test_conditional_matches_joint(self):
        ar = _perturb(AutoregressivePolicy(1, 3, 3, hidden=8), seed=4)
        obs = torch.zeros(1, 1, dtype=torch.float64)
        joint = ar.full_distribution(obs).detach().view(3, 3, 3)
        cond = ar.conditional(obs, 1, {0: 2})[0].detach()
        expected = joint[2].sum(-1) / joint[2].sum()
        np.testing.assert_allclose(cond.numpy(), expected.numpy(), rtol=1e-10)

    def test_forced_prefix_sampling(self):
        ar = _perturb(AutoregressivePolicy(1, 3, 3, hidden=8), seed=5)
        obs = torch.zeros(1, 1, dtype=torch.float64)
        acts = ar.sample(obs, 20000, generator=torch.Generator().manual_seed(0), forced={0: 1})[0]
        assert (acts[:, 0] == 1).all()
        freq = np.bincount(acts[:, 1].numpy(), minlength=3) / 20000
        cond = ar.conditional(obs, 1, {0: 1})[0].detach().numpy()
        assert tv_distance(freq, cond) < 0.02

    def test_custom_order(self):
        ar = _perturb(AutoregressivePolicy(1, 3, 2, hidden=8, order=[2, 0, 1]), seed=6)
        obs = torch.zeros(1, 1, dtype=torch.float64)
        np.testing.assert_allclose(ar.full_distribution(obs).sum().item(), 1.0, atol=1e-10)
        # the first sampled dimension sees an empty prefix
        joint = ar.full_distribution(obs).detach().view(2, 2, 2)
        marg2 = joint.sum((0, 1))
        head2 = ar.conditional(obs, 2, {})[0].detach()
        np.testing.assert_allclose(marg2.numpy(), head2.numpy(), rtol=1e-10)

    def test_bad_order(self):
        with pytest.raises(ValueError):
            AutoregressivePolicy(1, 3, 2, order=[0, 0, 1])


class TestInterface:
    @pytest.mark.parametrize("kind", sorted(HEADS))
    def test_log_prob_normalised(self, kind):
        policy = _perturb(HEADS[kind](), seed=7)
        obs = torch.randn(2, 2, dtype=torch.float64)
        acts = all_actions(2, 3)
        for b in range(2):
            lp = policy.log_prob(obs[b : b + 1].repeat(9, 1), acts)
            assert abs(torch.exp(lp).sum().item() - 1.0) < 1e-6

    @pytest.mark.parametrize("kind", sorted(HEADS))
    def test_sampling_fidelity(self, kind):
        policy = _perturb(HEADS[kind](), seed=8)
        obs = torch.tensor([[0.4, -0.7]], dtype=torch.float64)
        acts = policy.sample(obs, 10**5, generator=torch.Generator().manual_seed(0))[0]
        emp = empirical_distribution(acts.numpy(), 3)
        exact = policy.full_distribution(obs)[0].detach().numpy()
        assert tv_distance(emp, exact) < 0.02

    def test_tabular(self):
        policy = TabularPolicy(2, 3, logits=[[0.0, 1.0, 2.0], [0.0, 0.0, 0.0]])
        obs = torch.eye(2, dtype=torch.float64)
        probs = policy.full_distribution(obs).detach().numpy()
        np.testing.assert_allclose(probs[1], 1 / 3)
        lp = policy.log_prob(obs, torch.tensor([[2], [0]]))
        np.testing.assert_allclose(torch.exp(lp).detach().numpy(), [probs[0, 2], probs[1, 0]])


class TestMask:
    def test_uniform_half_mask(self):
        out = apply_mask(torch.full((4,), 0.25), torch.tensor([1, 1, 0, 0]))
        np.testing.assert_allclose(out.numpy(), [0.5, 0.5, 0, 0])

    def test_all_true_is_identity(self):
        p = torch.tensor([0.1, 0.2, 0.7], dtype=torch.float64)
        np.testing.assert_allclose(apply_mask(p, torch.ones(3, dtype=torch.bool)).numpy(), p.numpy(), rtol=1e-15)

    def test_renormalisation(self):
        out = apply_mask(torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64), torch.tensor([True, True, False]))
        np.testing.assert_allclose(out.numpy(), [0.4, 0.6, 0.0], rtol=1e-12)

    def test_all_invalid_raises(self):
        with pytest.raises(ValueError):
            apply_mask(torch.full((3,), 1 / 3), torch.zeros(3, dtype=torch.bool))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.booleans(), min_size=2, max_size=12).filter(any), st.integers(0, 2**31))
    def test_support_within_mask(self, bits, seed):
        rng = np.random.default_rng(seed)
        p = torch.as_tensor(rng.dirichlet(np.ones(len(bits))))
        out = apply_mask(p, torch.tensor(bits)).numpy()
        assert (out[~np.array(bits)] == 0).all()
        assert abs(out.sum() - 1.0) < 1e-12
