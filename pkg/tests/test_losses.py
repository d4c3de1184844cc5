import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sketret import losses as L
from sketret.model import GaussianLatent

from oracles import monte_carlo_kl

finite = st.floats(-3, 3, allow_nan=False)
log_vars = st.floats(-2, 2, allow_nan=False)


def g(mean, var):
    mean = torch.tensor(np.atleast_1d(mean), dtype=torch.float64)
    return GaussianLatent.from_params(mean, torch.log(torch.tensor(np.atleast_1d(var), dtype=torch.float64)))


def gaussians(dim):
    return st.tuples(st.lists(finite, min_size=dim, max_size=dim),
                     st.lists(log_vars, min_size=dim, max_size=dim)).map(
        lambda mv: GaussianLatent.from_params(torch.tensor(mv[0], dtype=torch.float64),
                                              torch.tensor(mv[1], dtype=torch.float64)))


class TestGaussianKL:
    def test_identical(self):
        assert L.gaussian_kl(g(0, 1), g(0, 1)).item() == 0.0

    def test_mean_shift(self):
        assert L.gaussian_kl(g(1, 1), g(0, 1)).item() == pytest.approx(0.5, abs=1e-15)
        assert abs(monte_carlo_kl([1], [1], [0], [1]) - 0.5) < 1e-2

    def test_variance_ratio(self):
        expected = 2 - 0.5 - math.log(2)
        assert L.gaussian_kl(g(0, 4), g(0, 1)).item() == pytest.approx(expected, abs=1e-12)
        assert abs(monte_carlo_kl([0], [4], [0], [1]) - expected) < 1e-2

    def test_batched_shapes(self):
        p = GaussianLatent.from_params(torch.zeros(5, 3), torch.zeros(5, 3))
        assert L.gaussian_kl(p, p).shape == (5,)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            L.gaussian_kl(g([0, 0], [1, 1]), g(0, 1))

    @settings(max_examples=60, deadline=None)
    @given(gaussians(3), gaussians(3))
    def test_non_negative(self, p, q):
        assert L.gaussian_kl(p, q).item() >= -1e-12


class TestSymmetricKL:
    def test_self(self):
        p = g([0.3, -1], [2, 0.5])
        assert L.symmetric_kl(p, p).item() == 0.0

    def test_mean_shift(self):
        assert L.symmetric_kl(g(0, 1), g(1, 1)).item() == pytest.approx(0.5, abs=1e-15)

    def test_variance_ratio(self):
        # 0.5 * (0.80685 + 0.31815)
        expected = 0.5 * ((1.5 - math.log(2)) + (0.5 * math.log(4) + 1 / 8 - 0.5))
        assert expected == pytest.approx(0.5625, abs=1e-4)
        assert L.symmetric_kl(g(0, 4), g(0, 1)).item() == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(gaussians(4), gaussians(4))
    def test_exactly_symmetric(self, p, q):
        assert L.symmetric_kl(p, q).item() == L.symmetric_kl(q, p).item()


class TestTripletLosses:
    def _skl_pair(self, d_pos, d_neg):
        # 1-d unit-variance Gaussians: SKL = (mean gap)^2 / 2
        a = g(0, 1)
        return a, g(math.sqrt(2 * d_pos), 1), g(math.sqrt(2 * d_neg), 1)

    def test_equal_divergences_give_beta_lambda(self):
        cfg = L.LossConfig(beta=0.3, lam=0.1)
        a, p, n = self._skl_pair(0.7, 0.7)
        assert L.tskl_triplet(a, p, n, cfg).item() == pytest.approx(0.03, abs=1e-14)

    def test_satisfied_margin_is_zero(self):
        a, p, n = self._skl_pair(0.5, 0.9)
        assert L.tskl_triplet(a, p, n, L.LossConfig(beta=1, lam=0.1)).item() == 0.0

    def test_violated_margin_scaled_by_beta(self):
        a, p, n = self._skl_pair(0.9, 0.5)
        value = L.tskl_triplet(a, p, n, L.LossConfig(beta=1e-4, lam=0.1)).item()
        assert value == pytest.approx(5e-5, abs=1e-15)

    def test_instance_equal_distance(self):
        z = torch.tensor([1.0, 2.0], dtype=torch.float64)
        assert L.instance_triplet(torch.zeros(2), z, z, 0.1).item() == pytest.approx(0.1)

    def test_instance_satisfied(self):
        a = torch.zeros(1, dtype=torch.float64)
        assert L.instance_triplet(a, a + 0.2, a + 0.5, 0.1).item() == 0.0


class TestClassification:
    @pytest.mark.parametrize("k", [2, 5, 11])
    def test_uniform_logits(self, k):
        assert L.classification_ce(torch.zeros(k), 1).item() == pytest.approx(math.log(k), abs=1e-12)

    def test_confident_correct(self):
        logits = torch.tensor([10.0, 0.0, 0.0])
        assert L.classification_ce(logits, 0).item() < 1e-3

    @settings(max_examples=50, deadline=None)
    @given(st.lists(finite, min_size=4, max_size=4), st.floats(-50, 50), st.integers(0, 3))
    def test_shift_invariance(self, logits, shift, label):
        x = torch.tensor(logits, dtype=torch.float64)
        assert abs(L.classification_ce(x + shift, label).item() - L.classification_ce(x, label).item()) < 1e-9

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            L.classification_ce(torch.zeros(3), 3)


class TestAdversarial:
    def test_pseudo_boundary_value(self):
        assert L.local_adversarial(0.5, 0.5).item() == pytest.approx(-math.log(2), abs=1e-12)

    def test_perfect_discrimination_limit(self):
        value = L.local_adversarial(0.0, 1.0).item()
        assert -1e-5 < value <= 0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_reflection_symmetry(self, ls, li):
        a = L.local_adversarial(ls, li).item()
        b = L.local_adversarial(1 - li, 1 - ls).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_global_form(self):
        value = L.global_adversarial(0.5, 0.5, 0.5).item()
        assert value == pytest.approx(-math.log(2), abs=1e-12)


class TestReconstruction:
    def test_unit_gaussian_kl(self):
        assert L.unit_gaussian_kl(g(0, 1)).item() == 0.0
        assert L.unit_gaussian_kl(g(1, 1)).item() == pytest.approx(0.5)
        assert L.unit_gaussian_kl(g(0, 4)).item() == pytest.approx(0.5 * (3 - math.log(4)), abs=1e-12)

    def test_perfect_reconstruction(self):
        z = torch.randn(3, 4, dtype=torch.float64)
        std = GaussianLatent.from_params(torch.zeros(3, 2), torch.zeros(3, 2))
        assert torch.all(L.crossmodal_recon(z, z, std, z, z, std) == 0)

    def test_unit_error_each_direction(self):
        ones, zeros = torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)
        std = GaussianLatent.from_params(torch.zeros(2), torch.zeros(2))
        assert L.crossmodal_recon(ones, zeros, std, ones, zeros, std).item() == pytest.approx(8.0)
        assert L.crossmodal_recon(ones, zeros, std, zeros, zeros, std).item() == pytest.approx(4.0)

    def test_direction_swap_symmetry(self):
        gen = torch.Generator().manual_seed(0)
        r1, t1, r2, t2 = (torch.randn(5, generator=gen, dtype=torch.float64) for _ in range(4))
        e1 = GaussianLatent.from_params(torch.randn(3, generator=gen, dtype=torch.float64), torch.zeros(3))
        e2 = GaussianLatent.from_params(torch.zeros(3), torch.randn(3, generator=gen, dtype=torch.float64))
        a = L.crossmodal_recon(r1, t1, e1, r2, t2, e2).item()
        b = L.crossmodal_recon(r2, t2, e2, r1, t1, e1).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_shape_mismatch(self):
        std = GaussianLatent.from_params(torch.zeros(2), torch.zeros(2))
        with pytest.raises(ValueError):
            L.crossmodal_recon(torch.zeros(3), torch.zeros(4), std, torch.zeros(3), torch.zeros(3), std)


class TestSemantic:
    def test_margin_values(self):
        x = torch.tensor([1.0, 2.0], dtype=torch.float64)
        assert L.cosine_margin(x, x, 1.0).item() == pytest.approx(0.0, abs=1e-15)
        assert L.cosine_margin(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0]), 1.0).item() == 0.5
        assert L.cosine_margin(x, -x, 0.0).item() == pytest.approx(0.5, abs=1e-15)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            L.cosine_margin(torch.zeros(2), torch.ones(2), 1.0)

    def test_all_aligned(self):
        w = torch.tensor([0.3, -1.0, 2.0], dtype=torch.float64)
        assert L.semantic_loss(w, w, w, w).item() == pytest.approx(-0.5, abs=1e-15)

    def test_negative_orthogonal(self):
        w = torch.tensor([1.0, 0.0], dtype=torch.float64)
        n = torch.tensor([0.0, 2.0], dtype=torch.float64)
        assert L.semantic_loss(2 * w, 3 * w, n, w).item() == pytest.approx(0.0, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(finite, min_size=12, max_size=12), st.floats(0.1, 10), st.integers(0, 3))
    def test_scale_invariance(self, values, c, which):
        vecs = [torch.tensor(values[i * 3:(i + 1) * 3], dtype=torch.float64) + 0.01 for i in range(4)]
        base = L.semantic_loss(*vecs).item()
        vecs[which] = vecs[which] * c
        assert L.semantic_loss(*vecs).item() == pytest.approx(base, abs=1e-9)


class TestTotal:
    def _components(self, seed=0):
        rng = np.random.default_rng(seed)
        return {t: torch.tensor(rng.normal(), dtype=torch.float64) for t in L.TERMS}

    def test_zero(self):
        total, _ = L.total_loss({t: torch.zeros(()) for t in L.TERMS}, L.TERMS)
        assert total.item() == 0.0

    def test_breakdown_sums_to_total(self):
        total, parts = L.total_loss(self._components(), L.TERMS)
        assert list(parts) == list(L.TERMS)
        assert abs(sum(v.item() for v in parts.values()) - total.item()) < 1e-9

    @pytest.mark.parametrize("term", L.TERMS)
    def test_disabling_removes_exactly_one_term(self, term):
        comps = self._components(1)
        full, _ = L.total_loss(comps, L.TERMS)
        part, breakdown = L.total_loss(comps, set(L.TERMS) - {term})
        assert term not in breakdown
        assert full.item() - part.item() == pytest.approx(comps[term].item(), abs=1e-12)

    def test_unknown_term(self):
        with pytest.raises(ValueError):
            L.total_loss({}, {"bogus"})

    def test_default_excludes_global(self):
        assert "global_adv" not in L.DEFAULT_TERMS
        assert L.BASELINE_TERMS == {"triplet", "semantic"}
