import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aflpsubid.model import EndRegions, IndelParams
from aflpsubid.priors import (
    PriorConfig,
    ancestor_length_logpmf,
    end_region_logprior,
    exp_logpdf,
    joint_logprior,
    loci_count_logpmf,
    locus_logprior,
    rate_logprior,
    sample_ancestor_length,
    sample_end_regions,
    sample_rates,
    topology_logprior,
    tree_logprior,
)
from aflpsubid.tree import PhyloTree, n_rooted_topologies


class TestEndRegions:
    def test_values(self):
        assert end_region_logprior(EndRegions(9, 9)) == pytest.approx(math.log(1 / 33))
        assert end_region_logprior(EndRegions(7, 9)) == pytest.approx(math.log(16 / 33))
        total = sum(math.exp(end_region_logprior(EndRegions(*k))) for k in ((7, 9), (9, 7), (9, 9)))
        assert total == pytest.approx(1.0, abs=1e-15)

    def test_sampler(self, rng):
        n = 100_000
        draws = [sample_end_regions(rng) for _ in range(n)]
        f99 = sum(d == EndRegions(9, 9) for d in draws) / n
        assert abs(f99 - 1 / 33) < 3 * math.sqrt(1 / 33 * 32 / 33 / n)


class TestAncestorLength:
    @pytest.mark.parametrize("kind", ["geometric", "uniform"])
    @pytest.mark.parametrize("w", [0.95, 0.5])
    def test_total_mass(self, kind, w):
        cfg = PriorConfig(ancestor_length=kind, w=w)
        head = sum(math.exp(ancestor_length_logpmf(n, cfg)) for n in range(1, cfg.n_max + 1))
        # right tail beyond n_max is geometric with parameter rho: closed form
        tail = (1 - w) / 2
        assert head + tail == pytest.approx(1.0, abs=1e-12)
        far = sum(math.exp(ancestor_length_logpmf(n, cfg)) for n in range(cfg.n_max + 1, cfg.n_max + 200_001))
        assert far == pytest.approx(tail * (1 - (1 - cfg.rho) ** 200_000), rel=1e-9)

    @pytest.mark.parametrize("kind", ["geometric", "uniform"])
    def test_window_mass_is_w(self, kind):
        cfg = PriorConfig(ancestor_length=kind)
        mid = sum(math.exp(ancestor_length_logpmf(n, cfg)) for n in range(cfg.n_min, cfg.n_max + 1))
        assert mid == pytest.approx(cfg.w, abs=1e-12)

    def test_uniform_piece(self):
        cfg = PriorConfig(ancestor_length="uniform")
        assert ancestor_length_logpmf(200, cfg) == pytest.approx(math.log(0.95 / 576))

    @pytest.mark.parametrize("kind", ["geometric", "uniform"])
    def test_sampler_matches_pmf(self, kind, rng):
        cfg = PriorConfig(ancestor_length=kind)
        n = 200_000
        x = np.array([sample_ancestor_length(rng, cfg) for _ in range(n)])
        for lo, hi in ((1, 10), (11, 100), (101, 586), (587, 2000)):
            p = sum(math.exp(ancestor_length_logpmf(k, cfg)) for k in range(lo, hi + 1))
            f = ((x >= lo) & (x <= hi)).mean()
            assert abs(f - p) < 3 * math.sqrt(p * (1 - p) / n) + 1e-12, (lo, hi)


class TestLociCount:
    def test_uniform(self):
        cfg = PriorConfig(loci_model="general", k_max=15)
        assert loci_count_logpmf(7, cfg) == pytest.approx(math.log(1 / 15))
        assert loci_count_logpmf(16, cfg) == -math.inf
        assert loci_count_logpmf(0, cfg) == -math.inf

    def test_general_default_kmax(self):
        cfg = PriorConfig(loci_model="general")
        assert loci_count_logpmf(3, cfg, n_markers=10) == pytest.approx(-math.log(100))

    def test_negative_binomial(self):
        cfg = PriorConfig(nb_mean=10, nb_var=1000)
        k = np.arange(0, 10001)
        pmf = np.exp([loci_count_logpmf(int(i), cfg) for i in k])
        assert pmf.sum() == pytest.approx(1.0, abs=1e-10)
        assert (k * pmf).sum() == pytest.approx(10.0, abs=1e-6)
        assert loci_count_logpmf(-1, cfg) == -math.inf

    def test_default_mean_is_marker_count(self):
        cfg = PriorConfig()
        a = loci_count_logpmf(4, cfg, n_markers=12)
        b = loci_count_logpmf(4, PriorConfig(nb_mean=12))
        assert a == pytest.approx(b)


class TestTreePrior:
    def test_topology(self):
        assert topology_logprior(3) == pytest.approx(-math.log(3))
        assert topology_logprior(6) == pytest.approx(-math.log(9 * 7 * 5 * 3 * 1))
        assert n_rooted_topologies(6) == 945

    def test_exponential_at_mean(self):
        assert exp_logpdf(0.1, 0.1) == pytest.approx(math.log(1 / 0.1) - 1)

    def test_tree_logprior(self, rng):
        tree = PhyloTree.random(list("ABCDE"), rng, 0.1)
        want = -math.log(105) + sum(math.log(10) - 10 * tree.lengths[v] for v in tree.edges())
        assert tree_logprior(tree, PriorConfig()) == pytest.approx(want, rel=1e-12)


class TestRates:
    def test_prior_means(self, rng):
        cfg = PriorConfig()
        n = 200_000
        draws = [sample_rates(rng, cfg) for _ in range(n)]
        mu = np.array([d.mu for d in draws])
        beta = np.array([d.beta for d in draws])
        lam = np.array([d.lam for d in draws])
        r = np.array([d.r for d in draws])
        assert abs(mu.mean() - 0.04) < 3 * mu.std() / math.sqrt(n)
        assert abs(beta.mean() - 0.75) < 3 * beta.std() / math.sqrt(n)
        assert abs(r.mean() - 0.5) < 3 * r.std() / math.sqrt(n)
        # mu * beta with mu ~ Gamma(4, 100) and beta ~ Beta(3, 1) is Gamma(3, 100)
        assert abs(lam.mean() - 0.03) < 3 * lam.std() / math.sqrt(n)
        assert abs(lam.var() - 3 / 100 ** 2) < 0.02 * 3 / 100 ** 2
        from scipy import stats
        assert stats.kstest(lam[:20000], stats.gamma(3, scale=0.01).cdf).pvalue > 0.01

    def test_density(self):
        from scipy import stats
        p = IndelParams.from_mu_beta(0.05, 0.6, 0.3)
        want = stats.gamma(4, scale=0.01).logpdf(0.05) + stats.beta(3, 1).logpdf(0.6)
        assert rate_logprior(p) == pytest.approx(want, rel=1e-12)
        assert rate_logprior(IndelParams.from_mu_beta(0.05, 1.2, 0.3)) == -math.inf


class _State:
    def __init__(self, tree, loci, params, n_markers):
        self.tree, self.loci, self.params, self.n_markers = tree, loci, params, n_markers


class TestJoint:
    def _state(self, rng, k):
        from aflpsubid.simulate import simulate_locus
        tree = PhyloTree.random(list("ABCD"), rng, 0.1)
        params = IndelParams.from_mu_beta(0.04, 0.7, 0.5)
        loci = [simulate_locus(tree, PriorConfig(), params, rng) for _ in range(k)]
        return _State(tree, loci, params, {0: 5})

    def test_remove_one_locus(self, rng):
        cfg = PriorConfig(nb_mean=5)
        s = self._state(rng, 4)
        full = joint_logprior(s, cfg)
        gone = s.loci.pop()
        less = joint_logprior(s, cfg)
        delta = locus_logprior(gone, cfg) + loci_count_logpmf(4, cfg) - loci_count_logpmf(3, cfg)
        assert full - less == pytest.approx(delta, abs=1e-12)

    def test_recompute(self, rng):
        cfg = PriorConfig(nb_mean=5)
        s = self._state(rng, 3)
        want = (tree_logprior(s.tree, cfg) + rate_logprior(s.params, cfg)
                + sum(locus_logprior(l, cfg) for l in s.loci) + loci_count_logpmf(3, cfg))
        assert joint_logprior(s, cfg) == pytest.approx(want, abs=1e-9)

    def test_out_of_range_k(self, rng):
        cfg = PriorConfig(loci_model="general", k_max=2)
        s = self._state(rng, 3)
        assert joint_logprior(s, cfg) == -math.inf

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PriorConfig(w=1.0)
        with pytest.raises(KeyError):
            PriorConfig().updated(bogus=1)
