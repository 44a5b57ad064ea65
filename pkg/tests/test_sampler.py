import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from aflpsubid.likelihood import AugmentedLocus
from aflpsubid.model import EMPTY_HISTORY, IndelParams
from aflpsubid.priors import PriorConfig, loci_count_logpmf, sample_end_regions
from aflpsubid.sampler import (
    Mc3Config,
    ProposalResult,
    Sampler,
    gelman_rubin,
    mh_accept,
    run_mc3,
    swap_log_ratio,
)
from aflpsubid.tree import PhyloTree

from conftest import TAXA3, TAXA6, six_taxon_matrix, three_taxon_matrix
from oracles import se_binomial

PRIOR6 = PriorConfig(nb_mean=10)
START = IndelParams.from_mu_beta(0.04, 0.75, 0.5)


def six_taxon_state(seed=3, **cfg):
    rng = np.random.default_rng(seed)
    s = Sampler(six_taxon_matrix(), Mc3Config(n_chains=1, **cfg), PRIOR6)
    return s, s.initial_state(PhyloTree.random(TAXA6, rng, 0.1), START, rng), rng


def batch_mean(x, n_batches=20):
    """Mean and batch-means standard error of an autocorrelated trace."""
    x = np.asarray(x, dtype=float)
    means = np.array([b.mean() for b in np.array_split(x, n_batches)])
    return float(x.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


class TestAcceptance:
    def test_frequency(self, rng):
        n = 100_000
        hits = sum(mh_accept(-1.0, 0.0, 0.0, 1.0, rng) for _ in range(n))
        p = math.exp(-1.0)
        assert abs(hits / n - p) < 3 * se_binomial(p, n)

    def test_heat_scales_only_tempered_terms(self, rng):
        # heat 0.5 on -1 plus untempered -0.5 gives log ratio -1
        n = 100_000
        hits = sum(mh_accept(-1.0, -1.0, 0.5, 0.5, rng, -1.0) for _ in range(n))
        p = math.exp(-1.0 - 0.5)
        assert abs(hits / n - p) < 3 * se_binomial(p, n)

    def test_degenerate_ratios(self, rng):
        assert not mh_accept(math.nan, 0.0, 0.0, 1.0, rng)
        assert not mh_accept(-math.inf, 0.0, 0.0, 1.0, rng)
        assert not mh_accept(0.0, math.inf, 0.0, 1.0, rng)
        assert mh_accept(0.0, 0.0, 0.0, 1.0, rng)

    def test_log_alpha(self):
        res = ProposalResult(1.0, 0.5, -2.0, 0.3, log_locus_prior_ratio=0.2)
        assert res.log_alpha(0.5) == pytest.approx(-1.0 + 0.3 + 0.2 + 0.5 - 1.0)
        assert ProposalResult(0.0, math.nan).log_alpha(1.0) == -math.inf


class TestSwap:
    @given(st.floats(0.1, 1.0), st.floats(0.1, 1.0), st.floats(-50, 50), st.floats(-50, 50),
           st.floats(-50, 50), st.floats(-50, 50))
    def test_matches_target_ratio(self, hi, hj, ti, tj, ui, uj):
        # target at heat h: h * tempered part + untempered part
        def log_target(h, t, u):
            return h * t + u

        want = (log_target(hi, tj, uj) + log_target(hj, ti, ui)
                - log_target(hi, ti, ui) - log_target(hj, tj, uj))
        assert swap_log_ratio(hi, hj, ti, tj) == pytest.approx(want, abs=1e-9)

    def test_equal_heats_always_accepted(self):
        assert swap_log_ratio(0.7, 0.7, -3.0, -100.0) == 0.0


class TestGelmanRubin:
    def oracle(self, x):
        x = np.asarray(x, dtype=float)
        m, n = x.shape
        grand = x.mean()
        means = x.mean(axis=1)
        B = n / (m - 1) * sum((mu - grand) ** 2 for mu in means)
        W = sum(((row - row.mean()) ** 2).sum() / (n - 1) for row in x) / m
        return math.sqrt(((n - 1) / n * W + B / n) / W)

    def test_identical_chains(self, rng):
        x = rng.standard_normal(200)
        assert gelman_rubin([x, x]) == pytest.approx(math.sqrt(199 / 200))
        assert gelman_rubin([np.ones(50), np.ones(50)]) == 1.0

    def test_same_distribution(self, rng):
        assert 0.99 <= gelman_rubin(rng.standard_normal((4, 1000))) <= 1.02

    def test_separated_chains(self, rng):
        x = np.vstack([rng.standard_normal(500), 10 + rng.standard_normal(500)])
        assert gelman_rubin(x) > 1.1

    def test_oracle(self, rng):
        x = rng.gamma(2.0, size=(3, 40)) + np.arange(3)[:, None] * 0.3
        assert gelman_rubin(x) == pytest.approx(self.oracle(x), rel=1e-12)

    def test_too_short(self):
        with pytest.raises(ValueError):
            gelman_rubin([np.ones(5), np.ones(5)])


class TestChain:
    def test_cache_matches_recompute(self):
        s, state, rng = six_taxon_state()
        for _ in range(15):
            s.sweep(state, rng)
            s.verify_cache(state)
        assert state.Y().values.shape[1] == 6

    def test_heated_chain_stays_consistent(self):
        s, state, rng = six_taxon_state(seed=11)
        for _ in range(30):
            s.sweep(state, rng, heat=0.4)
            s.verify_cache(state)
        assert math.isfinite(state.log_posterior)
        # the untempered augmented terms keep the number of indel events bounded
        events = sum(len(h) for loc in state.loci for h in loc.hist)
        assert events < 20 * len(state.loci)

    def test_zero_iterations(self):
        res = run_mc3(six_taxon_matrix(), Mc3Config(n_chains=2, iterations=0, thin=1), PRIOR6)
        assert len(res.trace) == len(res.trees) == len(res.homology) == 1
        assert res.trace[0]["iteration"] == 0 and res.trace[0]["K_0"] == 10

    def test_resume_reproduces_run(self, tmp_path):
        X = six_taxon_matrix()
        cfg = dict(n_chains=2, thin=1, seed=4, check_interval=3)
        full = run_mc3(X, Mc3Config(iterations=6, **cfg), PRIOR6)
        ck = tmp_path / "run.ckpt"
        run_mc3(X, Mc3Config(iterations=3, **cfg), PRIOR6, checkpoint=ck)
        resumed = run_mc3(X, Mc3Config(iterations=6, **cfg), PRIOR6, resume=ck)
        assert resumed.trace == full.trace
        assert resumed.swap_stats == full.swap_stats


class TestMergeSplit:
    S4 = {0: 22, 1: 22, 2: 37, 3: 37}

    @staticmethod
    def partitions(S):
        keys = sorted(S)
        first, rest = keys[0], keys[1:]
        for r in range(len(rest)):
            for extra in itertools.combinations(rest, r):
                yield {i: S[i] for i in (first,) + extra}

    @pytest.mark.parametrize("S", [S4, {0: 22, 1: 22, 2: 22}, {1: 30, 4: 31, 5: 33}])
    def test_split_density_normalised(self, S):
        total = sum(math.exp(Sampler._split_logq(S, part)) for part in self.partitions(S))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_split_draw_matches_density(self, rng):
        n = 40_000
        counts = Counter()
        first = min(self.S4)
        for _ in range(n):
            part = Sampler._split_draw(self.S4, rng)
            if first not in part:
                part = {i: v for i, v in self.S4.items() if i not in part}
            counts[tuple(sorted(part))] += 1
        for part in self.partitions(self.S4):
            p = math.exp(Sampler._split_logq(self.S4, part))
            assert abs(counts[tuple(sorted(part))] / n - p) < 3 * se_binomial(p, n), part

    def test_pair_draw_matches_density(self, rng):
        s = Sampler(six_taxon_matrix(), Mc3Config(n_chains=1), PRIOR6)
        sets = [{0: 22}, {1: 25}, {0: 30, 2: 30}, {3: 40}]
        probs = {}
        for a, b in itertools.combinations(range(4), 2):
            probs[(a, b)] = math.exp(s._merge_pair_logq(sets, a, b))
        assert probs[(0, 2)] == 0.0
        assert sum(probs.values()) == pytest.approx(1.0)
        n = 40_000
        counts = Counter(s._merge_pair_draw(sets, rng) for _ in range(n))
        for pair, p in probs.items():
            assert abs(counts[pair] / n - p) < 3 * se_binomial(p, n) + 1e-12, pair

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([{0: 22, 1: 22}, {2: 72, 3: 72, 4: 98}, {5: 98}]))
    @settings(max_examples=40, deadline=None)
    def test_build_density_round_trip(self, seed, S):
        rng = np.random.default_rng(seed)
        s = Sampler(six_taxon_matrix(), Mc3Config(n_chains=1), PRIOR6)
        tree = PhyloTree.random(TAXA6, rng, 0.1)
        size = tree.n_nodes
        loc = AugmentedLocus(sample_end_regions(rng), 1, float(rng.exponential(0.1)), [EMPTY_HISTORY] * size,
                             [True] * size, [-1] * size, [0] * size, [0] * size, 0)
        lq = s._build_logq(loc, tree, START, S, rng)
        if lq is None:
            return
        assert lq == pytest.approx(s._build_logq(loc, tree, START, S), abs=1e-9)
        assert math.isfinite(lq)

    def test_moves_keep_bands(self):
        s, state, rng = six_taxon_state(seed=5, moves=frozenset({"merge_split", "substitution"}))
        for _ in range(40):
            for p in s.n_markers:
                s.move_merge(state, p, rng, 1.0)
                s.verify_cache(state)
                s.move_split(state, p, rng, 1.0)
                s.verify_cache(state)
        assert s.stats["merge"][1] > 0

    def test_merge_terms_finite_with_count_prior(self):
        s, state, rng = six_taxon_state(seed=2)
        for _ in range(3):
            s.sweep(state, rng)
        tree, params = state.tree, state.params
        lo, hi = s.prior.n_min, s.prior.n_max
        vis = [(k, state.loci[k].visible_leaves(tree, lo, hi)) for k in range(len(state.loci))]
        vis = [(k, v) for k, v in vis if v]
        a, b = next((x, y) for x, y in itertools.combinations(vis, 2) if not set(x[1]) & set(y[1]))
        S = dict(a[1])
        S.update(b[1])
        C = None
        while C is None:
            C = s._new_locus(0, tree, params, S, rng)
        others = [v for k, v in vis if k not in (a[0], b[0])]
        K = len(state.loci)
        dk, rest = s.merge_log_terms(tree, params, 0, K, others, state.loci[a[0]], state.loci[b[0]], C)
        assert dk == pytest.approx(loci_count_logpmf(K - 1, s.prior) - loci_count_logpmf(K, s.prior))
        assert math.isfinite(rest)


@pytest.mark.slow
def test_prior_recovery_without_data():
    """With the data dropped the chain samples the joint prior."""
    prior = PriorConfig(nb_mean=3, nb_var=6)
    cfg = Mc3Config(n_chains=1, iterations=4000, thin=5, seed=5, ignore_data=True, check_interval=500)
    res = run_mc3(three_taxon_matrix(), cfg, prior)
    rows = res.trace[len(res.trace) // 10:]
    trees = res.trees[len(res.trees) // 10:]
    # two-sided 0.1% quantile of t with 19 degrees of freedom (20 batches)
    crit = stats.t.ppf(0.9995, 19)
    k_mean = sum(k * math.exp(loci_count_logpmf(k, prior)) for k in range(400))
    checks = {
        "mu": ([r["mu"] for r in rows], prior.mu_shape / prior.mu_rate),
        "beta": ([r["lambda"] / r["mu"] for r in rows], prior.beta_a / (prior.beta_a + prior.beta_b)),
        "r": ([r["r"] for r in rows], 0.5),
        "leaf edge": ([t.lengths[0] for t in trees], prior.gamma),
        "K": ([r["K_0"] for r in rows], k_mean),
    }
    for name, (x, want) in checks.items():
        m, se = batch_mean(x)
        assert abs(m - want) < crit * se, (name, m, want, se)
    assert {t.topology_key() for t in trees} == {
        PhyloTree.from_newick(nwk, TAXA3).topology_key()
        for nwk in ("((1,2),3);", "((1,3),2);", "((2,3),1);")}
