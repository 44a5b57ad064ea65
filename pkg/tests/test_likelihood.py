import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from aflpsubid.kernels import cutter_matrix, mismatch_logmatrix, mismatch_probability
from aflpsubid.likelihood import (
    AugmentedLocus,
    derive_observed,
    edge_loglik,
    empty_locus,
    history_loglik,
    is_consistent,
    locus_loglik,
    node_edge_loglik,
    replay_lengths,
    substitution_loglik,
    tree_loglik,
)
from aflpsubid.model import (
    EndRegions,
    EventKind,
    IndelEvent,
    IndelHistory,
    IndelParams,
    LocusAssignment,
    MarkerMatrix,
    classify_event,
    total_indel_rate,
)
from aflpsubid.simulate import simulate_edge_history
from aflpsubid.tree import PhyloTree

from conftest import THREE_TAXON_Y_A, THREE_TAXON_Y_B, SIX_TAXON_TRUTH, TAXA3, TAXA6, assignment, three_taxon_matrix, six_taxon_matrix
from oracles import length_chain_transition, se_binomial

END79 = EndRegions(7, 9)
P0 = IndelParams(0.025, 0.031, 0.1)


class TestHistoryLoglik:
    def test_empty(self):
        for n in (1, 20, 300):
            assert history_loglik(IndelHistory(), n, END79, 0.7, P0) == pytest.approx(
                -total_indel_rate(END79, n, P0) * 0.7, rel=1e-14)

    def test_single_kill(self):
        h = IndelHistory((IndelEvent(0.2, EventKind.DEL_IN_END, 3, 1),))
        want = -3.95 * 0.2 + math.log(0.031) + math.log(0.1)
        assert history_loglik(h, 50, END79, 1.0, P0) == pytest.approx(want, abs=1e-12)

    def test_single_kill_category_oracle(self):
        # rate density of this particular event: deletion rate per link times length pmf
        h = IndelHistory((IndelEvent(0.2, EventKind.DEL_IN_END, 3, 1),))
        cats = 51 * 0.025 + 14 * 0.025 + 50 * 0.031 + 16 * 0.031 + 0.031 * 0.9 / 0.1
        assert history_loglik(h, 50, END79, 1.0, P0) == pytest.approx(-cats * 0.2 + math.log(0.031 * 0.1), abs=1e-12)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.95))
    @settings(max_examples=100)
    def test_time_split_additivity(self, seed, frac):
        rng = np.random.default_rng(seed)
        T = 2.0
        params = IndelParams(0.3, 0.4, 0.5)
        h = simulate_edge_history(30, END79, T, params, rng)
        s = frac * T
        if any(abs(e.time - s) < 1e-9 for e in h.events):
            return
        before = IndelHistory(tuple(e for e in h.events if e.time < s))
        after = IndelHistory(tuple(e._replace(time=e.time - s) for e in h.events if e.time > s))
        if before.kill:
            return
        n_s = before.final_length(30)
        whole = history_loglik(h, 30, END79, T, params)
        split = history_loglik(before, 30, END79, s, params) + history_loglik(after, n_s, END79, T - s, params)
        assert whole == pytest.approx(split, rel=1e-10, abs=1e-10)


class TestEdgeLoglik:
    def test_empty_closed_form(self):
        T, n = 0.4, 60
        p = mismatch_probability(T)
        want = -total_indel_rate(END79, n, P0) * T + 16 * math.log(1 - p) + math.log(cutter_matrix(T, n).entries[0, 0])
        assert edge_loglik(IndelHistory(), (0, 0), (0, 0), T, END79, n, P0) == pytest.approx(want, rel=1e-12)

    def test_kill_ignores_child(self):
        h = IndelHistory((IndelEvent(0.1, EventKind.DEL_FROM_BEFORE, -2, 5),))
        a = edge_loglik(h, (1, 0), (0, 0), 0.5, END79, 40, P0)
        b = edge_loglik(h, (1, 0), (7, 1), 0.5, END79, 40, P0)
        c = edge_loglik(h, (1, 0), None, 0.5, END79, 40, P0)
        assert a == b == c

    @given(st.integers(0, 2 ** 32 - 1), st.integers(0, 16), st.integers(0, 1))
    @settings(max_examples=50)
    def test_substitution_states_sum_to_one(self, seed, m_p, z_p):
        rng = np.random.default_rng(seed)
        params = IndelParams(0.2, 0.2, 0.5)
        h = simulate_edge_history(25, END79, 0.8, params, rng)
        if h.kill:
            return
        tot = sum(math.exp(substitution_loglik(h, (m_p, z_p), (m, z), 0.8, END79, 25))
                  for m in range(17) for z in (0, 1))
        assert tot == pytest.approx(1.0, abs=1e-12)

    def test_total_probability_one_event_grid(self):
        """Zero- and one-event histories on a small edge carry all but O(T^2)
        of the probability; adding the two-event tail estimated by simulation
        gives total mass one."""
        end, n0, T = EndRegions(9, 9), 3, 0.05
        params = IndelParams(0.4, 0.5, 0.6)
        mass = math.exp(history_loglik(IndelHistory(), n0, end, T, params))
        # one non-killing or killing event of every kind/position/length
        R = end.total
        lim = 40
        for sign in (1, -1):
            positions = range(-lim, R + n0 + 1)
            for s in positions:
                for l in range(1, lim):
                    kind = classify_event(sign, s, l, end, n0)
                    if kind is None:
                        continue
                    f = lambda t: math.exp(history_loglik(
                        IndelHistory((IndelEvent(t, kind, s, l),)), n0, end, T, params))
                    mass += integrate.quad(f, 0, T, epsabs=1e-14)[0]
        rng = np.random.default_rng(5)
        n = 200000
        multi = sum(1 for _ in range(n) if len(simulate_edge_history(n0, end, T, params, rng)) >= 2) / n
        assert mass + multi == pytest.approx(1.0, abs=3 * se_binomial(max(multi, 1 / n), n) + 1e-9)


def _two_taxon_tree():
    return PhyloTree(["a", "b"], [2, 2, -1], [0.3, 0.5, 0.0])


class TestLocus:
    def test_two_taxon_empty(self):
        tree = _two_taxon_tree()
        loc = empty_locus(tree, END79, 40, 0.2)
        want = sum(edge_loglik(IndelHistory(), (0, 0), (0, 0), T, END79, 40, P0) for T in (0.3, 0.5, 0.2))
        assert locus_loglik(loc, tree, P0) == pytest.approx(want, rel=1e-13)

    def test_root_edge_killed(self):
        tree = _two_taxon_tree()
        loc = empty_locus(tree, END79, 40, 0.2)
        h = IndelHistory((IndelEvent(0.05, EventKind.DEL_IN_END, 2, 1),))
        loc.hist[2] = h
        loc.alive = [False] * 3
        loc.N, loc.M, loc.Z = [-1] * 3, [-1] * 3, [-1] * 3
        assert locus_loglik(loc, tree, P0) == pytest.approx(history_loglik(h, 40, END79, 0.2, P0))

    def test_check_rejects_inconsistent(self):
        tree = _two_taxon_tree()
        loc = empty_locus(tree, END79, 40, 0.2)
        loc.N[0] = 41
        with pytest.raises(ValueError):
            locus_loglik(loc, tree, P0)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_order_independence(self, seed):
        from aflpsubid.priors import PriorConfig
        from aflpsubid.simulate import simulate_locus
        rng = np.random.default_rng(seed)
        tree = PhyloTree.random(TAXA6, rng, 0.2)
        params = IndelParams(0.2, 0.25, 0.5)
        loc = simulate_locus(tree, PriorConfig(), params, rng)
        assert replay_lengths(loc, tree) == [n if a else -1 for n, a in zip(loc.N, loc.alive)]
        order = rng.permutation(tree.n_nodes)
        total = 0.0
        Ns = replay_lengths(loc, tree)
        for v in order:
            v = int(v)
            if v == tree.root:
                alive_p, n_p, m_p, z_p = True, loc.n_anc, 0, 0
            else:
                p = tree.parent[v]
                alive_p, n_p, m_p, z_p = Ns[p] >= 0, Ns[p], loc.M[p], loc.Z[p]
            if not alive_p:
                continue
            T = loc.anc_length if v == tree.root else tree.lengths[v]
            total += edge_loglik(loc.hist[v], (m_p, z_p), (loc.M[v], loc.Z[v]), T, loc.end, n_p, params)
        assert locus_loglik(loc, tree, params) == pytest.approx(total, rel=1e-12)

    def test_tree_loglik_algebra(self, rng):
        from aflpsubid.priors import PriorConfig
        from aflpsubid.simulate import simulate_locus
        tree = PhyloTree.random(TAXA6, rng, 0.2)
        params = IndelParams(0.2, 0.25, 0.5)
        loci = [simulate_locus(tree, PriorConfig(), params, rng) for _ in range(5)]
        assert tree_loglik([], tree, params) == 0.0
        one = locus_loglik(loci[0], tree, params)
        assert tree_loglik([loci[0], loci[0]], tree, params) == pytest.approx(2 * one, rel=1e-14)
        a = tree_loglik(loci, tree, params)
        assert tree_loglik(loci[::-1], tree, params) == pytest.approx(a, rel=1e-13)


class TestConsistency:
    def test_three_taxon_assignments(self):
        X = three_taxon_matrix()
        for rows in (THREE_TAXON_Y_A, THREE_TAXON_Y_B):
            Y = assignment(rows)
            assert derive_observed(Y, TAXA3).same_bands(X)
            assert is_consistent(Y, X)

    def test_six_taxon_truth_produces_data(self):
        X = six_taxon_matrix()
        D = derive_observed(assignment(SIX_TAXON_TRUTH), TAXA6)
        assert D.same_bands(X)
        assert sorted(D.marker_lengths.tolist()) == sorted(X.marker_lengths.tolist())

    def test_extra_band_is_inconsistent(self):
        rows = [list(r) for r in THREE_TAXON_Y_A]
        rows[1][2] = (1, 51)
        assert not is_consistent(assignment(rows), three_taxon_matrix())

    def test_trivial_embedding(self):
        X = six_taxon_matrix()
        rows = []
        for j, m in enumerate(X.marker_lengths):
            rows.append([(int(X.presence[i, j]), int(m)) for i in range(6)])
        assert is_consistent(assignment(rows), X)

    def test_killed_and_hidden_produce_nothing(self):
        Y = LocusAssignment.from_marker_lengths([[-1, 0]], [[-1, 80]])
        assert derive_observed(Y, ["a", "b"]).n_bands == 0
