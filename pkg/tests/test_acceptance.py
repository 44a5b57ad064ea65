"""Acceptance suite: one PASS/FAIL line per criterion, printed at the end of
the session by the terminal-summary hook in conftest.py."""

import math
import time
from collections import Counter
from contextlib import contextmanager

import numpy as np
import pytest
from scipy import stats

from aflpsubid import io
from aflpsubid.digest import digest_one, expected_fragment_count, random_genome
from aflpsubid.kernels import (
    cutter_matrix,
    cutter_stationary,
    mismatch_matrix,
    mismatch_probability,
    mismatch_stationary,
)
from aflpsubid.likelihood import derive_observed, edge_loglik, history_loglik, is_consistent
from aflpsubid.model import EndRegions, IndelHistory, IndelParams, total_indel_rate
from aflpsubid.priors import PriorConfig, loci_count_logpmf
from aflpsubid.proposals import (
    eval_kill_density,
    eval_nokill_density,
    propose_kill_history,
    propose_nokill_history,
)
from aflpsubid.sampler import Mc3Config, gelman_rubin, run_mc3
from aflpsubid.summaries import homology_summaries, topology_posteriors
from aflpsubid.tree import PhyloTree

from conftest import (
    SIX_TAXON_TRUTH,
    TAXA3,
    TAXA6,
    THREE_TAXON_Y_A,
    THREE_TAXON_Y_B,
    assignment,
    six_taxon_matrix,
    three_taxon_matrix,
)
from oracles import length_chain_transition, se_binomial
from test_digest import SEL, filler, fixture_200, unit
from test_io import EXCERPT, EXCERPT_PAIRS
from test_kernels import two_block
from test_proposals import END as TOY_END, TOY, check_classes, kill_mc, nokill_mc
from test_simulate import edge_mc

TITLES = {
    1: "expected fragment counts",
    2: "kernel identities",
    3: "likelihood correctness",
    4: "consistency indicators",
    5: "proposal-density oracle",
    6: "prior recovery",
    7: "simulation-study reproduction",
    8: "convergence diagnostics",
    9: "digest engine",
    10: "case-study posterior (declared not reproducible; ingestion checks)",
}
RESULTS: dict[int, list[tuple[bool, str]]] = {}


@contextmanager
def criterion(n: int, detail: str):
    try:
        yield
    except AssertionError as exc:
        RESULTS.setdefault(n, []).append((False, f"{detail}: {exc}".splitlines()[0]))
        raise
    RESULTS.setdefault(n, []).append((True, detail))


def summary_lines() -> list[str]:
    out = []
    for n in sorted(TITLES):
        checks = RESULTS.get(n)
        if not checks:
            out.append(f"criterion {n:2d} NOT RUN  {TITLES[n]}")
            continue
        ok = all(c for c, _ in checks)
        failed = [d for c, d in checks if not c]
        note = f" ({'; '.join(failed)})" if failed else ""
        out.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {TITLES[n]}{note}")
    return out


# -- 1 -------------------------------------------------------------------------------


@pytest.mark.parametrize("size_mb,count", [(116, 12), (97, 10), (389, 39), (485, 48)])
def test_c1_expected_counts(size_mb, count):
    with criterion(1, f"{size_mb} Mb"):
        assert round(expected_fragment_count(size_mb * 1e6)) == count


# -- 2 -------------------------------------------------------------------------------


def test_c2_kernel_identities():
    with criterion(2, "mismatch and cutter identities"):
        for t in (0.01, 0.1, 0.5, 2.0):
            P = mismatch_matrix(16, t).entries
            assert np.abs(P.sum(axis=1) - 1).max() < 1e-12
            for n in (20, 100, 500):
                C = cutter_matrix(t, n).entries
                assert np.abs(C.sum(axis=1) - 1).max() < 1e-12
            assert np.abs(P - two_block(16, t)).max() < 1e-10
        assert np.array_equal(mismatch_matrix(16, 0.0).entries, np.eye(17))
        assert np.array_equal(cutter_matrix(0.0, 50).entries, np.eye(2))
        for s, t in ((0.1, 0.3), (0.05, 1.7)):
            ck = mismatch_matrix(16, s).entries @ mismatch_matrix(16, t).entries
            assert np.abs(ck - mismatch_matrix(16, s + t).entries).max() < 1e-10
            ck = cutter_matrix(s, 80).entries @ cutter_matrix(t, 80).entries
            assert np.abs(ck - cutter_matrix(s + t, 80).entries).max() < 1e-10
        pi = mismatch_stationary(16)
        assert np.abs(pi @ mismatch_matrix(16, 0.7).entries - pi).max() < 1e-10
        z = cutter_stationary(80)
        piz = np.array([z, 1 - z])
        assert np.abs(piz @ cutter_matrix(0.7, 80).entries - piz).max() < 1e-10


# -- 3 -------------------------------------------------------------------------------


def test_c3_empty_history_closed_forms():
    with criterion(3, "empty-history closed forms"):
        end, params = EndRegions(7, 9), IndelParams(0.025, 0.031, 0.1)
        for n, T in ((1, 0.2), (60, 0.4), (500, 1.3)):
            assert history_loglik(IndelHistory(), n, end, T, params) == pytest.approx(
                -total_indel_rate(end, n, params) * T, rel=1e-13)
            p = mismatch_probability(T)
            want = (-total_indel_rate(end, n, params) * T + 16 * math.log1p(-p)
                    + math.log(cutter_matrix(T, n).entries[0, 0]))
            got = edge_loglik(IndelHistory(), (0, 0), (0, 0), T, end, n, params)
            assert got == pytest.approx(want, rel=1e-12)


def test_c3_forward_simulation_frequencies():
    with criterion(3, "forward simulation, 10^6 replicates"):
        end, params = EndRegions(7, 9), IndelParams(0.05, 0.07, 0.4)
        n0, T, reps = 20, 0.05, 1_000_000
        empty, kills, ends = edge_mc(n0, T, params, reps, 2024)
        p_empty = math.exp(-total_indel_rate(end, n0, params) * T)
        assert abs(empty / reps - p_empty) < 3 * se_binomial(p_empty, reps), "P(no event)"
        P = length_chain_transition(end, params, n0, T, 120)
        assert abs(kills / reps - P[0]) < 3 * se_binomial(P[0], reps), "kill fraction"
        for n in range(1, 121):
            if P[n] > 1e-3:
                assert abs(ends[n] / reps - P[n]) < 3 * se_binomial(P[n], reps), f"endpoint {n}"


# -- 4 -------------------------------------------------------------------------------


def test_c4_consistency_indicators():
    with criterion(4, "worked assignments map to their marker tables"):
        X3 = three_taxon_matrix()
        for rows in (THREE_TAXON_Y_A, THREE_TAXON_Y_B):
            Y = assignment(rows)
            assert derive_observed(Y, TAXA3).same_bands(X3)
            assert is_consistent(Y, X3)
        X6 = six_taxon_matrix()
        D = derive_observed(assignment(SIX_TAXON_TRUTH), TAXA6)
        assert D.same_bands(X6) and is_consistent(assignment(SIX_TAXON_TRUTH), X6)
        assert sorted(D.marker_lengths.tolist()) == sorted(X6.marker_lengths.tolist())


# -- 5 -------------------------------------------------------------------------------


@pytest.mark.parametrize("n0,target", [(3, 3), (3, 4), (4, 4), (4, 3)])
def test_c5_nokill_frequencies(n0, target):
    with criterion(5, f"no-kill n0={n0} target={target}"):
        T, reps = 0.3, 200_000
        counts = nokill_mc(n0, target, T, TOY, reps, 101 + 10 * n0 + target)
        check_classes(counts, reps, lambda h: eval_nokill_density(h, n0, T, TOY_END, TOY), T)


@pytest.mark.parametrize("n0", [3, 4])
def test_c5_kill_frequencies(n0):
    with criterion(5, f"kill n0={n0}"):
        T, reps = 0.3, 200_000
        counts = kill_mc(n0, T, TOY, reps, 131 + n0)
        check_classes(counts, reps, lambda h: eval_kill_density(h, n0, T, TOY_END, TOY), T)


def test_c5_round_trip():
    with criterion(5, "round-trip density identity"):
        rng = np.random.default_rng(7)
        for _ in range(2000):
            n0 = int(rng.integers(1, 12))
            T = float(rng.uniform(0.05, 2.0))
            out = propose_nokill_history(n0, int(rng.integers(1, 12)), T, TOY_END, TOY, rng)
            if out is not None:
                assert out[1] == eval_nokill_density(out[0], n0, T, TOY_END, TOY)
            h, lq = propose_kill_history(n0, T, TOY_END, TOY, rng)
            assert lq == eval_kill_density(h, n0, T, TOY_END, TOY)


# -- 6 -------------------------------------------------------------------------------

PRIOR_RUN = dict(sweeps=30_000, thin=30)


@pytest.fixture(scope="module")
def prior_run():
    prior = PriorConfig(nb_mean=3, nb_var=6)
    cfg = Mc3Config(n_chains=1, iterations=PRIOR_RUN["sweeps"], thin=PRIOR_RUN["thin"], seed=61,
                    ignore_data=True, check_interval=5000)
    t0 = time.time()
    res = run_mc3(three_taxon_matrix(), cfg, prior)
    burn = len(res.trace) // 10
    return prior, res.trace[burn:], res.trees[burn:], time.time() - t0


def test_c6_prior_recovery(prior_run):
    prior, rows, trees, secs = prior_run
    alpha = 0.01
    with criterion(6, f"runtime {secs:.0f} s"):
        assert secs < 15 * 60
    for v in range(trees[0].n_nodes):
        if v == trees[0].root:
            continue
        # node ids follow the topology, so leaves are stable and the one internal edge is pooled by id
        x = [t.lengths[v] for t in trees]
        with criterion(6, f"edge {v} Exp(gamma) KS"):
            assert stats.kstest(x, stats.expon(scale=prior.gamma).cdf).pvalue > alpha
    checks = {
        "mu": ([r["mu"] for r in rows], stats.gamma(prior.mu_shape, scale=1 / prior.mu_rate).cdf),
        "beta": ([r["lambda"] / r["mu"] for r in rows], stats.beta(prior.beta_a, prior.beta_b).cdf),
        "r": ([r["r"] for r in rows], stats.uniform().cdf),
    }
    for name, (x, cdf) in checks.items():
        with criterion(6, f"{name} KS"):
            assert stats.kstest(x, cdf).pvalue > alpha
    with criterion(6, "K chi-square"):
        ks = Counter(r["K_0"] for r in rows)
        n = len(rows)
        pmf = [math.exp(loci_count_logpmf(k, prior)) for k in range(200)]
        edges = [k for k in range(200) if n * pmf[k] >= 5]
        last = edges[-1]
        obs = [ks[k] for k in range(last)] + [sum(c for k, c in ks.items() if k >= last)]
        exp = [n * pmf[k] for k in range(last)] + [n * (1 - sum(pmf[:last]))]
        assert stats.chisquare(obs, exp).pvalue > alpha


# -- 7 and 8 -------------------------------------------------------------------------

# 4 independent coupled runs; the scaled-down length widens the tolerance (see README)
SIM_RUNS = dict(seeds=(101, 102, 103, 104), chains=3, sweeps=2500, thin=10, burnin=0.2)
TOPOLOGY_BAND = (0.327 - 0.08, 0.338 + 0.08)


@pytest.fixture(scope="module")
def simulation_runs():
    X = six_taxon_matrix()
    prior = PriorConfig(nb_mean=10, nb_var=1000, w=0.95)
    runs = []
    t0 = time.time()
    for seed in SIM_RUNS["seeds"]:
        cfg = Mc3Config(n_chains=SIM_RUNS["chains"], iterations=SIM_RUNS["sweeps"], thin=SIM_RUNS["thin"],
                        seed=seed, check_interval=500)
        res = run_mc3(X, cfg, prior)
        b = int(len(res.trace) * SIM_RUNS["burnin"])
        runs.append((res.trace[b:], res.trees[b:], res.homology[b:]))
    return runs, time.time() - t0


def test_c7_simulation_study(simulation_runs):
    runs, secs = simulation_runs
    with criterion(7, f"runtime {secs / 60:.0f} min"):
        assert secs < 3600
    trees = [t for r in runs for t in r[1]]
    tops = topology_posteriors(trees)
    want = PhyloTree.from_newick("((A,B),((C,D),(E,F)));", TAXA6).topology_key()
    with criterion(7, f"(a) top topology {tops[0][1]:.3f}"):
        assert tops[0][0] == want
        assert TOPOLOGY_BAND[0] <= tops[0][1] <= TOPOLOGY_BAND[1]
    ks = Counter(row["K_0"] for r in runs for row in r[0])
    mode, count = ks.most_common(1)[0]
    with criterion(7, f"(b) K mode {mode} at {count / sum(ks.values()):.3f}"):
        assert mode == 7 and count / sum(ks.values()) >= 0.80
    H = homology_summaries([h for r in runs for h in r[2]])
    for a, b in ((136, 137), (215, 216), (219, 221)):
        with criterion(7, f"(c) pair ({a},{b}) {H.pair(a, b):.3f}"):
            assert H.pair(a, b) >= 0.90
    for a, b in ((215, 219), (216, 221)):
        with criterion(7, f"(c) pair ({a},{b}) {H.pair(a, b):.3f}"):
            assert H.pair(a, b) <= 0.05


def test_c8_gelman_rubin(simulation_runs):
    runs, _ = simulation_runs
    series = {name: [[row[name] for row in r[0]] for r in runs] for name in ("lambda", "mu", "r")}
    for leaf, taxon in enumerate(TAXA6):
        series[f"leaf {taxon}"] = [[t.lengths[leaf] for t in r[1]] for r in runs]
    for name, x in series.items():
        R = gelman_rubin(x)
        with criterion(8, f"{name} R={R:.3f}"):
            assert abs(R - 1) <= 0.05


# -- 9 -------------------------------------------------------------------------------


def test_c9_fixtures():
    with criterion(9, "hand fixtures"):
        rep = digest_one(fixture_200(120), SEL)
        assert (rep.fragment_count, rep.marker_lengths(), rep.superposition_count) == (1, [159], 0)
        rep = digest_one(unit(100) + filler(800) + unit(100), SEL)
        assert (rep.fragment_count, rep.observed_marker_count, rep.superposition_count) == (2, 1, 1)
        rep = digest_one(unit(100) + filler(800) + unit(130), SEL)
        assert (rep.fragment_count, rep.observed_marker_count, rep.superposition_count) == (2, 2, 0)
        assert digest_one(filler(30) + unit(50, "frequent", "frequent"), SEL).fragment_count == 0


def test_c9_uniform_genome():
    with criterion(9, "100 Mb uniform genome"):
        t0 = time.time()
        rep = digest_one(random_genome(100_000_000, np.random.default_rng(909)), SEL)
        mean = expected_fragment_count(1e8)
        assert abs(rep.fragment_count - mean) <= 3 * math.sqrt(mean), rep.fragment_count
        assert time.time() - t0 < 120


# -- 10 ------------------------------------------------------------------------------


def test_c10_excerpt_ingestion():
    with criterion(10, "excerpt ingestion"):
        X = io.load_marker_matrix(EXCERPT)
        assert len(X.taxa) == 14 and X.n_bands == 19
        col = {(p, m): X.presence[:, j] for j, (p, m) in enumerate(zip(X.plates.tolist(), X.marker_lengths.tolist()))}
        for p, a, b in EXCERPT_PAIRS:
            assert (p, a) in col and (p, b) in col
            assert not (col[(p, a)] & col[(p, b)]).any()
