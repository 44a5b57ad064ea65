"""Reversible-jump Metropolis-within-Gibbs sampler with Metropolis-coupled
chains for the Sub-ID posterior.

The chain state holds the tree, the rate parameters and, per locus, the full
augmented history (end regions, ancestral length, indel histories on every
edge and node states).  The assignment ``Y`` is a deterministic function of
the loci, so the consistency constraint with the observed markers is tracked
through per-band counts of producing loci.
"""

from __future__ import annotations

import logging
import math
import pickle
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .kernels import cutter_product_given_history, mismatch_logmatrix
from .likelihood import (
    AugmentedLocus,
    assignment_from_loci,
    history_loglik,
    locus_loglik,
    node_edge_loglik,
)
from .model import (
    DEFAULT_SCHEME,
    EMPTY_HISTORY,
    EndRegions,
    EnzymeScheme,
    IndelHistory,
    IndelParams,
    LocusAssignment,
    MarkerMatrix,
)
from .priors import (
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
    tree_logprior,
)
from .proposals import (
    eval_kill_density,
    eval_nokill_density,
    propose_kill_history,
    propose_nokill_history,
)
from .simulate import sample_child_state, simulate_subtree, simulate_edge_history
from .tree import PhyloTree

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericFailure(RuntimeError):
    """A sweep hit an invalid number (for example a non-positive length)."""


class ConsistencyError(RuntimeError):
    """The chain left the set of states consistent with the data."""


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class Mc3Config:
    """Run settings.  ``heats`` defaults to ``1 / (1 + heat_step * i)``."""

    n_chains: int = 4
    heat_step: float = 0.2
    heats: Sequence[float] | None = None
    swap_interval: int = 1
    iterations: int = 10_000
    thin: int = 100
    seed: int = 0
    check_interval: int = 1000
    # move tuning
    node_step: int = 5
    pinned_step: int = 10
    edge_sigma: float = 0.5
    root_edge_sigma: float = 0.5
    mu_sigma: float = 0.3
    beta_sigma: float = 0.5
    r_sigma: float = 0.5
    nni_per_sweep: int | None = None
    birth_death_per_sweep: int = 3
    merge_split_per_sweep: int = 3
    # prior-sampling mode: drop the data constraint (likelihood of X is 1)
    ignore_data: bool = False
    moves: frozenset | None = None  # None = all

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("need at least one chain")
        if self.heats is None:
            self.heats = [1.0 / (1.0 + self.heat_step * i) for i in range(self.n_chains)]
        self.heats = [float(h) for h in self.heats]
        if len(self.heats) != self.n_chains:
            raise ValueError("one heat per chain")
        if self.heats[0] != 1.0:
            raise ValueError("the first (cold) chain must have heat 1")
        if any(b >= a for a, b in zip(self.heats, self.heats[1:])) and self.n_chains > 1:
            if not all(b == a for a, b in zip(self.heats, self.heats[1:])):
                raise ValueError("heats must decrease with chain index")
        if self.thin < 1 or self.swap_interval < 1 or self.iterations < 0:
            raise ValueError("thin and swap interval must be positive, iterations non-negative")

    def enabled(self, move: str) -> bool:
        return self.moves is None or move in self.moves


ALL_MOVES = frozenset({
    "history", "node_length", "ancestor_length", "substitution", "regenerate", "end_regions",
    "ancestor_edge", "edge_length", "topology", "root", "rates", "birth_death", "merge_split",
})


@dataclass
class ChainState:
    tree: PhyloTree
    loci: list
    params: IndelParams
    n_markers: dict
    log_prior: float = 0.0
    log_lik: float = 0.0
    locus_ll: list = field(default_factory=list)
    counts: Counter = field(default_factory=Counter)

    @property
    def K(self) -> int:
        return len(self.loci)

    def k_per_plate(self) -> dict:
        out = {p: 0 for p in self.n_markers}
        for loc in self.loci:
            out[loc.plate] = out.get(loc.plate, 0) + 1
        return out

    @property
    def log_posterior_terms(self) -> tuple[float, float]:
        return self.log_prior, self.log_lik

    @property
    def log_posterior(self) -> float:
        return self.log_prior + self.log_lik

    def Y(self, n_min: int = 11, n_max: int = 586) -> LocusAssignment:
        return assignment_from_loci(self.loci, self.tree, n_min, n_max)

    def copy(self) -> "ChainState":
        return ChainState(self.tree.copy(), [loc.copy() for loc in self.loci], self.params,
                          dict(self.n_markers), self.log_prior, self.log_lik, list(self.locus_ll),
                          Counter(self.counts))


@dataclass
class ProposalResult:
    """Bookkeeping of one proposal; ``log_alpha`` is the tempered MH ratio."""

    log_forward_density: float = 0.0
    log_reverse_density: float = 0.0
    log_prior_ratio: float = 0.0
    log_likelihood_ratio: float = 0.0
    new_state: object = None
    log_locus_prior_ratio: float = 0.0

    def finite(self) -> bool:
        return all(math.isfinite(x) for x in (self.log_forward_density, self.log_reverse_density,
                                               self.log_prior_ratio, self.log_likelihood_ratio,
                                               self.log_locus_prior_ratio))

    def log_alpha(self, heat: float) -> float:
        """Only the global prior ratio is tempered; see :func:`mh_accept`."""
        if not self.finite():
            return -math.inf
        return (heat * self.log_prior_ratio + self.log_likelihood_ratio + self.log_locus_prior_ratio
                + self.log_reverse_density - self.log_forward_density)


def mh_accept(log_lik_ratio: float, log_prior_ratio: float, log_q_reverse_minus_forward: float,
              heat: float, rng: np.random.Generator, log_untempered: float = 0.0) -> bool:
    """Metropolis-Hastings decision; the heat tempers the target only.

    ``log_untempered`` is a target ratio that enters at full weight.  The
    sampler routes the per-locus augmented terms through it: raising the
    indel-history density to a power below one gives an improper target
    (the tempered event densities outgrow the tempered survival term), so
    heated chains temper the tree, rate and loci-count priors only.
    """
    vals = (log_lik_ratio, log_prior_ratio, log_q_reverse_minus_forward, log_untempered)
    if any(math.isnan(x) for x in vals):
        log.warning("NaN in acceptance ratio %s; rejecting", vals)
        return False
    if any(x == -math.inf for x in vals):
        return False
    if any(x == math.inf for x in vals):
        log.warning("infinite acceptance ratio %s; rejecting", vals)
        return False
    la = heat * (log_lik_ratio + log_prior_ratio) + log_q_reverse_minus_forward + log_untempered
    return la >= 0 or rng.random() < math.exp(la)


# ---------------------------------------------------------------------------
# history proposal helpers


def logsumexp(x) -> float:
    x = np.asarray(x, dtype=float)
    m = x.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(x - m).sum()))


def history_density(h: IndelHistory, alive_p: bool, n_p: int, alive_c: bool, T: float,
                    end: EndRegions, params: IndelParams) -> float:
    if not alive_p:
        return 0.0 if (not alive_c and not len(h)) else -math.inf
    if alive_c:
        return eval_nokill_density(h, n_p, T, end, params)
    return eval_kill_density(h, n_p, T, end, params)


def propose_history(alive_p: bool, n_p: int, alive_c: bool, n_c: int, T: float, end: EndRegions,
                    params: IndelParams, rng: np.random.Generator):
    if not alive_p:
        return None if alive_c else (EMPTY_HISTORY, 0.0)
    if alive_c:
        return propose_nokill_history(n_p, n_c, T, end, params, rng)
    return propose_kill_history(n_p, T, end, params, rng)


def _subtree(tree: PhyloTree, v: int) -> list[int]:
    out, stack = [], [v]
    while stack:
        w = stack.pop()
        out.append(w)
        stack.extend(tree.children[w])
    return out


def _hidden_leaf_row(loc: AugmentedLocus, tree: PhyloTree, v: int) -> np.ndarray:
    """Kernel probabilities of the leaf's (M, Z) given its parent, shape (R+1, 2)."""
    _, n_p, m_p, z_p = loc.parent_state(tree, v)
    T = loc.edge_length(tree, v)
    zk = cutter_product_given_history(loc.hist[v], T, n_p)
    pm = np.exp(mismatch_logmatrix(loc.end.total, T)[m_p])
    return pm[:, None] * np.array([zk[2 * z_p], zk[2 * z_p + 1]])[None, :]


def simulate_hidden_subtree(loc: AugmentedLocus, tree: PhyloTree, v: int, params: IndelParams,
                            n_min: int, n_max: int, rng: np.random.Generator | None = None) -> float:
    """Forward-simulate the subtree at ``v`` with every leaf conditioned not to
    show a band, and return the log density of the result.  Without ``rng``
    the current subtree is only scored."""
    lq = 0.0
    for w in _subtree_preorder(tree, v):
        if rng is not None:
            simulate_subtree_node(loc, tree, w, params, rng)
        if tree.is_leaf(w) and loc.alive[w] and n_min <= loc.N[w] <= n_max:
            row = _hidden_leaf_row(loc, tree, w)
            if row[0, 0] >= 1.0:
                return -math.inf
            if rng is not None and loc.M[w] == 0 and loc.Z[w] == 0:
                p = row.ravel().copy()
                p[0] = 0.0
                idx = int(rng.choice(p.size, p=p / p.sum()))
                loc.M[w], loc.Z[w] = divmod(idx, 2)
            if loc.M[w] == 0 and loc.Z[w] == 0:
                return -math.inf
            lq -= math.log1p(-row[0, 0])
        lq += node_edge_loglik(loc, tree, w, params)
    return lq


def _subtree_preorder(tree: PhyloTree, v: int) -> list[int]:
    out, stack = [], [v]
    while stack:
        w = stack.pop()
        out.append(w)
        stack.extend(reversed(tree.children[w]))
    return out


def simulate_subtree_node(loc: AugmentedLocus, tree: PhyloTree, w: int, params: IndelParams,
                          rng: np.random.Generator) -> None:
    """Draw the edge above ``w`` and the state at ``w`` given its parent."""
    alive_p, n_p, m_p, z_p = loc.parent_state(tree, w)
    if not alive_p:
        loc.hist[w] = EMPTY_HISTORY
        loc.alive[w] = False
        loc.N[w] = loc.M[w] = loc.Z[w] = -1
        return
    T = loc.edge_length(tree, w)
    h = simulate_edge_history(n_p, loc.end, T, params, rng)
    loc.hist[w] = h
    if h.kill:
        loc.alive[w] = False
        loc.N[w] = loc.M[w] = loc.Z[w] = -1
        return
    loc.alive[w] = True
    loc.N[w] = h.final_length(n_p)
    loc.M[w], loc.Z[w] = sample_child_state(h, m_p, z_p, T, loc.end, n_p, rng)


def _mixture_logq(new: int, old: int, nbrs: Sequence[int], step: int) -> float:
    d = abs(new - old)
    rw = 1.0 / (2 * step) if 1 <= d <= step else 0.0
    if not nbrs:
        return math.log(rw) if rw > 0 else -math.inf
    pick = sum(1 for x in nbrs if x == new) / len(nbrs)
    q = 0.5 * rw + 0.5 * pick
    return math.log(q) if q > 0 else -math.inf


def _mixture_draw(old: int, nbrs: Sequence[int], step: int, rng: np.random.Generator) -> int:
    if nbrs and rng.random() < 0.5:
        return int(nbrs[int(rng.integers(len(nbrs)))])
    d = int(rng.integers(1, step + 1))
    return old + d if rng.random() < 0.5 else old - d


# ---------------------------------------------------------------------------
# the sampler


class Sampler:
    """Moves for a single chain at a given heat, bound to one data set."""

    def __init__(self, X: MarkerMatrix, cfg: Mc3Config, prior_cfg: PriorConfig,
                 scheme: EnzymeScheme = DEFAULT_SCHEME):
        self.X = X
        self.cfg = cfg
        self.prior = prior_cfg
        self.scheme = scheme
        self.overhead = scheme.primer_overhead
        self.target = X.keyed_band_set()
        self.n_markers = {p: sum(1 for q in X.plates.tolist() if q == p) for p in X.plate_ids()}
        self.bands = defaultdict(list)  # (plate, taxon) -> intermediate lengths
        for p, i, length in sorted(self.target, key=lambda b: (str(b[0]), b[1], b[2])):
            self.bands[(p, i)].append(length - self.overhead)
        self.stats = defaultdict(lambda: [0, 0])
        self.restricted = prior_cfg.loci_model == "restricted" and not cfg.ignore_data

    # -- bookkeeping -------------------------------------------------------------

    def _visible_keys(self, locus: AugmentedLocus, tree: PhyloTree) -> set:
        lo, hi = self.prior.n_min, self.prior.n_max
        return {(locus.plate, i, n + self.overhead) for i, n in locus.visible_leaves(tree, lo, hi).items()}

    def _leaf_key(self, locus: AugmentedLocus, i: int):
        if locus.visible(i, self.prior.n_min, self.prior.n_max):
            return (locus.plate, i, locus.N[i] + self.overhead)
        return None

    def _apply_keys(self, counts: Counter, remove, add) -> bool:
        """Update band counts; return whether the touched bands remain
        consistent with the data (always true when data are ignored)."""
        for key in remove:
            counts[key] -= 1
        for key in add:
            counts[key] += 1
        if self.cfg.ignore_data:
            return True
        for key in list(remove) + list(add):
            if (counts[key] > 0) != (key in self.target):
                return False
        return True

    def _record(self, name: str, accepted: bool) -> None:
        s = self.stats[name]
        s[0] += 1
        s[1] += int(accepted)

    def _accept(self, name: str, res: ProposalResult, heat: float, rng) -> bool:
        ok = res.finite() and mh_accept(0.0, res.log_prior_ratio,
                                        res.log_reverse_density - res.log_forward_density, heat, rng,
                                        res.log_likelihood_ratio + res.log_locus_prior_ratio)
        self._record(name, ok)
        return ok

    def _n_visible(self, locus: AugmentedLocus, tree: PhyloTree) -> int:
        lo, hi = self.prior.n_min, self.prior.n_max
        return sum(1 for i in range(tree.n_taxa) if locus.visible(i, lo, hi))

    # -- state construction ---------------------------------------------------------

    def initial_state(self, tree: PhyloTree, params: IndelParams, rng: np.random.Generator) -> ChainState:
        """One locus per observed band, no indels; taxa lacking the band carry
        one end-region mismatch."""
        loci = []
        for j in range(self.X.n_bands):
            n = int(self.X.marker_lengths[j]) - self.overhead
            if n < 1:
                raise ValueError(f"marker length {self.X.marker_lengths[j]} is too short")
            size = tree.n_nodes
            M = [0] * size
            for i in range(tree.n_taxa):
                if not self.X.presence[i, j]:
                    M[i] = 1
            end = EndRegions(7, 9)
            loci.append(AugmentedLocus(end, n, self.prior.nu, [EMPTY_HISTORY] * size, [True] * size,
                                       [n] * size, M, [0] * size, self.X.plates[j]))
        for loc in loci:
            # fragments outside the visibility window cannot be pinned this way
            for i in range(tree.n_taxa):
                if loc.M[i] == 0 and not self.prior.n_min <= loc.N[i] <= self.prior.n_max:
                    raise ValueError("observed marker length outside the visibility window")
        state = ChainState(tree, loci, params, dict(self.n_markers))
        self.refresh(state)
        return state

    def refresh(self, state: ChainState, check: bool = True) -> None:
        """Recompute cached terms and band counts from scratch."""
        state.locus_ll = [locus_loglik(loc, state.tree, state.params, check) for loc in state.loci]
        state.log_lik = float(sum(state.locus_ll))
        state.log_prior = self.log_prior(state)
        state.counts = Counter()
        for loc in state.loci:
            for key in self._visible_keys(loc, state.tree):
                state.counts[key] += 1
        if check:
            self.check_state(state)

    def log_prior(self, state: ChainState) -> float:
        return joint_logprior(state, self.prior)

    def tempered_log_prior(self, state: ChainState) -> float:
        """Tree, rate and loci-count prior terms, the part a heat acts on."""
        cfg = self.prior
        out = tree_logprior(state.tree, cfg) + rate_logprior(state.params, cfg)
        for p, k in state.k_per_plate().items():
            out += loci_count_logpmf(k, cfg, state.n_markers.get(p))
        return out

    def check_state(self, state: ChainState) -> None:
        if self.cfg.ignore_data:
            return
        produced = {k for k, c in state.counts.items() if c > 0}
        if produced != self.target:
            raise ConsistencyError(f"produced bands differ from data: missing "
                                   f"{sorted(self.target - produced)[:5]}, extra {sorted(produced - self.target)[:5]}")
        if self.restricted:
            for k, loc in enumerate(state.loci):
                if self._n_visible(loc, state.tree) == 0:
                    raise ConsistencyError(f"locus {k} produces no marker under the restricted model")

    def verify_cache(self, state: ChainState, tol: float = 1e-6) -> float:
        """Largest absolute gap between cached and recomputed log terms."""
        ll = [locus_loglik(loc, state.tree, state.params, True) for loc in state.loci]
        lp = self.log_prior(state)
        gap = max(abs(sum(ll) - state.log_lik), abs(lp - state.log_prior))
        if gap > tol:
            raise RuntimeError(f"cached log posterior drifted by {gap}")
        self.check_state(state)
        return gap

    # -- sweep ---------------------------------------------------------------------

    def sweep(self, state: ChainState, rng: np.random.Generator, heat: float = 1.0) -> ChainState:
        cfg = self.cfg
        tree = state.tree
        for k in range(len(state.loci)):
            if cfg.enabled("history"):
                self.move_histories(state, k, rng, heat)
            if cfg.enabled("ancestor_length"):
                self.move_ancestor_length(state, k, rng, heat)
            if cfg.enabled("node_length"):
                for v in tree.preorder():
                    self.move_node_length(state, k, v, rng, heat)
            if cfg.enabled("substitution"):
                for v in tree.preorder():
                    self.move_substitution(state, k, v, rng, heat)
            if cfg.enabled("regenerate"):
                self.move_regenerate(state, k, rng, heat)
            if cfg.enabled("end_regions"):
                self.move_end_regions(state, k, rng, heat)
            if cfg.enabled("ancestor_edge"):
                self.move_ancestor_edge(state, k, rng, heat)
        if cfg.enabled("edge_length"):
            for v in tree.edges():
                self.move_edge_length(state, v, rng, heat)
        if cfg.enabled("topology"):
            for _ in range(cfg.nni_per_sweep or tree.n_taxa):
                self.move_nni(state, rng, heat)
        if cfg.enabled("root"):
            self.move_root(state, rng, heat)
        if cfg.enabled("rates"):
            self.move_mu(state, rng, heat)
            self.move_beta(state, rng, heat)
            self.move_r(state, rng, heat)
        if cfg.enabled("birth_death"):
            for _ in range(cfg.birth_death_per_sweep):
                for p in self.n_markers:
                    self.move_birth_death(state, p, rng, heat)
        if cfg.enabled("merge_split") and not cfg.ignore_data:
            for _ in range(cfg.merge_split_per_sweep):
                for p in self.n_markers:
                    if rng.random() < 0.5:
                        self.move_merge(state, p, rng, heat)
                    else:
                        self.move_split(state, p, rng, heat)
        return state

    # -- per-locus moves ---------------------------------------------------------------

    def _edges_ll(self, locus, tree, nodes, params) -> float:
        return sum(node_edge_loglik(locus, tree, v, params) for v in nodes)

    def _commit_ll(self, state: ChainState, k: int, dll: float, dlp: float = 0.0) -> None:
        state.locus_ll[k] += dll
        state.log_lik += dll
        state.log_prior += dlp

    def move_histories(self, state: ChainState, k: int, rng, heat: float) -> None:
        """Independent re-proposal of the history on every live edge."""
        loc, tree, params = state.loci[k], state.tree, state.params
        for v in tree.preorder():
            alive_p, n_p, _, _ = loc.parent_state(tree, v)
            if not alive_p:
                continue
            T = loc.edge_length(tree, v)
            prop = propose_history(True, n_p, loc.alive[v], loc.N[v], T, loc.end, params, rng)
            if prop is None:
                self._record("history", False)
                continue
            h_new, q_new = prop
            old = loc.hist[v]
            q_old = history_density(old, True, n_p, loc.alive[v], T, loc.end, params)
            ll_old = node_edge_loglik(loc, tree, v, params)
            loc.hist[v] = h_new
            ll_new = node_edge_loglik(loc, tree, v, params)
            res = ProposalResult(q_new, q_old, 0.0, ll_new - ll_old)
            if self._accept("history", res, heat, rng):
                self._commit_ll(state, k, ll_new - ll_old)
            else:
                loc.hist[v] = old

    def _node_neighbours(self, loc, tree, v) -> list[int]:
        nb = []
        alive_p, n_p, _, _ = loc.parent_state(tree, v)
        if alive_p:
            nb.append(n_p)
        if tree.is_leaf(v):
            nb.extend(self.bands.get((loc.plate, v), ()))
        else:
            nb.extend(loc.N[c] for c in tree.children[v] if loc.alive[c])
        return nb

    def move_node_length(self, state: ChainState, k: int, v: int, rng, heat: float) -> None:
        """Change the intermediate length at node ``v`` and re-propose the
        histories on the adjacent edges."""
        loc, tree, params = state.loci[k], state.tree, state.params
        if not loc.alive[v]:
            return
        step = self.cfg.node_step
        nbrs = self._node_neighbours(loc, tree, v)
        n_old = loc.N[v]
        n_new = _mixture_draw(n_old, nbrs, step, rng)
        if n_new < 1:
            self._record("node_length", False)
            return
        edges = [v] + list(tree.children[v])
        _, n_p, _, _ = loc.parent_state(tree, v)
        saved = [loc.hist[w] for w in edges]
        q_rev = _mixture_logq(n_old, n_new, nbrs, step)
        q_fwd = _mixture_logq(n_new, n_old, nbrs, step)
        q_rev += history_density(loc.hist[v], True, n_p, True, loc.edge_length(tree, v), loc.end, params)
        for c in tree.children[v]:
            q_rev += history_density(loc.hist[c], True, n_old, loc.alive[c], tree.lengths[c], loc.end, params)
        ll_old = self._edges_ll(loc, tree, edges, params)
        old_key = self._leaf_key(loc, v) if tree.is_leaf(v) else None
        loc.N[v] = n_new
        ok = True
        prop = propose_history(True, n_p, True, n_new, loc.edge_length(tree, v), loc.end, params, rng)
        if prop is None:
            ok = False
        else:
            loc.hist[v] = prop[0]
            q_fwd += prop[1]
            for c in tree.children[v]:
                prop = propose_history(True, n_new, loc.alive[c], loc.N[c], tree.lengths[c], loc.end, params, rng)
                if prop is None:
                    ok = False
                    break
                loc.hist[c] = prop[0]
                q_fwd += prop[1]
        keys_ok = True
        new_key = None
        if ok and tree.is_leaf(v):
            new_key = self._leaf_key(loc, v)
            if new_key != old_key:
                if self.restricted and new_key is None and self._n_visible(loc, tree) == 0:
                    ok = False
                else:
                    keys_ok = self._apply_keys(state.counts, [old_key] if old_key else [], [new_key] if new_key else [])
        if ok:
            ll_new = self._edges_ll(loc, tree, edges, params)
            res = ProposalResult(q_fwd, q_rev, 0.0, ll_new - ll_old)
            if not keys_ok:
                res.log_prior_ratio = -math.inf
            if self._accept("node_length", res, heat, rng):
                self._commit_ll(state, k, ll_new - ll_old)
                return
            if tree.is_leaf(v) and new_key != old_key:
                self._apply_keys(state.counts, [new_key] if new_key else [], [old_key] if old_key else [])
        else:
            self._record("node_length", False)
        loc.N[v] = n_old
        for w, h in zip(edges, saved):
            loc.hist[w] = h

    def move_ancestor_length(self, state: ChainState, k: int, rng, heat: float) -> None:
        loc, tree, params = state.loci[k], state.tree, state.params
        step = self.cfg.node_step
        root = tree.root
        nbrs = [loc.N[root]] if loc.alive[root] else []
        n_old = loc.n_anc
        n_new = _mixture_draw(n_old, nbrs, step, rng)
        if n_new < 1:
            self._record("ancestor_length", False)
            return
        T = loc.anc_length
        old_h = loc.hist[root]
        q_rev = _mixture_logq(n_old, n_new, nbrs, step) + history_density(
            old_h, True, n_old, loc.alive[root], T, loc.end, params)
        ll_old = node_edge_loglik(loc, tree, root, params)
        prop = propose_history(True, n_new, loc.alive[root], loc.N[root], T, loc.end, params, rng)
        if prop is None:
            self._record("ancestor_length", False)
            return
        loc.n_anc = n_new
        loc.hist[root] = prop[0]
        ll_new = node_edge_loglik(loc, tree, root, params)
        dlp = ancestor_length_logpmf(n_new, self.prior) - ancestor_length_logpmf(n_old, self.prior)
        res = ProposalResult(_mixture_logq(n_new, n_old, nbrs, step) + prop[1], q_rev, 0.0, ll_new - ll_old,
                             log_locus_prior_ratio=dlp)
        if self._accept("ancestor_length", res, heat, rng):
            self._commit_ll(state, k, ll_new - ll_old, dlp)
        else:
            loc.n_anc = n_old
            loc.hist[root] = old_h

    def move_substitution(self, state: ChainState, k: int, v: int, rng, heat: float) -> None:
        """Gibbs update of (M, Z) at a live node from its full conditional."""
        loc, tree, params = state.loci[k], state.tree, state.params
        if not loc.alive[v]:
            return
        R = loc.end.total
        _, n_p, m_p, z_p = loc.parent_state(tree, v)
        T = loc.edge_length(tree, v)
        zk = cutter_product_given_history(loc.hist[v], T, n_p)
        with np.errstate(divide="ignore"):
            logc = np.array(mismatch_logmatrix(R, T)[m_p])[:, None] + np.log(
                np.maximum(np.array([zk[2 * z_p], zk[2 * z_p + 1]]), 0.0))[None, :]
        for c in tree.children[v]:
            if not loc.alive[c]:
                continue
            zc = cutter_product_given_history(loc.hist[c], tree.lengths[c], loc.N[v])
            logc = logc + np.array(mismatch_logmatrix(R, tree.lengths[c])[:, loc.M[c]])[:, None]
            with np.errstate(divide="ignore"):
                logc = logc + np.log(np.array([zc[loc.Z[c]], zc[2 + loc.Z[c]]]))[None, :]
        old = (loc.M[v], loc.Z[v])
        allowed = np.ones_like(logc, dtype=bool)
        if tree.is_leaf(v):
            in_window = self.prior.n_min <= loc.N[v] <= self.prior.n_max
            old_key = self._leaf_key(loc, v)
            vis_key = (loc.plate, v, loc.N[v] + self.overhead) if in_window else None
            # consistency of the two visibility outcomes
            if vis_key is not None and not self.cfg.ignore_data:
                if old_key is None:
                    ok_vis = self._apply_keys(state.counts, [], [vis_key])
                    self._apply_keys(state.counts, [vis_key], [])
                    allowed[0, 0] = ok_vis
                else:
                    ok_hidden = self._apply_keys(state.counts, [vis_key], [])
                    self._apply_keys(state.counts, [], [vis_key])
                    others = self._n_visible(loc, tree) - 1
                    if not ok_hidden or (self.restricted and others == 0):
                        allowed[:] = False
                        allowed[0, 0] = True
        with np.errstate(invalid="ignore"):
            w = np.where(allowed & np.isfinite(logc), logc, -np.inf)
        if not np.isfinite(w).any():
            self._record("substitution", False)
            return
        p = np.exp(w - logsumexp(w)).ravel()
        idx = int(rng.choice(p.size, p=p / p.sum()))
        m_new, z_new = divmod(idx, 2)
        if (m_new, z_new) == old:
            self._record("substitution", True)
            return
        edges = [v] + list(tree.children[v])
        ll_old = self._edges_ll(loc, tree, edges, params)
        if tree.is_leaf(v):
            old_key = self._leaf_key(loc, v)
        loc.M[v], loc.Z[v] = m_new, z_new
        if tree.is_leaf(v):
            new_key = self._leaf_key(loc, v)
            if new_key != old_key:
                self._apply_keys(state.counts, [old_key] if old_key else [], [new_key] if new_key else [])
        self._commit_ll(state, k, self._edges_ll(loc, tree, edges, params) - ll_old)
        self._record("substitution", True)

    def _locus_visible_below(self, loc, tree) -> list[bool]:
        lo, hi = self.prior.n_min, self.prior.n_max
        vis = [False] * tree.n_nodes
        for v in tree.postorder():
            if tree.is_leaf(v):
                vis[v] = loc.visible(v, lo, hi)
            else:
                a, b = tree.children[v]
                vis[v] = vis[a] or vis[b]
        return vis

    def move_regenerate(self, state: ChainState, k: int, rng, heat: float) -> None:
        """Redraw a marker-free subtree (edge above included) from the model."""
        loc, tree, params = state.loci[k], state.tree, state.params
        if self.cfg.ignore_data:
            targets = [tree.preorder()[int(rng.integers(tree.n_nodes))]]
        else:
            vis = self._locus_visible_below(loc, tree)
            targets = [v for v in tree.preorder()
                       if not vis[v] and (v == tree.root or vis[tree.parent[v]])]
        lo, hi = self.prior.n_min, self.prior.n_max
        for v in targets:
            nodes = _subtree(tree, v)
            saved = [(loc.hist[w], loc.alive[w], loc.N[w], loc.M[w], loc.Z[w]) for w in nodes]
            ll_old = self._edges_ll(loc, tree, nodes, params)
            if self.cfg.ignore_data:
                old_keys = {key for key in self._visible_keys(loc, tree) if key[1] in nodes}
                simulate_subtree(loc, tree, v, params, rng)
                new_keys = {key for key in self._visible_keys(loc, tree) if key[1] in nodes}
                self._apply_keys(state.counts, old_keys, new_keys)
                ll_new = self._edges_ll(loc, tree, nodes, params)
                q_fwd, q_rev = ll_new, ll_old
            else:
                # leaves are drawn conditioned on showing no band
                q_rev = simulate_hidden_subtree(loc, tree, v, params, lo, hi)
                q_fwd = simulate_hidden_subtree(loc, tree, v, params, lo, hi, rng)
                ll_new = self._edges_ll(loc, tree, nodes, params)
            res = ProposalResult(q_fwd, q_rev, 0.0, ll_new - ll_old)
            if self._accept("regenerate", res, heat, rng):
                self._commit_ll(state, k, ll_new - ll_old)
                continue
            if self.cfg.ignore_data:
                self._apply_keys(state.counts, new_keys, old_keys)
            for w, s in zip(nodes, saved):
                loc.hist[w], loc.alive[w], loc.N[w], loc.M[w], loc.Z[w] = s

    def move_end_regions(self, state: ChainState, k: int, rng, heat: float) -> None:
        loc, tree, params = state.loci[k], state.tree, state.params
        new_end = sample_end_regions(rng)
        old_end = loc.end
        if new_end == old_end:
            self._record("end_regions", True)
            return
        if any(loc.alive[v] and loc.M[v] > new_end.total for v in range(tree.n_nodes)):
            self._record("end_regions", False)
            return
        shift = new_end.r_left - old_end.r_left
        old_hist = list(loc.hist)
        q_fwd = end_region_logprior(new_end)
        q_rev = end_region_logprior(old_end)
        new_hist = list(old_hist)
        for v in tree.preorder():
            alive_p, n_p, _, _ = loc.parent_state(tree, v)
            h = old_hist[v]
            if not alive_p:
                continue
            if h.kill:
                T = loc.edge_length(tree, v)
                q_rev += eval_kill_density(h, n_p, T, old_end, params)
                h2, q = propose_kill_history(n_p, T, new_end, params, rng)
                q_fwd += q
                new_hist[v] = h2
            elif len(h):
                new_hist[v] = IndelHistory(tuple(e._replace(position=e.position + shift) for e in h.events))
        ll_old = state.locus_ll[k]
        loc.end = new_end
        loc.hist = new_hist
        ll_new = locus_loglik(loc, tree, params, check=False)
        dlp = end_region_logprior(new_end) - end_region_logprior(old_end)
        res = ProposalResult(q_fwd, q_rev, 0.0, ll_new - ll_old, log_locus_prior_ratio=dlp)
        if self._accept("end_regions", res, heat, rng):
            self._commit_ll(state, k, ll_new - ll_old, dlp)
        else:
            loc.end = old_end
            loc.hist = old_hist

    def move_ancestor_edge(self, state: ChainState, k: int, rng, heat: float) -> None:
        loc, tree, params = state.loci[k], state.tree, state.params
        root = tree.root
        T = loc.anc_length
        c = math.exp(self.cfg.root_edge_sigma * rng.standard_normal())
        h = loc.hist[root]
        ll_old = node_edge_loglik(loc, tree, root, params)
        loc.anc_length = T * c
        loc.hist[root] = h.scaled(c)
        ll_new = node_edge_loglik(loc, tree, root, params)
        dlp = exp_logpdf(T * c, self.prior.nu) - exp_logpdf(T, self.prior.nu)
        res = ProposalResult(0.0, (len(h) + 1) * math.log(c), 0.0, ll_new - ll_old, log_locus_prior_ratio=dlp)
        if self._accept("ancestor_edge", res, heat, rng):
            self._commit_ll(state, k, ll_new - ll_old, dlp)
        else:
            loc.anc_length = T
            loc.hist[root] = h

    # -- tree moves ------------------------------------------------------------------

    def move_edge_length(self, state: ChainState, v: int, rng, heat: float) -> None:
        tree, params = state.tree, state.params
        T = tree.lengths[v]
        c = math.exp(self.cfg.edge_sigma * rng.standard_normal())
        old = [loc.hist[v] for loc in state.loci]
        ll_old = [node_edge_loglik(loc, tree, v, params) for loc in state.loci]
        n_events = sum(len(h) for h in old)
        tree.lengths[v] = T * c
        for loc, h in zip(state.loci, old):
            loc.hist[v] = h.scaled(c)
        ll_new = [node_edge_loglik(loc, tree, v, params) for loc in state.loci]
        dlp = exp_logpdf(T * c, self.prior.gamma) - exp_logpdf(T, self.prior.gamma)
        res = ProposalResult(0.0, (n_events + 1) * math.log(c), dlp, sum(ll_new) - sum(ll_old))
        if self._accept("edge_length", res, heat, rng):
            for k in range(len(state.loci)):
                self._commit_ll(state, k, ll_new[k] - ll_old[k])
            state.log_prior += dlp
        else:
            tree.lengths[v] = T
            for loc, h in zip(state.loci, old):
                loc.hist[v] = h

    def _repropose_edges(self, state: ChainState, old_tree: PhyloTree, new_tree: PhyloTree,
                         edges: Sequence[int], rng):
        """Re-propose the histories on ``edges`` for every locus after a tree
        change.  Returns (new histories per locus, q_fwd, q_rev) or None."""
        params = state.params
        q_fwd = q_rev = 0.0
        new_hists = []
        for loc in state.loci:
            hs = {}
            for v in edges:
                alive_p, n_p, _, _ = loc.parent_state(old_tree, v)
                q_rev += history_density(loc.hist[v], alive_p, n_p, loc.alive[v],
                                         loc.edge_length(old_tree, v), loc.end, params)
                alive_p, n_p, _, _ = loc.parent_state(new_tree, v)
                prop = propose_history(alive_p, n_p, loc.alive[v], loc.N[v],
                                       loc.edge_length(new_tree, v), loc.end, params, rng)
                if prop is None:
                    return None
                hs[v] = prop[0]
                q_fwd += prop[1]
            new_hists.append(hs)
        return new_hists, q_fwd, q_rev

    def _tree_change(self, name: str, state: ChainState, new_tree: PhyloTree, edges: Sequence[int],
                     dlp: float, rng, heat: float) -> None:
        old_tree = state.tree
        params = state.params
        out = self._repropose_edges(state, old_tree, new_tree, edges, rng)
        if out is None:
            self._record(name, False)
            return
        new_hists, q_fwd, q_rev = out
        dll = []
        saved = []
        for loc, hs in zip(state.loci, new_hists):
            old_ll = self._edges_ll(loc, old_tree, edges, params)
            saved.append({v: loc.hist[v] for v in edges})
            for v, h in hs.items():
                loc.hist[v] = h
            dll.append(self._edges_ll(loc, new_tree, edges, params) - old_ll)
        res = ProposalResult(q_fwd, q_rev, dlp, sum(dll))
        if self._accept(name, res, heat, rng):
            state.tree = new_tree
            for k, d in enumerate(dll):
                self._commit_ll(state, k, d)
            state.log_prior += dlp
        else:
            for loc, hs in zip(state.loci, saved):
                for v, h in hs.items():
                    loc.hist[v] = h

    def move_nni(self, state: ChainState, rng, heat: float) -> None:
        """Rooted nearest-neighbour interchange: swap a child of ``v`` with
        ``v``'s sibling; node states stay, the two moved edges get new
        histories."""
        tree = state.tree
        cands = [v for v in tree.internal_nodes() if v != tree.root]
        if not cands:
            return
        v = cands[int(rng.integers(len(cands)))]
        c = tree.children[v][int(rng.integers(2))]
        s = tree.sibling(v)
        new_tree = tree.copy()
        new_tree.swap_subtrees(c, s)
        self._tree_change("topology", state, new_tree, [c, s], 0.0, rng, heat)

    def move_root(self, state: ChainState, rng, heat: float) -> None:
        """Slide the root between its two child edges."""
        tree = state.tree
        a, b = tree.children[tree.root]
        total = tree.lengths[a] + tree.lengths[b]
        x = total * rng.random()
        if not 0 < x < total:
            return
        new_tree = tree.copy()
        new_tree.lengths[a], new_tree.lengths[b] = x, total - x
        dlp = (exp_logpdf(x, self.prior.gamma) + exp_logpdf(total - x, self.prior.gamma)
               - exp_logpdf(tree.lengths[a], self.prior.gamma) - exp_logpdf(tree.lengths[b], self.prior.gamma))
        self._tree_change("root", state, new_tree, [a, b], dlp, rng, heat)

    # -- rate moves ------------------------------------------------------------------

    def _history_ll(self, state: ChainState, params: IndelParams) -> list[float]:
        tree = state.tree
        out = []
        for loc in state.loci:
            s = 0.0
            for v in tree.preorder():
                alive_p, n_p, _, _ = loc.parent_state(tree, v)
                if alive_p:
                    s += history_loglik(loc.hist[v], n_p, loc.end, loc.edge_length(tree, v), params)
            out.append(s)
        return out

    def _rate_change(self, name: str, state: ChainState, new: IndelParams, log_jac: float, rng, heat: float):
        lp_new = rate_logprior(new, self.prior)
        if not math.isfinite(lp_new):
            self._record(name, False)
            return
        dlp = lp_new - rate_logprior(state.params, self.prior)
        old_h = self._history_ll(state, state.params)
        new_h = self._history_ll(state, new)
        dll = [b - a for a, b in zip(old_h, new_h)]
        res = ProposalResult(0.0, log_jac, dlp, sum(dll))
        if self._accept(name, res, heat, rng):
            state.params = new
            for k, d in enumerate(dll):
                self._commit_ll(state, k, d)
            state.log_prior += dlp

    def _beta(self, params: IndelParams) -> float:
        return params.beta if params.beta is not None else params.lam / params.mu

    def move_mu(self, state: ChainState, rng, heat: float) -> None:
        p = state.params
        c = math.exp(self.cfg.mu_sigma * rng.standard_normal())
        new = IndelParams.from_mu_beta(p.mu * c, self._beta(p), p.r)
        self._rate_change("mu", state, new, math.log(c), rng, heat)

    @staticmethod
    def _logit_step(x: float, sigma: float, rng) -> tuple[float, float]:
        y = math.log(x / (1.0 - x)) + sigma * rng.standard_normal()
        x_new = 1.0 / (1.0 + math.exp(-y))
        if not 0 < x_new < 1:
            return x_new, -math.inf
        return x_new, math.log(x_new * (1.0 - x_new)) - math.log(x * (1.0 - x))

    def move_beta(self, state: ChainState, rng, heat: float) -> None:
        p = state.params
        b, jac = self._logit_step(self._beta(p), self.cfg.beta_sigma, rng)
        if not math.isfinite(jac):
            self._record("beta", False)
            return
        self._rate_change("beta", state, IndelParams.from_mu_beta(p.mu, b, p.r), jac, rng, heat)

    def move_r(self, state: ChainState, rng, heat: float) -> None:
        p = state.params
        r, jac = self._logit_step(p.r, self.cfg.r_sigma, rng)
        if not math.isfinite(jac):
            self._record("r", False)
            return
        self._rate_change("r", state, IndelParams.from_mu_beta(p.mu, self._beta(p), r), jac, rng, heat)

    # -- birth / death -----------------------------------------------------------------

    def _plate_loci(self, state: ChainState, plate) -> list[int]:
        return [k for k, loc in enumerate(state.loci) if loc.plate == plate]

    def _pinned_sets(self, state: ChainState, plate, exclude: int | None = None) -> list[dict]:
        sets = []
        for k in self._plate_loci(state, plate):
            if k == exclude:
                continue
            vis = state.loci[k].visible_leaves(state.tree, self.prior.n_min, self.prior.n_max)
            if vis:
                sets.append(vis)
        return sets

    def _log_q_pinned(self, S: dict, plate, n_taxa: int, sets: list[dict]) -> float:
        """Log probability of the pinned leaf map ``S`` under the birth mixture."""
        wa, wb, wc = self._mix_weights(len(sets))
        terms = []
        # (a) independent per taxon
        la = 0.0
        for i in range(n_taxa):
            opts = self.bands.get((plate, i), ())
            if not opts:
                if i in S:
                    la = -math.inf
                continue
            if i in S:
                la += math.log(0.5) + math.log(opts.count(S[i]) / len(opts)) if S[i] in opts else -math.inf
            else:
                la += math.log(0.5)
        if wa > 0:
            terms.append(math.log(wa) + la)
        # (b) union of two loci chosen with weights favouring close lengths,
        # conflicts resolved by a fair coin
        if wb > 0:
            pairs, pw = self._pair_weights(sets)
            acc = []
            for (a, b), lw in zip(pairs, pw):
                A, B = sets[a], sets[b]
                if set(S) != set(A) | set(B):
                    continue
                lp = lw
                for i in S:
                    if i in A and i in B and A[i] != B[i]:
                        if S[i] not in (A[i], B[i]):
                            lp = -math.inf
                            break
                        lp += math.log(0.5)
                    elif S[i] != (A[i] if i in A else B[i]):
                        lp = -math.inf
                        break
                acc.append(lp)
            if acc:
                terms.append(math.log(wb) + float(logsumexp(acc)))
        # (c) non-empty subset of one locus
        if wc > 0 and S:
            acc = []
            for A in sets:
                if all(i in A and A[i] == n for i, n in S.items()):
                    acc.append(-math.log(2.0 ** len(A) - 1.0))
            if acc:
                terms.append(math.log(wc) - math.log(len(sets)) + float(logsumexp(acc)))
        return float(logsumexp(terms)) if terms else -math.inf

    @staticmethod
    def _mix_weights(n_sets: int) -> tuple[float, float, float]:
        if n_sets >= 2:
            return 0.2, 0.5, 0.3
        if n_sets == 1:
            return 0.7, 0.0, 0.3
        return 1.0, 0.0, 0.0

    @staticmethod
    def _pair_weights(sets: list[dict]) -> tuple[list, np.ndarray]:
        """Unordered locus pairs and their log selection probabilities."""
        pairs = list(combinations(range(len(sets)), 2))
        w = np.array([1.0 / (1.0 + min(abs(x - y) for x in sets[a].values() for y in sets[b].values()))
                      for a, b in pairs])
        return pairs, np.log(w / w.sum())

    def _draw_pinned(self, plate, n_taxa: int, sets: list[dict], rng) -> dict:
        wa, wb, wc = self._mix_weights(len(sets))
        u = rng.random()
        if u < wa:
            S = {}
            for i in range(n_taxa):
                opts = self.bands.get((plate, i), ())
                if opts and rng.random() < 0.5:
                    S[i] = int(opts[int(rng.integers(len(opts)))])
            return S
        if u < wa + wb:
            pairs, pw = self._pair_weights(sets)
            a, b = pairs[int(rng.choice(len(pairs), p=np.exp(pw)))]
            A, B = sets[a], sets[b]
            S = dict(A)
            for i, n in B.items():
                if i in S and S[i] != n:
                    if rng.random() < 0.5:
                        S[i] = n
                else:
                    S[i] = n
            return S
        A = sets[int(rng.integers(len(sets)))]
        keys = sorted(A)
        while True:
            mask = rng.random(len(keys)) < 0.5
            if mask.any():
                return {i: A[i] for i, m in zip(keys, mask) if m}

    # pinned internal node: (copy parent, uniform over pinned targets below, step from parent)
    _PIN_W = (0.15, 0.7, 0.15)
    # ancestral length: (uniform over pinned targets, prior)
    _ANC_W = (0.8, 0.2)

    def _pinned_n_logq(self, n: int, n_parent: int, targets: list[int]) -> float:
        step = self.cfg.pinned_step
        wp, wt, ws = self._PIN_W
        q = wp * (n == n_parent)
        q += wt * sum(1 for t in targets if t == n) / len(targets)
        if 1 <= abs(n - n_parent) <= step:
            q += ws / (2 * step)
        return math.log(q) if q > 0 else -math.inf

    def _pinned_n_draw(self, n_parent: int, targets: list[int], rng) -> int:
        wp, wt, _ = self._PIN_W
        u = rng.random()
        if u < wp:
            return n_parent
        if u < wp + wt:
            return int(targets[int(rng.integers(len(targets)))])
        d = int(rng.integers(1, self.cfg.pinned_step + 1))
        return n_parent + d if rng.random() < 0.5 else n_parent - d

    def _anc_logq(self, n: int, targets: list[int]) -> float:
        if not targets:
            return ancestor_length_logpmf(n, self.prior)
        wt, wp = self._ANC_W
        lp = math.log(wp) + ancestor_length_logpmf(n, self.prior)
        c = sum(1 for t in targets if t == n)
        return float(np.logaddexp(lp, math.log(wt * c / len(targets)))) if c else lp

    _MZ_PIN = 0.9

    def _mz_logq(self, m: int, z: int, h, T: float, end: EndRegions, n_p: int, m_p: int, z_p: int) -> float:
        base = float(mismatch_logmatrix(end.total, T)[m_p, m])
        zk = cutter_product_given_history(h, T, n_p)[2 * z_p + z]
        lk = base + (math.log(zk) if zk > 0 else -math.inf)
        out = math.log(1.0 - self._MZ_PIN) + lk
        if m == 0 and z == 0:
            out = float(np.logaddexp(out, math.log(self._MZ_PIN)))
        return out

    def _birth_logq(self, loc: AugmentedLocus, tree: PhyloTree, params: IndelParams, S: dict,
                    sets: list[dict], rng=None) -> float:
        """Log density of drawing the pinned leaf map ``S`` and then building
        ``loc`` around it (see :meth:`_build_logq`)."""
        lq = self._build_logq(loc, tree, params, S, rng)
        if lq is None:
            return None
        return lq + self._log_q_pinned(S, loc.plate, tree.n_taxa, sets)

    def _build_logq(self, loc: AugmentedLocus, tree: PhyloTree, params: IndelParams, S: dict,
                    rng=None) -> float:
        """Log density of building ``loc`` so that exactly the leaves in the
        pinned map ``S`` show their bands.  With ``rng`` the locus is built in
        place (its end regions and ancestor edge length already set) and
        ``None`` is returned if construction fails."""
        cfg = self.prior
        lq = end_region_logprior(loc.end) + exp_logpdf(loc.anc_length, cfg.nu)
        mask = 0
        for i in S:
            mask |= 1 << i
        pinned = [bool(tree.leafmask[v] & mask) for v in range(tree.n_nodes)]
        building = rng is not None
        targets_all = sorted(S.values())
        if building:
            loc.n_anc = (int(targets_all[int(rng.integers(len(targets_all)))])
                         if targets_all and rng.random() < self._ANC_W[0] else sample_ancestor_length(rng, cfg))
        lq += self._anc_logq(loc.n_anc, targets_all)
        for v in tree.preorder():
            alive_p, n_p, m_p, z_p = loc.parent_state(tree, v)
            T = loc.edge_length(tree, v)
            if not pinned[v]:
                # maximal free subtree: forward simulation with hidden leaves
                if v == tree.root or pinned[tree.parent[v]]:
                    lq += simulate_hidden_subtree(loc, tree, v, params, cfg.n_min, cfg.n_max, rng)
                continue
            if tree.is_leaf(v):
                if building:
                    loc.alive[v], loc.N[v], loc.M[v], loc.Z[v] = True, S[v], 0, 0
            else:
                below = [S[i] for i in tree.leaves_below(v) if i in S]
                if building:
                    n = self._pinned_n_draw(n_p, below, rng)
                    if n < 1:
                        return None
                    loc.alive[v], loc.N[v] = True, n
                lq += self._pinned_n_logq(loc.N[v], n_p, below)
            if building:
                prop = propose_nokill_history(n_p, loc.N[v], T, loc.end, params, rng)
                if prop is None:
                    return None
                loc.hist[v] = prop[0]
                lq += prop[1]
            else:
                lq += eval_nokill_density(loc.hist[v], n_p, T, loc.end, params)
            if not tree.is_leaf(v):
                if building:
                    if rng.random() < self._MZ_PIN:
                        loc.M[v], loc.Z[v] = 0, 0
                    else:
                        loc.M[v], loc.Z[v] = sample_child_state(loc.hist[v], m_p, z_p, T, loc.end, n_p, rng)
                    if loc.M[v] > loc.end.total:
                        return None
                lq += self._mz_logq(loc.M[v], loc.Z[v], loc.hist[v], T, loc.end, n_p, m_p, z_p)
        return lq

    def _birth_from_prior(self, state: ChainState, plate, rng) -> AugmentedLocus:
        from .simulate import simulate_locus

        loc = simulate_locus(state.tree, self.prior, state.params, rng, plate)
        return loc

    def move_birth_death(self, state: ChainState, plate, rng, heat: float) -> None:
        if rng.random() < 0.5:
            self.move_birth(state, plate, rng, heat)
        else:
            self.move_death(state, plate, rng, heat)

    def _k_prior(self, k: int, plate) -> float:
        return loci_count_logpmf(k, self.prior, self.n_markers.get(plate))

    def move_birth(self, state: ChainState, plate, rng, heat: float) -> None:
        tree, params = state.tree, state.params
        idx = self._plate_loci(state, plate)
        K = len(idx)
        dk = self._k_prior(K + 1, plate) - self._k_prior(K, plate)
        if not math.isfinite(dk):
            self._record("birth", False)
            return
        if self.cfg.ignore_data:
            loc = self._birth_from_prior(state, plate, rng)
            ll = locus_loglik(loc, tree, params, check=False)
            lp = locus_logprior(loc, self.prior)
            q_fwd = ll + lp
        else:
            sets = self._pinned_sets(state, plate)
            S = self._draw_pinned(plate, tree.n_taxa, sets, rng)
            if not S and self.restricted:
                self._record("birth", False)
                return
            size = tree.n_nodes
            loc = AugmentedLocus(sample_end_regions(rng), 1, float(rng.exponential(self.prior.nu)),
                                 [EMPTY_HISTORY] * size, [True] * size, [-1] * size, [0] * size,
                                 [0] * size, plate)
            q_fwd = self._birth_logq(loc, tree, params, S, sets, rng)
            if q_fwd is None:
                self._record("birth", False)
                return
            vis = loc.visible_leaves(tree, self.prior.n_min, self.prior.n_max)
            if vis != S:
                self._record("birth", False)
                return
            ll = locus_loglik(loc, tree, params, check=False)
            lp = locus_logprior(loc, self.prior)
        q_rev = 0.0  # the 1/(K+1) insertion and deletion choices cancel
        keys = self._visible_keys(loc, tree)
        ok = self._apply_keys(state.counts, [], keys)
        res = ProposalResult(q_fwd, q_rev, dk, ll, log_locus_prior_ratio=lp)
        if ok and self._accept("birth", res, heat, rng):
            pos = int(rng.integers(len(state.loci) + 1))
            state.loci.insert(pos, loc)
            state.locus_ll.insert(pos, ll)
            state.log_lik += ll
            state.log_prior += dk + lp
            return
        if not ok:
            self._record("birth", False)
        self._apply_keys(state.counts, keys, [])

    def move_death(self, state: ChainState, plate, rng, heat: float) -> None:
        tree, params = state.tree, state.params
        idx = self._plate_loci(state, plate)
        K = len(idx)
        if K == 0:
            self._record("death", False)
            return
        dk = self._k_prior(K - 1, plate) - self._k_prior(K, plate)
        if not math.isfinite(dk):
            self._record("death", False)
            return
        j = idx[int(rng.integers(K))]
        loc = state.loci[j]
        keys = self._visible_keys(loc, tree)
        ll = state.locus_ll[j]
        lp = locus_logprior(loc, self.prior)
        if self.cfg.ignore_data:
            q_birth = ll + lp
        else:
            sets = self._pinned_sets(state, plate, exclude=j)
            S = loc.visible_leaves(tree, self.prior.n_min, self.prior.n_max)
            q_birth = self._birth_logq(loc, tree, params, S, sets)
        ok = self._apply_keys(state.counts, keys, [])
        # index choice 1/K in death cancels the 1/K insertion slot of the birth
        res = ProposalResult(0.0, q_birth, dk, -ll, log_locus_prior_ratio=-lp)
        if ok and self._accept("death", res, heat, rng):
            del state.loci[j]
            del state.locus_ll[j]
            state.log_lik -= ll
            state.log_prior += dk - lp
            return
        if not ok:
            self._record("death", False)
        self._apply_keys(state.counts, [], keys)

    # -- merge / split -------------------------------------------------------------------
    #
    # A merge replaces two band-producing loci of one plate whose bands sit in
    # disjoint taxa by one locus producing all of their bands; a split is the
    # reverse.  Both leave the band counts unchanged.

    def _new_locus(self, plate, tree: PhyloTree, params: IndelParams, S: dict, rng):
        size = tree.n_nodes
        loc = AugmentedLocus(sample_end_regions(rng), 1, float(rng.exponential(self.prior.nu)),
                             [EMPTY_HISTORY] * size, [True] * size, [-1] * size, [0] * size,
                             [0] * size, plate)
        if self._build_logq(loc, tree, params, S, rng) is None:
            return None
        if loc.visible_leaves(tree, self.prior.n_min, self.prior.n_max) != S:
            return None
        return loc

    @staticmethod
    def _mergeable(A: dict, B: dict) -> bool:
        return not set(A) & set(B)

    def _merge_pair_logq(self, sets: list[dict], a: int, b: int) -> float:
        """Log probability of picking the unordered pair (a, b) among the
        mergeable pairs of ``sets``, favouring close marker lengths."""
        pairs, pw = self._pair_weights(sets)
        lw = {pr: w for pr, w in zip(pairs, pw) if self._mergeable(sets[pr[0]], sets[pr[1]])}
        key = (min(a, b), max(a, b))
        if key not in lw:
            return -math.inf
        return float(lw[key] - logsumexp(list(lw.values())))

    def _merge_pair_draw(self, sets: list[dict], rng) -> tuple[int, int] | None:
        pairs, pw = self._pair_weights(sets)
        ok = [(pr, w) for pr, w in zip(pairs, pw) if self._mergeable(sets[pr[0]], sets[pr[1]])]
        if not ok:
            return None
        w = np.exp(np.array([x for _, x in ok]) - logsumexp([x for _, x in ok]))
        return ok[int(rng.choice(len(ok), p=w / w.sum()))][0]

    @staticmethod
    def _split_logq(S: dict, part: dict) -> float:
        """Log probability of splitting ``S`` into ``part`` and its complement
        (unordered): half the time by distinct marker lengths, otherwise by a
        uniform bipartition of taxa."""
        t = len(S)
        if t < 2 or not part or len(part) == t:
            return -math.inf
        q = 0.5 / (2.0 ** (t - 1) - 1.0)
        lengths = set(S.values())
        d = len(lengths)
        inside = set(part.values())
        outside = {n for i, n in S.items() if i not in part}
        if d >= 2:
            if not inside & outside:
                q += 0.5 / (2.0 ** (d - 1) - 1.0)
        else:
            q *= 2.0
        return math.log(q)

    @staticmethod
    def _split_draw(S: dict, rng) -> dict:
        keys = sorted(S)
        lengths = sorted(set(S.values()))
        by_length = len(lengths) >= 2 and rng.random() < 0.5
        while True:
            if by_length:
                pick = {n for n, m in zip(lengths, rng.random(len(lengths)) < 0.5) if m}
                part = {i: S[i] for i in keys if S[i] in pick}
            else:
                part = {i: S[i] for i, m in zip(keys, rng.random(len(keys)) < 0.5) if m}
            if part and len(part) < len(S):
                return part

    def merge_log_terms(self, tree: PhyloTree, params: IndelParams, plate, k_big: int,
                        other_sets: list[dict], A: AugmentedLocus, B: AugmentedLocus,
                        C: AugmentedLocus) -> tuple[float, float]:
        """(tempered, untempered) log MH ratio for merging ``A`` and ``B`` into
        ``C``.  ``k_big`` is the plate's locus count before the merge and
        ``other_sets`` the pinned maps of the plate's other visible loci.  The
        split of ``C`` into ``A`` and ``B`` has the negated ratio."""
        lo, hi = self.prior.n_min, self.prior.n_max
        SA, SB = A.visible_leaves(tree, lo, hi), B.visible_leaves(tree, lo, hi)
        SC = C.visible_leaves(tree, lo, hi)
        dk = self._k_prior(k_big - 1, plate) - self._k_prior(k_big, plate)
        sets_big = list(other_sets) + [SA, SB]
        n = len(sets_big)
        fwd = self._merge_pair_logq(sets_big, n - 2, n - 1) + self._build_logq(C, tree, params, SC)
        rev = (-math.log(len(other_sets) + 1) + self._split_logq(SC, SA)
               + self._build_logq(A, tree, params, SA) + self._build_logq(B, tree, params, SB))
        target = sum(locus_loglik(x, tree, params, check=False) * s + locus_logprior(x, self.prior) * s
                     for x, s in ((C, 1), (A, -1), (B, -1)))
        # insertion slots: 1/K for the merged locus, 1/((K-1)K) for the split pair
        return dk, target - math.log(k_big - 1) + rev - fwd

    def move_merge(self, state: ChainState, plate, rng, heat: float) -> None:
        tree, params = state.tree, state.params
        idx = [k for k in self._plate_loci(state, plate)
               if state.loci[k].visible_leaves(tree, self.prior.n_min, self.prior.n_max)]
        if len(idx) < 2:
            self._record("merge", False)
            return
        sets = [state.loci[k].visible_leaves(tree, self.prior.n_min, self.prior.n_max) for k in idx]
        pair = self._merge_pair_draw(sets, rng)
        if pair is None:
            self._record("merge", False)
            return
        a, b = pair
        S = dict(sets[a])
        S.update(sets[b])
        C = self._new_locus(plate, tree, params, S, rng)
        if C is None:
            self._record("merge", False)
            return
        ka, kb = idx[a], idx[b]
        A, B = state.loci[ka], state.loci[kb]
        others = [s for j, s in enumerate(sets) if j not in (a, b)]
        K = len(self._plate_loci(state, plate))
        dk, rest = self.merge_log_terms(tree, params, plate, K, others, A, B, C)
        self._merge_commit("merge", state, [ka, kb], [C], dk, rest, heat, rng)

    def move_split(self, state: ChainState, plate, rng, heat: float) -> None:
        tree, params = state.tree, state.params
        lo, hi = self.prior.n_min, self.prior.n_max
        idx = [k for k in self._plate_loci(state, plate) if state.loci[k].visible_leaves(tree, lo, hi)]
        if not idx:
            self._record("split", False)
            return
        j = int(rng.integers(len(idx)))
        kc = idx[j]
        C = state.loci[kc]
        S = C.visible_leaves(tree, lo, hi)
        if len(S) < 2:
            self._record("split", False)
            return
        SA = self._split_draw(S, rng)
        SB = {i: n for i, n in S.items() if i not in SA}
        A = self._new_locus(plate, tree, params, SA, rng)
        B = self._new_locus(plate, tree, params, SB, rng) if A is not None else None
        if B is None:
            self._record("split", False)
            return
        others = [state.loci[k].visible_leaves(tree, lo, hi) for k in idx if k != kc]
        K = len(self._plate_loci(state, plate))
        dk, rest = self.merge_log_terms(tree, params, plate, K + 1, others, A, B, C)
        self._merge_commit("split", state, [kc], [A, B], -dk, -rest, heat, rng)

    def _merge_commit(self, name: str, state: ChainState, remove: list[int], add: list,
                      dk: float, rest: float, heat: float, rng) -> None:
        tree = state.tree
        old_keys = [key for k in remove for key in self._visible_keys(state.loci[k], tree)]
        new_keys = [key for loc in add for key in self._visible_keys(loc, tree)]
        ok = self._apply_keys(state.counts, old_keys, new_keys)
        res = ProposalResult(0.0, 0.0, dk, 0.0, log_locus_prior_ratio=rest)
        if ok and self._accept(name, res, heat, rng):
            for k in sorted(remove, reverse=True):
                state.log_lik -= state.locus_ll[k]
                del state.loci[k]
                del state.locus_ll[k]
            for loc in add:
                ll = locus_loglik(loc, tree, state.params, check=False)
                pos = int(rng.integers(len(state.loci) + 1))
                state.loci.insert(pos, loc)
                state.locus_ll.insert(pos, ll)
                state.log_lik += ll
            state.log_prior = self.log_prior(state)
            return
        if not ok:
            self._record(name, False)
        self._apply_keys(state.counts, new_keys, old_keys)

    def acceptance_rates(self) -> dict:
        return {k: (a / n if n else math.nan) for k, (n, a) in sorted(self.stats.items())}


def sweep(state: ChainState, X: MarkerMatrix, cfg: Mc3Config, rng: np.random.Generator,
          prior_cfg: PriorConfig = PriorConfig(), heat: float = 1.0) -> ChainState:
    """One deterministic scan of all updates (convenience wrapper)."""
    return Sampler(X, cfg, prior_cfg).sweep(state, rng, heat)


# ---------------------------------------------------------------------------
# Metropolis-coupled runs


@dataclass
class Mc3Result:
    trace: list  # dicts, one per retained sample
    trees: list  # PhyloTree per retained sample
    homology: list  # per sample: list of (plate, [(taxon, marker length), ...]) per locus
    swap_stats: dict
    acceptance: dict
    final_states: list


def _sample_row(it: int, state: ChainState) -> dict:
    row = {"iteration": it, "log_likelihood": state.log_lik, "log_prior": state.log_prior,
           "lambda": state.params.lam, "mu": state.params.mu, "r": state.params.r}
    for p, k in state.k_per_plate().items():
        row[f"K_{p}"] = k
    row["tree"] = state.tree.newick()
    return row


def _homology_sample(state: ChainState, sampler: Sampler) -> list:
    out = []
    for loc in state.loci:
        vis = loc.visible_leaves(state.tree, sampler.prior.n_min, sampler.prior.n_max)
        if vis:
            out.append((loc.plate, sorted((i, n + sampler.overhead) for i, n in vis.items())))
    return out


def swap_log_ratio(heat_i: float, heat_j: float, post_i: float, post_j: float) -> float:
    """Log acceptance ratio for exchanging the states of chains i and j, given
    the tempered parts of their log targets."""
    return (heat_i - heat_j) * (post_j - post_i)


def run_mc3(X: MarkerMatrix, cfg: Mc3Config, prior_cfg: PriorConfig = PriorConfig(),
            tree: PhyloTree | None = None, params: IndelParams | None = None,
            checkpoint: str | Path | None = None, resume: str | Path | None = None,
            callback: Callable | None = None) -> Mc3Result:
    """Run ``cfg.n_chains`` coupled chains; samples come from the cold chain."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains + 1)
    rngs = [np.random.default_rng(s) for s in seeds[:-1]]
    swap_rng = np.random.default_rng(seeds[-1])
    samplers = [Sampler(X, cfg, prior_cfg) for _ in range(cfg.n_chains)]
    start = 0
    trace, trees, homology = [], [], []
    swaps = {"proposed": 0, "accepted": 0}
    if resume is not None:
        blob = load_checkpoint(resume)
        states = blob["states"]
        for g, st in zip(rngs, blob["rng_states"]):
            g.bit_generator.state = st
        swap_rng.bit_generator.state = blob["swap_rng"]
        start = blob["iteration"]
        trace, trees, homology = blob["trace"], blob["trees"], blob["homology"]
        swaps = blob["swaps"]
    else:
        init_rng = np.random.default_rng(seeds[0].spawn(1)[0])
        if tree is None:
            tree = PhyloTree.random(X.taxa, init_rng, prior_cfg.gamma)
        if params is None:
            params = IndelParams.from_mu_beta(prior_cfg.mu_shape / prior_cfg.mu_rate,
                                              prior_cfg.beta_a / (prior_cfg.beta_a + prior_cfg.beta_b), 0.5)
        states = [samplers[i].initial_state(tree.copy(), params, rngs[i]) for i in range(cfg.n_chains)]
        trace.append(_sample_row(0, states[0]))
        trees.append(states[0].tree.copy())
        homology.append(_homology_sample(states[0], samplers[0]))
    heats = cfg.heats
    for it in range(start + 1, cfg.iterations + 1):
        for i in range(cfg.n_chains):
            try:
                samplers[i].sweep(states[i], rngs[i], heats[i])
            except (FloatingPointError, ValueError, ZeroDivisionError) as exc:
                log.error("numeric failure in chain %d at iteration %d: %s", i, it, exc)
                raise NumericFailure(f"chain {i}, iteration {it}: {exc}") from exc
        if cfg.n_chains > 1 and it % cfg.swap_interval == 0:
            i = int(swap_rng.integers(cfg.n_chains - 1))
            j = i + 1
            la = swap_log_ratio(heats[i], heats[j], samplers[i].tempered_log_prior(states[i]),
                                samplers[j].tempered_log_prior(states[j]))
            swaps["proposed"] += 1
            if la >= 0 or swap_rng.random() < math.exp(la):
                states[i], states[j] = states[j], states[i]
                swaps["accepted"] += 1
        if cfg.check_interval and it % cfg.check_interval == 0:
            for i in range(cfg.n_chains):
                samplers[i].verify_cache(states[i])
        if it % cfg.thin == 0:
            trace.append(_sample_row(it, states[0]))
            trees.append(states[0].tree.copy())
            homology.append(_homology_sample(states[0], samplers[0]))
            if callback is not None:
                callback(it, states[0])
        if checkpoint is not None and ((cfg.check_interval and it % cfg.check_interval == 0)
                                       or it == cfg.iterations):
            save_checkpoint(checkpoint, {"states": states, "rng_states": [g.bit_generator.state for g in rngs],
                                         "swap_rng": swap_rng.bit_generator.state, "iteration": it,
                                         "trace": trace, "trees": trees, "homology": homology, "swaps": swaps})
    acc = defaultdict(lambda: [0, 0])
    for s in samplers:
        for k, (n, a) in s.stats.items():
            acc[k][0] += n
            acc[k][1] += a
    acceptance = {k: (a / n if n else math.nan) for k, (n, a) in sorted(acc.items())}
    return Mc3Result(trace, trees, homology, swaps, acceptance, states)


def save_checkpoint(path, blob: dict) -> None:
    blob = dict(blob, version=CHECKPOINT_VERSION)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(blob, fh, protocol=pickle.HIGHEST_PROTOCOL)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    return blob


def gelman_rubin(traces) -> float:
    """Potential scale reduction factor of equal-length scalar chains."""
    x = np.asarray(traces, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 10:
        raise ValueError("need at least two chains of length >= 10")
    m, n = x.shape
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else math.inf
    var_hat = (n - 1) / n * W + B / n
    return float(math.sqrt(var_hat / W))
