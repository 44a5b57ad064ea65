"""Augmented-data likelihood of indel and substitution histories."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .kernels import cutter_product_given_history, mismatch_logmatrix
from .model import (
    DEFAULT_SCHEME,
    EndRegions,
    EnzymeScheme,
    IndelHistory,
    IndelParams,
    LocusAssignment,
    MarkerMatrix,
    EMPTY_HISTORY,
)
from .tree import PhyloTree

N_MIN = 11
N_MAX = 586


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def history_loglik(h: IndelHistory, n0: int, end: EndRegions, T: float, params: IndelParams) -> float:
    """Log-likelihood of the indel history ``h`` on an edge of length ``T``
    starting from intermediate length ``n0``."""
    lam, mu, r = params.lam, params.mu, params.r
    R = end.total
    base = (R - 1) * lam + R * mu + mu * (1.0 - r) / r
    per_base = lam + mu
    log_lam, log_mu = _log(lam), _log(mu)
    log_r = math.log(r)
    log_q = math.log1p(-r) if r < 1.0 else -math.inf
    ll = 0.0
    t_prev = 0.0
    n = n0
    for e in h.events:
        if e.time >= T:
            raise ValueError("event time beyond edge length")
        ll -= (base + n * per_base) * (e.time - t_prev)
        ll += log_lam if e.kind.sign > 0 else log_mu
        ll += log_r + ((e.length - 1) * log_q if e.length > 1 else 0.0)
        if e.kind.killing:
            return ll
        n += e.kind.sign * e.length
        if n < 1:
            raise ValueError("history replay empties the intermediate region")
        t_prev = e.time
    return ll - (base + n * per_base) * (T - t_prev)


def substitution_loglik(h: IndelHistory, mz_parent: tuple[int, int], mz_child: tuple[int, int],
                        T: float, end: EndRegions, n_parent: int) -> float:
    """Mismatch and cutter transition terms on an unkilled edge."""
    lm = mismatch_logmatrix(end.total, T)[mz_parent[0], mz_child[0]]
    z = cutter_product_given_history(h, T, n_parent)
    return float(lm) + _log(z[2 * mz_parent[1] + mz_child[1]])


def edge_loglik(h: IndelHistory, mz_parent: tuple[int, int], mz_child: tuple[int, int] | None,
                T: float, end: EndRegions, n_parent: int, params: IndelParams) -> float:
    """Joint log-likelihood of the indel history and the child's (M, Z)."""
    ll = history_loglik(h, n_parent, end, T, params)
    if h.kill:
        return ll
    return ll + substitution_loglik(h, mz_parent, mz_child, T, end, n_parent)


@dataclass
class AugmentedLocus:
    """Latent evolutionary history of one locus on a fixed tree.

    Per-node lists are indexed by tree node; ``hist[v]`` is the history on
    the edge above ``v`` (for the root, the locus-specific ancestor edge).
    Dead nodes (below a killing event) carry ``N = M = Z = -1`` and an empty
    history.
    """

    end: EndRegions
    n_anc: int
    anc_length: float
    hist: list
    alive: list
    N: list
    M: list
    Z: list
    plate: object = 0

    def copy(self) -> "AugmentedLocus":
        return AugmentedLocus(self.end, self.n_anc, self.anc_length, list(self.hist), list(self.alive),
                              list(self.N), list(self.M), list(self.Z), self.plate)

    def parent_state(self, tree: PhyloTree, v: int) -> tuple[bool, int, int, int]:
        """(alive, N, M, Z) at the parent end of the edge above ``v``."""
        if v == tree.root:
            return True, self.n_anc, 0, 0
        p = tree.parent[v]
        return self.alive[p], self.N[p], self.M[p], self.Z[p]

    def edge_length(self, tree: PhyloTree, v: int) -> float:
        return self.anc_length if v == tree.root else tree.lengths[v]

    def visible(self, v: int, n_min: int = N_MIN, n_max: int = N_MAX) -> bool:
        return self.alive[v] and self.M[v] == 0 and self.Z[v] == 0 and n_min <= self.N[v] <= n_max

    def visible_leaves(self, tree: PhyloTree, n_min: int = N_MIN, n_max: int = N_MAX) -> dict[int, int]:
        """``{taxon index: intermediate length}`` of leaves showing a band."""
        return {i: self.N[i] for i in range(tree.n_taxa) if self.visible(i, n_min, n_max)}

    def check(self, tree: PhyloTree) -> None:
        """Raise ``ValueError`` if histories and node states disagree."""
        for v in tree.preorder():
            alive_p, n_p, _, _ = self.parent_state(tree, v)
            h = self.hist[v]
            if not alive_p:
                if self.alive[v] or len(h):
                    raise ValueError(f"node {v} below a kill must be dead with an empty history")
                continue
            h.validate(n_p, self.end, self.edge_length(tree, v))
            if h.kill:
                if self.alive[v]:
                    raise ValueError(f"killed edge above live node {v}")
                continue
            if not self.alive[v]:
                raise ValueError(f"node {v} dead without a kill")
            if h.final_length(n_p) != self.N[v]:
                raise ValueError(f"history on edge {v} does not end at N={self.N[v]}")
            if not (0 <= self.M[v] <= self.end.total and self.Z[v] in (0, 1)):
                raise ValueError(f"invalid substitution state at node {v}")


def replay_lengths(locus: AugmentedLocus, tree: PhyloTree) -> list:
    """Intermediate lengths recomputed from ``n_anc`` and the histories."""
    out = [-1] * tree.n_nodes
    for v in tree.preorder():
        alive_p = True if v == tree.root else out[tree.parent[v]] >= 0
        n_p = locus.n_anc if v == tree.root else out[tree.parent[v]]
        if alive_p and not locus.hist[v].kill:
            out[v] = locus.hist[v].final_length(n_p)
    return out


def node_edge_loglik(locus: AugmentedLocus, tree: PhyloTree, v: int, params: IndelParams) -> float:
    alive_p, n_p, m_p, z_p = locus.parent_state(tree, v)
    if not alive_p:
        return 0.0
    return edge_loglik(locus.hist[v], (m_p, z_p), (locus.M[v], locus.Z[v]),
                       locus.edge_length(tree, v), locus.end, n_p, params)


def locus_loglik(locus: AugmentedLocus, tree: PhyloTree, params: IndelParams, check: bool = True) -> float:
    """Sum of edge log-likelihoods over the 2T - 1 edges of one locus."""
    if check:
        locus.check(tree)
    return sum(node_edge_loglik(locus, tree, v, params) for v in tree.preorder())


def tree_loglik(loci: Iterable[AugmentedLocus], tree: PhyloTree, params: IndelParams, check: bool = True) -> float:
    return float(sum(locus_loglik(loc, tree, params, check) for loc in loci))


# ---------------------------------------------------------------------------
# Y <-> X


def assignment_from_loci(loci: Sequence[AugmentedLocus], tree: PhyloTree,
                         n_min: int = N_MIN, n_max: int = N_MAX) -> LocusAssignment:
    K, T = len(loci), tree.n_taxa
    values = np.zeros((K, T), dtype=int)
    lengths = np.full((K, T), -1, dtype=int)
    for k, loc in enumerate(loci):
        for i in range(T):
            if not loc.alive[i]:
                values[k, i] = -1
            else:
                values[k, i] = 1 if loc.visible(i, n_min, n_max) else 0
                lengths[k, i] = loc.N[i]
    return LocusAssignment(values, lengths, np.array([loc.plate for loc in loci], dtype=object))


def derive_observed(Y: LocusAssignment, taxa: Sequence[str], scheme: EnzymeScheme = DEFAULT_SCHEME) -> MarkerMatrix:
    """Bands produced by an assignment; loci producing the same length in the
    same taxon collapse to one band."""
    if Y.values.shape[1] != len(taxa):
        raise ValueError("assignment and taxon list disagree")
    bands = set()
    for k in range(Y.n_loci):
        for i in np.flatnonzero(Y.values[k] == 1).tolist():
            bands.add((Y.plates[k], i, int(Y.lengths[k, i]) + scheme.primer_overhead))
    return MarkerMatrix.from_band_set(taxa, bands)


def is_consistent(Y: LocusAssignment, X: MarkerMatrix, scheme: EnzymeScheme = DEFAULT_SCHEME) -> bool:
    return derive_observed(Y, X.taxa, scheme).same_bands(X)


def empty_locus(tree: PhyloTree, end: EndRegions, n: int, anc_length: float, plate=0) -> AugmentedLocus:
    """A locus with no indels and no substitutions anywhere."""
    size = tree.n_nodes
    return AugmentedLocus(end, n, anc_length, [EMPTY_HISTORY] * size, [True] * size,
                          [n] * size, [0] * size, [0] * size, plate)
