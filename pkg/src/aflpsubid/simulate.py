"""Forward simulation under the Sub-ID model and at the sequence level."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .kernels import cutter_product_given_history, mismatch_logmatrix
from .likelihood import AugmentedLocus, N_MAX, N_MIN, assignment_from_loci, derive_observed
from .model import (
    EMPTY_HISTORY,
    EndRegions,
    EventKind,
    IndelEvent,
    IndelHistory,
    IndelParams,
    LocusAssignment,
    MarkerMatrix,
    classify_event,
)
from .priors import PriorConfig, sample_ancestor_length, sample_end_regions
from .tree import PhyloTree


def sample_model_event(end: EndRegions, n: int, params: IndelParams, rng: np.random.Generator,
                       total: float) -> tuple[EventKind, int, int]:
    """Draw (kind, position, length) of the next event given that one occurs."""
    lam, mu, r = params.lam, params.mu, params.r
    rl, R = end.r_left, end.total
    u = rng.random() * total
    if u < (n + 1) * lam:
        return EventKind.INS_INTERMEDIATE, rl + int(rng.integers(n + 1)), int(rng.geometric(r))
    u -= (n + 1) * lam
    if u < (R - 2) * lam:
        j = int(rng.integers(R - 2))
        s = 1 + j if j < rl - 1 else rl + n + 1 + (j - (rl - 1))
        return EventKind.INS_END, s, int(rng.geometric(r))
    u -= (R - 2) * lam
    if u < n * mu:
        s = rl + int(rng.integers(n))
        length = int(rng.geometric(r))
        return classify_event(-1, s, length, end, n), s, length
    u -= n * mu
    if u < R * mu:
        j = int(rng.integers(R))
        s = j if j < rl else rl + n + (j - rl)
        return EventKind.DEL_IN_END, s, int(rng.geometric(r))
    i = int(rng.geometric(r))
    return EventKind.DEL_FROM_BEFORE, -i, i + int(rng.geometric(r))


def _event_rate(end: EndRegions, n: int, params: IndelParams) -> float:
    R = end.total
    return (R + n - 1) * params.lam + (R + n) * params.mu + params.mu * (1.0 - params.r) / params.r


def simulate_edge_history(n0: int, end: EndRegions, T: float, params: IndelParams,
                          rng: np.random.Generator) -> IndelHistory:
    """Exact (Gillespie) simulation of the indel events on one edge; stops at
    the first killing event or at time ``T``."""
    if n0 < 1:
        raise ValueError("intermediate length must be >= 1")
    t, n = 0.0, n0
    events = []
    while True:
        eta = _event_rate(end, n, params)
        if eta <= 0:
            break
        t += rng.exponential(1.0 / eta)
        if t >= T:
            break
        kind, s, length = sample_model_event(end, n, params, rng, eta)
        events.append(IndelEvent(t, kind, s, length))
        if kind.killing:
            break
        n += kind.sign * length
    return IndelHistory(tuple(events))


def sample_child_state(h: IndelHistory, m_parent: int, z_parent: int, T: float, end: EndRegions,
                       n_parent: int, rng: np.random.Generator) -> tuple[int, int]:
    row = np.exp(mismatch_logmatrix(end.total, T)[m_parent])
    m = int(rng.choice(len(row), p=row / row.sum()))
    zk = cutter_product_given_history(h, T, n_parent)
    p1 = zk[2 * z_parent + 1]
    z = 1 if rng.random() < p1 else 0
    return m, z


def simulate_subtree(locus: AugmentedLocus, tree: PhyloTree, v: int, params: IndelParams,
                     rng: np.random.Generator) -> None:
    """Overwrite the edge above ``v`` and everything below it with a forward
    draw from the model, conditional on the state at ``v``'s parent."""
    for w in _subtree_preorder(tree, v):
        alive_p, n_p, m_p, z_p = locus.parent_state(tree, w)
        if not alive_p:
            locus.hist[w] = EMPTY_HISTORY
            locus.alive[w] = False
            locus.N[w] = locus.M[w] = locus.Z[w] = -1
            continue
        T = locus.edge_length(tree, w)
        h = simulate_edge_history(n_p, locus.end, T, params, rng)
        locus.hist[w] = h
        if h.kill:
            locus.alive[w] = False
            locus.N[w] = locus.M[w] = locus.Z[w] = -1
            continue
        locus.alive[w] = True
        locus.N[w] = h.final_length(n_p)
        locus.M[w], locus.Z[w] = sample_child_state(h, m_p, z_p, T, locus.end, n_p, rng)


def _subtree_preorder(tree: PhyloTree, v: int) -> list[int]:
    out, stack = [], [v]
    while stack:
        w = stack.pop()
        out.append(w)
        stack.extend(reversed(tree.children[w]))
    return out


def simulate_locus(tree: PhyloTree, cfg: PriorConfig, params: IndelParams, rng: np.random.Generator,
                   plate=0) -> AugmentedLocus:
    end = sample_end_regions(rng)
    n_anc = sample_ancestor_length(rng, cfg)
    size = tree.n_nodes
    locus = AugmentedLocus(end, n_anc, float(rng.exponential(cfg.nu)), [EMPTY_HISTORY] * size,
                           [True] * size, [0] * size, [0] * size, [0] * size, plate)
    simulate_subtree(locus, tree, tree.root, params, rng)
    return locus


def simulate_dataset(tree: PhyloTree, cfg: PriorConfig, params: IndelParams, n_loci: int,
                     rng: np.random.Generator, plate=0,
                     producing_only: bool = False) -> tuple[LocusAssignment, MarkerMatrix, list[AugmentedLocus]]:
    """Simulate ``n_loci`` loci down ``tree`` and return (Y, X, loci).

    With ``producing_only`` loci are redrawn until each shows at least one
    band (the restricted-model view of the data).
    """
    loci = []
    while len(loci) < n_loci:
        loc = simulate_locus(tree, cfg, params, rng, plate)
        if producing_only and not loc.visible_leaves(tree, cfg.n_min, cfg.n_max):
            continue
        loci.append(loc)
    Y = assignment_from_loci(loci, tree, cfg.n_min, cfg.n_max)
    return Y, derive_observed(Y, tree.taxa), loci


# ---------------------------------------------------------------------------
# sequence level

BASES = "ACGT"
_PURINES = {0, 2}


@dataclass
class SeqSimConfig:
    """Sequence evolution settings.

    ``model`` is ``"JC"`` or ``"TN"``; the TN rates are for transversions and
    the two kinds of transitions, scaled so that the mean substitution rate
    under ``base_freqs`` is 1.  ``gamma_shape`` of ``None`` means equal rates.
    """

    params: IndelParams
    model: str = "JC"
    base_freqs: Sequence[float] = (0.25, 0.25, 0.25, 0.25)
    transversion: float = 1.0
    purine_transition: float = 1.0
    pyrimidine_transition: float = 1.0
    gamma_shape: float | None = None

    def __post_init__(self):
        f = np.asarray(self.base_freqs, dtype=float)
        if f.shape != (4,) or (f <= 0).any() or abs(f.sum() - 1) > 1e-9:
            raise ValueError("base frequencies must be four positive numbers summing to 1")
        if self.gamma_shape is not None and self.gamma_shape <= 0:
            raise ValueError("gamma shape must be positive")
        if self.model not in ("JC", "TN"):
            raise ValueError(f"unknown substitution model {self.model!r}")

    def rate_matrix(self) -> np.ndarray:
        if self.model == "JC":
            pi = np.full(4, 0.25)
            Q = np.full((4, 4), 1.0)
        else:
            pi = np.asarray(self.base_freqs, dtype=float)
            Q = np.full((4, 4), self.transversion)
            Q[0, 2] = Q[2, 0] = self.purine_transition  # A <-> G
            Q[1, 3] = Q[3, 1] = self.pyrimidine_transition  # C <-> T
        Q = Q * pi[None, :]
        np.fill_diagonal(Q, 0.0)
        np.fill_diagonal(Q, -Q.sum(axis=1))
        return Q / -(pi * np.diag(Q)).sum()

    def stationary(self) -> np.ndarray:
        return np.full(4, 0.25) if self.model == "JC" else np.asarray(self.base_freqs, dtype=float)


class _Substituter:
    def __init__(self, cfg: SeqSimConfig):
        Q = cfg.rate_matrix()
        pi = cfg.stationary()
        # symmetrize for a stable eigendecomposition of a reversible Q
        d = np.sqrt(pi)
        S = (d[:, None] * Q) / d[None, :]
        evals, U = linalg.eigh((S + S.T) / 2.0)
        self.evals = evals
        self.left = U / d[:, None]
        self.right = U.T * d[None, :]

    def transition_rows(self, bases: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Row ``bases[s]`` of P(times[s]) for every site s."""
        ex = np.exp(np.outer(times, self.evals))  # sites x 4
        P = np.einsum("sk,sk,kj->sj", self.left[bases], ex, self.right)
        P = np.clip(P, 0.0, None)
        return P / P.sum(axis=1, keepdims=True)

    def evolve(self, bases: np.ndarray, rates: np.ndarray, t: float, rng: np.random.Generator) -> np.ndarray:
        if t <= 0 or bases.size == 0:
            return bases
        P = self.transition_rows(bases, rates * t)
        u = rng.random(bases.size)[:, None]
        return (u > np.cumsum(P, axis=1)).sum(axis=1).clip(0, 3).astype(np.int8)


def encode(seq: str) -> np.ndarray:
    table = np.full(256, -1, dtype=np.int8)
    for i, b in enumerate(BASES):
        table[ord(b)] = i
    out = table[np.frombuffer(seq.encode("ascii"), dtype=np.uint8)]
    if (out < 0).any():
        raise ValueError("sequence contains non-ACGT characters")
    return out


def decode(arr: np.ndarray) -> str:
    return np.frombuffer(np.frombuffer(b"ACGT", dtype=np.uint8)[arr].tobytes(), dtype="S1").tobytes().decode()


def evolve_sequence(bases: np.ndarray, rates: np.ndarray, T: float, cfg: SeqSimConfig,
                    rng: np.random.Generator, sub: _Substituter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Evolve an explicit sequence for time ``T`` with substitutions and
    geometric-length indels at uniformly chosen links."""
    sub = sub or _Substituter(cfg)
    lam, mu, r = cfg.params.lam, cfg.params.mu, cfg.params.r
    pi = cfg.stationary()
    t = 0.0
    while True:
        L = bases.size
        total = (L + 1) * lam + L * mu
        dt = rng.exponential(1.0 / total) if total > 0 else math.inf
        if t + dt >= T:
            bases = sub.evolve(bases, rates, T - t, rng)
            return bases, rates
        bases = sub.evolve(bases, rates, dt, rng)
        t += dt
        length = int(rng.geometric(r))
        if rng.random() * total < (L + 1) * lam:
            s = int(rng.integers(L + 1))
            new = rng.choice(4, size=length, p=pi).astype(np.int8)
            new_rates = _site_rates(cfg, length, rng)
            bases = np.concatenate([bases[:s], new, bases[s:]])
            rates = np.concatenate([rates[:s], new_rates, rates[s:]])
        else:
            s = int(rng.integers(L))
            bases = np.concatenate([bases[:s], bases[s + length:]])
            rates = np.concatenate([rates[:s], rates[s + length:]])


def _site_rates(cfg: SeqSimConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.gamma_shape is None:
        return np.ones(n)
    return rng.gamma(cfg.gamma_shape, 1.0 / cfg.gamma_shape, size=n)


def simulate_sequences(tree: PhyloTree, cfg: SeqSimConfig, rng: np.random.Generator,
                       root: str | None = None, root_length: int = 10_000) -> dict[str, str]:
    """Evolve explicit DNA down ``tree`` (root sequence random if not given)."""
    if root is None:
        bases = rng.choice(4, size=root_length, p=cfg.stationary()).astype(np.int8)
    else:
        bases = encode(root)
    sub = _Substituter(cfg)
    state = {tree.root: (bases, _site_rates(cfg, bases.size, rng))}
    for v in tree.preorder():
        if v == tree.root:
            continue
        pb, pr = state[tree.parent[v]]
        state[v] = evolve_sequence(pb, pr, tree.lengths[v], cfg, rng, sub)
    return {tree.taxa[i]: decode(state[i][0]) for i in range(tree.n_taxa)}
