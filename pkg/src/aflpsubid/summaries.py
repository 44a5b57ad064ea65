"""Posterior summaries: clade frequencies, priority consensus, homology of
marker pairs, superpositions and parameter intervals."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .tree import PhyloTree


def _canonical(clade: Iterable[str]) -> frozenset:
    return frozenset(clade)


def _sort_key(clade: frozenset) -> tuple:
    return tuple(sorted(clade))


@dataclass
class CladeTable:
    """Rooted clade -> (posterior frequency, Monte Carlo standard error)."""

    taxa: list
    freq: dict
    se: dict = field(default_factory=dict)
    n_samples: int = 0

    def __post_init__(self):
        for c, p in self.freq.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"clade frequency out of range for {sorted(c)}")

    def __getitem__(self, clade) -> float:
        return self.freq.get(_canonical(clade), 0.0)

    def ranked(self) -> list[tuple[frozenset, float]]:
        """Clades in descending frequency; ties by lexicographic taxon tuple."""
        return sorted(self.freq.items(), key=lambda kv: (-kv[1], _sort_key(kv[0])))

    def nontrivial(self) -> dict:
        n = len(self.taxa)
        return {c: p for c, p in self.freq.items() if 1 < len(c) < n}


def _all_clades(tree: PhyloTree) -> set:
    out = tree.clades()
    out.update(frozenset([t]) for t in tree.taxa)
    out.add(frozenset(tree.taxa))
    return out


def _freqs(trees: Sequence[PhyloTree], taxa: Sequence[str]) -> Counter:
    c = Counter()
    for t in trees:
        if sorted(t.taxa) != sorted(taxa):
            raise ValueError("tree samples do not share one taxon set")
        c.update(_all_clades(t))
    return c


def clade_posteriors(samples) -> CladeTable:
    """Clade frequencies over tree samples.

    ``samples`` is a sequence of trees, or a sequence of runs (each a sequence
    of trees); with several runs the frequency is the mean over runs and the
    standard error is the between-run standard deviation over sqrt(runs).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one tree sample")
    runs = samples if isinstance(samples[0], (list, tuple)) else [samples]
    if any(not r for r in runs):
        raise ValueError("empty run")
    taxa = sorted(runs[0][0].taxa)
    per_run = []
    for r in runs:
        c = _freqs(r, taxa)
        per_run.append({k: v / len(r) for k, v in c.items()})
    clades = set().union(*per_run)
    freq, se = {}, {}
    for cl in clades:
        vals = np.array([pr.get(cl, 0.0) for pr in per_run])
        freq[cl] = float(vals.mean())
        se[cl] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
    return CladeTable(taxa, freq, se, sum(len(r) for r in runs))


def topology_posteriors(trees: Sequence[PhyloTree]) -> list[tuple[str, float]]:
    c = Counter(t.topology_key() for t in trees)
    n = sum(c.values())
    return sorted(((k, v / n) for k, v in c.items()), key=lambda kv: (-kv[1], kv[0]))


def compatible(a: frozenset, b: frozenset) -> bool:
    """Rooted clades are compatible when nested or disjoint."""
    return a <= b or b <= a or not (a & b)


@dataclass
class ConsensusResult:
    clades: list  # admitted clades (non-trivial), in admission order
    newick: str
    polytomies: list  # clades (as sorted tuples) whose node has > 2 children
    tree: PhyloTree | None  # set when fully resolved

    @property
    def resolved(self) -> bool:
        return not self.polytomies


def priority_consensus(table: CladeTable) -> ConsensusResult:
    """Greedy consensus: admit clades by descending frequency unless they
    conflict with an already admitted clade."""
    taxa = list(table.taxa)
    if not table.freq:
        raise ValueError("empty clade table")
    full = frozenset(taxa)
    admitted = []
    for clade, _ in table.ranked():
        if len(clade) <= 1 or clade == full:
            continue
        if all(compatible(clade, a) for a in admitted):
            admitted.append(clade)
    groups = sorted([full] + admitted + [frozenset([t]) for t in taxa], key=len)

    def children_of(g):
        inside = [h for h in groups if h < g]
        return [h for h in inside if not any(h < k < g for k in inside)]

    polytomies = []

    def rec(g):
        if len(g) == 1:
            return next(iter(g))
        ch = sorted(children_of(g), key=_sort_key)
        if len(ch) > 2:
            polytomies.append(_sort_key(g))
        return "(" + ",".join(rec(c) for c in ch) + ")"

    newick = rec(full) + ";"
    tree = None if polytomies else PhyloTree.from_newick(newick, taxa)
    return ConsensusResult(admitted, newick, polytomies, tree)


# ---------------------------------------------------------------------------
# homology


@dataclass
class HomologyTable:
    """``pairs[(plate, m1, m2)]`` (m1 < m2): fraction of samples in which one
    locus produces both marker lengths; ``superposition[(plate, m)]``: fraction
    in which two or more loci produce length m in the same taxon."""

    pairs: dict
    superposition: dict
    n_samples: int

    def pair(self, m1: int, m2: int, plate=None) -> float:
        a, b = sorted((m1, m2))
        if plate is None:
            vals = [v for (p, x, y), v in self.pairs.items() if (x, y) == (a, b)]
            return max(vals) if vals else 0.0
        return self.pairs.get((plate, a, b), 0.0)


def homology_summaries(samples, markers: Iterable[tuple] | None = None) -> HomologyTable:
    """Summaries over samples of the assignment.

    Each sample is a list of loci; a locus is ``(plate, [(taxon, marker
    length), ...])`` listing the bands it produces.  ``markers`` (pairs of
    (plate, length)) fixes the reported marker set; by default every marker
    seen in the samples.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    seen = set()
    pair_counts = Counter()
    sup_counts = Counter()
    for s in samples:
        pairs_here = set()
        per_band = Counter()
        for plate, bands in s:
            lengths = sorted({m for _, m in bands})
            seen.update((plate, m) for m in lengths)
            for a, b in combinations(lengths, 2):
                pairs_here.add((plate, a, b))
            per_band.update((plate, i, m) for i, m in set(map(tuple, bands)))
        pair_counts.update(pairs_here)
        sup_counts.update({(p, m) for (p, i, m), c in per_band.items() if c >= 2})
    marker_set = set(markers) if markers is not None else seen
    n = len(samples)
    pairs = {}
    by_plate = {}
    for p, m in marker_set:
        by_plate.setdefault(p, []).append(m)
    for p, ms in by_plate.items():
        for a, b in combinations(sorted(ms), 2):
            pairs[(p, a, b)] = pair_counts[(p, a, b)] / n
    sup = {(p, m): sup_counts[(p, m)] / n for p, m in marker_set}
    return HomologyTable(pairs, sup, n)


def homology_from_assignment(Y, overhead: int = 39) -> list:
    """Convert a :class:`LocusAssignment` into the sample format above."""
    out = []
    for k in range(Y.n_loci):
        bands = [(int(i), int(Y.lengths[k, i]) + overhead) for i in np.flatnonzero(Y.values[k] == 1)]
        if bands:
            out.append((Y.plates[k], bands))
    return out


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    lower: float
    upper: float
    n: int


def param_summary(values: Sequence[float], level: float = 0.95, min_samples: int = 100) -> ParamSummary:
    """Sample mean and central credible interval (linear-interpolated
    percentiles)."""
    x = np.asarray(values, dtype=float)
    if x.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {x.size}")
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(x, [tail, 100.0 - tail])
    return ParamSummary(float(x.mean()), float(lo), float(hi), int(x.size))
