"""Rooted binary phylogenies with branch lengths, and Newick IO."""

from __future__ import annotations

import math
import re
from typing import Iterator, Sequence

import numpy as np


class PhyloTree:
    """Rooted binary tree over ``T`` taxa.

    Nodes ``0..T-1`` are the leaves (in taxon order) and ``T..2T-2`` are
    internal.  ``lengths[v]`` is the length of the edge above ``v``; the root
    has no edge in the tree itself (each locus attaches its own ancestor
    edge above the root).
    """

    def __init__(self, taxa: Sequence[str], parent: Sequence[int], lengths: Sequence[float]):
        self.taxa = list(taxa)
        T = len(self.taxa)
        if T < 2:
            raise ValueError("need at least two taxa")
        if len(parent) != 2 * T - 1 or len(lengths) != 2 * T - 1:
            raise ValueError("a rooted binary tree on T taxa has 2T - 1 nodes")
        self.parent = list(parent)
        self.lengths = [float(x) for x in lengths]
        roots = [v for v, p in enumerate(self.parent) if p < 0]
        if len(roots) != 1:
            raise ValueError("tree must have exactly one root")
        self.root = roots[0]
        self._rebuild()
        for v in range(2 * T - 1):
            if v != self.root and not self.lengths[v] > 0:
                raise ValueError("edge lengths must be positive")

    def _rebuild(self) -> None:
        T = self.n_taxa
        self.children = [[] for _ in range(2 * T - 1)]
        for v, p in enumerate(self.parent):
            if p >= 0:
                self.children[p].append(v)
        for v in range(2 * T - 1):
            want = 0 if v < T else 2
            if len(self.children[v]) != want:
                raise ValueError(f"node {v} has {len(self.children[v])} children, expected {want}")
        self._preorder = []
        stack = [self.root]
        while stack:
            v = stack.pop()
            self._preorder.append(v)
            stack.extend(reversed(self.children[v]))
        if len(self._preorder) != 2 * T - 1:
            raise ValueError("tree is not connected")
        self.leafmask = [0] * (2 * T - 1)
        for v in reversed(self._preorder):
            self.leafmask[v] = (1 << v) if v < T else self.leafmask[self.children[v][0]] | self.leafmask[self.children[v][1]]

    # -- structure ----------------------------------------------------------

    @property
    def n_taxa(self) -> int:
        return len(self.taxa)

    @property
    def n_nodes(self) -> int:
        return 2 * self.n_taxa - 1

    def is_leaf(self, v: int) -> bool:
        return v < self.n_taxa

    def preorder(self) -> list[int]:
        return self._preorder

    def postorder(self) -> list[int]:
        return self._preorder[::-1]

    def edges(self) -> list[int]:
        """Child nodes of the 2T - 2 tree edges."""
        return [v for v in self._preorder if v != self.root]

    def internal_nodes(self) -> list[int]:
        return [v for v in self._preorder if v >= self.n_taxa]

    def sibling(self, v: int) -> int:
        a, b = self.children[self.parent[v]]
        return b if a == v else a

    def copy(self) -> "PhyloTree":
        return PhyloTree(self.taxa, self.parent, self.lengths)

    def leaves_below(self, v: int) -> list[int]:
        m = self.leafmask[v]
        return [i for i in range(self.n_taxa) if m >> i & 1]

    def clades(self) -> set[frozenset]:
        """Taxon sets of all non-trivial clades (internal nodes except the root)."""
        out = set()
        for v in self.internal_nodes():
            if v != self.root:
                out.add(frozenset(self.taxa[i] for i in self.leaves_below(v)))
        return out

    def clade_masks(self) -> set[int]:
        return {self.leafmask[v] for v in self.internal_nodes() if v != self.root}

    def topology_key(self) -> str:
        """Canonical Newick string without lengths (children sorted)."""

        def rec(v):
            if v < self.n_taxa:
                return self.taxa[v]
            return "(" + ",".join(sorted(rec(c) for c in self.children[v])) + ")"

        return rec(self.root)

    # -- edits ---------------------------------------------------------------

    def swap_subtrees(self, a: int, b: int) -> None:
        """Exchange the parents of nodes ``a`` and ``b`` (edge lengths travel
        with the child nodes)."""
        pa, pb = self.parent[a], self.parent[b]
        self.parent[a], self.parent[b] = pb, pa
        self._rebuild()

    # -- construction --------------------------------------------------------

    @classmethod
    def random(cls, taxa: Sequence[str], rng: np.random.Generator, mean_length: float = 0.1) -> "PhyloTree":
        """Uniform random rooted topology with exponential edge lengths."""
        T = len(taxa)
        parent = [-1] * (2 * T - 1)
        # stepwise addition onto uniformly chosen edges (incl. above the root)
        # yields the uniform distribution over rooted topologies
        parent[0] = T
        parent[1] = T
        root = T
        nxt = T + 1
        for leaf in range(2, T):
            existing = [v for v in range(leaf)] + list(range(T, nxt))
            target = existing[rng.integers(len(existing))]
            new = nxt
            nxt += 1
            parent[new] = parent[target]
            parent[target] = new
            parent[leaf] = new
            if target == root:
                root = new
        lengths = rng.exponential(mean_length, size=2 * T - 1)
        return cls(taxa, parent, lengths)

    @classmethod
    def from_newick(cls, text: str, taxa: Sequence[str] | None = None) -> "PhyloTree":
        nodes = _parse_newick(text)
        leaves = [n for n in nodes if not n["children"]]
        names = [n["name"] for n in leaves]
        if taxa is None:
            taxa = names
        taxa = list(taxa)
        if sorted(names) != sorted(taxa):
            raise ValueError("Newick leaf set does not match taxa")
        T = len(taxa)
        index = {}
        for n in leaves:
            index[id(n)] = taxa.index(n["name"])
        nxt = T
        for n in nodes:
            if n["children"]:
                index[id(n)] = nxt
                nxt += 1
        parent = [-1] * (2 * T - 1)
        lengths = [math.nan] * (2 * T - 1)
        for n in nodes:
            for c in n["children"]:
                parent[index[id(c)]] = index[id(n)]
                lengths[index[id(c)]] = c["length"] if c["length"] is not None else 1.0
        if len(nodes) != 2 * T - 1:
            raise ValueError("Newick tree is not binary")
        return cls(taxa, parent, lengths)

    def newick(self, digits: int = 12) -> str:
        def rec(v):
            if v < self.n_taxa:
                s = self.taxa[v]
            else:
                s = "(" + ",".join(rec(c) for c in self.children[v]) + ")"
            if v != self.root:
                s += ":" + format(self.lengths[v], f".{digits}g")
            return s

        return rec(self.root) + ";"

    def __repr__(self) -> str:
        return f"PhyloTree({self.newick(6)})"


_TOKEN = re.compile(r"\s*([(),:;]|[^(),:;\s]+)")


def _parse_newick(text: str) -> list[dict]:
    tokens = _TOKEN.findall(text.strip())
    if not tokens or tokens[-1] != ";":
        raise ValueError("Newick string must end with ';'")
    pos = 0
    nodes = []

    def node():
        nonlocal pos
        n = {"name": None, "length": None, "children": []}
        if tokens[pos] == "(":
            pos += 1
            n["children"].append(node())
            while tokens[pos] == ",":
                pos += 1
                n["children"].append(node())
            if tokens[pos] != ")":
                raise ValueError("malformed Newick: expected ')'")
            pos += 1
        if tokens[pos] not in "(),:;":
            n["name"] = tokens[pos]
            pos += 1
        if tokens[pos] == ":":
            pos += 1
            n["length"] = float(tokens[pos])
            pos += 1
        nodes.append(n)
        return n

    node()
    if tokens[pos] != ";":
        raise ValueError("malformed Newick: trailing tokens")
    return nodes


def n_rooted_topologies(n_taxa: int) -> int:
    """(2T - 3)!!"""
    out = 1
    for k in range(3, 2 * n_taxa - 2, 2):
        out *= k
    return out
