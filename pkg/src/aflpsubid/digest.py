"""In-silico AFLP digestion: restriction fragments, selective amplification
and the expected number of amplified fragments for a genome size."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import DEFAULT_SCHEME, EnzymeScheme, MarkerMatrix

_COMPLEMENT = str.maketrans("ACGT", "TGCA")
_DNA = re.compile(r"^[ACGT]*$")


def revcomp(seq: str) -> str:
    return seq.translate(_COMPLEMENT)[::-1]


def expected_fragment_count(genome_size: float) -> float:
    """Expected number of amplified fragments in a random genome of the given
    size with a 6-cutter/4-cutter pair and 3+3 selective bases."""
    if not genome_size > 0:
        raise ValueError("genome size must be positive")
    return genome_size * 17 / 4 ** 6 * 33 / 289 * 1 / 4 ** 6 * 0.864


@dataclass(frozen=True)
class Fragment:
    start: int  # index of the first base of the left site
    left: str  # "rare" or "frequent"
    right: str
    intermediate_length: int


@dataclass
class DigestReport:
    fragment_count: int
    observed_marker_count: int
    superposition_count: int
    expected_count: float
    fragment_lengths: list = field(default_factory=list)  # intermediate lengths, sorted

    def marker_lengths(self, scheme: EnzymeScheme = DEFAULT_SCHEME) -> list[int]:
        return sorted({scheme.marker_length(n) for n in self.fragment_lengths})


def _check_dna(seq: str) -> None:
    if not _DNA.match(seq):
        bad = sorted(set(seq) - set("ACGT"))
        raise ValueError(f"sequence contains non-ACGT characters: {bad[:5]}")


def _sites(seq: str, site: str) -> list[int]:
    return [m.start() for m in re.finditer(f"(?={site})", seq)]


def restriction_fragments(seq: str, scheme: EnzymeScheme = DEFAULT_SCHEME) -> list[Fragment]:
    """Fragments between consecutive recognition sites of either enzyme.

    The intermediate length excludes each end's site and the selective bases
    adjacent to it; fragments too short to hold both end regions are dropped.
    """
    _check_dna(seq)
    k = scheme.selective_bases_per_primer
    hits = [(p, "rare") for p in _sites(seq, scheme.rare_site)]
    hits += [(p, "frequent") for p in _sites(seq, scheme.frequent_site)]
    hits.sort()
    site_len = {"rare": len(scheme.rare_site), "frequent": len(scheme.frequent_site)}
    out = []
    for (a, ta), (b, tb) in zip(hits, hits[1:]):
        n = (b - k) - (a + site_len[ta] + k)
        if n >= 1:
            out.append(Fragment(a, ta, tb, n))
    return out


def amplified_fragments(seq: str, selective: tuple[str, str], scheme: EnzymeScheme = DEFAULT_SCHEME) -> list[Fragment]:
    """Fragments whose ends carry the rare-cutter site on at least one side and
    whose selective positions match the primers.

    ``selective`` is (rare-cutter primer bases, frequent-cutter primer bases).
    """
    k = scheme.selective_bases_per_primer
    if len(selective) != 2 or any(len(s) != k or not _DNA.match(s) for s in selective):
        raise ValueError(f"selective bases must be two strings of {k} uppercase DNA bases")
    primer = {"rare": selective[0], "frequent": selective[1]}
    site_len = {"rare": len(scheme.rare_site), "frequent": len(scheme.frequent_site)}
    out = []
    for f in restriction_fragments(seq, scheme):
        if f.left == "frequent" and f.right == "frequent":
            continue
        lsel_start = f.start + site_len[f.left]
        left_sel = seq[lsel_start:lsel_start + k]
        rsel_end = lsel_start + k + f.intermediate_length + k
        right_sel = revcomp(seq[rsel_end - k:rsel_end])
        if left_sel == primer[f.left] and right_sel == primer[f.right]:
            out.append(f)
    return out


def _as_records(seqs) -> list[str]:
    return [seqs] if isinstance(seqs, str) else list(seqs)


def digest_one(seqs, selective: tuple[str, str], scheme: EnzymeScheme = DEFAULT_SCHEME,
               n_min: int = 11, n_max: int = 586) -> DigestReport:
    records = _as_records(seqs)
    lengths = []
    size = 0
    for rec in records:
        size += len(rec)
        lengths += [f.intermediate_length for f in amplified_fragments(rec, selective, scheme)
                    if n_min <= f.intermediate_length <= n_max]
    lengths.sort()
    counts = Counter(lengths)
    return DigestReport(
        fragment_count=len(lengths),
        observed_marker_count=len(counts),
        superposition_count=sum(1 for c in counts.values() if c >= 2),
        expected_count=expected_fragment_count(size) if size else 0.0,
        fragment_lengths=lengths,
    )


def digest(sequences: Mapping[str, object], selective: tuple[str, str], scheme: EnzymeScheme = DEFAULT_SCHEME,
           n_min: int = 11, n_max: int = 586, plate=0) -> tuple[dict, MarkerMatrix]:
    """Digest each taxon's genome (a sequence or a list of records).

    Returns per-taxon reports and the band presence matrix over the union of
    observed marker lengths.
    """
    taxa = list(sequences)
    reports = {t: digest_one(sequences[t], selective, scheme, n_min, n_max) for t in taxa}
    bands = set()
    for i, t in enumerate(taxa):
        for m in reports[t].marker_lengths(scheme):
            bands.add((plate, i, m))
    if bands:
        X = MarkerMatrix.from_band_set(taxa, bands)
    else:
        X = MarkerMatrix(taxa, np.zeros(0, dtype=int), np.zeros((len(taxa), 0), dtype=np.int8))
    return reports, X


def random_genome(size: int, rng: np.random.Generator, freqs: Sequence[float] = (0.25, 0.25, 0.25, 0.25)) -> str:
    """i.i.d. bases with the given A, C, G, T frequencies."""
    p = np.asarray(freqs, dtype=float)
    if p.shape != (4,) or (p < 0).any() or not math.isclose(p.sum(), 1.0):
        raise ValueError("base frequencies must be four non-negative numbers summing to one")
    cum = np.cumsum(p)[:3]
    letters = np.frombuffer(b"ACGT", dtype=np.uint8)
    out = np.empty(size, dtype=np.uint8)
    chunk = 1 << 22
    for a in range(0, size, chunk):
        u = rng.random(min(chunk, size - a))
        out[a:a + u.size] = letters[np.searchsorted(cum, u, side="right")]
    return out.tobytes().decode("ascii")
