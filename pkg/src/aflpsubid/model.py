"""Domain types and rate algebra for the Sub-ID model of AFLP marker evolution.

A fragment is laid out as ``[left end | intermediate (N bases) | right end]``.
Links (the gaps between bases) are numbered from the link immediately left of
the first base of the left end region (position 0).  With ``R_L`` bases in the
left end region the intermediate-region links are ``R_L .. R_L + N``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

#: allowed (R_L, R_R) pairs: MseI/EcoRI in either orientation or EcoRI/EcoRI
VALID_END_REGIONS = ((7, 9), (9, 7), (9, 9))


@dataclass(frozen=True)
class EnzymeScheme:
    """Restriction enzymes and primer geometry of an AFLP protocol."""

    rare_site: str = "GAATTC"
    frequent_site: str = "TTAA"
    selective_bases_per_primer: int = 3
    primer_overhead: int = 39

    def __post_init__(self):
        for site in (self.rare_site, self.frequent_site):
            if not site or set(site) - set("ACGT"):
                raise ValueError(f"recognition sequence must be uppercase DNA: {site!r}")

    def marker_length(self, n: int) -> int:
        return n + self.primer_overhead

    def intermediate_length(self, marker_length: int) -> int:
        return marker_length - self.primer_overhead


DEFAULT_SCHEME = EnzymeScheme()


@dataclass(frozen=True)
class EndRegions:
    r_left: int
    r_right: int

    def __post_init__(self):
        if (self.r_left, self.r_right) not in VALID_END_REGIONS:
            raise ValueError(f"invalid end regions ({self.r_left}, {self.r_right})")

    @property
    def total(self) -> int:
        return self.r_left + self.r_right


@dataclass(frozen=True)
class IndelParams:
    """Insertion rate ``lam``, deletion rate ``mu`` (per link per unit time)
    and geometric length parameter ``r`` (mean length ``1/r``)."""

    lam: float
    mu: float
    r: float
    beta: float | None = None

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("indel rates must be non-negative")
        if not 0 < self.r <= 1:
            raise ValueError(f"geometric parameter must lie in (0, 1], got {self.r}")

    @classmethod
    def from_mu_beta(cls, mu: float, beta: float, r: float) -> "IndelParams":
        return cls(lam=mu * beta, mu=mu, r=r, beta=beta)


#: time is measured in expected substitutions per site
SUBSTITUTION_RATE = 1.0


class EventKind(enum.Enum):
    """Indel event types affecting a fragment (the value is the category index ``w``)."""

    INS_INTERMEDIATE = "1"
    INS_END = "1_R"
    DEL_INTERMEDIATE = "-1"
    DEL_INTO_RIGHT_END = "-1_N"
    DEL_FROM_BEFORE = "-1_P"
    DEL_IN_END = "-1_R"

    @property
    def sign(self) -> int:
        return 1 if self in (EventKind.INS_INTERMEDIATE, EventKind.INS_END) else -1

    @property
    def killing(self) -> bool:
        return self not in (EventKind.INS_INTERMEDIATE, EventKind.DEL_INTERMEDIATE)


KILLING_KINDS = tuple(k for k in EventKind if k.killing)


class IndelEvent(NamedTuple):
    time: float
    kind: EventKind
    position: int
    length: int


def classify_event(sign: int, position: int, length: int, end: EndRegions, n: int) -> EventKind | None:
    """Kind of an insertion (``sign=1``) or deletion (``sign=-1``) starting at
    ``position``; ``None`` when the event does not touch the fragment.

    A deletion that removes the whole intermediate region is treated as
    destroying the right end region (N never drops to zero).
    """
    if length < 1:
        raise ValueError("indel length must be >= 1")
    rl = end.r_left
    last = rl + n + end.r_right  # link after the fragment
    if sign > 0:
        if rl <= position <= rl + n:
            return EventKind.INS_INTERMEDIATE
        if 1 <= position < last:
            return EventKind.INS_END
        return None
    if position < 0:
        return EventKind.DEL_FROM_BEFORE if length > -position else None
    if rl <= position < rl + n:
        room = rl + n - position
        if length < room or (length == room and position != rl):
            return EventKind.DEL_INTERMEDIATE
        return EventKind.DEL_INTO_RIGHT_END
    if 0 <= position < last:
        return EventKind.DEL_IN_END
    return None


@dataclass(frozen=True)
class IndelHistory:
    """Time-ordered indel events along one edge.  At most one killing event,
    and only as the last event."""

    events: tuple[IndelEvent, ...] = ()

    def __post_init__(self):
        times = [e.time for e in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("event times must be strictly increasing")
        for e in self.events[:-1]:
            if e.kind.killing:
                raise ValueError("a killing event must be the last event")

    @property
    def kill(self) -> bool:
        return bool(self.events) and self.events[-1].kind.killing

    def __len__(self) -> int:
        return len(self.events)

    def lengths(self, n0: int) -> list[int]:
        """Intermediate lengths ``[N_0, N_1, ...]`` after each non-killing
        event.  Raises ``ValueError`` if a replay step leaves N < 1."""
        ns = [n0]
        n = n0
        for e in self.events:
            if e.kind.killing:
                break
            n += e.kind.sign * e.length
            if n < 1:
                raise ValueError("history replay empties the intermediate region")
            ns.append(n)
        return ns

    def final_length(self, n0: int) -> int:
        return self.lengths(n0)[-1]

    def validate(self, n0: int, end: EndRegions, edge_length: float | None = None) -> None:
        """Check every event's declared kind against its position and length."""
        n = n0
        for e in self.events:
            if e.time < 0 or (edge_length is not None and e.time >= edge_length):
                raise ValueError(f"event time {e.time} outside edge")
            kind = classify_event(e.kind.sign, e.position, e.length, end, n)
            if kind is not e.kind:
                raise ValueError(f"event {e} is of kind {kind}, not {e.kind}")
            if not e.kind.killing:
                n += e.kind.sign * e.length

    def scaled(self, factor: float) -> "IndelHistory":
        return IndelHistory(tuple(e._replace(time=e.time * factor) for e in self.events))


EMPTY_HISTORY = IndelHistory()


@dataclass(frozen=True)
class FragmentState:
    mismatches: int
    cutters: int
    intermediate_length: int
    alive: bool = True

    def visible(self, n_min: int = 11, n_max: int = 586) -> bool:
        return (self.alive and self.mismatches == 0 and self.cutters == 0
                and n_min <= self.intermediate_length <= n_max)


# ---------------------------------------------------------------------------
# rate algebra


def _check_n(n: int) -> None:
    if n < 1:
        raise ValueError(f"intermediate length must be >= 1, got {n}")


def long_deletion_rate(params: IndelParams) -> float:
    """Rate of deletions starting before the fragment that reach its left end."""
    if params.r <= 0:
        raise ValueError("geometric parameter r = 0 gives a divergent rate")
    return params.mu * (1.0 - params.r) / params.r


def total_indel_rate(end: EndRegions, n: int, params: IndelParams) -> float:
    """Total rate of indel events affecting a fragment with ``n`` intermediate bases."""
    _check_n(n)
    R = end.total
    return (R + n - 1) * params.lam + (R + n) * params.mu + long_deletion_rate(params)


def _geom_tail_sum(r: float, n: int) -> float:
    """sum_{j=1..n} (1 - r)^j"""
    if r >= 1.0:
        return 0.0
    q = 1.0 - r
    return q * (1.0 - q ** n) / r


def category_rates(end: EndRegions, n: int, params: IndelParams) -> dict[EventKind, float]:
    """Per-kind event rates; they sum to :func:`total_indel_rate`."""
    _check_n(n)
    lam, mu, r = params.lam, params.mu, params.r
    R = end.total
    empty = r * (1.0 - r) ** (n - 1)
    into_right = _geom_tail_sum(r, n) + empty
    return {
        EventKind.INS_INTERMEDIATE: (n + 1) * lam,
        EventKind.INS_END: (R - 2) * lam,
        EventKind.DEL_INTERMEDIATE: mu * max(n - into_right, 0.0),  # exactly 0 at n = 1
        EventKind.DEL_INTO_RIGHT_END: mu * into_right,
        EventKind.DEL_FROM_BEFORE: long_deletion_rate(params),
        EventKind.DEL_IN_END: R * mu,
    }


def kill_rate(end: EndRegions, n: int, params: IndelParams) -> float:
    rates = category_rates(end, n, params)
    return sum(v for k, v in rates.items() if k.killing)


def indel_length_logpmf(length: int, r: float) -> float:
    """log of the geometric pmf ``r (1-r)^(l-1)`` on 1, 2, ..."""
    if length < 1:
        raise ValueError("indel length must be >= 1")
    if length == 1:
        return math.log(r)
    if r >= 1.0:
        return -math.inf
    return math.log(r) + (length - 1) * math.log1p(-r)


def trgeom_logpmf(x: int, r: float, n: int) -> float:
    """Geometric pmf truncated to ``1..n``."""
    if x < 1:
        raise ValueError("value must be >= 1")
    if x > n:
        return -math.inf
    if r >= 1.0:
        return 0.0 if x == 1 else -math.inf
    return indel_length_logpmf(x, r) - math.log1p(-((1.0 - r) ** n))


# ---------------------------------------------------------------------------
# data containers


@dataclass
class LocusAssignment:
    """The K x T x 2 assignment ``Y``: per locus and taxon a value in
    {1, 0, -1} and the intermediate length (-1 where undefined)."""

    values: np.ndarray
    lengths: np.ndarray
    plates: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=int)
        self.lengths = np.asarray(self.lengths, dtype=int)
        if self.values.shape != self.lengths.shape or self.values.ndim != 2:
            raise ValueError("values and lengths must be matching K x T arrays")
        if not np.isin(self.values, (1, 0, -1)).all():
            raise ValueError("assignment values must be 1, 0 or -1")
        if self.plates is None:
            self.plates = np.zeros(self.values.shape[0], dtype=object)
        self.plates = np.asarray(self.plates, dtype=object)
        self.lengths = np.where(self.values == -1, -1, self.lengths)

    @classmethod
    def from_marker_lengths(cls, values, marker_lengths, plates=None,
                            scheme: EnzymeScheme = DEFAULT_SCHEME) -> "LocusAssignment":
        values = np.asarray(values, dtype=int)
        ml = np.asarray(marker_lengths, dtype=int)
        return cls(values, np.where(values == -1, -1, ml - scheme.primer_overhead), plates)

    @property
    def n_loci(self) -> int:
        return self.values.shape[0]

    def marker_lengths(self, scheme: EnzymeScheme = DEFAULT_SCHEME) -> np.ndarray:
        return np.where(self.values == -1, -1, self.lengths + scheme.primer_overhead)


@dataclass
class MarkerMatrix:
    """Observed 0/1 band presence: ``presence[i, j]`` for taxon i and band j."""

    taxa: list[str]
    marker_lengths: np.ndarray
    presence: np.ndarray
    plates: np.ndarray = field(default=None)

    def __post_init__(self):
        self.taxa = list(self.taxa)
        self.marker_lengths = np.asarray(self.marker_lengths, dtype=int)
        self.presence = np.asarray(self.presence, dtype=np.int8).reshape(len(self.taxa), -1)
        if self.plates is None:
            self.plates = np.zeros(len(self.marker_lengths), dtype=object)
        self.plates = np.asarray(self.plates, dtype=object)
        if self.presence.shape[1] != len(self.marker_lengths) or len(self.plates) != len(self.marker_lengths):
            raise ValueError("presence matrix does not match band list")
        if not np.isin(self.presence, (0, 1)).all():
            raise ValueError("presence entries must be 0 or 1")
        if (self.marker_lengths <= 0).any():
            raise ValueError("marker lengths must be positive")
        keys = list(zip(self.plates.tolist(), self.marker_lengths.tolist()))
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (plate, marker length) band")
        if self.presence.size and (self.presence.sum(axis=0) == 0).any():
            raise ValueError("every band must be present in at least one taxon")

    @property
    def n_taxa(self) -> int:
        return len(self.taxa)

    @property
    def n_bands(self) -> int:
        return len(self.marker_lengths)

    def plate_ids(self) -> list:
        seen = []
        for p in self.plates.tolist():
            if p not in seen:
                seen.append(p)
        return seen

    def band_set(self, plate=None) -> set[tuple[int, int]]:
        """``{(taxon index, marker length)}`` of present bands."""
        out = set()
        for j, (length, p) in enumerate(zip(self.marker_lengths.tolist(), self.plates.tolist())):
            if plate is not None and p != plate:
                continue
            for i in np.flatnonzero(self.presence[:, j]).tolist():
                out.add((i, length))
        return out

    def keyed_band_set(self) -> set[tuple[object, int, int]]:
        out = set()
        for p in self.plate_ids():
            out.update((p, i, length) for i, length in self.band_set(p))
        return out

    def subset_plate(self, plate) -> "MarkerMatrix":
        cols = [j for j, p in enumerate(self.plates.tolist()) if p == plate]
        return MarkerMatrix(self.taxa, self.marker_lengths[cols], self.presence[:, cols], self.plates[cols])

    def same_bands(self, other: "MarkerMatrix") -> bool:
        if list(self.taxa) != list(other.taxa):
            return False
        return self.keyed_band_set() == other.keyed_band_set()

    @classmethod
    def from_band_set(cls, taxa: Sequence[str], bands: set[tuple[object, int, int]]) -> "MarkerMatrix":
        cols = sorted({(p, length) for p, _, length in bands}, key=lambda c: (str(c[0]), c[1]))
        index = {c: j for j, c in enumerate(cols)}
        presence = np.zeros((len(taxa), len(cols)), dtype=np.int8)
        for p, i, length in bands:
            presence[i, index[(p, length)]] = 1
        return cls(list(taxa), np.array([c[1] for c in cols], dtype=int), presence,
                   np.array([c[0] for c in cols], dtype=object))
