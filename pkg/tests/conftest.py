import numpy as np
import pytest

from aflpsubid.model import LocusAssignment, MarkerMatrix

SIX_TAXON_LENGTHS = [61, 76, 111, 136, 137, 215, 216, 219, 221, 412]
_AB = [1, 1, 1, 0, 0, 0, 1, 1, 0, 1]
_CD = [1, 1, 1, 1, 0, 1, 0, 0, 1, 0]
_EF = [1, 0, 0, 0, 1, 1, 0, 0, 0, 0]
SIX_TAXON_PRESENCE = np.array([_AB, _AB, _CD, _CD, _EF, _EF])
TAXA6 = list("ABCDEF")

# per locus: (value, marker length) for taxa A..F; -1 marks a killed lineage
SIX_TAXON_TRUTH = [
    [(0, 54)] * 6,
    [(1, 61)] * 6,
    [(1, 76)] * 4 + [(0, 76)] * 2,
    [(1, 111)] * 4 + [(0, 111)] * 2,
    [(0, 122)] * 6,
    [(0, 127)] * 4 + [(-1, -1)] * 2,
    [(0, 135)] * 2 + [(1, 136)] * 2 + [(1, 137)] * 2,
    [(1, 216)] * 2 + [(1, 215)] * 4,
    [(1, 219)] * 2 + [(1, 221)] * 2 + [(0, 221)] * 2,
    [(1, 412)] * 2 + [(0, 412)] * 2 + [(0, 410)] * 2,
]

THREE_TAXON_LENGTHS = [50, 51, 52]
THREE_TAXON_PRESENCE = np.array([[1, 1, 0], [0, 1, 1], [1, 0, 0]])
TAXA3 = ["1", "2", "3"]

THREE_TAXON_Y_A = [
    [(1, 50), (1, 51), (1, 50)],
    [(1, 51), (1, 52), (0, 51)],
]
THREE_TAXON_Y_B = [
    [(1, 50), (1, 51), (1, 50)],
    [(1, 51), (1, 51), (0, 51)],
    [(1, 51), (1, 52), (0, 51)],
]


def assignment(rows) -> LocusAssignment:
    vals = np.array([[v for v, _ in r] for r in rows])
    ml = np.array([[m for _, m in r] for r in rows])
    return LocusAssignment.from_marker_lengths(vals, ml)


def six_taxon_matrix() -> MarkerMatrix:
    return MarkerMatrix(TAXA6, SIX_TAXON_LENGTHS, SIX_TAXON_PRESENCE)


def three_taxon_matrix() -> MarkerMatrix:
    return MarkerMatrix(TAXA3, THREE_TAXON_LENGTHS, THREE_TAXON_PRESENCE)


@pytest.fixture
def six_taxon():
    return six_taxon_matrix()


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
