"""File formats: marker matrices, Newick trees, traces, homology samples,
summary tables, FASTA and flat key=value configs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import DEFAULT_SCHEME, EnzymeScheme, LocusAssignment, MarkerMatrix
from .tree import PhyloTree


class InputError(ValueError):
    """Malformed user input; the message names the file and line."""


# -- marker matrix -----------------------------------------------------------------


def load_marker_matrix(path) -> MarkerMatrix:
    """Read a marker TSV: ``marker_length``, ``plate_id``, then one 0/1 column per taxon."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        lines = [(i, ln.rstrip("\r\n")) for i, ln in enumerate(fh, 1)]
    lines = [(i, ln) for i, ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise InputError(f"{path}: empty marker file")
    hline, header = lines[0]
    cols = header.split("\t")
    if len(cols) < 3 or cols[0] != "marker_length" or cols[1] != "plate_id":
        raise InputError(f"{path}:{hline}: header must start with marker_length<TAB>plate_id")
    taxa = cols[2:]
    if len(set(taxa)) != len(taxa):
        raise InputError(f"{path}:{hline}: duplicate taxon names")
    seen = set()
    lengths, plates, presence = [], [], []
    for i, ln in lines[1:]:
        f = ln.split("\t")
        if len(f) != len(cols):
            raise InputError(f"{path}:{i}: expected {len(cols)} fields, got {len(f)}")
        try:
            length = int(f[0])
        except ValueError:
            raise InputError(f"{path}:{i}: marker length {f[0]!r} is not an integer") from None
        if length <= 0:
            raise InputError(f"{path}:{i}: marker length must be positive")
        plate = f[1]
        if (plate, length) in seen:
            raise InputError(f"{path}:{i}: duplicate band (plate {plate}, length {length})")
        seen.add((plate, length))
        vals = []
        for x in f[2:]:
            if x not in ("0", "1"):
                raise InputError(f"{path}:{i}: entry {x!r} is not 0 or 1")
            vals.append(int(x))
        if not any(vals):
            raise InputError(f"{path}:{i}: band present in no taxon")
        lengths.append(length)
        plates.append(plate)
        presence.append(vals)
    P = np.array(presence, dtype=np.int8).T if presence else np.zeros((len(taxa), 0), dtype=np.int8)
    return MarkerMatrix(taxa, np.array(lengths, dtype=int), P, np.array(plates, dtype=object))


def write_marker_matrix(X: MarkerMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\t".join(["marker_length", "plate_id"] + list(X.taxa)) + "\n")
        for j in range(X.n_bands):
            row = [str(int(X.marker_lengths[j])), str(X.plates[j])] + [str(int(v)) for v in X.presence[:, j]]
            fh.write("\t".join(row) + "\n")


# -- assignment sidecar --------------------------------------------------------------


def write_assignment(Y: LocusAssignment, taxa: Sequence[str], path, scheme: EnzymeScheme = DEFAULT_SCHEME) -> None:
    """Long-format TSV of ``Y``: locus, plate, taxon, value, marker length (-1 if killed)."""
    ml = Y.marker_lengths(scheme)
    with open(path, "w") as fh:
        fh.write("locus\tplate_id\ttaxon\tvalue\tmarker_length\n")
        for k in range(Y.n_loci):
            for i, t in enumerate(taxa):
                fh.write(f"{k}\t{Y.plates[k]}\t{t}\t{int(Y.values[k, i])}\t{int(ml[k, i])}\n")


def load_assignment(path, taxa: Sequence[str], scheme: EnzymeScheme = DEFAULT_SCHEME) -> LocusAssignment:
    index = {t: i for i, t in enumerate(taxa)}
    recs = {}
    plates = {}
    with open(path) as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for n, row in enumerate(reader, 2):
            try:
                k = int(row["locus"])
                recs[(k, index[row["taxon"]])] = (int(row["value"]), int(row["marker_length"]))
                plates[k] = row["plate_id"]
            except (KeyError, ValueError, TypeError) as exc:
                raise InputError(f"{path}:{n}: malformed assignment row ({exc})") from None
    K = max(plates) + 1 if plates else 0
    values = np.zeros((K, len(taxa)), dtype=int)
    ml = np.full((K, len(taxa)), -1, dtype=int)
    for (k, i), (v, m) in recs.items():
        values[k, i], ml[k, i] = v, m
    return LocusAssignment.from_marker_lengths(values, ml, np.array([plates[k] for k in range(K)], dtype=object), scheme)


# -- trees ------------------------------------------------------------------------------


def read_newick(path, taxa: Sequence[str] | None = None) -> PhyloTree:
    text = Path(path).read_text().strip()
    try:
        return PhyloTree.from_newick(text.splitlines()[0] if text else text, taxa)
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}:1: {exc}") from None


def write_newick(trees: Iterable[PhyloTree], path, digits: int = 12) -> None:
    with open(path, "w") as fh:
        for t in trees:
            fh.write(t.newick(digits) + "\n")


def read_newick_lines(path, taxa: Sequence[str] | None = None) -> list[PhyloTree]:
    out = []
    with open(path) as fh:
        for i, ln in enumerate(fh, 1):
            ln = ln.strip()
            if not ln:
                continue
            try:
                out.append(PhyloTree.from_newick(ln, taxa))
            except (ValueError, IndexError) as exc:
                raise InputError(f"{path}:{i}: {exc}") from None
    return out


# -- traces -----------------------------------------------------------------------------


TRACE_FIXED = ["iteration", "log_likelihood", "log_prior", "lambda", "mu", "r"]


def write_trace(rows: Sequence[dict], path) -> None:
    """Tab-separated trace; K columns are named ``K_<plate>`` and the Newick
    string comes last."""
    if not rows:
        raise ValueError("empty trace")
    kcols = [c for c in rows[0] if c.startswith("K_")]
    cols = TRACE_FIXED + kcols + ["tree"]
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            out = []
            for c in cols:
                v = r[c]
                out.append(repr(float(v)) if isinstance(v, float) else str(v))
            fh.write("\t".join(out) + "\n")


def read_trace(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:len(TRACE_FIXED)] != TRACE_FIXED or header[-1] != "tree":
            raise InputError(f"{path}:1: not a trace file")
        for i, ln in enumerate(fh, 2):
            f = ln.rstrip("\n").split("\t")
            if len(f) != len(header):
                raise InputError(f"{path}:{i}: expected {len(header)} fields")
            row = {}
            for c, v in zip(header, f):
                if c == "tree":
                    row[c] = v
                elif c == "iteration" or c.startswith("K_"):
                    row[c] = int(v)
                else:
                    row[c] = float(v)
            rows.append(row)
    return rows


def write_homology(samples: Sequence[list], path, iterations: Sequence[int] | None = None) -> None:
    """JSON lines, one per sample: ``{"iteration": i, "loci": [[plate, [[taxon, length], ...]], ...]}``."""
    with open(path, "w") as fh:
        for n, s in enumerate(samples):
            it = iterations[n] if iterations is not None else n
            fh.write(json.dumps({"iteration": it, "loci": [[p, [list(b) for b in bands]] for p, bands in s]}) + "\n")


def read_homology(path) -> list[list]:
    out = []
    with open(path) as fh:
        for i, ln in enumerate(fh, 1):
            if not ln.strip():
                continue
            try:
                rec = json.loads(ln)
                out.append([(p, [tuple(b) for b in bands]) for p, bands in rec["loci"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{i}: malformed homology record ({exc})") from None
    return out


# -- summary tables ---------------------------------------------------------------------------


def write_clade_table(table, path) -> None:
    with open(path, "w") as fh:
        fh.write("clade\tposterior\tse\n")
        for clade, p in table.ranked():
            se = table.se.get(clade, math.nan)
            fh.write(f"{','.join(sorted(clade))}\t{p:.6f}\t{se:.6f}\n")


def write_homology_table(table, path) -> None:
    with open(path, "w") as fh:
        fh.write("plate_id\tmarker_1\tmarker_2\tsingle_locus_probability\n")
        for (p, a, b), v in sorted(table.pairs.items(), key=lambda kv: (str(kv[0][0]), kv[0][1], kv[0][2])):
            fh.write(f"{p}\t{a}\t{b}\t{v:.6f}\n")


def write_superposition_table(table, path) -> None:
    with open(path, "w") as fh:
        fh.write("plate_id\tmarker_length\tsuperposition_probability\n")
        for (p, m), v in sorted(table.superposition.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            fh.write(f"{p}\t{m}\t{v:.6f}\n")


def write_param_table(summaries: Mapping[str, object], path) -> None:
    with open(path, "w") as fh:
        fh.write("parameter\tmean\tlower_2.5\tupper_97.5\tn\n")
        for name, s in summaries.items():
            fh.write(f"{name}\t{s.mean:.6g}\t{s.lower:.6g}\t{s.upper:.6g}\t{s.n}\n")


def write_digest_report(reports: Mapping[str, object], path) -> None:
    with open(path, "w") as fh:
        fh.write("taxon\tfragment_count\tobserved_marker_count\tsuperposition_count\texpected_count\tintermediate_lengths\n")
        for t, r in reports.items():
            lens = ",".join(str(x) for x in r.fragment_lengths)
            fh.write(f"{t}\t{r.fragment_count}\t{r.observed_marker_count}\t{r.superposition_count}\t"
                     f"{r.expected_count:.4f}\t{lens}\n")


# -- FASTA ------------------------------------------------------------------------------------


def read_fasta(path) -> dict[str, str]:
    """Multi-record FASTA; sequences are upper-cased and must be pure ACGT."""
    recs: dict[str, list] = {}
    name = None
    with open(path) as fh:
        for i, ln in enumerate(fh, 1):
            ln = ln.strip()
            if not ln:
                continue
            if ln.startswith(">"):
                name = ln[1:].split()[0] if ln[1:].strip() else f"record{len(recs) + 1}"
                if name in recs:
                    raise InputError(f"{path}:{i}: duplicate record name {name!r}")
                recs[name] = []
                continue
            if name is None:
                raise InputError(f"{path}:{i}: sequence before the first header")
            s = ln.upper()
            bad = set(s) - set("ACGT")
            if bad:
                raise InputError(f"{path}:{i}: unsupported characters {''.join(sorted(bad))} "
                                 "(gaps and ambiguous bases are not allowed)")
            recs[name].append(s)
    if not recs:
        raise InputError(f"{path}: no FASTA records")
    return {k: "".join(v) for k, v in recs.items()}


def write_fasta(seqs: Mapping[str, str], path, width: int = 80) -> None:
    with open(path, "w") as fh:
        for name, s in seqs.items():
            fh.write(f">{name}\n")
            for i in range(0, len(s), width):
                fh.write(s[i:i + width] + "\n")


# -- config -----------------------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for i, ln in enumerate(fh, 1):
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            if "=" not in ln:
                raise InputError(f"{path}:{i}: expected key = value")
            k, v = (x.strip() for x in ln.split("=", 1))
            if not k:
                raise InputError(f"{path}:{i}: empty key")
            out[k] = v
    return out
