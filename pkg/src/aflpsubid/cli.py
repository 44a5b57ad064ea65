"""Command-line interface: ``digest``, ``simulate``, ``infer``, ``summarize``.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .digest import digest
from .model import IndelParams
from .priors import PriorConfig
from .sampler import ConsistencyError, Mc3Config, gelman_rubin, run_mc3
from .simulate import simulate_dataset
from .summaries import clade_posteriors, homology_summaries, param_summary, priority_consensus, topology_posteriors
from .tree import PhyloTree

log = logging.getLogger("aflpsubid")

EXIT_INPUT = 2
EXIT_NUMERIC = 3

_PRIOR_TYPES = {
    "gamma": float, "nu": float, "loci_model": str, "k_max": int, "nb_mean": float, "nb_var": float,
    "ancestor_length": str, "w": float, "n_min": int, "n_max": int, "rho": float,
    "mu_shape": float, "mu_rate": float, "beta_a": float, "beta_b": float,
}
_RUN_TYPES = {"iterations": int, "thin": int, "chains": int, "heats": str, "swap_interval": int,
              "heat_step": float, "check_interval": int, "seed": int}


def _prior_from(settings: dict) -> PriorConfig:
    kw = {}
    for k, v in settings.items():
        if k not in _PRIOR_TYPES:
            raise io.InputError(f"unknown prior setting {k!r}")
        try:
            kw[k] = _PRIOR_TYPES[k](v)
        except ValueError:
            raise io.InputError(f"bad value for {k}: {v!r}") from None
    return PriorConfig().updated(**kw)


def _split_settings(cfg: dict) -> tuple[dict, dict]:
    prior, run = {}, {}
    for k, v in cfg.items():
        key = k[len("prior."):] if k.startswith("prior.") else k
        if key in _PRIOR_TYPES:
            prior[key] = v
        elif key in _RUN_TYPES:
            run[key] = v
        else:
            raise io.InputError(f"unknown config key {k!r}")
    return prior, run


def _parse_kv(items) -> dict:
    out = {}
    for it in items or ():
        if "=" not in it:
            raise io.InputError(f"expected key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="aflpsubid", description="AFLP marker homology and phylogeny under an indel model.")
    p.add_argument("--seed", type=int, default=None, help="master random seed")
    p.add_argument("--config", type=Path, default=None, help="key = value settings file")
    p.add_argument("--threads", type=int, default=1, help="worker count (chains run in one process)")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("digest", help="in-silico AFLP digestion of genomes")
    d.add_argument("fasta", nargs="+", type=Path, help="one FASTA per taxon (taxon = file stem)")
    d.add_argument("--selective", nargs=2, metavar=("RARE", "FREQUENT"), required=True,
                   help="selective bases of the rare- and frequent-cutter primers")
    d.add_argument("--plate", default="1")

    s = sub.add_parser("simulate", help="simulate markers down a tree")
    s.add_argument("--tree", type=Path, required=True, help="Newick file with branch lengths")
    s.add_argument("--loci", type=int, required=True)
    s.add_argument("--mu", type=float, default=0.04)
    s.add_argument("--beta", type=float, default=0.75)
    s.add_argument("--r", type=float, default=0.5)
    s.add_argument("--producing-only", action="store_true", help="redraw loci until each shows a band")
    s.add_argument("--prior", action="append", metavar="KEY=VALUE")

    i = sub.add_parser("infer", help="posterior sampling with coupled chains")
    i.add_argument("markers", type=Path)
    i.add_argument("--iterations", type=int)
    i.add_argument("--thin", type=int)
    i.add_argument("--chains", type=int)
    i.add_argument("--heats", help="comma-separated heats, cold chain first")
    i.add_argument("--swap-interval", type=int)
    i.add_argument("--start-tree", type=Path)
    i.add_argument("--prior", action="append", metavar="KEY=VALUE", help="prior override, e.g. nu=0.1")
    i.add_argument("--resume", type=Path, help="checkpoint to resume from")

    m = sub.add_parser("summarize", help="summaries of one or more runs")
    m.add_argument("traces", nargs="+", type=Path, help="trace TSV files (one per run)")
    m.add_argument("--homology", nargs="*", type=Path, default=[], help="homology JSONL files")
    m.add_argument("--burnin", type=float, default=0.1, help="fraction of each run to discard")
    return p


def cmd_digest(args, settings) -> None:
    seqs = {}
    for f in args.fasta:
        recs = io.read_fasta(f)
        seqs[f.stem] = list(recs.values())
    reports, X = digest(seqs, tuple(args.selective), plate=args.plate)
    io.write_digest_report(reports, args.out_dir / "digest_report.tsv")
    io.write_marker_matrix(X, args.out_dir / "markers.tsv")
    for t, r in reports.items():
        print(f"{t}\tfragments={r.fragment_count}\tmarkers={r.observed_marker_count}\t"
              f"superpositions={r.superposition_count}\texpected={r.expected_count:.2f}")


def cmd_simulate(args, settings) -> None:
    prior_set, _ = _split_settings(settings)
    prior_set.update(_parse_kv(args.prior))
    prior = _prior_from(prior_set)
    tree = io.read_newick(args.tree)
    rng = np.random.default_rng(args.seed)
    params = IndelParams.from_mu_beta(args.mu, args.beta, args.r)
    Y, X, _ = simulate_dataset(tree, prior, params, args.loci, rng, plate="1", producing_only=args.producing_only)
    io.write_marker_matrix(X, args.out_dir / "markers.tsv")
    io.write_assignment(Y, tree.taxa, args.out_dir / "truth_assignment.tsv")
    io.write_newick([tree], args.out_dir / "tree.nwk")
    print(f"{X.n_bands} bands from {args.loci} loci")


def cmd_infer(args, settings) -> None:
    prior_set, run_set = _split_settings(settings)
    prior_set.update(_parse_kv(args.prior))
    for k in ("iterations", "thin", "chains", "heats", "swap_interval"):
        v = getattr(args, k)
        if v is not None:
            run_set[k] = v
    if args.seed is not None:
        run_set["seed"] = args.seed
    prior = _prior_from(prior_set)
    X = io.load_marker_matrix(args.markers)
    try:
        kw = {k: _RUN_TYPES[k](v) for k, v in run_set.items() if k not in ("chains", "heats")}
    except ValueError as exc:
        raise io.InputError(str(exc)) from None
    n_chains = int(run_set.get("chains", 4))
    heats = [float(h) for h in str(run_set["heats"]).split(",")] if "heats" in run_set else None
    if heats is not None:
        n_chains = len(heats)
    cfg = Mc3Config(n_chains=n_chains, heats=heats, **kw)
    tree = io.read_newick(args.start_tree, X.taxa) if args.start_tree else None
    out = args.out_dir
    res = run_mc3(X, cfg, prior, tree=tree, checkpoint=out / "checkpoint.pkl", resume=args.resume)
    io.write_trace(res.trace, out / "trace.tsv")
    io.write_newick(res.trees, out / "trees.nwk")
    io.write_homology(res.homology, out / "homology.jsonl", [r["iteration"] for r in res.trace])
    with open(out / "acceptance.tsv", "w") as fh:
        fh.write("move\tacceptance_rate\n")
        for k, v in res.acceptance.items():
            fh.write(f"{k}\t{v:.4f}\n")
        fh.write(f"chain_swap\t{res.swap_stats['accepted'] / max(res.swap_stats['proposed'], 1):.4f}\n")
    print(f"{len(res.trace)} samples written to {out}")


def cmd_summarize(args, settings) -> None:
    runs = []
    traces = []
    for path in args.traces:
        rows = io.read_trace(path)
        rows = rows[int(len(rows) * args.burnin):]
        if not rows:
            raise io.InputError(f"{path}: no samples after burn-in")
        traces.append(rows)
        runs.append([PhyloTree.from_newick(r["tree"]) for r in rows])
    table = clade_posteriors(runs)
    io.write_clade_table(table, args.out_dir / "clades.tsv")
    cons = priority_consensus(table)
    (args.out_dir / "consensus.nwk").write_text(cons.newick + "\n")
    if cons.polytomies:
        log.warning("consensus is not fully resolved; polytomies at %s", cons.polytomies)
    with open(args.out_dir / "topologies.tsv", "w") as fh:
        fh.write("topology\tposterior\n")
        for k, v in topology_posteriors([t for r in runs for t in r]):
            fh.write(f"{k}\t{v:.6f}\n")
    params = {}
    for name in ("lambda", "mu", "r"):
        vals = [row[name] for rows in traces for row in rows]
        if len(vals) >= 100:
            params[name] = param_summary(vals)
    if params:
        io.write_param_table(params, args.out_dir / "params.tsv")
    if len(traces) >= 2:
        n = min(len(r) for r in traces)
        if n >= 10:
            with open(args.out_dir / "gelman_rubin.tsv", "w") as fh:
                fh.write("parameter\tR\n")
                for name in ("lambda", "mu", "r", "log_likelihood"):
                    R = gelman_rubin([[row[name] for row in rows[-n:]] for rows in traces])
                    fh.write(f"{name}\t{R:.4f}\n")
    if args.homology:
        samples = []
        for path in args.homology:
            hs = io.read_homology(path)
            samples += hs[int(len(hs) * args.burnin):]
        h = homology_summaries(samples)
        io.write_homology_table(h, args.out_dir / "homology.tsv")
        io.write_superposition_table(h, args.out_dir / "superposition.tsv")
    print(cons.newick)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = io.read_config(args.config) if args.config else {}
        args.out_dir.mkdir(parents=True, exist_ok=True)
        {"digest": cmd_digest, "simulate": cmd_simulate, "infer": cmd_infer,
         "summarize": cmd_summarize}[args.command](args, settings)
    except (FloatingPointError, ConsistencyError, OverflowError, ZeroDivisionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (io.InputError, ValueError, KeyError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
