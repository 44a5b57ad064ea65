"""Simulate AFLP markers down a six-taxon tree, run a short coupled-chain
analysis and print the main summaries.

    python demos/simulate_and_infer.py [sweeps]
"""

import sys

import numpy as np

from aflpsubid.model import IndelParams
from aflpsubid.priors import PriorConfig
from aflpsubid.sampler import Mc3Config, run_mc3
from aflpsubid.simulate import simulate_dataset
from aflpsubid.summaries import clade_posteriors, homology_summaries, priority_consensus, topology_posteriors
from aflpsubid.tree import PhyloTree

TREE = "(((A:0.05,B:0.05):0.05,(C:0.05,D:0.05):0.05):0.05,(E:0.1,F:0.1):0.05);"


def main(sweeps):
    rng = np.random.default_rng(12)
    tree = PhyloTree.from_newick(TREE)
    prior = PriorConfig(nb_mean=12, nb_var=1000)
    Y, X, _ = simulate_dataset(tree, prior, IndelParams.from_mu_beta(0.04, 0.75, 0.5), 12, rng,
                               producing_only=True)
    print(f"simulated {X.n_bands} bands in {len(X.taxa)} taxa from {Y.values.shape[0]} loci")
    res = run_mc3(X, Mc3Config(n_chains=3, iterations=sweeps, thin=10, seed=3), prior)
    keep = len(res.trace) // 5
    trees = res.trees[keep:]
    print("true topology     ", tree.topology_key())
    for top, p in topology_posteriors(trees)[:3]:
        print(f"posterior {p:.3f}  ", top)
    print("priority consensus", priority_consensus(clade_posteriors(trees)).newick)
    H = homology_summaries(res.homology[keep:])
    pairs = sorted(((p, k) for k, p in H.pairs.items() if p >= 0.5), reverse=True)
    for p, (plate, a, b) in pairs:
        print(f"markers {a} and {b} from one locus: {p:.3f}")
    print("acceptance", {k: round(v, 3) for k, v in res.acceptance.items()})


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 600)
