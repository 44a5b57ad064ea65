"""Digest random genomes of a few sizes and compare the amplified-fragment
counts with their expectation.

    python demos/digest_random_genomes.py [size_mb ...]
"""

import sys

import numpy as np

from aflpsubid.digest import digest_one, expected_fragment_count, random_genome


def main(sizes_mb):
    rng = np.random.default_rng(1)
    print("size_mb\tfragments\tmarkers\tsuperpositions\texpected")
    for mb in sizes_mb:
        rep = digest_one(random_genome(int(mb * 1e6), rng), ("ACT", "CAG"))
        print(f"{mb}\t{rep.fragment_count}\t{rep.observed_marker_count}\t"
              f"{rep.superposition_count}\t{expected_fragment_count(mb * 1e6):.2f}")


if __name__ == "__main__":
    main([float(x) for x in sys.argv[1:]] or [5, 20, 50])
