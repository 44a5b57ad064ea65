"""Prior densities and samplers for the Sub-ID model."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .model import EndRegions, IndelParams
from .tree import PhyloTree, n_rooted_topologies

END_REGION_WEIGHTS = {(7, 9): 16 / 33, (9, 7): 16 / 33, (9, 9): 1 / 33}


@dataclass(frozen=True)
class PriorConfig:
    gamma: float = 0.1  # mean tree edge length
    nu: float = 0.1  # mean ancestor edge length
    loci_model: str = "restricted"  # or "general"
    k_max: int | None = None  # general model; default 10 x marker count
    nb_mean: float | None = None  # restricted model; default marker count
    nb_var: float = 1000.0
    ancestor_length: str = "geometric"  # or "uniform"
    w: float = 0.95
    n_min: int = 11
    n_max: int = 586
    rho: float = 17 / 4 ** 6
    mu_shape: float = 4.0
    mu_rate: float = 100.0
    beta_a: float = 3.0
    beta_b: float = 1.0

    def __post_init__(self):
        if not 0 < self.w < 1:
            raise ValueError("mixture weight w must lie in (0, 1)")
        if not self.n_min < self.n_max:
            raise ValueError("need n_min < n_max")
        if self.loci_model not in ("restricted", "general"):
            raise ValueError(f"unknown loci model {self.loci_model!r}")
        if self.ancestor_length not in ("geometric", "uniform"):
            raise ValueError(f"unknown ancestor length prior {self.ancestor_length!r}")
        if self.gamma <= 0 or self.nu <= 0:
            raise ValueError("edge-length prior means must be positive")

    def updated(self, **kw) -> "PriorConfig":
        names = {f.name for f in fields(self)}
        unknown = set(kw) - names
        if unknown:
            raise KeyError(f"unknown prior settings: {sorted(unknown)}")
        return replace(self, **kw)


# -- end regions ---------------------------------------------------------------


def end_region_logprior(end: EndRegions) -> float:
    key = (end.r_left, end.r_right)
    if key not in END_REGION_WEIGHTS:
        raise ValueError(f"invalid end regions {key}")
    return math.log(END_REGION_WEIGHTS[key])


_END_KEYS = list(END_REGION_WEIGHTS)
_END_P = np.array(list(END_REGION_WEIGHTS.values()))


def sample_end_regions(rng: np.random.Generator) -> EndRegions:
    return EndRegions(*_END_KEYS[rng.choice(3, p=_END_P)])


# -- ancestral intermediate length --------------------------------------------


def _log_trgeom_norm(rho: float, n: int) -> float:
    return math.log1p(-((1.0 - rho) ** n))


def ancestor_length_logpmf(n: int, cfg: PriorConfig) -> float:
    """Three-piece mixture prior on the intermediate length at the ancestor node."""
    if n < 1:
        raise ValueError("intermediate length must be >= 1")
    w, rho, lo, hi = cfg.w, cfg.rho, cfg.n_min, cfg.n_max
    lq = math.log1p(-rho)
    side = math.log((1.0 - w) / 2.0)
    if n < lo:
        return side + math.log(rho) + (lo - n - 1) * lq - _log_trgeom_norm(rho, lo - 1)
    if n > hi:
        return side + math.log(rho) + (n - hi - 1) * lq
    if cfg.ancestor_length == "uniform":
        return math.log(w) - math.log(hi - lo + 1)
    return math.log(w) + math.log(rho) + (n - lo) * lq - _log_trgeom_norm(rho, hi - lo + 1)


def sample_trgeom(rng: np.random.Generator, rho: float, n: int) -> int:
    u = rng.random()
    x = math.ceil(math.log1p(-u * (1.0 - (1.0 - rho) ** n)) / math.log1p(-rho))
    return min(max(x, 1), n)


def sample_ancestor_length(rng: np.random.Generator, cfg: PriorConfig) -> int:
    w, rho, lo, hi = cfg.w, cfg.rho, cfg.n_min, cfg.n_max
    u = rng.random()
    if u < (1.0 - w) / 2.0:
        return lo - sample_trgeom(rng, rho, lo - 1)
    if u < (1.0 - w) / 2.0 + w:
        if cfg.ancestor_length == "uniform":
            return int(rng.integers(lo, hi + 1))
        return lo - 1 + sample_trgeom(rng, rho, hi - lo + 1)
    return hi + int(rng.geometric(rho))


# -- number of loci ----------------------------------------------------------------


def nb_size_prob(mean: float, var: float) -> tuple[float, float]:
    """(size, success probability) of a negative binomial with given mean and variance."""
    if not var > mean > 0:
        raise ValueError("negative binomial needs variance > mean > 0")
    return mean * mean / (var - mean), mean / var


def loci_count_logpmf(k: int, cfg: PriorConfig, n_markers: int | None = None) -> float:
    """Prior on the number of loci in a plate (``-inf`` outside the support)."""
    if cfg.loci_model == "general":
        k_max = cfg.k_max if cfg.k_max is not None else 10 * (n_markers or 1)
        return -math.log(k_max) if 1 <= k <= k_max else -math.inf
    if k < 0:
        return -math.inf
    mean = cfg.nb_mean if cfg.nb_mean is not None else float(n_markers)
    size, p = nb_size_prob(mean, cfg.nb_var)
    return float(stats.nbinom.logpmf(k, size, p))


# -- tree -----------------------------------------------------------------------------


def exp_logpdf(x: float, mean: float) -> float:
    if x <= 0:
        raise ValueError("lengths must be positive")
    return -math.log(mean) - x / mean


def topology_logprior(n_taxa: int) -> float:
    return -math.log(n_rooted_topologies(n_taxa))


def tree_logprior(tree: PhyloTree, cfg: PriorConfig, ancestor_edge_lengths: Sequence[float] = ()) -> float:
    out = topology_logprior(tree.n_taxa)
    out += sum(exp_logpdf(tree.lengths[v], cfg.gamma) for v in tree.edges())
    out += sum(exp_logpdf(x, cfg.nu) for x in ancestor_edge_lengths)
    return out


# -- indel rates ----------------------------------------------------------------------


def rate_logprior(params: IndelParams, cfg: PriorConfig = PriorConfig()) -> float:
    """Independent Gamma (deletion rate), Beta (insertion/deletion ratio) and
    Uniform (length parameter) priors."""
    mu, r = params.mu, params.r
    beta = params.beta if params.beta is not None else (params.lam / mu if mu > 0 else math.nan)
    if not (mu > 0 and 0 < beta < 1 and 0 < r < 1):
        return -math.inf
    a, b = cfg.beta_a, cfg.beta_b
    lg = cfg.mu_shape * math.log(cfg.mu_rate) - gammaln(cfg.mu_shape) + (cfg.mu_shape - 1) * math.log(mu) - cfg.mu_rate * mu
    lb = gammaln(a + b) - gammaln(a) - gammaln(b) + (a - 1) * math.log(beta) + (b - 1) * math.log1p(-beta)
    return float(lg + lb)


def sample_rates(rng: np.random.Generator, cfg: PriorConfig = PriorConfig()) -> IndelParams:
    mu = rng.gamma(cfg.mu_shape, 1.0 / cfg.mu_rate)
    beta = rng.beta(cfg.beta_a, cfg.beta_b)
    return IndelParams.from_mu_beta(mu, beta, rng.random())


# -- joint ------------------------------------------------------------------------------


def locus_logprior(locus, cfg: PriorConfig) -> float:
    """End regions, ancestral length and ancestor-edge length of one locus."""
    return (end_region_logprior(locus.end) + ancestor_length_logpmf(locus.n_anc, cfg)
            + exp_logpdf(locus.anc_length, cfg.nu))


def joint_logprior(state, cfg: PriorConfig) -> float:
    """Log prior of a chain state (tree, loci per plate, rates).

    ``state`` needs ``tree``, ``loci``, ``params`` and ``n_markers`` (plate ->
    marker count, used for the default loci-count priors).
    """
    out = tree_logprior(state.tree, cfg) + rate_logprior(state.params, cfg)
    counts = {p: 0 for p in state.n_markers}
    for loc in state.loci:
        counts[loc.plate] = counts.get(loc.plate, 0) + 1
        out += locus_logprior(loc, cfg)
    for p, k in counts.items():
        out += loci_count_logpmf(k, cfg, state.n_markers.get(p))
    return out
