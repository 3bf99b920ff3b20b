"""Architecture priors for single-path training.

Two strategies: plain uniform over the product space, and a constraint
binned variant that first picks one of B equal-width bins over a metric
range and then rejection-samples until an architecture's cost lands in
that bin.  The binned form flattens the cost histogram, so cheap and
expensive paths see comparable training signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cost import CONSTRAINT_METRICS, LatencyTable, metric_value
from .errors import ConfigError, SamplerInfeasibleError
from .space.spec import Architecture, SupernetSpec

STRATEGIES = ("uniform", "constraint_uniform")

RANGE_PRESAMPLES = 10000


@dataclass(frozen=True)
class SamplerConfig:
    """How architectures are drawn during supernet training.

    ``lo``/``hi`` bound the metric range for constraint bins; leave both
    unset to span the empirical range of uniform pre-samples.
    """

    strategy: str = "uniform"
    metric: str = "macs"
    lo: Optional[float] = None
    hi: Optional[float] = None
    bins: int = 10
    per_bin_cap: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown sampler strategy {self.strategy!r}; "
                              f"choose from {STRATEGIES}")
        if self.metric not in CONSTRAINT_METRICS:
            raise ConfigError(f"unknown sampler metric {self.metric!r}")
        if self.bins < 1:
            raise ConfigError(f"bin count must be >= 1, got {self.bins}")
        if self.per_bin_cap < 1:
            raise ConfigError(
                f"per-bin rejection cap must be >= 1, got {self.per_bin_cap}")
        if (self.lo is None) != (self.hi is None):
            raise ConfigError("metric range needs both lo and hi (or neither)")
        if self.lo is not None and not self.lo < self.hi:
            raise ConfigError(f"metric range needs lo < hi, "
                              f"got [{self.lo}, {self.hi}]")


def sample_uniform(spec: SupernetSpec, rng: np.random.Generator) -> Architecture:
    """Draw each gene slot independently and uniformly."""
    arch = []
    for blk in spec.blocks:
        nv, nc, nq = blk.gene_sizes
        arch.append((int(rng.integers(nv)), int(rng.integers(nc)),
                     int(rng.integers(nq))))
    return tuple(arch)


def estimate_metric_range(spec: SupernetSpec, metric: str,
                          rng: np.random.Generator,
                          samples: int = RANGE_PRESAMPLES,
                          table: Optional[LatencyTable] = None
                          ) -> tuple[float, float]:
    """Empirical [min, max] of a metric over uniform pre-samples."""
    lo = float("inf")
    hi = float("-inf")
    for _ in range(samples):
        v = metric_value(sample_uniform(spec, rng), spec, metric, table)
        lo = min(lo, v)
        hi = max(hi, v)
    if not lo < hi:
        # degenerate space: every sampled path costs the same
        hi = lo + max(abs(lo), 1.0) * 1e-9
    return lo, hi


def sample_constraint_uniform(spec: SupernetSpec, cfg: SamplerConfig,
                              rng: np.random.Generator,
                              table: Optional[LatencyTable] = None,
                              metric_range: Optional[tuple[float, float]] = None
                              ) -> Architecture:
    """Draw a bin uniformly, then rejection-sample an architecture into it.

    A bin that rejects ``cfg.per_bin_cap`` consecutive candidates is noted
    and a fresh bin is drawn; after ``bins * per_bin_cap`` total candidate
    draws the sampler gives up and reports which bins never produced.
    """
    if metric_range is not None:
        lo, hi = metric_range
    elif cfg.lo is not None:
        lo, hi = cfg.lo, cfg.hi
    else:
        lo, hi = estimate_metric_range(spec, cfg.metric, rng, table=table)
    if not lo < hi:
        raise ConfigError(f"metric range needs lo < hi, got [{lo}, {hi}]")
    nbins = cfg.bins
    width = (hi - lo) / nbins
    cap = nbins * cfg.per_bin_cap
    tries = 0
    starved: set[int] = set()
    while tries < cap:
        b = int(rng.integers(nbins))
        b_lo = lo + width * b
        b_hi = lo + width * (b + 1)
        for _ in range(cfg.per_bin_cap):
            if tries >= cap:
                break
            tries += 1
            arch = sample_uniform(spec, rng)
            v = metric_value(arch, spec, cfg.metric, table)
            # half-open bins, closed at the top of the last one
            if v >= b_lo and (v < b_hi or (b == nbins - 1 and v <= b_hi)):
                return arch
        else:
            starved.add(b)
    raise SamplerInfeasibleError(
        f"no architecture found in {tries} draws over {nbins} "
        f"{cfg.metric} bins spanning [{lo}, {hi}]",
        empty_bins=sorted(starved))


class PathSampler:
    """Owns an RNG and draws one architecture per training step.

    The constraint strategy resolves its metric range once (from config
    bounds or pre-samples) and reuses it for every draw, so a sampler's
    output stream is a pure function of its seed.
    """

    def __init__(self, spec: SupernetSpec, cfg: SamplerConfig,
                 table: Optional[LatencyTable] = None):
        self.spec = spec
        self.cfg = cfg
        self.table = table
        self.rng = np.random.default_rng(cfg.seed)
        self._range: Optional[tuple[float, float]] = None
        if cfg.strategy == "constraint_uniform":
            if cfg.lo is not None:
                self._range = (cfg.lo, cfg.hi)
            else:
                self._range = estimate_metric_range(
                    spec, cfg.metric, self.rng, table=table)

    def sample(self) -> Architecture:
        if self.cfg.strategy == "uniform":
            return sample_uniform(self.spec, self.rng)
        return sample_constraint_uniform(
            self.spec, self.cfg, self.rng, table=self.table,
            metric_range=self._range)
