"""Path samplers: uniform and constraint-binned draws."""

from collections import Counter

import numpy as np
import pytest

from supernas.cost import count_macs
from supernas.errors import ConfigError, SamplerInfeasibleError
from supernas.sampler import (PathSampler, SamplerConfig,
                              estimate_metric_range,
                              sample_constraint_uniform, sample_uniform)
from supernas.space.spec import desk_space, validate_architecture

from conftest import toy_space


def test_uniform_draws_are_valid():
    spec = desk_space("joint")
    rng = np.random.default_rng(0)
    for _ in range(300):
        validate_architecture(spec, sample_uniform(spec, rng))


def test_uniform_stream_is_seed_determined():
    spec = desk_space("block")
    a = PathSampler(spec, SamplerConfig(seed=3))
    b = PathSampler(spec, SamplerConfig(seed=3))
    streams = [[s.sample() for _ in range(50)] for s in (a, b)]
    assert streams[0] == streams[1]
    c = PathSampler(spec, SamplerConfig(seed=4))
    assert [c.sample() for _ in range(50)] != streams[0]


def test_uniform_covers_every_candidate():
    spec = desk_space("block")
    rng = np.random.default_rng(1)
    seen = [set() for _ in spec.blocks]
    for _ in range(500):
        for i, gene in enumerate(sample_uniform(spec, rng)):
            seen[i].add(gene[0])
    assert all(s == {0, 1, 2, 3} for s in seen)


def test_constraint_draws_stay_in_range():
    spec = toy_space()
    cfg = SamplerConfig(strategy="constraint_uniform", metric="macs",
                        lo=1.00e6, hi=1.10e6, bins=4, seed=2)
    sampler = PathSampler(spec, cfg)
    for _ in range(100):
        macs = count_macs(sampler.sample(), spec)
        assert 1.00e6 <= macs <= 1.10e6


def test_constraint_flattens_cost_histogram():
    # plain uniform follows the space's bell-shaped cost histogram; the
    # binned sampler should return each cost bin at a near-equal rate
    spec = toy_space()
    lo, hi, bins, n = 885056.0, 1157440.0, 5, 2000

    def bin_of(arch):
        b = int((count_macs(arch, spec) - lo) / ((hi - lo) / bins))
        return min(b, bins - 1)

    rng = np.random.default_rng(3)
    flat_counts = Counter(
        bin_of(sample_uniform(spec, rng)) for _ in range(n))
    cfg = SamplerConfig(strategy="constraint_uniform", metric="macs",
                        lo=lo, hi=hi, bins=bins, per_bin_cap=500, seed=3)
    sampler = PathSampler(spec, cfg)
    binned_counts = Counter(bin_of(sampler.sample()) for _ in range(n))
    assert set(binned_counts) == set(range(bins))
    flat_ratio = max(flat_counts.values()) / min(flat_counts.values())
    binned_ratio = max(binned_counts.values()) / min(binned_counts.values())
    assert binned_ratio < 1.5
    assert flat_ratio > 2.5


def test_constraint_infeasible_range_reports_bins():
    spec = toy_space()
    cfg = SamplerConfig(strategy="constraint_uniform", metric="macs",
                        lo=1.0, hi=2.0, bins=4, per_bin_cap=10, seed=0)
    rng = np.random.default_rng(0)
    with pytest.raises(SamplerInfeasibleError) as err:
        sample_constraint_uniform(spec, cfg, rng)
    assert err.value.empty_bins
    assert err.value.empty_bins == sorted(err.value.empty_bins)


def test_estimate_metric_range_bounds():
    spec = desk_space("channel")
    rng = np.random.default_rng(5)
    lo, hi = estimate_metric_range(spec, "macs", rng, samples=400)
    assert 807424 <= lo < hi <= 1576640
    assert hi - lo > 0.5 * (1576640 - 807424)


def test_degenerate_metric_range():
    # quantization genes never change MACs, so the whole space costs the same
    spec = desk_space("quant")
    rng = np.random.default_rng(6)
    lo, hi = estimate_metric_range(spec, "macs", rng, samples=50)
    assert lo < hi < lo + 1
    cfg = SamplerConfig(strategy="constraint_uniform", metric="macs",
                        bins=1, seed=7, lo=lo, hi=hi)
    sampler = PathSampler(spec, cfg)
    validate_architecture(spec, sampler.sample())


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(strategy="roulette")
    with pytest.raises(ConfigError):
        SamplerConfig(metric="watts")
    with pytest.raises(ConfigError):
        SamplerConfig(bins=0)
    with pytest.raises(ConfigError):
        SamplerConfig(per_bin_cap=0)
    with pytest.raises(ConfigError):
        SamplerConfig(lo=1.0)
    with pytest.raises(ConfigError):
        SamplerConfig(lo=2.0, hi=1.0)
