import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causalsim import lb_env as L
from causalsim.core import PolicySpec

CFG = L.LbConfig()


def test_mean_size_matches_numeric_integral():
    lo, hi = CFG.size_low, CFG.size_high
    x = np.linspace(lo, hi, 400001)
    pdf = lo / (1 - lo / hi) / x**2
    assert np.trapezoid(x * pdf, x) == pytest.approx(CFG.mean_size, rel=1e-6)


def test_pareto_inverse_cdf_bounds():
    u = np.random.default_rng(0).random(100000)
    s = L.pareto_mean(u)
    assert s.min() >= 10.0 and s.max() <= 10**2.5
    assert s.mean() == pytest.approx(CFG.mean_size, rel=0.02)


def test_delta_sets_offered_load():
    rates = np.array([0.5, 1.0, 2.0])
    cfg = CFG.with_rates(rates)
    assert CFG.mean_size / cfg.delta() / rates.sum() == pytest.approx(0.8)
    with pytest.raises(ValueError):
        CFG.delta()


def test_fleet_rates_in_bounds():
    f = L.gen_fleet(4)
    assert len(f.rates) == 8
    assert np.all(np.abs(np.log(f.rates)) <= math.log(5.0))


def test_job_sizes_floor_and_regimes():
    js = L.gen_job_sizes(1, 50000, CFG)
    assert js.sizes.min() >= CFG.size_floor
    assert np.all(js.sigma <= 0.5 * js.mu)
    assert js.changes == len(np.unique(js.mu)) - 1


def test_scalar_step_fifo():
    f = L.ServerFleet([1.0, 2.0])
    proc, lat, f = L.step(f, 4.0, 0, 1.0)
    assert (proc, lat) == (4.0, 4.0)
    proc, lat, f = L.step(f, 2.0, 0, 1.0)
    # arrives at t=1, first job finishes at t=4
    assert (proc, lat) == (2.0, 5.0)
    assert f.counts().tolist() == [2, 0]
    with pytest.raises(ValueError):
        L.step(f, 1.0, 5, 1.0)


@pytest.mark.parametrize("spec", L.default_policies(), ids=lambda s: s.name)
def test_vectorized_rollout_matches_scalar_queue(spec):
    rng = np.random.default_rng(7)
    fleet = L.gen_fleet(rng)
    cfg = CFG.with_rates(fleet.rates)
    sizes = L.gen_job_sizes(rng, 120, cfg).sizes
    noise = rng.random((120, 8))
    tr = L.run_lb_episode(fleet, L.JobStream(sizes, sizes, sizes, 0), spec, cfg, 120, noise)
    pol = L.make_policy(spec, cfg)
    pol.reset(1)
    f = fleet
    for k in range(120):
        counts = f.counts()
        assert np.array_equal(counts, tr.obs[k])
        a = int(pol.decide(counts[None, :].astype(float), noise[k][None, :])[0])
        assert a == tr.actions[k]
        proc, lat, f = L.step(f, sizes[k], a, cfg.delta())
        pol.observe(np.array([a]), np.array([proc]))
        assert tr.traces[k, 0] == pytest.approx(proc, rel=1e-12)
        assert tr.traces[k, 1] == pytest.approx(lat, rel=1e-12)


def test_power_of_k_polls_k_servers():
    pol = L.PowerOfK(CFG, k=2)
    counts = np.array([[0, 5, 5, 5, 5, 5, 5, 1.0]])
    noise = np.array([[0.9, 0.1, 0.8, 0.8, 0.8, 0.8, 0.8, 0.2]])
    assert pol.decide(counts, noise)[0] == 7


def test_power_of_n_is_shortest_queue():
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 6, (500, 8)).astype(float)
    noise = rng.random((500, 8))
    full = L.PowerOfK(CFG, k=8).decide(counts, noise)
    assert np.array_equal(counts[np.arange(500), full], counts.min(axis=1))


def test_tracker_recovers_rate_ratios():
    rates = np.array([0.5, 1.0, 2.0, 4.0])
    cfg = L.LbConfig(n_servers=4).with_rates(rates)
    pol = L.Tracker(cfg)
    pol.reset(1)
    for a in range(4):
        pol.observe(np.array([a]), np.array([10.0 / rates[a]]))
    est = pol.rate_estimates()[0]
    assert np.allclose(est / est[0], rates / rates[0])


def test_limited_policy_uses_its_pair():
    pol = L.make_policy(PolicySpec("l", "server_limited", {"servers": [3, 4]}), CFG)
    a = pol.decide(np.zeros((1000, 8)), np.random.default_rng(0).random((1000, 8)))
    assert set(a.tolist()) == {3, 4}


def test_default_registry_has_sixteen_policies():
    specs = L.default_policies()
    assert len(specs) == 16
    assert len({s.name for s in specs}) == 16


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_latency_at_least_processing(seed):
    rng = np.random.default_rng(seed)
    fleet = L.gen_fleet(rng)
    cfg = CFG.with_rates(fleet.rates)
    sizes = L.gen_job_sizes(rng, 50, cfg).sizes[None, :]
    roll = L.queue_rollout(L.RandomLb(cfg), L.true_proc_table(sizes, fleet.rates), cfg.delta(), rng.random((1, 50, 8)))
    assert np.all(roll.latency >= roll.processing - 1e-12)
    assert np.allclose(roll.processing[0] * fleet.rates[roll.actions[0]], sizes[0])
