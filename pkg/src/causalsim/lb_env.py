"""Heterogeneous-server load-balancing environment.

Jobs arrive at a fixed interval and are routed to one of N FIFO servers. The
balancer sees per-server job counts and, after routing, the processing time of
the job on the chosen server: it never sees the job size itself.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import PolicySpec, Trajectory

TRACE_NAMES = ("processing_time", "latency")
LATENT_NAMES = ("job_size",)


@dataclass
class LbConfig:
    n_servers: int = 8
    rate_log_bound: float = math.log(5.0)
    size_low: float = 10.0
    size_high: float = 10**2.5
    regime_change_prob: float = 1.0 / 12000
    size_floor: float = 0.1
    load: float = 0.8
    interarrival: float | None = None
    horizon: int = 300
    rates: tuple | None = None

    @property
    def mean_size(self):
        """E[S] under the bounded Pareto (alpha = 1) regime mean."""
        lo, hi = self.size_low, self.size_high
        return lo * hi * math.log(hi / lo) / (hi - lo)

    @property
    def n_actions(self):
        return self.n_servers

    def delta(self, rates=None):
        """Inter-arrival time; by default chosen so the offered load is ``load``."""
        if self.interarrival is not None:
            return float(self.interarrival)
        rates = self.rates if rates is None else rates
        if rates is None:
            raise ValueError("inter-arrival time needs server rates")
        return self.mean_size / (self.load * float(np.sum(rates)))

    def with_rates(self, rates):
        return replace(self, rates=tuple(float(r) for r in rates))

    def to_dict(self):
        d = asdict(self)
        if d["rates"] is not None:
            d["rates"] = list(d["rates"])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if known.get("rates") is not None:
            known["rates"] = tuple(known["rates"])
        return cls(**known)


@dataclass
class ServerFleet:
    """Single-episode queue state; ``pending`` holds completion times per server."""

    rates: np.ndarray
    clock: float = 0.0
    pending: list = field(default_factory=list)

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=np.float64)
        if not self.pending:
            self.pending = [[] for _ in self.rates]

    def counts(self):
        return np.array([sum(c > self.clock for c in q) for q in self.pending])

    def outstanding(self, server):
        q = self.pending[server]
        return max(0.0, q[-1] - self.clock) if q else 0.0


@dataclass
class JobStream:
    sizes: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    changes: int


def gen_fleet(seed, config=None):
    cfg = config or LbConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.uniform(-cfg.rate_log_bound, cfg.rate_log_bound, size=cfg.n_servers)
    return ServerFleet(np.exp(u))


def pareto_mean(u, low=10.0, high=10**2.5):
    """Inverse CDF of the bounded Pareto with shape 1 on [low, high]."""
    return low / (1.0 - np.asarray(u) * (1.0 - low / high))


def gen_job_sizes(seed, length, config=None):
    if length < 1:
        raise ValueError("length must be >= 1")
    cfg = config or LbConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    change = rng.random(length) < cfg.regime_change_prob
    change[0] = True
    n_regimes = int(change.sum())
    mus = pareto_mean(rng.random(n_regimes), cfg.size_low, cfg.size_high)
    sigmas = rng.uniform(0.0, 0.5 * mus)
    regime = np.cumsum(change) - 1
    mu, sigma = mus[regime], sigmas[regime]
    sizes = np.maximum(rng.normal(mu, sigma), cfg.size_floor)
    return JobStream(sizes, mu, sigma, n_regimes - 1)


def step(fleet, job_size, server, delta):
    """Route one job arriving now; the clock then advances by ``delta``."""
    if not 0 <= server < len(fleet.rates):
        raise ValueError(f"server index {server} out of range")
    proc = job_size / fleet.rates[server]
    wait = fleet.outstanding(server)
    pending = [list(q) for q in fleet.pending]
    pending[server].append(fleet.clock + wait + proc)
    nxt = ServerFleet(fleet.rates, fleet.clock + delta, pending)
    return proc, wait + proc, nxt


# ---------------------------------------------------------------- policies

class LbPolicy:
    """Vectorized routing policy over a batch of n queues.

    ``decide(counts, noise)`` gets (n, N) job counts and (n, N) uniforms;
    ``observe(actions, proc)`` reports the processing time of each routed job.
    """

    def __init__(self, config):
        self.config = config
        self.n = config.n_servers

    def reset(self, n):
        pass

    def decide(self, counts, noise):
        raise NotImplementedError

    def observe(self, actions, proc):
        pass


class ServerLimited(LbPolicy):
    def __init__(self, config, servers=(0, 1)):
        super().__init__(config)
        self.pair = tuple(int(s) for s in servers)

    def decide(self, counts, noise):
        return np.where(noise[:, 0] < 0.5, self.pair[0], self.pair[1])


class ShortestQueue(LbPolicy):
    def decide(self, counts, noise):
        return np.argmin(counts, axis=1)


class PowerOfK(LbPolicy):
    def __init__(self, config, k=2):
        super().__init__(config)
        self.k = int(k)

    def decide(self, counts, noise):
        polled = np.argsort(noise, axis=1, kind="stable")[:, :self.k]
        mask = np.zeros(counts.shape, dtype=bool)
        np.put_along_axis(mask, polled, True, axis=1)
        return np.argmin(np.where(mask, counts, np.inf), axis=1)


class OracleRates(LbPolicy):
    def decide(self, counts, noise):
        return np.argmin(counts / np.asarray(self.config.rates)[None, :], axis=1)


class Tracker(LbPolicy):
    """Shortest normalized queue with rates estimated from observed processing times."""

    def reset(self, n):
        self.sums = np.zeros((n, self.n))
        self.jobs = np.zeros((n, self.n))

    def rate_estimates(self):
        total = self.jobs.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            overall = self.sums.sum(axis=1, keepdims=True) / total
            est = overall / (self.sums / self.jobs)
        return np.where(self.jobs > 0, est, 1.0)

    def decide(self, counts, noise):
        return np.argmin(counts / self.rate_estimates(), axis=1)

    def observe(self, actions, proc):
        rows = np.arange(len(actions))
        self.sums[rows, actions] += proc
        self.jobs[rows, actions] += 1


class RandomLb(LbPolicy):
    def decide(self, counts, noise):
        return np.minimum((noise[:, 0] * self.n).astype(np.int64), self.n - 1)


LB_POLICY_KINDS = {
    "server_limited": ServerLimited,
    "shortest_queue": ShortestQueue,
    "power_of_k": PowerOfK,
    "oracle": OracleRates,
    "tracker": Tracker,
    "random": RandomLb,
}


def make_policy(spec, config):
    try:
        cls = LB_POLICY_KINDS[spec.kind]
    except KeyError:
        raise ValueError(f"unknown LB policy kind {spec.kind!r}") from None
    return cls(config, **spec.params)


def lb_policy_decide(spec, obs, config, noise=None, policy=None):
    """Single-state convenience wrapper; pass ``policy`` to keep tracker state."""
    pol = policy or make_policy(spec, config)
    if policy is None:
        pol.reset(1)
    counts = np.asarray(obs, dtype=np.float64)[None, :]
    u = np.full((1, config.n_servers), 0.5) if noise is None else np.asarray(noise, dtype=float)[None, :]
    return int(pol.decide(counts, u)[0])


def default_policies(n_servers=8):
    specs = [PolicySpec(f"limited_{i}_{(i + 1) % n_servers}", "server_limited",
                        {"servers": [i, (i + 1) % n_servers]}) for i in range(n_servers)]
    specs.append(PolicySpec("shortest_queue", "shortest_queue", {}))
    specs += [PolicySpec(f"power_of_{k}", "power_of_k", {"k": k}) for k in (2, 3, 4, 5)]
    specs.append(PolicySpec("oracle", "oracle", {}))
    specs.append(PolicySpec("tracker", "tracker", {}))
    specs.append(PolicySpec("random", "random", {}))
    return specs


# ---------------------------------------------------------------- episodes

@dataclass
class LbRollout:
    counts: np.ndarray      # (n, H, N)
    actions: np.ndarray     # (n, H)
    processing: np.ndarray  # (n, H)
    latency: np.ndarray     # (n, H)

    def trajectory(self, i, traj_id, policy_id, latents=None):
        return Trajectory(traj_id, policy_id, self.counts[i], self.actions[i],
                          np.column_stack([self.processing[i], self.latency[i]]), latents)


def queue_rollout(policy, proc_table, delta, noise):
    """Route jobs through FIFO queues; ``proc_table[i, k, a]`` is job k's time on server a.

    Latency is processing time plus the remaining work ahead of the job.
    """
    n, horizon, n_srv = proc_table.shape
    policy.reset(n)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (n,))
    rows = np.arange(n)
    completion = np.zeros((n, horizon))
    server = np.zeros((n, horizon), dtype=np.int64)
    last_done = np.zeros((n, n_srv))
    counts_all = np.zeros((n, horizon, n_srv))
    proc_all = np.zeros((n, horizon))
    lat_all = np.zeros((n, horizon))
    flat_offset = (rows * n_srv)[:, None]
    for k in range(horizon):
        now = k * delta
        if k:
            busy = completion[:, :k] > now[:, None]
            counts = np.bincount((flat_offset + server[:, :k]).ravel(), weights=busy.ravel(),
                                 minlength=n * n_srv).reshape(n, n_srv)
        else:
            counts = np.zeros((n, n_srv))
        a = np.asarray(policy.decide(counts, noise[:, k]), dtype=np.int64)
        proc = proc_table[rows, k, a]
        wait = np.maximum(0.0, last_done[rows, a] - now)
        done = now + wait + proc
        last_done[rows, a] = done
        completion[:, k] = done
        server[:, k] = a
        counts_all[:, k] = counts
        proc_all[:, k] = proc
        lat_all[:, k] = wait + proc
        policy.observe(a, proc)
    return LbRollout(counts_all, server, proc_all, lat_all)


def true_proc_table(sizes, rates):
    return np.asarray(sizes, dtype=np.float64)[..., None] / np.asarray(rates, dtype=np.float64)


def run_lb_episode(fleet, jobs, policy_spec, config, horizon, noise=None, traj_id=0, policy_id=0):
    if len(jobs.sizes) < horizon:
        raise ValueError("job stream shorter than horizon")
    cfg = config.with_rates(fleet.rates)
    if noise is None:
        noise = np.random.default_rng(0).random((horizon, cfg.n_servers))
    sizes = jobs.sizes[:horizon]
    roll = queue_rollout(make_policy(policy_spec, cfg), true_proc_table(sizes[None, :], fleet.rates),
                         cfg.delta(), np.asarray(noise)[None, :horizon])
    return roll.trajectory(0, traj_id, policy_id, sizes[:, None])
