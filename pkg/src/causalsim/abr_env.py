"""Synthetic adaptive-bitrate streaming environment.

Network paths are Markov-modulated Gaussian capacity traces with a fixed RTT.
Each chunk is fetched over a fresh TCP slow start (initial window of two
packets), so the achieved throughput depends on the chunk size: that
dependence is the bias a trace-replaying simulator ignores.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import PolicySpec, Trajectory

DEFAULT_LADDER = (0.3, 0.75, 1.2, 1.85, 2.85, 4.3)  # Mbps
LN2 = math.log(2.0)
OBS_NAMES = ("buffer", "last_throughput")
TRACE_NAMES = ("throughput", "download_time")
LATENT_NAMES = ("capacity", "rtt")


@dataclass
class AbrConfig:
    ladder: tuple = DEFAULT_LADDER
    chunk_seconds: float = 4.0
    buffer_cap: float = 10.0
    horizon: int = 100
    rtt_range: tuple = (0.010, 0.500)
    capacity_floor: float = 0.05
    switch_interval_range: tuple = (30.0, 100.0)
    level_range: tuple = (0.5, 4.5)
    min_level_spread: float = 0.3
    sigma_range: tuple = (0.05, 0.3)
    start_packets: int = 2
    packet_bytes: int = 1500

    def __post_init__(self):
        self.ladder = tuple(float(x) for x in self.ladder)
        if any(b <= a for a, b in zip(self.ladder, self.ladder[1:])):
            raise ValueError("bitrate ladder must be strictly increasing")

    @property
    def chunk_sizes(self):
        """Chunk sizes in megabits, one per ladder rung."""
        return np.asarray(self.ladder) * self.chunk_seconds

    @property
    def n_actions(self):
        return len(self.ladder)

    def start_rate(self, rtt):
        """Initial slow-start rate in Mbps: ``start_packets`` MTUs per RTT."""
        return self.start_packets * self.packet_bytes * 8 / 1e6 / np.asarray(rtt, dtype=np.float64)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in known.items()})


@dataclass
class NetworkPath:
    rtt: float
    capacities: np.ndarray
    mean_states: np.ndarray
    params: dict = field(default_factory=dict)


def solve_lambda(l, h, s_prev, tol=1e-10):
    """Rate of the double exponential around ``s_prev`` that puts mass 1/2 outside [l, h].

    Positive root of ``1 - exp(-x (h - s)) - exp(-x (s - l))`` by bisection.
    """
    if not l < s_prev < h:
        raise ValueError(f"s_prev={s_prev} must lie strictly inside ({l}, {h})")
    f = lambda x: 1.0 - math.exp(-x * (h - s_prev)) - math.exp(-x * (s_prev - l))
    lo, hi = 0.0, 1.0
    while f(hi) <= 0.0:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("no bracketing interval for lambda")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _draw_levels(rng, cfg, max_tries=10_000):
    for _ in range(max_tries):
        l, h = np.sort(rng.uniform(*cfg.level_range, size=2))
        if (h - l) / (h + l) > cfg.min_level_spread:
            return float(l), float(h)
    raise RuntimeError("could not draw capacity levels satisfying the spread constraint")


def _truncated_laplace(rng, center, lam, l, h, max_tries=10_000):
    for _ in range(max_tries):
        x = center + rng.laplace(0.0, 1.0 / lam)
        if l <= x <= h:
            return x
    raise RuntimeError("truncated double-exponential draw did not terminate")


def gen_markov_trace(seed, length, config=None):
    """Sample an RTT and a ``length``-step capacity trace (Mbps).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    cfg = config or AbrConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rtt = float(rng.uniform(*cfg.rtt_range))
    v = float(rng.uniform(*cfg.switch_interval_range))
    p = 1.0 / v
    l, h = _draw_levels(rng, cfg)
    s = float(rng.uniform(l, h))
    c_sigma = float(rng.uniform(*cfg.sigma_range))
    states = np.empty(length)
    switch = rng.random(length) < p
    for t in range(length):
        if t > 0 and switch[t] and l < s < h:
            s = _truncated_laplace(rng, s, solve_lambda(l, h, s), l, h)
        states[t] = s
    caps = np.maximum(rng.normal(states, states * c_sigma), cfg.capacity_floor)
    params = dict(v=v, p=p, low=l, high=h, s0=states[0], c_sigma=c_sigma)
    return NetworkPath(rtt, caps, states, params)


def download_time(size, capacity, rtt, start_rate):
    """Seconds to move ``size`` Mb through slow start capped at ``capacity`` Mbps.

    The rate starts at ``start_rate`` and doubles every RTT (continuous ramp with
    time constant rtt/ln 2) until it reaches capacity. If capacity does not exceed
    the start rate the transfer runs at capacity throughout.
    """
    size, capacity, rtt, start_rate = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64)
                                                            for x in (size, capacity, rtt, start_rate)))
    ramp = (capacity > start_rate) & (rtt > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = rtt / LN2
        ramp_data = tau * (capacity - start_rate)
        d_full = tau * np.log(capacity / start_rate) + (size - ramp_data) / capacity
        d_part = tau * np.log1p(size / (tau * start_rate))
        d = np.where(ramp, np.where(size >= ramp_data, d_full, d_part), size / capacity)
    return d if d.ndim else float(d)


def achieved_throughput_closed_form(size, capacity, rtt, start_rate):
    """Achieved chunk throughput (Mbps) under the slow-start model."""
    size, capacity, rtt, start_rate = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64)
                                                            for x in (size, capacity, rtt, start_rate)))
    ramp = (capacity > start_rate) & (rtt > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = rtt / LN2
        overhead = tau * (capacity * np.log(capacity / start_rate) - capacity + start_rate)
        m_full = capacity / (1.0 + overhead / size)
        m_part = size / (tau * np.log(size / (tau * start_rate) + 1.0))
        m = np.where(ramp, np.where(size >= tau * (capacity - start_rate), m_full, m_part), capacity)
    return m if m.ndim else float(m)


def buffer_update(b, d, chunk_seconds, buffer_cap):
    """Buffer at the next request, rebuffer seconds and idle wait after one chunk."""
    b = np.asarray(b, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    rebuffer = np.maximum(0.0, d - b)
    after = np.maximum(0.0, b - d) + chunk_seconds
    wait = np.maximum(0.0, after - buffer_cap)
    b_next = np.minimum(after, buffer_cap)
    if b_next.ndim == 0:
        return float(b_next), float(rebuffer), float(wait)
    return b_next, rebuffer, wait


# ---------------------------------------------------------------- policies

def _history_estimate(hist, how):
    """Throughput estimate from a NaN-padded (n, L) history; NaN when empty."""
    valid = ~np.isnan(hist)
    count = valid.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        if how == "harmonic":
            est = count / np.where(valid, 1.0 / np.where(valid, hist, 1.0), 0.0).sum(axis=1)
        elif how == "max":
            est = np.where(valid, hist, -np.inf).max(axis=1)
        elif how == "min":
            est = np.where(valid, hist, np.inf).min(axis=1)
        else:
            raise ValueError(f"unknown throughput estimator {how!r}")
    return np.where(count > 0, est, np.nan)


def _highest_below(ladder, value):
    idx = np.searchsorted(ladder, value, side="right") - 1
    return np.where(np.isnan(value), 0, np.clip(idx, 0, len(ladder) - 1))


class AbrPolicy:
    """Vectorized bitrate policy; ``decide`` maps a batch of states to ladder indices.

    ``hist`` is the (n, lookback) throughput history, newest last, NaN where a
    slot is not filled yet; ``last_action`` is -1 before the first chunk and
    ``noise`` holds two U(0,1) draws per row. Deterministic policies ignore noise.
    """

    lookback = 5

    def __init__(self, config):
        self.config = config
        self.ladder = np.asarray(config.ladder)
        self.sizes = config.chunk_sizes

    def decide(self, buffer, hist, last_action, noise):
        raise NotImplementedError


class BBA(AbrPolicy):
    def __init__(self, config, reservoir=5.0, cushion=5.0):
        super().__init__(config)
        self.reservoir, self.cushion = float(reservoir), float(cushion)

    def decide(self, buffer, hist, last_action, noise):
        lo, hi = self.ladder[0], self.ladder[-1]
        f = lo + (buffer - self.reservoir) / self.cushion * (hi - lo)
        idx = _highest_below(self.ladder, f)
        top = len(self.ladder) - 1
        return np.where(buffer < self.reservoir, 0, np.where(buffer >= self.reservoir + self.cushion, top, idx))


class BolaBasic(AbrPolicy):
    def __init__(self, config, V=0.71, gamma=0.22):
        super().__init__(config)
        self.V, self.gamma = float(V), float(gamma)
        self.utility = np.log(self.sizes / self.sizes[0])

    def decide(self, buffer, hist, last_action, noise):
        q = np.asarray(buffer)[:, None] / self.config.chunk_seconds
        score = (self.V * (self.utility + self.gamma * self.config.chunk_seconds) - q) / self.sizes
        return np.argmax(score, axis=1)


class RandomAbr(AbrPolicy):
    def decide(self, buffer, hist, last_action, noise):
        return np.minimum((noise[:, 0] * len(self.ladder)).astype(np.int64), len(self.ladder) - 1)


class BBARandom(BBA):
    def __init__(self, config, reservoir=10.0, cushion=5.0, random_prob=0.5):
        super().__init__(config, reservoir, cushion)
        self.random_prob = float(random_prob)

    def decide(self, buffer, hist, last_action, noise):
        rand = np.minimum((noise[:, 1] * len(self.ladder)).astype(np.int64), len(self.ladder) - 1)
        return np.where(noise[:, 0] < self.random_prob, rand, super().decide(buffer, hist, last_action, noise))


class RateBased(AbrPolicy):
    def __init__(self, config, estimator="harmonic", lookback=5):
        super().__init__(config)
        self.estimator, self.lookback = estimator, int(lookback)

    def decide(self, buffer, hist, last_action, noise):
        return _highest_below(self.ladder, _history_estimate(hist[:, -self.lookback:], self.estimator))


class MPC(AbrPolicy):
    """Exhaustive lookahead over all bitrate sequences; ties go to the lower index."""

    block = 256

    def __init__(self, config, lookback=5, lookahead=5, rebuffer_penalty=4.3):
        super().__init__(config)
        self.lookback, self.lookahead = int(lookback), int(lookahead)
        self.penalty = float(rebuffer_penalty)

    def decide(self, buffer, hist, last_action, noise):
        est = _history_estimate(hist[:, -self.lookback:], "harmonic")
        out = np.zeros(len(buffer), dtype=np.int64)
        ok = ~np.isnan(est)
        rows = np.flatnonzero(ok)
        for start in range(0, len(rows), self.block):
            r = rows[start:start + self.block]
            out[r] = self._plan(buffer[r], est[r], last_action[r])
        return out

    def _plan(self, buffer, est, last_action):
        cfg, q, n_a = self.config, self.ladder, len(self.ladder)
        n = len(buffer)
        has_prev = last_action >= 0
        prev_q = np.where(has_prev, q[np.maximum(last_action, 0)], 0.0)[:, None]
        b = buffer[:, None].astype(np.float64)
        reward = np.zeros((n, 1))
        dl = self.sizes[None, None, :] / est[:, None, None]
        for k in range(self.lookahead):
            b3 = b[:, :, None]
            rebuf = np.maximum(0.0, dl - b3)
            b_next = np.minimum(np.maximum(0.0, b3 - dl) + cfg.chunk_seconds, cfg.buffer_cap)
            if k == 0:
                smooth = np.where(has_prev[:, None, None], np.abs(q[None, None, :] - prev_q[:, :, None]), 0.0)
            else:
                smooth = np.abs(q[None, None, :] - prev_q[:, :, None])
            r = reward[:, :, None] + q[None, None, :] - smooth - self.penalty * rebuf
            width = b.shape[1] * n_a
            reward = r.reshape(n, width)
            b = b_next.reshape(n, width)
            prev_q = np.broadcast_to(q[None, None, :], (n, width // n_a, n_a)).reshape(n, width)
        return np.argmax(reward, axis=1) // n_a ** (self.lookahead - 1)


ABR_POLICY_KINDS = {
    "bba": BBA,
    "bola": BolaBasic,
    "random": RandomAbr,
    "bba_random": BBARandom,
    "mpc": MPC,
    "rate": RateBased,
}


def make_policy(spec, config):
    try:
        cls = ABR_POLICY_KINDS[spec.kind]
    except KeyError:
        raise ValueError(f"unknown ABR policy kind {spec.kind!r}") from None
    return cls(config, **spec.params)


def policy_decide(spec, state, config):
    """Single-state convenience wrapper: ``state`` is an :class:`AbrState`."""
    pol = make_policy(spec, config)
    hist = np.full((1, pol.lookback), np.nan)
    recent = [x[0] for x in state.history][-pol.lookback:]
    if recent:
        hist[0, -len(recent):] = recent
    last = state.history[-1][2] if state.history else -1
    noise = np.asarray(state.noise if state.noise is not None else (0.5, 0.5), dtype=float)[None, :]
    return int(pol.decide(np.array([state.buffer], dtype=float), hist, np.array([last]), noise)[0])


@dataclass
class AbrState:
    buffer: float
    t: int = 1
    history: list = field(default_factory=list)  # (throughput, download time, action) tuples
    noise: tuple | None = None


def default_policies():
    return [
        PolicySpec("bba", "bba", {"reservoir": 5.0, "cushion": 5.0}),
        PolicySpec("bola", "bola", {"V": 0.71, "gamma": 0.22}),
        PolicySpec("random", "random", {}),
        PolicySpec("bba_random1", "bba_random", {"reservoir": 10.0, "cushion": 5.0, "random_prob": 0.5}),
        PolicySpec("bba_random2", "bba_random", {"reservoir": 20.0, "cushion": 10.0, "random_prob": 0.5}),
        PolicySpec("mpc", "mpc", {"lookback": 5, "lookahead": 5, "rebuffer_penalty": 4.3}),
        PolicySpec("rate", "rate", {"estimator": "harmonic"}),
        PolicySpec("optimistic_rate", "rate", {"estimator": "max"}),
        PolicySpec("pessimistic_rate", "rate", {"estimator": "min"}),
    ]


# ---------------------------------------------------------------- episodes

@dataclass
class AbrRollout:
    """Per-step arrays of shape (n, H) for a batch of simulated sessions."""

    buffers: np.ndarray
    actions: np.ndarray
    throughputs: np.ndarray
    download_times: np.ndarray
    rebuffers: np.ndarray
    waits: np.ndarray
    next_buffers: np.ndarray

    def trajectory(self, i, traj_id, policy_id, latents=None):
        last = np.concatenate([[0.0], self.throughputs[i, :-1]])
        return Trajectory(traj_id, policy_id, np.column_stack([self.buffers[i], last]), self.actions[i],
                          np.column_stack([self.throughputs[i], self.download_times[i]]), latents)


def rollout(policy, config, noise, step_fn, buffer0=None):
    """Drive ``policy`` for noise.shape[1] steps over n sessions in lock-step.

    ``step_fn(t, buffer, actions)`` returns (throughput, download_time, next_buffer,
    rebuffer, wait) arrays; the policy sees the throughputs it returns.
    """
    n, horizon = noise.shape[:2]
    out = {k: np.zeros((n, horizon)) for k in ("buffers", "throughputs", "download_times", "rebuffers",
                                               "waits", "next_buffers")}
    actions = np.zeros((n, horizon), dtype=np.int64)
    b = np.zeros(n) if buffer0 is None else np.asarray(buffer0, dtype=np.float64).copy()
    hist = np.full((n, policy.lookback), np.nan)
    last = np.full(n, -1, dtype=np.int64)
    for t in range(horizon):
        a = np.asarray(policy.decide(b, hist, last, noise[:, t]), dtype=np.int64)
        m, d, b_next, rebuf, wait = step_fn(t, b, a)
        out["buffers"][:, t] = b
        actions[:, t] = a
        out["throughputs"][:, t] = m
        out["download_times"][:, t] = d
        out["rebuffers"][:, t] = rebuf
        out["waits"][:, t] = wait
        out["next_buffers"][:, t] = b_next
        hist = np.concatenate([hist[:, 1:], np.asarray(m, dtype=np.float64)[:, None]], axis=1)
        last = a
        b = np.asarray(b_next, dtype=np.float64)
    return AbrRollout(actions=actions, **out)


def true_step_fn(config, capacities, rtts):
    """Environment dynamics over latent (n, H) capacities and (n,) RTTs."""
    sizes = config.chunk_sizes
    start = config.start_rate(rtts)

    def step(t, b, a):
        s = sizes[a]
        d = download_time(s, capacities[:, t], rtts, start)
        b_next, rebuf, wait = buffer_update(b, d, config.chunk_seconds, config.buffer_cap)
        return s / d, d, b_next, rebuf, wait

    return step


def simulate_latents(policy, config, capacities, rtts, noise):
    capacities = np.atleast_2d(np.asarray(capacities, dtype=np.float64))
    rtts = np.atleast_1d(np.asarray(rtts, dtype=np.float64))
    return rollout(policy, config, noise, true_step_fn(config, capacities, rtts))


def run_episode(path, policy_spec, config, horizon, noise=None, traj_id=0, policy_id=0):
    """Stream ``horizon`` chunks over ``path`` under one policy."""
    if len(path.capacities) < horizon:
        raise ValueError("network path shorter than horizon")
    if noise is None:
        noise = np.full((horizon, 2), 0.5)
    caps = path.capacities[:horizon]
    roll = simulate_latents(make_policy(policy_spec, config), config, caps[None, :], [path.rtt],
                            np.asarray(noise)[None, :horizon])
    latents = np.column_stack([caps, np.full(horizon, path.rtt)])
    return roll.trajectory(0, traj_id, policy_id, latents)


def rebuffer_seconds(buffers, download_times):
    return np.maximum(0.0, np.asarray(download_times) - np.asarray(buffers))

