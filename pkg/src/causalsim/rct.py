"""RCT data collection and the ground-truth counterfactual oracle of the synthetic environments."""

from __future__ import annotations

import numpy as np

from . import abr_env, lb_env
from .core import PolicySpec, RCTDataset, sub_seed

LATENT_STREAM = 0
NOISE_STREAM = 1
FLEET_KEY = 2**31 - 1


def env_config_of(env_kind, env_config):
    if env_kind == "abr":
        return env_config if isinstance(env_config, abr_env.AbrConfig) else abr_env.AbrConfig.from_dict(env_config or {})
    if env_kind == "lb":
        return env_config if isinstance(env_config, lb_env.LbConfig) else lb_env.LbConfig.from_dict(env_config or {})
    raise ValueError(f"unknown env_kind {env_kind!r}")


def policy_noise(seed, traj_id, horizon, width):
    """Uniform draws consumed by randomized policies at every step of one trajectory.

    Derived from (dataset seed, trajectory id) alone so any policy can be replayed
    on the same randomness.
    """
    return sub_seed(seed, traj_id, NOISE_STREAM).random((horizon, width))


def noise_width(env_kind, cfg):
    return 2 if env_kind == "abr" else cfg.n_servers


def make_policy(env_kind, spec, cfg):
    return (abr_env if env_kind == "abr" else lb_env).make_policy(spec, cfg)


def collect(env_kind, env_config, policies, n_trajectories, seed, horizon=None):
    """Generate ``n_trajectories`` fresh latent sequences, each under a uniformly drawn policy."""
    if not policies:
        raise ValueError("policy registry is empty")
    cfg = env_config_of(env_kind, env_config)
    if env_kind == "lb" and cfg.rates is None:
        cfg = cfg.with_rates(lb_env.gen_fleet(sub_seed(seed, FLEET_KEY), cfg).rates)
    horizon = int(horizon or cfg.horizon)
    assign = np.random.default_rng(seed).integers(len(policies), size=n_trajectories)
    ids = np.arange(n_trajectories)
    if env_kind == "abr":
        paths = [abr_env.gen_markov_trace(sub_seed(seed, i, LATENT_STREAM), horizon, cfg) for i in ids]
        latents = np.stack([np.column_stack([p.capacities, np.full(horizon, p.rtt)]) for p in paths]) \
            if n_trajectories else np.zeros((0, horizon, 2))
    else:
        latents = np.stack([lb_env.gen_job_sizes(sub_seed(seed, i, LATENT_STREAM), horizon, cfg).sizes[:, None]
                            for i in ids]) if n_trajectories else np.zeros((0, horizon, 1))
    trajs = []
    for pid, spec in enumerate(policies):
        rows = np.flatnonzero(assign == pid)
        if len(rows):
            trajs += replay_latents(env_kind, cfg, seed, ids[rows], latents[rows], spec, pid)
    return RCTDataset(trajs, list(policies), cfg.to_dict(), int(seed), env_kind)


def replay_latents(env_kind, cfg, seed, traj_ids, latents, spec, policy_id):
    """Run ``spec`` through the true dynamics on stored per-step latents (n, H, n_latent)."""
    n, horizon = latents.shape[:2]
    noise = np.stack([policy_noise(seed, i, horizon, noise_width(env_kind, cfg)) for i in traj_ids]) \
        if n else np.zeros((0, horizon, noise_width(env_kind, cfg)))
    policy = make_policy(env_kind, spec, cfg)
    if env_kind == "abr":
        roll = abr_env.simulate_latents(policy, cfg, latents[:, :, 0], latents[:, 0, 1], noise)
    else:
        roll = lb_env.queue_rollout(policy, lb_env.true_proc_table(latents[:, :, 0], cfg.rates), cfg.delta(), noise)
    return [roll.trajectory(k, traj_ids[k], policy_id, latents[k]) for k in range(n)]


def _resolve_target(dataset, target):
    if isinstance(target, PolicySpec):
        pid = next((i for i, p in enumerate(dataset.policies) if p == target), -1)
        return target, pid
    return dataset.policies[int(target)], int(target)


def counterfactual_batch(dataset, trajectories, target):
    """Oracle outcome of ``target`` (registry index or PolicySpec) on each trajectory's latents.

    Trajectories are grouped by horizon so each group runs vectorized.
    """
    if not dataset.synthetic:
        raise ValueError("counterfactual ground truth needs stored latents (synthetic dataset)")
    spec, pid = _resolve_target(dataset, target)
    cfg = env_config_of(dataset.env_kind, dataset.env_config)
    out = {}
    by_h = {}
    for tr in trajectories:
        if tr.latents is None:
            raise ValueError(f"trajectory {tr.id} has no latents")
        by_h.setdefault(tr.horizon, []).append(tr)
    for group in by_h.values():
        lat = np.stack([tr.latents for tr in group])
        for tr in replay_latents(dataset.env_kind, cfg, dataset.seed, [t.id for t in group], lat, spec, pid):
            out[tr.id] = tr
    return [out[tr.id] for tr in trajectories]


def counterfactual_ground_truth(dataset, traj_id, target):
    return counterfactual_batch(dataset, [dataset.by_id(traj_id)], target)[0]
