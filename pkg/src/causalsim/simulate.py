"""Counterfactual rollouts of a target policy over logged source trajectories.

Three simulators share the same rollout loops as the true environments:
CausalSim (extracted latents + factorized trace model), ExpertSim (replays
the logged throughput as if it were exogenous) and SLSim (supervised step
model). All functions are vectorized over trajectories of equal horizon.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import abr_env, lb_env
from .core import write_steps_csv
from .rct import env_config_of, make_policy, noise_width, policy_noise

THROUGHPUT_FLOOR = 1e-3
PROCESSING_FLOOR = 1e-4


def _groups(trajs):
    by_h = {}
    for k, tr in enumerate(trajs):
        by_h.setdefault(tr.horizon, []).append(k)
    return by_h.values()


def _noise(trajs, horizon, width, seed):
    return np.stack([policy_noise(seed, tr.id, horizon, width) for tr in trajs])


def _check_obs(model, trajs):
    want = len(abr_env.OBS_NAMES) if model.env_kind == "abr" else model.n_actions
    if any(tr.obs.shape[1] != want for tr in trajs):
        raise ValueError(f"trajectories do not match the {model.env_kind} model's observation layout")


def _run(env_kind, trajs, target, env_config, noise_seed, target_pid, make_step, with_extras=False):
    """Shared driver: ``make_step(cfg, group)`` builds the per-group stepper or proc table."""
    cfg = env_config_of(env_kind, env_config)
    out = [None] * len(trajs)
    extras = [None] * len(trajs)
    for idx in _groups(trajs):
        group = [trajs[k] for k in idx]
        h = group[0].horizon
        noise = _noise(group, h, noise_width(env_kind, cfg), noise_seed)
        policy = make_policy(env_kind, target, cfg)
        if env_kind == "abr":
            step, ex = make_step(cfg, group)
            b0 = np.array([tr.obs[0, 0] for tr in group])
            roll = abr_env.rollout(policy, cfg, noise, step, b0)
        else:
            table, ex = make_step(cfg, group)
            roll = lb_env.queue_rollout(policy, table, cfg.delta(), noise)
        for j, k in enumerate(idx):
            out[k] = roll.trajectory(j, trajs[k].id, target_pid)
            extras[k] = {key: v[j] for key, v in ex.items()}
    return (out, extras) if with_extras else out


def _stack(group, col):
    return np.stack([tr.traces[:, col] for tr in group])


# ---------------------------------------------------------------- CausalSim

def causalsim_batch(model, trajs, target, env_config, noise_seed=0, target_pid=-1, with_extras=False):
    """CausalSim counterfactuals; ``with_extras`` also returns the dynamics head's download times."""
    if not trajs:
        return ([], []) if with_extras else []
    env_kind = model.env_kind
    _check_obs(model, trajs)
    scale = model.stats["trace"].std[0]
    emb = model.action_embeddings()

    def make(cfg, group):
        n, h = len(group), group[0].horizon
        acts = np.stack([tr.actions for tr in group])
        m = _stack(group, 0)
        d = _stack(group, 1)
        u = model.latents(m.ravel(), acts.ravel(), d.ravel()).reshape(n, h, model.rank)
        if env_kind == "lb":
            table = np.maximum(np.einsum("nhr,ar->nha", u, emb) * scale, PROCESSING_FLOOR)
            return table, {}
        sizes = cfg.chunk_sizes
        head_d = np.zeros((n, h))

        def step(t, b, a):
            m_sim = np.maximum(np.sum(u[:, t] * emb[a], axis=1) * scale, THROUGHPUT_FLOOR)
            b_head, d_head = model.predict_dynamics(b, m_sim, a)
            head_d[:, t] = d_head
            d_sim = sizes[a] / m_sim
            _, rebuf, wait = abr_env.buffer_update(b, d_sim, cfg.chunk_seconds, cfg.buffer_cap)
            return m_sim, d_sim, np.clip(b_head, 0.0, cfg.buffer_cap), rebuf, wait

        return step, {"head_download_time": head_d}

    return _run(env_kind, trajs, target, env_config, noise_seed, target_pid, make, with_extras)


def causalsim_rollout(model, traj, target, env_config, noise_seed=0, target_pid=-1):
    return causalsim_batch(model, [traj], target, env_config, noise_seed, target_pid)[0]


# ---------------------------------------------------------------- ExpertSim

def expertsim_batch(trajs, target, env_config, noise_seed=0, target_pid=-1, env_kind="abr"):
    if env_kind != "abr":
        raise ValueError("ExpertSim replays throughput traces and has no counterpart for load balancing: "
                         "processing times are not exogenous to the routing decision")
    if not trajs:
        return []

    def make(cfg, group):
        m = _stack(group, 0)
        sizes = cfg.chunk_sizes

        def step(t, b, a):
            d = sizes[a] / m[:, t]
            b_next, rebuf, wait = abr_env.buffer_update(b, d, cfg.chunk_seconds, cfg.buffer_cap)
            return m[:, t], d, b_next, rebuf, wait

        return step, {}

    return _run("abr", trajs, target, env_config, noise_seed, target_pid, make)


def expertsim_rollout(traj, target, env_config, noise_seed=0, target_pid=-1, env_kind="abr"):
    return expertsim_batch([traj], target, env_config, noise_seed, target_pid, env_kind)[0]


# ---------------------------------------------------------------- SLSim

def slsim_batch(model, trajs, target, env_config, noise_seed=0, target_pid=-1):
    if not trajs:
        return []
    env_kind = model.env_kind
    _check_obs(model, trajs)

    def make(cfg, group):
        n, h = len(group), group[0].horizon
        m = _stack(group, 0)
        if env_kind == "lb":
            a_all = np.tile(np.arange(model.n_actions), n * h)
            table = model.predict(np.repeat(m.ravel(), model.n_actions), a_all).reshape(n, h, model.n_actions)
            return np.maximum(table, PROCESSING_FLOOR), {}
        sizes = cfg.chunk_sizes

        def step(t, b, a):
            b_next, d = model.predict(m[:, t], a, b)
            d = np.maximum(d, sizes[a] / 1e3)
            rebuf = np.maximum(0.0, d - b)
            after = np.maximum(0.0, b - d) + cfg.chunk_seconds
            return sizes[a] / d, d, np.clip(b_next, 0.0, cfg.buffer_cap), rebuf, np.maximum(0.0, after - cfg.buffer_cap)

        return step, {}

    return _run(env_kind, trajs, target, env_config, noise_seed, target_pid, make)


def slsim_rollout(model, traj, target, env_config, noise_seed=0, target_pid=-1):
    return slsim_batch(model, [traj], target, env_config, noise_seed, target_pid)[0]


# ---------------------------------------------------------------- output

def write_rollouts(out_dir, trajs, provenance):
    """Steps CSV in the dataset schema plus a provenance JSON next to it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    obs_dim = trajs[0].obs.shape[1] if trajs else 0
    trace_dim = trajs[0].traces.shape[1] if trajs else 0
    write_steps_csv(out / "rollout_steps.csv", trajs, obs_dim, trace_dim, 0)
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    return out
