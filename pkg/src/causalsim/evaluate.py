"""Evaluation grid, discriminator confusion analysis and Pareto sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import simulate
from .core import PolicySpec
from .metrics import emd, mape, mse, qoe, stall_rate
from .rct import counterfactual_batch, env_config_of

log = logging.getLogger(__name__)

SIMULATORS = ("causalsim", "expertsim", "slsim")


def run_simulator(name, model, trajs, target, env_config, noise_seed, target_pid=-1, env_kind="abr"):
    if name == "causalsim":
        return simulate.causalsim_batch(model, trajs, target, env_config, noise_seed, target_pid)
    if name == "slsim":
        return simulate.slsim_batch(model, trajs, target, env_config, noise_seed, target_pid)
    if name == "expertsim":
        return simulate.expertsim_batch(trajs, target, env_config, noise_seed, target_pid, env_kind)
    raise ValueError(f"unknown simulator {name!r}")


def _group(dataset, pid, limit=None):
    trajs = [tr for tr in dataset.trajectories if tr.policy_id == pid]
    return trajs[:limit] if limit else trajs


def pair_scores(env_kind, sim, truth, target_factual=None, chunk_seconds=4.0):
    """Accuracy of simulated trajectories against the oracle on the same latents."""
    if env_kind == "abr":
        b_sim = np.concatenate([tr.obs[1:, 0] for tr in sim])
        b_true = np.concatenate([tr.obs[1:, 0] for tr in truth])
        out = {
            "buffer_mape": mape(b_true, b_sim),
            "buffer_mse": float(np.mean([mse(s.obs[:, 0], t.obs[:, 0]) for s, t in zip(sim, truth)])),
            "stall_rate_error": float(np.mean([abs(stall_rate(s, chunk_seconds) - stall_rate(t, chunk_seconds))
                                               for s, t in zip(sim, truth)])),
        }
        if target_factual:
            out["buffer_emd"] = emd(np.concatenate([tr.obs[:, 0] for tr in sim]),
                                    np.concatenate([tr.obs[:, 0] for tr in target_factual]))
        return out
    return {
        "processing_mape": mape(np.concatenate([t.traces[:, 0] for t in truth]),
                                np.concatenate([s.traces[:, 0] for s in sim])),
        "latency_mape": mape(np.concatenate([t.traces[:, 1] for t in truth]),
                             np.concatenate([s.traces[:, 1] for s in sim])),
    }


def pair_metric(model, dataset, sources, target_pid, max_per_source=None, simulator="causalsim"):
    """Tuning metric for one target: mean over sources of buffer EMD (ABR) or processing MAPE (LB)."""
    spec = dataset.policies[target_pid]
    factual = _group(dataset, target_pid)
    vals = []
    for src in sources:
        trajs = _group(dataset, src, max_per_source)
        if not trajs:
            continue
        sim = run_simulator(simulator, model, trajs, spec, dataset.env_config, dataset.seed, target_pid,
                            dataset.env_kind)
        if dataset.env_kind == "abr":
            vals.append(emd(np.concatenate([tr.obs[:, 0] for tr in sim]),
                            np.concatenate([tr.obs[:, 0] for tr in factual])))
        else:
            truth = counterfactual_batch(dataset, trajs, target_pid)
            vals.append(pair_scores("lb", sim, truth)["processing_mape"])
    return float(np.mean(vals))


@dataclass
class MetricReport:
    rows: list  # one dict per (source, target, simulator)
    provenance: dict = field(default_factory=dict)

    def values(self, simulator, metric, target=None):
        return np.array([r[metric] for r in self.rows if r["simulator"] == simulator and metric in r
                         and (target is None or r["target"] == target)])

    def median(self, simulator, metric):
        v = self.values(simulator, metric)
        return float(np.median(v)) if v.size else float("nan")

    def summary(self, metrics):
        sims = sorted({r["simulator"] for r in self.rows})
        return {s: {m: self.median(s, m) for m in metrics} for s in sims}


def eval_grid(dataset, models, targets, simulators=SIMULATORS, max_per_source=None):
    """Score every simulator on every (source, target) pair, target != source.

    ``models[target][simulator]`` is a model trained without the target's
    trajectories; ExpertSim needs no model. Missing models are skipped and noted.
    """
    cfg = env_config_of(dataset.env_kind, dataset.env_config)
    rows, skipped = [], []
    for tgt in targets:
        spec = dataset.policies[tgt]
        factual = _group(dataset, tgt)
        for src in dataset.policy_ids():
            if src == tgt:
                continue
            trajs = _group(dataset, src, max_per_source)
            truth = counterfactual_batch(dataset, trajs, tgt)
            for sim_name in simulators:
                if sim_name == "expertsim" and dataset.env_kind != "abr":
                    continue
                model = models.get(tgt, {}).get(sim_name)
                if model is None and sim_name != "expertsim":
                    skipped.append((tgt, sim_name))
                    continue
                sim = run_simulator(sim_name, model, trajs, spec, dataset.env_config, dataset.seed, tgt,
                                    dataset.env_kind)
                row = {"source": dataset.policies[src].name, "target": spec.name, "simulator": sim_name,
                       "n_trajectories": len(trajs)}
                row.update(pair_scores(dataset.env_kind, sim, truth, factual,
                                       getattr(cfg, "chunk_seconds", 4.0)))
                rows.append(row)
    for tgt, sim_name in sorted(set(skipped)):
        log.warning("no %s model for target %s; pairs skipped", sim_name, dataset.policies[tgt].name)
    prov = {"dataset": dataset.fingerprint(), "seed": dataset.seed,
            "models": {dataset.policies[t].name: {k: m.digest() for k, m in v.items() if m is not None}
                       for t, v in models.items()},
            "skipped": [[dataset.policies[t].name, s] for t, s in sorted(set(skipped))]}
    return MetricReport(rows, prov)


# ---------------------------------------------------------------- discriminator

@dataclass
class ConfusionReport:
    counts: np.ndarray       # K x K argmax counts, rows = true source policy
    mean_probs: np.ndarray   # K x K mean softmax output per true policy
    shares: np.ndarray       # population share of each source policy
    policy_ids: list

    @property
    def row_marginals(self):
        return self.counts / np.maximum(self.counts.sum(axis=1, keepdims=True), 1)

    def max_share_gap(self):
        """Largest |mean predicted probability - population share| over all rows and columns."""
        return float(np.max(np.abs(self.mean_probs - self.shares[None, :])))


def confusion_matrix(model, dataset):
    from .train import training_arrays

    arr = training_arrays(dataset)
    labels = {pid: k for k, pid in enumerate(model.policy_ids)}
    y = np.array([labels[pid] for pid in np.array(dataset.policy_ids())[arr.label]])
    u = model.latents(arr.trace, arr.action, arr.extra.get("d"))
    probs = model.discriminator_probs(u)
    k = len(model.policy_ids)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y, probs.argmax(axis=1)), 1)
    mean_probs = np.zeros((k, k))
    for i in range(k):
        if np.any(y == i):
            mean_probs[i] = probs[y == i].mean(axis=0)
    shares = np.bincount(y, minlength=k) / len(y)
    return ConfusionReport(counts, mean_probs, shares, list(model.policy_ids))


# ---------------------------------------------------------------- Pareto sweeps

PARETO_FAMILIES = {"bba": ("reservoir", "cushion"), "bola": ("V", "gamma")}


def pareto_frontier(points):
    """Indices of points not dominated under (minimize stall rate, maximize bitrate)."""
    keep = []
    for i, p in enumerate(points):
        dominated = any(
            q["stall_rate"] <= p["stall_rate"] and q["mean_bitrate"] >= p["mean_bitrate"]
            and (q["stall_rate"] < p["stall_rate"] or q["mean_bitrate"] > p["mean_bitrate"])
            for j, q in enumerate(points) if j != i)
        if not dominated:
            keep.append(i)
    return keep


def pareto_sweep(model, dataset, family, grid, simulator="causalsim", sources=None):
    """Evaluate each parameterization of ``family`` by counterfactual rollout over the dataset."""
    if dataset.env_kind != "abr":
        raise ValueError("Pareto sweeps are defined for ABR policies")
    if family not in PARETO_FAMILIES:
        raise ValueError(f"unknown policy family {family!r}; expected one of {sorted(PARETO_FAMILIES)}")
    grid = list(grid)
    if not grid:
        raise ValueError("empty parameter grid")
    cfg = env_config_of("abr", dataset.env_config)
    trajs = [tr for tr in dataset.trajectories if sources is None or tr.policy_id in sources]
    points = []
    for params in grid:
        spec = PolicySpec(f"{family}_" + "_".join(f"{k}{v:g}" for k, v in params.items()), family, dict(params))
        sim = run_simulator(simulator, model, trajs, spec, dataset.env_config, dataset.seed)
        points.append({
            "policy": spec.name, **params,
            "stall_rate": float(np.mean([stall_rate(tr, cfg.chunk_seconds) for tr in sim])),
            "mean_bitrate": float(np.mean([np.asarray(cfg.ladder)[tr.actions].mean() for tr in sim])),
            "mean_qoe": float(np.mean([qoe(tr, cfg.ladder)[1] for tr in sim])),
        })
    front = set(pareto_frontier(points))
    for i, p in enumerate(points):
        p["on_frontier"] = i in front
    return points
