"""Shared domain types, dataset serialization and the potential-outcome tensor."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ENV_KINDS = ("abr", "lb")
FORMAT_VERSION = 1


def _frozen(a, dtype=np.float64, ndim=2):
    a = np.array(a, dtype=dtype)
    if ndim == 2 and a.ndim == 1:
        a = a.reshape(-1, 1)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Step:
    obs: np.ndarray
    action: int
    trace: np.ndarray
    latent_truth: np.ndarray | None = None


@dataclass(frozen=True)
class PolicySpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "params": self.params}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["kind"], dict(d.get("params", {})))


class Trajectory:
    """One logged stream/job sequence; per-step arrays indexed t = 1..H in order.

    Stored column-wise: ``obs`` (H, n_obs), ``actions`` (H,), ``traces`` (H, D) and
    optionally ``latents`` (H, n_latent). Arrays are read-only.
    """

    def __init__(self, id, policy_id, obs, actions, traces, latents=None):
        self.id = int(id)
        self.policy_id = int(policy_id)
        self.obs = _frozen(obs)
        self.actions = _frozen(actions, dtype=np.int64, ndim=1)
        self.traces = _frozen(traces)
        self.latents = None if latents is None else _frozen(latents)
        h = len(self.actions)
        if h < 1:
            raise ValueError("trajectory horizon must be >= 1")
        shapes = [len(self.obs), len(self.traces)] + ([] if self.latents is None else [len(self.latents)])
        if any(s != h for s in shapes):
            raise ValueError("per-step arrays disagree on horizon")

    @property
    def horizon(self):
        return len(self.actions)

    def __len__(self):
        return self.horizon

    @property
    def steps(self):
        return [self.step(t) for t in range(1, self.horizon + 1)]

    def step(self, t):
        """Step ``t`` with 1-based indexing."""
        i = t - 1
        lat = None if self.latents is None else self.latents[i]
        return Step(self.obs[i], int(self.actions[i]), self.traces[i], lat)

    def replace(self, **kw):
        fields = dict(id=self.id, policy_id=self.policy_id, obs=self.obs, actions=self.actions,
                      traces=self.traces, latents=self.latents)
        fields.update(kw)
        return Trajectory(**fields)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        same_lat = (self.latents is None and other.latents is None) or (
            self.latents is not None and other.latents is not None
            and np.array_equal(self.latents, other.latents)
        )
        return (self.id == other.id and self.policy_id == other.policy_id
                and np.array_equal(self.obs, other.obs) and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.traces, other.traces) and same_lat)

    __hash__ = None

    def __repr__(self):
        return f"Trajectory(id={self.id}, policy_id={self.policy_id}, horizon={self.horizon})"


@dataclass
class RCTDataset:
    trajectories: list
    policies: list
    env_config: dict
    seed: int
    env_kind: str
    obs_dim: int = 0
    trace_dim: int = 0
    latent_dim: int = 0

    def __post_init__(self):
        if self.env_kind not in ENV_KINDS:
            raise ValueError(f"env_kind must be one of {ENV_KINDS}")
        self.trajectories = sorted(self.trajectories, key=lambda tr: tr.id)
        if self.trajectories:
            first = self.trajectories[0]
            self.obs_dim = first.obs.shape[1]
            self.trace_dim = first.traces.shape[1]
            self.latent_dim = 0 if first.latents is None else first.latents.shape[1]
        for tr in self.trajectories:
            if not 0 <= tr.policy_id < len(self.policies):
                raise ValueError(f"trajectory {tr.id} has policy_id {tr.policy_id} outside the registry")
            if tr.traces.shape[1] != self.trace_dim or tr.obs.shape[1] != self.obs_dim:
                raise ValueError("trace/obs dimension must be constant within a dataset")
            has_lat = tr.latents is not None
            if has_lat != (self.latent_dim > 0):
                raise ValueError("latent_truth must be present on all trajectories or none")

    @property
    def synthetic(self):
        return self.latent_dim > 0

    @property
    def action_count(self):
        if self.env_kind == "abr":
            return len(self.env_config["ladder"])
        return int(self.env_config["n_servers"])

    @property
    def n_steps(self):
        return sum(tr.horizon for tr in self.trajectories)

    def policy_ids(self):
        return sorted({tr.policy_id for tr in self.trajectories})

    def by_id(self, traj_id):
        for tr in self.trajectories:
            if tr.id == traj_id:
                return tr
        raise KeyError(f"no trajectory with id {traj_id}")

    def select(self, policy_ids=None, exclude=None):
        """Subset of trajectories; the policy registry is kept so ids stay valid."""
        keep = []
        for tr in self.trajectories:
            if policy_ids is not None and tr.policy_id not in policy_ids:
                continue
            if exclude is not None and tr.policy_id in exclude:
                continue
            keep.append(tr)
        return RCTDataset(keep, self.policies, self.env_config, self.seed, self.env_kind,
                          self.obs_dim, self.trace_dim, self.latent_dim)

    def manifest(self):
        return {
            "format_version": FORMAT_VERSION,
            "env_kind": self.env_kind,
            "seed": int(self.seed),
            "policies": [p.to_dict() for p in self.policies],
            "env_config": self.env_config,
            "n_trajectories": len(self.trajectories),
            "trace_dim": self.trace_dim,
            "action_count": self.action_count,
            "obs_dim": self.obs_dim,
            "latent_dim": self.latent_dim,
        }

    def fingerprint(self):
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for tr in self.trajectories:
            h.update(np.int64([tr.id, tr.policy_id]).tobytes())
            for a in (tr.obs, tr.actions, tr.traces, tr.latents):
                if a is not None:
                    h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def steps_header(obs_dim, trace_dim, latent_dim):
    return (["traj_id", "t", "policy_id"] + [f"obs_{i}" for i in range(obs_dim)] + ["action"]
            + [f"trace_{i}" for i in range(trace_dim)] + [f"latent_{i}" for i in range(latent_dim)])


def _fmt(x):
    return format(float(x), ".17g")


def write_steps_csv(path, trajectories, obs_dim, trace_dim, latent_dim):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(steps_header(obs_dim, trace_dim, latent_dim))
        for tr in trajectories:
            for i in range(tr.horizon):
                row = [tr.id, i + 1, tr.policy_id]
                row += [_fmt(v) for v in tr.obs[i]]
                row.append(int(tr.actions[i]))
                row += [_fmt(v) for v in tr.traces[i]]
                if latent_dim:
                    row += [_fmt(v) for v in tr.latents[i]]
                w.writerow(row)


def read_steps_csv(path, obs_dim, trace_dim, latent_dim):
    """Parse a steps CSV into trajectories (floats parsed exactly via ``float``)."""
    header = steps_header(obs_dim, trace_dim, latent_dim)
    rows = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        got = next(r, None)
        if got != header:
            raise ValueError(f"{path}: unexpected header {got}")
        o0, a_col = 3, 3 + obs_dim
        t0, l0 = a_col + 1, a_col + 1 + trace_dim
        for line in r:
            key = int(line[0])
            rec = rows.setdefault(key, {"policy_id": int(line[2]), "t": [], "obs": [], "a": [], "m": [], "u": []})
            rec["t"].append(int(line[1]))
            rec["obs"].append([float(v) for v in line[o0:a_col]])
            rec["a"].append(int(line[a_col]))
            rec["m"].append([float(v) for v in line[t0:l0]])
            rec["u"].append([float(v) for v in line[l0:l0 + latent_dim]])
    out = []
    for key, rec in rows.items():
        if rec["t"] != list(range(1, len(rec["t"]) + 1)):
            raise ValueError(f"{path}: steps of trajectory {key} are not contiguous from t=1")
        shape = lambda v, d: np.array(v, dtype=np.float64).reshape(len(rec["t"]), d)
        out.append(Trajectory(key, rec["policy_id"], shape(rec["obs"], obs_dim), rec["a"],
                              shape(rec["m"], trace_dim),
                              shape(rec["u"], latent_dim) if latent_dim else None))
    return out


def save_dataset(dataset, path):
    """Write ``manifest.json`` and ``steps.csv`` into directory ``path``."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "manifest.json", "w") as f:
            json.dump(dataset.manifest(), f, indent=2)
        write_steps_csv(path / "steps.csv", dataset.trajectories, dataset.obs_dim,
                        dataset.trace_dim, dataset.latent_dim)
    except OSError as e:
        raise OSError(f"cannot write dataset to {path}: {e}") from e


def load_dataset(path):
    path = Path(path)
    try:
        with open(path / "manifest.json") as f:
            man = json.load(f)
    except OSError as e:
        raise OSError(f"cannot read dataset manifest in {path}: {e}") from e
    trajs = read_steps_csv(path / "steps.csv", man["obs_dim"], man["trace_dim"], man["latent_dim"])
    if len(trajs) != man["n_trajectories"]:
        raise ValueError(f"{path}: manifest lists {man['n_trajectories']} trajectories, found {len(trajs)}")
    return RCTDataset(trajs, [PolicySpec.from_dict(p) for p in man["policies"]], man["env_config"],
                      man["seed"], man["env_kind"], man["obs_dim"], man["trace_dim"], man["latent_dim"])


@dataclass
class OutcomeTensor:
    """A x U x D potential outcomes with exactly one revealed row per column.

    ``values`` holds zeros wherever ``observed`` is False.
    """

    values: np.ndarray
    observed: np.ndarray
    observed_action: np.ndarray
    column_policy: np.ndarray
    column_index: dict = field(default_factory=dict)

    @property
    def dims(self):
        return self.values.shape

    @classmethod
    def from_observations(cls, n_actions, actions, traces, column_policy, column_index=None):
        actions = np.asarray(actions, dtype=np.int64)
        traces = np.asarray(traces, dtype=np.float64)
        if traces.ndim == 1:
            traces = traces[:, None]
        u, d = traces.shape
        if actions.shape != (u,):
            raise ValueError("one action per column required")
        if u and (actions.min() < 0 or actions.max() >= n_actions):
            raise ValueError(f"action index outside 0..{n_actions - 1}")
        values = np.zeros((n_actions, u, d))
        observed = np.zeros((n_actions, u), dtype=bool)
        values[actions, np.arange(u)] = traces
        observed[actions, np.arange(u)] = True
        if column_index is None:
            column_index = {(0, b + 1): b for b in range(u)}
        return cls(values, observed, actions, np.asarray(column_policy, dtype=np.int64), column_index)

    def observed_traces(self):
        return self.values[self.observed_action, np.arange(len(self.observed_action))]


def build_outcome_tensor(dataset, trace_columns=None):
    """Potential-outcome view of a dataset; columns ordered by (trajectory id, t)."""
    a_count = dataset.action_count
    cols = list(range(dataset.trace_dim)) if trace_columns is None else list(trace_columns)
    acts, traces, pols, index = [], [], [], {}
    beta = 0
    for tr in dataset.trajectories:  # already sorted by id
        if tr.actions.min() < 0 or tr.actions.max() >= a_count:
            raise ValueError(f"trajectory {tr.id} uses actions outside the {a_count}-action space")
        for i in range(tr.horizon):
            index[(tr.id, i + 1)] = beta
            beta += 1
        acts.append(tr.actions)
        traces.append(tr.traces[:, cols])
        pols.append(np.full(tr.horizon, tr.policy_id))
    if acts:
        acts, traces, pols = np.concatenate(acts), np.vstack(traces), np.concatenate(pols)
    else:
        acts, traces, pols = np.zeros(0, int), np.zeros((0, len(cols))), np.zeros(0, int)
    return OutcomeTensor.from_observations(a_count, acts, traces, pols, index)


def sub_seed(seed, *keys):
    """Independent generator for (seed, keys...) such as (dataset seed, trajectory id, stream)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys)))
