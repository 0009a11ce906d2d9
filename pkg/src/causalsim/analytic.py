"""Closed-form counterfactual recovery for low-rank potential-outcome tensors.

With an RCT, the per-policy average of the latent factors is the same for
every policy. For trace tensors that factor as M[a, u, :] = Z_a y_u, that
equality is a linear constraint on the unknown inverse action factors, which
can be solved from the observed entries alone. These routines are the exact,
noise-free counterpart of the learned simulator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import OutcomeTensor


class AssumptionError(ValueError):
    """A structural condition for exact recovery does not hold."""

    def __init__(self, assumption, message):
        super().__init__(f"{assumption}: {message}")
        self.assumption = assumption


SUFFICIENT_MEASUREMENTS = "sufficient measurements (D >= r)"
INVERTIBILITY = "invertibility of the action factors"
DIVERSE_POLICIES = "sufficient, diverse policies"


@dataclass
class FactorModel:
    """CP factors: M[alpha, beta, gamma] = sum_l x[alpha, l] y[beta, l] z[gamma, l]."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.x, self.y, self.z = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (self.x, self.y, self.z))
        r = {self.x.shape[1], self.y.shape[1], self.z.shape[1]}
        if len(r) != 1:
            raise ValueError("factor matrices must share the rank dimension")

    @property
    def rank(self):
        return self.x.shape[1]

    def tensor(self):
        return np.einsum("al,bl,gl->abg", self.x, self.y, self.z)

    def action_matrices(self):
        """Per action alpha, the D x r matrix mapping latent factors to traces."""
        return np.einsum("al,gl->agl", self.x, self.z)


@dataclass
class PolicyPartition:
    """Column sets per policy and per (policy, action)."""

    policies: list          # policy ids, in the order used for S
    groups: list            # index arrays, one per policy
    observed_action: np.ndarray

    @classmethod
    def from_tensor(cls, tensor):
        pols = sorted(set(np.asarray(tensor.column_policy).tolist()))
        groups = [np.flatnonzero(tensor.column_policy == p) for p in pols]
        return cls(pols, groups, np.asarray(tensor.observed_action))

    @classmethod
    def from_labels(cls, labels, observed_action):
        labels = np.asarray(labels)
        pols = sorted(set(labels.tolist()))
        return cls(pols, [np.flatnonzero(labels == p) for p in pols], np.asarray(observed_action))

    def __post_init__(self):
        n = len(self.observed_action)
        allcols = np.sort(np.concatenate(self.groups)) if self.groups else np.zeros(0, int)
        if not np.array_equal(allcols, np.arange(n)):
            raise ValueError("policy groups must partition the columns")

    @property
    def n_policies(self):
        return len(self.groups)

    def sizes(self):
        return np.array([len(g) for g in self.groups])

    def cell(self, p, alpha):
        g = self.groups[p]
        return g[self.observed_action[g] == alpha]


def _values(tensor):
    v = np.asarray(tensor.values, dtype=np.float64)
    return v[:, :, None] if v.ndim == 2 else v


def policy_action_means(tensor, partition):
    """(A, P, D) array of (1/U_p) * sum over the policy-p columns that took action alpha."""
    vals = _values(tensor)
    a_count, _, d = vals.shape
    out = np.zeros((a_count, partition.n_policies, d))
    for p, g in enumerate(partition.groups):
        if len(g) == 0:
            raise AssumptionError(DIVERSE_POLICIES, f"policy {partition.policies[p]} has no samples")
        for alpha in range(a_count):
            cols = partition.cell(p, alpha)
            if len(cols):
                out[alpha, p] = vals[alpha, cols].sum(axis=0) / len(g)
    return out


# ---------------------------------------------------------------- rank 1

@dataclass
class Rank1Result:
    completed: np.ndarray   # A x U
    factors: np.ndarray     # action factors, normalized so the first is 1
    latents: np.ndarray     # per-column latent, in the same gauge


def complete_rank1(tensor, partition=None):
    """Fill an A x U rank-one matrix from one observed entry per column.

    When every policy plays a single action, the ratio of two action factors is
    the ratio of the corresponding policy group means. Mixed policies go through
    the general linear route.
    """
    partition = partition or PolicyPartition.from_tensor(tensor)
    vals = _values(tensor)
    if vals.shape[2] != 1:
        raise ValueError("rank-one completion expects a single trace dimension")
    a_count = vals.shape[0]
    if any(len(g) == 0 for g in partition.groups):
        raise AssumptionError(DIVERSE_POLICIES, "empty policy group")
    obs = vals[partition.observed_action, np.arange(vals.shape[1]), 0]
    played = [np.unique(partition.observed_action[g]) for g in partition.groups]
    if all(len(pl) == 1 for pl in played):
        means = {}
        for g, pl in zip(partition.groups, played):
            means.setdefault(int(pl[0]), obs[g].mean())
        missing = sorted(set(range(a_count)) - set(means))
        if missing:
            raise AssumptionError(DIVERSE_POLICIES, f"actions {missing} are never taken")
        factors = np.array([means[a] / means[0] for a in range(a_count)])
    else:
        res = complete_rank_r(tensor, partition, 1)
        blocks = res.inverse_factors[:, 0, 0]
        factors = blocks[0] / blocks
    latents = obs / factors[partition.observed_action]
    return Rank1Result(np.outer(factors, latents), factors, latents)


# ---------------------------------------------------------------- rank r

@dataclass
class RankRResult:
    completed: np.ndarray        # A x U x D
    inverse_factors: np.ndarray  # A x r x D blocks mapping traces to latents (gauge-normalized)
    latents: np.ndarray          # U x r
    singular_values: np.ndarray  # of the stacked constraint system
    guard_ratio: float


def constraint_matrix(tensor, partition):
    """S (AD x P) of stacked per-policy means and V = S[:, 1:] - S[:, :1]."""
    means = policy_action_means(tensor, partition)
    a_count, p_count, d = means.shape
    s = means.transpose(0, 2, 1).reshape(a_count * d, p_count)
    return s, s[:, 1:] - s[:, :1]


def complete_rank_r(tensor, partition=None, r=None, guard=0.1, cond_limit=1e12):
    """Exact completion of a rank-r tensor with D = r under exact mean invariance.

    Solves Z V = 0 for the r x AD stacked inverse factors Z; any invertible
    r x r mixing of the solution cancels when the missing entries are filled.
    """
    partition = partition or PolicyPartition.from_tensor(tensor)
    vals = _values(tensor)
    a_count, u_count, d = vals.shape
    r = d if r is None else int(r)
    if d < r:
        raise AssumptionError(SUFFICIENT_MEASUREMENTS, f"trace dimension {d} is below rank {r}")
    if d != r:
        raise ValueError(f"exact recovery is implemented for D = r (got D={d}, r={r})")
    p_count = partition.n_policies
    if p_count < a_count * r:
        raise AssumptionError(DIVERSE_POLICIES, f"{p_count} policies, need at least A*r = {a_count * r}")
    taken = np.bincount(partition.observed_action, minlength=a_count)
    if np.any(taken == 0):
        raise AssumptionError(DIVERSE_POLICIES, f"actions {np.flatnonzero(taken == 0).tolist()} are never taken")
    _, v = constraint_matrix(tensor, partition)
    n = a_count * d
    # Right singular vectors of V^T; rows of Z span its null space.
    _, sv, vt = np.linalg.svd(v.T, full_matrices=True)
    sv_full = np.zeros(n)
    sv_full[:len(sv)] = sv
    rank_needed = n - r
    top = sv_full[rank_needed - 1] if rank_needed > 0 else np.inf
    ratio = float(sv_full[rank_needed] / top) if top > 0 else np.inf
    if not top > 0 or ratio > guard:
        raise AssumptionError(DIVERSE_POLICIES,
                              f"invariance constraints do not pin an {r}-dimensional solution "
                              f"(singular value ratio {ratio:.3g} > {guard})")
    z = vt[rank_needed:]
    blocks = z.reshape(r, a_count, d).transpose(1, 0, 2)
    blocks = blocks / np.linalg.norm(blocks[0])
    for alpha, blk in enumerate(blocks):
        if np.linalg.cond(blk) > cond_limit:
            raise AssumptionError(INVERTIBILITY, f"action {alpha} has a singular factor block")
    obs = vals[partition.observed_action, np.arange(u_count)]
    lat = np.einsum("urd,ud->ur", blocks[partition.observed_action], obs)
    fwd = np.linalg.inv(blocks)
    completed = np.einsum("adr,ur->aud", fwd, lat)
    return RankRResult(completed, blocks, lat, sv_full, ratio)


# ---------------------------------------------------------------- diagnostics

def check_assumptions(tensor, partition=None, r=1, guard=0.1):
    """Report on the conditions for exact recovery; never raises."""
    partition = partition or PolicyPartition.from_tensor(tensor)
    vals = _values(tensor)
    a_count, _, d = vals.shape
    counts = np.bincount(partition.observed_action, minlength=a_count)
    rep = {
        "A": a_count, "D": d, "r": int(r), "P": partition.n_policies,
        "sufficient_measurements": bool(d >= r),
        "enough_policies": bool(partition.n_policies >= a_count * r),
        "all_actions_taken": bool(np.all(counts > 0)),
        "action_counts": counts.tolist(),
    }
    try:
        s, v = constraint_matrix(tensor, partition)
        sv = np.linalg.svd(v, compute_uv=False) if v.size else np.zeros(0)
        n = a_count * d
        sv_full = np.zeros(n)
        sv_full[:len(sv)] = sv[:n]
        tol = sv_full[0] * n * np.finfo(float).eps * 10 if n and sv_full[0] > 0 else 0.0
        rank_v = int(np.sum(sv_full > tol))
        rep.update(rank_S=int(np.linalg.matrix_rank(s)), rank_V=rank_v, rank_V_required=n - r,
                   singular_values=sv_full.tolist())
        k = n - r
        if 0 < k < n and sv_full[k - 1] > 0:
            rep["guard_ratio"] = float(sv_full[k] / sv_full[k - 1])
            rep["condition_S"] = float(sv_full[0] / sv_full[k - 1])
        else:
            rep["guard_ratio"] = float("inf")
        rep["constraints_ok"] = bool(rank_v == n - r and rep["guard_ratio"] <= guard)
    except AssumptionError as e:
        rep.update(constraints_ok=False, error=str(e))
    rep["passed"] = bool(rep["sufficient_measurements"] and rep["enough_policies"]
                         and rep["all_actions_taken"] and rep["constraints_ok"])
    return rep


def svd_energy(matrix, k):
    """Share of the squared singular values captured by the top ``k``."""
    m = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    sv = np.linalg.svd(m, compute_uv=False)
    total = np.sum(sv**2)
    return float(np.sum(sv[:k] ** 2) / total) if total > 0 else 1.0


def slow_start_matrix(n_latents=49000, seed=0, config=None, path_length=100):
    """A x U achieved-throughput matrix over capacities and RTTs drawn from the trace generator."""
    from .abr_env import AbrConfig, achieved_throughput_closed_form, gen_markov_trace
    from .core import sub_seed

    cfg = config or AbrConfig()
    caps, rtts = [], []
    i = 0
    while sum(len(c) for c in caps) < n_latents:
        path = gen_markov_trace(sub_seed(seed, i), path_length, cfg)
        caps.append(path.capacities)
        rtts.append(np.full(path_length, path.rtt))
        i += 1
    c = np.concatenate(caps)[:n_latents]
    rtt = np.concatenate(rtts)[:n_latents]
    sizes = cfg.chunk_sizes[:, None]
    return achieved_throughput_closed_form(sizes, c[None, :], rtt[None, :], cfg.start_rate(rtt)[None, :])


def tensor_from_factors(factors, actions, policies):
    """Observed tensor for the given per-column actions and policy labels."""
    full = factors.tensor()
    return OutcomeTensor.from_observations(full.shape[0], actions, full[actions, np.arange(full.shape[1])],
                                           policies)
