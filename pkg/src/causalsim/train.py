"""Training for the learned simulators.

CausalSim fits a latent extractor, an action encoder whose inner product with
the latent reconstructs the trace, an ABR dynamics head, and an adversarial
policy discriminator that pushes the extracted latents towards being
independent of the policy that collected them. SLSim is the plain supervised
step model used as a baseline.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .rct import env_config_of

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class Hyperparams:
    """Training knobs. Defaults follow the published synthetic-ABR table; see ``desk``."""

    kappa: float = 1.0
    kappa_grid: tuple = (0.01, 0.1, 1.0, 10.0, 100.0)
    num_train_it: int = 20000
    num_disc_it: int = 10
    batch_size: int = 8192
    lr: float = 1e-4
    disc_lr: float = 1e-4
    hidden: tuple = (128, 128)
    encoder_hidden: tuple = (64, 64)
    disc_hidden: tuple = (128, 128)
    loss_kind: str = "mse"
    delta: float = 1.0
    eta: float = 1.0
    rank: int | None = None
    trace_weight: float = 1.0
    positive_factors: bool = False
    seed: int = 0

    def __post_init__(self):
        self.kappa_grid = tuple(float(k) for k in self.kappa_grid)
        self.hidden, self.encoder_hidden, self.disc_hidden = (tuple(int(h) for h in x) for x in
                                                              (self.hidden, self.encoder_hidden, self.disc_hidden))
        for name in ("num_train_it", "num_disc_it", "batch_size", "lr", "disc_lr", "delta", "eta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.loss_kind not in ("mse", "l1", "huber"):
            raise ValueError(f"unsupported regression loss {self.loss_kind!r}")

    @classmethod
    def desk(cls, env_kind, **kw):
        """Budget preset for a single CPU, used by the acceptance runs."""
        base = dict(num_train_it=3000, num_disc_it=5, batch_size=512, lr=1e-3, disc_lr=1e-3,
                    hidden=(64, 64), encoder_hidden=(32, 32), disc_hidden=(64, 64))
        if env_kind == "lb":
            # the invariance signal is weak here, so the full-scale width and schedule are kept
            base.update(encoder_hidden=(), rank=1, positive_factors=True,
                        num_train_it=10000, hidden=(128, 128), num_disc_it=10)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x, center=True):
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0) if center else np.zeros(x.shape[1])
        std = x.std(axis=0) if center else np.sqrt((x * x).mean(axis=0))
        return cls(mean, np.where(std > 0, std, 1.0))

    def __call__(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------- data

@dataclass
class TrainingArrays:
    """Flattened training pairs; ABR keeps steps t < H so the next buffer is known."""

    env_kind: str
    trace: np.ndarray
    action: np.ndarray
    label: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.action)


def training_arrays(dataset):
    labels = {pid: k for k, pid in enumerate(dataset.policy_ids())}
    cols = {k: [] for k in ("m", "d", "a", "y", "b", "b_next")}
    for tr in dataset.trajectories:
        h = tr.horizon - 1 if dataset.env_kind == "abr" else tr.horizon
        if h < 1:
            continue
        cols["m"].append(tr.traces[:h, 0])
        cols["d"].append(tr.traces[:h, 1])
        cols["a"].append(tr.actions[:h])
        cols["y"].append(np.full(h, labels[tr.policy_id]))
        if dataset.env_kind == "abr":
            cols["b"].append(tr.obs[:h, 0])
            cols["b_next"].append(tr.obs[1:h + 1, 0])
    if not cols["m"]:
        raise ValueError("dataset has no usable training steps")
    cat = {k: np.concatenate(v) for k, v in cols.items() if v}
    extra = {"d": cat["d"]}
    if dataset.env_kind == "abr":
        extra.update(b=cat["b"], b_next=cat["b_next"])
    return TrainingArrays(dataset.env_kind, cat["m"], cat["a"].astype(np.int64), cat["y"].astype(np.int64), extra)


# ---------------------------------------------------------------- models

def _net_from(d):
    return None if d is None else nn.DenseNet.from_dict(d)


class CausalSimModel:
    """Extractor, action encoder, optional dynamics head and policy discriminator.

    Reconstructed trace (scaled units) is ``sum(encode(a) * latent)``. The trace
    scale is an uncentered RMS so the factorization is preserved exactly.
    """

    def __init__(self, env_kind, rank, extractor, encoder, discriminator, dynamics, stats, action_values,
                 policy_ids, hyper, fingerprint=""):
        self.env_kind = env_kind
        self.rank = int(rank)
        self.extractor, self.encoder, self.discriminator, self.dynamics = extractor, encoder, discriminator, dynamics
        self.stats = stats
        self.action_values = np.asarray(action_values, dtype=np.float64)
        self.policy_ids = list(policy_ids)
        self.hyper = hyper
        self.fingerprint = fingerprint

    @property
    def n_actions(self):
        return len(self.action_values)

    # feature maps -------------------------------------------------------
    def action_features(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        if self.env_kind == "abr":
            return self.stats["size"](self.action_values[actions][:, None])
        return np.eye(self.n_actions)[actions]

    def extractor_input(self, trace, actions, d=None):
        t = np.asarray(trace, dtype=np.float64)[:, None]
        if self.env_kind == "abr":
            d = np.asarray(d, dtype=np.float64)[:, None]
            return np.hstack([self.stats["m_in"](t), self.stats["d"](d), self.action_features(actions)])
        # gating by the chosen server lets a linear layer undo the per-server scale
        onehot = self.action_features(actions)
        return np.hstack([onehot * (t / self.stats["trace"].std), onehot])

    def dynamics_input(self, b, m_scaled, actions):
        b = self.stats["buffer"](np.asarray(b, dtype=np.float64)[:, None])
        return np.hstack([b, np.asarray(m_scaled)[:, None], self.action_features(actions)])

    # inference ----------------------------------------------------------
    def latents(self, trace, actions, d=None):
        return self.extractor(self.extractor_input(trace, actions, d))

    def action_embeddings(self):
        return self.encode(self.action_features(np.arange(self.n_actions)))

    def encode(self, x):
        z = self.encoder(x)
        return np.exp(z) if self.hyper.positive_factors else z

    def reconstruct(self, latents, actions):
        """Trace in raw units for ``actions`` under ``latents``."""
        emb = self.action_embeddings()[np.asarray(actions, dtype=np.int64)]
        return np.sum(emb * latents, axis=1) * self.stats["trace"].std[0]

    def predict_dynamics(self, b, m, actions):
        """(next buffer, download time) from the dynamics head, raw units."""
        m_scaled = np.asarray(m, dtype=np.float64) / self.stats["trace"].std[0]
        out = self.dynamics(self.dynamics_input(b, m_scaled, actions))
        return (self.stats["buffer"].inverse(out[:, :1])[:, 0], self.stats["d"].inverse(out[:, 1:2])[:, 0])

    def discriminator_probs(self, latents):
        return nn.softmax(self.discriminator(latents))

    # persistence --------------------------------------------------------
    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "model": "causalsim",
            "env_kind": self.env_kind,
            "rank": self.rank,
            "nets": {k: (None if v is None else v.to_dict()) for k, v in
                     dict(extractor=self.extractor, encoder=self.encoder, discriminator=self.discriminator,
                          dynamics=self.dynamics).items()},
            "stats": {k: v.to_dict() for k, v in self.stats.items()},
            "action_values": self.action_values.tolist(),
            "policy_ids": self.policy_ids,
            "hyper": self.hyper.to_dict(),
            "dataset_fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d):
        nets = d["nets"]
        return cls(d["env_kind"], d["rank"], _net_from(nets["extractor"]), _net_from(nets["encoder"]),
                   _net_from(nets["discriminator"]), _net_from(nets["dynamics"]),
                   {k: Standardizer.from_dict(v) for k, v in d["stats"].items()}, d["action_values"],
                   d["policy_ids"], Hyperparams.from_dict(d["hyper"]), d.get("dataset_fingerprint", ""))

    def digest(self):
        return _digest(self.to_dict())


class SLSimModel:
    """Supervised step model: ABR (buffer, throughput, chunk size) -> (next buffer, download time);
    LB (processing time, target server) -> processing time."""

    def __init__(self, env_kind, net, stats, action_values, hyper, fingerprint=""):
        self.env_kind = env_kind
        self.net = net
        self.stats = stats
        self.action_values = np.asarray(action_values, dtype=np.float64)
        self.hyper = hyper
        self.fingerprint = fingerprint

    @property
    def n_actions(self):
        return len(self.action_values)

    def features(self, trace, actions, b=None):
        t = np.asarray(trace, dtype=np.float64)[:, None]
        actions = np.asarray(actions, dtype=np.int64)
        if self.env_kind == "abr":
            b = np.asarray(b, dtype=np.float64)[:, None]
            return np.hstack([self.stats["buffer"](b), self.stats["m_in"](t),
                              self.stats["size"](self.action_values[actions][:, None])])
        return np.hstack([t / self.stats["trace"].std, np.eye(self.n_actions)[actions]])

    def predict(self, trace, actions, b=None):
        out = self.net(self.features(trace, actions, b))
        if self.env_kind == "abr":
            return self.stats["buffer"].inverse(out[:, :1])[:, 0], self.stats["d"].inverse(out[:, 1:2])[:, 0]
        return out[:, 0] * self.stats["trace"].std[0]

    def to_dict(self):
        return {"version": CHECKPOINT_VERSION, "model": "slsim", "env_kind": self.env_kind,
                "net": self.net.to_dict(), "stats": {k: v.to_dict() for k, v in self.stats.items()},
                "action_values": self.action_values.tolist(), "hyper": self.hyper.to_dict(),
                "dataset_fingerprint": self.fingerprint}

    @classmethod
    def from_dict(cls, d):
        return cls(d["env_kind"], nn.DenseNet.from_dict(d["net"]),
                   {k: Standardizer.from_dict(v) for k, v in d["stats"].items()}, d["action_values"],
                   Hyperparams.from_dict(d["hyper"]), d.get("dataset_fingerprint", ""))

    def digest(self):
        return _digest(self.to_dict())


def _digest(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(model, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(model.to_dict()))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path):
    d = json.loads(Path(path).read_text())
    kind = d.get("model")
    if kind == "causalsim":
        return CausalSimModel.from_dict(d)
    if kind == "slsim":
        return SLSimModel.from_dict(d)
    raise ValueError(f"{path}: unknown checkpoint type {kind!r}")


def action_values_of(dataset):
    cfg = env_config_of(dataset.env_kind, dataset.env_config)
    if dataset.env_kind == "abr":
        return cfg.chunk_sizes
    return np.arange(cfg.n_servers, dtype=np.float64)


def fit_stats(arr, action_values):
    stats = {"trace": Standardizer.fit(arr.trace[:, None], center=False)}
    if arr.env_kind == "abr":
        stats["m_in"] = Standardizer.fit(arr.trace[:, None])
        stats["d"] = Standardizer.fit(arr.extra["d"][:, None])
        stats["size"] = Standardizer.fit(action_values[arr.action][:, None])
        stats["buffer"] = Standardizer.fit(np.concatenate([arr.extra["b"], arr.extra["b_next"]])[:, None])
    return stats


# ---------------------------------------------------------------- CausalSim

def init_causalsim(dataset, hyper, arr=None):
    arr = arr or training_arrays(dataset)
    env_kind = dataset.env_kind
    rank = hyper.rank or (2 if env_kind == "abr" else 1)
    values = action_values_of(dataset)
    stats = fit_stats(arr, values)
    n_pol = len(dataset.policy_ids())
    n_act = len(values)
    seeds = np.random.SeedSequence(hyper.seed).generate_state(4)
    ext_in = 3 if env_kind == "abr" else 2 * n_act
    act_in = 1 if env_kind == "abr" else n_act
    extractor = nn.DenseNet([ext_in, *hyper.hidden, rank], seed=int(seeds[0]))
    encoder = nn.DenseNet([act_in, *hyper.encoder_hidden, rank], seed=int(seeds[1]))
    disc = nn.DenseNet([rank, *hyper.disc_hidden, n_pol], seed=int(seeds[2]))
    dyn = nn.DenseNet([1 + 1 + act_in, *hyper.hidden, 2], seed=int(seeds[3])) if env_kind == "abr" else None
    return CausalSimModel(env_kind, rank, extractor, encoder, disc, dyn, stats, values, dataset.policy_ids(), hyper,
                          dataset.fingerprint())


class CausalSimTrainer:
    """Holds the optimizers and batch tensors so single steps can be inspected in tests."""

    def __init__(self, model, arr, hyper):
        self.model, self.arr, self.hyper = model, arr, hyper
        self.rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 1]))
        self.x_ext = model.extractor_input(arr.trace, arr.action, arr.extra.get("d"))
        self.x_act = model.action_features(arr.action)
        self.m_scaled = arr.trace / model.stats["trace"].std[0]
        if model.env_kind == "abr":
            self.b_std = model.stats["buffer"](arr.extra["b"][:, None])
            self.target_dyn = np.hstack([model.stats["buffer"](arr.extra["b_next"][:, None]),
                                         model.stats["d"](arr.extra["d"][:, None])])
        self.opt_disc = nn.Adam(lr=hyper.disc_lr)
        self.opt_ext = nn.Adam(lr=hyper.lr)
        self.opt_enc = nn.Adam(lr=hyper.lr)
        self.opt_dyn = nn.Adam(lr=hyper.lr)
        self.history = []

    def batch(self):
        return self.rng.integers(len(self.arr), size=min(self.hyper.batch_size, len(self.arr)))

    def disc_step(self, idx=None):
        idx = self.batch() if idx is None else idx
        u = self.model.extractor(self.x_ext[idx])
        logits, cache = self.model.discriminator.forward(u, keep_cache=True)
        value, g = nn.loss("ce", logits, self.arr.label[idx])
        grads, _ = self.model.discriminator.backward(cache, g)
        self.opt_disc.step(self.model.discriminator.params, grads)
        return value

    def gradients(self, idx):
        """Losses and gradients of one main step: extractor gets d(L_pred - kappa L_disc), the rest d L_pred."""
        m, h = self.model, self.hyper
        u, c_ext = m.extractor.forward(self.x_ext[idx], keep_cache=True)
        e, c_enc = m.encoder.forward(self.x_act[idx], keep_cache=True)
        if h.positive_factors:
            # exp keeps every action factor's sign fixed; per-action sign flips are local optima
            # that the reconstruction loss cannot leave
            e = np.exp(e)
        m_hat = np.sum(e * u, axis=1)
        l_trace, g_m = nn.loss(h.loss_kind, m_hat[:, None], self.m_scaled[idx][:, None], h.delta)
        l_pred = h.trace_weight * l_trace
        g_m = h.trace_weight * g_m[:, 0]
        grads = {}
        if m.env_kind == "abr":
            x_dyn = np.hstack([self.b_std[idx], m_hat[:, None], self.x_act[idx]])
            out, c_dyn = m.dynamics.forward(x_dyn, keep_cache=True)
            l_dyn, g_out = nn.loss(h.loss_kind, out, self.target_dyn[idx], h.delta)
            grads["dynamics"], g_in = m.dynamics.backward(c_dyn, g_out)
            l_pred += l_dyn
            g_m = g_m + g_in[:, 1]
        logits, c_disc = m.discriminator.forward(u, keep_cache=True)
        l_disc, g_logits = nn.loss("ce", logits, self.arr.label[idx])
        _, g_u_disc = m.discriminator.backward(c_disc, g_logits)
        g_u = g_m[:, None] * e - h.kappa * g_u_disc
        grads["extractor"], _ = m.extractor.backward(c_ext, g_u)
        g_e = g_m[:, None] * u
        grads["encoder"], _ = m.encoder.backward(c_enc, g_e * e if h.positive_factors else g_e)
        return l_pred, l_disc, grads

    def main_step(self, idx=None):
        idx = self.batch() if idx is None else idx
        l_pred, l_disc, grads = self.gradients(idx)
        self.opt_ext.step(self.model.extractor.params, grads["extractor"])
        self.opt_enc.step(self.model.encoder.params, grads["encoder"])
        if "dynamics" in grads:
            self.opt_dyn.step(self.model.dynamics.params, grads["dynamics"])
        return l_pred, l_disc

    def run(self, log_every=0):
        for it in range(self.hyper.num_train_it):
            for _ in range(self.hyper.num_disc_it):
                self.disc_step()
            l_pred, l_disc = self.main_step()
            self.history.append((l_pred, l_disc))
            if log_every and (it + 1) % log_every == 0:
                log.info("it %d  L_pred %.5f  L_disc %.4f", it + 1, l_pred, l_disc)
        return self.model


def train_causalsim(dataset, hyper, env_kind=None, log_every=0):
    if env_kind is not None and env_kind != dataset.env_kind:
        raise ValueError(f"dataset is {dataset.env_kind}, not {env_kind}")
    if len(dataset.policy_ids()) < 2:
        raise ValueError("CausalSim needs at least two source policies; the discriminator is degenerate otherwise")
    arr = training_arrays(dataset)
    model = init_causalsim(dataset, hyper, arr)
    trainer = CausalSimTrainer(model, arr, hyper)
    trainer.run(log_every)
    model.history = trainer.history
    return model


# ---------------------------------------------------------------- SLSim

def train_slsim(dataset, hyper, log_every=0):
    arr = training_arrays(dataset)
    values = action_values_of(dataset)
    stats = fit_stats(arr, values)
    env_kind = dataset.env_kind
    n_in = 3 if env_kind == "abr" else 1 + len(values)
    n_out = 2 if env_kind == "abr" else 1
    net = nn.DenseNet([n_in, *hyper.hidden, n_out], seed=int(np.random.SeedSequence([hyper.seed, 7]).generate_state(1)[0]))
    model = SLSimModel(env_kind, net, stats, values, hyper, dataset.fingerprint())
    x = model.features(arr.trace, arr.action, arr.extra.get("b"))
    if env_kind == "abr":
        y = np.hstack([stats["buffer"](arr.extra["b_next"][:, None]), stats["d"](arr.extra["d"][:, None])])
        w = np.array([1.0 / (hyper.eta + 1.0), hyper.eta / (hyper.eta + 1.0)])
    else:
        y = arr.trace[:, None] / stats["trace"].std
        w = np.ones(1)
    opt = nn.Adam(lr=hyper.lr)
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 2]))
    history = []
    for it in range(hyper.num_train_it):
        idx = rng.integers(len(x), size=min(hyper.batch_size, len(x)))
        out, cache = net.forward(x[idx], keep_cache=True)
        value, g = weighted_loss(hyper.loss_kind, out, y[idx], w, hyper.delta)
        grads, _ = net.backward(cache, g)
        opt.step(net.params, grads)
        history.append(value)
        if log_every and (it + 1) % log_every == 0:
            log.info("slsim it %d  loss %.5f", it + 1, value)
    model.history = history
    return model


def weighted_loss(kind, pred, target, weights, delta=1.0):
    """Per-column weighted sum of regression losses."""
    total, grad = 0.0, np.zeros_like(pred)
    for j, wj in enumerate(weights):
        v, g = nn.loss(kind, pred[:, j:j + 1], target[:, j:j + 1], delta)
        total += wj * v
        grad[:, j:j + 1] = wj * g
    return total, grad


# ---------------------------------------------------------------- tuning

@dataclass
class TuneResult:
    best: Hyperparams
    best_model: object
    points: list  # dicts: kappa, validation, test (optional), model digest

    def validation_test_pcc(self):
        from .metrics import pcc
        pts = [p for p in self.points if p.get("test") is not None]
        if len(pts) < 2:
            return None
        return pcc([p["validation"] for p in pts], [p["test"] for p in pts])


def validation_score(model, dataset, max_per_source=None, simulator="causalsim"):
    """Mean pair metric over every ordered pair of policies present in the training data."""
    from .evaluate import pair_metric

    pols = dataset.policy_ids()
    return float(np.mean([pair_metric(model, dataset, [p for p in pols if p != tgt], tgt, max_per_source, simulator)
                          for tgt in pols]))


def tune_slsim(dataset, hyper, losses=("huber", "l1", "mse"), val_sources=None):
    """SLSim with its regression loss picked by the same validation proxy; returns (model, points)."""
    points, best = [], None
    for kind in losses:
        model = train_slsim(dataset, replace(hyper, loss_kind=kind, delta=1.0))
        val = validation_score(model, dataset, val_sources, "slsim")
        points.append({"loss_kind": kind, "validation": val, "model": model.digest()})
        if best is None or val < best[0]:
            best = (val, model)
    return best[1], points


def tune_hyperparams(dataset, hyper, grid=None, held_out=None, val_sources=None, test_dataset=None):
    """Pick kappa by the leave-policies-in validation proxy.

    ``dataset`` is the training set (held-out policy already removed). For each grid
    point a model is trained and every ordered pair of training policies is
    simulated; the mean pair metric is the validation score. ``held_out`` (registry
    index) with ``test_dataset`` (the full dataset) adds the test score used for the
    validation-vs-test correlation.
    """
    from .evaluate import pair_metric

    grid = tuple(hyper.kappa_grid if grid is None else grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    pols = dataset.policy_ids()
    if len(pols) < 3 and len(grid) > 1:
        raise ValueError("tuning needs at least three training policies")
    points = []
    best = None
    for i, kappa in enumerate(grid):
        h = replace(hyper, kappa=float(kappa), seed=int(np.random.SeedSequence([hyper.seed, i]).generate_state(1)[0]))
        model = train_causalsim(dataset, h)
        val = validation_score(model, dataset, val_sources) if len(grid) > 1 else float("nan")
        point = {"kappa": float(kappa), "seed": h.seed, "validation": val, "model": model.digest()}
        if held_out is not None and test_dataset is not None:
            point["test"] = float(pair_metric(model, test_dataset, pols, held_out, val_sources))
        points.append(point)
        if best is None or point["validation"] < best[0]:
            best = (point["validation"], h, model)
    return TuneResult(best[1], best[2], points)
