import json
from dataclasses import replace

import numpy as np
import pytest

from causalsim import abr_env, evaluate, lb_env, nn, rct, simulate, train
from causalsim.core import PolicySpec


@pytest.fixture(scope="module")
def abr_ds():
    return rct.collect("abr", {}, abr_env.default_policies(), 90, seed=1, horizon=40)


@pytest.fixture(scope="module")
def lb_ds():
    return rct.collect("lb", {}, lb_env.default_policies(), 64, seed=2, horizon=50)


def tiny(env, **kw):
    return train.Hyperparams.desk(env, num_train_it=30, num_disc_it=2, batch_size=128,
                                  hidden=(8,), encoder_hidden=(4,) if env == "abr" else (), disc_hidden=(8,), **kw)


@pytest.fixture(scope="module")
def abr_model(abr_ds):
    return train.train_causalsim(abr_ds.select(exclude=[0]), tiny("abr"))


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        train.Hyperparams(lr=0)
    with pytest.raises(ValueError):
        train.Hyperparams(kappa=-1)
    h = train.Hyperparams.desk("lb")
    assert h.rank == 1 and h.encoder_hidden == ()
    assert train.Hyperparams.from_dict(h.to_dict()) == h


def test_full_scale_defaults():
    h = train.Hyperparams()
    assert (h.num_train_it, h.num_disc_it, h.batch_size, h.lr) == (20000, 10, 8192, 1e-4)
    assert h.kappa_grid == (0.01, 0.1, 1.0, 10.0, 100.0)


def test_standardizer_roundtrip():
    x = np.random.default_rng(0).normal(3, 2, (100, 2))
    s = train.Standardizer.fit(x)
    assert np.allclose(s.inverse(s(x)), x)
    assert np.allclose(s(x).mean(axis=0), 0, atol=1e-12)


def test_training_needs_two_policies(abr_ds):
    with pytest.raises(ValueError):
        train.train_causalsim(abr_ds.select(policy_ids=[2]), tiny("abr"))


@pytest.mark.parametrize("env", ["abr", "lb"])
def test_gradient_routing(env, abr_ds, lb_ds):
    """Extractor gets d(L_pred - kappa L_disc); encoder and dynamics get d L_pred only."""
    ds = abr_ds if env == "abr" else lb_ds
    h = tiny(env, kappa=0.7)
    arr = train.training_arrays(ds)
    model = train.init_causalsim(ds, h, arr)
    trainer = train.CausalSimTrainer(model, arr, h)
    idx = np.arange(64)

    def total(sign_disc):
        l_pred, l_disc, _ = trainer.gradients(idx)
        return l_pred + sign_disc * h.kappa * l_disc

    _, _, grads = trainer.gradients(idx)
    nets = {"extractor": (model.extractor, -1.0), "encoder": (model.encoder, 0.0)}
    if env == "abr":
        nets["dynamics"] = (model.dynamics, 0.0)
    rng = np.random.default_rng(0)
    for name, (net, sign) in nets.items():
        for p, g in zip(net.params, grads[name]):
            i = tuple(rng.integers(s) for s in p.shape)
            old = p[i]
            p[i] = old + 1e-6
            fp = total(sign)
            p[i] = old - 1e-6
            fm = total(sign)
            p[i] = old
            assert g[i] == pytest.approx((fp - fm) / 2e-6, rel=1e-3, abs=1e-7), name


def test_disc_step_only_touches_discriminator(abr_ds):
    h = tiny("abr")
    arr = train.training_arrays(abr_ds)
    model = train.init_causalsim(abr_ds, h, arr)
    trainer = train.CausalSimTrainer(model, arr, h)
    before = [p.copy() for p in model.extractor.params]
    d_before = [p.copy() for p in model.discriminator.params]
    trainer.disc_step()
    assert all(np.array_equal(a, b) for a, b in zip(before, model.extractor.params))
    assert not all(np.array_equal(a, b) for a, b in zip(d_before, model.discriminator.params))


def test_training_is_seeded(abr_ds):
    a = train.train_causalsim(abr_ds, tiny("abr"))
    b = train.train_causalsim(abr_ds, tiny("abr"))
    assert a.digest() == b.digest()
    c = train.train_causalsim(abr_ds, tiny("abr", seed=5))
    assert c.digest() != a.digest()


def test_checkpoint_roundtrip(tmp_path, abr_model, abr_ds):
    path = tmp_path / "m.json"
    train.save_checkpoint(abr_model, path)
    back = train.load_checkpoint(path)
    assert back.digest() == abr_model.digest()
    trajs = abr_ds.trajectories[:4]
    a = simulate.causalsim_batch(abr_model, trajs, abr_ds.policies[0], abr_ds.env_config, abr_ds.seed)
    b = simulate.causalsim_batch(back, trajs, abr_ds.policies[0], abr_ds.env_config, abr_ds.seed)
    assert a == b
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": "nope"}))
    with pytest.raises(ValueError):
        train.load_checkpoint(bad)


def test_trace_factorization_shape(abr_model):
    emb = abr_model.action_embeddings()
    assert emb.shape == (6, 2)
    u = np.ones((3, 2))
    assert np.allclose(abr_model.reconstruct(u, [0, 1, 2]), emb[[0, 1, 2]].sum(axis=1) * abr_model.stats["trace"].std[0])


def test_expertsim_on_source_policy_is_exact(abr_ds):
    # replaying a policy on its own logged throughput re-creates the log
    trajs = [t for t in abr_ds.trajectories if t.policy_id == 0][:5]
    sim = simulate.expertsim_batch(trajs, abr_ds.policies[0], abr_ds.env_config, abr_ds.seed, 0)
    for s, t in zip(sim, trajs):
        assert np.array_equal(s.actions, t.actions)
        assert np.allclose(s.obs, t.obs)


def test_expertsim_rejects_lb(lb_ds):
    with pytest.raises(ValueError):
        simulate.expertsim_batch(lb_ds.trajectories[:1], lb_ds.policies[0], lb_ds.env_config, env_kind="lb")


def test_simulator_outputs_are_physical(abr_model, abr_ds):
    trajs = abr_ds.trajectories[:20]
    cfg = rct.env_config_of("abr", abr_ds.env_config)
    target = PolicySpec("mpc", "mpc", {"lookahead": 3})
    sim = simulate.causalsim_batch(abr_model, trajs, target, abr_ds.env_config, abr_ds.seed)
    for s, t in zip(sim, trajs):
        assert s.horizon == t.horizon
        assert np.all((s.obs[:, 0] >= 0) & (s.obs[:, 0] <= cfg.buffer_cap))
        assert np.all(s.traces[:, 0] > 0)
        assert s.obs[0, 0] == t.obs[0, 0]


def test_model_env_mismatch(abr_model, lb_ds):
    with pytest.raises(ValueError):
        simulate.causalsim_batch(abr_model, lb_ds.trajectories[:2], lb_ds.policies[0], lb_ds.env_config)


def test_slsim_lb_and_write(tmp_path, lb_ds):
    model = train.train_slsim(lb_ds, tiny("lb"))
    sim = simulate.slsim_batch(model, lb_ds.trajectories[:3], lb_ds.policies[9], lb_ds.env_config, lb_ds.seed, 9)
    assert all(np.all(s.traces[:, 0] > 0) for s in sim)
    out = simulate.write_rollouts(tmp_path / "r", sim, {"simulator": "slsim"})
    assert (out / "rollout_steps.csv").exists()
    assert json.loads((out / "provenance.json").read_text())["simulator"] == "slsim"


def test_eval_grid_rows(abr_model, abr_ds):
    slsim = train.train_slsim(abr_ds.select(exclude=[0]), tiny("abr"))
    rep = evaluate.eval_grid(abr_ds, {0: {"causalsim": abr_model, "slsim": slsim}}, [0], max_per_source=3)
    sims = {r["simulator"] for r in rep.rows}
    assert sims == {"causalsim", "expertsim", "slsim"}
    assert all(r["source"] != r["target"] for r in rep.rows)
    assert len(rep.rows) == 3 * (len(abr_ds.policy_ids()) - 1)
    assert np.isfinite(rep.median("causalsim", "buffer_mape"))


def test_confusion_rows_sum_to_one(abr_model, abr_ds):
    cm = evaluate.confusion_matrix(abr_model, abr_ds.select(exclude=[0]))
    assert np.allclose(cm.mean_probs.sum(axis=1), 1.0)
    assert 0 <= cm.max_share_gap() <= 1


def test_pareto_frontier():
    pts = [{"stall_rate": 0.1, "mean_bitrate": 2.0}, {"stall_rate": 0.2, "mean_bitrate": 1.5},
           {"stall_rate": 0.05, "mean_bitrate": 1.0}, {"stall_rate": 0.3, "mean_bitrate": 3.0}]
    assert evaluate.pareto_frontier(pts) == [0, 2, 3]


def test_pair_scores_identity(abr_ds):
    trajs = abr_ds.trajectories[:5]
    s = evaluate.pair_scores("abr", trajs, trajs, trajs)
    assert s["buffer_mape"] == 0 and s["buffer_mse"] == 0 and s["buffer_emd"] == 0
