"""Command-line interface.

Every subcommand takes ``--config`` (JSON), ``--seed`` and ``--out`` and writes a
``run_manifest.json`` into the output directory. Exit codes: 0 success,
2 configuration error, 3 failed assumption check.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, abr_env, analytic, evaluate, lb_env, rct, simulate, train
from .core import OutcomeTensor, PolicySpec, load_dataset, save_dataset

log = logging.getLogger("causalsim")

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION = 0, 2, 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def write_manifest(out, command, args, cfg, extra=None):
    man = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "config": cfg,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    man.update(extra or {})
    (out / "run_manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str))


def write_csv(path, rows, fields=None):
    fields = fields or sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def read_csv(path):
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e


def _dataset(path):
    if path is None:
        raise ConfigError("--data is required")
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot load dataset {path}: {e}") from e


def policy_index(dataset, name):
    """Resolve a policy by registry name or index."""
    if name is None:
        return None
    for i, p in enumerate(dataset.policies):
        if p.name == name:
            return i
    try:
        i = int(name)
    except ValueError:
        raise ConfigError(f"unknown policy {name!r}; known: {[p.name for p in dataset.policies]}") from None
    if not 0 <= i < len(dataset.policies):
        raise ConfigError(f"policy index {i} out of range")
    return i


def hyper_from(cfg, env_kind, seed):
    hcfg = dict(cfg.get("hyper", {}))
    preset = cfg.get("preset", "desk")
    try:
        if preset == "desk":
            h = train.Hyperparams.desk(env_kind, **hcfg)
        elif preset == "full":
            h = train.Hyperparams(**hcfg)
        else:
            raise ConfigError(f"unknown preset {preset!r}")
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad hyperparameters: {e}") from e
    return replace(h, seed=seed)


def _model(path):
    try:
        return train.load_checkpoint(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot load model {path}: {e}") from e


# ---------------------------------------------------------------- commands

def cmd_gen(args, cfg, env_kind):
    env_cfg = dict(cfg.get("env", {}))
    if env_kind == "abr":
        defaults = abr_env.default_policies()
        n_default = 1000
    else:
        defaults = lb_env.default_policies(env_cfg.get("n_servers", 8))
        n_default = 800
    policies = [PolicySpec.from_dict(p) for p in cfg["policies"]] if "policies" in cfg else defaults
    try:
        ds = rct.collect(env_kind, env_cfg, policies, int(cfg.get("n_trajectories", n_default)), args.seed,
                         cfg.get("horizon", 100 if env_kind == "abr" else 300))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad environment config: {e}") from e
    save_dataset(ds, args.out / "dataset")
    log.info("wrote %d trajectories (%s) to %s", len(ds.trajectories), ds.fingerprint(), args.out / "dataset")
    return {"dataset": ds.fingerprint()}


def cmd_train(args, cfg):
    ds = _dataset(args.data)
    held = policy_index(ds, args.exclude or cfg.get("exclude"))
    train_ds = ds.select(exclude=[held]) if held is not None else ds
    h = hyper_from(cfg, ds.env_kind, args.seed)
    kind = args.model or cfg.get("model", "causalsim")
    if kind == "causalsim":
        model = train.train_causalsim(train_ds, h)
    elif kind == "slsim":
        model = train.train_slsim(train_ds, h)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    train.save_checkpoint(model, args.out / "model.json")
    write_csv(args.out / "loss_history.csv",
              [{"iteration": i + 1, **({"l_pred": v[0], "l_disc": v[1]} if isinstance(v, tuple) else {"loss": v})}
               for i, v in enumerate(model.history)])
    return {"dataset": ds.fingerprint(), "model": model.digest(),
            "excluded_policy": None if held is None else ds.policies[held].name}


def cmd_tune(args, cfg):
    ds = _dataset(args.data)
    held = policy_index(ds, args.exclude or cfg.get("exclude"))
    train_ds = ds.select(exclude=[held]) if held is not None else ds
    h = hyper_from(cfg, ds.env_kind, args.seed)
    grid = cfg.get("kappa_grid", h.kappa_grid)
    try:
        res = train.tune_hyperparams(train_ds, h, grid, held_out=held, test_dataset=ds,
                                     val_sources=cfg.get("max_per_source"))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    write_csv(args.out / "tune_points.csv", res.points, ["kappa", "seed", "validation", "test", "model"])
    train.save_checkpoint(res.best_model, args.out / "best_model.json")
    corr = res.validation_test_pcc()
    (args.out / "tune_summary.json").write_text(json.dumps(
        {"best_kappa": res.best.kappa, "validation_test_pcc": corr}, indent=2))
    return {"dataset": ds.fingerprint(), "best_kappa": res.best.kappa, "validation_test_pcc": corr}


def cmd_simulate(args, cfg):
    ds = _dataset(args.data)
    tgt = policy_index(ds, args.target or cfg.get("target"))
    if tgt is None:
        raise ConfigError("--target is required")
    sources = cfg.get("sources")
    src_ids = None if sources is None else {policy_index(ds, s) for s in sources}
    trajs = [tr for tr in ds.trajectories if tr.policy_id != tgt and (src_ids is None or tr.policy_id in src_ids)]
    sim_name = args.simulator or cfg.get("simulator", "causalsim")
    model = None
    if sim_name != "expertsim":
        if not args.model:
            raise ConfigError(f"--model is required for {sim_name}")
        model = _model(args.model)
        if model.fingerprint and getattr(model, "policy_ids", None) and tgt in model.policy_ids:
            log.warning("model was trained with data from the target policy %s", ds.policies[tgt].name)
    try:
        sims = evaluate.run_simulator(sim_name, model, trajs, ds.policies[tgt], ds.env_config, ds.seed, tgt,
                                      ds.env_kind)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    prov = {"simulator": sim_name, "source_dataset": ds.fingerprint(), "target_policy": ds.policies[tgt].to_dict(),
            "model": None if model is None else model.digest(),
            "model_saw_target": bool(model is not None and tgt in getattr(model, "policy_ids", []))}
    simulate.write_rollouts(args.out, sims, prov)
    return prov


def cmd_eval(args, cfg):
    ds = _dataset(args.data)
    model_cfg = cfg.get("models", {})
    targets = [policy_index(ds, t) for t in cfg.get("targets", list(model_cfg))]
    if not targets:
        raise ConfigError("config must list targets (or models keyed by target)")
    models = {}
    for t in targets:
        entry = model_cfg.get(ds.policies[t].name, {})
        models[t] = {k: _model(v) for k, v in entry.items()}
    sims = tuple(cfg.get("simulators", evaluate.SIMULATORS))
    rep = evaluate.eval_grid(ds, models, targets, sims, cfg.get("max_per_source"))
    write_csv(args.out / "eval_rows.csv", rep.rows)
    metrics = ["buffer_mape", "buffer_mse", "buffer_emd"] if ds.env_kind == "abr" else ["processing_mape", "latency_mape"]
    summary = {"medians": rep.summary(metrics), "provenance": rep.provenance}
    (args.out / "eval_summary.json").write_text(json.dumps(summary, indent=2))
    return {"dataset": ds.fingerprint(), "medians": summary["medians"]}


def _read_tensor(tensor_csv, partition_csv):
    rows = read_csv(tensor_csv)
    parts = read_csv(partition_csv)
    try:
        beta_policy = {int(r["beta"]): int(r["policy"]) for r in parts}
        u = len(beta_policy)
        if sorted(beta_policy) != list(range(u)):
            raise ConfigError("partition CSV must list every column beta = 0..U-1 exactly once")
        entries = [(int(r["alpha"]), int(r["beta"]), int(r["gamma"]), float(r["value"])) for r in rows]
    except (KeyError, ValueError) as e:
        raise ConfigError(f"malformed tensor/partition CSV: {e}") from e
    a_count = max(e[0] for e in entries) + 1
    d = max(e[2] for e in entries) + 1
    actions = np.full(u, -1)
    traces = np.zeros((u, d))
    for alpha, beta, gamma, v in entries:
        if actions[beta] not in (-1, alpha):
            raise ConfigError(f"column {beta} has observations under two actions")
        actions[beta] = alpha
        traces[beta, gamma] = v
    if np.any(actions < 0):
        raise ConfigError("every column needs one observed entry")
    pols = np.array([beta_policy[b] for b in range(u)])
    return OutcomeTensor.from_observations(a_count, actions, traces, pols)


def cmd_complete(args, cfg):
    tensor_csv = args.tensor or cfg.get("tensor")
    partition_csv = args.partition or cfg.get("partition")
    if not tensor_csv or not partition_csv:
        raise ConfigError("--tensor and --partition are required")
    tensor = _read_tensor(tensor_csv, partition_csv)
    r = int(args.rank or cfg.get("rank", tensor.dims[2]))
    guard = float(cfg.get("guard", 0.1))
    report = analytic.check_assumptions(tensor, None, r, guard)
    (args.out / "assumptions.json").write_text(json.dumps(report, indent=2))
    try:
        if r == 1 and tensor.dims[2] == 1:
            completed = analytic.complete_rank1(tensor).completed[:, :, None]
        else:
            completed = analytic.complete_rank_r(tensor, None, r, guard).completed
    except analytic.AssumptionError as e:
        log.error("%s", e)
        raise
    a_count, u, d = completed.shape
    with open(args.out / "completed.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["alpha", "beta", "gamma", "value"])
        for alpha in range(a_count):
            for beta in range(u):
                for gamma in range(d):
                    w.writerow([alpha, beta, gamma, format(completed[alpha, beta, gamma], ".17g")])
    return {"tensor": _file_hash(tensor_csv), "partition": _file_hash(partition_csv), "rank": r}


def cmd_sweep(args, cfg):
    ds = _dataset(args.data)
    family = args.family or cfg.get("family", "bba")
    grid = cfg.get("grid")
    if grid is None:
        if family == "bba":
            grid = [{"reservoir": r, "cushion": c} for r in (1.0, 3.0, 5.0, 7.0) for c in (1.0, 3.0, 5.0)]
        else:
            grid = [{"V": v, "gamma": g} for v in (0.3, 0.71, 1.5) for g in (0.1, 0.22, 0.5)]
    sim = args.simulator or cfg.get("simulator", "causalsim")
    model = _model(args.model) if sim != "expertsim" else None
    if sim != "expertsim" and model is None:
        raise ConfigError("--model is required")
    try:
        points = evaluate.pareto_sweep(model, ds, family, grid, sim)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    write_csv(args.out / "sweep_points.csv", points)
    return {"dataset": ds.fingerprint(), "n_points": len(points)}


def cmd_report(args, cfg):
    from . import plotting

    inputs = args.inputs or cfg.get("inputs", [])
    if not inputs:
        raise ConfigError("report needs at least one input directory")
    produced = []
    tidy = []
    for d in map(Path, inputs):
        if (d / "eval_rows.csv").exists():
            rows = read_csv(d / "eval_rows.csv")
            for r in rows:
                for k, v in r.items():
                    if k.endswith(("_mape", "_mse", "_emd", "_error")) and v != "":
                        tidy.append({"source": r["source"], "target": r["target"], "simulator": r["simulator"],
                                     "metric": k, "value": v, "input": str(d)})
            for metric in [k for k in rows[0] if k.endswith(("_mape", "_mse", "_emd"))] if rows else []:
                produced.append(str(plotting.error_cdf(rows, metric, args.out / f"{d.name}_{metric}_cdf.png")))
        if (d / "sweep_points.csv").exists():
            pts = read_csv(d / "sweep_points.csv")
            for p in pts:
                p.update(stall_rate=float(p["stall_rate"]), mean_bitrate=float(p["mean_bitrate"]),
                         on_frontier=p["on_frontier"] == "True")
                for k in ("stall_rate", "mean_bitrate", "mean_qoe"):
                    tidy.append({"source": "all", "target": p["policy"], "simulator": "sweep", "metric": k,
                                 "value": p[k], "input": str(d)})
            produced.append(str(plotting.frontier(pts, args.out / f"{d.name}_frontier.png")))
        if (d / "tune_points.csv").exists():
            pts = [p for p in read_csv(d / "tune_points.csv") if p.get("test") not in (None, "")]
            for p in pts:
                p.update(validation=float(p["validation"]), test=float(p["test"]))
            if pts:
                produced.append(str(plotting.validation_vs_test(pts, args.out / f"{d.name}_tuning.png")))
    write_csv(args.out / "report_tidy.csv", tidy, ["input", "source", "target", "simulator", "metric", "value"])
    return {"figures": produced, "rows": len(tidy)}


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="causalsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        return sp

    add("gen-abr", "collect a synthetic ABR RCT dataset")
    add("gen-lb", "collect a synthetic load-balancing RCT dataset")
    for name, help_ in (("train", "train CausalSim or SLSim"), ("tune", "tune kappa by the validation proxy")):
        sp = add(name, help_)
        sp.add_argument("--data", type=Path)
        sp.add_argument("--exclude", help="policy (name or index) held out of training")
        if name == "train":
            sp.add_argument("--model", choices=("causalsim", "slsim"))
    sp = add("simulate", "counterfactual rollouts of a target policy")
    sp.add_argument("--data", type=Path)
    sp.add_argument("--model", type=Path)
    sp.add_argument("--target")
    sp.add_argument("--simulator", choices=evaluate.SIMULATORS)
    sp = add("eval", "score simulators against the counterfactual oracle")
    sp.add_argument("--data", type=Path)
    sp = add("complete", "analytic completion of a low-rank outcome tensor")
    sp.add_argument("--tensor", type=Path, help="CSV with alpha,beta,gamma,value")
    sp.add_argument("--partition", type=Path, help="CSV with beta,policy")
    sp.add_argument("--rank", type=int)
    sp = add("sweep", "Pareto sweep of a policy family")
    sp.add_argument("--data", type=Path)
    sp.add_argument("--model", type=Path)
    sp.add_argument("--family", choices=sorted(evaluate.PARETO_FAMILIES))
    sp.add_argument("--simulator", choices=evaluate.SIMULATORS)
    sp = add("report", "tidy CSV and figures from eval/sweep/tune outputs")
    sp.add_argument("inputs", nargs="*", type=Path)
    return p


COMMANDS = {
    "gen-abr": lambda a, c: cmd_gen(a, c, "abr"),
    "gen-lb": lambda a, c: cmd_gen(a, c, "lb"),
    "train": cmd_train,
    "tune": cmd_tune,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "complete": cmd_complete,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, cfg)
        write_manifest(args.out, args.command, args, cfg, {"result": extra})
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except analytic.AssumptionError as e:
        print(f"assumption check failed: {e}", file=sys.stderr)
        write_manifest(args.out, args.command, args, cfg if "cfg" in locals() else {},
                       {"assumption_failure": str(e)})
        return EXIT_ASSUMPTION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
