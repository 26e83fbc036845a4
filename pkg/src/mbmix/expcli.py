"""Command-line experiment harness.

Configs are flat INI documents (one level of sections). Every run writes its
fully resolved config next to its results, and any result directory can be
regenerated bit-exactly from that file (modulo the wallclock column, which
can be disabled via record_wallclock).

Verbs: run <config>, print-config <kind>, variance-study <config>,
eval <checkpoint> <env>. Exit codes: 0 ok, 1 config error, 2 run failure.
"""

from __future__ import annotations

import argparse
import configparser
import copy
import csv
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import envlab, mixpolicy, tabular, worldmodel
from .envlab import collect_diff_trajectories, eval_policy, make_env, make_tabular_mdp
from .mixpolicy import (MixConfig, TrainerConfig, init_nets, mbmix_train,
                        variance_study, write_learning_csv, write_variance_csv)
from .nets import save_checkpoint, load_checkpoint
from .tabular import TabularConfig, run_tabular, write_tabular_csv
from .worldmodel import SobolevConfig, evaluate_model

OUT_ROOT_ENV = "MBMIX_OUT_ROOT"

KINDS = ("tabular", "mbmix", "shac-baseline", "mix-real-env",
         "model-ablation", "variance-study")


class ConfigError(Exception):
    pass


# section -> key -> (type tag, default). Type tags drive INI parsing.
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "experiment": {
        "kind": ("str", None),                  # required
        "env": ("str", "pendulum"),
        "env_seed": ("int", 0),
        "env_noise_std": ("float", 0.0),
        "seeds": ("int_list", [0, 1, 2]),
        "budget": ("int", 50_000),
        "outdir": ("str", "results"),
        "record_wallclock": ("bool", True),
    },
    "mix": {
        "lambda_mix": ("float", 0.98),
        "gamma": ("float", 0.99),
        "h_max": ("int", 16),
        "m": ("int", 1),
        "branch_len": ("opt_int", None),
        "n_branch": ("int", 32),
        "lambda_td": ("float", 0.98),
    },
    "sobolev": {
        "alpha": ("float", 0.1),
        "batch_size": ("int", 128),
        "epochs": ("int", 4),
        "lr": ("float", 1e-3),
        "mode": ("str", "sobolev"),
        "alpha_warmup": ("bool", True),
        "n_probes": ("opt_int", None),
        "max_batches_per_epoch": ("opt_int", 16),
    },
    "trainer": {
        "n_envs": ("int", 4),
        "collect_horizon": ("opt_int", None),
        "buffer_capacity": ("int", 50_000),
        "start_window": ("int", 4096),
        "inner_iters": ("int", 4),
        "policy_lr": ("float", 2e-3),
        "value_lr": ("float", 1e-3),
        "value_epochs": ("int", 2),
        "value_batch": ("int", 256),
        "grad_clip": ("float", 1.0),
        "value_grad_clip": ("opt_float", 100.0),
        "policy_hidden": ("int_tuple", (64, 64)),
        "value_hidden": ("int_tuple", (64, 64)),
        "model_hidden": ("int_tuple", (128, 128)),
        "init_log_std": ("float", -1.0),
        "eval_episodes": ("int", 16),
        "eval_horizon": ("opt_int", None),
        "eval_every": ("int", 1),
        "eval_seed": ("opt_int", None),
        "warmup_iters": ("int", 1),
        "obs_norm": ("bool", False),
        "target_return": ("opt_float", None),
        "heldout_episodes": ("int", 8),
    },
    "tabular": {
        "n_states": ("int", 20),
        "n_actions": ("int", 5),
        "dirichlet_alpha": ("float", 1.0),
        "horizon": ("int", 50),
        "n_traj": ("int", 20),
        "lr": ("float", 0.05),
        "gamma": ("float", 0.99),
        "lambda_mix": ("float", 0.98),
        "m": ("int", 1),
        "estimator": ("str", "sampled"),
        "record_every": ("int", 10),
    },
    "variance": {
        "h_grid": ("int_list", [4, 8, 16, 32]),
        "n_estimates": ("int", 64),
        "world": ("str", "real-env"),
        "lambda_mix": ("float", 0.95),
        "pretrain_steps": ("int", 4096),
        "n_boot": ("int", 1000),
    },
}


def _parse_value(tag: str, raw: str, where: str):
    raw = raw.strip()
    try:
        if tag == "str":
            return raw
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tag == "opt_int":
            return None if raw.lower() == "none" else int(raw)
        if tag == "opt_float":
            return None if raw.lower() == "none" else float(raw)
        if tag == "int_list":
            return [int(v) for v in raw.split(",") if v.strip() != ""]
        if tag == "int_tuple":
            return tuple(int(v) for v in raw.split(",") if v.strip() != "")
    except ValueError as err:
        raise ConfigError(f"{where}: cannot parse '{raw}' as {tag}") from err
    raise ConfigError(f"{where}: unknown type tag {tag}")


def _format_value(val) -> str:
    if val is None:
        return "none"
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    if isinstance(val, (list, tuple)):
        return ",".join(str(v) for v in val)
    return str(val)


class ExperimentConfig:
    """Typed view over the flat sectioned config."""

    def __init__(self, values: dict[str, dict[str, object]]):
        self.values = values
        kind = values["experiment"].get("kind")
        if kind is None:
            raise ConfigError("missing required field: experiment.kind")
        if kind not in KINDS:
            raise ConfigError(f"experiment.kind: unknown kind '{kind}' (have {KINDS})")
        if not values["experiment"]["seeds"]:
            raise ConfigError("experiment.seeds: need at least one seed")
        if values["experiment"]["budget"] < 0:
            raise ConfigError("experiment.budget: must be >= 0")

    @classmethod
    def default(cls, kind: str) -> "ExperimentConfig":
        values = {sec: {k: copy.deepcopy(d) for k, (_, d) in keys.items()}
                  for sec, keys in SCHEMA.items()}
        values["experiment"]["kind"] = kind
        return cls(values)

    @classmethod
    def from_ini(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        values = {sec: {k: copy.deepcopy(d) for k, (_, d) in keys.items()}
                  for sec, keys in SCHEMA.items()}
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, raw in parser.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"unknown config field {sec}.{key}")
                tag = SCHEMA[sec][key][0]
                values[sec][key] = _parse_value(tag, raw, f"{sec}.{key}")
        return cls(values)

    def to_ini_str(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for key in keys:
                lines.append(f"{key} = {_format_value(self.values[sec][key])}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_ini_str())

    def get(self, sec: str, key: str):
        return self.values[sec][key]

    # typed sub-configs -----------------------------------------------------

    def mix_config(self, **overrides) -> MixConfig:
        kw = dict(self.values["mix"])
        kw.update(overrides)
        return MixConfig(**kw)

    def sobolev_config(self, **overrides) -> SobolevConfig:
        kw = dict(self.values["sobolev"])
        kw.update(overrides)
        return SobolevConfig(**kw)

    def trainer_config(self, world: str, objective: str, **overrides) -> TrainerConfig:
        kw = dict(self.values["trainer"])
        kw.pop("heldout_episodes")
        mix = overrides.pop("mix", None) or self.mix_config()
        sob = overrides.pop("sobolev", None) or self.sobolev_config()
        kw.update(overrides)
        return TrainerConfig(mix=mix, sobolev=sob, world=world,
                             objective=objective, **kw)

    def tabular_config(self) -> TabularConfig:
        kw = dict(self.values["tabular"])
        for drop in ("n_states", "n_actions", "dirichlet_alpha"):
            kw.pop(drop)
        return TabularConfig(**kw)

    def make_environment(self) -> envlab.DiffEnv:
        return make_env(self.get("experiment", "env"),
                        seed=self.get("experiment", "env_seed"),
                        noise_std=self.get("experiment", "env_noise_std"))


# ---------------------------------------------------------------------------
# experiment bodies (one seed each)


def _summarize_curve(records: list[dict]) -> dict:
    returns = [r["eval_return_mean"] for r in records]
    return {"final_return_mean": returns[-1],
            "max_return_mean": max(returns),
            "total_env_steps": records[-1]["env_steps"],
            "n_records": len(records)}


def _exp_training(cfg: ExperimentConfig, seed: int, outdir: Path,
                  world: str, objective: str) -> dict:
    env = cfg.make_environment()
    tcfg = cfg.trainer_config(world, objective)
    nets = init_nets(env, tcfg, np.random.SeedSequence([seed, 3]))
    records = mbmix_train(env, tcfg, seed, cfg.get("experiment", "budget"), nets=nets)
    write_learning_csv(outdir / "curve.csv", records,
                       cfg.get("experiment", "record_wallclock"))
    policy, value_net, model = nets
    save_checkpoint(outdir / "checkpoint.npz",
                    {"policy": policy, "value": value_net, "model": model.mlp})
    return _summarize_curve(records)


def _exp_tabular(cfg: ExperimentConfig, seed: int, outdir: Path) -> dict:
    tcfg = cfg.tabular_config()
    budget = cfg.get("experiment", "budget")
    tab = cfg.values["tabular"]
    all_records = []
    summary = {}
    for method in ("APG-full", "MIX"):
        mdp = make_tabular_mdp(seed, n_states=tab["n_states"],
                               n_actions=tab["n_actions"],
                               dirichlet_alpha=tab["dirichlet_alpha"],
                               gamma=tab["gamma"])
        records = run_tabular(mdp, method, tcfg, seed, budget)
        all_records.extend(records)
        summary[method] = {"final_reward_per_step": records[-1].reward_per_step,
                           "env_steps": records[-1].env_steps}
    write_tabular_csv(outdir / "curve.csv", all_records)
    return summary


def _exp_model_ablation(cfg: ExperimentConfig, seed: int, outdir: Path) -> dict:
    budget = cfg.get("experiment", "budget")
    summary = {}
    heldout_eps = cfg.get("trainer", "heldout_episodes")
    for mode in ("sobolev", "plain"):
        env = cfg.make_environment()
        sob = cfg.sobolev_config(mode=mode)
        tcfg = cfg.trainer_config("learned-model", "mix", sobolev=sob)
        nets = init_nets(env, tcfg, np.random.SeedSequence([seed, 3]))
        records = mbmix_train(env, tcfg, seed, budget, nets=nets)
        write_learning_csv(outdir / f"curve_{mode}.csv", records,
                           cfg.get("experiment", "record_wallclock"))
        policy, value_net, model = nets
        heldout = collect_diff_trajectories(env, policy, heldout_eps,
                                            env.horizon, np.random.SeedSequence([seed, 999]))
        metrics = evaluate_model(model, heldout)
        _write_prediction_traces(outdir / f"traces_{mode}.csv", model, heldout, env)
        summary[mode] = {"curve": _summarize_curve(records), "model": metrics}
    sob_j = summary["sobolev"]["model"]["jac_error"]
    pl_j = summary["plain"]["model"]["jac_error"]
    summary["jac_error_sobolev_lt_plain"] = bool(sob_j < pl_j)
    return summary


def _write_prediction_traces(path, model, heldout, env) -> None:
    """Open-loop predicted vs actual states along the first held-out episode."""
    first_ep = min(tr.episode for tr in heldout)
    seq = sorted([tr for tr in heldout if tr.episode == first_ep], key=lambda t: t.step)
    import numpy as _np
    from . import adgraph as ag
    cur = seq[0].s[None, :]
    rows = []
    for tr in seq:
        tape = ag.Tape()
        pred = model.predict(tape, tape.leaf(cur), tape.leaf(tr.a[None, :])).data
        rows.append([tr.step] + [repr(v) for v in tr.s_next] + [repr(v) for v in pred[0]])
        cur = pred
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        ds = env.state_dim
        w.writerow(["step"] + [f"actual{i}" for i in range(ds)] + [f"pred{i}" for i in range(ds)])
        w.writerows(rows)


def _exp_variance_study(cfg: ExperimentConfig, seed: int, outdir: Path) -> dict:
    env = cfg.make_environment()
    var = cfg.values["variance"]
    mix = cfg.mix_config(lambda_mix=var["lambda_mix"])
    tcfg = cfg.trainer_config("real-env", "fixed", mix=mix)
    nets = init_nets(env, tcfg, np.random.SeedSequence([seed, 3]))
    # short pre-training to freeze a mid-training snapshot
    mbmix_train(env, tcfg, seed, var["pretrain_steps"], nets=nets)
    policy, value_net, model = nets
    records = variance_study(env, policy, value_net, mix, var["h_grid"],
                             var["n_estimates"], np.random.SeedSequence([seed, 5]),
                             world=var["world"], n_boot=var["n_boot"])
    write_variance_csv(outdir / "variance.csv", records)
    summary = {}
    for rec in records:
        summary[f"{rec['method']}_H{rec['H_max']}"] = rec["trace_variance"]
    ok = all(
        next(r for r in records if r["method"] == "MIX" and r["H_max"] == h)["trace_variance"]
        <= next(r for r in records if r["method"] == "SHAC" and r["H_max"] == h)["trace_variance"]
        for h in var["h_grid"])
    summary["mix_var_le_shac_all_h"] = bool(ok)
    return summary


_BODIES = {
    "tabular": _exp_tabular,
    "mbmix": lambda cfg, seed, out: _exp_training(cfg, seed, out, "learned-model", "mix"),
    "shac-baseline": lambda cfg, seed, out: _exp_training(cfg, seed, out, "real-env", "fixed"),
    "mix-real-env": lambda cfg, seed, out: _exp_training(cfg, seed, out, "real-env", "mix"),
    "model-ablation": _exp_model_ablation,
    "variance-study": _exp_variance_study,
}


def run_suite(cfg: ExperimentConfig) -> int:
    """Execute the configured experiment for every seed.

    Layout: {outdir}/{kind}/{seed}/ with resolved config, CSV curves, JSON
    summary, and checkpoints. Failures leave failure.json behind and flip
    the exit status to 2; other seeds still run.
    """
    kind = cfg.get("experiment", "kind")
    root = os.environ.get(OUT_ROOT_ENV) or cfg.get("experiment", "outdir")
    status = 0
    for seed in cfg.get("experiment", "seeds"):
        outdir = Path(root) / kind / str(seed)
        outdir.mkdir(parents=True, exist_ok=True)
        cfg.write(outdir / "config.ini")
        try:
            summary = _BODIES[kind](cfg, int(seed), outdir)
        except Exception as err:  # noqa: BLE001 - failure record wanted
            (outdir / "failure.json").write_text(json.dumps(
                {"error": str(err), "type": type(err).__name__,
                 "traceback": traceback.format_exc()}, indent=2))
            status = 2
            continue
        (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return status


# ---------------------------------------------------------------------------
# CLI


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mbmix",
                                     description="experiment harness")
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="run the experiment in a config file")
    p_run.add_argument("config")
    p_print = sub.add_parser("print-config", help="print all defaults for a kind")
    p_print.add_argument("kind", choices=KINDS)
    p_var = sub.add_parser("variance-study", help="run a variance study config")
    p_var.add_argument("config")
    p_eval = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("env")
    p_eval.add_argument("--episodes", type=int, default=16)
    p_eval.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if args.verb == "print-config":
        print(ExperimentConfig.default(args.kind).to_ini_str())
        return 0

    if args.verb == "eval":
        try:
            nets = load_checkpoint(args.checkpoint)
            env = make_env(args.env)
        except Exception as err:  # noqa: BLE001
            print(f"config error: {err}", file=sys.stderr)
            return 1
        mean, std = eval_policy(env, nets["policy"], env.default_discount,
                                args.episodes, env.horizon, args.seed)
        print(json.dumps({"return_mean": mean, "return_std": std}))
        return 0

    try:
        cfg = ExperimentConfig.from_ini(args.config)
        if args.verb == "variance-study" and cfg.get("experiment", "kind") != "variance-study":
            raise ConfigError("variance-study verb needs experiment.kind = variance-study")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    return run_suite(cfg)


if __name__ == "__main__":
    sys.exit(main())
