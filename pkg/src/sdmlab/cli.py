"""``sdmlab`` command suite.

Every subcommand writes its artifacts plus ``manifest.json`` (argv, inputs with
hashes, seed, resolved config and its hash, library versions) into ``--out``.
Exit codes: 0 success, 1 bad invocation / validation error, 2 numerical-check
failure (a bound violated, a non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import EnvConfig, dump_config, load_config
from .errors import ConfigError, NumericalError, SdmLabError, UnknownCommand, ValidationError
from .nn import params_hash

COMMANDS = ("gen-data", "gen-circle", "solve", "verify", "fit-model", "train", "clone-circle", "eval")
STOCHASTIC = {"gen-data", "gen-circle", "verify", "fit-model", "train", "clone-circle", "eval"}


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of printing usage and exiting with 2."""

    def error(self, message):
        if "invalid choice" in message:
            raise UnknownCommand(message)
        key = None
        if "unrecognized arguments:" in message:
            key = message.split(":", 1)[1].strip().split()[0]
        raise ConfigError(message, key=key)


def build_parser():
    p = _Parser(prog="sdmlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, default=Path("out") / name)
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        return sp

    sp = common("gen-data", "sample an offline dataset (tabular MDP or point mass)")
    sp.add_argument("--mdp", type=Path, help="MDP JSON; omit for the point-mass environment")
    sp.add_argument("--policy", type=Path, help="policy JSON {'probs': [[...]]}; default uniform")
    sp.add_argument("--steps", type=int, help="transitions (tabular) / overrides env.n_transitions")
    sp.add_argument("--gzip", action="store_true")

    sp = common("gen-circle", "write the circle toy dataset")
    sp.add_argument("--n-total", type=int, default=100_000)
    sp.add_argument("--radius", type=float, default=4.0)
    sp.add_argument("--sigma", type=float, default=0.05)
    sp.add_argument("--split", type=int, default=5000)

    sp = common("solve", "stationary distribution, average reward and Q for an MDP + policy")
    sp.add_argument("--mdp", type=Path, required=True)
    sp.add_argument("--policy", type=Path)

    sp = common("verify", "bound checks over seeded random tabular instances")
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    sp.add_argument("--max-states", type=int, default=8)
    sp.add_argument("--max-actions", type=int, default=3)
    sp.add_argument("--n-random", type=int, default=64)

    sp = common("fit-model", "fit a tabular MLE model or a dynamics ensemble")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--smoothing", type=float, default=1e-2)

    sp = common("train", "offline actor-critic with the stationary-distribution GAN regulariser")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--model", type=Path, help="ensemble JSON from fit-model; fitted if omitted")

    sp = common("clone-circle", "conditional-GAN behaviour cloning on the circle data")
    sp.add_argument("--data", type=Path, help="circle JSON from gen-circle; generated if omitted")
    sp.add_argument("--kind", choices=("implicit", "gaussian", "deterministic"), default="implicit")
    sp.add_argument("--samples-per-x", type=int, default=16, help="rows per test x in samples.csv")

    sp = common("eval", "evaluate a policy checkpoint (or the behaviour policy) on the point mass")
    sp.add_argument("--policy", type=Path, help="checkpoint from train; omit for the behaviour policy")
    sp.add_argument("--episodes", type=int)
    return p


# --- helpers -----------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy
    import yaml
    return {"sdmlab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pyyaml": yaml.__version__}


def write_manifest(out, args, argv, config, inputs, outputs, extra=None):
    cfg = config.to_dict()
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "seed": args.seed,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items() if p},
        "config": cfg,
        "config_hash": params_hash(cfg),
        "overrides": list(args.overrides),
        "versions": _versions(),
        "outputs": sorted(outputs),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return manifest


def _write_csv(path, rows, columns=None):
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _load_policy(path, S, A):
    from .mdp import TabularPolicy
    if path is None:
        return TabularPolicy.uniform(S, A)
    raw = json.loads(Path(path).read_text())
    probs = np.asarray(raw["probs"] if isinstance(raw, dict) else raw, dtype=np.float64)
    if probs.shape != (S, A):
        raise ValidationError(f"policy shape {probs.shape} != {(S, A)}")
    return TabularPolicy(probs)


def _env_and_behavior(env_cfg: EnvConfig):
    from .env import ControllerPolicy, PointMassEnv
    env = PointMassEnv()
    return env, ControllerPolicy(env, env_cfg.behavior_gain, env_cfg.behavior_noise)


# --- subcommands: each returns (exit code, inputs, outputs, manifest extras) --

def cmd_gen_data(args, cfg):
    from .data import generate_dataset, write_dataset
    name = "dataset.jsonl.gz" if args.gzip else "dataset.jsonl"
    if args.mdp is not None:
        from .mdp import load_mdp
        mdp = load_mdp(args.mdp)
        pi = _load_policy(args.policy, mdp.n_states, mdp.n_actions)
        ds = generate_dataset(mdp, pi, args.steps or 10_000, args.seed,
                              behavior=str(args.policy or "uniform"))
    else:
        from .env import collect_dataset
        env, behavior = _env_and_behavior(cfg.env)
        ds = collect_dataset(env, behavior, args.steps or cfg.env.n_transitions, args.seed,
                             behavior=f"controller gain={cfg.env.behavior_gain} noise={cfg.env.behavior_noise}")
    write_dataset(ds, args.out / name)
    summary = {"n": len(ds), "kind": ds.kind, "mean_reward": float(ds.r.mean()),
               "terminal_fraction": float(ds.d.mean())}
    _write_csv(args.out / "results.csv", [summary])
    print(json.dumps(summary))
    return 0, {"mdp": args.mdp, "policy": args.policy}, [name, "results.csv"], {}


def cmd_gen_circle(args, cfg):
    from .data import make_circle_dataset
    c = make_circle_dataset(args.n_total, args.radius, args.sigma, args.split, args.seed)
    (args.out / "circle.json").write_text(json.dumps(
        {"meta": c.meta, "train": c.train.tolist(), "test": c.test.tolist()}))
    rows = [{"split": name, "x": float(x), "y": float(y)}
            for name, arr in (("train", c.train), ("test", c.test)) for x, y in arr]
    _write_csv(args.out / "results.csv", rows)
    print(json.dumps({"train": len(c.train), "test": len(c.test)}))
    return 0, {}, ["circle.json", "results.csv"], {}


def _load_circle(path):
    from .data import CircleDataset
    raw = json.loads(Path(path).read_text())
    m = raw["meta"]
    return CircleDataset(np.asarray(raw["train"]), np.asarray(raw["test"]), m["radius"], m["sigma"], m)


def cmd_solve(args, cfg):
    from .avgreward import average_reward_and_bias, bellman_residual
    from .mdp import load_mdp, stationary_distribution
    mdp = load_mdp(args.mdp)
    pi = _load_policy(args.policy, mdp.n_states, mdp.n_actions)
    d = stationary_distribution(mdp, pi)
    dv = average_reward_and_bias(mdp, pi, mdp.reward)
    res = bellman_residual(mdp, pi, dv, mdp.reward)
    marginal = d.state_marginal()
    rows = [{"s": s, "a": a, "d": float(d.probs[s, a]), "q": float(dv.q[s, a])}
            for s in range(mdp.n_states) for a in range(mdp.n_actions)]
    _write_csv(args.out / "results.csv", rows)
    rec = {"state_marginal": marginal.tolist(), "eta": dv.eta, "q": dv.q.tolist(),
           "pin": dv.pin, "bellman_residual": float(res)}
    _write_jsonl(args.out / "reports.jsonl", [rec])
    print("state_marginal " + " ".join(f"{x:.10f}" for x in marginal))
    print(f"eta {dv.eta:.10f}")
    return 0, {"mdp": args.mdp, "policy": args.policy}, ["results.csv", "reports.jsonl"], {}


def _verify_one(job):
    from .bounds import verify_instance
    seed, kwargs = job
    inst, report = verify_instance(seed, **kwargs)
    row = {"seed": seed, "n_states": inst.mdp.n_states, "n_actions": inst.mdp.n_actions}
    row.update(report.to_json())
    return row


def cmd_verify(args, cfg):
    if args.instances < 1:
        raise ConfigError("must be >= 1", key="--instances")
    if args.workers < 1:
        raise ConfigError("must be >= 1", key="--workers")
    base = np.random.SeedSequence(args.seed)
    seeds = [int(c.generate_state(1)[0]) for c in base.spawn(args.instances)]
    kwargs = {"max_states": args.max_states, "max_actions": args.max_actions, "n_random": args.n_random}
    jobs = [(s, kwargs) for s in seeds]
    if args.workers == 1:
        rows = [_verify_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_verify_one, jobs))
    _write_jsonl(args.out / "reports.jsonl", rows)
    flat = []
    for row in rows:
        r = {k: v for k, v in row.items() if k != "holds"}
        r.update({f"holds_{k}": bool(v) for k, v in row["holds"].items()})
        r["all_hold"] = all(row["holds"].values())
        flat.append(r)
    _write_csv(args.out / "results.csv", flat)
    n_ok = sum(r["all_hold"] for r in flat)
    print(f"{n_ok}/{len(flat)} instances: all checks hold")
    return (0 if n_ok == len(flat) else 2), {}, ["results.csv", "reports.jsonl"], {"instance_seeds": seeds}


def cmd_fit_model(args, cfg):
    from .data import read_dataset
    ds = read_dataset(args.data)
    if ds.kind == "tabular":
        from .bounds import mle_tabular_model
        model = mle_tabular_model(ds, args.smoothing)
        (args.out / "model.json").write_text(json.dumps(
            {"kind": "tabular", "transition": model.transition.tolist(), "counts": model.counts.tolist(),
             "smoothing": args.smoothing}))
        rows = [{"s": s, "a": a, "visits": float(model.counts[s, a].sum())}
                for s in range(model.counts.shape[0]) for a in range(model.counts.shape[1])]
        _write_csv(args.out / "results.csv", rows)
        return 0, {"data": args.data}, ["model.json", "results.csv"], {}
    from .ensemble import train_dynamics_ensemble
    ens = train_dynamics_ensemble(ds, cfg.ensemble, seed=args.seed)
    ens.save(args.out / "ensemble.json")
    rows = [{"member": i, "val_loss": v, "elite": i in ens.elites} for i, v in enumerate(ens.val_losses)]
    _write_csv(args.out / "results.csv", rows)
    print(f"elites {ens.elites}")
    return 0, {"data": args.data}, ["ensemble.json", "results.csv"], {}


def cmd_train(args, cfg):
    from .data import read_dataset
    from .ensemble import DynamicsEnsemble, train_dynamics_ensemble
    from .sdmgan import train
    ds = read_dataset(args.data)
    if ds.kind != "continuous":
        raise ValidationError("train needs a continuous dataset")
    outputs = ["results.csv", "policy.json"]
    if args.model is not None:
        ens = DynamicsEnsemble.load(args.model)
    else:
        ens = train_dynamics_ensemble(ds, cfg.ensemble, seed=args.seed)
        ens.save(args.out / "ensemble.json")
        outputs.append("ensemble.json")
    env, _ = _env_and_behavior(cfg.env)
    state, rows = train(ds, ens, cfg.trainer, args.seed, env=env, log_path=args.out / "results.csv",
                        callback=lambda row: print(json.dumps(row), flush=True))
    (args.out / "policy.json").write_text(json.dumps(state.actor.to_json()))
    return 0, {"data": args.data, "model": args.model}, outputs, {}


def cmd_clone_circle(args, cfg):
    from .data import make_circle_dataset
    from .toy import behavior_clone_toy
    circle = _load_circle(args.data) if args.data else make_circle_dataset(seed=args.seed)
    res = behavior_clone_toy(circle, args.kind, cfg.toy, seed=args.seed)
    rng = np.random.default_rng([args.seed, 2])
    x = np.repeat(circle.test[:, 0], args.samples_per_x)
    y = res.generator.sample(x[:, None], rng)[:, 0]
    _write_csv(args.out / "samples.csv", [{"x": float(a), "y": float(b)} for a, b in zip(x, y)])
    _write_csv(args.out / "results.csv", [{"kind": args.kind, "coverage": res.coverage,
                                            "final_disc_loss": res.disc_losses[-1] if res.disc_losses else float("nan"),
                                            "final_gen_loss": res.gen_losses[-1] if res.gen_losses else float("nan")}])
    (args.out / "generator.json").write_text(json.dumps(
        {"kind": args.kind, "noise_dim": res.generator.noise_dim, "net": res.generator.net.to_json()}))
    print(f"coverage {res.coverage:.4f}")
    return 0, {"data": args.data}, ["results.csv", "samples.csv", "generator.json"], {"coverage": res.coverage}


def cmd_eval(args, cfg):
    from .env import evaluate_policy, normalized, reference_returns
    from .sdmgan import ImplicitPolicy
    env, behavior = _env_and_behavior(cfg.env)
    if args.policy is not None:
        policy = ImplicitPolicy.from_json(json.loads(Path(args.policy).read_text()))
    else:
        policy = behavior
    episodes = args.episodes or cfg.trainer.eval_episodes
    ev = evaluate_policy(env, policy, episodes, seed=args.seed)
    refs = reference_returns(env, episodes, seed=args.seed)
    rows = [{"episode": i, "return": r} for i, r in enumerate(ev["returns"])]
    _write_csv(args.out / "results.csv", rows)
    summary = {"mean": ev["mean"], "std": ev["std"], "normalized": normalized(ev["mean"], refs), **refs}
    _write_jsonl(args.out / "reports.jsonl", [summary])
    print(json.dumps(summary))
    return 0, {"policy": args.policy}, ["results.csv", "reports.jsonl"], {}


HANDLERS = {
    "gen-data": cmd_gen_data, "gen-circle": cmd_gen_circle, "solve": cmd_solve, "verify": cmd_verify,
    "fit-model": cmd_fit_model, "train": cmd_train, "clone-circle": cmd_clone_circle, "eval": cmd_eval,
}


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command in STOCHASTIC and args.seed is None:
            raise ConfigError(f"{args.command} is stochastic; --seed is required", key="--seed")
        cfg = load_config(args.config, args.overrides)
        args.out.mkdir(parents=True, exist_ok=True)
        code, inputs, outputs, extra = HANDLERS[args.command](args, cfg)
        dump_config(cfg, args.out / "config.yaml")
        write_manifest(args.out, args, argv, cfg, inputs, outputs + ["config.yaml"], {"exit_code": code, **extra})
        return code
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SdmLabError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
