"""Command-line entry point: ``riskdiff <subcommand> [flags]``.

Every subcommand accepts ``--seed``, ``--workers`` and ``--config <file>``.
The config file is flat ``key = value`` text with a mandatory
``schema_version``; keys are the subcommand's long flag names (``-`` or
``_``), and flags given on the command line override file values. Each run
writes a ``manifest.json`` (resolved config, its hash, seed, versions and
output digests) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


class CliError(Exception):
    """User-facing failure reported as a single line."""


# --- config -----------------------------------------------------------------------------


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror}") from None
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in out:
            raise CliError(f"{path}:{n}: duplicate key {key!r}")
        out[key] = value
    version = out.pop("schema_version", None)
    if version is None:
        raise CliError(f"{path}: missing schema_version")
    if version != str(SCHEMA_VERSION):
        raise CliError(f"{path}: schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    return out


def _convert(action: argparse.Action, key: str, value: str):
    if isinstance(action, argparse._StoreTrueAction):
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise CliError(f"config key {key!r}: expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    try:
        return action.type(value) if action.type else value
    except (TypeError, ValueError) as e:
        raise CliError(f"config key {key!r}: {e}") from None


def resolve(parser: argparse.ArgumentParser, args: argparse.Namespace, defaults: dict) -> dict:
    """Merge built-in defaults, the config file and explicit flags (in that order)."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    resolved = dict(defaults)
    if args.config:
        for key, value in read_config_file(args.config).items():
            if key not in actions:
                raise CliError(f"unknown config key {key!r} for {args.command}")
            resolved[key] = _convert(actions[key], key, value)
    for dest in actions:
        v = getattr(args, dest, None)
        if v is not None:
            resolved[dest] = v
    missing = [k for k in actions if resolved.get(k) is None and k in REQUIRED.get(args.command, ())]
    if missing:
        raise CliError(f"missing required setting(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")
    return resolved


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON config; ``workers`` is left out since it cannot change results."""
    relevant = {k: v for k, v in config.items() if k != "workers"}
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(path, command: str, config: dict, outputs) -> None:
    """Self-describing run record; contains no timestamps so reruns are byte-identical."""
    import matplotlib
    import scipy

    path = Path(path)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": config.get("seed"),
        "versions": {
            "riskdiff": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "outputs": {Path(p).name: _digest(Path(p)) for p in outputs},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _floats(text: str, n: int | None = None) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _pair(text):
    return _floats(text, 2)


def _triple(text):
    return _floats(text, 3)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


# --- shared builders -----------------------------------------------------------------------


def _risk_config(c):
    from .risk import RiskConfig

    return RiskConfig(alpha=c["alpha"], gamma=c["gamma"], mc_samples=c["mc_samples"])


def _guidance(c, T: int):
    from . import guidance as G

    mode = c["guidance"]
    if mode == "none":
        return G.Unguided()
    if mode == "classifier":
        return G.Classifier(c["eta"])
    if mode == "filter":
        return G.Filter()
    proj = G.Projection.for_schedule(T, beta_mix=c["beta_mix"],
                                     **{k: c[k] for k in ("t1", "t2") if c.get(k) is not None})
    proj.validate(T)
    return proj


def _load_ckpt(path):
    from .diffusion.model import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


# --- subcommands ---------------------------------------------------------------------------


def cmd_riskmap(c):
    from .risk import CostParams, build_risk_map, save_risk_map
    from .terrain import load_terrain

    belief = load_terrain(c["terrain"])
    rm = build_risk_map(belief, CostParams(), _risk_config(c), seed=c["seed"])
    out = Path(c["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_risk_map(rm, out)
    unsafe = float(np.mean(rm.rho > c["gamma"]))
    write_manifest(out.with_name(out.name + ".manifest.json"), "riskmap", c, [out])
    print(f"risk map {rm.spec.width}x{rm.spec.height} -> {out} (unsafe fraction {unsafe:.3f})")


def cmd_gen_data(c):
    from .expert import generate_demos, save_dataset_dir, training_recipes
    from .terrain import TerrainRecipe

    out = Path(c["out"])
    recipe_seed, demo_seed = _child_seeds(c["seed"], 2)
    if c["recipes"]:
        try:
            raw = json.loads(Path(c["recipes"]).read_text())
        except OSError as e:
            raise CliError(f"cannot read recipes {c['recipes']}: {e.strerror}") from None
        raw = raw if isinstance(raw, list) else [raw]
        recipes = [TerrainRecipe.from_dict(r) for r in raw]
    else:
        recipes = training_recipes(c["n_recipes"], recipe_seed)
    if not recipes:
        raise CliError("no terrain recipes")
    episodes = generate_demos(recipes, c["episodes"], demo_seed, risk_config=_risk_config(c))
    out.mkdir(parents=True, exist_ok=True)
    (out / "recipes.json").write_text(json.dumps([r.to_dict() for r in recipes], indent=1, sort_keys=True) + "\n")
    ds = save_dataset_dir(episodes, out, stride=c["stride"])
    write_manifest(out / MANIFEST, "gen-data", c, [out / "dataset.json", out / "recipes.json"])
    print(f"{len(episodes)} episodes, {len(ds)} training pairs -> {out}")


def cmd_train(c):
    from .diffusion.model import TrainConfig, save_checkpoint, train
    from .diffusion.schedule import NoiseSchedule
    from .expert import load_dataset_dir

    data = Path(c["data"])
    if not (data / "dataset.json").is_file():
        raise CliError(f"not a dataset directory: {data}")
    ds = load_dataset_dir(data)
    sched = NoiseSchedule.linear(c["T"])
    cfg = TrainConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], seed=c["seed"])
    res = train(ds, sched, cfg)
    out = Path(c["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.params, out)
    losses = out.with_name(out.name + ".losses.csv")
    losses.write_text("epoch,loss\n" + "".join(f"{i + 1},{v:.8f}\n" for i, v in enumerate(res.losses)))
    write_manifest(out.with_name(out.name + ".manifest.json"), "train", c, [out, losses])
    print(f"trained {c['epochs']} epochs on {len(ds)} pairs: loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")


def cmd_sample(c):
    from .diffusion.data import build_context
    from .diffusion.sampler import RiskGuide, sample
    from .diffusion.schedule import NoiseSchedule
    from .risk import CostParams, Pose, RiskSurrogate, SafeSet, build_risk_map, is_safe, to_world
    from .terrain import load_terrain

    params = _load_ckpt(c["ckpt"])
    sched = NoiseSchedule.linear(params.T)
    rm = build_risk_map(load_terrain(c["terrain"]), CostParams(), _risk_config(c), seed=c["seed"])
    pose = Pose(*c["pose"])
    safe_set = SafeSet(rm, c["gamma"])
    guidance = _guidance(c, params.T)
    guide = RiskGuide(safe_set, RiskSurrogate(rm, gamma=c["gamma"]), pose)
    ctx = build_context(rm, pose, c["goal"])
    seqs = sample(params, ctx, sched, guidance, rng=c["seed"], batch=c["batch"], guide=guide)
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    lines = ["sample,waypoint,x_robot,y_robot,x_world,y_world,sequence_safe"]
    for i, u in enumerate(seqs):
        safe = int(is_safe(safe_set, u, pose))
        for j, (p, w) in enumerate(zip(u, to_world(u, pose).reshape(-1, 2))):
            lines.append(f"{i},{j},{p[0]:.6f},{p[1]:.6f},{w[0]:.6f},{w[1]:.6f},{safe}")
    path = out / "samples.csv"
    path.write_text("\n".join(lines) + "\n")
    write_manifest(out / MANIFEST, "sample", c, [path])
    print(f"{len(seqs)} sequences ({c['guidance']}) -> {path}")


def cmd_eval(c):
    from .diffusion.schedule import NoiseSchedule
    from .sim import EpisodeConfig, Method, evaluate, ood_suite

    params = _load_ckpt(c["ckpt"])
    risk_config = _risk_config(c)
    out = Path(c["out"])
    if c["suite"]:
        try:
            raw = json.loads(Path(c["suite"]).read_text())
        except OSError as e:
            raise CliError(f"cannot read suite {c['suite']}: {e.strerror}") from None
        suite = [EpisodeConfig.from_dict(d) for d in raw]
    else:
        suite = ood_suite(c["episodes"], _child_seeds(c["seed"], 1)[0], risk_config=risk_config)
    if not suite:
        raise CliError("empty evaluation suite")
    for cfg in suite:
        cfg.validate(params.n_waypoints)
    names = [m.strip() for m in c["methods"].split(",") if m.strip()]
    aliases = {"vanilla": "none"}
    methods = []
    for name in names:
        mode = aliases.get(name, name)
        if mode not in GUIDANCE_MODES:
            raise CliError(f"unknown method {name!r} (choose from vanilla, {', '.join(GUIDANCE_MODES)})")
        methods.append(Method(name, _guidance(dict(c, guidance=mode), params.T)))
    report = evaluate(methods, suite, params, risk_config, NoiseSchedule.linear(params.T), workers=c["workers"])
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "suite.json": json.dumps([s.to_dict() for s in suite], indent=1, sort_keys=True) + "\n",
        "episodes.csv": report.episodes_csv(),
        "metrics.csv": report.metrics_csv(),
        "report.txt": report.table() + "\n",
    }
    for name, text in files.items():
        (out / name).write_text(text)
    write_manifest(out / MANIFEST, "eval", c, [out / n for n in files])
    print(report.table())


def cmd_demo1d(c):
    from .oned import LangevinConfig, emit_demo_report, run_demo

    cfg = LangevinConfig(step_size=c["step_size"], steps=c["steps"], n_samples=c["samples"], seed=c["seed"])
    runs = run_demo(config=cfg, etas=c["eta_sweep"], workers=c["workers"])
    paths = emit_demo_report(runs, c["out"])
    write_manifest(Path(c["out"]) / MANIFEST, "demo1d", c, list(paths.values()))
    for r in runs:
        print(f"{r.label:<24} violations {r.violation_fraction:7.2%}  modes "
              + " ".join(f"{m:.3f}" for m in r.target.mode_masses(r.samples)))


GUIDANCE_MODES = ("none", "classifier", "projection", "filter")

REQUIRED = {
    "riskmap": ("terrain", "out"),
    "gen-data": ("out",),
    "train": ("data", "out"),
    "sample": ("ckpt", "terrain", "pose", "goal", "out"),
    "eval": ("ckpt", "out"),
    "demo1d": ("out",),
}

COMMANDS = {
    "riskmap": cmd_riskmap,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "demo1d": cmd_demo1d,
}


def _defaults(command: str) -> dict:
    risk = {"alpha": 0.9, "gamma": 0.8, "mc_samples": 32}
    guide = {"guidance": "projection", "eta": 5.0, "t1": None, "t2": None, "beta_mix": 0.5}
    common = {"seed": 0, "workers": os.cpu_count() or 1}
    table = {
        "riskmap": {"terrain": None, "out": None, **risk},
        "gen-data": {"recipes": None, "n_recipes": 25, "episodes": 500, "stride": 1, "out": None, **risk},
        "train": {"data": None, "out": None, "epochs": 150, "batch_size": 256, "lr": 1e-3, "T": 50},
        "sample": {"ckpt": None, "terrain": None, "pose": None, "goal": None, "batch": 8, "out": None,
                   **risk, **guide},
        "eval": {"ckpt": None, "suite": None, "episodes": 30, "methods": "vanilla,classifier,filter,projection",
                 "out": None, **risk, **{k: v for k, v in guide.items() if k != "guidance"}},
        "demo1d": {"eta_sweep": (0.0, 1.0, 10.0, 100.0), "samples": 10_000, "steps": 100, "step_size": 2e-5,
                   "out": None},
    }
    return {**common, **table[command]}


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--seed", type=int, help="master seed (default 0)")
    g.add_argument("--workers", type=_positive_int, help="worker processes (default: all cores)")
    g.add_argument("--config", metavar="FILE", help="flat key = value file; flags override it")

    risk = argparse.ArgumentParser(add_help=False)
    r = risk.add_argument_group("risk map")
    r.add_argument("--alpha", type=float, help="CVaR level (default 0.9)")
    r.add_argument("--gamma", type=float, help="risk tolerance (default 0.8)")
    r.add_argument("--mc-samples", type=_positive_int, help="Monte-Carlo terrain realizations (default 32)")

    guide = argparse.ArgumentParser(add_help=False)
    h = guide.add_argument_group("guidance")
    h.add_argument("--eta", type=float, help="classifier penalty weight (default 5)")
    h.add_argument("--t1", type=int, help="projection: last step of the previous-projection branch")
    h.add_argument("--t2", type=int, help="projection: last step of the rejection branch")
    h.add_argument("--beta-mix", type=float, help="projection interpolation weight (default 0.5)")

    parser = argparse.ArgumentParser(prog="riskdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"riskdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    subs = {}

    p = sub.add_parser("riskmap", parents=[common, risk], help="build a CVaR risk map from a terrain")
    p.add_argument("--terrain", help=".grid file or JSON terrain recipe")
    p.add_argument("--out", help="output .grid path")
    subs["riskmap"] = p

    p = sub.add_parser("gen-data", parents=[common, risk], help="plan safe demonstrations")
    p.add_argument("--recipes", help="JSON recipe or list of recipes (default: random training maps)")
    p.add_argument("--n-recipes", type=_positive_int, help="random training maps when --recipes is absent")
    p.add_argument("--episodes", type=_positive_int, help="demonstrations to plan (default 500)")
    p.add_argument("--stride", type=_positive_int, help="window stride along each path (default 1)")
    p.add_argument("--out", help="dataset directory")
    subs["gen-data"] = p

    p = sub.add_parser("train", parents=[common], help="train the denoiser")
    p.add_argument("--data", help="dataset directory from gen-data")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--T", type=_positive_int, help="diffusion steps (default 50)")
    subs["train"] = p

    p = sub.add_parser("sample", parents=[common, risk, guide], help="sample waypoint sequences at one pose")
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--terrain", help=".grid file or JSON terrain recipe")
    p.add_argument("--pose", type=_triple, help="x,y,theta")
    p.add_argument("--goal", type=_pair, help="x,y")
    p.add_argument("--guidance", choices=GUIDANCE_MODES)
    p.add_argument("--batch", type=_positive_int, help="number of sequences (default 8)")
    p.add_argument("--out", help="output directory")
    subs["sample"] = p

    p = sub.add_parser("eval", parents=[common, risk, guide], help="closed-loop evaluation")
    p.add_argument("--ckpt", help="checkpoint path")
    p.add_argument("--suite", help="JSON list of episode configs (default: generated OOD pit suite)")
    p.add_argument("--episodes", type=_positive_int, help="size of the generated suite (default 30)")
    p.add_argument("--methods", help="comma-separated: vanilla,classifier,filter,projection")
    p.add_argument("--out", help="output directory")
    subs["eval"] = p

    p = sub.add_parser("demo1d", parents=[common], help="1-D guided Langevin demo")
    p.add_argument("--eta-sweep", type=_floats, help="classifier weights (default 0,1,10,100)")
    p.add_argument("--samples", type=_positive_int)
    p.add_argument("--steps", type=_positive_int, help="Langevin steps per noise level")
    p.add_argument("--step-size", type=float)
    p.add_argument("--out", help="output directory")
    subs["demo1d"] = p
    return parser, subs


def _one_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    return f"riskdiff: error: {type(exc).__name__}: {msg}"


def main(argv=None) -> int:
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        config = resolve(subs[args.command], args, _defaults(args.command))
        COMMANDS[args.command](config)
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as e:
        print(_one_line(e), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
