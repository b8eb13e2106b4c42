"""Command-line entry point: ``pdlab {nash-verify,surface,train,eval,ablate,rerun}``.

Every command writes ``manifest.json`` into its output directory before
starting and finalizes it afterwards; ``pdlab rerun MANIFEST`` repeats the
command with the recorded configuration.
"""

from __future__ import annotations

import os

_threads = os.environ.get("PD_LAB_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import replace  # noqa: E402
from datetime import datetime, timezone  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__, emfac, geometry  # noqa: E402
from .config import ALGOS, ConfigError, RunConfig, config_from_dict, load_config  # noqa: E402

log = logging.getLogger("pdlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

NASH_DEFAULTS = {"instances": 200, "attacker_speed": 1.25, "defender_speed": 1.0, "dt": 0.01, "deviation": 0.1}
SURFACE_DEFAULTS = {"defender": [0.2, 0.2, 0.0], "v": 1.25, "theta_samples": 60, "revolve_samples": 24, "tol": 1e-6}
ABLATIONS = {
    "full": {},
    "wo_att_s": {"state_attention": False},
    "wo_att_a": {"action_attention": False},
    "wo_att_as": {"state_attention": False, "action_attention": False},
    "wo_emf": {"embedded_mean_field": False},
}
ABLATION_LABELS = {"full": "EMFAC", "wo_att_s": "w/o Att-S", "wo_att_a": "w/o Att-A", "wo_att_as": "w/o Att-AS", "wo_emf": "w/o EMF"}


def _section(cfg: RunConfig, name: str, defaults: dict) -> dict:
    given = cfg.extra.get(name, {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown field")
    return {**defaults, **given}


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


# --- commands --------------------------------------------------------------------------


def cmd_nash_verify(cfg: RunConfig, out: Path, args) -> list[str]:
    p = _section(cfg, "nash", NASH_DEFAULTS)
    v = float(p["attacker_speed"]) / float(p["defender_speed"])
    dt = float(p["dt"])
    rng = np.random.default_rng([cfg.game.seed, 11])
    scenarios = (("both-optimal", True, True), ("defender-deviates", False, True), ("attacker-deviates", True, False))
    rows = []
    gap = []
    d_ok = a_ok = 0
    n = int(p["instances"])
    for k in range(n):
        inst = geometry.zero_payoff_instance(rng, v, cfg.game.R)
        res = {}
        for name, d_opt, a_opt in scenarios:
            o = geometry.simulate_1v1(inst, d_opt, a_opt, deviation=float(p["deviation"]), dt=dt)
            # times on the defender's clock (defender speed scales both)
            t_a = o.t_attacker / float(p["defender_speed"])
            t_d = o.t_defender / float(p["defender_speed"])
            res[name] = (t_a, t_d)
            rows.append((name, k, t_a, t_d, t_d - t_a))
        gap.append(abs(res["both-optimal"][1] - res["both-optimal"][0]))
        d_ok += res["defender-deviates"][1] >= res["both-optimal"][1] - 1e-9
        a_ok += res["attacker-deviates"][0] >= res["both-optimal"][0] - 1e-9
    rows.sort(key=lambda r: [s[0] for s in scenarios].index(r[0]))
    _write_csv(out / "nash.csv", ("scenario", "instance", "t_attacker", "t_defender", "payoff"), rows)
    summary = {
        "instances": n,
        "v": v,
        "max_gap_optimal": float(max(gap)),
        "gap_threshold": 2 * dt,
        "defender_deviation_ok": int(d_ok),
        "attacker_deviation_ok": int(a_ok),
    }
    summary["passed"] = bool(summary["max_gap_optimal"] < 2 * dt and d_ok == n and a_ok == n)
    with open(out / "nash_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return ["nash.csv", "nash_summary.json"]


def cmd_surface(cfg: RunConfig, out: Path, args) -> list[str]:
    p = _section(cfg, "surface", SURFACE_DEFAULTS)
    D = np.asarray(p["defender"], dtype=float)
    res = geometry.zero_payoff_surface(D, float(p["v"]), int(p["theta_samples"]), float(p["tol"]), cfg.game.R, int(p["revolve_samples"]))
    geometry.write_surface_csv(res.points, out / "surface.csv")
    print(f"{len(res.points)} surface points, {len(res.omitted)} omitted")
    return ["surface.csv"]


def cmd_train(cfg: RunConfig, out: Path, args) -> list[str]:
    progress = (lambda row: print(json.dumps(row), flush=True)) if args.verbose else None
    res = emfac.train(cfg.game, cfg.train, out_dir=out, resume=getattr(args, "resume", None), progress=progress)
    with open(out / "final_metrics.json", "w") as fh:
        json.dump({"initial": _scalar_metrics(res.initial), "final": _scalar_metrics(res.final), "steps": res.steps}, fh, indent=2, sort_keys=True)
    print(json.dumps({"steps": res.steps, **_scalar_metrics(res.final)}, sort_keys=True))
    return res.files + ["final_metrics.json"]


def _scalar_metrics(m: dict) -> dict:
    return {k: m[k] for k in ("mean_reward", "success_rate", "collision_rate") if k in m}


def cmd_eval(cfg: RunConfig, out: Path, args) -> list[str]:
    episodes = args.episodes if args.episodes is not None else cfg.train.eval_episodes
    trace_dir = None
    if args.traces:
        trace_dir = out / "traces"
        trace_dir.mkdir(parents=True, exist_ok=True)
    if cfg.train.algo == "rule":
        policy = emfac.rule_policy()
    else:
        if args.checkpoint is None:
            raise ConfigError("checkpoint", f"--checkpoint is required to evaluate algo {cfg.train.algo!r}")
        ckpt = Path(args.checkpoint)
        if ckpt.is_dir():
            ckpt = ckpt / "checkpoint.npz"
        policy = emfac.learned_policy(emfac.load_learner(ckpt, cfg.game, cfg.train))
    metrics = emfac.evaluate(policy, cfg.game, episodes, trace_dir=trace_dir)
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    _write_csv(out / "eval.csv", ("episode", "reward"), list(enumerate(metrics["episode_rewards"])))
    print(json.dumps(_scalar_metrics(metrics), sort_keys=True))
    files = ["metrics.json", "eval.csv"]
    if trace_dir is not None:
        files += [f"traces/{p.name}" for p in sorted(trace_dir.iterdir())]
    return files


def cmd_ablate(cfg: RunConfig, out: Path, args) -> list[str]:
    files, rows = [], []
    for slug, flags in ABLATIONS.items():
        train_cfg = replace(cfg.train, algo="emfac", **flags)
        sub = out / slug
        res = emfac.train(cfg.game, train_cfg, out_dir=sub)
        files += [f"{slug}/{f}" for f in res.files]
        rows.append((ABLATION_LABELS[slug], slug, res.final["mean_reward"], res.final["success_rate"], res.final["collision_rate"]))
        print(f"{ABLATION_LABELS[slug]:>10}: reward {res.final['mean_reward']:.3f} success {res.final['success_rate']:.3f}", flush=True)
    _write_csv(out / "ablation.csv", ("variant", "slug", "mean_reward", "success_rate", "collision_rate"), rows)
    return files + ["ablation.csv"]


COMMANDS = {
    "nash-verify": cmd_nash_verify,
    "surface": cmd_surface,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# --- manifests ---------------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _command_args(args) -> dict:
    keep = ("episodes", "traces", "checkpoint", "resume", "verbose")
    out = {k: getattr(args, k) for k in keep if getattr(args, k, None) is not None}
    return {k: str(v) if isinstance(v, Path) else v for k, v in out.items()}


def run_command(command: str, cfg: RunConfig, out: Path, args) -> int:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.game.seed,
        "args": _command_args(args),
        "version": __version__,
        "started": _now(),
        "finished": None,
        "status": "running",
        "outputs": [],
    }
    path = out / "manifest.json"

    def flush():
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    flush()
    t0 = time.perf_counter()
    try:
        manifest["outputs"] = COMMANDS[command](cfg, out, args)
        manifest["status"] = "ok"
        return EXIT_OK
    except emfac.DivergenceError as exc:
        manifest["status"] = "diverged"
        manifest["error"] = str(exc)
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError:
        manifest["status"] = "config-error"
        raise
    finally:
        manifest["finished"] = _now()
        manifest["seconds"] = round(time.perf_counter() - t0, 3)
        flush()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pdlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="TOML file with [game], [train] and command sections")
        p.add_argument("--seed", type=int, help="overrides game.seed and train.seed")
        p.add_argument("--out", type=Path, help="output directory (default runs/<command>)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V", help="override a config field, e.g. train.k=0.5")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("nash-verify", help="check the 1v1 equilibrium in three strategy settings"))
    common(sub.add_parser("surface", help="export the zero-payoff surface"))
    p = common(sub.add_parser("train", help="train a defender policy"))
    p.add_argument("--algo", choices=ALGOS)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint or the rule-based baseline"))
    p.add_argument("--algo", choices=ALGOS)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--episodes", type=int)
    p.add_argument("--traces", action="store_true", help="export JSON-lines episode traces")
    common(sub.add_parser("ablate", help="train the full method and its four ablations"))
    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.game = replace(cfg.game, seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "algo", None):
        cfg.train = replace(cfg.train, algo=args.algo)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            with open(args.manifest) as fh:
                manifest = json.load(fh)
            command = manifest["command"]
            cfg = config_from_dict(manifest["config"])
            ns = argparse.Namespace(**{"episodes": None, "traces": False, "checkpoint": None, "resume": None, "verbose": False, **manifest.get("args", {})})
            for key in ("checkpoint", "resume"):
                if getattr(ns, key):
                    setattr(ns, key, Path(getattr(ns, key)))
            return run_command(command, cfg, args.out, ns)
        cfg = _resolve_config(args)
        out = args.out if args.out is not None else Path("runs") / args.command
        return run_command(args.command, cfg, out, args)
    except ConfigError as exc:
        print(f"pdlab: configuration error in {exc.field}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"pdlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
