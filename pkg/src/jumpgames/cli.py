"""Command-line drivers: equilibrium, merton, lqr and game experiments.

Every flag can also be given in a flat ``key = value`` config file (keys are
flag names without the leading dashes); command-line flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import benchmarks as bm
from .actor_critic import TrainReport, train
from .equilibrium import LQRParams, MertonParams, check_uniqueness_conditions, solve_equilibrium
from .errors import JumpGamesError
from .game import GameOracle, GameSpec, GameTrainConfig, fictitious_play
from .networks import ParameterSnapshot

log = logging.getLogger("jumpgames")

EXPERIMENTS = ("equilibrium", "merton", "lqr", "game")

# flag name -> (type, default); None default means "preset decides"
FLAGS = {
    "seed": (int, 2023),
    "preset": (str, "ci"),
    "out": (str, "runs/out"),
    "workers": (int, 1),
    "utility": (str, None),
    "agents": (int, None),
    "dim": (int, 5),
    "actor-loss": (str, None),
    "mode": (str, "sequential"),
    "iterations": (int, None),
    "batch": (int, None),
    "steps": (int, 50),
    "actor-step": (int, 10),
    "explosion": (str, None),
    "iter-out": (int, None),
    "iter-inner": (int, None),
    "market": (str, "symmetric"),
    "bound-c": (float, None),
    "method": (str, "fixed-point"),
    "eval-every": (int, 1),
}

CHOICES = {
    "preset": ("paper", "ci"),
    "utility": ("exp", "exponential", "power", "log"),
    "actor-loss": ("J", "Jtilde"),
    "mode": ("parallel", "sequential"),
    "explosion": ("bounded", "clamp"),
    "market": ("symmetric", "heterogeneous"),
    "method": ("fixed-point", "damped-newton", "per-agent-bisection"),
}


def read_config(path) -> dict:
    """Flat key = value lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key == "experiment":
            out[key] = value
            continue
        if key not in FLAGS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumpgames", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        for flag, (typ, _) in FLAGS.items():
            p.add_argument(f"--{flag}", type=typ, default=None, choices=CHOICES.get(flag))
    return parser


def resolve(argv: Optional[Sequence[str]] = None) -> dict:
    args = build_parser().parse_args(argv)
    cfg = {k: d for k, (_, d) in FLAGS.items()}
    if args.config:
        for k, v in read_config(args.config).items():
            if k == "experiment":
                if v != args.experiment:
                    raise ValueError(f"config is for {v!r}, not {args.experiment!r}")
                continue
            cfg[k] = FLAGS[k][0](v)
    for k in FLAGS:
        v = getattr(args, k.replace("-", "_"))
        if v is not None:
            cfg[k] = v
    cfg["experiment"] = args.experiment
    for k, choices in CHOICES.items():
        if cfg[k] is not None and cfg[k] not in choices:
            raise ValueError(f"{k} must be one of {choices}, got {cfg[k]!r}")
    return cfg


def write_resolved(cfg: dict, out: Path) -> None:
    lines = [f"experiment = {cfg['experiment']}"]
    lines += [f"{k} = {cfg[k]}" for k in FLAGS if cfg.get(k) is not None]
    (out / "config.resolved").write_text("\n".join(lines) + "\n")


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if isinstance(v, float) and math.isnan(v) else repr(float(v)) for v in r])


# ---------------------------------------------------------------------------
# experiments


def _market(cfg):
    kind = cfg["utility"] or "exp"
    if cfg["market"] == "heterogeneous":
        if bm.KIND_ALIASES.get(kind, kind) != "exponential":
            raise ValueError("the heterogeneous market is defined for exponential utility only")
        return bm.heterogeneous_market(cfg["agents"] or 10)
    n = cfg["agents"] or (2 if cfg["preset"] == "ci" else 20)
    return bm.symmetric_market(n), bm.symmetric_utility(n, kind)


def run_equilibrium(cfg: dict, out: Path) -> dict:
    market, utility = _market(cfg)
    C = cfg["bound-c"] if cfg["bound-c"] is not None else (1.2 if cfg["market"] == "heterogeneous" else 1.0)
    sol = solve_equilibrium(market, utility, method=cfg["method"], C=C)
    sol.to_json(out / "equilibrium.json", market=market.to_dict(), utility=utility.to_dict())
    return {"residual": sol.residual_norm, "iterations": sol.iterations}


def _single(cfg: dict, out: Path, problem, oracle, config) -> dict:
    report, nets = train(problem, config, oracle, log=_progress(config.iterations))
    report.to_csv(out / "metrics.csv")
    if report.per_time is not None:
        s = report.per_time
        _write_rows(out / "per_time_errors.csv", ["t", "e_v", "e_u"], zip(s["t"], s["e_v"], s["e_u"]))
    ParameterSnapshot.capture(nets.critic).save(out / "critic.npz")
    ParameterSnapshot.capture(nets.actor).save(out / "actor.npz")
    return {k: report.final.get(k) for k in ("error_value", "error_control")}


def _progress(total):
    def emit(row):
        it = row["iteration"]
        if it == total - 1 or (it + 1) % max(1, total // 20) == 0:
            log.info("iteration %d/%d value %.5f control %.5f", it + 1, total, row["error_value"], row["error_control"])

    return emit


def run_merton(cfg: dict, out: Path) -> dict:
    kind = cfg["utility"] or "power"
    params = MertonParams()
    overrides = _train_overrides(cfg)
    config = bm.merton_config(cfg["preset"], **overrides)
    return _single(cfg, out, bm.merton_problem(params, kind), bm.merton_oracle(params, kind), config)


def run_lqr(cfg: dict, out: Path) -> dict:
    params = LQRParams(d=cfg["dim"])
    overrides = _train_overrides(cfg)
    config = bm.lqr_config(cfg["preset"], cfg["explosion"] or "clamp", **overrides)
    return _single(cfg, out, bm.lqr_problem(params), bm.lqr_oracle(params), config)


def _train_overrides(cfg: dict) -> dict:
    o = dict(seed=cfg["seed"], steps=cfg["steps"], actor_step=cfg["actor-step"])
    if cfg["actor-loss"] is not None:
        o["actor_loss"] = cfg["actor-loss"]
    o["eval_every"] = cfg["eval-every"]
    if cfg["iterations"] is not None:
        o["iterations"] = cfg["iterations"]
    if cfg["batch"] is not None:
        o["batch"] = cfg["batch"]
    return o


def game_config(cfg: dict) -> GameTrainConfig:
    ci = cfg["preset"] == "ci"
    return GameTrainConfig(
        iter_out=cfg["iter-out"] or (30 if ci else 100),
        iter_inner=cfg["iter-inner"] if cfg["iter-inner"] is not None else (50 if ci else 100),
        actor_step=cfg["actor-step"],
        batch=cfg["batch"] or 500,
        seed=cfg["seed"],
        workers=cfg["workers"],
        mode=cfg["mode"],
    )


def run_game(cfg: dict, out: Path) -> dict:
    market, utility = _market(cfg)
    spec = GameSpec(market, utility, steps=cfg["steps"])
    sol = solve_equilibrium(market, utility)
    sol.to_json(out / "equilibrium.json", market=market.to_dict(), utility=utility.to_dict())
    config = game_config(cfg)
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)

    def on_round(outer, nets, row):
        for i in range(spec.n):
            ParameterSnapshot.capture(nets.critics[i]).save(snaps / f"round{outer:03d}_agent{i + 1}_critic.npz")
            ParameterSnapshot.capture(nets.actors[i]).save(snaps / f"round{outer:03d}_agent{i + 1}_actor.npz")
        log.info("round %d value %.5f control %.5f", outer + 1, row["error_value_game"], row["error_control_game"])

    report, nets = fictitious_play(spec, config, GameOracle(sol.pi), on_round=on_round)
    report.to_csv(out / "metrics.csv")
    if report.per_time is not None:
        s = report.per_time
        header = ["t"] + [f"e_v_agent_{i + 1}" for i in range(spec.n)] + [f"e_u_agent_{i + 1}" for i in range(spec.n)]
        _write_rows(out / "per_time_errors.csv", header, zip(s["t"], *s["e_v"], *s["e_u"]))
    _policy_probe(spec, nets, sol.pi, out / "policy_probe.csv")
    return {k: report.final.get(k) for k in ("error_value_game", "error_control_game")}


def _policy_probe(spec, nets, pi_star, path: Path) -> None:
    """Learned positions on a (t, x) grid with other wealths at x0."""
    ts = np.linspace(0.0, spec.horizon, 11)
    lo, hi = (0.5, 1.5) if spec.proportional else (0.0, 2.0)
    xs = np.linspace(lo, hi, 11)
    rows = []
    with torch.no_grad():
        for i in range(spec.n):
            for t in ts:
                X = np.tile(spec.x0, (len(xs), 1))
                X[:, i] = xs
                u = nets.policy(i)(float(t), torch.as_tensor(X)).reshape(-1).numpy()
                rows += [(i + 1, t, x, ui, pi_star[i]) for x, ui in zip(xs, u)]
    _write_rows(path, ["agent", "t", "x_own", "pi_hat", "pi_star"], rows)


RUNNERS = {"equilibrium": run_equilibrium, "merton": run_merton, "lqr": run_lqr, "game": run_game}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(argv)
    except ValueError as exc:
        log.error("%s", exc)
        return 2
    torch.set_num_threads(1)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    try:
        summary = RUNNERS[cfg["experiment"]](cfg, out)
    except (JumpGamesError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "context": getattr(exc, "context", {})}
        (out / "error.json").write_text(json.dumps(err, indent=2, default=str))
        log.error("%s", json.dumps(err, default=str))
        return 1
    print(json.dumps({"experiment": cfg["experiment"], "out": str(out), **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
