"""Fictitious play for the n-agent portfolio game with common noise and jumps.

Each outer round freezes a snapshot of every agent's networks; each agent then
trains a best response against the frozen policies of the others and writes
back only its own networks. Rounds run sequentially or across spawned worker
processes with identical results.
"""

from __future__ import annotations

import csv
import math
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .actor_critic import (
    ControlProblem,
    ExplosionMode,
    StepData,
    TrainConfig,
    TrainedNets,
    _value,
    lr_schedule,
    reward_tilde_poisson,
    train,
)
from .equilibrium import MarketParams, UtilitySpec, game_value
from .errors import InvalidArgument, JumpGamesError, NumericFault
from .metrics import error_control, error_game, error_value, per_time_l2_errors
from .networks import ParameterSnapshot, ResNetApproximator, forward_bounded, init_network
from .sde import (
    DTYPE,
    CompoundPoissonSource,
    ControlledDynamics,
    LevyMeasure,
    PathBatch,
    TimeGrid,
    derive_seed,
    sample_jump_panel,
    sample_noise_panel,
    seed_to_int,
    simulate_batch,
)

# seed purposes at the game level
GAME_INIT, GAME_EVAL = 10, 11


@dataclass
class GameSpec:
    market: MarketParams
    utility: UtilitySpec
    x0: Optional[np.ndarray] = None
    horizon: float = 1.0
    steps: int = 50

    def __post_init__(self):
        n = self.market.n
        if len(self.utility.theta) != n:
            raise InvalidArgument("utility and market disagree on the number of agents")
        x0 = np.ones(n) if self.x0 is None else np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (n,):
            raise InvalidArgument("x0 must hold one wealth per agent")
        if self.proportional and np.any(x0 <= 0):
            raise InvalidArgument("proportional wealth needs x0 > 0")
        self.x0 = x0

    @property
    def n(self) -> int:
        return self.market.n

    @property
    def proportional(self) -> bool:
        return self.utility.kind in ("power", "log")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps)


def game_dynamics(spec: GameSpec) -> ControlledDynamics:
    """State = wealths, control = all positions, noise = (W^1..W^n, B)."""
    m = spec.market
    n = m.n
    mu = torch.as_tensor(m.mu, dtype=DTYPE)
    nu = torch.as_tensor(m.nu, dtype=DTYPE)
    sig = torch.as_tensor(m.sigma, dtype=DTYPE)
    prop = spec.proportional

    def scale(x, u):
        return u * x if prop else u

    def drift(x, u):
        return scale(x, u) * mu

    def diffusion(x, u):
        s = scale(x, u)
        return torch.cat([torch.diag_embed(s * nu), (s * sig)[:, :, None]], dim=2)

    def jump(x, z, u):
        return z * scale(x, u)

    def noise_term(x, u, dw):
        return scale(x, u) * (nu * dw[:, :n] + sig * dw[:, n:])

    eye = np.eye(n)
    sources = [CompoundPoissonSource(float(m.lam[k]), mark=m.alpha[k] * eye[k]) for k in range(n)]
    sources.append(CompoundPoissonSource(float(m.lam0), mark=np.asarray(m.beta, dtype=float)))
    marks = torch.as_tensor(np.stack([s.mark for s in sources]), dtype=DTYPE)

    def fixed_jump_mix(x, u, w):
        return scale(x, u) * (w.T @ marks)

    return ControlledDynamics(
        n, n, drift, diffusion, jump, LevyMeasure(sources), noise_dim=n + 1, noise_term=noise_term, fixed_jump_mix=fixed_jump_mix
    )


def terminal_utility(spec: GameSpec, i: int) -> Callable[[torch.Tensor], torch.Tensor]:
    u = spec.utility
    th = float(u.theta[i])
    if u.kind == "exponential":
        d = float(u.delta[i])
        return lambda x: -torch.exp(-(x[:, i] - th * x.mean(dim=1)) / d)

    def rel(x):
        lx = torch.log(x)
        return lx[:, i] - th * lx.mean(dim=1)

    if u.kind == "power":
        p = float(u.p[i])
        return lambda x: torch.exp(p * rel(x)) / p
    return rel


@dataclass
class AgentNetSet:
    critics: list[ResNetApproximator]
    actors: list[ResNetApproximator]

    @classmethod
    def init(cls, spec: GameSpec, seed, width: Optional[int] = None, blocks: int = 2, b0: float = 1.0):
        n = spec.n
        w = width or n + 10
        base = derive_seed(seed, GAME_INIT)
        critics = [init_network(n, w, blocks, 1, seed_to_int(base + [i, 0])) for i in range(n)]
        actors = [init_network(n, w, blocks, 1, seed_to_int(base + [i, 1]), bound=b0) for i in range(n)]
        return cls(critics, actors)

    @property
    def n(self) -> int:
        return len(self.actors)

    def snapshot(self) -> list[tuple[bytes, bytes]]:
        return [
            (ParameterSnapshot.capture(c).to_bytes(), ParameterSnapshot.capture(a).to_bytes())
            for c, a in zip(self.critics, self.actors)
        ]

    @classmethod
    def from_snapshot(cls, snap: Sequence[tuple[bytes, bytes]]) -> "AgentNetSet":
        critics = [ParameterSnapshot.from_bytes(c).build() for c, _ in snap]
        actors = [ParameterSnapshot.from_bytes(a).build() for _, a in snap]
        return cls(critics, actors)

    def checksums(self) -> list[tuple[str, str]]:
        return [
            (ParameterSnapshot.capture(c).checksum(), ParameterSnapshot.capture(a).checksum())
            for c, a in zip(self.critics, self.actors)
        ]

    def write_back(self, i: int, critic_bytes: bytes, actor_bytes: bytes) -> None:
        ParameterSnapshot.from_bytes(critic_bytes).load_into(self.critics[i])
        ParameterSnapshot.from_bytes(actor_bytes).load_into(self.actors[i])

    def policy(self, i: int):
        actor = self.actors[i]
        return lambda t, x: forward_bounded(actor, t, x)


@dataclass
class GameTrainConfig:
    iter_out: int = 100
    iter_inner: int = 100
    actor_step: int = 10
    batch: int = 500
    seed: int = 2023
    workers: int = 1
    mode: str = "sequential"  # sequential | parallel
    blocks: int = 2
    width: Optional[int] = None
    b0: float = 1.0
    lr_levels: tuple[float, float, float] = (1e-3, 1e-4, 1e-5)
    floor: float = 1e-8
    floor_warmup: int = 100  # inner iterations, counted across rounds
    eval_batch: Optional[int] = None

    def __post_init__(self):
        if self.iter_out < 1 or self.iter_inner < 0 or self.actor_step < 1 or self.batch < 1:
            raise InvalidArgument("need iter_out >= 1, iter_inner >= 0, actor_step >= 1, batch >= 1")
        if self.workers < 1:
            raise InvalidArgument("workers must be >= 1")
        if self.mode not in ("sequential", "parallel"):
            raise InvalidArgument(f"unknown mode {self.mode!r}")


@dataclass
class GameTrainReport:
    n: int
    rows: list[dict] = field(default_factory=list)
    per_time: Optional[dict] = None

    @property
    def columns(self) -> list[str]:
        cols = ["outer_iteration", "error_value_game", "error_control_game"]
        for key in ("error_value_agent", "error_control_agent", "critic_loss_agent", "actor_loss_agent"):
            cols += [f"{key}_{i + 1}" for i in range(self.n)]
        return cols + ["lr", "seconds"]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(r[k]) for k in self.columns})


# ---------------------------------------------------------------------------
# simulation and reward


def joint_policy(policies: Sequence[Callable]) -> Callable:
    def pi(t, x):
        return torch.cat([p(t, x).reshape(x.shape[0], 1) for p in policies], dim=1)

    return pi


def simulate_game_batch(spec: GameSpec, policies: Sequence[Callable], noise, jumps, x0=None, clamp=None) -> PathBatch:
    if len(policies) != spec.n:
        raise InvalidArgument("need one policy per agent")
    x0 = spec.x0 if x0 is None else x0
    return simulate_batch(game_dynamics(spec), joint_policy(policies), spec.grid, noise, jumps, x0, clamp=clamp)


def game_panels(spec: GameSpec, M: int, seed):
    dyn = game_dynamics(spec)
    return sample_noise_panel(spec.grid, M, dyn.noise_dim, seed), sample_jump_panel(dyn.measure, spec.grid, M, seed)


def agent_problem(spec: GameSpec, i: int, frozen: AgentNetSet) -> ControlProblem:
    """Agent i's control problem with the other agents' policies frozen."""
    others = [None if k == i else frozen.policy(k) for k in range(spec.n)]
    for k, a in enumerate(frozen.actors):
        if k != i:
            a.requires_grad_(False)

    def compose(t, x, own):
        cols = [own.reshape(x.shape[0], 1) if k == i else others[k](t, x) for k in range(spec.n)]
        return torch.cat(cols, dim=1)

    return ControlProblem(
        game_dynamics(spec),
        None,
        terminal_utility(spec, i),
        spec.x0,
        sense="maximize",
        compose_control=compose if spec.n > 1 else None,
        actor_dim=1,
    )


def game_reward_tilde(spec: GameSpec, i: int, critic, step: StepData):
    """Martingale-corrected reward for agent i; step.u is the full position vector."""
    problem = ControlProblem(game_dynamics(spec), None, terminal_utility(spec, i), spec.x0, actor_dim=1)
    return reward_tilde_poisson(problem, critic, step)


# ---------------------------------------------------------------------------
# best response and fictitious play


def inner_config(spec: GameSpec, config: GameTrainConfig, i: int, outer: int) -> TrainConfig:
    lr = lr_schedule(outer, config.iter_out, config.lr_levels)
    floor_left = max(0, config.floor_warmup - outer * config.iter_inner) if spec.proportional else 0
    return TrainConfig(
        horizon=spec.horizon,
        steps=spec.steps,
        batch=config.batch,
        iterations=config.iter_inner,
        actor_step=config.actor_step,
        lr_fixed=lr,
        seed=derive_seed(config.seed, i, outer),
        explosion=ExplosionMode("bounded", b0=config.b0, floor=config.floor, floor_warmup=floor_left),
        actor_loss="J",
        jump_path="poisson",
        width=config.width,
        blocks=config.blocks,
    )


def train_agent_best_response(
    i: int, snapshot: Sequence[tuple[bytes, bytes]], spec: GameSpec, config: GameTrainConfig, outer: int
) -> tuple[bytes, bytes, float, float]:
    """Train agent i against the frozen snapshot; returns its new networks and final losses."""
    torch.set_num_threads(1)
    frozen = AgentNetSet.from_snapshot(snapshot)
    local = AgentNetSet.from_snapshot(snapshot)
    problem = agent_problem(spec, i, frozen)
    nets = TrainedNets(local.critics[i], local.actors[i])
    try:
        report, nets = train(problem, inner_config(spec, config, i, outer), nets=nets, context={"agent": i, "outer": outer})
    except NumericFault as exc:
        exc.context.update(agent=i, outer=outer)
        raise
    last = report.final
    return (
        ParameterSnapshot.capture(nets.critic).to_bytes(),
        ParameterSnapshot.capture(nets.actor).to_bytes(),
        float(last.get("critic_loss", math.nan)),
        float(last.get("actor_loss", math.nan)),
    )


@dataclass
class GameOracle:
    pi: np.ndarray

    def value(self, spec: GameSpec, i: int, t, x):
        return game_value(t, x, i, spec.market, spec.utility, self.pi, T=spec.horizon)


def evaluate_game(spec: GameSpec, nets: AgentNetSet, oracle: GameOracle, panels):
    """Per-agent value and control errors on joint paths under the learned policies."""
    grid = spec.grid
    with torch.no_grad():
        batch = simulate_game_batch(spec, [nets.policy(k) for k in range(spec.n)], *panels)
        X = batch.states[:, :-1].transpose(0, 1)  # [L, M, n]
        L, M, n = X.shape
        flat = X.reshape(L * M, n)
        t = torch.as_tensor(np.repeat(grid.nodes[:-1], M), dtype=DTYPE)
        v_hat = [_value(nets.critics[i], t, flat).reshape(L, M).numpy() for i in range(n)]
        u_hat = [nets.policy(i)(t, flat).reshape(L, M).numpy() for i in range(n)]
    xs, tn = flat.numpy(), t.numpy()
    ev, ec, series_v, series_u = [], [], [], []
    for i in range(n):
        v = np.asarray(oracle.value(spec, i, tn, xs)).reshape(L, M)
        u = np.full((L, M), oracle.pi[i])
        ev.append(error_value(v_hat[i], v, grid.dt))
        ec.append(error_control(u_hat[i], u, grid.dt))
        series_v.append(per_time_l2_errors(v_hat[i], v))
        series_u.append(per_time_l2_errors(u_hat[i], u))
    return ev, ec, {"t": grid.nodes[:-1], "e_v": series_v, "e_u": series_u}


def _run_round(spec, config, snapshot, outer, pool):
    n = spec.n
    if pool is None:
        return [train_agent_best_response(i, snapshot, spec, config, outer) for i in range(n)]
    futures = [pool.submit(train_agent_best_response, i, snapshot, spec, config, outer) for i in range(n)]
    out = []
    for i, f in enumerate(futures):
        try:
            out.append(f.result())
        except JumpGamesError:
            raise
        except Exception as exc:
            raise NumericFault(f"worker failed: {exc!r}", agent=i, outer=outer) from exc
    return out


def fictitious_play(
    spec: GameSpec,
    config: GameTrainConfig,
    oracle: Optional[GameOracle] = None,
    nets: Optional[AgentNetSet] = None,
    on_round: Optional[Callable[[int, AgentNetSet, dict], None]] = None,
) -> tuple[GameTrainReport, AgentNetSet]:
    torch.set_num_threads(1)
    nets = nets or AgentNetSet.init(spec, config.seed, config.width, config.blocks, config.b0)
    report = GameTrainReport(spec.n)
    eval_panels = game_panels(spec, config.eval_batch or config.batch, derive_seed(config.seed, GAME_EVAL))
    pool = None
    if config.mode == "parallel":
        pool = ProcessPoolExecutor(max_workers=config.workers, mp_context=mp.get_context("spawn"))
    start = time.perf_counter()
    try:
        for outer in range(config.iter_out):
            snapshot = nets.snapshot()
            results = _run_round(spec, config, snapshot, outer, pool)
            # barrier passed: every agent trained against the same snapshot
            for i, (cb, ab, _, _) in enumerate(results):
                nets.write_back(i, cb, ab)
            row = {"outer_iteration": outer, "lr": lr_schedule(outer, config.iter_out, config.lr_levels)}
            for i, (_, _, cl, al) in enumerate(results):
                row[f"critic_loss_agent_{i + 1}"] = cl
                row[f"actor_loss_agent_{i + 1}"] = al
            if oracle is not None:
                ev, ec, series = evaluate_game(spec, nets, oracle, eval_panels)
                report.per_time = series
            else:
                ev = ec = [math.nan] * spec.n
            for i in range(spec.n):
                row[f"error_value_agent_{i + 1}"] = ev[i]
                row[f"error_control_agent_{i + 1}"] = ec[i]
            row["error_value_game"], row["error_control_game"] = error_game(ev, ec)
            row["seconds"] = time.perf_counter() - start
            report.rows.append(row)
            if on_round is not None:
                on_round(outer, nets, row)
    finally:
        if pool is not None:
            pool.shutdown()
    return report, nets
