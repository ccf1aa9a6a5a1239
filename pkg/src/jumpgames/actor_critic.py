"""Actor-critic training for jump-diffusion control problems.

The critic is fitted by temporal differences on a martingale-corrected reward,
one Adam step per time index; the actor maximises the pathwise objective by
differentiating through the Euler rollout, several updates per sampled panel.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import InvalidArgument, InvalidState, NumericFault
from .networks import Adam, ResNetApproximator, forward_bounded, init_network
from .sde import (
    DTYPE,
    ControlledDynamics,
    JumpPanel,
    NoisePanel,
    SourceJumps,
    TimeGrid,
    clamp_state,
    derive_seed,
    diffusion_term,
    euler_step,
    sample_jump_panel,
    sample_noise_panel,
    seed_to_int,
    source_jump,
)

__all__ = [
    "ControlProblem",
    "ExplosionMode",
    "TrainConfig",
    "TerminalBuffer",
    "TrainReport",
    "StepData",
    "Oracle",
    "reward_tilde_general",
    "reward_tilde_poisson",
    "critic_loss_td",
    "critic_loss_terminal",
    "critic_loss_nonlocal",
    "critic_total",
    "actor_objective",
    "lr_schedule",
    "clamp_state",
    "train",
]

# seed purposes
BUFFER, CRITIC, ACTOR, EVAL, INIT = 0, 1, 2, 3, 4

Fn = Callable[..., torch.Tensor]


@dataclass
class ControlProblem:
    """dX = b dt + sigma dW + G dN~ with reward E[int f dt + g(X_T)].

    ``running(t, x, u) -> [M]`` and ``terminal(x) -> [M]``. When
    ``compose_control`` is set, the actor outputs only ``actor_dim`` entries
    and ``compose_control(t, x, own)`` builds the full control that enters the
    dynamics and the running reward (used for frozen co-players in games).
    """

    dynamics: ControlledDynamics
    running: Optional[Fn]
    terminal: Fn
    x0: np.ndarray
    sense: str = "maximize"
    control_space: str = "unbounded"
    compose_control: Optional[Callable[[float, torch.Tensor, torch.Tensor], torch.Tensor]] = None
    actor_dim: Optional[int] = None

    def __post_init__(self):
        if self.sense not in ("maximize", "minimize"):
            raise InvalidArgument(f"sense must be maximize or minimize, got {self.sense!r}")
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if self.x0.shape != (self.dynamics.state_dim,):
            raise InvalidArgument("x0 does not match the state dimension")
        if self.actor_dim is None:
            self.actor_dim = self.dynamics.control_dim

    @property
    def state_dim(self) -> int:
        return self.dynamics.state_dim

    @property
    def poisson_ready(self) -> bool:
        return self.dynamics.measure.all_fixed

    def f(self, t, x, u) -> torch.Tensor:
        if self.running is None:
            return torch.zeros(x.shape[0], dtype=DTYPE)
        return self.running(t, x, u)


@dataclass(frozen=True)
class ExplosionMode:
    kind: str = "none"  # bounded | clamp | none
    b0: float = 1.0
    lo: float = -5.0
    hi: float = 5.0
    warmup: int = 100  # iterations during which the state clamp is active
    floor: Optional[float] = None  # lower state floor, any kind, for floor_warmup iterations
    floor_warmup: int = 0

    def __post_init__(self):
        if self.kind not in ("bounded", "clamp", "none"):
            raise InvalidArgument(f"unknown explosion mode {self.kind!r}")
        if self.kind == "clamp" and not self.lo < self.hi:
            raise InvalidArgument("clamp needs lo < hi")

    def clamp_at(self, iteration: int) -> Optional[tuple[float, float]]:
        if self.kind == "clamp" and iteration < self.warmup:
            return (self.lo, self.hi)
        if self.floor is not None and iteration < self.floor_warmup:
            return (self.floor, math.inf)
        return None


@dataclass
class TrainConfig:
    horizon: float = 1.0
    steps: int = 50
    batch: int = 500
    iterations: int = 1000
    actor_step: int = 10
    lr_levels: tuple[float, float, float] = (1e-3, 1e-4, 1e-5)
    lr_fixed: Optional[float] = None
    seed: int | Sequence[int] = 2023
    explosion: ExplosionMode = field(default_factory=ExplosionMode)
    actor_loss: str = "J"  # J | Jtilde
    jump_path: str = "auto"  # auto | poisson | general
    width: Optional[int] = None
    blocks: int = 3
    eval_batch: Optional[int] = None
    eval_every: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidArgument("iterations must be >= 0")
        if self.actor_step < 1 or self.batch < 1 or self.steps < 1:
            raise InvalidArgument("actor_step, batch and steps must be >= 1")
        if self.actor_loss not in ("J", "Jtilde"):
            raise InvalidArgument(f"actor_loss must be J or Jtilde, got {self.actor_loss!r}")
        if self.jump_path not in ("auto", "poisson", "general"):
            raise InvalidArgument(f"unknown jump path {self.jump_path!r}")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps)


@dataclass
class TerminalBuffer:
    states: Optional[torch.Tensor] = None
    iteration: int = -1

    def refresh(self, x: torch.Tensor, iteration: int) -> None:
        if not torch.isfinite(x).all():
            raise NumericFault("non-finite terminal state", iteration=iteration)
        self.states = x.detach().clone()
        self.iteration = iteration

    @property
    def ready(self) -> bool:
        return self.states is not None and self.states.shape[0] > 0


@dataclass
class Oracle:
    """Exact value v(t, x) -> [M] and control u(t, x) -> [M, d_c] on numpy inputs."""

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    control: Callable[[np.ndarray, np.ndarray], np.ndarray]


REPORT_COLUMNS = ["iteration", "critic_loss", "actor_loss", "error_value", "error_control", "lr", "seconds"]


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    per_time: Optional[dict] = None

    def append(self, **row) -> None:
        self.rows.append({k: row.get(k, math.nan) for k in REPORT_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else repr(v)) for k, v in r.items()})


# ---------------------------------------------------------------------------
# per-step quantities


@dataclass
class StepData:
    """Everything about interval [t_n, t_n+1] for one batch; states are detached."""

    t: float
    dt: float
    x: torch.Tensor
    u: torch.Tensor
    dw: torch.Tensor
    jumps: list[SourceJumps]
    x_next: Optional[torch.Tensor] = None
    intensities: tuple[float, ...] = ()

    @property
    def t_next(self) -> float:
        return self.t + self.dt

    def delta_m(self) -> torch.Tensor:
        """[K, M] compensated counts k - lambda dt."""
        if not self.jumps:
            return torch.zeros(0, self.x.shape[0], dtype=DTYPE)
        c = torch.as_tensor(np.stack([sj.counts for sj in self.jumps]), dtype=DTYPE)
        lam = torch.as_tensor(self.intensities, dtype=DTYPE)[:, None]
        return c - lam * self.dt


def _value(critic: Fn, t, x: torch.Tensor) -> torch.Tensor:
    return critic(t, x).reshape(-1)


def _value_and_grad(critic: Fn, t, x: torch.Tensor, create_graph: bool):
    """v(t, x) [M] and grad_x v [M, d]; differentiable w.r.t. the critic when asked."""
    xr = x if x.requires_grad else x.detach().requires_grad_(True)
    with torch.enable_grad():
        v = _value(critic, t, xr)
        if v.requires_grad:
            (g,) = torch.autograd.grad(v.sum(), xr, create_graph=create_graph, retain_graph=True)
        else:
            g = torch.zeros_like(xr)
    return v, g


def _jump_differences(problem: ControlProblem, critic: Fn, step: StepData, v_x: torch.Tensor, x_in=None):
    """[K, M] tensor of v(t, x + G_k(x, u)) - v(t, x) for fixed-mark sources."""
    x = step.x if x_in is None else x_in
    dyn = problem.dynamics
    K = len(dyn.measure.sources)
    if K == 0:
        return torch.zeros(0, x.shape[0], dtype=DTYPE)
    M = x.shape[0]
    shifted = torch.cat([x + source_jump(dyn, k, x, step.u) for k in range(K)])
    v_shift = _value(critic, step.t, shifted).reshape(K, M)
    return v_shift - v_x[None, :]


def _mark_sum(problem: ControlProblem, critic: Fn, step: StepData, v_x: torch.Tensor, x_in=None) -> torch.Tensor:
    """Per path: sum over marks in the interval of v(t, x + G(x, z, u)) - v(t, x)."""
    x = step.x if x_in is None else x_in
    dyn = problem.dynamics
    M = x.shape[0]
    out = torch.zeros(M, dtype=DTYPE)
    for k, sj in enumerate(step.jumps):
        if not sj.counts.any():
            continue
        if sj.marks is None:
            c = torch.as_tensor(sj.counts, dtype=DTYPE)
            rows = torch.as_tensor(np.nonzero(sj.counts)[0])
            xs = x[rows]
            g = source_jump(dyn, k, xs, step.u[rows])
            diff = _value(critic, step.t, xs + g) - v_x[rows]
            out = out.index_add(0, rows, c[rows] * diff)
        else:
            idx = torch.as_tensor(sj.path_index)
            g = dyn.jump(x[idx], torch.as_tensor(sj.marks, dtype=DTYPE), step.u[idx])
            diff = _value(critic, step.t, x[idx] + g) - v_x[idx]
            out = out.index_add(0, idx, diff)
    return out


def _check(r: torch.Tensor, what: str, **ctx) -> torch.Tensor:
    if not torch.isfinite(r).all():
        raise NumericFault(f"non-finite {what}", **ctx)
    return r


def reward_tilde_poisson(problem: ControlProblem, critic: Fn, step: StepData, create_graph: bool = True, _cache=None):
    """f dt - (sigma^T grad v)^T dW - sum_k [v(x + z_k) - v(x)] dM^k."""
    v_x, grad = _value_and_grad(critic, step.t, step.x, create_graph) if _cache is None else _cache
    r = problem.f(step.t, step.x, step.u) * step.dt
    r = r - (grad * diffusion_term(problem.dynamics, step.x, step.u, step.dw)).sum(dim=1)
    if step.jumps:
        diffs = _jump_differences(problem, critic, step, v_x)
        r = r - (diffs * step.delta_m()).sum(dim=0)
    return _check(r, "reward", t=step.t)


def _nonlocal_residual(problem: ControlProblem, critic: Fn, non: Fn, step: StepData, v_x: torch.Tensor):
    marks = _mark_sum(problem, critic, step, v_x)
    return marks - step.dt * _value(non, step.t, step.x)


def reward_tilde_general(problem: ControlProblem, nets, step: StepData, create_graph: bool = True, _cache=None):
    """f dt - (sigma^T grad v)^T dW - (sum_marks [v(x+G) - v(x)] - dt * N_non(x))."""
    critic, _, non = nets
    if non is None:
        raise InvalidArgument("general jump path needs the non-local network")
    v_x, grad = _value_and_grad(critic, step.t, step.x, create_graph) if _cache is None else _cache
    r = problem.f(step.t, step.x, step.u) * step.dt
    r = r - (grad * diffusion_term(problem.dynamics, step.x, step.u, step.dw)).sum(dim=1)
    r = r - _nonlocal_residual(problem, critic, non, step, v_x)
    return _check(r, "reward", t=step.t)


def critic_loss_td(problem: ControlProblem, critic: Fn, step: StepData, non: Optional[Fn] = None, path: str = "poisson"):
    if step.x_next is None:
        raise InvalidArgument("step data lacks the next state")
    cache = _value_and_grad(critic, step.t, step.x, True)
    if path == "poisson":
        r = reward_tilde_poisson(problem, critic, step, _cache=cache)
    else:
        r = reward_tilde_general(problem, (critic, None, non), step, _cache=cache)
    td = r + _value(critic, step.t_next, step.x_next) - cache[0]
    return (td**2).mean()


def critic_loss_terminal(buffer: TerminalBuffer, g: Fn, critic: Fn, L: int, T: float):
    if not buffer.ready:
        raise InvalidState("terminal buffer is empty")
    x = buffer.states
    return ((_value(critic, T, x) - g(x)) ** 2).mean() / L


def critic_loss_nonlocal(problem: ControlProblem, critic: Fn, non: Fn, step: StepData):
    v_x = _value(critic, step.t, step.x)
    return _nonlocal_residual(problem, critic, non, step, v_x).mean().abs()


def critic_total(td, terminal, nonlocal_loss=None):
    return td + terminal if nonlocal_loss is None else td + terminal + nonlocal_loss


def lr_schedule(iteration: int, total: int, levels: Sequence[float] = (1e-3, 1e-4, 1e-5)) -> float:
    """levels[0] before ceil(0.6 total), levels[1] before ceil(0.8 total), then levels[2]."""
    if total < 1 or not 0 <= iteration < total:
        raise InvalidArgument(f"need 0 <= iteration < total, got {iteration}, {total}")
    if iteration < -(-3 * total // 5):
        return levels[0]
    if iteration < -(-4 * total // 5):
        return levels[1]
    return levels[2]


# ---------------------------------------------------------------------------
# rollouts


def make_policy(problem: ControlProblem, actor: ResNetApproximator):
    bounded = actor.has_bound

    def own(t, x):
        return forward_bounded(actor, t, x) if bounded else actor(t, x)

    if problem.compose_control is None:
        return own
    return lambda t, x: problem.compose_control(t, x, own(t, x))


def _start(problem: ControlProblem, M: int) -> torch.Tensor:
    return torch.as_tensor(problem.x0, dtype=DTYPE).reshape(1, -1).expand(M, -1).clone()


def _intensities(problem: ControlProblem) -> tuple[float, ...]:
    return tuple(s.intensity for s in problem.dynamics.measure.sources)


def rollout(
    problem: ControlProblem,
    policy,
    grid: TimeGrid,
    noise: NoisePanel,
    jumps: JumpPanel,
    clamp=None,
    critic: Optional[Fn] = None,
    non: Optional[Fn] = None,
    path: str = "poisson",
):
    """Differentiable rollout; returns (states [L+1] list, running sum, martingale correction sum)."""
    dyn = problem.dynamics
    M = noise.shape[0]
    x = _start(problem, M)
    dw_all = torch.as_tensor(noise.dw, dtype=DTYPE)
    run = torch.zeros(M, dtype=DTYPE)
    corr = torch.zeros(M, dtype=DTYPE)
    lam = _intensities(problem)
    states = [x]
    # keep the critic-gradient graph only when the caller will differentiate
    create = torch.is_grad_enabled()
    for n in range(grid.steps):
        t = grid.time(n)
        u = policy(t, x)
        interval = jumps.interval(n)
        run = run + problem.f(t, x, u) * grid.dt
        if critic is not None:
            step = StepData(t, grid.dt, x, u, dw_all[:, n], interval, None, lam)
            v_x, grad = _value_and_grad(critic, t, x, create)
            c = (grad * diffusion_term(dyn, x, u, step.dw)).sum(dim=1)
            if path == "poisson":
                if interval:
                    c = c + (_jump_differences(problem, critic, step, v_x, x) * step.delta_m()).sum(dim=0)
            else:
                c = c + _mark_sum(problem, critic, step, v_x, x) - grid.dt * _value(non, t, x)
            corr = corr + c
        x = euler_step(dyn, t, x, u, dw_all[:, n], interval, grid.dt, step=n)
        if clamp is not None:
            x = clamp_state(x, *clamp)
        states.append(x)
    return states, run, corr


def actor_objective(
    problem: ControlProblem,
    policy,
    grid: TimeGrid,
    noise: NoisePanel,
    jumps: JumpPanel,
    variant: str = "J",
    critic: Optional[Fn] = None,
    non: Optional[Fn] = None,
    clamp=None,
    path: str = "poisson",
    per_path: bool = False,
):
    """Batch mean of dt*sum f + g(X_T); J~ also subtracts the two martingale corrections."""
    if variant not in ("J", "Jtilde"):
        raise InvalidArgument(f"unknown actor objective {variant!r}")
    if variant == "Jtilde" and critic is None:
        raise InvalidArgument("J~ needs the critic")
    states, run, corr = rollout(
        problem, policy, grid, noise, jumps, clamp, critic if variant == "Jtilde" else None, non, path
    )
    total = run + problem.terminal(states[-1])
    if variant == "Jtilde":
        total = total - corr
    return total if per_path else total.mean()


# ---------------------------------------------------------------------------
# evaluation


def evaluate(problem, critic, policy, oracle: Oracle, grid: TimeGrid, noise, jumps, clamp=None):
    """Simulate under the learned policy and return metric inputs on nodes n = 0..L-1."""
    from .metrics import error_control, error_value, per_time_l2_errors

    with torch.no_grad():
        states, _, _ = rollout(problem, policy, grid, noise, jumps, clamp)
        X = torch.stack(states[:-1])  # [L, M, d]
        L, M, d = X.shape
        t = torch.as_tensor(np.repeat(grid.nodes[:-1], M), dtype=DTYPE)
        flat = X.reshape(L * M, d)
        v_hat = _value(critic, t, flat).reshape(L, M).numpy()
        u_hat = _own_control(problem, policy, t, flat).reshape(L, M, -1).numpy()
    xs = flat.numpy()
    tn = t.numpy()
    v = np.asarray(oracle.value(tn, xs), dtype=float).reshape(L, M)
    u = np.asarray(oracle.control(tn, xs), dtype=float).reshape(L, M, -1)
    ev = error_value(v_hat, v, grid.dt)
    ec = error_control(u_hat, u, grid.dt)
    series = {
        "t": grid.nodes[:-1],
        "e_v": per_time_l2_errors(v_hat, v),
        "e_u": per_time_l2_errors(u_hat, u),
    }
    return ev, ec, series


def _own_control(problem, policy, t, x):
    own = getattr(policy, "own", None)
    return own(t, x) if own is not None else policy(t, x)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainedNets:
    critic: ResNetApproximator
    actor: ResNetApproximator
    non: Optional[ResNetApproximator] = None


def init_nets(problem: ControlProblem, config: TrainConfig, path: str) -> TrainedNets:
    d = problem.state_dim
    w = config.width or d + 10
    base = derive_seed(config.seed, INIT)
    bound = config.explosion.b0 if config.explosion.kind == "bounded" else None
    critic = init_network(d, w, config.blocks, 1, seed_to_int(base + [0]))
    actor = init_network(d, w, config.blocks, problem.actor_dim, seed_to_int(base + [1]), bound=bound)
    non = init_network(d, w, config.blocks, 1, seed_to_int(base + [2])) if path == "general" else None
    return TrainedNets(critic, actor, non)


def resolve_path(problem: ControlProblem, config: TrainConfig) -> str:
    if config.jump_path == "auto":
        return "poisson" if problem.poisson_ready else "general"
    if config.jump_path == "poisson" and not problem.poisson_ready:
        raise InvalidArgument("poisson fast path needs fixed-mark compound Poisson sources")
    return config.jump_path


class _Policy:
    def __init__(self, problem, actor):
        self.own = make_policy(replace(problem, compose_control=None), actor)
        self.full = make_policy(problem, actor)

    def __call__(self, t, x):
        return self.full(t, x)


def _panels(problem, grid, M, seed):
    dyn = problem.dynamics
    return sample_noise_panel(grid, M, dyn.noise_dim, seed), sample_jump_panel(dyn.measure, grid, M, seed)


def train(
    problem: ControlProblem,
    config: TrainConfig,
    oracle: Optional[Oracle] = None,
    nets: Optional[TrainedNets] = None,
    log: Optional[Callable[[dict], None]] = None,
    context: Optional[dict] = None,
) -> tuple[TrainReport, TrainedNets]:
    path = resolve_path(problem, config)
    grid = config.grid
    M, L, T = config.batch, grid.steps, grid.horizon
    nets = nets or init_nets(problem, config, path)
    critic, actor, non = nets.critic, nets.actor, nets.non
    if path == "general" and non is None:
        raise InvalidArgument("general jump path needs the non-local network")
    policy = _Policy(problem, actor)
    critic_params = list(critic.parameters()) + (list(non.parameters()) if non is not None else [])
    critic_opt = Adam(critic_params)
    actor_opt = Adam(list(actor.parameters()))
    report = TrainReport()
    buffer = TerminalBuffer()
    lam = _intensities(problem)
    ctx = dict(context or {})
    if config.iterations == 0:
        return report, nets

    eval_seed = derive_seed(config.seed, EVAL)
    eval_panels = _panels(problem, grid, config.eval_batch or M, eval_seed) if oracle is not None else None

    with torch.no_grad():
        noise, jumps = _panels(problem, grid, M, derive_seed(config.seed, BUFFER))
        states, _, _ = rollout(problem, policy, grid, noise, jumps, config.explosion.clamp_at(0))
        buffer.refresh(states[-1], -1)

    start = time.perf_counter()
    for it in range(config.iterations):
        lr = config.lr_fixed if config.lr_fixed is not None else lr_schedule(it, config.iterations, config.lr_levels)
        clamp = config.explosion.clamp_at(it)
        try:
            critic_loss = _critic_sweep(problem, critic, non, policy, critic_opt, buffer, grid, M, lr, clamp, path, lam, derive_seed(config.seed, CRITIC, it), it)
            actor_loss = _actor_update(problem, config, critic, non, policy, actor_opt, grid, M, lr, clamp, path, derive_seed(config.seed, ACTOR, it))
        except NumericFault as exc:
            exc.context.update(ctx, iteration=it)
            raise
        ev = ec = math.nan
        if oracle is not None and ((it + 1) % config.eval_every == 0 or it == config.iterations - 1):
            ev, ec, series = evaluate(problem, critic, policy, oracle, grid, *eval_panels, clamp)
            report.per_time = series
        report.append(
            iteration=it,
            critic_loss=critic_loss,
            actor_loss=actor_loss,
            error_value=ev,
            error_control=ec,
            lr=lr,
            seconds=time.perf_counter() - start,
        )
        if log is not None:
            log(report.rows[-1])
    return report, nets


def _critic_sweep(problem, critic, non, policy, opt, buffer, grid, M, lr, clamp, path, lam, seed, it):
    noise, jumps = _panels(problem, grid, M, seed)
    dyn = problem.dynamics
    dw_all = torch.as_tensor(noise.dw, dtype=DTYPE)
    x = _start(problem, M)
    total = 0.0
    for n in range(grid.steps):
        t = grid.time(n)
        interval = jumps.interval(n)
        with torch.no_grad():
            u = policy(t, x)
            x_next = euler_step(dyn, t, x, u, dw_all[:, n], interval, grid.dt, step=n)
            if clamp is not None:
                x_next = clamp_state(x_next, *clamp)
        step = StepData(t, grid.dt, x, u, dw_all[:, n], interval, x_next, lam)
        if n == grid.steps - 1:
            buffer.refresh(x_next, it)
        try:
            loss = critic_loss_td(problem, critic, step, non, path)
            loss = loss + critic_loss_terminal(buffer, problem.terminal, critic, grid.steps, grid.horizon)
            if path == "general":
                loss = loss + critic_loss_nonlocal(problem, critic, non, step)
            opt.step(loss, lr)
        except NumericFault as exc:
            exc.context.update(step=n)
            raise
        total += loss.item()
        x = x_next
    return total / grid.steps


def _actor_update(problem, config, critic, non, policy, opt, grid, M, lr, clamp, path, seed):
    noise, jumps = _panels(problem, grid, M, seed)
    sign = -1.0 if problem.sense == "maximize" else 1.0
    # the same panels for every update; the objective is re-evaluated after each step
    first = None
    for _ in range(config.actor_step):
        obj = actor_objective(problem, policy, grid, noise, jumps, config.actor_loss, critic, non, clamp, path)
        if first is None:
            first = obj.item()
        opt.step(sign * obj, lr)
    return first
