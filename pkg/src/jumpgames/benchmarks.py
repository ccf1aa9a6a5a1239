"""Benchmark problems with known solutions: Merton with jumps, jump LQR, and game markets."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch

from .actor_critic import ControlProblem, ExplosionMode, Oracle, TrainConfig
from .equilibrium import (
    KIND_ALIASES,
    LQRParams,
    MarketParams,
    MertonParams,
    UtilitySpec,
    lqr_control,
    lqr_diffusion_matrix,
    lqr_value,
    merton_controls,
    merton_value,
)
from .errors import InvalidArgument
from .sde import DTYPE, CompoundPoissonSource, ControlledDynamics, LevyMeasure


# ---------------------------------------------------------------------------
# Merton


def merton_problem(params: MertonParams, kind: str) -> ControlProblem:
    kind = KIND_ALIASES.get(kind, kind)
    P = params

    def drift(x, u):
        return (P.r + u * (P.mu - P.r)) * x

    def diffusion(x, u):
        return (P.sigma * u * x)[:, :, None]

    def jump(x, z, u):
        return z * u * x

    if kind == "power":
        terminal = lambda x: x[:, 0] ** P.p / P.p
    elif kind == "log":
        terminal = lambda x: torch.log(x[:, 0])
    else:
        raise InvalidArgument(f"Merton utility must be power or log, got {kind!r}")
    dyn = ControlledDynamics(
        1, 1, drift, diffusion, jump, LevyMeasure([CompoundPoissonSource(P.lam, mark=[P.z])])
    )
    return ControlProblem(dyn, None, terminal, [P.x0], sense="maximize")


def merton_oracle(params: MertonParams, kind: str) -> Oracle:
    u_star = merton_controls(params, kind)
    return Oracle(
        value=lambda t, x: merton_value(t, x[:, 0], params, kind),
        control=lambda t, x: np.full((x.shape[0], 1), u_star),
    )


# ---------------------------------------------------------------------------
# LQR


def lqr_problem(params: LQRParams) -> ControlProblem:
    P = params
    d = P.d
    sig = torch.as_tensor(lqr_diffusion_matrix(d, P.sigma0), dtype=DTYPE)
    z = np.asarray(P.z, dtype=float)
    lam = np.asarray(P.lam, dtype=float)
    sources = [CompoundPoissonSource(float(lam[i]), mark=z[i] * np.eye(d)[i]) for i in range(d)]

    dyn = ControlledDynamics(
        d,
        d,
        drift=lambda x, u: u,
        diffusion=lambda x, u: sig.expand(x.shape[0], d, d),
        jump=lambda x, m, u: m,
        measure=LevyMeasure(sources),
    )
    running = lambda t, x, u: P.q * (u**2).sum(dim=1) + P.b * (x**2).sum(dim=1)
    terminal = lambda x: P.a * (x**2).sum(dim=1)
    return ControlProblem(dyn, running, terminal, np.ones(d), sense="minimize")


def lqr_oracle(params: LQRParams) -> Oracle:
    return Oracle(
        value=lambda t, x: lqr_value(t, x, params),
        control=lambda t, x: lqr_control(t, x, params),
    )


# ---------------------------------------------------------------------------
# game markets


AGENT_ONE = dict(mu=0.05, nu=0.4, sigma=0.35, alpha=0.3, beta=0.25, lam=0.3, theta=0.8, delta=2.0, p=0.5)
AGENT_REST = dict(mu=0.04, nu=0.3, sigma=0.25, alpha=0.2, beta=0.15, lam=0.2, theta=0.7, delta=1.0, p=0.4)
COMMON_INTENSITY = 0.25


def _stack(n: int, key: str) -> np.ndarray:
    return np.array([AGENT_ONE[key]] + [AGENT_REST[key]] * (n - 1), dtype=float)


def symmetric_market(n: int) -> MarketParams:
    """Agent 1 differs from the other n-1 identical agents."""
    if n < 1:
        raise InvalidArgument("need at least one agent")
    return MarketParams(
        mu=_stack(n, "mu"),
        nu=_stack(n, "nu"),
        sigma=_stack(n, "sigma"),
        alpha=_stack(n, "alpha"),
        beta=_stack(n, "beta"),
        lam=_stack(n, "lam"),
        lam0=COMMON_INTENSITY,
    )


def symmetric_utility(n: int, kind: str) -> UtilitySpec:
    kind = KIND_ALIASES.get(kind, kind)
    theta = _stack(n, "theta")
    if kind == "exponential":
        return UtilitySpec(kind, theta, delta=_stack(n, "delta"))
    if kind == "power":
        return UtilitySpec(kind, theta, p=_stack(n, "p"))
    if kind == "log":
        return UtilitySpec(kind, theta)
    raise InvalidArgument(f"unknown utility {kind!r}")


def heterogeneous_market(n: int = 10) -> tuple[MarketParams, UtilitySpec]:
    """All agents differ; coefficients grow linearly in the agent index (exponential utility)."""
    if n < 2:
        raise InvalidArgument("heterogeneous market needs at least two agents")
    frac = np.arange(n) / (n - 1)
    market = MarketParams(
        mu=0.04 + 0.01 * frac,
        nu=0.1 + 0.3 * frac,
        sigma=0.2 + 0.2 * frac,
        alpha=0.2 + 0.1 * frac,
        beta=0.2 + 0.1 * frac,
        lam=0.2 + 0.1 * frac,
        lam0=COMMON_INTENSITY,
    )
    util = UtilitySpec("exponential", 0.7 + 0.1 * frac, delta=1.0 + frac)
    return market, util


# ---------------------------------------------------------------------------
# presets


def merton_config(preset: str = "ci", **overrides) -> TrainConfig:
    base = dict(iterations=1000, batch=500, steps=50, actor_step=10, explosion=ExplosionMode("bounded", b0=1.0))
    if preset == "ci":
        # the plain J gradient is too noisy to settle the control within 300 iterations
        base.update(iterations=300, actor_loss="Jtilde")
    elif preset != "paper":
        raise InvalidArgument(f"unknown preset {preset!r}")
    base.update(overrides)
    return TrainConfig(**base)


def lqr_config(preset: str = "ci", explosion: str = "clamp", **overrides) -> TrainConfig:
    mode = ExplosionMode("bounded", b0=1.0) if explosion == "bounded" else ExplosionMode("clamp", lo=-5.0, hi=5.0, warmup=100)
    base = dict(iterations=1000, batch=500, steps=50, actor_step=10, explosion=mode)
    if preset == "ci":
        base.update(iterations=400)
    elif preset != "paper":
        raise InvalidArgument(f"unknown preset {preset!r}")
    base.update(overrides)
    return TrainConfig(**base)


def with_seed(config: TrainConfig, seed) -> TrainConfig:
    return replace(config, seed=seed)
