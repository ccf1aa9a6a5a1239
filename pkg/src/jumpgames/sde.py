"""Euler simulation of controlled jump-diffusions with compensated compound-Poisson jumps.

All state arithmetic is done in float64 torch tensors so that the same code
path serves plain simulation and differentiable rollouts for the actor.
Random panels are generated in numpy from splittable seed sequences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import InvalidArgument, NumericFault, UnsupportedMeasure

DTYPE = torch.float64

# Paths are drawn in fixed-size blocks; each (stream, block) pair owns an
# independent substream, so path j's draws never depend on M or on scheduling.
PATH_BLOCK = 256

BROWNIAN_STREAM = 0
JUMP_STREAM_OFFSET = 1

Seed = int | Sequence[int]


def _entropy(seed: Seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def substream(seed: Seed, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(_entropy(seed), spawn_key=(stream, block))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: Seed, *key: int) -> list[int]:
    """Extend a seed with an integer key path (iteration, agent, purpose...)."""
    return _entropy(seed) + [int(k) for k in key]


def seed_to_int(seed: Seed) -> int:
    return int(np.random.SeedSequence(_entropy(seed)).generate_state(1, np.uint64)[0] >> 1)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise InvalidArgument(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgument(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def time(self, n: int) -> float:
        return n * self.dt


@dataclass(frozen=True)
class CompoundPoissonSource:
    """One Poisson clock with either a fixed mark or a mark sampler.

    ``sampler(rng, count)`` must return ``count`` marks as a ``[count, k]``
    array. A sampled source needs ``compensator(x, u)`` returning the
    per-unit-intensity mean jump E[G(x, Z, u)] for its marks; without it the
    drift correction cannot be formed and simulation refuses to run.
    """

    intensity: float
    mark: Optional[np.ndarray] = None
    sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
    compensator: Optional[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = None

    def __post_init__(self):
        if not self.intensity >= 0:
            raise InvalidArgument(f"intensity must be >= 0, got {self.intensity}")
        if (self.mark is None) == (self.sampler is None):
            raise InvalidArgument("give exactly one of mark or sampler")
        if self.mark is not None:
            object.__setattr__(self, "mark", np.atleast_1d(np.asarray(self.mark, dtype=float)))

    @property
    def fixed(self) -> bool:
        return self.mark is not None


@dataclass(frozen=True)
class LevyMeasure:
    """Finite list of compound-Poisson sources, or an external hook.

    The external hook takes ``sampler(grid, M, seed) -> JumpPanel`` and
    ``compensator(x, u) -> Tensor[M, d]`` giving the full integral of G
    against the measure.
    """

    sources: tuple[CompoundPoissonSource, ...] = ()
    external_sampler: Optional[Callable] = None
    external_compensator: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))

    @property
    def native(self) -> bool:
        return self.external_sampler is None and self.external_compensator is None

    @property
    def total_intensity(self) -> float:
        return float(sum(s.intensity for s in self.sources))

    @property
    def all_fixed(self) -> bool:
        return self.native and all(s.fixed for s in self.sources)


@dataclass(frozen=True)
class ControlledDynamics:
    """Coefficients of dX = b dt + sigma dW + int G dN~.

    ``drift(x, u) -> [M, d]``, ``diffusion(x, u) -> [M, d, noise_dim]`` and
    ``jump(x, z, u) -> [M, d]`` act on batched tensors; ``z`` is a ``[M, k]``
    tensor of marks aligned with the rows of ``x``.

    Optional fast paths, which must agree with the generic ones:
    ``noise_term(x, u, dw) -> [M, d]`` replaces ``sigma @ dw`` and
    ``fixed_jump_mix(x, u, w) -> [M, d]`` returns ``sum_k w[k] * G(x, z_k, u)``
    over fixed-mark sources for a ``[K, M]`` weight tensor.
    """

    state_dim: int
    control_dim: int
    drift: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
    diffusion: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
    jump: Optional[Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]] = None
    measure: LevyMeasure = field(default_factory=LevyMeasure)
    noise_dim: Optional[int] = None
    noise_term: Optional[Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]] = None
    fixed_jump_mix: Optional[Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]] = None

    def __post_init__(self):
        if self.noise_dim is None:
            object.__setattr__(self, "noise_dim", self.state_dim)
        if self.measure.sources and self.jump is None:
            raise InvalidArgument("jump coefficient required when the measure has sources")


@dataclass(frozen=True)
class NoisePanel:
    dw: np.ndarray  # [M, L, noise_dim], entries ~ N(0, dt)
    seed: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dw.shape


@dataclass(frozen=True)
class SourceJumps:
    """Jumps of one source inside one interval, for every path."""

    counts: np.ndarray  # [M]
    path_index: Optional[np.ndarray] = None  # [N] rows owning each sampled mark
    marks: Optional[np.ndarray] = None  # [N, k]


@dataclass(frozen=True)
class JumpPanel:
    counts: np.ndarray  # [K, M, L]
    marks: tuple[Optional[np.ndarray], ...]  # per source; path-major, chronological
    seed: tuple[int, ...] = ()

    @property
    def n_sources(self) -> int:
        return self.counts.shape[0]

    @property
    def n_paths(self) -> int:
        return self.counts.shape[1]

    @property
    def n_steps(self) -> int:
        return self.counts.shape[2]

    def interval(self, n: int) -> list[SourceJumps]:
        out = []
        for k in range(self.n_sources):
            c = self.counts[k, :, n]
            marks = self.marks[k]
            if marks is None:
                out.append(SourceJumps(c))
                continue
            flat = self.counts[k].ravel()
            offsets = np.concatenate([[0], np.cumsum(flat)])
            rows = np.nonzero(c)[0]
            starts = offsets[rows * self.n_steps + n]
            idx = np.repeat(rows, c[rows])
            pos = np.concatenate([np.arange(s, s + m) for s, m in zip(starts, c[rows])]) if rows.size else np.zeros(0, int)
            out.append(SourceJumps(c, idx, marks[pos]))
        return out

    def compensated(self, intensities: Sequence[float], dt: float) -> np.ndarray:
        """Delta M = count - lambda dt for every (source, path, interval)."""
        lam = np.asarray(intensities, dtype=float)[:, None, None]
        return self.counts - lam * dt


@dataclass
class PathBatch:
    states: torch.Tensor  # [M, L+1, d]
    grid: TimeGrid
    noise: Optional[NoisePanel] = None
    jumps: Optional[JumpPanel] = None
    controls: Optional[torch.Tensor] = None  # [M, L, d_c]

    def to_csv(self, path) -> None:
        x = self.states.detach().cpu().numpy()
        m, n1, d = x.shape
        t = self.grid.nodes
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "step", "t"] + [f"x_{i + 1}" for i in range(d)])
            for j in range(m):
                for n in range(n1):
                    w.writerow([j, n, repr(float(t[n]))] + [repr(float(v)) for v in x[j, n]])


def sample_noise_panel(grid: TimeGrid, M: int, d: int, seed: Seed) -> NoisePanel:
    if M < 1 or d < 1:
        raise InvalidArgument(f"need M >= 1 and d >= 1, got M={M}, d={d}")
    L = grid.steps
    sd = np.sqrt(grid.dt)
    blocks = []
    for b in range(-(-M // PATH_BLOCK)):
        rng = substream(seed, BROWNIAN_STREAM, b)
        blocks.append(rng.standard_normal((PATH_BLOCK, L, d)))
    dw = np.concatenate(blocks)[:M] * sd
    return NoisePanel(dw, tuple(_entropy(seed)))


def sample_jump_panel(measure: LevyMeasure, grid: TimeGrid, M: int, seed: Seed) -> JumpPanel:
    if M < 1:
        raise InvalidArgument(f"need M >= 1, got {M}")
    if not measure.native:
        if measure.external_sampler is None or measure.external_compensator is None:
            raise UnsupportedMeasure("external measure needs both a sampler and a compensator")
        return measure.external_sampler(grid, M, seed)
    L = grid.steps
    K = len(measure.sources)
    counts = np.zeros((K, M, L), dtype=np.int64)
    marks: list[Optional[np.ndarray]] = []
    for k, src in enumerate(measure.sources):
        per_block_marks = []
        for b in range(-(-M // PATH_BLOCK)):
            rng = substream(seed, JUMP_STREAM_OFFSET + k, b)
            c = rng.poisson(src.intensity * grid.dt, size=(PATH_BLOCK, L))
            lo, hi = b * PATH_BLOCK, min(M, (b + 1) * PATH_BLOCK)
            c = c[: hi - lo]
            counts[k, lo:hi] = c
            if not src.fixed:
                total = int(c.sum())
                z = np.asarray(src.sampler(rng, total), dtype=float).reshape(total, -1)
                per_block_marks.append(z)
        marks.append(None if src.fixed else np.concatenate(per_block_marks))
    return JumpPanel(counts, tuple(marks), tuple(_entropy(seed)))


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


def _check_finite(x: torch.Tensor, what: str, step: Optional[int] = None) -> None:
    bad = ~torch.isfinite(x)
    if bad.any():
        rows = torch.nonzero(bad.reshape(x.shape[0], -1).any(dim=1)).flatten()
        raise NumericFault(f"non-finite {what}", path=int(rows[0]), step=step)


def source_jump(dyn: ControlledDynamics, k: int, x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """G(x, z_k, u) for a fixed-mark source, evaluated row-wise."""
    src = dyn.measure.sources[k]
    z = _as_tensor(src.mark).expand(x.shape[0], -1)
    return dyn.jump(x, z, u)


def fixed_jumps(dyn: ControlledDynamics, x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """[K, M, d] stack of G(x, z_k, u) over fixed-mark sources."""
    K, M = len(dyn.measure.sources), x.shape[0]
    z = torch.as_tensor(np.stack([s.mark for s in dyn.measure.sources]), dtype=DTYPE)
    g = dyn.jump(x.repeat(K, 1), z.repeat_interleave(M, dim=0), u.repeat(K, 1))
    return g.reshape(K, M, -1)


def compensator_drift(dyn: ControlledDynamics, x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Sum over sources of lambda_k * E[G(x, Z_k, u)]; the integral of G against nu."""
    if not dyn.measure.native:
        if dyn.measure.external_compensator is None:
            raise UnsupportedMeasure("external measure without a compensator callback")
        out = dyn.measure.external_compensator(x, u)
        _check_finite(out, "compensator")
        return out
    out = torch.zeros_like(x)
    for k, src in enumerate(dyn.measure.sources):
        if src.intensity == 0:
            continue
        if src.fixed:
            g = source_jump(dyn, k, x, u)
        elif src.compensator is not None:
            g = src.compensator(x, u)
        else:
            raise UnsupportedMeasure(f"source {k} samples marks but has no compensator")
        out = out + src.intensity * g
    _check_finite(out, "compensator")
    return out


def jump_sum(dyn: ControlledDynamics, x: torch.Tensor, u: torch.Tensor, jumps: Sequence[SourceJumps]) -> torch.Tensor:
    """Sum of G(x, z_i, u) over the marks that fell in the interval."""
    out = torch.zeros_like(x)
    for k, sj in enumerate(jumps):
        if not sj.counts.any():
            continue
        if sj.marks is None:
            c = torch.as_tensor(sj.counts, dtype=DTYPE)[:, None]
            out = out + c * source_jump(dyn, k, x, u)
        else:
            idx = torch.as_tensor(sj.path_index)
            g = dyn.jump(x[idx], _as_tensor(sj.marks), u[idx])
            out = out.index_add(0, idx, g)
    return out


def diffusion_term(dyn: ControlledDynamics, x: torch.Tensor, u: torch.Tensor, dw: torch.Tensor) -> torch.Tensor:
    if dyn.noise_term is not None:
        return dyn.noise_term(x, u, dw)
    sig = dyn.diffusion(x, u)
    return torch.einsum("mij,mj->mi", sig, dw)


def euler_step(
    dyn: ControlledDynamics,
    t: float,
    x: torch.Tensor,
    u: torch.Tensor,
    dw,
    jumps: Sequence[SourceJumps],
    dt: float,
    step: Optional[int] = None,
) -> torch.Tensor:
    """One Euler step: x + b dt + sigma dW + sum G - dt * compensator."""
    if not dt > 0:
        raise InvalidArgument(f"dt must be positive, got {dt}")
    dw = _as_tensor(dw)
    out = x + dyn.drift(x, u) * dt + diffusion_term(dyn, x, u, dw)
    if dyn.measure.all_fixed and dyn.measure.sources:
        # fixed marks: sum_k G_k * (count_k - lambda_k dt) in one batched call
        lam = torch.as_tensor([s.intensity for s in dyn.measure.sources], dtype=DTYPE)
        counts = torch.as_tensor(np.stack([sj.counts for sj in jumps]), dtype=DTYPE)
        w = counts - lam[:, None] * dt
        if dyn.fixed_jump_mix is not None:
            out = out + dyn.fixed_jump_mix(x, u, w)
        else:
            out = out + (fixed_jumps(dyn, x, u) * w[:, :, None]).sum(dim=0)
    elif dyn.measure.sources or not dyn.measure.native:
        out = out + jump_sum(dyn, x, u, jumps) - dt * compensator_drift(dyn, x, u)
    _check_finite(out, "state", step)
    return out


def clamp_state(x: torch.Tensor, a: float, b: float) -> torch.Tensor:
    if not a < b:
        raise InvalidArgument(f"clamp needs a < b, got [{a}, {b}]")
    return torch.clamp(x, a, b)


def simulate_batch(
    dyn: ControlledDynamics,
    policy: Callable[[float, torch.Tensor], torch.Tensor],
    grid: TimeGrid,
    noise: NoisePanel,
    jumps: JumpPanel,
    x0,
    clamp: Optional[tuple[float, float]] = None,
    keep_controls: bool = False,
) -> PathBatch:
    M, L, dn = noise.shape
    if L != grid.steps or dn != dyn.noise_dim:
        raise InvalidArgument(f"noise panel shape {noise.shape} does not match grid/dynamics")
    if jumps.n_paths != M or jumps.n_steps != L:
        raise InvalidArgument("jump panel does not match noise panel")
    x = _as_tensor(x0).reshape(1, -1).expand(M, dyn.state_dim).clone()
    dw_all = torch.as_tensor(noise.dw, dtype=DTYPE)
    states = [x]
    controls = []
    for n in range(L):
        t = grid.time(n)
        u = policy(t, x)
        x = euler_step(dyn, t, x, u, dw_all[:, n], jumps.interval(n), grid.dt, step=n)
        if clamp is not None:
            x = clamp_state(x, *clamp)
        states.append(x)
        if keep_controls:
            controls.append(u)
    return PathBatch(
        torch.stack(states, dim=1),
        grid,
        noise,
        jumps,
        torch.stack(controls, dim=1) if keep_controls else None,
    )
