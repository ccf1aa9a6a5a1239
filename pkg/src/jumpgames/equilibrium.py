"""Constant Nash equilibria of the n-agent jump-diffusion portfolio game and
closed-form single-agent benchmarks (Merton with jumps, jump LQR).

Leave-one-out statistics are always formed as (1/n) * sum_{k != i}, with the
geometric version exp((1/n) * sum_{k != i} log(.)).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np
from scipy.optimize import brentq

from .errors import InvalidArgument, NoConvergence, OutOfDomain

Kind = Literal["exponential", "power", "log"]
KIND_ALIASES = {"exp": "exponential", "exponential": "exponential", "power": "power", "log": "log", "logarithmic": "log"}


def _vec(v, n: int, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        a = np.full(n, float(a))
    if a.shape != (n,):
        raise InvalidArgument(f"{name} must have length {n}, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class MarketParams:
    mu: np.ndarray
    nu: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    lam0: float

    def __post_init__(self):
        n = len(np.atleast_1d(self.mu))
        for name in ("mu", "nu", "sigma", "alpha", "beta", "lam"):
            object.__setattr__(self, name, _vec(getattr(self, name), n, name))
        if n < 1:
            raise InvalidArgument("need at least one agent")
        if np.any(self.mu <= 0):
            raise InvalidArgument("mu_i must be positive")
        if np.any(self.nu < 0) or np.any(self.sigma < 0):
            raise InvalidArgument("nu_i and sigma_i must be nonnegative")
        if np.any(self.nu**2 + self.sigma**2 <= 0):
            raise InvalidArgument("nu_i^2 + sigma_i^2 must be positive")
        if np.any(self.lam < 0) or self.lam0 < 0:
            raise InvalidArgument("intensities must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.mu)

    @property
    def vol2(self) -> np.ndarray:
        return self.nu**2 + self.sigma**2

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class UtilitySpec:
    kind: str
    theta: np.ndarray
    delta: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None

    def __post_init__(self):
        kind = KIND_ALIASES.get(self.kind)
        if kind is None:
            raise InvalidArgument(f"unknown utility kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        n = len(theta)
        object.__setattr__(self, "theta", theta)
        if np.any(theta <= 0) or np.any(theta >= 1):
            raise InvalidArgument("theta_i must lie in (0, 1)")
        if kind == "exponential":
            if self.delta is None:
                raise InvalidArgument("exponential utility needs delta")
            d = _vec(self.delta, n, "delta")
            if np.any(d <= 0):
                raise InvalidArgument("delta_i must be positive")
            object.__setattr__(self, "delta", d)
        if kind == "power":
            if self.p is None:
                raise InvalidArgument("power utility needs p")
            p = _vec(self.p, n, "p")
            if np.any(p <= 0) or np.any(p >= 1):
                raise InvalidArgument("p_i must lie in (0, 1)")
            object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return len(self.theta)

    @property
    def proportional(self) -> bool:
        return self.kind != "exponential"

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "theta": self.theta.tolist()}
        if self.delta is not None:
            out["delta"] = self.delta.tolist()
        if self.p is not None:
            out["p"] = self.p.tolist()
        return out


def _check_sizes(market: MarketParams, utility: UtilitySpec) -> None:
    if market.n != utility.n:
        raise InvalidArgument(f"market has {market.n} agents, utility has {utility.n}")


def loo_mean(v: np.ndarray) -> np.ndarray:
    """(1/n) * sum_{k != i} v_k for every i."""
    n = len(v)
    return (v.sum() - v) / n


def loo_geometric(w: np.ndarray) -> np.ndarray:
    """(prod_{k != i} w_k)^(1/n) for every i; w must be positive."""
    lw = np.log(w)
    return np.exp((lw.sum() - lw) / len(w))


def _domain_check(pi: np.ndarray, market: MarketParams) -> None:
    for name, coef in (("alpha", market.alpha), ("beta", market.beta)):
        bad = np.nonzero(1.0 + pi * coef <= 0)[0]
        if bad.size:
            i = int(bad[0])
            raise OutOfDomain(f"1 + pi_{i} {name}_{i} = {1 + pi[i] * coef[i]:.3g} <= 0", index=i)


def residual_exponential(pi, market: MarketParams, utility: UtilitySpec) -> np.ndarray:
    _check_sizes(market, utility)
    pi = _vec(pi, market.n, "pi")
    m, u = market, utility
    n = m.n
    a = (1.0 - u.theta / n) / u.delta
    ps = loo_mean(pi * m.sigma)
    pb = loo_mean(pi * m.beta)
    return (
        m.mu
        + u.theta * m.sigma * ps / u.delta
        - a * m.vol2 * pi
        - m.lam0 * m.beta
        - m.lam * m.alpha
        + m.lam0 * m.beta * np.exp(-(a * pi * m.beta - u.theta * pb / u.delta))
        + m.lam * m.alpha * np.exp(-a * pi * m.alpha)
    )


def residual_power(pi, market: MarketParams, utility: UtilitySpec) -> np.ndarray:
    _check_sizes(market, utility)
    pi = _vec(pi, market.n, "pi")
    _domain_check(pi, market)
    m, u = market, utility
    n = m.n
    e = u.p * (1.0 - u.theta / n) - 1.0
    ps = loo_mean(pi * m.sigma)
    gt = loo_geometric(1.0 + pi * m.beta)
    return (
        m.mu
        + m.vol2 * e * pi
        - u.p * u.theta * m.sigma * ps
        - m.lam * m.alpha
        - m.lam0 * m.beta
        + m.lam * m.alpha * (1.0 + pi * m.alpha) ** e
        + m.lam0 * m.beta * (1.0 + pi * m.beta) ** e / gt ** (u.p * u.theta)
    )


def residual_log(pi_i: float, i: int, market: MarketParams) -> float:
    a, b = market.alpha[i], market.beta[i]
    if 1.0 + pi_i * a <= 0 or 1.0 + pi_i * b <= 0:
        raise OutOfDomain(f"pi_{i}={pi_i} leaves the log domain", index=i)
    return float(
        market.mu[i]
        - market.vol2[i] * pi_i
        + market.lam[i] * a * (1.0 / (1.0 + pi_i * a) - 1.0)
        + market.lam0 * b * (1.0 / (1.0 + pi_i * b) - 1.0)
    )


def residual_log_vector(pi, market: MarketParams) -> np.ndarray:
    pi = _vec(pi, market.n, "pi")
    _domain_check(pi, market)
    m = market
    return (
        m.mu
        - m.vol2 * pi
        + m.lam * m.alpha * (1.0 / (1.0 + pi * m.alpha) - 1.0)
        + m.lam0 * m.beta * (1.0 / (1.0 + pi * m.beta) - 1.0)
    )


def residual(pi, market: MarketParams, utility: UtilitySpec) -> np.ndarray:
    if utility.kind == "exponential":
        return residual_exponential(pi, market, utility)
    if utility.kind == "power":
        return residual_power(pi, market, utility)
    _check_sizes(market, utility)
    return residual_log_vector(pi, market)


# ---------------------------------------------------------------------------
# solvers


@dataclass
class EquilibriumSolution:
    pi: np.ndarray
    residual_norm: float
    iterations: int
    method: str
    converged: bool = True
    gaps: list[float] = field(default_factory=list)
    conditions: Optional["ConditionReport"] = None

    def to_dict(self) -> dict:
        out = {
            "pi": self.pi.tolist(),
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "method": self.method,
            "converged": self.converged,
        }
        if self.conditions is not None:
            out["conditions"] = self.conditions.to_dict()
        return out

    def to_json(self, path=None, **extra) -> str:
        doc = {**self.to_dict(), **extra}
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _domain_bounds(market: MarketParams, i: int) -> tuple[float, float]:
    lo, hi = -math.inf, math.inf
    for c in (market.alpha[i], market.beta[i]):
        if c > 0:
            lo = max(lo, -1.0 / c)
        elif c < 0:
            hi = min(hi, -1.0 / c)
    return lo, hi


def _project(new: np.ndarray, prev: np.ndarray, market: MarketParams) -> np.ndarray:
    """Pull coordinates that left {1+pi*alpha>0, 1+pi*beta>0} halfway back to the boundary."""
    out = new.copy()
    for i in range(len(new)):
        lo, hi = _domain_bounds(market, i)
        if out[i] <= lo:
            out[i] = 0.5 * (prev[i] + lo)
        elif out[i] >= hi:
            out[i] = 0.5 * (prev[i] + hi)
    return out


def _fixed_point(market, utility, tol, max_iter, pi0):
    proportional = utility.proportional
    pi = pi0.copy()
    r = residual(pi, market, utility)
    gaps: list[float] = []
    bad_streak = 0
    for k in range(1, max_iter + 1):
        if np.max(np.abs(r)) <= tol:
            return pi, r, k - 1, gaps, True
        new = pi + r
        if proportional:
            new = _project(new, pi, market)
        gaps.append(float(np.max(np.abs(new - pi))))
        if len(gaps) >= 2 and gaps[-2] > 0 and gaps[-1] / gaps[-2] > 1.0:
            bad_streak += 1
        else:
            bad_streak = 0
        pi = new
        r = residual(pi, market, utility)
        if not np.all(np.isfinite(r)):
            return pi, r, k, gaps, False
        if bad_streak >= 10:
            return pi, r, k, gaps, False
    return pi, r, max_iter, gaps, bool(np.max(np.abs(r)) <= tol)


def _jacobian_fd(pi, market, utility, h=1e-7):
    n = len(pi)
    jac = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        step = h * max(1.0, abs(pi[j]))
        e[j] = step
        jac[:, j] = (residual(pi + e, market, utility) - residual(pi - e, market, utility)) / (2 * step)
    return jac


def _newton(market, utility, tol, max_iter, pi0):
    pi = pi0.copy()
    r = residual(pi, market, utility)
    for k in range(1, max_iter + 1):
        nr = float(np.max(np.abs(r)))
        if nr <= tol:
            return pi, r, k - 1, True
        step = np.linalg.solve(_jacobian_fd(pi, market, utility), -r)
        t = 1.0
        while t > 1e-12:
            cand = pi + t * step
            try:
                rc = residual(cand, market, utility)
            except OutOfDomain:
                rc = None
            if rc is not None and np.all(np.isfinite(rc)) and np.max(np.abs(rc)) < nr:
                break
            t *= 0.5
        else:
            return pi, r, k, False
        pi, r = cand, rc
    return pi, r, max_iter, bool(np.max(np.abs(r)) <= tol)


def _log_bracket(market: MarketParams, i: int, eps: float) -> tuple[float, float]:
    """Bracket the unique root on Omega following the sign of f at its ends.

    f is strictly decreasing on Omega, tends to +inf at the left end and -inf
    at the right end, whether those ends are poles or +-infinity.
    """
    lo, hi = _domain_bounds(market, i)
    f = lambda x: residual_log(x, i, market)
    anchor = 0.0 if lo < 0 < hi else (lo + hi) / 2
    if math.isfinite(lo):
        a = lo + eps * max(1.0, abs(lo))
    else:
        a, w = anchor - 1.0, 1.0
        while f(a) <= 0:
            w *= 2
            a = anchor - w
    if math.isfinite(hi):
        b = hi - eps * max(1.0, abs(hi))
    else:
        b, w = anchor + 1.0, 1.0
        while f(b) >= 0:
            w *= 2
            b = anchor + w
    return a, b


def _bisect_log(market: MarketParams, tol: float) -> tuple[np.ndarray, int]:
    out = np.empty(market.n)
    iters = 0
    for i in range(market.n):
        a, b = _log_bracket(market, i, 1e-12)
        f = lambda x: residual_log(x, i, market)
        fa, fb = f(a), f(b)
        if fa < 0 or fb > 0:
            raise NoConvergence(f"no sign change for agent {i} on [{a}, {b}]")
        for _ in range(400):
            mid = 0.5 * (a + b)
            fm = f(mid)
            iters += 1
            if abs(fm) <= tol or mid in (a, b):
                break
            if fm > 0:
                a = mid
            else:
                b = mid
        out[i] = mid
    return out, iters


def solve_equilibrium(
    market: MarketParams,
    utility: UtilitySpec,
    method: str = "fixed-point",
    C: Optional[float] = None,
    tol: float = 1e-12,
    max_iter: int = 100_000,
    pi0=None,
) -> EquilibriumSolution:
    _check_sizes(market, utility)
    pi0 = np.zeros(market.n) if pi0 is None else _vec(pi0, market.n, "pi0")
    gaps: list[float] = []
    if method == "per-agent-bisection":
        if utility.kind != "log":
            raise InvalidArgument("bisection is only available for the decoupled log system")
        pi, iters = _bisect_log(market, tol)
        tag = method
        ok = True
    elif method == "fixed-point":
        pi, r, iters, gaps, ok = _fixed_point(market, utility, tol, max_iter, pi0)
        tag = method
        if not ok and iters < max_iter:
            pi, r, more, ok = _newton(market, utility, tol, max_iter, pi0)
            iters += more
            tag = "fixed-point->damped-newton"
    elif method == "damped-newton":
        pi, r, iters, ok = _newton(market, utility, tol, max_iter, pi0)
        tag = method
    else:
        raise InvalidArgument(f"unknown method {method!r}")
    r = residual(pi, market, utility)
    norm = float(np.max(np.abs(r)))
    if not ok or norm > tol:
        raise NoConvergence(f"{tag} stopped with residual {norm:.3e}", residual=norm, iterations=iters)
    report = check_uniqueness_conditions(market, utility, C) if C is not None else None
    return EquilibriumSolution(pi, norm, iters, tag, True, gaps, report)


# ---------------------------------------------------------------------------
# sufficient conditions


@dataclass
class ConditionReport:
    kind: str
    C: float
    conditions: dict[str, dict]
    derived: dict[str, float]
    K: Optional[float] = None
    contraction_factor: Optional[float] = None

    @property
    def all_satisfied(self) -> bool:
        return all(c["satisfied"] for c in self.conditions.values())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "C": self.C,
            "all_satisfied": self.all_satisfied,
            "conditions": self.conditions,
            "derived": self.derived,
            "K": self.K,
            "contraction_factor": self.contraction_factor,
        }


def _cond(lhs: float, rhs: float, op: str) -> dict:
    ok = lhs < rhs if op == "<" else lhs > rhs if op == ">" else lhs <= rhs
    return {"lhs": float(lhs), "op": op, "rhs": float(rhs), "satisfied": bool(ok)}


def check_uniqueness_conditions(market: MarketParams, utility: UtilitySpec, C: float) -> ConditionReport:
    _check_sizes(market, utility)
    if not C > 0:
        raise InvalidArgument("C must be positive")
    m, u = market, utility
    d = {
        "lam_bar": float(m.lam.max()),
        "alpha0": float(np.abs(m.alpha).max()),
        "beta0": float(np.abs(m.beta).max()),
        "nu_bar": float(m.nu.max()),
        "nu_low": float(m.nu.min()),
        "sigma_bar": float(m.sigma.max()),
        "sigma_low": float(m.sigma.min()),
        "theta_bar": float(u.theta.max()),
    }
    a0, b0, lam0 = d["alpha0"], d["beta0"], m.lam0
    base = d["nu_low"] ** 2 - d["sigma_bar"] * (d["sigma_bar"] - d["sigma_low"])
    conds: dict[str, dict] = {}
    K = factor = None
    if u.kind == "exponential":
        dl, dh = float(u.delta.min()), float(u.delta.max())
        d.update(delta_low=dl, delta_bar=dh)
        jb = lam0 * b0**2 * math.exp(2 * C * b0 / dl)
        lhs1 = d["nu_bar"] ** 2 + d["sigma_bar"] ** 2 + jb + d["lam_bar"] * a0**2 * math.exp(C * a0 / dl)
        conds["cond1"] = _cond(lhs1, dl, "<")
        K = base - jb
        conds["cond2"] = _cond(K, 0.0, ">")
        factor = 1.0 - K / (2 * dh)
    elif u.kind == "power":
        pl, ph = float(u.p.min()), float(u.p.max())
        d.update(p_low=pl, p_bar=ph)
        conds["C<=1"] = _cond(C, 1.0, "<=")
        conds["alpha0<1"] = _cond(a0, 1.0, "<")
        conds["beta0<1"] = _cond(b0, 1.0, "<")
        if C * a0 < 1 and C * b0 < 1:
            lhs1 = (1 - 0.5 * pl) * (
                d["nu_bar"] ** 2
                + d["sigma_bar"] ** 2
                + d["lam_bar"] * a0**2 / (1 - C * a0) ** (2 - 0.5 * pl)
                + lam0 * b0**2 / (1 - C * b0) ** 2
            )
            K = base - lam0 * b0**2 / (1 - C * b0) ** 2 * (1 + C * b0) / (1 - C * b0)
        else:
            lhs1, K = math.inf, -math.inf
        conds["cond1"] = _cond(lhs1, 1.0, "<")
        conds["cond2"] = _cond(ph * (1 + d["theta_bar"]), 1.0, "<")
        conds["cond3"] = _cond(K, 0.0, ">")
        factor = 1.0 - (1.0 - ph) * K
    return ConditionReport(u.kind, float(C), conds, d, K, factor)


# ---------------------------------------------------------------------------
# game value functions


def _game_k(i: int, market: MarketParams, utility: UtilitySpec, pi: np.ndarray) -> float:
    m, u = market, utility
    n = m.n
    th = u.theta[i]
    others = np.arange(n) != i
    pk, ak, lk = pi[others], m.alpha[others], m.lam[others]
    p_mu = np.sum(pk * m.mu[others]) / n
    p_sig = np.sum(pk * m.sigma[others]) / n
    p_beta = np.sum(pk * m.beta[others]) / n
    p2nu2 = np.sum(pk**2 * m.nu[others] ** 2) / n
    p2sig2 = np.sum(pk**2 * m.sigma[others] ** 2) / n
    x_pi, mu, vol2, sg = pi[i], m.mu[i], m.vol2[i], m.sigma[i]
    al, be, li = m.alpha[i], m.beta[i], m.lam[i]
    yvar = p_sig**2 + p2nu2 / n
    if u.kind == "exponential":
        a = (1 - th / n) / u.delta[i]
        c = th / u.delta[i]
        return float(
            -a * x_pi * mu
            + c * p_mu
            + 0.5 * vol2 * x_pi**2 * a**2
            + 0.5 * yvar * c**2
            - x_pi * sg * p_sig * a * c
            + li * (math.exp(-a * x_pi * al) - 1 + a * x_pi * al)
            + np.sum(lk * (np.exp(c * pk * ak / n) - 1 - c * pk * ak / n))
            + m.lam0 * (math.exp(-a * x_pi * be + c * p_beta) - 1 + a * x_pi * be - c * p_beta)
        )
    if 1 + x_pi * al <= 0 or 1 + x_pi * be <= 0:
        raise OutOfDomain(f"pi_{i} outside the proportional domain", index=i)
    _domain_check(pi, m)
    gt = float(np.exp(np.sum(np.log1p(pk * m.beta[others])) / n))
    roots = (1 + pk * ak) ** (1.0 / n)
    eta = (
        p_mu
        - 0.5 * (p2nu2 + p2sig2)
        + 0.5 * (p2nu2 / n + p_sig**2)
        + np.sum(lk * (roots - 1 - pk * ak / n))
        + m.lam0 * (gt - 1 - p_beta)
    )
    if u.kind == "power":
        A = u.p[i] * (1 - th / n)
        B = u.p[i] * th
        return float(
            A * x_pi * mu
            - B * eta
            + 0.5 * vol2 * x_pi**2 * A * (A - 1)
            + 0.5 * yvar * B * (B + 1)
            - x_pi * sg * p_sig * A * B
            + li * ((1 + x_pi * al) ** A - 1 - A * x_pi * al)
            + np.sum(lk * ((1 + pk * ak) ** (-B / n) - 1 + (roots - 1) * B))
            + m.lam0 * ((1 + x_pi * be) ** A / gt**B - 1 - A * x_pi * be + (gt - 1) * B)
        )
    w = 1 - th / n
    return float(
        w * x_pi * mu
        - 0.5 * vol2 * x_pi**2 * w
        - th * eta
        + 0.5 * (p2nu2 / n + p_sig**2) * th
        + li * (math.log1p(x_pi * al) - x_pi * al) * w
        + np.sum(lk * (-(th / n) * np.log1p(pk * ak) + th * (roots - 1)))
        + m.lam0 * (w * math.log1p(x_pi * be) - th * math.log(gt) - x_pi * be * w + th * (gt - 1))
    )


def game_k(i: int, market: MarketParams, utility: UtilitySpec, pi) -> float:
    _check_sizes(market, utility)
    return _game_k(i, market, utility, _vec(pi, market.n, "pi"))


def game_terminal_utility(x: np.ndarray, i: int, utility: UtilitySpec) -> np.ndarray:
    """U_i on wealth rows x of shape [..., n]."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    th = utility.theta[i]
    if utility.kind == "exponential":
        return -np.exp(-(x[..., i] - th * x.mean(axis=-1)) / utility.delta[i])
    if np.any(x <= 0):
        raise OutOfDomain("proportional utilities need positive wealth")
    rel = np.log(x[..., i]) - th * np.log(x).sum(axis=-1) / n
    if utility.kind == "power":
        p = utility.p[i]
        return np.exp(p * rel) / p
    return rel


def game_value(t, x, i: int, market: MarketParams, utility: UtilitySpec, pi, T: float = 1.0):
    """v^i(t, x) along the ansatz; x is [..., n], t broadcasts against x[..., 0]."""
    _check_sizes(market, utility)
    k = _game_k(i, market, utility, _vec(pi, market.n, "pi"))
    tau = T - np.asarray(t, dtype=float)
    terminal = game_terminal_utility(x, i, utility)
    if utility.kind == "log":
        return k * tau + terminal
    return np.exp(k * tau) * terminal


# ---------------------------------------------------------------------------
# Merton with one jump source


@dataclass(frozen=True)
class MertonParams:
    mu: float = 0.05
    r: float = 0.03
    sigma: float = 0.4
    lam: float = 0.3
    z: float = 0.2
    p: float = 0.5
    T: float = 1.0
    x0: float = 10.0


def merton_log_control(mu: float, r: float, sigma: float, lam: float, z: float) -> float:
    if not sigma > 0 or not z > -1:
        raise InvalidArgument("need sigma > 0 and z > -1")
    ex = mu - r
    A = lam * z * z - ex * z + sigma**2
    disc = A * A + 4 * sigma**2 * z * ex
    # the root written as 2c/(-b -/+ sqrt) avoids cancellation when z is small
    s = math.sqrt(disc)
    if A > 0:
        return 2 * ex / (A + s)
    return (-A + s) / (2 * sigma**2 * z)


def merton_power_foc(u: float, mu, r, sigma, lam, z, p) -> float:
    return mu - r - (1 - p) * sigma**2 * u + lam * z * ((1 + z * u) ** (p - 1) - 1)


def merton_power_control(mu: float, r: float, sigma: float, lam: float, z: float, p: float) -> float:
    if not 0 < p < 1:
        raise InvalidArgument("p must lie in (0, 1)")
    f = lambda u: merton_power_foc(u, mu, r, sigma, lam, z, p)
    u_free = (mu - r) / ((1 - p) * sigma**2)
    if lam == 0 or z == 0:
        return u_free
    # 1 + z*u > 0 closes the admissible set on one side, where f has a pole
    edge = -1.0 / z
    span = max(1.0, abs(u_free))
    if z > 0:
        a = edge + 1e-12 * max(1.0, abs(edge))
        b = max(span, edge + span)
        while f(b) >= 0:
            b = 2 * b
    else:
        b = edge - 1e-12 * max(1.0, abs(edge))
        a = min(-span, edge - span)
        while f(a) <= 0:
            a = 2 * a
    if not (f(a) > 0 > f(b)):
        raise NoConvergence(f"no sign change on [{a}, {b}]")
    return brentq(f, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def merton_controls(params: MertonParams, kind: str) -> float:
    kind = KIND_ALIASES.get(kind, kind)
    P = params
    if kind == "log":
        return merton_log_control(P.mu, P.r, P.sigma, P.lam, P.z)
    if kind == "power":
        return merton_power_control(P.mu, P.r, P.sigma, P.lam, P.z, P.p)
    raise InvalidArgument(f"Merton supports power or log utility, got {kind!r}")


def merton_k(params: MertonParams, kind: str) -> float:
    P = params
    u = merton_controls(P, kind)
    kind = KIND_ALIASES.get(kind, kind)
    if kind == "log":
        return P.r + u * (P.mu - P.r) - 0.5 * P.sigma**2 * u**2 + P.lam * (math.log1p(P.z * u) - P.z * u)
    p = P.p
    return (
        p * (P.r + u * (P.mu - P.r))
        - 0.5 * P.sigma**2 * u**2 * p * (1 - p)
        + P.lam * ((1 + P.z * u) ** p - 1 - p * P.z * u)
    )


def merton_value(t, x, params: MertonParams, kind: str):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise OutOfDomain("Merton value needs positive wealth")
    tau = params.T - np.asarray(t, dtype=float)
    k = merton_k(params, kind)
    if KIND_ALIASES.get(kind, kind) == "log":
        return k * tau + np.log(x)
    return np.exp(k * tau) * x**params.p / params.p


# ---------------------------------------------------------------------------
# linear-quadratic regulator with diagonal jumps


@dataclass(frozen=True)
class LQRParams:
    d: int = 5
    sigma0: float = 0.4
    a: float = 1.0
    b: float = 0.1
    q: float = 5.0
    T: float = 1.0
    z: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.d < 1:
            raise InvalidArgument("d must be >= 1")
        if not (self.q > 0 and self.b > 0 and self.a > 0):
            raise InvalidArgument("q, b, a must be positive")
        frac = np.arange(self.d) / max(self.d - 1, 1)
        z = 0.3 - 0.1 * frac if self.z is None else self.z
        lam = 0.2 + 0.1 * frac if self.lam is None else self.lam
        object.__setattr__(self, "z", _vec(z, self.d, "z"))
        object.__setattr__(self, "lam", _vec(lam, self.d, "lam"))


def lqr_diffusion_matrix(d: int, sigma0: float) -> np.ndarray:
    """sigma0 times the lower bidiagonal matrix of ones."""
    return sigma0 * (np.eye(d) + np.eye(d, k=-1))


def lqr_trace_term(params: LQRParams) -> float:
    """tr(sigma sigma^T) + sum_i lam_i z_i^2, taken from the matrices themselves."""
    s = lqr_diffusion_matrix(params.d, params.sigma0)
    return float(np.trace(s @ s.T) + np.sum(params.lam * params.z**2))


def lqr_riccati(t, params: LQRParams):
    """c(t) with v = c(t)|x|^2 + phi(t)."""
    P = params
    g = math.sqrt(P.b * P.q)
    tau = P.T - np.asarray(t, dtype=float)
    return g * (-1 + 2 * (g + P.a) / ((g - P.a) * np.exp(-2 * math.sqrt(P.b / P.q) * tau) + g + P.a))


def lqr_value(t, x, params: LQRParams):
    P = params
    x = np.asarray(x, dtype=float)
    g = math.sqrt(P.b * P.q)
    tau = P.T - np.asarray(t, dtype=float)
    phi = -g * tau + P.q * np.log((g - P.a + (g + P.a) * np.exp(2 * math.sqrt(P.b / P.q) * tau)) / (2 * g))
    return lqr_riccati(t, P) * np.sum(x**2, axis=-1) + phi * lqr_trace_term(P)


def lqr_control(t, x, params: LQRParams):
    x = np.asarray(x, dtype=float)
    c = np.asarray(lqr_riccati(t, params))
    return -(c[..., None] if c.ndim else c) / params.q * x
