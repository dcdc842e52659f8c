"""Optimal per-round error targets for statistical-CSI OMA HARQ.

Chase combining admits a reduced problem whose solution depends only on the
remaining error budget, so one schedule serves every user and every residual
SNR.  Incremental redundancy couples the targets to the current residual;
the last two rounds reduce to a univariate problem over the penultimate
target (with the Taylor-approximated stage cost), and the initial target
comes from an offline sweep that integrates that stage cost over the
round-0 SNR density.

Expected OMA powers computed here double as the scheduler's postpone costs.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from scipy import optimize

from .core import HARQ_CC, HARQ_IR, PacketState, SystemConfig
from .harq import initial_gamma, power_for_target
from .optim import golden_min

_IR_PEN_MAX = 1.0 - math.exp(-1.0)   # Taylor stage cost valid for eps_pen <= 1 - 1/e
_IR_SWEEP_POINTS = 400
_IR_QUAD_POINTS = 200


@dataclass(frozen=True)
class TargetSchedule:
    """Per-round error targets for one packet class."""
    eps: tuple           # (eps^(0), ..., eps^(L))
    mode: str            # cc | ir
    budget: float        # product of entries
    rate: Optional[float] = None

    def __post_init__(self):
        if not self.eps:
            raise ValueError("empty target schedule")
        if any(not (0.0 < e < 1.0) for e in self.eps):
            raise ValueError("targets must lie in (0, 1)")
        prod = float(np.prod(self.eps))
        if abs(prod - self.budget) > 1e-9 * self.budget:
            raise ValueError("schedule product does not match budget")


def _budget_key(budget: float) -> int:
    # 1e-8 relative quantization
    return int(round(math.log(budget) * 1e8))


def _rate_key(rate: float) -> int:
    return int(round(rate * 1e9))


# --- chase combining --------------------------------------------------------

def cc_expected_power_factor(eps) -> float:
    """Dimensionless expected-power factor of a CC target sequence.

    Expected power = gamma * d^alpha * sigma^2 * factor, with
    factor = sum_i (-1/ln(1-eps_i)) * prod_{k<i} (ln(1-eps_k)+eps_k)/ln(1-eps_k).
    """
    eps = np.asarray(eps, dtype=float)
    log1m = np.log1p(-eps)
    carry = (log1m + eps) / log1m        # expected residual fraction after a failure
    total = 0.0
    prefix = 1.0
    for i in range(eps.shape[0]):
        total += prefix * (-1.0 / log1m[i])
        prefix *= carry[i]
    return float(total)


_cc_cache: dict = {}


def cc_optimal_targets(max_retx: int, budget: float) -> TargetSchedule:
    """Minimize the CC expected-power factor subject to prod(eps) = budget.

    Simplex search in log coordinates with the constraint eliminated through
    the last variable, started from the uniform split budget^(1/(L+1)).  The
    optimum depends only on (L, budget), never on gamma or the geometry.
    """
    if not (0.0 < budget < 1.0):
        raise ValueError("budget must lie in (0, 1)")
    if max_retx < 0:
        raise ValueError("max_retx must be nonnegative")
    key = (max_retx, _budget_key(budget))
    hit = _cc_cache.get(key)
    if hit is not None:
        return hit

    n = max_retx + 1
    log_budget = math.log(budget)
    if n == 1:
        sched = TargetSchedule(eps=(budget,), mode="cc", budget=budget)
        _cc_cache[key] = sched
        return sched

    u0 = np.full(n - 1, log_budget / n)  # free coordinates; last = log_budget - sum

    def objective(u_free):
        u_last = log_budget - float(np.sum(u_free))
        if u_last >= 0.0 or np.any(u_free >= 0.0):
            return 1e18                  # outside the open feasible box
        return cc_expected_power_factor(np.exp(np.append(u_free, u_last)))

    res = optimize.minimize(
        objective, u0, method="Nelder-Mead",
        options={"xatol": 1e-11, "fatol": 1e-14, "maxiter": 40000, "maxfev": 40000})
    if not np.isfinite(res.fun) or res.fun >= 1e18:
        raise RuntimeError(f"cc target solve did not converge: {res.message}")
    u = res.x

    u_full = np.append(u, log_budget - np.sum(u))
    eps = np.exp(u_full)
    # wash out the 1e-12 feasibility margins so the product is exact
    eps[-1] = budget / float(np.prod(eps[:-1]))
    sched = TargetSchedule(eps=tuple(float(e) for e in eps), mode="cc", budget=budget)
    _cc_cache[key] = sched
    return sched


# --- incremental redundancy --------------------------------------------------

def ir_psi_last(gamma, eps_pen, eps_last, pathloss, noise):
    """Taylor-approximated expected power of the last two rounds.

    Stage cost for a packet at residual gamma with penultimate target
    eps_pen and final target eps_last.  Linear in pathloss*noise; garbage
    once eps_pen exceeds 1 - 1/e (the linearized SNR density goes negative),
    which callers must avoid.
    """
    gamma = np.asarray(gamma, dtype=float)
    a = np.log1p(-np.asarray(eps_pen, dtype=float))
    b = np.log1p(-np.asarray(eps_last, dtype=float))
    scale = pathloss * noise
    inner = (gamma * (a - 2.0) / 2.0 + a
             + (gamma + 1.0) * (gamma - a) * np.log1p(gamma) / gamma)
    out = scale * (-gamma / a + (a / (gamma * b)) * inner)
    if out.ndim == 0:
        return float(out)
    return out


def _ir_two_round(gamma, budget: float):
    """Minimize the two-round IR cost over the penultimate target.

    Vectorized over gamma.  Returns (eps_pen, psi) with psi normalized to
    pathloss*noise = 1.  The search runs over (budget, 1-1/e]; the boundary
    policy eps_pen -> 1 (skip now, full budget on the last round) is scored
    exactly and wins where the interior loses.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    skip = -gamma / math.log1p(-budget)
    lo = max(budget * (1.0 + 1e-12), 1e-300)
    hi = _IR_PEN_MAX
    if lo >= hi:
        eps = np.full_like(gamma, 1.0 - 1e-12)
        return eps, skip

    # coarse geometric scan to land in the right basin, then golden refine
    scan = np.exp(np.linspace(math.log(lo), math.log(hi), 96))
    vals = ir_psi_last(gamma[:, None], scan[None, :], budget / scan[None, :], 1.0, 1.0)
    idx = np.argmin(vals, axis=1)
    scan_lo = scan[np.maximum(idx - 1, 0)]
    scan_hi = scan[np.minimum(idx + 1, scan.size - 1)]

    def obj(e):
        return ir_psi_last(gamma, e, budget / e, 1.0, 1.0)

    eps, psi = golden_min(obj, scan_lo, scan_hi, iters=100, rel_tol=1e-10)
    eps = np.atleast_1d(eps)
    psi = np.atleast_1d(psi)
    boundary = skip <= psi
    eps = np.where(boundary, 1.0 - 1e-12, eps)
    psi = np.where(boundary, skip, psi)
    return eps, psi


def ir_next_target(gamma: float, budget: float, pathloss: float = 1.0,
                   noise: float = 1.0) -> float:
    """Penultimate-round target for a packet at residual gamma.

    The argmin does not depend on pathloss or noise (they scale the
    objective); they are accepted to mirror the cost interface.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if not (0.0 < budget < 1.0):
        raise ValueError("budget must lie in (0, 1)")
    eps, _ = _ir_two_round(np.asarray([gamma]), budget)
    return float(eps[0])


_ir_initial_cache: dict = {}
_leggauss_cache: dict = {}


def _leggauss(n: int):
    hit = _leggauss_cache.get(n)
    if hit is None:
        hit = np.polynomial.legendre.leggauss(n)
        _leggauss_cache[n] = hit
    return hit


def _ir_three_round(rate: float, budget: float):
    """Offline sweep for the initial IR target (exactly two retransmissions).

    Returns (eps0, psi) normalized to pathloss*noise = 1.  For each swept
    eps0 the remaining expected power integrates the optimized two-round
    cost over the round-0 SNR density on [0, gamma0].
    """
    key = (_rate_key(rate), _budget_key(budget))
    hit = _ir_initial_cache.get(key)
    if hit is not None:
        return hit

    gamma0 = initial_gamma(rate)
    nodes, weights = _leggauss(_IR_QUAD_POINTS)
    x = 0.5 * gamma0 * (nodes + 1.0)
    w = 0.5 * gamma0 * weights
    gamma1 = (gamma0 - x) / (1.0 + x)

    sweep = np.linspace(budget ** (1.0 / 3.0), 0.6, _IR_SWEEP_POINTS)
    best_eps, best_val = None, np.inf
    for e0 in sweep:
        a0 = math.log1p(-e0)
        p0 = -gamma0 / a0
        lam = 1.0 / p0                        # failure draws have density lam*exp(-lam x)
        pdf = lam * np.exp(-lam * x)
        _, psi1 = _ir_two_round(gamma1, budget / e0)
        total = p0 + float(np.sum(w * pdf * psi1))
        if total < best_val:
            best_eps, best_val = float(e0), total
    _ir_initial_cache[key] = (best_eps, best_val)
    return best_eps, best_val


def ir_initial_target(rate: float, eps_tar: float) -> float:
    """Initial-round IR target; identical for every user at a given rate."""
    if not (0.0 < eps_tar < 1.0):
        raise ValueError("eps_tar must lie in (0, 1)")
    eps0, _ = _ir_three_round(rate, eps_tar)
    return eps0


# --- expected OMA power (scheduling cost) ------------------------------------

def _expected_power_stat(gamma: float, stages: int, budget: float,
                         pathloss: float, noise: float, mode: str,
                         rate: Optional[float]) -> float:
    """Expected total OMA power for `stages` remaining rounds (current included)."""
    if gamma <= 0 or stages <= 0:
        return 0.0
    if budget >= 1.0:
        return 0.0                     # enough failures allowed; free ride
    scale = gamma * pathloss * noise
    if stages == 1:
        return power_for_target(gamma, budget, pathloss, noise)
    if mode == "cc":
        sched = cc_optimal_targets(stages - 1, budget)
        return scale * cc_expected_power_factor(sched.eps)
    if stages == 2:
        _, psi = _ir_two_round(np.asarray([gamma]), budget)
        return float(psi[0]) * pathloss * noise
    if stages == 3:
        if rate is None:
            raise ValueError("rate required for the three-round ir cost")
        _, psi = _ir_three_round(rate, budget)
        return psi * pathloss * noise
    raise ValueError("ir expected power defined for at most three rounds")


def expected_oma_power(packet: PacketState, cfg: SystemConfig,
                       skip_current: bool = False) -> float:
    """Expected total power to finish one packet on dedicated slots.

    skip_current prices the state after a zero-power round: one fewer
    transmission opportunity, unchanged residual and budget.
    """
    stages = cfg.max_retx - packet.round + 1
    if skip_current:
        if packet.round >= cfg.max_retx:
            raise ValueError("skipping the last round is a drop, not a postpone")
        stages -= 1
    mode = "cc" if cfg.harq_mode == HARQ_CC else "ir"
    return _expected_power_stat(packet.residual_snr, stages, packet.budget,
                                packet.pathloss, cfg.noise_power, mode, cfg.rate)


# --- on-disk cache ------------------------------------------------------------

_CACHE_HEADER = "harqsim-targets v1"


def save_target_cache(path: str):
    """Write every memoized schedule to a versioned text file."""
    lines = [_CACHE_HEADER]
    for (retx, bkey), sched in sorted(_cc_cache.items()):
        eps_txt = " ".join(f"{e:.17g}" for e in sched.eps)
        lines.append(f"cc {retx} - {sched.budget:.17g} {eps_txt}")
    for (rkey, bkey), (eps0, psi) in sorted(_ir_initial_cache.items()):
        rate = rkey / 1e9
        budget = math.exp(bkey / 1e8)
        lines.append(f"ir 2 {rate:.17g} {budget:.17g} {eps0:.17g} {psi:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_target_cache(path: str):
    """Pre-populate the memo caches from save_target_cache output."""
    if not os.path.exists(path):
        return 0
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _CACHE_HEADER:
        raise ValueError(f"unrecognized target cache header in {path}")
    loaded = 0
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "cc":
            retx = int(parts[1])
            budget = float(parts[3])
            eps = tuple(float(tok) for tok in parts[4:])
            sched = TargetSchedule(eps=eps, mode="cc", budget=budget)
            _cc_cache[(retx, _budget_key(budget))] = sched
            loaded += 1
        elif parts[0] == "ir":
            rate = float(parts[2])
            budget = float(parts[3])
            eps0 = float(parts[4])
            psi = float(parts[5])
            _ir_initial_cache[(_rate_key(rate), _budget_key(budget))] = (eps0, psi)
            loaded += 1
        else:
            raise ValueError(f"unrecognized target cache record: {ln!r}")
    return loaded


def clear_caches():
    _cc_cache.clear()
    _ir_initial_cache.clear()
