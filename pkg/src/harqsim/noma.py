"""Two-user shared-slot mathematics.

Statistical CSI: the closed-form probability that a packet fails in a shared
slot under SIC with interference reduction from stored copies, and the
minimum-sum-power allocation meeting both users' error targets.

Instantaneous CSI: the finite-blocklength pair error probabilities (fixed
decode order, mixture over the first user's SIC success) and the matching
power minimization.

Powers, pathlosses and noise are linear; received powers are normalized by
the noise floor inside the finite-blocklength formulas.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .harq import log_normal_cdf, power_for_target
from .optim import bisect_root

_GRID_POINTS = 36              # coarse log grid per power axis
_GRID_SPAN_DECADES = 5.0       # searched range above the OMA floor
_PB_BISECTS = 18               # per-column boundary refinement
_ZOOM_POINTS = 13              # odd: keeps the zoom center on the grid


@dataclass(frozen=True)
class PairGeometry:
    """Normalized pair state: S = P/(gamma d^alpha), phi = gamma*zeta."""
    s_a: float
    s_b: float
    phi_a: float
    phi_b: float
    noise: float


@dataclass(frozen=True)
class PairPowerSolution:
    power_a: float
    power_b: float
    predicted_eps_a: float
    predicted_eps_b: float
    feasible: bool
    extra_cost: float


def interference_reduction(prior_sinrs: Sequence[float]) -> float:
    """Interference scaling achievable from the partner's stored copies.

    zeta = 1/(1 + sum of prior-copy SINRs); an empty history (fresh packet,
    or IR mode where copies are not re-encoded identically) gives 1.
    """
    total = float(np.sum(np.asarray(list(prior_sinrs), dtype=float))) if prior_sinrs else 0.0
    if total < 0:
        raise ValueError("prior SINRs must be nonnegative")
    return 1.0 / (1.0 + total)


def _pair_error(s_own, s_other, phi_own, phi_other, noise):
    """Failure probability of the 'own' user in a shared slot, elementwise.

    Both fading coefficients are unit-mean exponentials; the partner is
    decodable-with-interference or not, and SIC grants the survivor a clean
    channel.  Two branches on phi_own*phi_other against 1: at or above 1
    mutual decodability has an irreducible joint-failure band and the
    correction term vanishes.
    """
    s_own = np.asarray(s_own, dtype=float)
    s_other = np.asarray(s_other, dtype=float)
    phi_own = np.asarray(phi_own, dtype=float)
    phi_other = np.asarray(phi_other, dtype=float)

    silent = s_other <= 0.0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        frac_own = s_own / (s_other * phi_other + s_own)
        frac_other = np.where(
            silent, 0.0, s_other / (s_own * phi_own + s_other))
        cross = np.where(silent, 0.0,
                         np.exp(-noise * (phi_own + 1.0) / np.where(silent, 1.0, s_other)))
        own_exp = np.exp(-noise / s_own)
        a_branch = 1.0 - (frac_own + frac_other * cross) * own_exp

        phi_prod = phi_own * phi_other
        sub = phi_prod < 1.0
        denom = np.where(sub, 1.0 - phi_prod, 1.0)
        corr_exp = np.exp(-noise / denom
                          * ((phi_other + 1.0) / s_own
                             + (phi_own + 1.0) / np.where(silent, np.inf, s_other)))
        correction = (1.0 - frac_own - frac_other) * corr_exp
        out = a_branch - np.where(sub & ~silent, correction, 0.0)

    out = np.where(silent, -np.expm1(-noise / s_own), out)
    return np.clip(out, 0.0, 1.0)


def pair_error_closed_form(g: PairGeometry) -> float:
    """Failure probability of user a in the shared slot described by g."""
    if g.s_a <= 0:
        raise ValueError("the evaluated user must transmit (s_a > 0)")
    return float(_pair_error(g.s_a, g.s_b, g.phi_a, g.phi_b, g.noise))


# --- statistical-CSI joint power minimization --------------------------------

def _errors_at(power_a, power_b, gamma_a, gamma_b, pl_a, pl_b,
               zeta_a, zeta_b, noise):
    s_a = power_a / (gamma_a * pl_a)
    s_b = power_b / (gamma_b * pl_b)
    p_a = _pair_error(s_a, s_b, gamma_a * zeta_a, gamma_b * zeta_b, noise)
    p_b = _pair_error(s_b, s_a, gamma_b * zeta_b, gamma_a * zeta_a, noise)
    return p_a, p_b


def _boundary_sweep(eps_at, t_col, t_oth, floor_col, floor_oth):
    """Minimum-sum search along one axis of the pair power plane.

    eps_at(p_col, p_oth) must return the elementwise error pair in that
    order.  Every feasible point lies on or above the boundary graph
    p_oth_min(p_col), so minimizing p_col + p_oth_min(p_col) over a log grid
    of the column power (exact bisection per column, then two zoom passes
    around the best column) is a complete search up to column resolution.
    Returns (p_col, p_oth, sum, found) elementwise over the batch.
    """
    mult = 10.0 ** np.linspace(0.0, _GRID_SPAN_DECADES, _GRID_POINTS)
    oth_grid = floor_oth[:, None] * mult[None, :]

    def oth_floor(cand):
        """Exact minimal feasible partner power per candidate (inf if none).

        Scans the partner grid, then bisects onto the lower edge of the
        lowest feasible run.  A power below the dedicated-slot floor can
        never work (interference only adds to the clean-channel failure
        mass), so the first grid cell is a hard lower bound.
        """
        e_col, e_oth = eps_at(cand[:, :, None], oth_grid[:, None, :])
        okc = (e_col <= t_col[:, None, None]) & (e_oth <= t_oth[:, None, None])
        anyc = okc.any(axis=2)
        fj = np.argmax(okc, axis=2)
        grid = np.broadcast_to(oth_grid[:, None, :], okc.shape)
        hi = np.take_along_axis(grid, fj[:, :, None], axis=2)[:, :, 0]
        lo = np.take_along_axis(grid, np.maximum(fj - 1, 0)[:, :, None],
                                axis=2)[:, :, 0]
        lo = np.where(fj == 0, hi, lo)
        hi = np.where(anyc, hi, 1.0)
        lo = np.where(anyc, lo, 1.0)
        llo, lhi = np.log(lo), np.log(hi)
        for _ in range(_PB_BISECTS):
            mid = 0.5 * (llo + lhi)
            em_c, em_o = eps_at(cand, np.exp(mid))
            okm = (em_c <= t_col[:, None]) & (em_o <= t_oth[:, None])
            lhi = np.where(okm, mid, lhi)
            llo = np.where(okm, llo, mid)
        return np.where(anyc, np.exp(lhi), np.inf)

    grid_col = floor_col[:, None] * mult[None, :]
    othm = oth_floor(grid_col)
    sums = grid_col + othm
    best = np.argmin(sums, axis=1)
    best_sum = np.take_along_axis(sums, best[:, None], axis=1)[:, 0]
    best_col = np.take_along_axis(grid_col, best[:, None], axis=1)[:, 0]
    best_oth = np.take_along_axis(othm, best[:, None], axis=1)[:, 0]
    found = np.isfinite(best_sum)

    lo_i = np.maximum(best - 1, 0)
    hi_i = np.minimum(best + 1, _GRID_POINTS - 1)
    lo = np.log(np.take_along_axis(grid_col, lo_i[:, None], axis=1)[:, 0])
    hi = np.log(np.take_along_axis(grid_col, hi_i[:, None], axis=1)[:, 0])
    frac = np.linspace(0.0, 1.0, _ZOOM_POINTS)
    for _ in range(2):
        cand = np.exp(lo[:, None] + frac[None, :] * (hi - lo)[:, None])
        othz = oth_floor(cand)
        sz = cand + othz
        bz = np.argmin(sz, axis=1)
        zoom_sum = np.take_along_axis(sz, bz[:, None], axis=1)[:, 0]
        zoom_col = np.take_along_axis(cand, bz[:, None], axis=1)[:, 0]
        zoom_oth = np.take_along_axis(othz, bz[:, None], axis=1)[:, 0]
        imp = zoom_sum < best_sum
        best_sum = np.where(imp, zoom_sum, best_sum)
        best_col = np.where(imp, zoom_col, best_col)
        best_oth = np.where(imp, zoom_oth, best_oth)
        step = (hi - lo) / (_ZOOM_POINTS - 1)
        center = np.log(np.where(found, best_col, 1.0))
        lo, hi = center - step, center + step
    return best_col, best_oth, best_sum, found


def solve_pairs_batch(gamma_a, gamma_b, target_a, target_b, pl_a, pl_b,
                      zeta_a, zeta_b, noise):
    """Vectorized minimum-sum-power solve for many candidate pairs at once.

    Returns (power_a, power_b, eps_a, eps_b, feasible, extra).  Strategy:
    the feasible set's cheap edge is the graph of the smallest feasible
    partner power as a function of own power, so the search reduces to one
    dimension per axis; both axis sweeps run because either one alone can
    miss a feasibility corridor thinner than its scan grid.  (The surface is
    non-convex with SIC-induced diagonal valleys, which defeats both naive
    coordinate descent and an active-set Newton solve.)
    """
    gamma_a = np.atleast_1d(np.asarray(gamma_a, dtype=float))
    n = gamma_a.shape[0]
    gamma_b = np.broadcast_to(np.asarray(gamma_b, dtype=float), (n,)).copy()
    target_a = np.broadcast_to(np.asarray(target_a, dtype=float), (n,)).copy()
    target_b = np.broadcast_to(np.asarray(target_b, dtype=float), (n,)).copy()
    pl_a = np.broadcast_to(np.asarray(pl_a, dtype=float), (n,)).copy()
    pl_b = np.broadcast_to(np.asarray(pl_b, dtype=float), (n,)).copy()
    zeta_a = np.broadcast_to(np.asarray(zeta_a, dtype=float), (n,)).copy()
    zeta_b = np.broadcast_to(np.asarray(zeta_b, dtype=float), (n,)).copy()

    power_a = np.zeros(n)
    power_b = np.zeros(n)
    eps_a = np.zeros(n)
    eps_b = np.zeros(n)
    feasible = np.ones(n, dtype=bool)
    extra = np.zeros(n)

    live_a = gamma_a > 0
    live_b = gamma_b > 0
    # dead users carry no constraint; park their target strictly inside (0, 1)
    # so the vectorized floor computation cannot trip on a placeholder value
    eval_ta = np.where(live_a, target_a, 0.5)
    eval_tb = np.where(live_b, target_b, 0.5)
    oma_a = np.where(live_a, power_for_target(np.maximum(gamma_a, 1e-300),
                                              eval_ta, pl_a, noise), 0.0)
    oma_b = np.where(live_b, power_for_target(np.maximum(gamma_b, 1e-300),
                                              eval_tb, pl_b, noise), 0.0)
    power_a[:] = oma_a
    power_b[:] = oma_b
    eps_a[:] = np.where(live_a, target_a, 0.0)
    eps_b[:] = np.where(live_b, target_b, 0.0)

    both = live_a & live_b
    if not np.any(both):
        return power_a, power_b, eps_a, eps_b, feasible, extra

    idx = np.nonzero(both)[0]
    ga, gb = gamma_a[idx], gamma_b[idx]
    ta, tb = target_a[idx], target_b[idx]
    da, db = pl_a[idx], pl_b[idx]
    za, zb = zeta_a[idx], zeta_b[idx]
    pa0, pb0 = oma_a[idx], oma_b[idx]

    m = idx.size

    def eps_ab(p_col, p_oth):
        sh = (m,) + (1,) * (max(p_col.ndim, p_oth.ndim) - 1)
        return _errors_at(p_col, p_oth, ga.reshape(sh), gb.reshape(sh),
                          da.reshape(sh), db.reshape(sh),
                          za.reshape(sh), zb.reshape(sh), noise)

    def eps_ba(p_col, p_oth):
        sh = (m,) + (1,) * (max(p_col.ndim, p_oth.ndim) - 1)
        return _errors_at(p_col, p_oth, gb.reshape(sh), ga.reshape(sh),
                          db.reshape(sh), da.reshape(sh),
                          zb.reshape(sh), za.reshape(sh), noise)

    # one sweep per axis: a feasibility corridor can be thinner than the
    # scan grid along one power axis, but then it is elongated (and visible)
    # along the other
    sw_a, sol_b, sum1, f1 = _boundary_sweep(eps_ab, ta, tb, pa0, pb0)
    sw_b, sol_a, sum2, f2 = _boundary_sweep(eps_ba, tb, ta, pb0, pa0)
    pick2 = (f2 & ~f1) | (f2 & (sum2 < sum1))
    use_a = np.where(pick2, sol_a, sw_a)
    use_b = np.where(pick2, sw_b, sol_b)
    found = f1 | f2
    fin_a, fin_b = _errors_at(use_a, use_b, ga, gb, da, db, za, zb, noise)

    power_a[idx] = np.where(found, use_a, 0.0)
    power_b[idx] = np.where(found, use_b, 0.0)
    eps_a[idx] = np.where(found, fin_a, 1.0)
    eps_b[idx] = np.where(found, fin_b, 1.0)
    feasible[idx] = found
    extra[idx] = np.where(found, use_a + use_b - pa0 - pb0, 0.0)
    return power_a, power_b, eps_a, eps_b, feasible, extra


def joint_power_min(gamma_a: float, gamma_b: float, target_a: float, target_b: float,
                    pathloss_a: float, pathloss_b: float, zeta_a: float, zeta_b: float,
                    noise: float) -> PairPowerSolution:
    """Minimum-sum-power allocation for one shared slot (statistical CSI)."""
    for t, g in ((target_a, gamma_a), (target_b, gamma_b)):
        if g > 0 and not (0.0 < t < 1.0):
            raise ValueError("targets must lie in (0, 1)")
    pa, pb, ea, eb, feas, extra = solve_pairs_batch(
        np.asarray([gamma_a]), gamma_b, target_a, target_b,
        pathloss_a, pathloss_b, zeta_a, zeta_b, noise)
    return PairPowerSolution(float(pa[0]), float(pb[0]), float(ea[0]), float(eb[0]),
                             bool(feas[0]), float(extra[0]))


# --- finite-blocklength pair errors and powers --------------------------------

def _fbl_pair_errors_arr(q_a, q_b, rate, blocklength, mu_a, nu_a, mu_b, nu_b):
    """Eqs.-(21)/(22)-style pair errors, elementwise; q are noise-normalized."""
    q_a = np.asarray(q_a, dtype=float)
    q_b = np.asarray(q_b, dtype=float)
    x = rate * math.log(2.0)

    def log_cdf_after(q_sig, q_int, mu, nu):
        mean = mu + np.log1p(q_sig / (q_int + 1.0))
        var = nu + 2.0 * q_sig / (blocklength * (q_sig + q_int + 1.0))
        return log_normal_cdf(x, mean, var)

    def log_den(mu, nu):
        fresh = (np.asarray(mu) == 0.0) & (np.asarray(nu) == 0.0)
        return np.where(fresh, 0.0, log_normal_cdf(x, mu, nu))

    den_a = log_den(mu_a, nu_a)
    den_b = log_den(mu_b, nu_b)
    with np.errstate(invalid="ignore"):
        p_a = np.exp(np.minimum(log_cdf_after(q_a, q_b, mu_a, nu_a) - den_a, 0.0))
        p_b_clean = np.exp(np.minimum(log_cdf_after(q_b, 0.0, mu_b, nu_b) - den_b, 0.0))
        p_b_int = np.exp(np.minimum(log_cdf_after(q_b, q_a, mu_b, nu_b) - den_b, 0.0))
    p_a = np.where(np.isneginf(den_a), 0.0, p_a)
    p_b_clean = np.where(np.isneginf(den_b), 0.0, p_b_clean)
    p_b_int = np.where(np.isneginf(den_b), 0.0, p_b_int)
    p_b = (1.0 - p_a) * p_b_clean + p_a * p_b_int
    return p_a, p_b


def fbl_pair_errors(q_a: float, q_b: float, rate: float, blocklength: int,
                    mu_a: float, nu_a: float, mu_b: float, nu_b: float
                    ) -> Tuple[float, float]:
    """Pair error probabilities with user a decoded first.

    q_a, q_b are received powers normalized to the noise floor.  User a is
    decoded against b's full interference; b sees a clean channel when a's
    SIC succeeded and a's interference otherwise (mixture weighted by p_a).
    """
    p_a, p_b = _fbl_pair_errors_arr(q_a, q_b, rate, blocklength, mu_a, nu_a, mu_b, nu_b)
    return float(p_a), float(p_b)


def _fbl_errors_ordered(qa, qb, rate, blocklength, mu_a, nu_a, mu_b, nu_b):
    """Per-point decode order: the larger normalized received power goes first."""
    p_a_first, p_b_second = _fbl_pair_errors_arr(
        qa, qb, rate, blocklength, mu_a, nu_a, mu_b, nu_b)
    p_b_first, p_a_second = _fbl_pair_errors_arr(
        qb, qa, rate, blocklength, mu_b, nu_b, mu_a, nu_a)
    a_first = qa >= qb
    p_a = np.where(a_first, p_a_first, p_a_second)
    p_b = np.where(a_first, p_b_second, p_b_first)
    return p_a, p_b


def _fbl_single_power(target, gain, pathloss, mu, nu, rate, blocklength, noise):
    """Power meeting a single-user finite-blocklength target (inverse of the
    round error); target >= 1 means the user was postponed and costs 0."""
    if target >= 1.0:
        return 0.0
    x = rate * math.log(2.0)
    fresh = (mu == 0.0 and nu == 0.0)
    log_den = 0.0 if fresh else log_normal_cdf(x, mu, nu)
    if np.isneginf(log_den):
        return 0.0
    log_t = math.log(target) + log_den

    def res(log_q):
        q = np.exp(log_q)
        mean = mu + np.log1p(q)
        var = nu + 2.0 * q / (blocklength * (q + 1.0))
        return log_normal_cdf(x, mean, var) - log_t

    lo, hi = -40.0, 40.0
    if res(np.asarray(lo)) < 0:          # already below target with no power
        return 0.0
    q = math.exp(bisect_root(res, lo, hi, iters=200, rel_tol=1e-13))
    return q * noise * pathloss / gain


def fbl_joint_power_min(ctx_a, ctx_b, oma_targets: Tuple[float, float],
                        rate: float, blocklength: int, noise: float,
                        oma_powers: Optional[Tuple[float, float]] = None
                        ) -> PairPowerSolution:
    """Minimum-sum-power shared slot under instantaneous CSI.

    ctx: per-user (gain, pathloss, mu, nu).  oma_targets are the per-round
    error targets implied by the users' OMA solutions; a target of 1 marks a
    user the OMA pass postponed (power 0, vacuous constraint).
    """
    gain_a, pl_a, mu_a, nu_a = ctx_a
    gain_b, pl_b, mu_b, nu_b = ctx_b
    t_a, t_b = oma_targets
    if oma_powers is None:
        oma_powers = (
            _fbl_single_power(t_a, gain_a, pl_a, mu_a, nu_a, rate, blocklength, noise),
            _fbl_single_power(t_b, gain_b, pl_b, mu_b, nu_b, rate, blocklength, noise))
    p_oma_a, p_oma_b = oma_powers

    if t_a >= 1.0 or t_b >= 1.0 or p_oma_a <= 0.0 or p_oma_b <= 0.0:
        # one side is postponed (or already reliable): degenerate to OMA
        return PairPowerSolution(
            power_a=p_oma_a if t_a < 1.0 else 0.0,
            power_b=p_oma_b if t_b < 1.0 else 0.0,
            predicted_eps_a=t_a if t_a < 1.0 else 1.0,
            predicted_eps_b=t_b if t_b < 1.0 else 1.0,
            feasible=True, extra_cost=0.0)

    conv_a = gain_a / (pl_a * noise)     # watts -> normalized received power
    conv_b = gain_b / (pl_b * noise)

    def eps_ab(pa, pb):
        return _fbl_errors_ordered(pa * conv_a, pb * conv_b, rate,
                                   blocklength, mu_a, nu_a, mu_b, nu_b)

    def eps_ba(pb, pa):
        p_a, p_b = _fbl_errors_ordered(pa * conv_a, pb * conv_b, rate,
                                       blocklength, mu_a, nu_a, mu_b, nu_b)
        return p_b, p_a

    fl_a = np.asarray([p_oma_a])
    fl_b = np.asarray([p_oma_b])
    arr_ta = np.asarray([t_a])
    arr_tb = np.asarray([t_b])
    sw_a, sol_b, sum1, f1 = _boundary_sweep(eps_ab, arr_ta, arr_tb, fl_a, fl_b)
    sw_b, sol_a, sum2, f2 = _boundary_sweep(eps_ba, arr_tb, arr_ta, fl_b, fl_a)
    if not (f1[0] or f2[0]):
        return PairPowerSolution(0.0, 0.0, 1.0, 1.0, False, 0.0)
    if f2[0] and (not f1[0] or sum2[0] < sum1[0]):
        use_a, use_b = float(sol_a[0]), float(sw_b[0])
    else:
        use_a, use_b = float(sw_a[0]), float(sol_b[0])
    fa, fb = eps_ab(np.asarray(use_a), np.asarray(use_b))
    return PairPowerSolution(
        power_a=use_a, power_b=use_b,
        predicted_eps_a=float(fa), predicted_eps_b=float(fb),
        feasible=True,
        extra_cost=float(use_a + use_b - p_oma_a - p_oma_b))
