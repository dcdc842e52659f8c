"""Instantaneous-CSI transmit power decisions for dedicated slots.

With the upcoming channel gain known, fading stops driving errors and
decoding fails through finite-blocklength noise instead.  Accumulated mutual
information across rounds is modeled as Gaussian with per-round mean
ln(1+snr) and variance (2/K)*snr/(1+snr); every power decision inverts that
CDF at R ln 2.

The last round has a closed inverse.  The penultimate round minimizes
(power now) + (failure prob) * (expected final-round power over next-phase
fades, truncated at the drop threshold).  The round before that adds one
quadrature layer over next-phase gains of the penultimate value function.

Everything internal runs normalized to pathloss 1 and unit noise; physical
watts enter only at lookup (power_norm * pathloss * noise).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.polynomial.laguerre import laggauss
from scipy import special

from .harq import log_normal_cdf
from .optim import bisect_root, golden_min

_GAIN_POINTS = 256
_GAIN_HI = -math.log(1e-9)     # gain above which the fade CCDF is < 1e-9
_GL_POINTS = 128
_SCAN_POINTS = 32
_SCAN_SPAN = 16.0              # nats of log-power covered below the one-shot point
_GOLDEN_ITERS = 200
_GOLDEN_TOL = 1e-6
_BISECT_ITERS = 200
_BISECT_TOL = 1e-12


def _x_nats(rate: float) -> float:
    return rate * math.log(2.0)


def _rho_required(mu, nu, rate: float, blocklength: int, eps_tar: float):
    """Smallest normalized received power driving F_N(R ln 2; ., .) to eps_tar.

    Solved in u = ln(1+rho), where the condition becomes
    mu + u = R ln 2 - ndtri(eps) * sqrt(nu + (2/K)(1 - e^-u)): the bracket
    [0, max over the two variance extremes] is analytic and tight.  Returns 0
    where the state is already reliable enough (F_N <= eps_tar).
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    mu, nu = np.broadcast_arrays(mu, nu)
    x = _x_nats(rate)
    q = special.ndtri(eps_tar)
    k2 = 2.0 / blocklength
    lo_raw = x - mu - q * np.sqrt(nu)
    hi_raw = x - mu - q * np.sqrt(nu + k2)
    reliable = lo_raw <= 0.0
    upper = np.where(reliable, 1.0, np.maximum(np.maximum(lo_raw, hi_raw), 1e-300))

    def residual(u):
        var = nu + k2 * (-np.expm1(-u))
        return mu + u - x + q * np.sqrt(var)

    u = bisect_root(residual, np.zeros_like(upper), upper,
                    iters=_BISECT_ITERS, rel_tol=_BISECT_TOL)
    rho = np.where(reliable, 0.0, np.expm1(u))
    if rho.ndim == 0:
        return float(rho)
    return rho


def last_round_power(gain: float, pathloss: float, mu_prev: float, nu_prev: float,
                     rate: float, blocklength: int, eps_tar: float,
                     noise: float) -> float:
    """Exact final-round power: no retreat left, the CDF constraint binds.

    Returns rho * noise * pathloss / gain with rho the normalized received
    power solving the accumulated-information constraint; 0 when the state
    is already reliable enough.
    """
    if gain <= 0.0:
        raise ValueError("gain must be positive; deep-fade packets are dropped upstream")
    rho = _rho_required(mu_prev, nu_prev, rate, blocklength, eps_tar)
    return float(rho) * noise * pathloss / gain


def _psi1(z, mu, nu, rate: float, blocklength: int, eps_tar: float,
          eps_drop: float):
    """Penultimate-round plan at gain z with accumulated state (mu, nu).

    Minimizes  P + eps_round(P) * rho_final(post-state) * E1(z_drop)
    over P >= 0, elementwise.  Returns (power, value, skip_value), all in
    normalized units; skip_value is the objective at P = 0 (postpone).
    """
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    z, mu, nu = np.broadcast_arrays(z, mu, nu)
    x = _x_nats(rate)
    k2 = 2.0 / blocklength
    e1_tail = special.exp1(-math.log1p(-eps_drop))
    log_den = log_normal_cdf(x, mu, nu)
    rho_now = np.asarray(_rho_required(mu, nu, rate, blocklength, eps_tar))
    skip = rho_now * e1_tail
    reliable = rho_now <= 0.0

    def objective(w):
        rho = np.exp(w)
        post_mu = mu + np.log1p(rho)
        post_nu = nu + k2 * rho / (1.0 + rho)
        log_num = log_normal_cdf(x, post_mu, post_nu)
        with np.errstate(invalid="ignore"):
            eps_round = np.exp(np.minimum(log_num - log_den, 0.0))
        eps_round = np.where(np.isneginf(log_den), 0.0, eps_round)
        tail = _rho_required(post_mu, post_nu, rate, blocklength, eps_tar)
        return rho / z + eps_round * tail * e1_tail

    w_hi = np.log(np.maximum(rho_now, 1e-300))
    offsets = np.linspace(-_SCAN_SPAN, 0.0, _SCAN_POINTS)
    scan_vals = np.stack([objective(w_hi + o) for o in offsets])
    best = np.argmin(scan_vals, axis=0)
    step = _SCAN_SPAN / (_SCAN_POINTS - 1)
    lo = w_hi + offsets[np.maximum(best - 1, 0)]
    hi = np.minimum(w_hi + offsets[best] + step, w_hi)
    w_star, j_star = golden_min(objective, lo, hi,
                                iters=_GOLDEN_ITERS, rel_tol=_GOLDEN_TOL)
    w_star = np.asarray(w_star)
    j_star = np.asarray(j_star)

    interior = (j_star < skip) & ~reliable
    power = np.where(interior, np.exp(w_star) / z, 0.0)
    value = np.where(reliable, 0.0, np.minimum(j_star, skip))
    skip_val = np.where(reliable, 0.0, skip)
    return power, value, skip_val


def penultimate_power(gain: float, pathloss: float, mu_prev2: float, nu_prev2: float,
                      rate: float, blocklength: int, eps_tar: float,
                      eps_drop: float, noise: float) -> float:
    """One retransmission left after this round: lookahead-of-one power.

    0 means the channel is bad enough that postponing to the final round is
    cheaper in expectation.
    """
    if gain <= 0.0:
        raise ValueError("gain must be positive")
    power, _, _ = _psi1(gain, mu_prev2, nu_prev2, rate, blocklength, eps_tar, eps_drop)
    return float(power) * pathloss * noise


def _transmit_knee(value_at, skip_at, z_lo: float, z_hi: float) -> float:
    """Largest gain where postponing still beats transmitting.

    value_at(z) / skip_at(z) are elementwise callables; the transmit region
    is an upper interval in gain, so bisection on the indicator suffices.
    """
    def better(z):
        return value_at(z) < skip_at(z) * (1.0 - 1e-12)

    if better(np.asarray(z_hi)) == False:      # noqa: E712 - numpy bool
        return float(z_hi)
    if bool(better(np.asarray(z_lo))):
        return 0.0
    lo, hi = z_lo, z_hi
    for _ in range(80):
        mid = math.sqrt(lo * hi)
        if bool(better(np.asarray(mid))):
            hi = mid
        else:
            lo = mid
    return math.sqrt(lo * hi)


@dataclass(frozen=True)
class PowerCurve:
    """Normalized power-vs-gain table for one remaining-rounds level."""
    remaining_rounds: int
    rate: float
    blocklength: int
    eps_tar: float
    eps_drop: float
    grid: tuple                  # ((gain, power), ...) with gains increasing
    postpone_below: float

    def __post_init__(self):
        gains = [g for g, _ in self.grid]
        if any(b <= a for a, b in zip(gains, gains[1:])):
            raise ValueError("curve gains must be strictly increasing")


def _augment_knee(gains, powers, values, knee, power_at, value_at):
    """Insert a grid point pair hugging the postpone knee so interpolation
    reproduces the jump."""
    if knee <= gains[0] or knee >= gains[-1]:
        return gains, powers, values
    below = knee * (1.0 - 1e-9)
    above = knee * (1.0 + 1e-9)
    p_above = float(power_at(np.asarray(above)))
    v_above = float(value_at(np.asarray(above)))
    v_below = float(value_at(np.asarray(below)))
    gains = np.concatenate([gains, [below, above]])
    powers = np.concatenate([powers, [0.0, p_above]])
    values = np.concatenate([values, [v_below, v_above]])
    order = np.argsort(gains)
    return gains[order], powers[order], values[order]


def _monotonize(gains, powers):
    pos = np.nonzero(powers > 0)[0]
    if pos.size:
        i0 = pos[0]
        powers = powers.copy()
        powers[i0:] = np.minimum.accumulate(powers[i0:])
    return powers


def _build_with_values(remaining_rounds: int, rate: float, blocklength: int,
                       eps_tar: float, eps_drop: float):
    """Shared builder: returns (PowerCurve, value grid, skip value).

    values[i] is the expected total remaining power (normalized) when
    transmitting optimally at grid gain i; skip value is the same quantity
    when this round is skipped (gain-independent).  remaining=0 has no skip
    option (final round) and values equal powers.
    """
    if remaining_rounds not in (0, 1, 2):
        raise ValueError("power curves exist for at most two remaining rounds")
    z_drop = -math.log1p(-eps_drop)
    gains = np.geomspace(z_drop, _GAIN_HI, _GAIN_POINTS)
    x = _x_nats(rate)
    k2 = 2.0 / blocklength
    rho_fresh = float(_rho_required(0.0, 0.0, rate, blocklength, eps_tar))

    if remaining_rounds == 0:
        powers = rho_fresh / gains
        curve = PowerCurve(0, rate, blocklength, eps_tar, eps_drop,
                           tuple(zip(gains.tolist(), powers.tolist())), 0.0)
        return curve, powers.copy(), math.inf

    if remaining_rounds == 1:
        def value_at(z):
            _, v, _ = _psi1(z, 0.0, 0.0, rate, blocklength, eps_tar, eps_drop)
            return v

        def power_at(z):
            p, _, _ = _psi1(z, 0.0, 0.0, rate, blocklength, eps_tar, eps_drop)
            return p

        powers, values, skips = _psi1(gains, 0.0, 0.0, rate, blocklength,
                                      eps_tar, eps_drop)
        skip_value = float(skips.flat[0])
        knee = _transmit_knee(value_at, lambda z: np.asarray(skip_value),
                              gains[0], gains[-1])
        gains, powers, values = _augment_knee(gains, powers, values, knee,
                                              power_at, value_at)
        powers = _monotonize(gains, powers)
        curve = PowerCurve(1, rate, blocklength, eps_tar, eps_drop,
                           tuple(zip(gains.tolist(), powers.tolist())),
                           float(knee))
        return curve, values, skip_value

    # remaining == 2: tabulate the expected penultimate value over next-phase
    # gains as a function of this round's received power, then minimize.
    q_grid = np.concatenate([[0.0], np.geomspace(rho_fresh * 1e-6, rho_fresh, 144)])
    post_mu = np.log1p(q_grid)
    post_nu = k2 * q_grid / (1.0 + q_grid)
    g_table = _expected_psi1(post_mu, post_nu, rate, blocklength, eps_tar, eps_drop)

    def g_of(q):
        return np.interp(q, q_grid, g_table)

    def objective_factory(z):
        def objective(w):
            rho = np.exp(w)
            log_f0 = log_normal_cdf(x, np.log1p(rho), k2 * rho / (1.0 + rho))
            return rho / z + np.exp(np.minimum(log_f0, 0.0)) * g_of(rho)
        return objective

    def solve(z):
        z = np.asarray(z, dtype=float)
        obj = objective_factory(z)
        w_hi = math.log(rho_fresh) * np.ones_like(z)
        offsets = np.linspace(-_SCAN_SPAN, 0.0, _SCAN_POINTS)
        scan = np.stack([obj(w_hi + o) for o in offsets])
        best = np.argmin(scan, axis=0)
        step = _SCAN_SPAN / (_SCAN_POINTS - 1)
        lo = w_hi + offsets[np.maximum(best - 1, 0)]
        hi = np.minimum(w_hi + offsets[best] + step, w_hi)
        w_star, j_star = golden_min(obj, lo, hi,
                                    iters=_GOLDEN_ITERS, rel_tol=_GOLDEN_TOL)
        return np.asarray(w_star), np.asarray(j_star)

    skip_value = float(g_table[0])           # transmit nothing now: fresh next round

    def power_at(z):
        w_star, j_star = solve(z)
        return np.where(j_star < skip_value, np.exp(w_star) / np.asarray(z), 0.0)

    def value_at(z):
        _, j_star = solve(z)
        return np.minimum(j_star, skip_value)

    w_star, j_star = solve(gains)
    interior = j_star < skip_value
    powers = np.where(interior, np.exp(w_star) / gains, 0.0)
    values = np.minimum(j_star, skip_value)
    knee = _transmit_knee(value_at, lambda z: np.asarray(skip_value),
                          gains[0], gains[-1])
    gains, powers, values = _augment_knee(gains, powers, values, knee,
                                          power_at, value_at)
    powers = _monotonize(gains, powers)
    curve = PowerCurve(2, rate, blocklength, eps_tar, eps_drop,
                       tuple(zip(gains.tolist(), powers.tolist())), float(knee))
    return curve, values, skip_value


def _expected_psi1(mu, nu, rate, blocklength, eps_tar, eps_drop):
    """E_z[ psi1(z; mu, nu) ] over z ~ Exp(1), elementwise over states.

    The integrand is flat (= skip value) below the per-state transmit knee
    and smooth above it, so the integral splits there: closed form below,
    shifted Gauss-Laguerre above.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    _, _, skips = _psi1(1.0, mu, nu, rate, blocklength, eps_tar, eps_drop)
    skips = np.asarray(skips)

    # per-state knee by vector bisection on the transmit indicator
    lo = np.full(mu.shape, 1e-9)
    hi = np.full(mu.shape, _GAIN_HI)

    def transmit_at(z):
        _, v, s = _psi1(z, mu, nu, rate, blocklength, eps_tar, eps_drop)
        return v < s * (1.0 - 1e-12)

    never = ~transmit_at(hi)
    for _ in range(60):
        mid = np.sqrt(lo * hi)
        t = transmit_at(mid)
        hi = np.where(t, mid, hi)
        lo = np.where(t, lo, mid)
    knee = np.where(never, np.inf, np.sqrt(lo * hi))

    nodes, weights = laggauss(_GL_POINTS)
    z_nodes = np.where(never, 1.0, np.minimum(knee, _GAIN_HI))[..., None] + nodes
    _, vals, _ = _psi1(z_nodes, mu[..., None], nu[..., None],
                       rate, blocklength, eps_tar, eps_drop)
    tail = np.exp(-np.minimum(knee, _GAIN_HI)) * (vals @ weights)
    below = skips * (-np.expm1(-np.minimum(knee, _GAIN_HI)))
    return np.where(never, skips, below + tail)


def build_power_curve(remaining_rounds: int, rate: float, blocklength: int,
                      eps_tar: float, eps_drop: float,
                      noise: float = 1.0) -> PowerCurve:
    """Offline power-vs-gain table for a fresh packet.

    Stored normalized to pathloss 1 and unit noise regardless of the noise
    argument (kept for interface symmetry); lookup_power applies the
    physical rescaling.
    """
    curve, _, _ = _build_with_values(remaining_rounds, rate, blocklength,
                                     eps_tar, eps_drop)
    return curve


def lookup_power(curve: PowerCurve, gain, pathloss: float, noise: float):
    """Interpolated transmit power in watts; 0 inside the postpone region.

    Piecewise linear in log-gain; gains beyond the table clamp to the
    nearest endpoint.
    """
    g = np.asarray(gain, dtype=float)
    ga = np.asarray([p[0] for p in curve.grid])
    pw = np.asarray([p[1] for p in curve.grid])
    with np.errstate(divide="ignore"):
        out = np.interp(np.log(np.maximum(g, 1e-300)), np.log(ga), pw)
    out = np.where(g <= curve.postpone_below, 0.0, out) * pathloss * noise
    if out.ndim == 0:
        return float(out)
    return out


# --- disk cache ---------------------------------------------------------------

_CURVE_HEADER = "harqsim-curve v1"


def save_power_curve(curve: PowerCurve, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_CURVE_HEADER} remaining={curve.remaining_rounds} "
                 f"rate={curve.rate:.17g} K={curve.blocklength} "
                 f"eps_tar={curve.eps_tar:.17g} eps_drop={curve.eps_drop:.17g} "
                 f"postpone_below={curve.postpone_below:.17g}\n")
        for gain, power in curve.grid:
            fh.write(f"{gain:.17g} {power:.17g}\n")


def load_power_curve(path: str) -> PowerCurve:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith(_CURVE_HEADER):
            raise ValueError(f"not a power-curve file: {path}")
        fields = dict(tok.split("=", 1) for tok in header.split()[2:])
        grid = []
        for line in fh:
            a, b = line.split()
            grid.append((float(a), float(b)))
    return PowerCurve(
        remaining_rounds=int(fields["remaining"]), rate=float(fields["rate"]),
        blocklength=int(fields["K"]), eps_tar=float(fields["eps_tar"]),
        eps_drop=float(fields["eps_drop"]), grid=tuple(grid),
        postpone_below=float(fields["postpone_below"]))


# --- engine-facing bundle ------------------------------------------------------

class FblPlanner:
    """Per-config decision bundle: a curve for round 0, pointwise solvers for
    later rounds, and the value differences the scheduler ranks by.

    All returned powers/values are normalized; the engine multiplies by
    pathloss * noise.
    """

    def __init__(self, max_retx: int, rate: float, blocklength: int,
                 eps_tar: float, eps_drop: float,
                 cache_dir: Optional[str] = None):
        if max_retx > 2:
            raise ValueError("instantaneous CSI supports at most 2 retransmissions")
        self.max_retx = max_retx
        self.rate = rate
        self.blocklength = blocklength
        self.eps_tar = eps_tar
        self.eps_drop = eps_drop
        self.drop_gain = -math.log1p(-eps_drop)

        loaded = None
        cache_path = None
        if cache_dir:
            tag = (f"rem{max_retx}_R{rate:.12g}_K{blocklength}"
                   f"_t{eps_tar:.12g}_d{eps_drop:.12g}")
            cache_path = os.path.join(cache_dir, f"plan_{tag}.txt")
            if os.path.exists(cache_path):
                loaded = self._load(cache_path)
        if loaded is None:
            curve, values, skip = _build_with_values(
                max_retx, rate, blocklength, eps_tar, eps_drop)
            if cache_path:
                os.makedirs(cache_dir, exist_ok=True)
                self._save(cache_path, curve, values, skip)
        else:
            curve, values, skip = loaded
        self.curve = curve
        self._gains = np.asarray([p[0] for p in curve.grid])
        self._powers = np.asarray([p[1] for p in curve.grid])
        self._values = np.asarray(values)
        self._skip0 = skip
        self._log_gains = np.log(self._gains)

    def _save(self, path, curve, values, skip):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"harqsim-plan v1 remaining={curve.remaining_rounds} "
                     f"rate={curve.rate:.17g} K={curve.blocklength} "
                     f"eps_tar={curve.eps_tar:.17g} eps_drop={curve.eps_drop:.17g} "
                     f"postpone_below={curve.postpone_below:.17g} "
                     f"skip={skip:.17g}\n")
            for (gain, power), value in zip(curve.grid, values):
                fh.write(f"{gain:.17g} {power:.17g} {value:.17g}\n")

    def _load(self, path):
        try:
            with open(path, encoding="utf-8") as fh:
                header = fh.readline().strip()
                if not header.startswith("harqsim-plan v1"):
                    return None
                fields = dict(tok.split("=", 1) for tok in header.split()[2:])
                if (int(fields["remaining"]) != self.max_retx
                        or float(fields["rate"]) != self.rate
                        or int(fields["K"]) != self.blocklength
                        or float(fields["eps_tar"]) != self.eps_tar
                        or float(fields["eps_drop"]) != self.eps_drop):
                    return None
                rows = [tuple(float(v) for v in line.split()) for line in fh]
        except (OSError, ValueError):
            return None
        grid = tuple((g, p) for g, p, _ in rows)
        values = np.asarray([v for _, _, v in rows])
        curve = PowerCurve(self.max_retx, self.rate, self.blocklength,
                           self.eps_tar, self.eps_drop, grid,
                           float(fields["postpone_below"]))
        return curve, values, float(fields["skip"])

    def round0_power(self, gains):
        """Normalized transmit power for fresh packets at the given gains."""
        g = np.asarray(gains, dtype=float)
        out = np.interp(np.log(np.maximum(g, 1e-300)), self._log_gains, self._powers)
        return np.where(g <= self.curve.postpone_below, 0.0, out)

    def round0_postpone_cost(self, gains):
        """Extra expected power if a fresh packet is forced to skip this phase."""
        g = np.asarray(gains, dtype=float)
        val = np.interp(np.log(np.maximum(g, 1e-300)), self._log_gains, self._values)
        val = np.where(g <= self.curve.postpone_below, self._skip0, val)
        return np.maximum(self._skip0 - val, 0.0)

    def mid_decision(self, gains, mus, nus):
        """Penultimate-round powers, values, and skip values for live packets."""
        return _psi1(gains, mus, nus, self.rate, self.blocklength,
                     self.eps_tar, self.eps_drop)

    def last_rho(self, mus, nus):
        """Final-round normalized received power per state."""
        return _rho_required(mus, nus, self.rate, self.blocklength, self.eps_tar)
