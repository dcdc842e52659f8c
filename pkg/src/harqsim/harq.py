"""Closed-form per-link HARQ math.

Residual-SNR recursions for chase combining and incremental redundancy,
single-user outage and minimum-power formulas under Rayleigh block fading,
and the Gaussian accumulated-mutual-information statistics used in the
finite-blocklength regime.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import special


# --- Gaussian CDF helpers -------------------------------------------------
#
# F_N(x; mu, nu) with variance nu.  Deep tails are needed down to ~1e-6
# products, so the log-domain version goes through log_ndtr.

def normal_cdf(x, mean, var):
    """F_N(x; mean, var).  var = 0 degenerates to a step (0.5 at the jump)."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    out = np.where(x > mean, 1.0, np.where(x < mean, 0.0, 0.5))
    pos = var > 0
    if np.any(pos):
        z = (x - mean) / np.sqrt(np.maximum(var, np.finfo(float).tiny))
        out = np.where(pos, special.ndtr(np.where(pos, z, 0.0)), out)
    if out.ndim == 0:
        return float(out)
    return out


def log_normal_cdf(x, mean, var):
    """ln F_N(x; mean, var); -inf where the CDF is exactly 0."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    step = np.where(x > mean, 0.0, np.where(x < mean, -np.inf, math.log(0.5)))
    pos = var > 0
    if np.any(pos):
        z = (x - mean) / np.sqrt(np.maximum(var, np.finfo(float).tiny))
        step = np.where(pos, special.log_ndtr(np.where(pos, z, 0.0)), step)
    if step.ndim == 0:
        return float(step)
    return step


# --- residual recursions --------------------------------------------------

def initial_gamma(rate: float) -> float:
    """Decoding threshold of a fresh packet, 2^R - 1."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    return 2.0 ** rate - 1.0


def cc_residual_update(gamma, sinr):
    """Chase combining: copies add in SINR, so the residual shrinks linearly."""
    return np.maximum(gamma - sinr, 0.0)


def ir_residual_update(gamma, sinr):
    """Incremental redundancy: mutual information accumulates.

    gamma' = (gamma - SINR) / (1 + SINR), clamped at 0; equivalent to
    requiring prod(1 + SINR_i) >= 2^R.
    """
    return np.maximum((gamma - sinr) / (1.0 + sinr), 0.0)


# --- single-user outage / power under Rayleigh fading ----------------------

def oma_error_prob(gamma, power, pathloss, noise):
    """P{SNR < gamma} = 1 - exp(-gamma d^alpha sigma^2 / P).

    power = 0 with gamma > 0 is a certain failure (returns 1).
    """
    gamma = np.asarray(gamma, dtype=float)
    power = np.asarray(power, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = -np.expm1(-gamma * pathloss * noise / power)
    p = np.where(gamma <= 0, 0.0, np.where(power <= 0, 1.0, p))
    if p.ndim == 0:
        return float(p)
    return p


def power_for_target(gamma, eps, pathloss, noise):
    """Minimum power with failure probability exactly eps.

    P = -gamma d^alpha sigma^2 / ln(1 - eps); gamma = 0 costs nothing.
    """
    eps_arr = np.asarray(eps, dtype=float)
    if np.any(eps_arr <= 0.0) or np.any(eps_arr >= 1.0):
        raise ValueError("eps must lie strictly inside (0, 1)")
    gamma = np.asarray(gamma, dtype=float)
    p = -gamma * pathloss * noise / np.log1p(-eps_arr)
    p = np.where(gamma <= 0, 0.0, p)
    if p.ndim == 0:
        return float(p)
    return p


# --- finite-blocklength mutual information ---------------------------------

class MiStats(NamedTuple):
    """Gaussian stats of one round's accumulated-MI increment (nats)."""
    mean: float
    var: float


def mi_round_stats(sinr: float, signal_fraction: float, blocklength: int) -> MiStats:
    """Gaussian approximation of one K-symbol round's average MI.

    sinr is the effective ratio Q_sig/(Q_int + sigma^2); signal_fraction is
    Q_sig/(Q_sig + Q_int + sigma^2).  Mean ln(1+sinr), variance
    2*signal_fraction/K.
    """
    return MiStats(float(np.log1p(sinr)), 2.0 * signal_fraction / blocklength)


def fbl_round_error(rate: float, mu_prev: float, nu_prev: float, add: MiStats) -> float:
    """Conditional failure probability of this round.

    F_N(R ln2; mu_prev + add.mean, nu_prev + add.var) over
    F_N(R ln2; mu_prev, nu_prev); the denominator is 1 for a fresh packet
    (mu_prev = nu_prev = 0, threshold above zero).
    """
    x = rate * math.log(2.0)
    mu = mu_prev + add.mean
    nu = nu_prev + add.var
    log_num = log_normal_cdf(x, mu, nu)
    if mu_prev == 0.0 and nu_prev == 0.0:
        log_den = 0.0          # fresh packet: denominator convention 1
    else:
        log_den = log_normal_cdf(x, mu_prev, nu_prev)
    if log_den == -np.inf:
        return 0.0             # already decoded with certainty; nothing to fail
    return float(min(math.exp(log_num - log_den), 1.0))
