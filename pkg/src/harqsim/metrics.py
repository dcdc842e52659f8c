"""Run statistics: streaming accumulation and the derived reporting metrics.

A ledger carries only associative aggregates (counts, sums, sums of squares),
so per-trial ledgers merge in any order into the same totals.  Energy is
accounted per packet as the sum of its copies' transmit powers, kept in
linear watts and split by (distance zone, delivered flag) so that both
drop-energy conventions can be reported from one pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .core import SystemConfig, watts_to_dbm

N_ZONES = 3

# 95% two-sided normal quantile, fixed so intervals are reproducible
_Z95 = 1.959963984540054


def zone_index(distance: float, cfg: SystemConfig) -> int:
    """Equal-thirds zone of [dist_min, dist_max]; edges clip inward."""
    span = cfg.dist_max - cfg.dist_min
    if span <= 0:
        return 0
    k = int((distance - cfg.dist_min) / span * N_ZONES)
    return min(max(k, 0), N_ZONES - 1)


def zone_edges(cfg: SystemConfig) -> Tuple[float, float]:
    span = cfg.dist_max - cfg.dist_min
    return (cfg.dist_min + span / 3.0, cfg.dist_min + 2.0 * span / 3.0)


@dataclass
class MetricsLedger:
    """Aggregates for one or more simulation trials.

    Phase-scoped counters (phases_observed, outage_phases, slots_used) count
    measured phases; packet-scoped counters follow packets born after warmup.
    energy_* arrays are indexed [zone, flag] with flag 0 = dropped,
    flag 1 = delivered.
    """
    n_rounds: int = 1
    phases_observed: int = 0
    outage_phases: int = 0
    slots_used: int = 0
    arrivals: int = 0
    packets_delivered: int = 0
    packets_dropped: int = 0
    packets_pending_end: int = 0
    capacity_drops: int = 0
    fade_drops: int = 0
    deadline_drops: int = 0
    round_attempts: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    round_failures: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    energy_count: np.ndarray = field(default_factory=lambda: np.zeros((N_ZONES, 2), dtype=np.int64))
    energy_sum: np.ndarray = field(default_factory=lambda: np.zeros((N_ZONES, 2)))
    energy_sumsq: np.ndarray = field(default_factory=lambda: np.zeros((N_ZONES, 2)))

    @classmethod
    def empty(cls, n_rounds: int) -> "MetricsLedger":
        led = cls(n_rounds=n_rounds)
        led.round_attempts = np.zeros(n_rounds, dtype=np.int64)
        led.round_failures = np.zeros(n_rounds, dtype=np.int64)
        return led

    # -- accumulation ----------------------------------------------------

    def record_packet(self, zone: int, delivered: bool, energy: float) -> None:
        j = 1 if delivered else 0
        self.energy_count[zone, j] += 1
        self.energy_sum[zone, j] += energy
        self.energy_sumsq[zone, j] += energy * energy
        if delivered:
            self.packets_delivered += 1
        else:
            self.packets_dropped += 1

    def record_round(self, rnd: int, failed: bool) -> None:
        self.round_attempts[rnd] += 1
        if failed:
            self.round_failures[rnd] += 1

    def merge(self, other: "MetricsLedger") -> "MetricsLedger":
        if self.n_rounds != other.n_rounds:
            raise ValueError("cannot merge ledgers with different round counts")
        out = MetricsLedger.empty(self.n_rounds)
        for name in ("phases_observed", "outage_phases", "slots_used", "arrivals",
                     "packets_delivered", "packets_dropped", "packets_pending_end",
                     "capacity_drops", "fade_drops", "deadline_drops"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        out.round_attempts = self.round_attempts + other.round_attempts
        out.round_failures = self.round_failures + other.round_failures
        out.energy_count = self.energy_count + other.energy_count
        out.energy_sum = self.energy_sum + other.energy_sum
        out.energy_sumsq = self.energy_sumsq + other.energy_sumsq
        return out

    def total_energy(self) -> float:
        return float(self.energy_sum.sum())


# -- interval helpers ------------------------------------------------------

def wilson_interval(successes: int, trials: int, z: float = _Z95) -> Tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return (0.0, 1.0)
    p = successes / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (p + z2 / (2.0 * trials)) / denom
    half = z * math.sqrt(p * (1.0 - p) / trials + z2 / (4.0 * trials * trials)) / denom
    return (max(center - half, 0.0), min(center + half, 1.0))


def _select_moments(led: MetricsLedger, zone: Optional[int], include_dropped: bool):
    cols = slice(None) if include_dropped else slice(1, 2)
    rows = slice(None) if zone is None else slice(zone, zone + 1)
    n = int(led.energy_count[rows, cols].sum())
    s = float(led.energy_sum[rows, cols].sum())
    s2 = float(led.energy_sumsq[rows, cols].sum())
    return n, s, s2


# -- reported metrics ------------------------------------------------------

def availability_outage(led: MetricsLedger) -> float:
    """Fraction of measured phases in which the scheduler was forced to drop."""
    if led.phases_observed <= 0:
        return 0.0
    return led.outage_phases / led.phases_observed


def availability_outage_interval(led: MetricsLedger) -> Tuple[float, float]:
    return wilson_interval(led.outage_phases, led.phases_observed)


def avg_power_per_packet(led: MetricsLedger, zone: Optional[int] = None,
                         include_dropped: bool = True) -> Optional[float]:
    """Mean per-packet spent power (all copies), linear average, in dBm.

    include_dropped=True charges dropped packets' spent energy to the
    average; False averages over delivered packets only.  None when no
    packet falls in the selection.
    """
    n, s, _ = _select_moments(led, zone, include_dropped)
    if n == 0 or s <= 0.0:
        return None
    return watts_to_dbm(s / n)


def avg_power_se_db(led: MetricsLedger, zone: Optional[int] = None,
                    include_dropped: bool = True) -> Optional[float]:
    """Standard error of the linear mean, expressed in dB."""
    n, s, s2 = _select_moments(led, zone, include_dropped)
    if n == 0 or s <= 0.0:
        return None
    mean = s / n
    var = max(s2 / n - mean * mean, 0.0)
    se_lin = math.sqrt(var / n)
    return 10.0 / math.log(10.0) * se_lin / mean


def slot_utilization(led: MetricsLedger) -> float:
    """Delivered packets per used TF-block; above 1 means pairing paid off."""
    if led.slots_used <= 0:
        return 0.0
    return led.packets_delivered / led.slots_used


def slot_utilization_interval(led: MetricsLedger) -> Tuple[float, float]:
    # each slot carries at most two packets, so scale a Wilson interval on
    # delivered / (2 * slots) back to the [0, 2] utilization range
    if led.slots_used <= 0:
        return (0.0, 0.0)
    lo, hi = wilson_interval(led.packets_delivered, 2 * led.slots_used)
    return (2.0 * lo, 2.0 * hi)


def spectral_efficiency(led: MetricsLedger, rate: float) -> float:
    return slot_utilization(led) * rate


def reliability_failure(led: MetricsLedger) -> float:
    """Dropped fraction of measured arrivals (deadline + fade + capacity)."""
    resolved = led.packets_delivered + led.packets_dropped
    if resolved <= 0:
        return 0.0
    return led.packets_dropped / resolved


def round_failure_rates(led: MetricsLedger) -> np.ndarray:
    """Empirical conditional failure rate per round over transmitted copies."""
    with np.errstate(invalid="ignore", divide="ignore"):
        out = led.round_failures / np.maximum(led.round_attempts, 1)
    return np.where(led.round_attempts > 0, out, np.nan)
