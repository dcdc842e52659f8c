"""Shared domain types, geometry, and random-variate plumbing.

Everything downstream works in linear units: watts for powers and noise,
plain ratios for gains and SINRs.  dBm shows up only at the I/O boundary
(config parsing, report emission).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

# Fixed purpose tags for RNG substreams.  Small stable ints so stream ids
# survive serialization and process boundaries.
PURPOSE_DISTANCE = 0
PURPOSE_ARRIVAL = 1
PURPOSE_GAIN = 2
PURPOSE_MI = 3

CSI_STATISTICAL = "statistical"
CSI_INSTANTANEOUS = "instantaneous"
HARQ_CC = "chase_combining"
HARQ_IR = "incremental_redundancy"
ACCESS_OMA = "oma"
ACCESS_NOMA = "noma"
PAIRING_PC = "power_conservative"
PAIRING_RC = "resource_conservative"


def dbm_to_watts(x_dbm: float) -> float:
    return 10.0 ** ((x_dbm - 30.0) / 10.0)


def watts_to_dbm(x_watts: float) -> float:
    if x_watts <= 0:
        raise ValueError("dBm undefined for nonpositive power")
    return 10.0 * math.log10(x_watts) + 30.0


@dataclass(frozen=True)
class SystemConfig:
    n_users: int = 40                 # N
    n_slots_per_phase: int = 10       # W, TF-blocks per uplink phase
    max_retx: int = 2                 # L; a packet lives through rounds 0..L
    blocklength: int = 50             # K, symbols per TF-block
    rate: float = 1.0                 # R, bits/symbol
    activation_prob: float = 0.2      # b
    target_bler: float = 1e-5         # eps_tar
    drop_threshold: float = 1e-6      # eps_drop (deep-fade drop, instantaneous CSI)
    dist_min: float = 20.0            # meters
    dist_max: float = 120.0
    pathloss_exp: float = 2.0         # alpha
    noise_power: float = dbm_to_watts(-129.1)   # sigma^2, linear watts
    csi_mode: str = CSI_STATISTICAL
    harq_mode: str = HARQ_CC
    access_mode: str = ACCESS_OMA
    pairing_strategy: str = PAIRING_PC
    n_phases: int = 10000
    warmup_phases: int = -1           # -1 resolves to 10*(L+1)
    seed: int = 1
    redraw_distances: bool = True     # fresh user distances per trial

    def __post_init__(self):
        if self.warmup_phases < 0:
            object.__setattr__(self, "warmup_phases", 10 * (self.max_retx + 1))
        self.validate()

    @property
    def bits_per_packet(self) -> float:
        return self.rate * self.blocklength   # B = R*K, derived

    def validate(self):
        if not (0.0 < self.drop_threshold < self.target_bler < 1.0):
            raise ValueError("need 0 < drop_threshold < target_bler < 1")
        if not (self.dist_min < self.dist_max):
            raise ValueError("need dist_min < dist_max")
        if self.max_retx < 0 or self.n_slots_per_phase < 1 or self.blocklength < 1:
            raise ValueError("need max_retx >= 0, n_slots_per_phase >= 1, blocklength >= 1")
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if not (0.0 <= self.activation_prob <= 1.0):
            raise ValueError("activation_prob must lie in [0, 1]")
        if self.noise_power <= 0:
            raise ValueError("noise_power must be positive (linear watts)")
        if self.csi_mode not in (CSI_STATISTICAL, CSI_INSTANTANEOUS):
            raise ValueError("csi_mode must be statistical or instantaneous")
        if self.harq_mode not in (HARQ_CC, HARQ_IR):
            raise ValueError("harq_mode must be chase_combining or incremental_redundancy")
        if self.access_mode not in (ACCESS_OMA, ACCESS_NOMA):
            raise ValueError("access_mode must be oma or noma")
        if self.pairing_strategy not in (PAIRING_PC, PAIRING_RC):
            raise ValueError("pairing_strategy must be power_conservative or resource_conservative")
        if self.csi_mode == CSI_INSTANTANEOUS and self.harq_mode != HARQ_IR:
            raise ValueError("instantaneous CSI requires incremental_redundancy")
        if self.harq_mode == HARQ_IR and self.max_retx > 2:
            # target recursion and power curves cover at most two retransmissions
            raise ValueError("incremental_redundancy supports max_retx <= 2")
        if self.n_phases < 0 or self.warmup_phases < 0:
            raise ValueError("phase counts must be nonnegative")


@dataclass(frozen=True)
class UserEquipment:
    id: int
    distance: float       # d_j, meters
    pathloss: float       # d_j^alpha, precomputed


@dataclass
class CopyRecord:
    phase_index: int
    transmit_power: float          # watts
    channel_gain: float            # |h|^2
    achieved_sinr: float           # post-SIC SINR actually credited
    partner_packet: Optional[tuple] = None
    interference_cancelled: bool = False


@dataclass
class PacketState:
    """One uplink packet and its HARQ history.

    residual_snr carries the chase-combining / incremental-redundancy
    residual (statistical CSI); mi_mean / mi_var / mi_realized carry the
    accumulated mutual-information bookkeeping (instantaneous CSI).
    budget is the remaining error allowance eps_tar / prod(earlier targets).
    """
    owner: int
    birth_phase: int
    pathloss: float = 1.0
    round: int = 0
    residual_snr: float = 0.0
    budget: float = 1.0
    mi_mean: float = 0.0
    mi_var: float = 0.0
    mi_realized: float = 0.0
    copies: list = field(default_factory=list)
    past_partners: set = field(default_factory=set)
    status: str = "pending"

    @property
    def packet_id(self) -> tuple:
        # one arrival per user per phase, so this is unique
        return (self.owner, self.birth_phase)


@dataclass(frozen=True)
class RngStream:
    """Counter-based substream: (seed, stream_id) fully determines the draws.

    Streams are independent of evaluation order and thread count because each
    one seeds its own generator from the id tuple.
    """
    seed: int
    stream_id: tuple = ()

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence((self.seed, *self.stream_id)))


def _as_generator(rng: Union[RngStream, np.random.Generator]) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def draw_distance(rng, cfg: SystemConfig) -> float:
    """One user distance, uniform on [dist_min, dist_max]."""
    gen = _as_generator(rng)
    if cfg.dist_max == cfg.dist_min:
        return float(cfg.dist_min)
    return float(gen.uniform(cfg.dist_min, cfg.dist_max))


def draw_channel_gain(rng, size=None):
    """Block-fading power gain |h|^2 ~ Exp(1)."""
    gen = _as_generator(rng)
    out = gen.standard_exponential(size)
    return float(out) if size is None else out


def received_snr(power, gain, pathloss, noise):
    """P * |h|^2 / (d^alpha * sigma^2); array-friendly."""
    return power * gain / (pathloss * noise)


def make_users(cfg: SystemConfig, trial: int = 0) -> list:
    """Draw the user population for one trial (distances fixed for the run)."""
    tag = trial if cfg.redraw_distances else 0
    users = []
    for uid in range(cfg.n_users):
        stream = RngStream(cfg.seed, (tag, PURPOSE_DISTANCE, uid))
        d = draw_distance(stream, cfg)
        users.append(UserEquipment(id=uid, distance=d, pathloss=d ** cfg.pathloss_exp))
    return users
