"""Phase-by-phase simulation: arrivals, scheduling, decoding, HARQ bookkeeping.

Each uplink phase runs arrivals -> schedule -> realize_and_decode -> advance
-> record.  Randomness is drawn from counter-based substreams keyed by
(trial, phase, purpose), so runs are reproducible regardless of evaluation
order and gains drawn for scheduling are bit-identical at decode time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .core import (ACCESS_NOMA, CSI_INSTANTANEOUS, CSI_STATISTICAL, HARQ_CC,
                   PURPOSE_ARRIVAL, PURPOSE_GAIN, PURPOSE_MI, CopyRecord,
                   PacketState, RngStream, SystemConfig, make_users)
from .harq import cc_residual_update, initial_gamma, ir_residual_update, mi_round_stats
from .fbl import FblPlanner
from .metrics import MetricsLedger, zone_index
from .scheduler import ScheduleDecision, noma_schedule, oma_schedule, packet_zeta


@dataclass
class PhaseContext:
    """What the scheduler may see about the upcoming phase."""
    phase_index: int
    instantaneous_gains: Optional[np.ndarray] = None   # per user id, |h|^2


def arrivals(rng, cfg: SystemConfig, users, phase_index: int = 0) -> list:
    """Independent Bernoulli(b) arrival per user; fresh round-0 packets."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    active = gen.random(cfg.n_users) < cfg.activation_prob
    gamma0 = initial_gamma(cfg.rate)
    out = []
    for uid in np.flatnonzero(active):
        u = users[uid]
        out.append(PacketState(owner=int(uid), birth_phase=phase_index,
                               pathloss=u.pathloss, residual_snr=gamma0,
                               budget=cfg.target_bler))
    return out


@dataclass
class _Outcome:
    transmitted: bool
    success: bool
    gain: float = 0.0
    achieved_sinr: float = 0.0
    mi_increment: float = 0.0
    mi_mean: float = 0.0
    mi_var: float = 0.0
    partner: Optional[tuple] = None
    cancelled: bool = False
    eps: float = 1.0


def _decode_single_stat(packet, power, gain, cfg) -> _Outcome:
    q = power * gain / packet.pathloss
    sinr = q / cfg.noise_power
    return _Outcome(True, sinr >= packet.residual_snr, gain, achieved_sinr=sinr)


def _decode_pair_stat(pa, pb, power_a, power_b, gain_a, gain_b, cfg):
    qa = power_a * gain_a / pa.pathloss
    qb = power_b * gain_b / pb.pathloss
    za = packet_zeta(pa, cfg)
    zb = packet_zeta(pb, cfg)
    noise = cfg.noise_power
    int_a = qa / (zb * qb + noise)
    int_b = qb / (za * qa + noise)
    clean_a = qa / noise
    clean_b = qb / noise
    dec_a = int_a >= pa.residual_snr
    dec_b = int_b >= pb.residual_snr
    # one SIC pass each way: an interference-decodable packet is removed and
    # the survivor retried clean; mutual failure stays interfered
    succ_a = dec_a or (dec_b and clean_a >= pa.residual_snr)
    succ_b = dec_b or (dec_a and clean_b >= pb.residual_snr)
    if dec_a:
        out_a = _Outcome(True, True, gain_a, achieved_sinr=int_a,
                         partner=pb.packet_id)
    elif dec_b:
        out_a = _Outcome(True, succ_a, gain_a, achieved_sinr=clean_a,
                         partner=pb.packet_id, cancelled=True)
    else:
        out_a = _Outcome(True, False, gain_a, achieved_sinr=int_a,
                         partner=pb.packet_id)
    if dec_b:
        out_b = _Outcome(True, True, gain_b, achieved_sinr=int_b,
                         partner=pa.packet_id)
    elif dec_a:
        out_b = _Outcome(True, succ_b, gain_b, achieved_sinr=clean_b,
                         partner=pa.packet_id, cancelled=True)
    else:
        out_b = _Outcome(True, False, gain_b, achieved_sinr=int_b,
                         partner=pa.packet_id)
    return out_a, out_b


def _mi_outcome(packet, sinr, fraction, z_draw, cfg, gain, partner=None,
                cancelled=False) -> _Outcome:
    stats = mi_round_stats(sinr, fraction, cfg.blocklength)
    inc = stats.mean + z_draw * math.sqrt(stats.var)
    success = packet.mi_realized + inc >= cfg.rate * math.log(2.0)
    return _Outcome(True, success, gain, achieved_sinr=sinr, mi_increment=inc,
                    mi_mean=stats.mean, mi_var=stats.var, partner=partner,
                    cancelled=cancelled)


def _decode_single_fbl(packet, power, gain, cfg, z_draw) -> _Outcome:
    q = power * gain / (packet.pathloss * cfg.noise_power)
    return _mi_outcome(packet, q, q / (1.0 + q), z_draw, cfg, gain)


def _decode_pair_fbl(pa, pb, power_a, power_b, gain_a, gain_b, cfg, z_a, z_b):
    qa = power_a * gain_a / (pa.pathloss * cfg.noise_power)
    qb = power_b * gain_b / (pb.pathloss * cfg.noise_power)
    # stronger received packet is decoded first, under full interference;
    # the second sees a clean channel only if the first got through
    a_first = qa > qb or (qa == qb and pa.packet_id <= pb.packet_id)
    if not a_first:
        out_b, out_a = _decode_pair_fbl(pb, pa, power_b, power_a,
                                        gain_b, gain_a, cfg, z_b, z_a)
        return out_a, out_b
    out_a = _mi_outcome(pa, qa / (1.0 + qb), qa / (1.0 + qa + qb), z_a, cfg,
                        gain_a, partner=pb.packet_id)
    if out_a.success:
        out_b = _mi_outcome(pb, qb, qb / (1.0 + qb), z_b, cfg, gain_b,
                            partner=pa.packet_id, cancelled=True)
    else:
        out_b = _mi_outcome(pb, qb / (1.0 + qa), qb / (1.0 + qa + qb), z_b,
                            cfg, gain_b, partner=pa.packet_id)
    return out_a, out_b


def realize_and_decode(decision: ScheduleDecision, buffers_by_id: Dict[tuple, PacketState],
                       cfg: SystemConfig, gains: np.ndarray,
                       mi_normals: Optional[np.ndarray] = None) -> Dict[tuple, _Outcome]:
    """Channel realization and SIC decoding for one phase's decision."""
    outcomes: Dict[tuple, _Outcome] = {}
    fbl = cfg.csi_mode == CSI_INSTANTANEOUS
    for _slot, ids in decision.slot_assignments:
        if len(ids) == 1:
            p = buffers_by_id[ids[0]]
            power = decision.powers[ids[0]]
            g = float(gains[p.owner])
            if power <= 0.0:
                outcomes[ids[0]] = _Outcome(False, False, g)
            elif fbl:
                outcomes[ids[0]] = _decode_single_fbl(
                    p, power, g, cfg, float(mi_normals[p.owner, p.round]))
            else:
                outcomes[ids[0]] = _decode_single_stat(p, power, g, cfg)
        else:
            pa, pb = buffers_by_id[ids[0]], buffers_by_id[ids[1]]
            power_a, power_b = decision.powers[ids[0]], decision.powers[ids[1]]
            ga, gb = float(gains[pa.owner]), float(gains[pb.owner])
            if fbl:
                out_a, out_b = _decode_pair_fbl(
                    pa, pb, power_a, power_b, ga, gb, cfg,
                    float(mi_normals[pa.owner, pa.round]),
                    float(mi_normals[pb.owner, pb.round]))
            else:
                out_a, out_b = _decode_pair_stat(pa, pb, power_a, power_b,
                                                 ga, gb, cfg)
            outcomes[ids[0]] = out_a
            outcomes[ids[1]] = out_b
    for pid, out in outcomes.items():
        out.eps = decision.predicted_eps.get(pid, 1.0)
    return outcomes


def advance(buffers, outcomes: Dict[tuple, _Outcome], decision: ScheduleDecision,
            cfg: SystemConfig, phase_index: int):
    """Apply one phase's outcomes: deliveries, drops, round/state updates.

    Returns (kept, delivered, dropped) where dropped entries are
    (packet, kind) with kind in {"capacity", "fade", "deadline"}.
    """
    kept, delivered, dropped = [], [], []
    for p in buffers:
        pid = p.packet_id
        out = outcomes.get(pid)
        if out is not None and out.transmitted:
            power = decision.powers.get(pid, 0.0)
            p.copies.append(CopyRecord(
                phase_index=phase_index, transmit_power=power,
                channel_gain=out.gain, achieved_sinr=out.achieved_sinr,
                partner_packet=out.partner,
                interference_cancelled=out.cancelled))
            if out.partner is not None and cfg.harq_mode == HARQ_CC:
                p.past_partners.add(out.partner)
            if out.success:
                p.status = "delivered"
                delivered.append(p)
                continue
            # failed transmission: fold the round into the HARQ state
            if cfg.csi_mode == CSI_STATISTICAL:
                if cfg.harq_mode == HARQ_CC:
                    p.residual_snr = cc_residual_update(p.residual_snr,
                                                        out.achieved_sinr)
                else:
                    p.residual_snr = ir_residual_update(p.residual_snr,
                                                        out.achieved_sinr)
                if out.eps > 0.0:
                    p.budget = p.budget / out.eps
            else:
                p.mi_mean += out.mi_mean
                p.mi_var += out.mi_var
                p.mi_realized += out.mi_increment
            if p.round >= cfg.max_retx:
                p.status = "dropped"
                dropped.append((p, "deadline"))
            else:
                p.round += 1
                kept.append(p)
        elif pid in decision.dropped:
            p.status = "dropped"
            dropped.append((p, "capacity"))
        elif pid in decision.fade_dropped:
            p.status = "dropped"
            dropped.append((p, "fade"))
        elif p.round >= cfg.max_retx:
            # a postponed packet in its last round has no phase left
            p.status = "dropped"
            dropped.append((p, "deadline"))
        else:
            p.round += 1
            kept.append(p)
    return kept, delivered, dropped


def run(cfg: SystemConfig, trial: int = 0, planner: Optional[FblPlanner] = None,
        phase_hook=None) -> MetricsLedger:
    """One simulated trial; returns the aggregated ledger.

    Warmup phases run the full dynamics but are excluded from phase counters,
    and packets born during warmup never enter packet statistics.  phase_hook,
    if given, is called as phase_hook(phase_index, decision, outcomes, buffers)
    after each decode (observability for tests and debugging).
    """
    users = make_users(cfg, trial)
    if cfg.csi_mode == CSI_INSTANTANEOUS and planner is None:
        planner = FblPlanner(cfg.max_retx, cfg.rate, cfg.blocklength,
                             cfg.target_bler, cfg.drop_threshold)
    ledger = MetricsLedger.empty(cfg.max_retx + 1)
    buffers: list = []
    pair_cache: dict = {}
    noma = cfg.access_mode == ACCESS_NOMA
    fbl = cfg.csi_mode == CSI_INSTANTANEOUS
    warmup = cfg.warmup_phases
    total = warmup + cfg.n_phases

    for phase in range(total):
        new = arrivals(RngStream(cfg.seed, (trial, phase, PURPOSE_ARRIVAL)),
                       cfg, users, phase)
        buffers.extend(new)
        gains = RngStream(cfg.seed, (trial, phase, PURPOSE_GAIN)).generator() \
            .standard_exponential(cfg.n_users)
        ctx = PhaseContext(phase, gains if fbl else None)
        if noma:
            decision = noma_schedule(buffers, cfg, ctx, planner, pair_cache)
        else:
            decision = oma_schedule(buffers, cfg, ctx, planner)
        mi_normals = None
        if fbl:
            mi_normals = RngStream(cfg.seed, (trial, phase, PURPOSE_MI)) \
                .generator().standard_normal((cfg.n_users, cfg.max_retx + 1))
        by_id = {p.packet_id: p for p in buffers}
        outcomes = realize_and_decode(decision, by_id, cfg, gains, mi_normals)
        if phase_hook is not None:
            phase_hook(phase, decision, outcomes, buffers)

        measured_phase = phase >= warmup
        if measured_phase:
            ledger.phases_observed += 1
            ledger.slots_used += len(decision.slot_assignments)
            ledger.arrivals += len(new)
            if decision.dropped:
                ledger.outage_phases += 1
            for pid, out in outcomes.items():
                if out.transmitted and pid[1] >= warmup:
                    ledger.record_round(by_id[pid].round, not out.success)

        buffers, done, gone = advance(buffers, outcomes, decision, cfg, phase)
        for p in done:
            if p.birth_phase >= warmup:
                energy = sum(c.transmit_power for c in p.copies)
                ledger.record_packet(zone_index(users[p.owner].distance, cfg),
                                     True, energy)
        for p, kind in gone:
            if p.birth_phase >= warmup:
                energy = sum(c.transmit_power for c in p.copies)
                ledger.record_packet(zone_index(users[p.owner].distance, cfg),
                                     False, energy)
                if kind == "capacity":
                    ledger.capacity_drops += 1
                elif kind == "fade":
                    ledger.fade_drops += 1
                else:
                    ledger.deadline_drops += 1

    ledger.packets_pending_end = sum(1 for p in buffers if p.birth_phase >= warmup)
    return ledger
