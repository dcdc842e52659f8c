"""Per-phase transmit decisions: who sends, at what power, who shares a slot.

The scheduler ranks packets by what postponing them would cost in expected
power, fills the W uplink slots critical-first, and (under NOMA) pairs
packets through an exact minimum-cost matching over the eligible-pair graph.
All powers are linear watts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Set, Tuple

import numpy as np
import networkx as nx

from .core import (CSI_STATISTICAL, HARQ_CC, PAIRING_PC, PAIRING_RC,
                   PacketState, SystemConfig)
from .harq import fbl_round_error, mi_round_stats, power_for_target
from .noma import fbl_joint_power_min, interference_reduction, joint_power_min, solve_pairs_batch
from .targets import (cc_optimal_targets, expected_oma_power, ir_initial_target,
                      ir_next_target)


@dataclass
class ScheduleDecision:
    """One phase's outcome: slot layout, transmit powers, and packet fates.

    slot_assignments holds (slot index, ids) with ids a 1-tuple (dedicated)
    or 2-tuple (shared).  dropped contains capacity-forced drops only; deep
    fades at the last round land in fade_dropped.
    """
    slot_assignments: list = field(default_factory=list)
    powers: Dict[tuple, float] = field(default_factory=dict)
    predicted_eps: Dict[tuple, float] = field(default_factory=dict)
    postponed: Set[tuple] = field(default_factory=set)
    dropped: Set[tuple] = field(default_factory=set)
    fade_dropped: Set[tuple] = field(default_factory=set)


def classify(buffers, cfg: SystemConfig) -> Tuple[list, list]:
    """Split pending packets into (critical, noncritical) by round."""
    critical = [p for p in buffers if p.round >= cfg.max_retx]
    noncritical = [p for p in buffers if p.round < cfg.max_retx]
    return critical, noncritical


def packet_zeta(packet: PacketState, cfg: SystemConfig) -> float:
    """Partner-interference reduction from this packet's stored copies."""
    if cfg.harq_mode != HARQ_CC:
        return 1.0
    prior = [c.achieved_sinr for c in packet.copies if c.transmit_power > 0.0]
    return interference_reduction(prior)


def current_round_target(packet: PacketState, cfg: SystemConfig) -> float:
    """Conditional error target for the packet's current round (statistical).

    0 means the packet needs no power (already decodable); 1 means the
    remaining budget exceeds one, so any outcome keeps the contract.
    """
    if packet.residual_snr <= 0.0:
        return 0.0
    if packet.budget >= 1.0:
        return 1.0
    stages = cfg.max_retx - packet.round + 1
    if stages <= 1:
        return packet.budget
    if cfg.harq_mode == HARQ_CC:
        return float(cc_optimal_targets(stages - 1, packet.budget).eps[0])
    if stages == 2:
        return float(ir_next_target(packet.residual_snr, packet.budget))
    return float(ir_initial_target(cfg.rate, packet.budget))


# -- per-packet plans --------------------------------------------------------

@dataclass
class _Plan:
    packet: PacketState
    power: float = 0.0            # watts on a dedicated slot
    eps: float = 1.0              # conditional round error at that power
    cost: float = 0.0             # postpone cost, watts
    zeta: float = 1.0
    forced_postpone: bool = False
    fade_drop: bool = False


def _plan_statistical(packet: PacketState, cfg: SystemConfig) -> _Plan:
    plan = _Plan(packet, zeta=packet_zeta(packet, cfg))
    eps = current_round_target(packet, cfg)
    if eps <= 0.0 or eps >= 1.0:
        # decoded residual or exhausted constraint: zero power either way
        plan.forced_postpone = True
        plan.eps = 1.0 if eps >= 1.0 else 0.0
        return plan
    plan.power = power_for_target(packet.residual_snr, eps,
                                  packet.pathloss, cfg.noise_power)
    plan.eps = eps
    if packet.round < cfg.max_retx:
        plan.cost = max(expected_oma_power(packet, cfg, skip_current=True)
                        - expected_oma_power(packet, cfg, skip_current=False), 0.0)
    return plan


def _fbl_round_eps(power: float, gain: float, packet: PacketState,
                   cfg: SystemConfig) -> float:
    if power <= 0.0:
        return 1.0
    q = power * gain / (packet.pathloss * cfg.noise_power)
    stats = mi_round_stats(q, q / (1.0 + q), cfg.blocklength)
    return fbl_round_error(cfg.rate, packet.mi_mean, packet.mi_var, stats)


def _plan_instantaneous(packet: PacketState, cfg: SystemConfig,
                        gain: float, planner) -> _Plan:
    plan = _Plan(packet)
    scale = packet.pathloss * cfg.noise_power
    remaining = cfg.max_retx - packet.round
    if remaining == 0:
        if gain < planner.drop_gain:
            plan.fade_drop = True
            return plan
        rho = float(planner.last_rho(packet.mi_mean, packet.mi_var))
        plan.power = rho / gain * scale
    elif remaining == 1:
        power, value, skip = planner.mid_decision(gain, packet.mi_mean, packet.mi_var)
        plan.power = float(power) * scale
        plan.cost = max(float(skip) - float(value), 0.0) * scale
    elif remaining == 2:
        plan.power = float(planner.round0_power(gain)) * scale
        plan.cost = float(planner.round0_postpone_cost(gain)) * scale
    else:
        raise ValueError("power planning covers at most two retransmissions")
    if plan.power <= 0.0:
        plan.forced_postpone = True
        plan.power = 0.0
    else:
        plan.eps = _fbl_round_eps(plan.power, gain, packet, cfg)
    return plan


def _make_plans(buffers, cfg: SystemConfig, phase_ctx, planner) -> Dict[tuple, _Plan]:
    if cfg.csi_mode == CSI_STATISTICAL:
        return {p.packet_id: _plan_statistical(p, cfg) for p in buffers}
    return _make_plans_instantaneous(buffers, cfg, phase_ctx, planner)


def _make_plans_instantaneous(buffers, cfg, phase_ctx, planner) -> Dict[tuple, _Plan]:
    """Same decisions as _plan_instantaneous, grouped per remaining-round
    count so the curve/plan evaluations run vectorized once per phase."""
    plans: Dict[tuple, _Plan] = {}
    groups: Dict[int, list] = {}
    for p in buffers:
        groups.setdefault(cfg.max_retx - p.round, []).append(p)
    for remaining, group in groups.items():
        gains = np.asarray([float(phase_ctx.instantaneous_gains[p.owner])
                            for p in group])
        scales = np.asarray([p.pathloss * cfg.noise_power for p in group])
        costs = np.zeros(len(group))
        if remaining == 0:
            mus = np.asarray([p.mi_mean for p in group])
            nus = np.asarray([p.mi_var for p in group])
            rho = np.atleast_1d(planner.last_rho(mus, nus))
            powers = rho / gains * scales
            fade = gains < planner.drop_gain
        elif remaining == 1:
            mus = np.asarray([p.mi_mean for p in group])
            nus = np.asarray([p.mi_var for p in group])
            power, value, skip = planner.mid_decision(gains, mus, nus)
            powers = np.atleast_1d(power) * scales
            costs = np.maximum(np.atleast_1d(skip) - np.atleast_1d(value), 0.0) * scales
            fade = np.zeros(len(group), dtype=bool)
        elif remaining == 2:
            powers = np.atleast_1d(planner.round0_power(gains)) * scales
            costs = np.atleast_1d(planner.round0_postpone_cost(gains)) * scales
            fade = np.zeros(len(group), dtype=bool)
        else:
            raise ValueError("power planning covers at most two retransmissions")
        for p, g, power, cost, dead in zip(group, gains, powers, costs, fade):
            plan = _Plan(p, cost=float(cost))
            if dead:
                plan.fade_drop = True
            elif power <= 0.0:
                plan.forced_postpone = True
            else:
                plan.power = float(power)
                plan.eps = _fbl_round_eps(plan.power, float(g), p, cfg)
            plans[p.packet_id] = plan
    return plans


def postpone_cost(packet: PacketState, cfg: SystemConfig,
                  phase_ctx=None, planner=None) -> float:
    """Expected extra power if this noncritical packet sits out the phase."""
    if packet.round >= cfg.max_retx:
        raise ValueError("postponing the last round is a drop, not a postpone")
    if cfg.csi_mode == CSI_STATISTICAL:
        return _plan_statistical(packet, cfg).cost
    gain = float(phase_ctx.instantaneous_gains[packet.owner])
    return _plan_instantaneous(packet, cfg, gain, planner).cost


# -- ranking helpers ---------------------------------------------------------

def _keep_order_by_power(packets, plans):
    # cheapest first; ties keep the older packet, then the lower user id
    return sorted(packets, key=lambda p: (plans[p.packet_id].power,
                                          p.birth_phase, p.owner))


def _keep_order_by_cost(packets, plans):
    # most expensive to postpone first; ties older first, lower id
    return sorted(packets, key=lambda p: (-plans[p.packet_id].cost,
                                          p.birth_phase, p.owner))


def _split_live(buffers, cfg, plans):
    fade, forced, live = set(), set(), []
    for p in buffers:
        plan = plans[p.packet_id]
        if plan.fade_drop:
            fade.add(p.packet_id)
        elif plan.forced_postpone:
            forced.add(p.packet_id)
        else:
            live.append(p)
    return fade, forced, live


def oma_schedule(buffers, cfg: SystemConfig, phase_ctx=None,
                 planner=None) -> ScheduleDecision:
    """Dedicated-slot scheduling: critical first, then highest postpone cost."""
    plans = _make_plans(buffers, cfg, phase_ctx, planner)
    fade, forced, live = _split_live(buffers, cfg, plans)
    critical, noncritical = classify(live, cfg)
    w = cfg.n_slots_per_phase

    decision = ScheduleDecision(fade_dropped=fade, postponed=set(forced))
    if len(critical) > w:
        ranked = _keep_order_by_power(critical, plans)
        scheduled = ranked[:w]
        decision.dropped.update(p.packet_id for p in ranked[w:])
        decision.postponed.update(p.packet_id for p in noncritical)
    else:
        room = w - len(critical)
        ranked = _keep_order_by_cost(noncritical, plans)
        scheduled = critical + ranked[:room]
        decision.postponed.update(p.packet_id for p in ranked[room:])

    for slot, p in enumerate(sorted(scheduled, key=lambda p: (p.birth_phase, p.owner))):
        pid = p.packet_id
        decision.slot_assignments.append((slot, (pid,)))
        decision.powers[pid] = plans[pid].power
        decision.predicted_eps[pid] = plans[pid].eps
    return decision


# -- NOMA pairing ------------------------------------------------------------

def noma_pair_count(n_transmit: int, n_slots: int, strategy: str) -> int:
    """How many shared slots to form for a transmit set of the given size."""
    if strategy == PAIRING_PC:
        return min(max(n_transmit - n_slots, 0), n_slots)
    if strategy == PAIRING_RC:
        return min(n_transmit // 2, n_slots)
    raise ValueError("unknown pairing strategy")


def _eligible(a: PacketState, b: PacketState, cfg: SystemConfig) -> bool:
    if a.owner == b.owner:
        return False
    if cfg.harq_mode == HARQ_CC and (
            b.packet_id in a.past_partners or a.packet_id in b.past_partners):
        return False
    return True


def pair_cost(a: PacketState, b: PacketState, cfg: SystemConfig,
              phase_ctx=None, planner=None) -> Optional[float]:
    """Extra power of sharing one slot vs two dedicated ones; None if ineligible."""
    if not _eligible(a, b, cfg):
        return None
    if cfg.csi_mode == CSI_STATISTICAL:
        ta = current_round_target(a, cfg)
        tb = current_round_target(b, cfg)
        if (a.residual_snr > 0 and ta >= 1.0) or (b.residual_snr > 0 and tb >= 1.0):
            return 0.0          # a free-ride side transmits nothing
        sol = joint_power_min(a.residual_snr, b.residual_snr, ta, tb,
                              a.pathloss, b.pathloss,
                              packet_zeta(a, cfg), packet_zeta(b, cfg),
                              cfg.noise_power)
    else:
        plan_a = _plan_instantaneous(a, cfg, float(phase_ctx.instantaneous_gains[a.owner]), planner)
        plan_b = _plan_instantaneous(b, cfg, float(phase_ctx.instantaneous_gains[b.owner]), planner)
        sol = _fbl_pair_solution(a, b, plan_a, plan_b, cfg, phase_ctx)
    return sol.extra_cost if sol.feasible else None


def _fbl_pair_solution(a, b, plan_a, plan_b, cfg, phase_ctx):
    ga = float(phase_ctx.instantaneous_gains[a.owner])
    gb = float(phase_ctx.instantaneous_gains[b.owner])
    return fbl_joint_power_min(
        (ga, a.pathloss, a.mi_mean, a.mi_var),
        (gb, b.pathloss, b.mi_mean, b.mi_var),
        (plan_a.eps, plan_b.eps), cfg.rate, cfg.blocklength, cfg.noise_power,
        oma_powers=(plan_a.power, plan_b.power))


def _pair_solutions(transmit, cfg, phase_ctx, planner, plans, cache):
    """Costs and solved allocations for every eligible pair in the set.

    Statistical solves are batched; results are memoized in `cache` keyed by
    the full solver input, which repeats often because fresh packets share
    (residual, target, zeta) and users keep their pathloss.
    """
    costs, solutions = {}, {}
    pending = []
    for i, a in enumerate(transmit):
        for b in transmit[i + 1:]:
            if not _eligible(a, b, cfg):
                continue
            first, second = (a, b) if a.packet_id <= b.packet_id else (b, a)
            key = (first.packet_id, second.packet_id)
            if cfg.csi_mode != CSI_STATISTICAL:
                pa = plans[first.packet_id]
                pb = plans[second.packet_id]
                sol = _fbl_pair_solution(first, second, pa, pb, cfg, phase_ctx)
                if sol.feasible:
                    costs[key] = sol.extra_cost
                    solutions[key] = sol
                continue
            pending.append((key, first, second))

    if pending and cache is None:
        cache = {}
    solved = []
    for key, first, second in pending:
        pa, pb = plans[first.packet_id], plans[second.packet_id]
        ckey = (first.residual_snr, pa.eps, first.pathloss, pa.zeta,
                second.residual_snr, pb.eps, second.pathloss, pb.zeta)
        hit = cache.get(ckey)
        if hit is None:
            solved.append((key, ckey, first, second, pa, pb))
        else:
            if hit.feasible:
                costs[key] = hit.extra_cost
                solutions[key] = hit
    if solved:
        from .noma import PairPowerSolution
        arr = lambda f: np.asarray([f(row) for row in solved])
        p_a, p_b, e_a, e_b, feas, extra = solve_pairs_batch(
            arr(lambda r: r[2].residual_snr), arr(lambda r: r[3].residual_snr),
            arr(lambda r: r[4].eps), arr(lambda r: r[5].eps),
            arr(lambda r: r[2].pathloss), arr(lambda r: r[3].pathloss),
            arr(lambda r: r[4].zeta), arr(lambda r: r[5].zeta),
            cfg.noise_power)
        for j, (key, ckey, *_rest) in enumerate(solved):
            sol = PairPowerSolution(float(p_a[j]), float(p_b[j]),
                                    float(e_a[j]), float(e_b[j]),
                                    bool(feas[j]), float(extra[j]))
            cache[ckey] = sol
            if sol.feasible:
                costs[key] = sol.extra_cost
                solutions[key] = sol
    return costs, solutions


def select_pairs(costs: Dict[tuple, float], q: int) -> Tuple[Set[tuple], int]:
    """Exact minimum-cost matching of q disjoint pairs; (pairs, shortfall).

    Reduction: pad with (n - 2q) interchangeable zero-cost slack vertices
    adjacent to every packet; a minimum-weight maximum-cardinality matching
    of the padded graph then pairs exactly q packets whenever the
    eligibility graph allows it, and as many as possible otherwise.
    """
    if q <= 0:
        return set(), max(q, 0)
    normalized = {}
    for (u, v), c in costs.items():
        key = (u, v) if u <= v else (v, u)
        prev = normalized.get(key)
        normalized[key] = c if prev is None else min(prev, c)
    if not normalized:
        return set(), q
    nodes = sorted({u for pair in normalized for u in pair})
    n = len(nodes)
    q_eff = min(q, n // 2)
    graph = nx.Graph()
    graph.add_nodes_from(nodes)
    for (u, v) in sorted(normalized):
        graph.add_edge(u, v, weight=float(normalized[(u, v)]))
    slack_nodes = set()
    for i in range(n - 2 * q_eff):
        slack = ("__slack__", i)
        slack_nodes.add(slack)
        for u in nodes:
            graph.add_edge(slack, u, weight=0.0)
    matching = nx.min_weight_matching(graph)
    pairs = set()
    for u, v in matching:
        if u in slack_nodes or v in slack_nodes:
            continue
        pairs.add((u, v) if u <= v else (v, u))
    return pairs, q - len(pairs)


def noma_schedule(buffers, cfg: SystemConfig, phase_ctx=None, planner=None,
                  pair_cache: Optional[dict] = None) -> ScheduleDecision:
    """Shared-slot scheduling: 2W packet capacity, q pairs, rest dedicated."""
    plans = _make_plans(buffers, cfg, phase_ctx, planner)
    fade, forced, live = _split_live(buffers, cfg, plans)
    critical, noncritical = classify(live, cfg)
    w = cfg.n_slots_per_phase
    cap = 2 * w

    decision = ScheduleDecision(fade_dropped=fade, postponed=set(forced))
    if len(critical) > cap:
        ranked = _keep_order_by_power(critical, plans)
        transmit = ranked[:cap]
        decision.dropped.update(p.packet_id for p in ranked[cap:])
        decision.postponed.update(p.packet_id for p in noncritical)
    else:
        room = cap - len(critical)
        ranked = _keep_order_by_cost(noncritical, plans)
        transmit = critical + ranked[:room]
        decision.postponed.update(p.packet_id for p in ranked[room:])

    q = noma_pair_count(len(transmit), w, cfg.pairing_strategy)
    pairs: Set[tuple] = set()
    solutions = {}
    if q > 0:
        costs, solutions = _pair_solutions(transmit, cfg, phase_ctx, planner,
                                           plans, pair_cache)
        pairs, _ = select_pairs(costs, q)

    paired_ids = {pid for pair in pairs for pid in pair}
    singles = [p for p in transmit if p.packet_id not in paired_ids]

    # a matching shortfall can leave more dedicated packets than slots:
    # shed noncritical singles first (cheapest postpone), then the most
    # power-hungry critical singles
    excess = len(pairs) + len(singles) - w
    if excess > 0:
        nc = [p for p in singles if p.round < cfg.max_retx]
        for p in reversed(_keep_order_by_cost(nc, plans)):
            if excess == 0:
                break
            decision.postponed.add(p.packet_id)
            singles.remove(p)
            excess -= 1
        if excess > 0:
            cr = [p for p in singles if p.round >= cfg.max_retx]
            for p in reversed(_keep_order_by_power(cr, plans)):
                if excess == 0:
                    break
                decision.dropped.add(p.packet_id)
                singles.remove(p)
                excess -= 1

    slot = 0
    for key in sorted(pairs):
        sol = solutions[key]
        decision.slot_assignments.append((slot, key))
        decision.powers[key[0]] = sol.power_a
        decision.powers[key[1]] = sol.power_b
        decision.predicted_eps[key[0]] = sol.predicted_eps_a
        decision.predicted_eps[key[1]] = sol.predicted_eps_b
        slot += 1
    for p in sorted(singles, key=lambda p: (p.birth_phase, p.owner)):
        pid = p.packet_id
        decision.slot_assignments.append((slot, (pid,)))
        decision.powers[pid] = plans[pid].power
        decision.predicted_eps[pid] = plans[pid].eps
        slot += 1
    return decision
