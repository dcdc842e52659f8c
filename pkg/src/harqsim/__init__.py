"""Uplink retransmission simulator: HARQ power control over shared slots."""
from .core import (
    SystemConfig, UserEquipment, PacketState, CopyRecord, RngStream,
    make_users, received_snr, dbm_to_watts, watts_to_dbm,
)
from .harq import (
    initial_gamma, cc_residual_update, ir_residual_update,
    oma_error_prob, power_for_target, mi_round_stats, fbl_round_error, MiStats,
)
from .targets import (
    TargetSchedule, cc_expected_power_factor, cc_optimal_targets,
    ir_psi_last, ir_next_target, ir_initial_target, expected_oma_power,
    save_target_cache, load_target_cache,
)
from .noma import (
    PairGeometry, PairPowerSolution, pair_error_closed_form,
    interference_reduction, joint_power_min, fbl_pair_errors, fbl_joint_power_min,
)
from .fbl import (
    PowerCurve, FblPlanner, last_round_power, penultimate_power,
    build_power_curve, lookup_power, save_power_curve, load_power_curve,
)
from .scheduler import (
    ScheduleDecision, classify, current_round_target, postpone_cost,
    oma_schedule, noma_pair_count, pair_cost, select_pairs, noma_schedule,
)
from .engine import PhaseContext, arrivals, realize_and_decode, advance, run
from .metrics import (
    MetricsLedger, availability_outage, avg_power_per_packet, slot_utilization,
    spectral_efficiency, wilson_interval, zone_index,
)

__all__ = [
    "SystemConfig", "UserEquipment", "PacketState", "CopyRecord", "RngStream",
    "make_users", "received_snr", "dbm_to_watts", "watts_to_dbm",
    "initial_gamma", "cc_residual_update", "ir_residual_update",
    "oma_error_prob", "power_for_target", "mi_round_stats", "fbl_round_error",
    "MiStats",
    "TargetSchedule", "cc_expected_power_factor", "cc_optimal_targets",
    "ir_psi_last", "ir_next_target", "ir_initial_target", "expected_oma_power",
    "save_target_cache", "load_target_cache",
    "PairGeometry", "PairPowerSolution", "pair_error_closed_form",
    "interference_reduction", "joint_power_min", "fbl_pair_errors",
    "fbl_joint_power_min",
    "PowerCurve", "FblPlanner", "last_round_power", "penultimate_power",
    "build_power_curve", "lookup_power", "save_power_curve", "load_power_curve",
    "ScheduleDecision", "classify", "current_round_target", "postpone_cost",
    "oma_schedule", "noma_pair_count", "pair_cost", "select_pairs", "noma_schedule",
    "PhaseContext", "arrivals", "realize_and_decode", "advance", "run",
    "MetricsLedger", "availability_outage", "avg_power_per_packet",
    "slot_utilization", "spectral_efficiency", "wilson_interval", "zone_index",
]

__version__ = "0.1.0"
