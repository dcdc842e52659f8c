"""Batch front end: config parsing, sweep orchestration, result emission.

Config files are UTF-8 key=value lines with '#' comments.  The arrival rate
is configured as bn (mean arrivals per phase) and divided by n_users
internally; noise is configured in dBm.  Results go out as CSV or JSON with
12 significant digits.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

from .core import (ACCESS_NOMA, ACCESS_OMA, CSI_INSTANTANEOUS, CSI_STATISTICAL,
                   HARQ_CC, HARQ_IR, PAIRING_PC, PAIRING_RC, SystemConfig,
                   dbm_to_watts, watts_to_dbm)
from .engine import run
from .fbl import FblPlanner
from . import metrics as met
from . import targets as targets_mod


class ConfigError(ValueError):
    pass


_CHOICES = {
    "csi_mode": (CSI_STATISTICAL, CSI_INSTANTANEOUS),
    "harq_mode": (HARQ_CC, HARQ_IR),
    "access_mode": (ACCESS_OMA, ACCESS_NOMA),
    "pairing_strategy": (PAIRING_PC, PAIRING_RC),
}

_INT_KEYS = {"n_users": 1, "n_slots_per_phase": 1, "max_retx": 0,
             "blocklength": 1, "n_phases": 0, "seed": None}
_FLOAT_KEYS = {"rate", "bn", "activation_prob", "target_bler", "drop_threshold",
               "dist_min", "dist_max", "pathloss_exp", "noise_dbm", "noise_watts"}
_BOOL_KEYS = {"redraw_distances"}
_ALL_KEYS = (set(_INT_KEYS) | _FLOAT_KEYS | _BOOL_KEYS | set(_CHOICES)
             | {"warmup_phases"})


def _parse_value(key: str, raw: str):
    if key in _CHOICES:
        if raw not in _CHOICES[key]:
            raise ConfigError(f"{key}: must be one of {'/'.join(_CHOICES[key])}")
        return raw
    if key in _BOOL_KEYS:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if key in _INT_KEYS or key == "warmup_phases":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config(text: str) -> SystemConfig:
    """Build a validated SystemConfig from key=value lines."""
    overrides: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown key {key!r} on line {lineno}")
        if key in overrides:
            raise ConfigError(f"duplicate key {key!r} on line {lineno}")
        overrides[key] = _parse_value(key, raw)

    for key, lo in _INT_KEYS.items():
        if key in overrides and lo is not None and overrides[key] < lo:
            raise ConfigError(f"{key}: must be >= {lo}")
    if "bn" in overrides and "activation_prob" in overrides:
        raise ConfigError("bn and activation_prob are aliases; give only one")
    if "noise_dbm" in overrides and "noise_watts" in overrides:
        raise ConfigError("noise_dbm and noise_watts are aliases; give only one")

    fields: Dict[str, object] = {}
    for key, value in overrides.items():
        if key == "bn":
            continue
        elif key == "noise_dbm":
            fields["noise_power"] = dbm_to_watts(float(value))
        elif key == "noise_watts":
            if float(value) <= 0:
                raise ConfigError("noise_watts: must be positive")
            fields["noise_power"] = float(value)
        else:
            fields[key] = value
    if "bn" in overrides:
        n = int(fields.get("n_users", SystemConfig.n_users))
        b = float(overrides["bn"]) / n
        if not (0.0 <= b <= 1.0):
            raise ConfigError(f"bn: {overrides['bn']} implies activation {b:.4g} outside [0, 1]")
        fields["activation_prob"] = b
    try:
        return SystemConfig(**fields)
    except ValueError as exc:
        # cross-field validation; point at the keys involved
        msg = str(exc)
        if "instantaneous" in msg:
            raise ConfigError(f"csi_mode/harq_mode: {msg}") from None
        raise ConfigError(msg) from None


def format_config(cfg: SystemConfig) -> str:
    """Emit a config document that parses back to an identical SystemConfig."""
    lines = [
        f"n_users = {cfg.n_users}",
        f"n_slots_per_phase = {cfg.n_slots_per_phase}",
        f"max_retx = {cfg.max_retx}",
        f"blocklength = {cfg.blocklength}",
        f"rate = {cfg.rate:.17g}",
        f"activation_prob = {cfg.activation_prob:.17g}",
        f"target_bler = {cfg.target_bler:.17g}",
        f"drop_threshold = {cfg.drop_threshold:.17g}",
        f"dist_min = {cfg.dist_min:.17g}",
        f"dist_max = {cfg.dist_max:.17g}",
        f"pathloss_exp = {cfg.pathloss_exp:.17g}",
        f"noise_watts = {cfg.noise_power:.17g}",
        f"csi_mode = {cfg.csi_mode}",
        f"harq_mode = {cfg.harq_mode}",
        f"access_mode = {cfg.access_mode}",
        f"pairing_strategy = {cfg.pairing_strategy}",
        f"n_phases = {cfg.n_phases}",
        f"warmup_phases = {cfg.warmup_phases}",
        f"seed = {cfg.seed}",
        f"redraw_distances = {str(cfg.redraw_distances).lower()}",
    ]
    return "\n".join(lines) + "\n"


# -- sweeps -----------------------------------------------------------------

COLUMNS = ["axis_value", "access_mode", "harq_mode", "csi_mode", "strategy",
           "outage", "outage_ci_lo", "outage_ci_hi",
           "power_dbm", "power_se", "power_delivered_dbm",
           "util", "util_ci_lo", "util_ci_hi", "se",
           "zone1_dbm", "zone2_dbm", "zone3_dbm", "seed", "phases"]


def _point_config(base: SystemConfig, axis: str, value: float) -> SystemConfig:
    if axis == "bn":
        return replace(base, activation_prob=value / base.n_users)
    if axis == "rate":
        return replace(base, rate=value)
    raise ConfigError(f"axis must be bn or rate, got {axis!r}")


def _row_from_ledger(led, cfg: SystemConfig, axis_value: float) -> Dict[str, object]:
    out_lo, out_hi = met.availability_outage_interval(led)
    ut_lo, ut_hi = met.slot_utilization_interval(led)
    row = {
        "axis_value": axis_value,
        "access_mode": cfg.access_mode,
        "harq_mode": cfg.harq_mode,
        "csi_mode": cfg.csi_mode,
        "strategy": cfg.pairing_strategy,
        "outage": met.availability_outage(led),
        "outage_ci_lo": out_lo,
        "outage_ci_hi": out_hi,
        "power_dbm": met.avg_power_per_packet(led),
        "power_se": met.avg_power_se_db(led),
        "power_delivered_dbm": met.avg_power_per_packet(led, include_dropped=False),
        "util": met.slot_utilization(led),
        "util_ci_lo": ut_lo,
        "util_ci_hi": ut_hi,
        "se": met.spectral_efficiency(led, cfg.rate),
        "zone1_dbm": met.avg_power_per_packet(led, zone=0),
        "zone2_dbm": met.avg_power_per_packet(led, zone=1),
        "zone3_dbm": met.avg_power_per_packet(led, zone=2),
        "seed": cfg.seed,
        "phases": led.phases_observed,
    }
    return row


def run_point(cfg: SystemConfig, trials: int = 1, threads: int = 1,
              planner: Optional[FblPlanner] = None):
    """Run `trials` independent trials of one configuration, merged."""
    if cfg.csi_mode == CSI_INSTANTANEOUS and planner is None:
        planner = FblPlanner(cfg.max_retx, cfg.rate, cfg.blocklength,
                             cfg.target_bler, cfg.drop_threshold)
    if threads > 1 and trials > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ledgers = list(pool.map(lambda t: run(cfg, trial=t, planner=planner),
                                    range(trials)))
    else:
        ledgers = [run(cfg, trial=t, planner=planner) for t in range(trials)]
    merged = ledgers[0]
    for led in ledgers[1:]:
        merged = merged.merge(led)
    return merged


def run_sweep(base: SystemConfig, axis: str, values: Sequence[float],
              trials_per_point: int = 1, threads: int = 1,
              cache_dir: Optional[str] = None) -> List[Dict[str, object]]:
    """One row per axis value; raises the first per-point error it hits."""
    if cache_dir:
        path = os.path.join(cache_dir, "targets.txt")
        if os.path.exists(path):
            targets_mod.load_target_cache(path)
    rows = []
    for value in values:
        cfg = _point_config(base, axis, value)
        planner = None
        if cfg.csi_mode == CSI_INSTANTANEOUS:
            planner = FblPlanner(cfg.max_retx, cfg.rate, cfg.blocklength,
                                 cfg.target_bler, cfg.drop_threshold,
                                 cache_dir=cache_dir)
        led = run_point(cfg, trials_per_point, threads, planner)
        rows.append(_row_from_ledger(led, cfg, value))
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        targets_mod.save_target_cache(os.path.join(cache_dir, "targets.txt"))
    return rows


# -- emission ---------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def emit(rows: List[Dict[str, object]], fmt: str, path: str) -> None:
    """Write the result table; '-' sends it to stdout."""
    if not rows:
        raise ValueError("no results to emit")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in COLUMNS])
        payload = buf.getvalue()
    elif fmt == "json":
        records = []
        for row in rows:
            rec = {}
            for c in COLUMNS:
                v = row[c]
                rec[c] = float(f"{v:.12g}") if isinstance(v, float) else v
            records.append(rec)
        payload = json.dumps(records, indent=2) + "\n"
    else:
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    if path == "-":
        sys.stdout.write(payload)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(payload)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="harqsim",
        description="Uplink HARQ/NOMA system simulator: sweep arrival rate or "
                    "code rate and report outage, power, and utilization.")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--axis", choices=("bn", "rate"), default="bn",
                        help="sweep axis: mean arrivals per phase or code rate")
    parser.add_argument("--values",
                        help="comma-separated axis values; default: the "
                             "config's own value, single point")
    parser.add_argument("--trials", type=int, default=1,
                        help="independent trials per point")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for trials")
    parser.add_argument("--output", default="-", help="output path or - for stdout")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")
    parser.add_argument("--cache-dir", help="directory for precomputed targets/curves")
    args = parser.parse_args(argv)

    try:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        text = ""
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        cfg = parse_config(text)
        if args.values:
            values = [float(tok) for tok in args.values.split(",") if tok.strip()]
            if not values:
                raise ConfigError("--values given but empty")
        elif args.axis == "bn":
            values = [cfg.activation_prob * cfg.n_users]
        else:
            values = [cfg.rate]
    except (ConfigError, OSError, ValueError) as exc:
        print(f"harqsim: {exc}", file=sys.stderr)
        return 2

    rows = []
    failures = []
    for value in values:
        try:
            rows.extend(run_sweep(cfg, args.axis, [value], args.trials,
                                  args.threads, args.cache_dir))
        except Exception as exc:                     # noqa: BLE001
            failures.append((value, exc))
    if rows:
        try:
            emit(rows, args.format, args.output)
        except OSError as exc:
            print(f"harqsim: emit failed: {exc}", file=sys.stderr)
            return 1
    if failures:
        for value, exc in failures:
            print(f"harqsim: point {args.axis}={value:g} failed: {exc}",
                  file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
