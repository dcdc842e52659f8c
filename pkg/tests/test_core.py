import math
from concurrent.futures import ThreadPoolExecutor
from types import SimpleNamespace

import numpy as np
import pytest

from harqsim import SystemConfig, RngStream, make_users, received_snr
from harqsim.core import (PURPOSE_DISTANCE, dbm_to_watts, watts_to_dbm,
                          draw_channel_gain, draw_distance)


def test_dbm_watts_conversions():
    assert dbm_to_watts(0.0) == pytest.approx(1e-3, rel=1e-15)
    assert dbm_to_watts(30.0) == pytest.approx(1.0, rel=1e-15)
    assert dbm_to_watts(-129.1) == pytest.approx(1.2302687708123818e-16, rel=1e-12)
    for x in (-129.1, -40.0, 0.0, 17.5):
        assert watts_to_dbm(dbm_to_watts(x)) == pytest.approx(x, abs=1e-12)


def test_config_defaults():
    cfg = SystemConfig()
    assert cfg.n_users == 40
    assert cfg.n_slots_per_phase == 10
    assert cfg.max_retx == 2
    assert cfg.blocklength == 50
    assert cfg.rate == 1.0
    assert cfg.activation_prob == 0.2
    assert cfg.target_bler == 1e-5
    assert cfg.drop_threshold == 1e-6
    assert (cfg.dist_min, cfg.dist_max) == (20.0, 120.0)
    assert cfg.pathloss_exp == 2.0
    assert cfg.noise_power == pytest.approx(dbm_to_watts(-129.1), rel=1e-15)
    assert cfg.bits_per_packet == 50.0         # B = R*K, derived
    assert cfg.warmup_phases == 30             # 10*(L+1) default


@pytest.mark.parametrize("kwargs", [
    {"csi_mode": "instantaneous", "harq_mode": "chase_combining"},
    {"harq_mode": "incremental_redundancy", "max_retx": 3},
    {"target_bler": 1e-6, "drop_threshold": 1e-5},
    {"target_bler": 1e-5, "drop_threshold": 1e-5},
    {"dist_min": 120.0, "dist_max": 20.0},
    {"activation_prob": 1.5},
    {"activation_prob": -0.1},
    {"rate": 0.0},
    {"noise_power": 0.0},
    {"n_slots_per_phase": 0},
    {"max_retx": -1},
    {"csi_mode": "oracle"},
    {"access_mode": "tdma"},
    {"pairing_strategy": "greedy"},
])
def test_config_validation_rejects(kwargs):
    with pytest.raises(ValueError):
        SystemConfig(**kwargs)


def test_distance_degenerate_interval():
    box = SimpleNamespace(dist_min=50.0, dist_max=50.0)
    gen = np.random.default_rng(0)
    assert draw_distance(gen, box) == 50.0


def test_distance_support_and_mean():
    box = SimpleNamespace(dist_min=20.0, dist_max=120.0)
    gen = np.random.default_rng(1)
    draws = np.array([draw_distance(gen, box) for _ in range(1_000_000)])
    assert draws.min() >= 20.0 and draws.max() <= 120.0
    assert abs(draws.mean() - 70.0) < 0.5


def test_channel_gain_unit_mean():
    draws = draw_channel_gain(np.random.default_rng(2), size=1_000_000)
    assert draws.min() >= 0.0
    assert abs(draws.mean() - 1.0) < 0.01


def test_received_snr_values():
    assert received_snr(1.0, 1.0, 1.0, 1.0) == 1.0
    assert received_snr(0.0, 3.7, 400.0, 1e-16) == 0.0
    # d=20, alpha=2, noise -129.1 dBm quoted as 1.23e-16 W
    assert received_snr(2.0, 0.5, 400.0, 1.23e-16) == pytest.approx(2.033e13, rel=1e-3)
    # array form broadcasts
    out = received_snr(np.array([1.0, 2.0]), 0.5, 1.0, 1.0)
    assert np.allclose(out, [0.5, 1.0])


def test_rng_stream_reproducible_and_order_free():
    a = RngStream(7, (3, 1, 2)).generator().random(32)
    b = RngStream(7, (3, 1, 2)).generator().random(32)
    assert np.array_equal(a, b)
    # consuming other streams in arbitrary order must not disturb any stream
    RngStream(7, (0, 0, 0)).generator().random(1000)
    c = RngStream(7, (3, 1, 2)).generator().random(32)
    assert np.array_equal(a, c)
    d = RngStream(7, (3, 1, 3)).generator().random(32)
    assert not np.array_equal(a, d)
    assert not np.array_equal(a, RngStream(8, (3, 1, 2)).generator().random(32))


def test_rng_stream_thread_transfer():
    streams = [RngStream(11, (i,)) for i in range(8)]
    with ThreadPoolExecutor(max_workers=4) as pool:
        threaded = list(pool.map(lambda s: s.generator().random(16), streams))
    serial = [s.generator().random(16) for s in streams]
    for got, want in zip(threaded, serial):
        assert np.array_equal(got, want)


def test_make_users_pathloss_exact():
    cfg = SystemConfig(pathloss_exp=2.7)
    users = make_users(cfg, trial=4)
    assert len(users) == cfg.n_users
    for u in users:
        assert cfg.dist_min <= u.distance <= cfg.dist_max
        assert u.pathloss == u.distance ** cfg.pathloss_exp  # exact, no rounding


def test_make_users_distance_redraw_policy():
    cfg = SystemConfig()
    d0 = [u.distance for u in make_users(cfg, trial=0)]
    d1 = [u.distance for u in make_users(cfg, trial=1)]
    assert d0 != d1
    frozen = SystemConfig(redraw_distances=False)
    e0 = [u.distance for u in make_users(frozen, trial=0)]
    e1 = [u.distance for u in make_users(frozen, trial=5)]
    assert e0 == e1
    # distance stream is tied to (trial tag, purpose, user id)
    s = RngStream(cfg.seed, (0, PURPOSE_DISTANCE, 3))
    assert e0[3] == draw_distance(s, cfg)
