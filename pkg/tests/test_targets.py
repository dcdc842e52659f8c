"""Target schedules: independent quadrature oracles for the reduced costs."""
import math

import numpy as np
import pytest
from scipy import optimize

from harqsim import SystemConfig
from harqsim.core import PacketState
from harqsim.harq import power_for_target
from harqsim.targets import (TargetSchedule, cc_expected_power_factor,
                             cc_optimal_targets, clear_caches,
                             expected_oma_power, ir_initial_target,
                             ir_next_target, ir_psi_last, load_target_cache,
                             save_target_cache, _expected_power_stat,
                             _ir_three_round, _ir_two_round)


def _cc_factor_quadrature(eps, n=120):
    """Expected-power factor from the unreduced nested failure integrals.

    Round i costs 1/theta_i per unit of entering residual; a failure at
    normalized draw g leaves the fraction (1 - g/theta) of it behind.
    """
    eps = list(eps)
    theta = [-math.log1p(-e) for e in eps]
    x, w = np.polynomial.legendre.leggauss(n)

    def seg(t):
        return 0.5 * t * (x + 1.0), 0.5 * t * w

    total = 1.0 / theta[0]
    if len(eps) > 1:
        g0, w0 = seg(theta[0])
        r0 = 1.0 - g0 / theta[0]
        total += float(np.sum(w0 * np.exp(-g0) * r0)) / theta[1]
    if len(eps) > 2:
        g1, w1 = seg(theta[1])
        r01 = r0[:, None] * (1.0 - g1 / theta[1])[None, :]
        wt = (w0 * np.exp(-g0))[:, None] * (w1 * np.exp(-g1))[None, :]
        total += float(np.sum(wt * r01)) / theta[2]
    return total


def _ir_exact_two_round(gamma, eps_pen, eps_last, n=400):
    """Exact two-round cost: quadrature over the failure draw, no Taylor step."""
    th = -math.log1p(-eps_pen)
    x, w = np.polynomial.legendre.leggauss(n)
    g = 0.5 * th * (x + 1.0)
    wg = 0.5 * th * w
    s = gamma * g / th
    resid = (gamma - s) / (1.0 + s)
    p_last = -resid / math.log1p(-eps_last)
    return -gamma / math.log1p(-eps_pen) + float(np.sum(wg * np.exp(-g) * p_last))


# --- schedule container -------------------------------------------------------

def test_schedule_validation():
    ok = TargetSchedule(eps=(0.2, 0.05), mode="cc", budget=0.01)
    assert ok.eps == (0.2, 0.05)
    with pytest.raises(ValueError):
        TargetSchedule(eps=(), mode="cc", budget=1e-5)
    with pytest.raises(ValueError):
        TargetSchedule(eps=(0.0, 0.1), mode="cc", budget=0.0)
    with pytest.raises(ValueError):
        TargetSchedule(eps=(1.0,), mode="cc", budget=1.0)
    with pytest.raises(ValueError):
        TargetSchedule(eps=(0.2, 0.05), mode="cc", budget=0.02)


# --- chase combining -----------------------------------------------------------

def test_cc_factor_matches_nested_quadrature():
    cases = [
        (0.189, 0.0374, 0.0014),
        (0.3, 0.1),
        (0.05,),
        (0.4, 0.2, 0.05),
        (0.01, 0.5, 0.2),
    ]
    for eps in cases:
        ref = _cc_factor_quadrature(eps)
        assert cc_expected_power_factor(eps) == pytest.approx(ref, rel=1e-10)


def test_cc_factor_random_sequences():
    rng = np.random.default_rng(7)
    for _ in range(30):
        n = rng.integers(1, 4)
        eps = rng.uniform(0.005, 0.6, size=n)
        ref = _cc_factor_quadrature(eps)
        assert cc_expected_power_factor(eps) == pytest.approx(ref, rel=1e-9)


def test_cc_optimal_targets_reference_point():
    sched = cc_optimal_targets(2, 1e-5)
    assert sched.mode == "cc"
    assert len(sched.eps) == 3
    assert float(np.prod(sched.eps)) == pytest.approx(1e-5, rel=1e-9)
    for got, want in zip(sched.eps, (0.189, 0.0374, 0.0014)):
        assert got == pytest.approx(want, abs=3e-3)


def test_cc_optimal_targets_single_round():
    sched = cc_optimal_targets(0, 1e-3)
    assert sched.eps == (1e-3,)


def test_cc_optimal_targets_beats_grid():
    # exhaustive check of the two-round split against a fine grid
    budget = 1e-4
    sched = cc_optimal_targets(1, budget)
    e0 = np.linspace(budget * 10, 0.999, 20000)
    factors = [cc_expected_power_factor((e, budget / e)) for e in e0]
    grid_best = e0[int(np.argmin(factors))]
    opt_factor = cc_expected_power_factor(sched.eps)
    assert opt_factor <= min(factors) * (1.0 + 1e-9)
    assert sched.eps[0] == pytest.approx(grid_best, abs=(e0[1] - e0[0]))


def test_cc_optimal_targets_beats_uniform_split():
    for budget in (1e-3, 1e-5, 1e-6):
        sched = cc_optimal_targets(2, budget)
        uniform = (budget ** (1.0 / 3.0),) * 3
        assert (cc_expected_power_factor(sched.eps)
                < cc_expected_power_factor(uniform))


def test_cc_optimal_targets_validation():
    for budget in (0.0, 1.0, -0.5, 2.0):
        with pytest.raises(ValueError):
            cc_optimal_targets(2, budget)
    with pytest.raises(ValueError):
        cc_optimal_targets(-1, 1e-5)


def test_cc_targets_memoized_and_reproducible():
    a = cc_optimal_targets(2, 1e-5)
    assert cc_optimal_targets(2, 1e-5) is a
    clear_caches()
    b = cc_optimal_targets(2, 1e-5)
    assert b is not a
    assert b.eps == a.eps


def test_cc_argmin_scale_invariant():
    """The optimal split must not move when gamma, pathloss, or noise rescale.

    The unreduced dimensional objective is evaluated on a fixed grid for the
    two-round case; the argmin index has to agree across scalings.
    """
    def grid_argmin(gamma, pathloss, noise, budget, n=160):
        e0 = np.exp(np.linspace(math.log(budget * 5), math.log(0.95), n))
        x, w = np.polynomial.legendre.leggauss(80)
        vals = []
        for e in e0:
            th = -math.log1p(-e)
            p0 = gamma * pathloss * noise / th
            g = 0.5 * th * (x + 1.0)
            wg = 0.5 * th * w
            resid = gamma - p0 * g / (pathloss * noise)
            p1 = -resid * pathloss * noise / math.log1p(-(budget / e))
            vals.append(p0 + float(np.sum(wg * np.exp(-g) * p1)))
        return int(np.argmin(vals))

    base = grid_argmin(1.0, 70.0 ** 2, 1.23e-16, 1e-5)
    for sc in (0.1, 10.0):
        assert grid_argmin(sc * 1.0, 70.0 ** 2, 1.23e-16, 1e-5) == base
        assert grid_argmin(1.0, sc * 70.0 ** 2, 1.23e-16, 1e-5) == base
        assert grid_argmin(1.0, 70.0 ** 2, sc * 1.23e-16, 1e-5) == base


# --- incremental redundancy ----------------------------------------------------

def test_ir_psi_last_near_exact_cost():
    # the Taylor stage cost tracks the exact quadrature cost closely in the
    # operating region and within a few percent up to eps_pen = 0.4
    for gamma in (0.3, 1.0, 2.0, 4.0):
        for eps_pen in (0.05, 0.1, 0.2, 0.4):
            approx = ir_psi_last(gamma, eps_pen, 5e-5, 1.0, 1.0)
            exact = _ir_exact_two_round(gamma, eps_pen, 5e-5)
            rel = abs(approx - exact) / exact
            assert rel < 0.03
            if eps_pen <= 0.1:
                assert rel < 0.005


def test_ir_psi_last_scales_with_pathloss_noise():
    base = ir_psi_last(1.2, 0.1, 1e-4, 1.0, 1.0)
    assert ir_psi_last(1.2, 0.1, 1e-4, 70.0 ** 2, 1.23e-16) == pytest.approx(
        base * 70.0 ** 2 * 1.23e-16, rel=1e-12)


def test_ir_next_target_matches_bounded_search():
    hi = 1.0 - math.exp(-1.0)
    for gamma, budget in ((1.0, 1e-5 / 0.215), (0.5, 1e-4), (3.0, 1e-6)):
        got = ir_next_target(gamma, budget)
        ref = optimize.minimize_scalar(
            lambda e: ir_psi_last(gamma, e, budget / e, 1.0, 1.0),
            bounds=(budget * (1.0 + 1e-9), hi), method="bounded",
            options={"xatol": 1e-12})
        assert got == pytest.approx(ref.x, abs=1e-6)


def test_ir_next_target_pathloss_invariant():
    a = ir_next_target(1.0, 1e-4)
    assert ir_next_target(1.0, 1e-4, pathloss=500.0, noise=1e-15) == a


def test_ir_next_target_large_budget_skips():
    # budget close to 1: postponing beats transmitting, target pushed to 1
    assert ir_next_target(1.0, 0.9) > 0.99


def test_ir_next_target_validation():
    with pytest.raises(ValueError):
        ir_next_target(0.0, 1e-4)
    with pytest.raises(ValueError):
        ir_next_target(-1.0, 1e-4)
    for budget in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            ir_next_target(1.0, budget)


def test_ir_initial_target_reference_point():
    assert ir_initial_target(1.0, 1e-5) == pytest.approx(0.215, abs=0.01)


def test_ir_initial_target_validation():
    for eps in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            ir_initial_target(1.0, eps)


# --- expected power as scheduling cost ------------------------------------------

def test_expected_oma_power_cases():
    cfg_cc = SystemConfig()
    cfg_ir = SystemConfig(harq_mode="incremental_redundancy")
    noise = cfg_cc.noise_power

    fresh = PacketState(owner=0, birth_phase=0, pathloss=2.0, round=0,
                        residual_snr=1.0, budget=1e-5)
    want = 1.0 * 2.0 * noise * cc_expected_power_factor(
        cc_optimal_targets(2, 1e-5).eps)
    assert expected_oma_power(fresh, cfg_cc) == pytest.approx(want, rel=1e-12)

    last = PacketState(owner=0, birth_phase=0, pathloss=2.0, round=2,
                       residual_snr=0.7, budget=3e-3)
    assert expected_oma_power(last, cfg_cc) == power_for_target(
        0.7, 3e-3, 2.0, noise)

    mid = PacketState(owner=0, birth_phase=0, pathloss=2.0, round=1,
                      residual_snr=0.9, budget=4e-4)
    _, psi = _ir_two_round(np.asarray([0.9]), 4e-4)
    assert expected_oma_power(mid, cfg_ir) == pytest.approx(
        float(psi[0]) * 2.0 * noise, rel=1e-12)

    fresh_ir = PacketState(owner=0, birth_phase=0, pathloss=2.0, round=0,
                           residual_snr=1.0, budget=1e-5)
    _, psi3 = _ir_three_round(1.0, 1e-5)
    assert expected_oma_power(fresh_ir, cfg_ir) == pytest.approx(
        psi3 * 2.0 * noise, rel=1e-12)


def test_expected_oma_power_degenerate():
    cfg = SystemConfig()
    done = PacketState(owner=0, birth_phase=0, round=1, residual_snr=0.0,
                       budget=1e-3)
    assert expected_oma_power(done, cfg) == 0.0
    free = PacketState(owner=0, birth_phase=0, round=1, residual_snr=0.5,
                       budget=1.0)
    assert expected_oma_power(free, cfg) == 0.0


def test_expected_oma_power_skip_current():
    cfg = SystemConfig(harq_mode="incremental_redundancy")
    mid = PacketState(owner=0, birth_phase=0, pathloss=2.0, round=1,
                      residual_snr=0.9, budget=4e-4)
    assert expected_oma_power(mid, cfg, skip_current=True) == power_for_target(
        0.9, 4e-4, 2.0, cfg.noise_power)
    last = PacketState(owner=0, birth_phase=0, pathloss=2.0, round=2,
                       residual_snr=0.9, budget=4e-4)
    with pytest.raises(ValueError):
        expected_oma_power(last, cfg, skip_current=True)


def test_expected_power_stage_limits():
    with pytest.raises(ValueError):
        _expected_power_stat(1.0, 4, 1e-5, 1.0, 1.0, "ir", 1.0)
    with pytest.raises(ValueError):
        _expected_power_stat(1.0, 3, 1e-5, 1.0, 1.0, "ir", None)


# --- on-disk memo cache ----------------------------------------------------------

def test_target_cache_round_trip(tmp_path):
    clear_caches()
    sched = cc_optimal_targets(2, 1e-5)
    eps0 = ir_initial_target(1.0, 1e-5)
    path = str(tmp_path / "targets.txt")
    save_target_cache(path)

    clear_caches()
    loaded = load_target_cache(path)
    assert loaded == 2
    assert cc_optimal_targets(2, 1e-5).eps == sched.eps
    assert ir_initial_target(1.0, 1e-5) == eps0


def test_target_cache_missing_and_corrupt(tmp_path):
    assert load_target_cache(str(tmp_path / "absent.txt")) == 0
    bad = tmp_path / "bad.txt"
    bad.write_text("something else\n")
    with pytest.raises(ValueError):
        load_target_cache(str(bad))
    mixed = tmp_path / "mixed.txt"
    mixed.write_text("harqsim-targets v1\nxx 1 2 3\n")
    with pytest.raises(ValueError):
        load_target_cache(str(mixed))
