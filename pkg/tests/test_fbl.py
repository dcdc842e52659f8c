"""Instantaneous-CSI power planning: CDF-inversion identities, a dense-grid
oracle for the lookahead value, curve shape, and the disk caches."""
import math

import numpy as np
import pytest
from scipy import special

from harqsim.fbl import (FblPlanner, PowerCurve, build_power_curve,
                         last_round_power, load_power_curve, lookup_power,
                         penultimate_power, save_power_curve, _psi1,
                         _rho_required)
from harqsim.harq import fbl_round_error, mi_round_stats, normal_cdf

NOISE = 1.2302687708123811e-16


# --- final round -----------------------------------------------------------------

def test_last_round_power_inverts_cdf():
    x = math.log(2.0)
    for mu, nu in ((0.0, 0.0), (0.5, 0.01)):
        power = last_round_power(0.7, 55.0 ** 2, mu, nu, 1.0, 50, 1e-5, NOISE)
        rho = power * 0.7 / (55.0 ** 2 * NOISE)
        achieved = normal_cdf(x, mu + math.log1p(rho),
                              nu + 2.0 * rho / (50 * (1.0 + rho)))
        assert achieved == pytest.approx(1e-5, rel=1e-8)


def test_last_round_power_reliable_state_is_free():
    # accumulated information already past the threshold with margin
    assert last_round_power(1.0, 1.0, 5.0, 1e-4, 1.0, 50, 1e-5, 1.0) == 0.0


def test_last_round_power_validation():
    with pytest.raises(ValueError):
        last_round_power(0.0, 1.0, 0.0, 0.0, 1.0, 50, 1e-5, 1.0)


def test_last_round_power_large_blocklength_limit():
    # vanishing dispersion: the requirement collapses to snr >= 2^R - 1
    for rate in (1.0, 2.0):
        got = last_round_power(1.0, 1.0, 0.0, 0.0, rate, 10 ** 9, 1e-5, 1.0)
        assert got == pytest.approx(2.0 ** rate - 1.0, rel=1e-2)


# --- penultimate round vs dense lookahead grid -------------------------------------

def _psi1_oracle(z, mu, nu, rate, blocklength, eps_tar, eps_drop, n=4000):
    """Brute-force lookahead: power now + round failure times the expected
    final-round cost over next-phase fades above the drop threshold."""
    e1_tail = special.exp1(-math.log1p(-eps_drop))
    rho_now = _rho_required(mu, nu, rate, blocklength, eps_tar)
    if rho_now <= 0.0:
        return 0.0, 0.0
    rhos = np.geomspace(rho_now * 1e-8, rho_now, n)
    post_mu = mu + np.log1p(rhos)
    post_nu = nu + 2.0 * rhos / (blocklength * (1.0 + rhos))
    eps_round = np.asarray([
        fbl_round_error(rate, mu, nu, mi_round_stats(r, r / (1.0 + r), blocklength))
        for r in rhos])
    tails = _rho_required(post_mu, post_nu, rate, blocklength, eps_tar)
    objective = rhos / z + eps_round * tails * e1_tail
    skip = rho_now * e1_tail
    return min(float(objective.min()), skip), skip


def test_psi1_matches_dense_grid_oracle():
    for z in (0.05, 0.3, 1.0, 4.0, 12.0):
        for mu, nu in ((0.0, 0.0), (0.3, 0.006)):
            power, value, skip = _psi1(z, mu, nu, 1.0, 50, 1e-5, 1e-6)
            ref, skip_ref = _psi1_oracle(z, mu, nu, 1.0, 50, 1e-5, 1e-6)
            assert float(skip) == pytest.approx(skip_ref, rel=1e-12)
            assert float(value) <= ref * (1.0 + 1e-4)
            assert float(value) >= ref * (1.0 - 1e-3)


def test_psi1_postpone_region_and_reliable_state():
    power, value, skip = _psi1(0.02, 0.0, 0.0, 1.0, 50, 1e-5, 1e-6)
    assert float(power) == 0.0            # gain too weak: skipping is cheaper
    assert float(value) == pytest.approx(float(skip), rel=1e-12)
    power, value, skip = _psi1(1.0, 5.0, 1e-4, 1.0, 50, 1e-5, 1e-6)
    assert float(power) == 0.0 and float(value) == 0.0 and float(skip) == 0.0


def test_penultimate_power_wrapper_scaling():
    raw, _, _ = _psi1(0.9, 0.0, 0.0, 1.0, 50, 1e-5, 1e-6)
    got = penultimate_power(0.9, 60.0 ** 2, 0.0, 0.0, 1.0, 50, 1e-5, 1e-6, NOISE)
    assert got == pytest.approx(float(raw) * 60.0 ** 2 * NOISE, rel=1e-12)
    with pytest.raises(ValueError):
        penultimate_power(0.0, 1.0, 0.0, 0.0, 1.0, 50, 1e-5, 1e-6, 1.0)


# --- power-vs-gain curves ----------------------------------------------------------

@pytest.fixture(scope="module")
def curves(default_planner):
    # the planner fixture already paid for the two-retransmission build
    return {
        0: build_power_curve(0, 1.0, 50, 1e-5, 1e-6),
        1: build_power_curve(1, 1.0, 50, 1e-5, 1e-6),
        2: default_planner.curve,
    }


def test_curve_shapes(curves):
    for remaining, curve in curves.items():
        gains = np.asarray([p[0] for p in curve.grid])
        powers = np.asarray([p[1] for p in curve.grid])
        assert np.all(np.diff(gains) > 0)
        pos = np.nonzero(powers > 0)[0]
        assert pos.size > 0
        # non-increasing from the first transmit gain onward
        assert np.all(np.diff(powers[pos[0]:]) <= 1e-15)
        if remaining == 0:
            # final round: always transmit, exact inverse-gain law
            assert curve.postpone_below == 0.0
            assert np.all(powers > 0)
            assert np.ptp(powers * gains) <= powers[0] * gains[0] * 1e-9
        else:
            assert curve.postpone_below > 0.0
            assert np.all(powers[gains <= curve.postpone_below] == 0.0)
            assert np.all(powers[gains > curve.postpone_below] > 0.0)


def test_deeper_lookahead_waits_longer(curves):
    # more rounds in hand make skipping a weak channel cheaper
    assert curves[2].postpone_below > curves[1].postpone_below > 0.0


def test_lookup_power_interpolation_and_scaling(curves):
    curve = curves[1]
    gains = np.asarray([p[0] for p in curve.grid])
    powers = np.asarray([p[1] for p in curve.grid])
    i = np.searchsorted(gains, curve.postpone_below * 20.0)
    g_mid = math.sqrt(gains[i] * gains[i + 1])
    got = lookup_power(curve, g_mid, 1.0, 1.0)
    assert min(powers[i], powers[i + 1]) <= got <= max(powers[i], powers[i + 1])
    assert lookup_power(curve, g_mid, 70.0 ** 2, NOISE) == pytest.approx(
        got * 70.0 ** 2 * NOISE, rel=1e-12)
    assert lookup_power(curve, curve.postpone_below * 0.5, 1.0, 1.0) == 0.0
    assert lookup_power(curve, gains[-1] * 10.0, 1.0, 1.0) == pytest.approx(
        powers[-1], rel=1e-12)
    arr = lookup_power(curve, np.asarray([g_mid, gains[-1] * 10.0]), 1.0, 1.0)
    assert arr.shape == (2,)


def test_curve_validation():
    with pytest.raises(ValueError):
        PowerCurve(0, 1.0, 50, 1e-5, 1e-6, ((1.0, 2.0), (1.0, 1.0)), 0.0)
    with pytest.raises(ValueError):
        build_power_curve(3, 1.0, 50, 1e-5, 1e-6)


def test_curve_save_load_round_trip(curves, tmp_path):
    curve = curves[1]
    path = str(tmp_path / "curve.txt")
    save_power_curve(curve, path)
    loaded = load_power_curve(path)
    assert loaded == curve
    bad = tmp_path / "bad.txt"
    bad.write_text("nope\n")
    with pytest.raises(ValueError):
        load_power_curve(str(bad))


# --- planner bundle ----------------------------------------------------------------

def test_planner_cache_round_trip(tmp_path):
    cache = str(tmp_path)
    first = FblPlanner(1, 1.0, 50, 1e-3, 1e-4, cache_dir=cache)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    second = FblPlanner(1, 1.0, 50, 1e-3, 1e-4, cache_dir=cache)
    assert second.curve == first.curve
    gains = np.geomspace(1e-4, 10.0, 50)
    assert np.array_equal(second.round0_power(gains), first.round0_power(gains))
    assert np.array_equal(second.round0_postpone_cost(gains),
                          first.round0_postpone_cost(gains))
    # a corrupt cache file is ignored and rebuilt, not trusted
    files[0].write_text("garbage\n")
    third = FblPlanner(1, 1.0, 50, 1e-3, 1e-4, cache_dir=cache)
    assert third.curve == first.curve


def test_planner_round0_matches_curve(default_planner):
    curve = default_planner.curve
    gains = np.geomspace(curve.grid[0][0], curve.grid[-1][0], 80)
    want = lookup_power(curve, gains, 1.0, 1.0)
    assert np.allclose(default_planner.round0_power(gains), want, rtol=1e-12)


def test_planner_postpone_cost_shape(default_planner):
    curve = default_planner.curve
    gains = np.geomspace(curve.grid[0][0], curve.grid[-1][0], 120)
    cost = default_planner.round0_postpone_cost(gains)
    assert np.all(cost >= 0.0)
    assert np.all(cost[gains <= curve.postpone_below] == 0.0)
    # skipping hurts more the better the channel is
    live = cost[gains > curve.postpone_below * 1.01]
    assert np.all(np.diff(live) >= -1e-12)
    assert live[-1] > 0.0


def test_planner_last_rho_and_mid_decision(default_planner):
    mus = np.asarray([0.0, 0.4])
    nus = np.asarray([0.0, 0.01])
    want = _rho_required(mus, nus, 1.0, 50, 1e-5)
    assert np.allclose(default_planner.last_rho(mus, nus), want, rtol=1e-12)
    power, value, skip = default_planner.mid_decision(1.0, 0.0, 0.0)
    ref = _psi1(1.0, 0.0, 0.0, 1.0, 50, 1e-5, 1e-6)
    assert float(power) == pytest.approx(float(ref[0]), rel=1e-12)
    assert float(value) == pytest.approx(float(ref[1]), rel=1e-12)
    assert float(skip) == pytest.approx(float(ref[2]), rel=1e-12)


def test_planner_max_retx_limit():
    with pytest.raises(ValueError):
        FblPlanner(3, 1.0, 50, 1e-5, 1e-6)
